//! Population distribution, EMD non-identicalness, relative accuracy and
//! effective learning rate.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::dataset::{ClassDistribution, Dataset};
use crate::error::{FedError, Result};
use crate::partition::ClientPartition;

/// Pairwise (cascade) summation; the result depends only on the values and
/// their order, not on their count's factorization.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Size-weighted mixture of the client histograms, computed from exact
/// integer counts of the union of client examples.
pub fn population_distribution(
    partition: &ClientPartition,
    dataset: &Dataset,
) -> Result<ClassDistribution> {
    partition.check_dataset(dataset)?;
    let mut totals = vec![0usize; dataset.num_classes()];
    for counts in partition.class_counts(dataset)? {
        for (t, c) in totals.iter_mut().zip(counts) {
            *t += c;
        }
    }
    ClassDistribution::from_counts(&totals)
}

/// L1 distance between two class distributions, in `[0, 2]`.
pub fn emd(q: &ClassDistribution, p: &ClassDistribution) -> Result<f64> {
    if q.num_classes() != p.num_classes() {
        return Err(FedError::param(format!(
            "distributions over {} and {} classes",
            q.num_classes(),
            p.num_classes()
        )));
    }
    Ok(q.probs()
        .iter()
        .zip(p.probs())
        .map(|(a, b)| (a - b).abs())
        .sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientEmd {
    pub client_id: String,
    pub size: usize,
    pub emd: f64,
}

/// How far a client population is from identically distributed.
#[derive(Clone, Debug, PartialEq)]
pub struct NonIdenticalnessReport {
    pub population: ClassDistribution,
    pub per_client: Vec<ClientEmd>,
    /// `sum_i (n_i / n) * emd_i`
    pub weighted_average: f64,
}

impl NonIdenticalnessReport {
    /// Writes `client_id,size,emd` rows followed by a `# weighted_average=` summary line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "client_id,size,emd")?;
        for c in &self.per_client {
            writeln!(out, "{},{},{:?}", c.client_id, c.size, c.emd)?;
        }
        writeln!(out, "# weighted_average={:?}", self.weighted_average)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| FedError::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_csv(&mut out)
            .map_err(|e| FedError::io(path, e))?;
        out.flush().map_err(|e| FedError::io(path, e))
    }
}

pub fn non_identicalness(
    partition: &ClientPartition,
    dataset: &Dataset,
) -> Result<NonIdenticalnessReport> {
    let population = population_distribution(partition, dataset)?;
    let histograms = partition.histograms(dataset)?;
    let n = partition.total_assigned() as f64;
    let mut per_client = Vec::with_capacity(partition.len());
    let mut terms = Vec::with_capacity(partition.len());
    for (client, q) in partition.clients().iter().zip(&histograms) {
        let d = emd(q, &population)?;
        let size = client.indices.len();
        terms.push(size as f64 / n * d);
        per_client.push(ClientEmd {
            client_id: client.id.clone(),
            size,
            emd: d,
        });
    }
    Ok(NonIdenticalnessReport {
        population,
        per_client,
        weighted_average: pairwise_sum(&terms),
    })
}

/// Size-weighted mean EMD of a subset of clients against a reference distribution.
pub fn weighted_emd(
    histograms: &[&ClassDistribution],
    sizes: &[usize],
    reference: &ClassDistribution,
) -> Result<f64> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return Err(FedError::param("weighted EMD over zero examples"));
    }
    let terms = histograms
        .iter()
        .zip(sizes)
        .map(|(q, &s)| emd(q, reference).map(|d| s as f64 / n as f64 * d))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum(&terms))
}

pub fn relative_accuracy(federated_acc: f64, centralized_acc: f64) -> Result<f64> {
    if !(centralized_acc > 0.0) {
        return Err(FedError::param("centralized accuracy must be positive"));
    }
    Ok(federated_acc / centralized_acc)
}

/// Steady-state step size of momentum SGD: `eta / (1 - beta)`.
pub fn effective_learning_rate(eta: f64, beta: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&beta) {
        return Err(FedError::param(format!(
            "momentum must lie in [0, 1), got {beta}"
        )));
    }
    if !(eta > 0.0) {
        return Err(FedError::param("learning rate must be positive"));
    }
    Ok(eta / (1.0 - beta))
}

/// Inverse of [`effective_learning_rate`]: the base rate giving `eta_eff` at momentum `beta`.
pub fn base_learning_rate(eta_eff: f64, beta: f64) -> Result<f64> {
    effective_learning_rate(eta_eff, beta)?;
    Ok(eta_eff * (1.0 - beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::IndexSet;
    use crate::partition::Client;
    use proptest::prelude::*;

    fn dist(v: &[f64]) -> ClassDistribution {
        ClassDistribution::new(v.to_vec()).unwrap()
    }

    fn two_class_partition(sizes: &[(usize, usize)]) -> (Dataset, ClientPartition) {
        // sizes[k] = (count of class 0, count of class 1) for client k.
        let mut labels = Vec::new();
        let mut clients = Vec::new();
        for (k, &(a, b)) in sizes.iter().enumerate() {
            let start = labels.len();
            labels.extend(std::iter::repeat_n(0, a));
            labels.extend(std::iter::repeat_n(1, b));
            clients.push(Client {
                id: format!("c{k}"),
                indices: IndexSet::new((start..labels.len()).collect()),
            });
        }
        let n = labels.len();
        let d = Dataset::new(vec![0.0; n], 1, labels, 2).unwrap();
        let p = ClientPartition::new(clients, &d).unwrap();
        (d, p)
    }

    #[test]
    fn population_cases() {
        let (d, p) = two_class_partition(&[(2, 0), (0, 2)]);
        assert_eq!(
            population_distribution(&p, &d).unwrap().probs(),
            &[0.5, 0.5]
        );

        let (d, p) = two_class_partition(&[(1, 2)]);
        assert_eq!(
            population_distribution(&p, &d).unwrap(),
            p.histograms(&d).unwrap()[0]
        );

        let (d, p) = two_class_partition(&[(1, 0), (0, 3)]);
        assert_eq!(
            population_distribution(&p, &d).unwrap().probs(),
            &[0.25, 0.75]
        );
    }

    #[test]
    fn emd_cases() {
        let p = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(emd(&p, &p).unwrap(), 0.0);
        assert_eq!(emd(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])).unwrap(), 2.0);
        assert_eq!(emd(&dist(&[1.0, 0.0]), &dist(&[0.5, 0.5])).unwrap(), 1.0);
        assert!(matches!(
            emd(&dist(&[1.0]), &dist(&[0.5, 0.5])),
            Err(FedError::Param(_))
        ));
    }

    #[test]
    fn non_identicalness_cases() {
        let (d, p) = two_class_partition(&[(1, 1), (2, 2), (3, 3)]);
        assert_eq!(non_identicalness(&p, &d).unwrap().weighted_average, 0.0);

        let (d, p) = two_class_partition(&[(4, 0), (0, 4)]);
        let r = non_identicalness(&p, &d).unwrap();
        assert!(r.per_client.iter().all(|c| c.emd == 1.0));
        assert_eq!(r.weighted_average, 1.0);
    }

    #[test]
    fn report_csv_shape() {
        let (d, p) = two_class_partition(&[(4, 0), (0, 4)]);
        let mut buf = Vec::new();
        non_identicalness(&p, &d)
            .unwrap()
            .write_csv(&mut buf)
            .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "client_id,size,emd\nc0,4,1.0\nc1,4,1.0\n# weighted_average=1.0\n"
        );
    }

    #[test]
    fn relative_accuracy_cases() {
        assert_eq!(relative_accuracy(0.5, 0.5).unwrap(), 1.0);
        assert!((relative_accuracy(0.286, 0.572).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(relative_accuracy(0.0, 0.9).unwrap(), 0.0);
        assert!(relative_accuracy(0.3, 0.0).is_err());
    }

    #[test]
    fn effective_learning_rate_cases() {
        assert_eq!(effective_learning_rate(0.01, 0.0).unwrap(), 0.01);
        assert!((effective_learning_rate(0.01, 0.9).unwrap() - 0.1).abs() < 1e-15);
        assert!((effective_learning_rate(0.001, 0.99).unwrap() - 0.1).abs() < 1e-14);
        assert!(effective_learning_rate(0.01, 1.0).is_err());
        assert!(effective_learning_rate(0.01, -0.1).is_err());
        assert!((base_learning_rate(0.1, 0.9).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let v: Vec<f64> = (0..1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    fn arb_counts() -> impl Strategy<Value = Vec<(usize, usize)>> {
        prop::collection::vec(
            (0usize..6, 0usize..6).prop_filter("non-empty", |(a, b)| a + b > 0),
            1..8,
        )
    }

    proptest! {
        #[test]
        fn scaling_sizes_preserves_average(counts in arb_counts(), scale in 1usize..5) {
            let (d, p) = two_class_partition(&counts);
            let scaled: Vec<_> = counts.iter().map(|&(a, b)| (a * scale, b * scale)).collect();
            let (ds, ps) = two_class_partition(&scaled);
            let a = non_identicalness(&p, &d).unwrap().weighted_average;
            let b = non_identicalness(&ps, &ds).unwrap().weighted_average;
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=2.0).contains(&a));
        }

        #[test]
        fn population_is_size_weighted_mixture(counts in arb_counts()) {
            let (d, p) = two_class_partition(&counts);
            let pop = population_distribution(&p, &d).unwrap();
            let n = p.total_assigned() as f64;
            let hists = p.histograms(&d).unwrap();
            for c in 0..2 {
                let mix: f64 = hists.iter().zip(p.sizes()).map(|(h, s)| s as f64 / n * h.get(c)).sum();
                prop_assert!((mix - pop.get(c)).abs() < 1e-12);
            }
        }
    }
}
