//! Local training on one client.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::{class_histogram, ClassDistribution, Dataset};
use crate::engine::FedConfig;
use crate::error::{FedError, Result};
use crate::model::{Batch, ModelParams, ModelSpec};
use crate::partition::Client;

/// Class distribution `p(y)` the server wants clients to optimize for.
/// Only these `C` scalars travel from server to client.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetDistribution(pub ClassDistribution);

impl TargetDistribution {
    pub fn uniform(num_classes: usize) -> Self {
        TargetDistribution(ClassDistribution::uniform(num_classes))
    }
}

/// Per-class importance weights `p(c) / q_k(c)`; zero for classes the client
/// does not hold.
pub fn importance_weights(
    target: &TargetDistribution,
    client_hist: &ClassDistribution,
) -> Result<Vec<f64>> {
    if target.0.num_classes() != client_hist.num_classes() {
        return Err(FedError::param(
            "target and client histograms differ in class count",
        ));
    }
    Ok(target
        .0
        .probs()
        .iter()
        .zip(client_hist.probs())
        .map(|(&p, &q)| if q > 0.0 { p / q } else { 0.0 })
        .collect())
}

/// What a client reports after local training.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: String,
    /// `theta_start - theta_final`
    pub delta: Vec<f64>,
    /// Aggregation weight: the local dataset size, or the virtual client size under FedVC.
    pub num_examples: usize,
    pub local_steps_taken: usize,
    /// Mean batch objective over the local steps, if any were taken.
    pub mean_loss: Option<f64>,
}

/// Example slots this client trains on this round, already in batch order.
fn local_schedule<R: Rng + ?Sized>(
    indices: &[usize],
    config: &FedConfig,
    rng: &mut R,
) -> (Vec<usize>, usize) {
    let n_k = indices.len();
    let b = config.batch_size;
    if config.use_fedvc {
        let size = config
            .virtual_size
            .expect("validated: FedVC needs a virtual size");
        let slots = if n_k >= size {
            let mut v = indices.to_vec();
            v.shuffle(rng);
            v.truncate(size);
            v
        } else {
            (0..size)
                .map(|_| indices[rng.random_range(0..n_k)])
                .collect()
        };
        return (slots, size / b);
    }
    // Epochs are consumed as a stream of fresh shuffles; floor(E * n_k) slots
    // in full batches of B. A client too small for one full batch takes a
    // single short batch instead.
    let total = (config.local_epochs * n_k as f64).floor() as usize;
    let mut slots = Vec::with_capacity(total);
    while slots.len() < total {
        let mut epoch = indices.to_vec();
        epoch.shuffle(rng);
        let need = total - slots.len();
        slots.extend(epoch.into_iter().take(need));
    }
    let full = total / b;
    if full == 0 && total > 0 {
        (slots, 1)
    } else {
        slots.truncate(full * b);
        (slots, full)
    }
}

/// Runs local SGD from `theta_start` and returns the accumulated update.
///
/// Under FedIR, each example of class `y` carries weight `p(y) / q_k(y)` with
/// `q_k` the histogram of the client's full local dataset, combined per
/// batch with self-normalization.
pub fn client_update<R: Rng + ?Sized>(
    model: &ModelSpec,
    theta_start: &ModelParams,
    dataset: &Dataset,
    client: &Client,
    config: &FedConfig,
    target: Option<&TargetDistribution>,
    rng: &mut R,
) -> Result<ClientUpdate> {
    let indices = client.indices.as_slice();
    if indices.is_empty() {
        return Err(FedError::param(format!(
            "client {:?} has no data",
            client.id
        )));
    }
    let class_weights = match (config.use_fedir, target) {
        (true, Some(t)) => {
            let hist = class_histogram(dataset, &client.indices)?;
            let w = importance_weights(t, &hist)?;
            if let Some(c) = (0..w.len()).find(|&c| hist.get(c) > 0.0 && !(w[c] > 0.0)) {
                return Err(FedError::Invariant(format!(
                    "client {:?} holds class {c}, which has no target mass",
                    client.id
                )));
            }
            Some(w)
        }
        (true, None) => return Err(FedError::param("FedIR requires a target distribution")),
        (false, _) => None,
    };

    let (slots, steps) = local_schedule(indices, config, rng);
    let mut theta = theta_start.clone();
    let mut loss_sum = 0.0;
    for batch_slots in slots.chunks(config.batch_size.max(1)).take(steps) {
        let batch = match &class_weights {
            Some(w) => {
                let bw = batch_slots.iter().map(|&i| w[dataset.label(i)]).collect();
                Batch::weighted(batch_slots.to_vec(), bw)?
            }
            None => Batch::new(batch_slots.to_vec())?,
        };
        let (out, grad) = model.loss_and_gradient(&theta, dataset, &batch)?;
        loss_sum += out.loss;
        theta = theta.step(grad.as_slice(), config.client_lr)?;
    }

    let delta: Vec<f64> = theta_start
        .flat()
        .iter()
        .zip(theta.flat())
        .map(|(a, b)| a - b)
        .collect();
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(FedError::numeric(format!(
            "client {:?} produced a non-finite update",
            client.id
        )));
    }
    Ok(ClientUpdate {
        client_id: client.id.clone(),
        delta,
        num_examples: if config.use_fedvc {
            config.virtual_size.unwrap_or(indices.len())
        } else {
            indices.len()
        },
        local_steps_taken: steps,
        mean_loss: (steps > 0).then(|| loss_sum / steps as f64),
    })
}
