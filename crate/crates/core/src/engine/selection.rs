//! Per-round client selection.

use rand::Rng;

use crate::error::{FedError, Result};
use crate::partition::ClientPartition;

fn check_goal(partition: &ClientPartition, k: usize) -> Result<()> {
    if k == 0 || k > partition.len() {
        return Err(FedError::param(format!(
            "report goal {k} must lie in [1, {}]",
            partition.len()
        )));
    }
    Ok(())
}

/// `k` distinct client positions, uniformly without replacement, in draw order.
pub fn select_clients_uniform<R: Rng + ?Sized>(
    partition: &ClientPartition,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_goal(partition, k)?;
    let mut pool: Vec<usize> = (0..partition.len()).collect();
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(k);
    Ok(pool)
}

/// `k` distinct client positions drawn one at a time with probability
/// proportional to client size, renormalizing over the remaining clients
/// after each draw.
///
/// With equal sizes this is the uniform scheme, and the uniform sampler is
/// used so both modes consume the selection stream identically.
pub fn select_clients_weighted<R: Rng + ?Sized>(
    partition: &ClientPartition,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_goal(partition, k)?;
    let mut weights: Vec<u64> = partition.sizes().into_iter().map(|s| s as u64).collect();
    if weights.windows(2).all(|w| w[0] == w[1]) {
        return select_clients_uniform(partition, k, rng);
    }
    let mut total: u64 = weights.iter().sum();
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let mut r = rng.random_range(0..total);
        let pick = weights
            .iter()
            .position(|&w| {
                if r < w {
                    true
                } else {
                    r -= w;
                    false
                }
            })
            .expect("draw below remaining total");
        total -= weights[pick];
        weights[pick] = 0;
        chosen.push(pick);
    }
    Ok(chosen)
}
