//! Server-side reduction and optimizer.

use serde::{Deserialize, Serialize};

use crate::engine::client::ClientUpdate;
use crate::error::{FedError, Result};
use crate::model::ModelParams;

/// Global model, server momentum buffer and round counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub round: usize,
    pub theta: ModelParams,
    pub velocity: Vec<f64>,
}

impl ServerState {
    pub fn new(theta: ModelParams) -> Self {
        let velocity = vec![0.0; theta.len()];
        ServerState {
            round: 0,
            theta,
            velocity,
        }
    }
}

/// `sum_k (n_k / n) * delta_k` over the reporting clients.
///
/// Terms are accumulated in client-id order, so the result does not depend
/// on the order updates arrived in.
pub fn aggregate(updates: &[ClientUpdate], weights: &[usize]) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(FedError::Protocol("no client updates to aggregate".into()));
    }
    if weights.len() != updates.len() {
        return Err(FedError::param(
            "one aggregation weight per update required",
        ));
    }
    let dim = updates[0].delta.len();
    if updates.iter().any(|u| u.delta.len() != dim) {
        return Err(FedError::param("client updates have mismatched layouts"));
    }
    let total: usize = weights.iter().sum();
    if total == 0 {
        return Err(FedError::param("aggregation weights sum to zero"));
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by(|&a, &b| updates[a].client_id.cmp(&updates[b].client_id));

    let n = total as f64;
    let mut mean = vec![0.0; dim];
    for k in order {
        let w = weights[k] as f64 / n;
        for (m, d) in mean.iter_mut().zip(&updates[k].delta) {
            *m += w * d;
        }
    }
    Ok(mean)
}

/// Momentum SGD on the server: `v' = beta v + g`, `theta' = theta - gamma v'`.
/// `beta = 0` is plain server SGD.
pub fn server_step(
    state: &ServerState,
    g_bar: &[f64],
    gamma: f64,
    beta: f64,
) -> Result<ServerState> {
    if g_bar.len() != state.theta.len() || state.velocity.len() != state.theta.len() {
        return Err(FedError::param(
            "aggregate update does not match the model layout",
        ));
    }
    if let Some(j) = g_bar.iter().position(|v| !v.is_finite()) {
        return Err(FedError::numeric(format!(
            "non-finite aggregate update at coordinate {j} in round {}",
            state.round
        )));
    }
    let velocity: Vec<f64> = state
        .velocity
        .iter()
        .zip(g_bar)
        .map(|(v, g)| beta * v + g)
        .collect();
    let theta = state.theta.step(&velocity, gamma)?;
    Ok(ServerState {
        round: state.round + 1,
        theta,
        velocity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn update(id: &str, delta: Vec<f64>) -> ClientUpdate {
        ClientUpdate {
            client_id: id.into(),
            delta,
            num_examples: 1,
            local_steps_taken: 1,
            mean_loss: None,
        }
    }

    fn state(theta: Vec<f64>) -> ServerState {
        let spec = ModelSpec::softmax_linear(1, theta.len() / 2);
        ServerState::new(ModelParams::from_flat(theta, spec.layout()).unwrap())
    }

    #[test]
    fn aggregate_cases() {
        let d = vec![0.3, -1.7, 2.5, 1e-9];
        assert_eq!(aggregate(&[update("a", d.clone())], &[7]).unwrap(), d);

        let g = aggregate(
            &[update("a", d.clone()), update("b", vec![0.0; 4])],
            &[1, 3],
        )
        .unwrap();
        assert_eq!(g, d.iter().map(|x| 0.25 * x).collect::<Vec<_>>());

        let neg: Vec<f64> = d.iter().map(|x| -x).collect();
        let g = aggregate(&[update("a", d.clone()), update("b", neg)], &[2, 2]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        assert!(matches!(aggregate(&[], &[]), Err(FedError::Protocol(_))));
        assert!(aggregate(&[update("a", d.clone()), update("b", vec![0.0])], &[1, 1]).is_err());
    }

    #[test]
    fn aggregate_ignores_arrival_order() {
        let ups: Vec<ClientUpdate> = (0..7)
            .map(|k| {
                update(
                    &format!("c{k}"),
                    (0..5)
                        .map(|j| ((k * 31 + j * 7) as f64).sin() * 1e3)
                        .collect(),
                )
            })
            .collect();
        let weights: Vec<usize> = (0..7).map(|k| 3 + k * k).collect();
        let base = aggregate(&ups, &weights).unwrap();
        let mut perm: Vec<usize> = (0..7).collect();
        perm.reverse();
        perm.swap(1, 4);
        let ups_p: Vec<ClientUpdate> = perm.iter().map(|&i| ups[i].clone()).collect();
        let w_p: Vec<usize> = perm.iter().map(|&i| weights[i]).collect();
        let again = aggregate(&ups_p, &w_p).unwrap();
        assert_eq!(
            base.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            again.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_momentum_is_sgd() {
        let s = state(vec![1.0, 2.0, 3.0, 4.0]);
        let g = [0.5, -0.5, 1.0, 0.0];
        let next = server_step(&s, &g, 0.1, 0.0).unwrap();
        assert_eq!(next.round, 1);
        assert_eq!(next.theta, s.theta.step(&g, 0.1).unwrap());
    }

    #[test]
    fn first_momentum_step_equals_sgd() {
        let s = state(vec![1.0, 2.0, 3.0, 4.0]);
        let g = [0.5, -0.5, 1.0, 0.0];
        let m = server_step(&s, &g, 0.1, 0.9).unwrap();
        assert_eq!(m.velocity, g.to_vec());
        assert_eq!(m.theta, server_step(&s, &g, 0.1, 0.0).unwrap().theta);
    }

    #[test]
    fn constant_update_velocity_converges_to_geometric_limit() {
        let g = [1.0, -2.0];
        let mut s = state(vec![0.0, 0.0]);
        for _ in 0..500 {
            s = server_step(&s, &g, 0.01, 0.9).unwrap();
        }
        for (v, gi) in s.velocity.iter().zip(g) {
            assert!((v - 10.0 * gi).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_update_rejected() {
        let s = state(vec![0.0, 0.0]);
        assert!(server_step(&s, &[f64::NAN, 0.0], 1.0, 0.0)
            .unwrap_err()
            .is_numeric());
    }
}
