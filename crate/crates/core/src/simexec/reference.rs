//! Dense single-device evaluation, used as the ground truth for the
//! distributed paths.

use crate::config::{ModelParams, MoeConfig, TokenBatch};
use crate::error::{LlepError, Result};
use crate::router::{route, RouterOutput};
use crate::tensor::{add_scaled_outer, vec_mat_into, Matrix};

/// Routes every batch and evaluates `h = sum_k g_k * (u^T W_{e_k})` token by token.
pub fn reference_forward(batches: &[TokenBatch], params: &ModelParams, config: &MoeConfig) -> Result<Vec<Matrix>> {
    let routings = batches
        .iter()
        .map(|b| route(b, params, config))
        .collect::<Result<Vec<_>>>()?;
    reference_forward_routed(batches, &routings, params, config)
}

/// Same as [`reference_forward`] with routing supplied by the caller.
pub fn reference_forward_routed(
    batches: &[TokenBatch],
    routings: &[RouterOutput],
    params: &ModelParams,
    config: &MoeConfig,
) -> Result<Vec<Matrix>> {
    params.check(config)?;
    check_pairs(batches, routings, config)?;
    let h = config.d_hidden;
    let mut tmp = vec![0.0; h];
    let mut outputs = Vec::with_capacity(batches.len());
    for (batch, routing) in batches.iter().zip(routings) {
        let mut out = Matrix::zeros(batch.len(), h);
        for t in 0..batch.len() {
            let u = batch.tokens.row(t);
            let acc = out.row_mut(t);
            for (&e, &g) in routing.row_indices(t).iter().zip(routing.row_gates(t)) {
                vec_mat_into(u, &params.expert_weights[e], &mut tmp);
                for (a, v) in acc.iter_mut().zip(&tmp) {
                    *a += g * v;
                }
            }
        }
        outputs.push(out);
    }
    Ok(outputs)
}

/// `dL/dW_i = sum over routed slots of g * u (x) dh`, with routing held fixed.
/// `upstream[p]` is `dL/dh` for device `p`, shape `B_p x H`.
pub fn reference_weight_grads(
    batches: &[TokenBatch],
    routings: &[RouterOutput],
    upstream: &[Matrix],
    config: &MoeConfig,
) -> Result<Vec<Matrix>> {
    check_pairs(batches, routings, config)?;
    check_upstream(batches, upstream, config)?;
    let mut grads = vec![Matrix::zeros(config.d_model, config.d_hidden); config.n_experts];
    for ((batch, routing), dh) in batches.iter().zip(routings).zip(upstream) {
        for t in 0..batch.len() {
            for (&e, &g) in routing.row_indices(t).iter().zip(routing.row_gates(t)) {
                add_scaled_outer(&mut grads[e], g, batch.tokens.row(t), dh.row(t));
            }
        }
    }
    Ok(grads)
}

/// Scalar probe `L = sum_p <h_p, upstream_p>`, whose weight gradient is
/// exactly what [`reference_weight_grads`] returns.
pub fn upstream_loss(outputs: &[Matrix], upstream: &[Matrix]) -> f64 {
    outputs
        .iter()
        .zip(upstream)
        .flat_map(|(h, g)| h.as_slice().iter().zip(g.as_slice()))
        .map(|(a, b)| a * b)
        .sum()
}

fn check_pairs(batches: &[TokenBatch], routings: &[RouterOutput], config: &MoeConfig) -> Result<()> {
    if batches.len() != routings.len() {
        return Err(LlepError::shape(format!(
            "{} batches, {} routings",
            batches.len(),
            routings.len()
        )));
    }
    for (b, r) in batches.iter().zip(routings) {
        if r.num_tokens() != b.len() || b.tokens.cols() != config.d_model {
            return Err(LlepError::shape(format!(
                "device {} routing does not match its batch",
                b.device_id
            )));
        }
        r.expert_counts(config.n_experts)?;
    }
    Ok(())
}

pub(crate) fn check_upstream(batches: &[TokenBatch], upstream: &[Matrix], config: &MoeConfig) -> Result<()> {
    if upstream.len() != batches.len() {
        return Err(LlepError::shape(format!(
            "{} upstream blocks for {} devices",
            upstream.len(),
            batches.len()
        )));
    }
    for (b, u) in batches.iter().zip(upstream) {
        if u.shape() != (b.len(), config.d_hidden) {
            return Err(LlepError::shape(format!(
                "upstream for device {} is {:?}",
                b.device_id,
                u.shape()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_single_token() {
        let c = MoeConfig::new(2, 1, 2, 1, 1).unwrap();
        let params = ModelParams::new(
            &c,
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap(),
            vec![
                Matrix::from_rows(&[vec![2.0], vec![3.0]]).unwrap(),
                Matrix::from_rows(&[vec![5.0], vec![7.0]]).unwrap(),
            ],
        )
        .unwrap();
        let batch = TokenBatch::new(0, Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap());
        let out = reference_forward(&[batch], &params, &c).unwrap();
        // logits [1, 0]: expert 0 wins with gate e/(e+1)
        let g = 1f64.exp() / (1f64.exp() + 1.0);
        assert!((out[0].get(0, 0) - g * 5.0).abs() < 1e-15);
    }

    #[test]
    fn loss_gradient_matches_outer_products() {
        let c = MoeConfig::new(2, 2, 1, 1, 1).unwrap();
        let batch = TokenBatch::new(0, Matrix::from_rows(&[vec![2.0]]).unwrap());
        let routing = RouterOutput::new(0, 2, vec![1, 0], vec![0.25, 0.75]).unwrap();
        let up = Matrix::from_rows(&[vec![3.0]]).unwrap();
        let g = reference_weight_grads(&[batch], &[routing], &[up], &c).unwrap();
        assert_eq!(g[0].get(0, 0), 0.75 * 2.0 * 3.0);
        assert_eq!(g[1].get(0, 0), 0.25 * 2.0 * 3.0);
    }
}
