//! Finite-difference gradient verification (64-bit only).
//!
//! The harness rebuilds the computation for perturbed parameter values, so
//! the closure must be a pure function of the parameter tensors it is
//! handed. Coordinates that sit on a non-smooth point (one-sided slopes
//! disagree, e.g. relu at exactly 0) are excluded and reported as skipped.

use crate::graph::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one `grad_check` run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over all sampled smooth coordinates.
    pub max_rel_err: f64,
    /// Parameter/coordinate index of the worst error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped: usize,
}

/// Central-difference step.
pub const FD_EPSILON: f64 = 1e-5;
/// One-sided slopes differing by more than this relative gap mark a kink.
const KINK_GAP: f64 = 0.05;
/// When analytic and numeric are both below this, the direction is flat
/// (e.g. a conv bias feeding batchnorm) and the comparison is pure noise.
const ZERO_BAND: f64 = 1e-6;

/// Compare analytic gradients of `build` against central finite
/// differences, sampling up to `samples_per_param` coordinates of every
/// parameter. `build` receives a fresh tape plus leaf ids for the current
/// parameter values, in order, and returns the scalar loss node.
pub fn grad_check<F>(
    params: &mut [Tensor<f64>],
    samples_per_param: usize,
    seed: u64,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let eval = |params: &[Tensor<f64>], build: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params
            .iter()
            .map(|p| tape.leaf(p.clone(), false))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &ids)?;
        tape.value(loss).item()
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params
        .iter()
        .map(|p| tape.leaf(p.clone(), true))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &ids)?;
    let f0 = tape.value(loss).item()?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params.iter())
        .map(|(&id, p)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for pi in 0..params.len() {
        let n = params[pi].numel();
        let take = samples_per_param.min(n);
        let mut coords: Vec<usize> = (0..n).collect();
        // Partial Fisher-Yates: the first `take` entries are the sample.
        for i in 0..take {
            let j = rng.gen_range(i..n);
            coords.swap(i, j);
        }
        for &ci in &coords[..take] {
            let orig = params[pi].data()[ci];
            params[pi].data_mut()[ci] = orig + FD_EPSILON;
            let fp = eval(params, &mut build)?;
            params[pi].data_mut()[ci] = orig - FD_EPSILON;
            let fm = eval(params, &mut build)?;
            params[pi].data_mut()[ci] = orig;

            let d_plus = (fp - f0) / FD_EPSILON;
            let d_minus = (f0 - fm) / FD_EPSILON;
            let gap = (d_plus - d_minus).abs() / d_plus.abs().max(d_minus.abs()).max(1e-6);
            if gap > KINK_GAP {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * FD_EPSILON);
            let a = analytic[pi][ci];
            let rel = if a.abs().max(numeric.abs()) < ZERO_BAND {
                0.0
            } else {
                (a - numeric).abs() / a.abs().max(numeric.abs())
            };
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((pi, ci));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn linear_layer_gradient_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&[4, 3], &mut rng);
        let t = randn(&[4, 2], &mut rng);
        let mut params = vec![randn(&[3, 2], &mut rng), randn(&[2], &mut rng)];
        let report = grad_check(&mut params, 8, 1, |tape, ids| {
            let xc = tape.constant(x.clone())?;
            let tc = tape.constant(t.clone())?;
            let y = tape.dense(xc, ids[0], ids[1])?;
            tape.mse(y, tc)
        })
        .unwrap();
        assert_eq!(report.skipped, 0);
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn relu_at_zero_is_skipped() {
        // One coordinate sits exactly on the kink; it must be excluded.
        let mut params = vec![Tensor::from_vec(&[3], vec![0.0f64, 1.0, -1.0]).unwrap()];
        let report = grad_check(&mut params, 3, 2, |tape, ids| {
            let y = tape.relu(ids[0])?;
            tape.sum(y)
        })
        .unwrap();
        assert_eq!(report.skipped, 1, "{report:?}");
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_err < 1e-8);
    }

    #[test]
    fn conv_bn_relu_fc_xent_chain_checks_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&[3, 2, 8, 8], &mut rng);
        let labels = [0usize, 2, 1];
        let mut params = vec![
            randn(&[4, 2, 3, 3], &mut rng), // conv kernel
            randn(&[4], &mut rng),          // conv bias
            randn(&[4], &mut rng),          // gamma
            randn(&[4], &mut rng),          // beta
            randn(&[64, 3], &mut rng),      // fc weight
            randn(&[3], &mut rng),          // fc bias
        ];
        let report = grad_check(&mut params, 6, 3, |tape, ids| {
            let xc = tape.constant(x.clone())?;
            let c = tape.conv2d(xc, ids[0], ids[1], 2, 1)?;
            let bn = tape.batchnorm2d_train(c, ids[2], ids[3], 1e-5)?;
            let r = tape.relu(bn.id)?;
            let flat = tape.reshape(r, &[3, 64])?;
            let logits = tape.dense(flat, ids[4], ids[5])?;
            tape.softmax_xent(logits, &labels)
        })
        .unwrap();
        assert!(report.checked > 20);
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}
