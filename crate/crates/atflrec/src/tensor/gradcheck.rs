//! Finite-difference gradient verification.
//!
//! The oracle here only ever calls forward passes, so it stays independent
//! of the reverse-mode code it is used to check.

use super::Tensor;

/// Outcome of a gradient check over a set of parameters.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error seen across all checked coordinates.
    pub max_rel_err: f64,
    /// Coordinates checked.
    pub checked: usize,
    /// First failing (param index, coordinate, analytic, numeric), if any.
    pub failure: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }
}

/// Central finite difference of a scalar-valued closure with respect to one
/// coordinate of `param`, evaluated by perturbing the leaf buffer in place.
pub fn finite_diff<F: Fn() -> f64>(f: &F, param: &Tensor, coord: usize, h: f64) -> f64 {
    let original = param.to_vec();
    let mut bumped = original.clone();
    bumped[coord] = original[coord] + h;
    param.set_data(&bumped);
    let plus = f();
    bumped[coord] = original[coord] - h;
    param.set_data(&bumped);
    let minus = f();
    param.set_data(&original);
    (plus - minus) / (2.0 * h)
}

/// Compare analytic gradients against central finite differences.
///
/// `build_loss` must rebuild the same deterministic scalar loss from the
/// current parameter values on every call. `coords` optionally limits the
/// check to a sampled subset of coordinates per parameter (all when `None`).
pub fn check_gradients<F: Fn() -> Tensor>(
    build_loss: F,
    params: &[Tensor],
    coords: Option<&[(usize, usize)]>,
    h: f64,
    tol: f64,
) -> GradCheckReport {
    for p in params {
        p.zero_grad();
    }
    let loss = build_loss();
    loss.backward().expect("gradcheck loss must be scalar");
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let scalar_loss = || build_loss().scalar_value();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        failure: None,
    };
    let check_one = |pi: usize, ci: usize, report: &mut GradCheckReport| {
        let numeric = finite_diff(&scalar_loss, &params[pi], ci, h);
        let a = analytic[pi][ci];
        let denom = a.abs().max(numeric.abs());
        // Absolute floor keeps genuinely-zero gradients from blowing up the
        // relative measure on finite-difference noise.
        let err = if denom > 1e-6 {
            (a - numeric).abs() / denom
        } else {
            (a - numeric).abs()
        };
        report.checked += 1;
        if err > report.max_rel_err {
            report.max_rel_err = err;
        }
        if err > tol && report.failure.is_none() {
            report.failure = Some((pi, ci, a, numeric));
        }
    };

    match coords {
        Some(list) => {
            for &(pi, ci) in list {
                check_one(pi, ci, &mut report);
            }
        }
        None => {
            for pi in 0..params.len() {
                for ci in 0..params[pi].numel() {
                    check_one(pi, ci, &mut report);
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::super::{add_to_row, batchnorm_train, concat_cols, gather_rows, pool, PoolMethod};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn randt(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::leaf((0..n).map(|_| rng.gen_range(-1.5..1.5)).collect(), shape, true).unwrap()
    }

    /// A composed graph exercising a rotating subset of ops, driven by seed.
    fn composed_loss(x: &Tensor, w: &Tensor, gamma: &Tensor, beta: &Tensor, seed: u64) -> Tensor {
        let h = x.matmul(w).unwrap();
        let h = match seed % 3 {
            0 => h.silu().unwrap(),
            1 => h.softmax_rows().unwrap(),
            _ => h.layernorm(gamma, beta, 1e-5).unwrap(),
        };
        let h = h.add_bias(beta).unwrap();
        let pooled = h.reduce_rows(match seed % 2 {
            0 => PoolMethod::Mean,
            _ => PoolMethod::Sum,
        })
        .unwrap();
        let logit = pooled.slice_cols(0, 1).unwrap();
        let bce = logit.bce_with_logits((seed % 2) as f64).unwrap();
        let extra = h.transpose().unwrap().sum_all().unwrap();
        pool(&[bce, extra.scale(0.01)], PoolMethod::Sum).unwrap()
    }

    #[test]
    fn finite_difference_property_over_100_seeds() {
        for seed in 0..100u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let x = randt(&mut rng, &[3, 4]);
            let w = randt(&mut rng, &[4, 5]);
            let gamma = randt(&mut rng, &[5]);
            let beta = randt(&mut rng, &[5]);
            let params = [x.clone(), w.clone(), gamma.clone(), beta.clone()];
            let report = check_gradients(
                || composed_loss(&x, &w, &gamma, &beta, seed),
                &params,
                None,
                1e-5,
                1e-4,
            );
            assert!(
                report.ok(),
                "seed {seed}: {:?} max_rel_err {}",
                report.failure,
                report.max_rel_err
            );
        }
    }

    #[test]
    fn gradcheck_batchnorm_train_mode() {
        for seed in 0..20u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(1000 + seed);
            let x = randt(&mut rng, &[6, 3]);
            let gamma = randt(&mut rng, &[3]);
            let beta = randt(&mut rng, &[3]);
            let params = [x.clone(), gamma.clone(), beta.clone()];
            let report = check_gradients(
                || {
                    let (y, _, _) = batchnorm_train(&x, &gamma, &beta, 1e-5).unwrap();
                    y.silu().unwrap().sum_all().unwrap()
                },
                &params,
                None,
                1e-5,
                1e-4,
            );
            assert!(report.ok(), "seed {seed}: {:?}", report.failure);
        }
    }

    #[test]
    fn gradcheck_structural_ops() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let table = randt(&mut rng, &[5, 3]);
        let a = randt(&mut rng, &[4, 3]);
        let v = randt(&mut rng, &[1, 3]);
        let params = [table.clone(), a.clone(), v.clone()];
        let report = check_gradients(
            || {
                let gathered = gather_rows(&table, &[0, 2, 2, 4]).unwrap();
                let merged = concat_cols(&[gathered, a.clone()]).unwrap();
                let shifted = add_to_row(&merged, 1, &concat_cols(&[v.clone(), v.clone()]).unwrap()).unwrap();
                let m = pool(
                    &[shifted.clone(), shifted.scale(0.5)],
                    PoolMethod::Max,
                )
                .unwrap();
                m.reduce_rows(PoolMethod::Max).unwrap().sum_all().unwrap()
            },
            &params,
            None,
            1e-5,
            1e-4,
        );
        assert!(report.ok(), "{:?}", report.failure);
    }
}
