//! Finite-difference verification of analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::params::ParamSet;
use crate::rng::Stream;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Number of coordinates checked.
    pub checked: usize,
    /// Largest relative error seen across checked coordinates.
    pub worst_rel: f64,
    /// Parameter holding the worst coordinate.
    pub worst_param: String,
    /// Flat index of the worst coordinate within that parameter.
    pub worst_coord: usize,
    /// Mean relative error across checked coordinates.
    pub mean_rel: f64,
}

/// Compare the analytic gradients stored in `params` against central finite
/// differences of `loss`, sampling up to `per_param` coordinates from every
/// parameter (all of them when the parameter is small enough).
///
/// Relative error is `|a - d| / max(|a|, |d|, floor)`; the floor keeps
/// near-zero coordinates from reading as spurious 100% errors.
pub fn check_gradients<F>(
    params: &mut ParamSet,
    mut loss: F,
    h: f64,
    per_param: usize,
    floor: f64,
    seed: u64,
) -> Result<GradReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut report = GradReport {
        checked: 0,
        worst_rel: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        mean_rel: 0.0,
    };
    let mut rel_sum = 0.0;
    for pi in 0..params.len() {
        let n = params.at(pi).value.numel();
        let coords: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            let mut s = Stream::open(seed, "gradcheck", &[pi as u64]);
            s.permutation(n).into_iter().take(per_param).collect()
        };
        for ci in coords {
            let orig = params.at(pi).value.data()[ci];
            params.at_mut(pi).value.make_mut()[ci] = orig + h;
            let up = loss(params)?;
            params.at_mut(pi).value.make_mut()[ci] = orig - h;
            let down = loss(params)?;
            params.at_mut(pi).value.make_mut()[ci] = orig;

            let fd = (up - down) / (2.0 * h);
            let analytic = params.at(pi).grad.data()[ci];
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor);
            rel_sum += rel;
            report.checked += 1;
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_param = params.at(pi).name.clone();
                report.worst_coord = ci;
            }
        }
    }
    if report.checked > 0 {
        report.mean_rel = rel_sum / report.checked as f64;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn quadratic_loss(ps: &ParamSet) -> Result<f64> {
        // f = sum over params of sum_i c_i x_i^2 with c_i = i+1.
        let mut total = 0.0;
        for p in ps.iter() {
            for (i, x) in p.value.data().iter().enumerate() {
                total += (i + 1) as f64 * x * x;
            }
        }
        Ok(total)
    }

    fn fill_quadratic_grads(ps: &mut ParamSet) {
        for p in ps.iter_mut() {
            let x = p.value.clone();
            let g = p.grad.make_mut();
            for (i, gi) in g.iter_mut().enumerate() {
                *gi = 2.0 * (i + 1) as f64 * x.data()[i];
            }
        }
    }

    fn sample_params() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::new(vec![3], vec![0.3, -0.8, 1.2]).unwrap());
        ps.add("b", Tensor::new(vec![2, 2], vec![0.1, 0.0, -0.4, 2.0]).unwrap());
        ps
    }

    #[test]
    fn correct_gradient_passes() {
        let mut ps = sample_params();
        fill_quadratic_grads(&mut ps);
        let report = check_gradients(&mut ps, quadratic_loss, 1e-5, 16, 1e-8, 7).unwrap();
        assert_eq!(report.checked, 7);
        assert!(report.worst_rel < 1e-7, "worst {}", report.worst_rel);
    }

    #[test]
    fn corrupted_gradient_is_caught_and_named() {
        let mut ps = sample_params();
        fill_quadratic_grads(&mut ps);
        ps.at_mut(1).grad.make_mut()[3] *= 1.5;
        let report = check_gradients(&mut ps, quadratic_loss, 1e-5, 16, 1e-8, 7).unwrap();
        assert!(report.worst_rel > 0.3, "worst {}", report.worst_rel);
        assert_eq!(report.worst_param, "b");
        assert_eq!(report.worst_coord, 3);
    }

    #[test]
    fn perturbation_restores_parameters() {
        let mut ps = sample_params();
        fill_quadratic_grads(&mut ps);
        let before = ps.clone();
        check_gradients(&mut ps, quadratic_loss, 1e-5, 16, 1e-8, 7).unwrap();
        assert!(before.bit_eq(&ps));
    }

    #[test]
    fn sampling_caps_cost_deterministically() {
        let mut ps = sample_params();
        fill_quadratic_grads(&mut ps);
        let r1 = check_gradients(&mut ps, quadratic_loss, 1e-5, 2, 1e-8, 7).unwrap();
        let r2 = check_gradients(&mut ps, quadratic_loss, 1e-5, 2, 1e-8, 7).unwrap();
        assert_eq!(r1.checked, 4);
        assert_eq!(r1.worst_coord, r2.worst_coord);
        assert_eq!(r1.worst_rel.to_bits(), r2.worst_rel.to_bits());
    }
}
