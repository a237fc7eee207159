//! Training losses, EMA teacher maintenance, and schedules.
//!
//! Three losses share one convention: each is a mean over masked positions
//! (and channels, for regression), so gradients are invariant to batch size
//! and span count. An empty mask yields a flagged zero loss, not an error.
//! The EMA teacher update `θ_t ← τ·θ_t + (1−τ)·θ_s` branches exactly at the
//! endpoints so that τ=1 is a bitwise freeze and τ=0 a bitwise copy, and the
//! loss combiner `α·L_code + (1−α)·L_speech` likewise returns the surviving
//! branch untouched at α∈{0,1}.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// One loss contribution: the graph node (when any position was masked),
/// the scalar value, and the number of masked positions it averaged over.
#[derive(Debug, Clone, Copy)]
pub struct LossTerm {
    /// Scalar graph node to backprop through; `None` when no position was
    /// masked (the zero-loss flag).
    pub var: Option<Var>,
    /// Loss value (0.0 when `var` is `None`).
    pub value: f64,
    /// Number of masked positions the mean ran over.
    pub count: usize,
}

impl LossTerm {
    fn empty() -> Self {
        LossTerm { var: None, value: 0.0, count: 0 }
    }

    fn from_var(g: &Graph, var: Var, count: usize) -> Self {
        LossTerm { var: Some(var), value: g.value(var).data()[0], count }
    }
}

/// Masked-prediction cross-entropy: mean over masked positions `t` of
/// `−log softmax(logits_t)[codes_t]`.
///
/// `logits` is the full `T×K` matrix; positions outside the mask do not
/// contribute. An all-false mask returns the flagged zero loss.
pub fn mlm_loss(g: &mut Graph, logits: Var, codes: &[usize], mask: &[bool]) -> Result<LossTerm> {
    let t = g.value(logits).rows();
    if codes.len() != t {
        return Err(Error::Alignment {
            context: alloc::string::String::from("mlm_loss: logits vs codes"),
            left: t,
            right: codes.len(),
        });
    }
    if mask.len() != t {
        return Err(Error::Alignment {
            context: alloc::string::String::from("mlm_loss: logits vs mask"),
            left: t,
            right: mask.len(),
        });
    }
    let idx = crate::masking::masked_indices(mask);
    if idx.is_empty() {
        return Ok(LossTerm::empty());
    }
    let picked_codes: Vec<usize> = idx.iter().map(|&i| codes[i]).collect();
    let picked = g.gather_rows(logits, &idx)?;
    let ce_sum = g.ce_sum_rows(picked, &picked_codes)?;
    let mean = g.scale(ce_sum, 1.0 / idx.len() as f64);
    Ok(LossTerm::from_var(g, mean, idx.len()))
}

/// Masked L2 regression: `(1/2)` times the mean over masked positions and
/// channels of the squared residual `(pred − target)²`.
///
/// `pred` and `target` are both full `T×D`; an all-false mask returns the
/// flagged zero loss.
pub fn regression_loss(
    g: &mut Graph,
    pred: Var,
    target: &Tensor,
    mask: &[bool],
) -> Result<LossTerm> {
    let (t, d) = (g.value(pred).rows(), g.value(pred).cols());
    if target.shape() != g.value(pred).shape() {
        return Err(Error::ShapeMismatch {
            op: "regression_loss",
            expected: alloc::vec![t, d],
            got: target.shape().to_vec(),
        });
    }
    if mask.len() != t {
        return Err(Error::Alignment {
            context: alloc::string::String::from("regression_loss: pred vs mask"),
            left: t,
            right: mask.len(),
        });
    }
    let idx = crate::masking::masked_indices(mask);
    if idx.is_empty() {
        return Ok(LossTerm::empty());
    }
    let mut rows = Vec::with_capacity(idx.len() * d);
    for &i in &idx {
        rows.extend_from_slice(target.row(i));
    }
    let picked_target = Tensor::matrix(idx.len(), d, rows)?;
    let picked_pred = g.gather_rows(pred, &idx)?;
    let half_sq = g.half_sq_sum(picked_pred, picked_target)?;
    let mean = g.scale(half_sq, 1.0 / (idx.len() * d) as f64);
    Ok(LossTerm::from_var(g, mean, idx.len()))
}

/// Linear anneal from `tau_start` to `tau_end` over `anneal_steps`, constant
/// `tau_end` afterwards. `anneal_steps == 0` jumps straight to `tau_end`.
pub fn tau_schedule(step: u64, tau_start: f64, tau_end: f64, anneal_steps: u64) -> f64 {
    if step >= anneal_steps || anneal_steps == 0 {
        return tau_end;
    }
    tau_start + (tau_end - tau_start) * step as f64 / anneal_steps as f64
}

/// In-place EMA blend `θ_t ← τ·θ_t + (1−τ)·θ_s`, elementwise over every
/// parameter. Branches exactly at the endpoints: τ=1 leaves the teacher
/// bitwise untouched, τ=0 copies the student bitwise.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(alloc::format!("EMA decay must lie in [0, 1], got {tau}")));
    }
    if teacher.len() != student.len() {
        return Err(Error::Alignment {
            context: alloc::string::String::from("ema_update: parameter sets"),
            left: teacher.len(),
            right: student.len(),
        });
    }
    if tau == 1.0 {
        return Ok(());
    }
    for i in 0..teacher.len() {
        let s = student.at(i);
        let t = teacher.at_mut(i);
        if t.name != s.name {
            return Err(Error::Config(alloc::format!(
                "ema_update: parameter {i} is `{}` in the teacher but `{}` in the student",
                t.name, s.name
            )));
        }
        if t.value.shape() != s.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                expected: t.value.shape().to_vec(),
                got: s.value.shape().to_vec(),
            });
        }
        if tau == 0.0 {
            t.value = s.value.clone();
        } else {
            let sv = s.value.data();
            for (tv, &x) in t.value.make_mut().iter_mut().zip(sv) {
                *tv = tau * *tv + (1.0 - tau) * x;
            }
        }
    }
    Ok(())
}

/// EMA teacher: a parameter mirror of the student plus the τ anneal.
///
/// Each `update` reads τ from the schedule at the current counter, blends,
/// then increments the counter. Nothing else mutates the teacher, so it stays
/// fixed while the student trains between updates.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub teacher: ParamSet,
    pub tau_start: f64,
    pub tau_end: f64,
    pub anneal_steps: u64,
    pub counter: u64,
}

impl EmaState {
    /// Start tracking from a bitwise copy of the student.
    pub fn new(student: &ParamSet, tau_start: f64, tau_end: f64, anneal_steps: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau_start)
            || !(0.0..=1.0).contains(&tau_end)
            || tau_start > tau_end
        {
            return Err(Error::Config(alloc::format!(
                "EMA schedule needs 0 <= start <= end <= 1, got {tau_start} -> {tau_end}"
            )));
        }
        Ok(EmaState {
            teacher: student.clone(),
            tau_start,
            tau_end,
            anneal_steps,
            counter: 0,
        })
    }

    /// τ the next `update` will use.
    pub fn current_tau(&self) -> f64 {
        tau_schedule(self.counter, self.tau_start, self.tau_end, self.anneal_steps)
    }

    /// One EMA step: blend with the schedule's current τ, advance the counter.
    pub fn update(&mut self, student: &ParamSet) -> Result<()> {
        let tau = self.current_tau();
        ema_update(&mut self.teacher, student, tau)?;
        self.counter += 1;
        Ok(())
    }
}

/// Weighted sum `α·L_code + (1−α)·L_speech` over scalar loss values.
///
/// At α=1 the speech branch may be absent and `l_code` is returned exactly;
/// any α<1 requires `l_speech`. α=0 returns `l_speech` exactly.
pub fn combine_losses(l_code: f64, l_speech: Option<f64>, alpha: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(alloc::format!("loss weight must lie in [0, 1], got {alpha}")));
    }
    if alpha == 1.0 {
        return Ok(l_code);
    }
    let l_speech = l_speech.ok_or_else(|| {
        Error::Config(alloc::format!("loss weight {alpha} < 1 requires a speech-branch loss"))
    })?;
    if alpha == 0.0 {
        return Ok(l_speech);
    }
    Ok(alpha * l_code + (1.0 - alpha) * l_speech)
}

/// Graph-node version of [`combine_losses`]: identical branching, so at the
/// endpoints the surviving branch's node is returned as-is and the other
/// branch contributes no gradient at all.
pub fn combine_loss_vars(
    g: &mut Graph,
    l_code: Var,
    l_speech: Option<Var>,
    alpha: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(alloc::format!("loss weight must lie in [0, 1], got {alpha}")));
    }
    if alpha == 1.0 {
        return Ok(l_code);
    }
    let l_speech = l_speech.ok_or_else(|| {
        Error::Config(alloc::format!("loss weight {alpha} < 1 requires a speech-branch loss"))
    })?;
    if alpha == 0.0 {
        return Ok(l_speech);
    }
    let a = g.scale(l_code, alpha);
    let b = g.scale(l_speech, 1.0 - alpha);
    g.add(a, b)
}

/// Learning-rate schedule shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrKind {
    /// Linear warmup over the first 8% of updates to the peak, then linear
    /// decay to 0 at `total`.
    A,
    /// Tri-stage: 3% linear warmup, hold at the peak through 93% of updates,
    /// then linear decay to 0 at `total`.
    B,
}

/// Piecewise-linear learning rate at `step`, for a run of `total` updates.
///
/// The training loop evaluates this at step s ∈ 1..=total: the end of warmup
/// hits `peak` exactly and step `total` hits 0 (when a decay phase exists —
/// totals too small for one stay in warmup). Steps beyond `total` return 0.
pub fn lr_schedule(step: u64, total: u64, kind: LrKind, peak: f64) -> f64 {
    if total == 0 || step > total {
        return 0.0;
    }
    let frac = |f: f64| -> u64 {
        let r = libm::round(f * total as f64) as u64;
        r.max(1).min(total)
    };
    match kind {
        LrKind::A => {
            let warmup = frac(0.08);
            if step <= warmup {
                peak * step as f64 / warmup as f64
            } else {
                peak * (total - step) as f64 / (total - warmup) as f64
            }
        }
        LrKind::B => {
            let warmup = frac(0.03);
            let decay_start = frac(0.93).max(warmup);
            if step <= warmup {
                peak * step as f64 / warmup as f64
            } else if step <= decay_start {
                peak
            } else {
                peak * (total - step) as f64 / (total - decay_start) as f64
            }
        }
    }
}

/// Per-step loss bundle for the metrics log. Only the fields a model actually
/// produced are present; when both distillation branches exist, `l_cobert`
/// is exactly their α-weighted combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_mlm: Option<f64>,
    pub l_sd: Option<f64>,
    pub l_code: Option<f64>,
    pub l_speech: Option<f64>,
    pub l_cobert: Option<f64>,
    pub alpha: Option<f64>,
    pub masked: usize,
}

impl LossReport {
    const EMPTY: LossReport = LossReport {
        l_mlm: None,
        l_sd: None,
        l_code: None,
        l_speech: None,
        l_cobert: None,
        alpha: None,
        masked: 0,
    };

    /// Report for a masked-prediction (cross-entropy) step.
    pub fn mlm(value: f64, masked: usize) -> Self {
        LossReport { l_mlm: Some(value), masked, ..Self::EMPTY }
    }

    /// Report for a self-distillation (regression) step.
    pub fn self_distill(value: f64, masked: usize) -> Self {
        LossReport { l_sd: Some(value), masked, ..Self::EMPTY }
    }

    /// Report for a cross-modal distillation step; computes the combined
    /// loss through [`combine_losses`] so the invariant holds exactly.
    pub fn cobert(
        l_code: f64,
        l_speech: Option<f64>,
        alpha: f64,
        masked: usize,
    ) -> Result<Self> {
        let l_cobert = combine_losses(l_code, l_speech, alpha)?;
        Ok(LossReport {
            l_code: Some(l_code),
            l_speech,
            l_cobert: Some(l_cobert),
            alpha: Some(alpha),
            masked,
            ..Self::EMPTY
        })
    }

    /// Present loss values as `(name, value)` pairs, in a fixed order, for
    /// the plain-text metrics log.
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        if let Some(v) = self.l_mlm {
            out.push(("mlm", v));
        }
        if let Some(v) = self.l_sd {
            out.push(("self_distill", v));
        }
        if let Some(v) = self.l_code {
            out.push(("code", v));
        }
        if let Some(v) = self.l_speech {
            out.push(("speech", v));
        }
        if let Some(v) = self.l_cobert {
            out.push(("combined", v));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use alloc::vec;

    fn logsumexp(row: &[f64]) -> f64 {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + libm::log(row.iter().map(|&x| libm::exp(x - m)).sum::<f64>())
    }

    #[test]
    fn mlm_uniform_logits_is_ln_k() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(vec![5, 4]), true);
        let term = mlm_loss(&mut g, logits, &[0, 1, 2, 3, 0], &[true; 5]).unwrap();
        assert!((term.value - libm::log(4.0)).abs() < 1e-12);
        assert_eq!(term.count, 5);
        assert!(term.var.is_some());
    }

    #[test]
    fn mlm_margin_drives_loss_to_zero() {
        let loss_at = |margin: f64| {
            let mut g = Graph::new();
            let mut data = vec![0.0; 3 * 4];
            let codes = [2usize, 0, 3];
            for (t, &c) in codes.iter().enumerate() {
                data[t * 4 + c] = margin;
            }
            let logits = g.leaf(Tensor::matrix(3, 4, data).unwrap(), true);
            mlm_loss(&mut g, logits, &codes, &[true; 3]).unwrap().value
        };
        assert!(loss_at(10.0) > loss_at(20.0));
        assert!(loss_at(20.0) < 1e-8);
    }

    #[test]
    fn mlm_matches_bruteforce_oracle() {
        let mut s = Stream::open(11, "mlm-oracle", &[]);
        let (t, k) = (6, 5);
        let data: Vec<f64> = (0..t * k).map(|_| s.normal() * 2.0).collect();
        let codes: Vec<usize> = (0..t).map(|_| s.below(k)).collect();
        let mask = [true, false, true, true, false, true];

        let mut expect = 0.0;
        let mut m = 0;
        for i in 0..t {
            if mask[i] {
                let row = &data[i * k..(i + 1) * k];
                expect += logsumexp(row) - row[codes[i]];
                m += 1;
            }
        }
        expect /= m as f64;

        let mut g = Graph::new();
        let logits = g.leaf(Tensor::matrix(t, k, data).unwrap(), true);
        let term = mlm_loss(&mut g, logits, &codes, &mask).unwrap();
        assert!((term.value - expect).abs() < 1e-12);
        assert_eq!(term.count, m);
    }

    #[test]
    fn mlm_empty_mask_flags_zero() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(vec![4, 3]), true);
        let term = mlm_loss(&mut g, logits, &[0, 1, 2, 0], &[false; 4]).unwrap();
        assert!(term.var.is_none());
        assert_eq!(term.value, 0.0);
        assert_eq!(term.count, 0);
    }

    #[test]
    fn mlm_rejects_length_mismatch() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(vec![4, 3]), true);
        assert!(mlm_loss(&mut g, logits, &[0, 1], &[false; 4]).is_err());
        assert!(mlm_loss(&mut g, logits, &[0, 1, 2, 0], &[false; 3]).is_err());
    }

    #[test]
    fn regression_zero_when_equal() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let pred = g.leaf(Tensor::matrix(3, 4, data.clone()).unwrap(), true);
        let target = Tensor::matrix(3, 4, data).unwrap();
        let term = regression_loss(&mut g, pred, &target, &[true; 3]).unwrap();
        assert_eq!(term.value, 0.0);
        assert_eq!(term.count, 3);
    }

    #[test]
    fn regression_constant_residual_two_gives_two() {
        let mut g = Graph::new();
        let pred = g.leaf(Tensor::full(vec![3, 4], 2.5), true);
        let target = Tensor::full(vec![3, 4], 0.5);
        let term = regression_loss(&mut g, pred, &target, &[true; 3]).unwrap();
        assert_eq!(term.value, 2.0);
    }

    #[test]
    fn regression_matches_elementwise_oracle() {
        let mut s = Stream::open(12, "reg-oracle", &[]);
        let (t, d) = (4, 8);
        let pv: Vec<f64> = (0..t * d).map(|_| s.normal()).collect();
        let tv: Vec<f64> = (0..t * d).map(|_| s.normal()).collect();
        let mask = [true, false, true, true];

        let mut expect = 0.0;
        let mut m = 0;
        for i in 0..t {
            if mask[i] {
                for j in 0..d {
                    let r = pv[i * d + j] - tv[i * d + j];
                    expect += 0.5 * r * r;
                }
                m += 1;
            }
        }
        expect /= (m * d) as f64;

        let mut g = Graph::new();
        let pred = g.leaf(Tensor::matrix(t, d, pv).unwrap(), true);
        let target = Tensor::matrix(t, d, tv).unwrap();
        let term = regression_loss(&mut g, pred, &target, &mask).unwrap();
        assert!((term.value - expect).abs() < 1e-12);
        assert_eq!(term.count, m);
    }

    #[test]
    fn regression_empty_mask_flags_zero() {
        let mut g = Graph::new();
        let pred = g.leaf(Tensor::full(vec![3, 4], 1.0), true);
        let target = Tensor::zeros(vec![3, 4]);
        let term = regression_loss(&mut g, pred, &target, &[false; 3]).unwrap();
        assert!(term.var.is_none());
        assert_eq!(term.value, 0.0);
    }

    #[test]
    fn regression_rejects_shape_mismatch() {
        let mut g = Graph::new();
        let pred = g.leaf(Tensor::zeros(vec![3, 4]), true);
        assert!(regression_loss(&mut g, pred, &Tensor::zeros(vec![3, 5]), &[true; 3]).is_err());
        assert!(regression_loss(&mut g, pred, &Tensor::zeros(vec![3, 4]), &[true; 2]).is_err());
    }

    fn tiny_params(fill: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("a", Tensor::full(vec![2, 2], fill));
        p.add("b", Tensor::full(vec![3], fill));
        p
    }

    #[test]
    fn ema_tau_one_is_bitwise_freeze() {
        let mut teacher = tiny_params(1.25);
        let student = tiny_params(-3.5);
        let before = teacher.clone();
        ema_update(&mut teacher, &student, 1.0).unwrap();
        assert!(teacher.bit_eq(&before));
    }

    #[test]
    fn ema_tau_zero_is_bitwise_copy() {
        let mut teacher = tiny_params(1.25);
        let student = tiny_params(0.1 + 0.2); // deliberately non-representable sum
        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert!(teacher.bit_eq(&student));
    }

    #[test]
    fn ema_blend_matches_formula() {
        let mut teacher = tiny_params(1.0);
        let student = tiny_params(0.0);
        ema_update(&mut teacher, &student, 0.9).unwrap();
        for p in teacher.iter() {
            for &v in p.value.data() {
                assert!((v - 0.9).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ema_rejects_bad_tau_and_mismatch() {
        let mut teacher = tiny_params(1.0);
        let student = tiny_params(0.0);
        assert!(ema_update(&mut teacher, &student, 1.5).is_err());
        assert!(ema_update(&mut teacher, &student, -0.1).is_err());
        let mut other = ParamSet::new();
        other.add("a", Tensor::zeros(vec![2, 2]));
        assert!(ema_update(&mut teacher, &other, 0.5).is_err());
        let mut wrong_shape = ParamSet::new();
        wrong_shape.add("a", Tensor::zeros(vec![2, 2]));
        wrong_shape.add("b", Tensor::zeros(vec![4]));
        assert!(ema_update(&mut teacher, &wrong_shape, 0.5).is_err());
    }

    #[test]
    fn tau_schedule_endpoints_and_midpoint() {
        assert_eq!(tau_schedule(0, 0.999, 0.9999, 100), 0.999);
        assert_eq!(tau_schedule(100, 0.999, 0.9999, 100), 0.9999);
        assert_eq!(tau_schedule(250, 0.999, 0.9999, 100), 0.9999);
        let mid = tau_schedule(50, 0.999, 0.9999, 100);
        assert!((mid - (0.999 + 0.9999) / 2.0).abs() < 1e-15);
        assert_eq!(tau_schedule(0, 0.5, 0.8, 0), 0.8);
    }

    #[test]
    fn ema_state_walks_schedule_and_isolates_teacher() {
        let mut student = tiny_params(0.0);
        let mut ema = EmaState::new(&tiny_params(1.0), 0.5, 1.0, 2).unwrap();

        assert_eq!(ema.current_tau(), 0.5);
        ema.update(&student).unwrap(); // tau 0.5: 1 -> 0.5
        assert_eq!(ema.current_tau(), 0.75);
        ema.update(&student).unwrap(); // tau 0.75: 0.5 -> 0.375
        ema.update(&student).unwrap(); // tau 1.0: frozen
        for p in ema.teacher.iter() {
            for &v in p.value.data() {
                assert!((v - 0.375).abs() < 1e-15);
            }
        }
        assert_eq!(ema.counter, 3);

        // Changing the student afterwards must not touch the teacher.
        let snapshot = ema.teacher.clone();
        student.at_mut(0).value = Tensor::full(vec![2, 2], 99.0);
        assert!(ema.teacher.bit_eq(&snapshot));
    }

    #[test]
    fn ema_state_rejects_bad_schedule() {
        let p = tiny_params(0.0);
        assert!(EmaState::new(&p, 0.9, 0.5, 10).is_err());
        assert!(EmaState::new(&p, -0.1, 0.5, 10).is_err());
        assert!(EmaState::new(&p, 0.5, 1.1, 10).is_err());
    }

    #[test]
    fn combine_endpoints_are_exact() {
        assert_eq!(combine_losses(2.0, Some(4.0), 0.5).unwrap(), 3.0);
        let code = 0.1 + 0.2;
        assert_eq!(combine_losses(code, None, 1.0).unwrap().to_bits(), code.to_bits());
        assert_eq!(combine_losses(code, Some(7.5), 1.0).unwrap().to_bits(), code.to_bits());
        assert_eq!(combine_losses(5.0, Some(code), 0.0).unwrap().to_bits(), code.to_bits());
        assert!(combine_losses(1.0, Some(1.0), 1.5).is_err());
        assert!(combine_losses(1.0, Some(1.0), -0.5).is_err());
        assert!(combine_losses(1.0, None, 0.5).is_err());
    }

    #[test]
    fn combine_vars_split_gradients_by_alpha() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(2.0), true);
        let b = g.leaf(Tensor::scalar(4.0), true);
        let c = combine_loss_vars(&mut g, a, Some(b), 0.3).unwrap();
        assert!((g.value(c).data()[0] - (0.3 * 2.0 + 0.7 * 4.0)).abs() < 1e-15);
        g.backward(c, 1.0).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.3]);
        assert_eq!(g.grad(b).unwrap(), &[1.0 - 0.3]);
    }

    #[test]
    fn combine_vars_alpha_one_returns_code_node_itself() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(2.0), true);
        let b = g.leaf(Tensor::scalar(4.0), true);
        let c = combine_loss_vars(&mut g, a, Some(b), 1.0).unwrap();
        assert_eq!(c.0, a.0);
        let d = combine_loss_vars(&mut g, a, Some(b), 0.0).unwrap();
        assert_eq!(d.0, b.0);
        assert!(combine_loss_vars(&mut g, a, None, 0.5).is_err());
    }

    #[test]
    fn combine_vars_split_matches_finite_differences() {
        let alpha = 0.35;
        let f = |x: f64, y: f64| {
            let mut g = Graph::new();
            let a = g.leaf(Tensor::scalar(x), true);
            let b = g.leaf(Tensor::scalar(y), true);
            let c = combine_loss_vars(&mut g, a, Some(b), alpha).unwrap();
            g.value(c).data()[0]
        };
        let h = 1e-6;
        let fd_a = (f(2.0 + h, 4.0) - f(2.0 - h, 4.0)) / (2.0 * h);
        let fd_b = (f(2.0, 4.0 + h) - f(2.0, 4.0 - h)) / (2.0 * h);
        assert!((fd_a - alpha).abs() < 1e-8);
        assert!((fd_b - (1.0 - alpha)).abs() < 1e-8);
    }

    #[test]
    fn lr_kind_a_warmup_peak_decay() {
        let peak = 5e-4;
        let total = 1000;
        // 8% warmup -> step 80 is the peak; halfway through warmup is half.
        assert_eq!(lr_schedule(80, total, LrKind::A, peak), peak);
        assert!((lr_schedule(40, total, LrKind::A, peak) - peak / 2.0).abs() < 1e-18);
        assert_eq!(lr_schedule(total, total, LrKind::A, peak), 0.0);
        // Midpoint of decay: (1000-540)/(1000-80) = 0.5.
        assert!((lr_schedule(540, total, LrKind::A, peak) - peak / 2.0).abs() < 1e-18);
        // Monotone up then down.
        for s in 1..80 {
            assert!(lr_schedule(s, total, LrKind::A, peak) < lr_schedule(s + 1, total, LrKind::A, peak));
        }
        for s in 80..total {
            assert!(lr_schedule(s, total, LrKind::A, peak) > lr_schedule(s + 1, total, LrKind::A, peak));
        }
        assert_eq!(lr_schedule(0, total, LrKind::A, peak), 0.0);
        assert_eq!(lr_schedule(total + 5, total, LrKind::A, peak), 0.0);
    }

    #[test]
    fn lr_kind_b_tristage() {
        let peak = 5e-4;
        let total = 1000;
        // 3% warmup ends at the peak; the hold keeps it there through 93%.
        assert_eq!(lr_schedule(30, total, LrKind::B, peak), peak);
        assert_eq!(lr_schedule(500, total, LrKind::B, peak), peak);
        assert_eq!(lr_schedule(930, total, LrKind::B, peak), peak);
        assert_eq!(lr_schedule(total, total, LrKind::B, peak), 0.0);
        // Midpoint of the 7% decay: (1000-965)/(1000-930) = 0.5.
        assert!((lr_schedule(965, total, LrKind::B, peak) - peak / 2.0).abs() < 1e-18);
        assert!((lr_schedule(15, total, LrKind::B, peak) - peak / 2.0).abs() < 1e-18);
    }

    #[test]
    fn lr_degenerate_totals_stay_finite() {
        for total in 1..20 {
            for step in 0..=total {
                for kind in [LrKind::A, LrKind::B] {
                    let lr = lr_schedule(step, total, kind, 5e-4);
                    assert!(lr.is_finite() && (0.0..=5e-4).contains(&lr));
                }
            }
        }
        assert_eq!(lr_schedule(0, 0, LrKind::A, 5e-4), 0.0);
    }

    #[test]
    fn loss_report_combination_is_exact() {
        let r = LossReport::cobert(2.0, Some(4.0), 0.5, 17).unwrap();
        assert_eq!(r.l_cobert, Some(3.0));
        assert_eq!(r.alpha, Some(0.5));
        assert_eq!(r.masked, 17);
        let expect = combine_losses(0.7, Some(1.9), 0.25).unwrap();
        let r2 = LossReport::cobert(0.7, Some(1.9), 0.25, 3).unwrap();
        assert_eq!(r2.l_cobert.unwrap().to_bits(), expect.to_bits());

        let solo = LossReport::cobert(1.5, None, 1.0, 4).unwrap();
        assert_eq!(solo.l_cobert, Some(1.5));
        assert!(solo.l_speech.is_none());
        assert!(LossReport::cobert(1.5, None, 0.5, 4).is_err());

        let m = LossReport::mlm(1.2, 9);
        assert_eq!(m.named(), vec![("mlm", 1.2)]);
        assert_eq!(
            r.named(),
            vec![("code", 2.0), ("speech", 4.0), ("combined", 3.0)]
        );
        let sd = LossReport::self_distill(0.4, 2);
        assert_eq!(sd.named(), vec![("self_distill", 0.4)]);
    }
}
