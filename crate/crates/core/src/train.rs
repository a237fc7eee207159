//! Training procedures: model assembly, batch planning, and one-update step
//! functions for the three objectives.
//!
//! A model is an encoder plus named head parameters in one [`ParamSet`]:
//! masked code prediction puts a `[dim, vocab]` softmax head on top,
//! self-distillation a `[dim, dim]` regression head, and cross-modal
//! distillation one regression head per target stream (`head.code`, and
//! `head.spch` when the optional self-distillation branch is on).
//!
//! Every update processes one batch of utterances, each through its own
//! graph: the per-utterance backward pass is seeded with that utterance's
//! share of the batch's masked positions, so accumulated gradients equal the
//! gradient of the masked-position-weighted mean loss without any padding.
//! All randomness (masks, dropout, batch order) flows from per-purpose keyed
//! streams, making runs bitwise reproducible from `(config, seed)`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Graph;
use crate::corpus::align_lengths;
use crate::encoder::{
    bind_params, collect_grads, encode, init_encoder, init_tensor, target_representation,
    BoundParams, EncoderConfig, EncoderInput, FrontEnd,
};
use crate::error::{Error, Result};
use crate::masking::span_mask;
use crate::objectives::{
    combine_loss_vars, lr_schedule, mlm_loss, regression_loss, EmaState, LossReport, LossTerm,
    LrKind,
};
use crate::optim::{AdamHyper, AdamState};
use crate::params::ParamSet;
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Which loss a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Masked prediction of discrete codes (cross-entropy).
    Mlm,
    /// Regress an EMA teacher's top-L representation at masked positions.
    SelfDistill,
    /// Regress a frozen code teacher's representation from speech, optionally
    /// combined with an EMA-of-student speech branch.
    Cobert,
}

/// Everything a training run needs beyond the encoder architecture.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Mask-span start probability.
    pub p: f64,
    /// Mask span length.
    pub span: usize,
    /// Code-branch weight for the combined distillation loss.
    pub alpha: f64,
    pub total_updates: u64,
    /// Batch capacity in frames (utterances never split).
    pub frame_budget: usize,
    pub lr_kind: LrKind,
    pub peak_lr: f64,
    /// EMA decay anneal (self-distillation and the cobert speech branch).
    pub tau_start: f64,
    pub tau_end: f64,
    pub tau_anneal: u64,
    pub seed: u64,
    /// Whether the cobert run keeps the self-distillation speech branch.
    pub speech_branch: bool,
}

impl TrainConfig {
    /// Masked code prediction defaults: p=0.08, span 10, warmup-decay lr.
    pub fn mlm(total_updates: u64, seed: u64) -> Self {
        TrainConfig {
            objective: Objective::Mlm,
            p: 0.08,
            span: 10,
            alpha: 1.0,
            total_updates,
            frame_budget: 800,
            lr_kind: LrKind::A,
            peak_lr: 5e-4,
            tau_start: 0.999,
            tau_end: 0.9999,
            tau_anneal: anneal_for(total_updates),
            seed,
            speech_branch: false,
        }
    }

    /// Self-distillation defaults: p=0.065, span 10, tri-stage lr, EMA decay
    /// annealed 0.999 -> 0.9999 over the first 30% of updates.
    pub fn self_distill(total_updates: u64, seed: u64) -> Self {
        TrainConfig {
            objective: Objective::SelfDistill,
            p: 0.065,
            lr_kind: LrKind::B,
            ..Self::mlm(total_updates, seed)
        }
    }

    /// Cross-modal distillation defaults: p=0.065, span 10, α=0.5 with the
    /// speech branch on, tri-stage lr.
    pub fn cobert(total_updates: u64, seed: u64) -> Self {
        TrainConfig {
            objective: Objective::Cobert,
            alpha: 0.5,
            speech_branch: true,
            ..Self::self_distill(total_updates, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(alloc::format!("mask probability {} not in [0,1]", self.p)));
        }
        if self.span == 0 {
            return Err(Error::Config(String::from("mask span must be >= 1")));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(alloc::format!("alpha {} not in [0,1]", self.alpha)));
        }
        if self.total_updates == 0 {
            return Err(Error::Config(String::from("total_updates must be >= 1")));
        }
        if self.frame_budget == 0 {
            return Err(Error::Config(String::from("frame_budget must be >= 1")));
        }
        if self.objective == Objective::Cobert && !self.speech_branch && self.alpha != 1.0 {
            return Err(Error::Config(String::from(
                "disabling the speech branch requires alpha = 1",
            )));
        }
        Ok(())
    }
}

/// EMA anneal span: first 30% of updates.
fn anneal_for(total_updates: u64) -> u64 {
    (libm::round(0.3 * total_updates as f64) as u64).max(1)
}

/// An encoder with its head parameters, ready to train or to serve frozen.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: EncoderConfig,
    pub front: FrontEnd,
    pub params: ParamSet,
}

fn add_linear_head(ps: &mut ParamSet, name_w: &str, name_b: &str, d_in: usize, d_out: usize, seed: u64) {
    ps.add(name_w, init_tensor(vec![d_in, d_out], 0.02, seed, name_w));
    ps.add(name_b, Tensor::zeros(vec![d_out]));
}

/// Encoder plus a `[dim, vocab]` masked-prediction head.
pub fn build_mlm_model(cfg: &EncoderConfig, front: FrontEnd, seed: u64) -> Result<Model> {
    let mut params = init_encoder(cfg, front, seed)?;
    add_linear_head(&mut params, "head.mlm.w", "head.mlm.b", cfg.dim, cfg.vocab, seed);
    Ok(Model { cfg: cfg.clone(), front, params })
}

/// Encoder plus a `[dim, dim]` regression head for self-distillation.
pub fn build_self_distill_model(cfg: &EncoderConfig, front: FrontEnd, seed: u64) -> Result<Model> {
    let mut params = init_encoder(cfg, front, seed)?;
    add_linear_head(&mut params, "head.reg.w", "head.reg.b", cfg.dim, cfg.dim, seed);
    Ok(Model { cfg: cfg.clone(), front, params })
}

/// Speech-front-end student with a code-target head (projecting to the code
/// teacher's width) and, when the speech branch is on, a second head for the
/// EMA-of-student targets. `code_target_dim: None` omits the code head
/// entirely — the α = 0 ablation, where only the speech branch exists.
pub fn build_cobert_model(
    cfg: &EncoderConfig,
    code_target_dim: Option<usize>,
    speech_branch: bool,
    seed: u64,
) -> Result<Model> {
    let mut params = init_encoder(cfg, FrontEnd::Speech, seed)?;
    if let Some(d) = code_target_dim {
        add_linear_head(&mut params, "head.code.w", "head.code.b", cfg.dim, d, seed);
    }
    if speech_branch {
        add_linear_head(&mut params, "head.spch.w", "head.spch.b", cfg.dim, cfg.dim, seed);
    }
    Ok(Model { cfg: cfg.clone(), front: FrontEnd::Speech, params })
}

/// Run a parameter set unmasked and untrainable over `input` and return its
/// top-L target representation as a plain tensor. No dropout, no gradients.
pub fn frozen_targets(
    cfg: &EncoderConfig,
    params: &ParamSet,
    input: &EncoderInput<'_>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = bind_params(&mut g, params, false);
    let bound = BoundParams::new(params, &vars);
    let out = encode(&mut g, cfg, &bound, input, None, None)?;
    let layers: Vec<Tensor> = out.layers.iter().map(|&v| g.value(v).clone()).collect();
    target_representation(&layers, cfg.top_l, cfg.ln_eps)
}

/// One utterance as the trainer sees it: an input stream for the encoder and
/// the aligned code stream (prediction target and/or code-teacher input).
#[derive(Debug)]
pub struct UttExample<'a> {
    /// Stable utterance index; keys this utterance's mask/dropout streams.
    pub id: usize,
    pub input: UttInput<'a>,
    pub codes: &'a [usize],
}

#[derive(Debug)]
pub enum UttInput<'a> {
    Codes(&'a [usize]),
    Frames(&'a Tensor),
}

/// Input/code streams truncated to a common post-downsampling length.
struct Prepared {
    frames: Option<Tensor>,
    input_codes: Option<Vec<usize>>,
    codes: Vec<usize>,
    t: usize,
}

fn prepare(ex: &UttExample<'_>, stack: usize) -> Result<Prepared> {
    match &ex.input {
        UttInput::Codes(cs) => {
            let t = align_lengths("input codes vs target codes", cs.len(), ex.codes.len())?;
            Ok(Prepared {
                frames: None,
                input_codes: Some(cs[..t].to_vec()),
                codes: ex.codes[..t].to_vec(),
                t,
            })
        }
        UttInput::Frames(f) => {
            let t_in = f.rows().div_ceil(stack);
            let t = align_lengths("downsampled frames vs codes", t_in, ex.codes.len())?;
            let rows_needed = (t * stack).min(f.rows());
            let frames = if rows_needed == f.rows() {
                Tensor::clone(f)
            } else {
                let d = f.cols();
                Tensor::matrix(rows_needed, d, f.data()[..rows_needed * d].to_vec())?
            };
            Ok(Prepared {
                frames: Some(frames),
                input_codes: None,
                codes: ex.codes[..t].to_vec(),
                t,
            })
        }
    }
}

impl Prepared {
    fn encoder_input(&self) -> EncoderInput<'_> {
        match (&self.frames, &self.input_codes) {
            (Some(f), _) => EncoderInput::Features(f),
            (None, Some(c)) => EncoderInput::Codes(c),
            _ => unreachable!("prepare always fills one input"),
        }
    }
}

/// Group utterances into batches by a total frame budget, bucketing similar
/// lengths together. Longest-first, stable, never splitting an utterance; an
/// utterance longer than the budget gets its own batch.
pub fn plan_batches(lengths: &[usize], frame_budget: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]).then(a.cmp(&b)));
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut used = 0usize;
    for i in order {
        if !current.is_empty() && used + lengths[i] > frame_budget {
            batches.push(core::mem::take(&mut current));
            used = 0;
        }
        used += lengths[i];
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Deterministic batch order for one epoch.
pub fn epoch_order(n_batches: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut s = Stream::open(seed, "batch-order", &[epoch]);
    s.permutation(n_batches)
}

/// Mutable state of one training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    pub hyper: AdamHyper,
    /// EMA teacher for self-distillation and the cobert speech branch.
    pub ema: Option<EmaState>,
    /// Completed updates.
    pub step: u64,
}

/// Build the model and optimizer for a run. `code_target_dim` is required
/// for the cobert objective (the frozen code teacher's encoder width).
pub fn init_train(
    cfg: &TrainConfig,
    enc: &EncoderConfig,
    front: FrontEnd,
    code_target_dim: Option<usize>,
) -> Result<TrainState> {
    cfg.validate()?;
    let model = match cfg.objective {
        Objective::Mlm => build_mlm_model(enc, front, cfg.seed)?,
        Objective::SelfDistill => build_self_distill_model(enc, front, cfg.seed)?,
        Objective::Cobert => {
            let dim = code_target_dim.ok_or_else(|| {
                Error::Config(String::from("cobert needs the code teacher's width"))
            })?;
            build_cobert_model(enc, Some(dim), cfg.speech_branch, cfg.seed)?
        }
    };
    let needs_ema = match cfg.objective {
        Objective::SelfDistill => true,
        Objective::Cobert => cfg.speech_branch && cfg.alpha < 1.0,
        Objective::Mlm => false,
    };
    let ema = if needs_ema {
        Some(EmaState::new(&model.params, cfg.tau_start, cfg.tau_end, cfg.tau_anneal)?)
    } else {
        None
    };
    let adam = AdamState::new(&model.params);
    Ok(TrainState { model, adam, hyper: AdamHyper::default(), ema, step: 0 })
}

/// Per-utterance mask plans for one update, drawn from streams keyed by
/// (step, utterance id) so batch composition never shifts other draws.
fn draw_masks(prepared: &[Prepared], batch: &[UttExample<'_>], step: u64, cfg: &TrainConfig) -> Vec<Vec<bool>> {
    prepared
        .iter()
        .zip(batch)
        .map(|(prep, ex)| {
            let mut s = Stream::open(cfg.seed, "mask", &[step, ex.id as u64]);
            span_mask(prep.t, cfg.p, cfg.span, &mut s)
        })
        .collect()
}

fn masked_total(masks: &[Vec<bool>]) -> usize {
    masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum()
}

/// Advance one update on `batch`. Dispatches on the configured objective;
/// `teacher` is consulted only by the cobert objective and is never mutated.
/// A code-front teacher reads the unmasked code stream; a speech-front
/// teacher (the masked-prediction baseline in the teacher ablation) reads
/// the unmasked frames.
pub fn train_one_update(
    state: &mut TrainState,
    teacher: Option<&Model>,
    batch: &[UttExample<'_>],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    match cfg.objective {
        Objective::Mlm => step_mlm(state, batch, cfg),
        Objective::SelfDistill => step_self_distill(state, batch, cfg),
        Objective::Cobert => {
            let teacher = teacher.ok_or_else(|| {
                Error::Config(String::from("cobert update needs a frozen teacher"))
            })?;
            step_cobert(state, teacher, batch, cfg)
        }
    }
}

fn step_mlm(state: &mut TrainState, batch: &[UttExample<'_>], cfg: &TrainConfig) -> Result<LossReport> {
    let step = state.step + 1;
    let stack = state.model.cfg.stack;
    let prepared: Vec<Prepared> = batch.iter().map(|ex| prepare(ex, stack)).collect::<Result<_>>()?;
    let masks = draw_masks(&prepared, batch, step, cfg);
    let total = masked_total(&masks);

    state.model.params.zero_grads();
    let mut loss = 0.0;
    for ((prep, mask), ex) in prepared.iter().zip(&masks).zip(batch) {
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            continue;
        }
        let mut g = Graph::new();
        let vars = bind_params(&mut g, &state.model.params, true);
        let bound = BoundParams::new(&state.model.params, &vars);
        let mut drop = Stream::open(cfg.seed, "dropout", &[step, ex.id as u64]);
        let out = encode(
            &mut g,
            &state.model.cfg,
            &bound,
            &prep.encoder_input(),
            Some(mask.as_slice()),
            Some(&mut drop),
        )?;
        let w = bound.var("head.mlm.w")?;
        let b = bound.var("head.mlm.b")?;
        let logits = g.matmul(out.final_out, w)?;
        let logits = g.add_bias(logits, b)?;
        let term = mlm_loss(&mut g, logits, &prep.codes, mask)?;
        let weight = term.count as f64 / total as f64;
        loss += term.value * weight;
        g.backward(term.var.expect("count > 0"), weight)?;
        collect_grads(&g, &mut state.model.params, &vars);
    }
    let lr = lr_schedule(step, cfg.total_updates, cfg.lr_kind, cfg.peak_lr);
    state.adam.step(&mut state.model.params, lr, &state.hyper)?;
    state.step = step;
    Ok(LossReport::mlm(loss, total))
}

fn step_self_distill(
    state: &mut TrainState,
    batch: &[UttExample<'_>],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    if state.ema.is_none() {
        return Err(Error::Config(String::from("self-distillation needs an EMA teacher")));
    }
    let step = state.step + 1;
    let stack = state.model.cfg.stack;
    let prepared: Vec<Prepared> = batch.iter().map(|ex| prepare(ex, stack)).collect::<Result<_>>()?;
    let masks = draw_masks(&prepared, batch, step, cfg);
    let total = masked_total(&masks);

    state.model.params.zero_grads();
    let mut loss = 0.0;
    for ((prep, mask), ex) in prepared.iter().zip(&masks).zip(batch) {
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            continue;
        }
        let teacher_params = &state.ema.as_ref().expect("checked above").teacher;
        let target = frozen_targets(&state.model.cfg, teacher_params, &prep.encoder_input())?;

        let mut g = Graph::new();
        let vars = bind_params(&mut g, &state.model.params, true);
        let bound = BoundParams::new(&state.model.params, &vars);
        let mut drop = Stream::open(cfg.seed, "dropout", &[step, ex.id as u64]);
        let out = encode(
            &mut g,
            &state.model.cfg,
            &bound,
            &prep.encoder_input(),
            Some(mask.as_slice()),
            Some(&mut drop),
        )?;
        let w = bound.var("head.reg.w")?;
        let b = bound.var("head.reg.b")?;
        let pred = g.matmul(out.final_out, w)?;
        let pred = g.add_bias(pred, b)?;
        let term = regression_loss(&mut g, pred, &target, mask)?;
        let weight = term.count as f64 / total as f64;
        loss += term.value * weight;
        g.backward(term.var.expect("count > 0"), weight)?;
        collect_grads(&g, &mut state.model.params, &vars);
    }
    let lr = lr_schedule(step, cfg.total_updates, cfg.lr_kind, cfg.peak_lr);
    state.adam.step(&mut state.model.params, lr, &state.hyper)?;
    state.ema.as_mut().expect("checked above").update(&state.model.params)?;
    state.step = step;
    Ok(LossReport::self_distill(loss, total))
}

fn step_cobert(
    state: &mut TrainState,
    teacher: &Model,
    batch: &[UttExample<'_>],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let code_branch = cfg.alpha > 0.0;
    let speech_branch = cfg.speech_branch && cfg.alpha < 1.0;
    if speech_branch && state.ema.is_none() {
        return Err(Error::Config(String::from("the speech branch needs an EMA teacher")));
    }
    let step = state.step + 1;
    let stack = state.model.cfg.stack;
    let prepared: Vec<Prepared> = batch.iter().map(|ex| prepare(ex, stack)).collect::<Result<_>>()?;
    let masks = draw_masks(&prepared, batch, step, cfg);
    let total = masked_total(&masks);

    state.model.params.zero_grads();
    let (mut l_code, mut l_speech) = (0.0, 0.0);
    for ((prep, mask), ex) in prepared.iter().zip(&masks).zip(batch) {
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            continue;
        }
        // Targets for both streams come from unmasked forwards of frozen
        // parameter sets; each dead branch is skipped entirely so an
        // endpoint α run is the ablated run, bit for bit. The frozen teacher
        // reads its own modality: code teachers see the unmasked code
        // stream, a speech-front teacher sees the unmasked frames.
        let code_target = if code_branch {
            let teacher_input = match teacher.front {
                FrontEnd::Code => EncoderInput::Codes(&prep.codes),
                FrontEnd::Speech => prep.encoder_input(),
            };
            Some(frozen_targets(&teacher.cfg, &teacher.params, &teacher_input)?)
        } else {
            None
        };
        let speech_target = if speech_branch {
            let ema = &state.ema.as_ref().expect("checked above").teacher;
            Some(frozen_targets(&state.model.cfg, ema, &prep.encoder_input())?)
        } else {
            None
        };

        let mut g = Graph::new();
        let vars = bind_params(&mut g, &state.model.params, true);
        let bound = BoundParams::new(&state.model.params, &vars);
        let mut drop = Stream::open(cfg.seed, "dropout", &[step, ex.id as u64]);
        let out = encode(
            &mut g,
            &state.model.cfg,
            &bound,
            &prep.encoder_input(),
            Some(mask.as_slice()),
            Some(&mut drop),
        )?;
        let weight = count as f64 / total as f64;
        let code_term: Option<LossTerm> = match &code_target {
            Some(target) => {
                let w = bound.var("head.code.w")?;
                let b = bound.var("head.code.b")?;
                let pred = g.matmul(out.final_out, w)?;
                let pred = g.add_bias(pred, b)?;
                let term = regression_loss(&mut g, pred, target, mask)?;
                l_code += term.value * weight;
                Some(term)
            }
            None => None,
        };
        let speech_term: Option<LossTerm> = match &speech_target {
            Some(target) => {
                let w = bound.var("head.spch.w")?;
                let b = bound.var("head.spch.b")?;
                let pred = g.matmul(out.final_out, w)?;
                let pred = g.add_bias(pred, b)?;
                let term = regression_loss(&mut g, pred, target, mask)?;
                l_speech += term.value * weight;
                Some(term)
            }
            None => None,
        };
        let combined = match (code_term.and_then(|t| t.var), speech_term.and_then(|t| t.var)) {
            (Some(c), s) => combine_loss_vars(&mut g, c, s, cfg.alpha)?,
            // α = 0: the speech loss is the whole objective, node included.
            (None, Some(s)) => s,
            (None, None) => unreachable!("count > 0 guarantees a live branch"),
        };
        g.backward(combined, weight)?;
        collect_grads(&g, &mut state.model.params, &vars);
    }
    let lr = lr_schedule(step, cfg.total_updates, cfg.lr_kind, cfg.peak_lr);
    state.adam.step(&mut state.model.params, lr, &state.hyper)?;
    if speech_branch {
        state.ema.as_mut().expect("checked above").update(&state.model.params)?;
    }
    state.step = step;
    LossReport::cobert(l_code, speech_branch.then_some(l_speech), cfg.alpha, total)
}
