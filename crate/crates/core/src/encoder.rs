//! Pre-norm transformer encoder with code and speech front-ends.
//!
//! The same trunk serves every model in the pipeline; only the front-end
//! differs. The code front-end embeds discrete code ids (with a dedicated
//! mask embedding as the last vocabulary row); the speech front-end stacks
//! consecutive feature frames, projects them, and replaces masked rows with
//! a learned mask vector. Learned absolute positions are added after the
//! front-end, then `n_layers` pre-norm blocks (multi-head self-attention and
//! a GELU feed-forward) run, followed by a final layer norm.
//!
//! Teacher targets are built from the raw block outputs: each of the top `L`
//! layers is instance-normalized per channel over time and the results are
//! averaged.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::{key_of, Stream};
use crate::tensor::Tensor;

/// Encoder hyperparameters.
#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    /// Code vocabulary size (code front-end). The embedding table holds one
    /// extra row used as the mask embedding.
    pub vocab: usize,
    /// Input feature dimension (speech front-end).
    pub in_dim: usize,
    /// Frames stacked per encoder step in the speech front-end (1 = none).
    pub stack: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    /// Number of top layers averaged into teacher targets.
    pub top_l: usize,
}

impl EncoderConfig {
    /// Desk-scale defaults; `vocab`/`in_dim` are set per model.
    pub fn desk() -> Self {
        EncoderConfig {
            dim: 64,
            n_layers: 4,
            n_heads: 4,
            ffn_dim: 128,
            max_len: 512,
            vocab: 16,
            in_dim: 8,
            stack: 1,
            dropout: 0.1,
            ln_eps: 1e-5,
            top_l: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of n_heads {}",
                self.dim, self.n_heads
            )));
        }
        if self.top_l == 0 || self.top_l > self.n_layers {
            return Err(Error::Config(format!(
                "top_l {} must be in 1..={}",
                self.top_l, self.n_layers
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Which front-end a parameter set was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrontEnd {
    Code,
    Speech,
}

/// Input to one encoder forward pass (one utterance).
pub enum EncoderInput<'a> {
    /// Discrete code ids, each `< vocab`.
    Codes(&'a [usize]),
    /// Feature frames, shape [t, in_dim].
    Features(&'a Tensor),
}

/// Forward-pass outputs: every block's residual-stream output plus the
/// final layer-normalized state, all shaped [t, dim].
pub struct EncodeOut {
    pub layers: Vec<Var>,
    pub final_out: Var,
}

pub(crate) fn init_tensor(shape: Vec<usize>, std: f64, seed: u64, name: &str) -> Tensor {
    let mut s = Stream::open(seed, "init", &[key_of(name)]);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| s.trunc_normal(std)).collect();
    Tensor::new(shape, data).expect("init dims")
}

/// Initialize encoder parameters. Weights are truncated-normal (std 0.02)
/// drawn from per-name streams, so the values of one parameter never depend
/// on which other parameters exist; biases start at zero and layer-norm
/// gains at one.
pub fn init_encoder(cfg: &EncoderConfig, front: FrontEnd, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let std = 0.02;
    let mut ps = ParamSet::new();
    match front {
        FrontEnd::Code => {
            ps.add(
                "embed.code",
                init_tensor(vec![cfg.vocab + 1, cfg.dim], std, seed, "embed.code"),
            );
        }
        FrontEnd::Speech => {
            ps.add(
                "embed.proj.w",
                init_tensor(vec![cfg.stack * cfg.in_dim, cfg.dim], std, seed, "embed.proj.w"),
            );
            ps.add("embed.proj.b", Tensor::zeros(vec![cfg.dim]));
            ps.add("embed.mask", init_tensor(vec![cfg.dim], std, seed, "embed.mask"));
        }
    }
    ps.add("pos", init_tensor(vec![cfg.max_len, cfg.dim], std, seed, "pos"));
    for l in 0..cfg.n_layers {
        let n = |suffix: &str| format!("l{l}.{suffix}");
        ps.add(&n("ln1.g"), Tensor::full(vec![cfg.dim], 1.0));
        ps.add(&n("ln1.b"), Tensor::zeros(vec![cfg.dim]));
        for w in ["wq", "wk", "wv", "wo"] {
            ps.add(&n(w), init_tensor(vec![cfg.dim, cfg.dim], std, seed, &n(w)));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            ps.add(&n(b), Tensor::zeros(vec![cfg.dim]));
        }
        ps.add(&n("ln2.g"), Tensor::full(vec![cfg.dim], 1.0));
        ps.add(&n("ln2.b"), Tensor::zeros(vec![cfg.dim]));
        ps.add(&n("w1"), init_tensor(vec![cfg.dim, cfg.ffn_dim], std, seed, &n("w1")));
        ps.add(&n("b1"), Tensor::zeros(vec![cfg.ffn_dim]));
        ps.add(&n("w2"), init_tensor(vec![cfg.ffn_dim, cfg.dim], std, seed, &n("w2")));
        ps.add(&n("b2"), Tensor::zeros(vec![cfg.dim]));
    }
    ps.add("ln_f.g", Tensor::full(vec![cfg.dim], 1.0));
    ps.add("ln_f.b", Tensor::zeros(vec![cfg.dim]));
    Ok(ps)
}

/// Insert every parameter as a graph leaf, in parameter order.
pub fn bind_params(g: &mut Graph, params: &ParamSet, trainable: bool) -> Vec<Var> {
    params.iter().map(|p| g.leaf(p.value.clone(), trainable)).collect()
}

/// Copy gradients from bound leaves back into the parameter set.
pub fn collect_grads(g: &Graph, params: &mut ParamSet, vars: &[Var]) {
    for (idx, &v) in vars.iter().enumerate() {
        if let Some(grad) = g.grad(v) {
            let grad = grad.to_vec();
            params.accumulate_grad(idx, &grad);
        }
    }
}

/// Name-based variable lookup for a bound parameter set.
pub struct BoundParams<'a> {
    params: &'a ParamSet,
    vars: &'a [Var],
}

impl<'a> BoundParams<'a> {
    pub fn new(params: &'a ParamSet, vars: &'a [Var]) -> Self {
        debug_assert_eq!(params.len(), vars.len());
        BoundParams { params, vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }
}

fn maybe_dropout(
    g: &mut Graph,
    x: Var,
    p: f64,
    stream: &mut Option<&mut Stream>,
) -> Result<Var> {
    let Some(stream) = stream.as_deref_mut() else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let shape = g.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> =
        (0..n).map(|_| if stream.uniform() < p { 0.0 } else { keep }).collect();
    g.elem_mul(x, Tensor::new(shape, mask)?)
}

/// Run the encoder over one utterance.
///
/// `mask` flags positions to hide from the model (dedicated mask embedding
/// for codes, learned mask vector for speech); its length must match the
/// post-front-end sequence length. `dropout` supplies the randomness for
/// dropout masks and is only consulted when `cfg.dropout > 0`; pass `None`
/// for evaluation and teacher passes.
pub fn encode(
    g: &mut Graph,
    cfg: &EncoderConfig,
    bound: &BoundParams<'_>,
    input: &EncoderInput<'_>,
    mask: Option<&[bool]>,
    mut dropout: Option<&mut Stream>,
) -> Result<EncodeOut> {
    cfg.validate()?;
    // Front-end.
    let mut x = match input {
        EncoderInput::Codes(ids) => {
            if let Some(&bad) = ids.iter().find(|&&c| c >= cfg.vocab) {
                return Err(Error::Vocabulary { code: bad, vocab: cfg.vocab });
            }
            let table = bound.var("embed.code")?;
            match mask {
                Some(m) => {
                    if m.len() != ids.len() {
                        return Err(Error::Alignment {
                            context: String::from("mask vs code sequence"),
                            left: m.len(),
                            right: ids.len(),
                        });
                    }
                    let masked_ids = crate::masking::apply_mask_codes(ids, m, cfg.vocab)?;
                    g.gather_rows(table, &masked_ids)?
                }
                None => g.gather_rows(table, ids)?,
            }
        }
        EncoderInput::Features(frames) => {
            if frames.cols() != cfg.in_dim {
                return Err(Error::ShapeMismatch {
                    op: "encode",
                    expected: vec![frames.rows(), cfg.in_dim],
                    got: frames.shape().to_vec(),
                });
            }
            let f = g.constant((*frames).clone());
            let stacked = if cfg.stack > 1 { g.frame_stack(f, cfg.stack)? } else { f };
            let w = bound.var("embed.proj.w")?;
            let b = bound.var("embed.proj.b")?;
            let projected = g.matmul(stacked, w)?;
            let projected = g.add_bias(projected, b)?;
            match mask {
                Some(m) => {
                    if m.len() != g.value(projected).rows() {
                        return Err(Error::Alignment {
                            context: String::from("mask vs projected frame sequence"),
                            left: m.len(),
                            right: g.value(projected).rows(),
                        });
                    }
                    let fill = bound.var("embed.mask")?;
                    g.mask_rows(projected, fill, m)?
                }
                None => projected,
            }
        }
    };

    let t_len = g.value(x).rows();
    if t_len > cfg.max_len {
        return Err(Error::Config(format!(
            "sequence of {t_len} positions exceeds max_len {}",
            cfg.max_len
        )));
    }
    let pos_ids: Vec<usize> = (0..t_len).collect();
    let pos_table = bound.var("pos")?;
    let pos = g.gather_rows(pos_table, &pos_ids)?;
    x = g.add(x, pos)?;
    x = maybe_dropout(g, x, cfg.dropout, &mut dropout)?;

    let dh = cfg.dim / cfg.n_heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let n = |suffix: &str| format!("l{l}.{suffix}");
        // Self-attention sublayer.
        let g1 = bound.var(&n("ln1.g"))?;
        let b1 = bound.var(&n("ln1.b"))?;
        let h = g.layer_norm(x, g1, b1, cfg.ln_eps)?;
        let q = {
            let w = bound.var(&n("wq"))?;
            let b = bound.var(&n("bq"))?;
            let m = g.matmul(h, w)?;
            g.add_bias(m, b)?
        };
        let k = {
            let w = bound.var(&n("wk"))?;
            let b = bound.var(&n("bk"))?;
            let m = g.matmul(h, w)?;
            g.add_bias(m, b)?
        };
        let v = {
            let w = bound.var(&n("wv"))?;
            let b = bound.var(&n("bv"))?;
            let m = g.matmul(h, w)?;
            g.add_bias(m, b)?
        };
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let qh = g.slice_cols(q, hd * dh, dh)?;
            let kh = g.slice_cols(k, hd * dh, dh)?;
            let vh = g.slice_cols(v, hd * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores);
            heads.push(g.matmul(attn, vh)?);
        }
        let ctx = g.concat_cols(&heads)?;
        let wo = bound.var(&n("wo"))?;
        let bo = bound.var(&n("bo"))?;
        let proj = g.matmul(ctx, wo)?;
        let proj = g.add_bias(proj, bo)?;
        let proj = maybe_dropout(g, proj, cfg.dropout, &mut dropout)?;
        x = g.add(x, proj)?;

        // Feed-forward sublayer.
        let g2 = bound.var(&n("ln2.g"))?;
        let b2v = bound.var(&n("ln2.b"))?;
        let h = g.layer_norm(x, g2, b2v, cfg.ln_eps)?;
        let w1 = bound.var(&n("w1"))?;
        let bb1 = bound.var(&n("b1"))?;
        let ff = g.matmul(h, w1)?;
        let ff = g.add_bias(ff, bb1)?;
        let ff = g.gelu(ff);
        let w2 = bound.var(&n("w2"))?;
        let bb2 = bound.var(&n("b2"))?;
        let ff = g.matmul(ff, w2)?;
        let ff = g.add_bias(ff, bb2)?;
        let ff = maybe_dropout(g, ff, cfg.dropout, &mut dropout)?;
        x = g.add(x, ff)?;
        layers.push(x);
    }

    let gf = bound.var("ln_f.g")?;
    let bf = bound.var("ln_f.b")?;
    let final_out = g.layer_norm(x, gf, bf, cfg.ln_eps)?;
    Ok(EncodeOut { layers, final_out })
}

/// Instance-normalize a [t, d] tensor per channel over time (no affine).
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (t, d) = (x.rows(), x.cols());
    if t == 0 {
        return Err(Error::EmptyInput(String::from("instance_norm")));
    }
    let xv = x.data();
    let mut out = vec![0.0; t * d];
    for j in 0..d {
        let mut mean = 0.0;
        for i in 0..t {
            mean += xv[i * d + j];
        }
        mean /= t as f64;
        let mut var = 0.0;
        for i in 0..t {
            let c = xv[i * d + j] - mean;
            var += c * c;
        }
        var /= t as f64;
        let inv = 1.0 / libm::sqrt(var + eps);
        for i in 0..t {
            out[i * d + j] = (xv[i * d + j] - mean) * inv;
        }
    }
    Tensor::matrix(t, d, out)
}

/// Teacher target: average of the instance-normalized top `top_l` layer
/// outputs, shape [t, d].
pub fn target_representation(layer_values: &[Tensor], top_l: usize, eps: f64) -> Result<Tensor> {
    if top_l == 0 || top_l > layer_values.len() {
        return Err(Error::Config(format!(
            "top_l {top_l} must be in 1..={}",
            layer_values.len()
        )));
    }
    let picked = &layer_values[layer_values.len() - top_l..];
    let (t, d) = (picked[0].rows(), picked[0].cols());
    let mut acc = vec![0.0; t * d];
    for layer in picked {
        let normed = instance_norm(layer, eps)?;
        for (a, v) in acc.iter_mut().zip(normed.data()) {
            *a += v;
        }
    }
    let inv = 1.0 / top_l as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Tensor::matrix(t, d, acc)
}
