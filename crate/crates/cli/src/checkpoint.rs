//! Checkpoints: a directory of named TNSR tensors plus a flat-key meta file.
//!
//! Layout of `step_N/`:
//! - `meta.cfg` — flat `key = value` lines: step and optimizer counters,
//!   encoder architecture, front-end, parameter order, EMA schedule state.
//! - `p.<name>.tnsr` — parameter values, one file per parameter.
//! - `m.<name>.tnsr` / `v.<name>.tnsr` — Adam first/second moments.
//! - `e.<name>.tnsr` — EMA teacher parameters (present only with a teacher).
//!
//! Everything is written in sorted order with shortest-round-trip float
//! formatting, so saving the same state twice produces byte-identical files,
//! and a save→load→save cycle is bitwise stable.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cobert_core::encoder::{EncoderConfig, FrontEnd};
use cobert_core::objectives::EmaState;
use cobert_core::optim::AdamState;
use cobert_core::params::ParamSet;
use cobert_core::train::{Model, TrainState};

use crate::tnsr;

/// Everything a saved training run contains.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub enc: EncoderConfig,
    pub front: FrontEnd,
    pub params: ParamSet,
    pub adam: AdamState,
    pub ema: Option<EmaState>,
    pub step: u64,
}

impl Checkpoint {
    /// The model view: encoder config, front-end, parameters.
    pub fn into_model(self) -> Model {
        Model { cfg: self.enc, front: self.front, params: self.params }
    }
}

fn write_meta(path: &Path, entries: &BTreeMap<String, String>) -> Result<()> {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{} line {}: expected key=value", path.display(), lineno + 1);
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn meta_get<'a>(map: &'a BTreeMap<String, String>, key: &str, path: &Path) -> Result<&'a str> {
    map.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| anyhow::anyhow!("{}: meta key `{key}` missing", path.display()))
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| anyhow::anyhow!("bad {what} `{s}`: {e}"))
}

/// Save a full training state into `dir` (created fresh; must not exist).
pub fn save(dir: &Path, state: &TrainState) -> Result<()> {
    if dir.exists() {
        bail!("checkpoint directory {} already exists", dir.display());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let model = &state.model;
    let mut meta = BTreeMap::new();
    meta.insert("step".into(), state.step.to_string());
    meta.insert("adam_t".into(), state.adam.t.to_string());
    meta.insert(
        "front".into(),
        match model.front {
            FrontEnd::Code => "code".to_string(),
            FrontEnd::Speech => "speech".to_string(),
        },
    );
    let e = &model.cfg;
    meta.insert("enc_dim".into(), e.dim.to_string());
    meta.insert("enc_n_layers".into(), e.n_layers.to_string());
    meta.insert("enc_n_heads".into(), e.n_heads.to_string());
    meta.insert("enc_ffn_dim".into(), e.ffn_dim.to_string());
    meta.insert("enc_max_len".into(), e.max_len.to_string());
    meta.insert("enc_vocab".into(), e.vocab.to_string());
    meta.insert("enc_in_dim".into(), e.in_dim.to_string());
    meta.insert("enc_stack".into(), e.stack.to_string());
    meta.insert("enc_dropout".into(), e.dropout.to_string());
    meta.insert("enc_ln_eps".into(), e.ln_eps.to_string());
    meta.insert("enc_top_l".into(), e.top_l.to_string());
    let order: Vec<&str> = model.params.iter().map(|p| p.name.as_str()).collect();
    meta.insert("param_order".into(), order.join(","));
    if let Some(ema) = &state.ema {
        meta.insert("ema".into(), "true".into());
        meta.insert("ema_counter".into(), ema.counter.to_string());
        meta.insert("ema_tau_start".into(), ema.tau_start.to_string());
        meta.insert("ema_tau_end".into(), ema.tau_end.to_string());
        meta.insert("ema_anneal".into(), ema.anneal_steps.to_string());
    } else {
        meta.insert("ema".into(), "false".into());
    }
    write_meta(&dir.join("meta.cfg"), &meta)?;

    for (idx, p) in model.params.iter().enumerate() {
        tnsr::write(&dir.join(format!("p.{}.tnsr", p.name)), &p.value)?;
        tnsr::write(&dir.join(format!("m.{}.tnsr", p.name)), &state.adam.m[idx])?;
        tnsr::write(&dir.join(format!("v.{}.tnsr", p.name)), &state.adam.v[idx])?;
    }
    if let Some(ema) = &state.ema {
        for p in ema.teacher.iter() {
            tnsr::write(&dir.join(format!("e.{}.tnsr", p.name)), &p.value)?;
        }
    }
    Ok(())
}

/// Load a checkpoint directory written by [`save`].
pub fn load(dir: &Path) -> Result<Checkpoint> {
    let meta_path = dir.join("meta.cfg");
    let meta = read_meta(&meta_path)?;
    let g = |k: &str| meta_get(&meta, k, &meta_path);

    let enc = EncoderConfig {
        dim: parse(g("enc_dim")?, "enc_dim")?,
        n_layers: parse(g("enc_n_layers")?, "enc_n_layers")?,
        n_heads: parse(g("enc_n_heads")?, "enc_n_heads")?,
        ffn_dim: parse(g("enc_ffn_dim")?, "enc_ffn_dim")?,
        max_len: parse(g("enc_max_len")?, "enc_max_len")?,
        vocab: parse(g("enc_vocab")?, "enc_vocab")?,
        in_dim: parse(g("enc_in_dim")?, "enc_in_dim")?,
        stack: parse(g("enc_stack")?, "enc_stack")?,
        dropout: parse(g("enc_dropout")?, "enc_dropout")?,
        ln_eps: parse(g("enc_ln_eps")?, "enc_ln_eps")?,
        top_l: parse(g("enc_top_l")?, "enc_top_l")?,
    };
    let front = match g("front")? {
        "code" => FrontEnd::Code,
        "speech" => FrontEnd::Speech,
        other => bail!("{}: unknown front `{other}`", meta_path.display()),
    };
    let step: u64 = parse(g("step")?, "step")?;
    let adam_t: u64 = parse(g("adam_t")?, "adam_t")?;
    let order: Vec<&str> = g("param_order")?.split(',').collect();

    let mut params = ParamSet::new();
    let mut m = Vec::with_capacity(order.len());
    let mut v = Vec::with_capacity(order.len());
    for name in &order {
        params.add(name, tnsr::read(&dir.join(format!("p.{name}.tnsr")))?);
        m.push(tnsr::read(&dir.join(format!("m.{name}.tnsr")))?);
        v.push(tnsr::read(&dir.join(format!("v.{name}.tnsr")))?);
    }
    let adam = AdamState { m, v, t: adam_t };

    let ema = if parse::<bool>(g("ema")?, "ema flag")? {
        let mut teacher = ParamSet::new();
        for name in &order {
            teacher.add(name, tnsr::read(&dir.join(format!("e.{name}.tnsr")))?);
        }
        Some(EmaState {
            teacher,
            tau_start: parse(g("ema_tau_start")?, "ema_tau_start")?,
            tau_end: parse(g("ema_tau_end")?, "ema_tau_end")?,
            anneal_steps: parse(g("ema_anneal")?, "ema_anneal")?,
            counter: parse(g("ema_counter")?, "ema_counter")?,
        })
    } else {
        None
    };

    Ok(Checkpoint { enc, front, params, adam, ema, step })
}

/// Load only the model (teacher use: frozen forward passes).
pub fn load_model(dir: &Path) -> Result<Model> {
    Ok(load(dir)?.into_model())
}
