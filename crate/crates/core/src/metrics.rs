//! Clustering-quality metrics and a linear phone probe.
//!
//! Quality of a discrete code stream is judged against frame-aligned phone
//! labels through the joint count table: phone purity `Σ_c max_y p(y,c)`,
//! cluster purity `Σ_y max_c p(y,c)`, and phone-normalized mutual information
//! `I(phone; code) / H(phone)` with natural logs and the `0·log 0 = 0`
//! convention. Continuous representations are judged by the held-out accuracy
//! of a multinomial logistic regression trained on a deterministic split.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Graph;
use crate::corpus::align_lengths;
use crate::error::{Error, Result};
use crate::optim::{AdamHyper, AdamState};
use crate::params::ParamSet;
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Frame-aligned (phone, code) co-occurrence counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointCounts {
    /// Row-major P×K count matrix.
    counts: Vec<u64>,
    /// Number of phone classes (rows).
    pub p: usize,
    /// Number of code classes (columns).
    pub k: usize,
    /// Total frames counted.
    pub total: u64,
}

impl JointCounts {
    /// Build directly from a count matrix (row-major, P rows of K).
    pub fn from_counts(p: usize, k: usize, counts: Vec<u64>) -> Result<Self> {
        if p == 0 || k == 0 || counts.len() != p * k {
            return Err(Error::Config(alloc::format!(
                "joint counts need a {p}x{k} matrix, got {} entries",
                counts.len()
            )));
        }
        let total = counts.iter().sum();
        Ok(JointCounts { counts, p, k, total })
    }

    pub fn at(&self, y: usize, c: usize) -> u64 {
        self.counts[y * self.k + c]
    }

    /// Phone marginal counts (row sums).
    pub fn phone_marginal(&self) -> Vec<u64> {
        (0..self.p).map(|y| self.counts[y * self.k..(y + 1) * self.k].iter().sum()).collect()
    }

    /// Code marginal counts (column sums).
    pub fn code_marginal(&self) -> Vec<u64> {
        let mut m = vec![0u64; self.k];
        for y in 0..self.p {
            for c in 0..self.k {
                m[c] += self.counts[y * self.k + c];
            }
        }
        m
    }
}

/// The three clustering-quality numbers for one (feature, codebook) pairing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityReport {
    pub phone_purity: f64,
    pub cluster_purity: f64,
    pub pnmi: f64,
}

/// Count (phone, code) co-occurrences over per-utterance aligned streams.
///
/// Paired streams may differ in length by at most one frame (the overhang is
/// truncated); larger disagreements are alignment errors.
pub fn joint_counts(
    utts: &[(&[usize], &[usize])],
    n_phones: usize,
    k: usize,
) -> Result<JointCounts> {
    if n_phones == 0 || k == 0 {
        return Err(Error::Config(String::from("joint counts need n_phones >= 1 and k >= 1")));
    }
    let mut counts = vec![0u64; n_phones * k];
    let mut total = 0u64;
    for (codes, phones) in utts {
        let t = align_lengths("codes vs phones", codes.len(), phones.len())?;
        for i in 0..t {
            if phones[i] >= n_phones {
                return Err(Error::Vocabulary { code: phones[i], vocab: n_phones });
            }
            if codes[i] >= k {
                return Err(Error::Vocabulary { code: codes[i], vocab: k });
            }
            counts[phones[i] * k + codes[i]] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput(String::from("joint_counts")));
    }
    Ok(JointCounts { counts, p: n_phones, k, total })
}

fn nonempty(j: &JointCounts, what: &str) -> Result<()> {
    if j.total == 0 {
        return Err(Error::EmptyInput(String::from(what)));
    }
    Ok(())
}

/// `Σ_c max_y p(y,c)`: how pure each code is in phone terms.
pub fn phone_purity(j: &JointCounts) -> Result<f64> {
    nonempty(j, "phone_purity")?;
    let mut s = 0u64;
    for c in 0..j.k {
        s += (0..j.p).map(|y| j.at(y, c)).max().unwrap_or(0);
    }
    Ok(s as f64 / j.total as f64)
}

/// `Σ_y max_c p(y,c)`: how concentrated each phone is on one code.
pub fn cluster_purity(j: &JointCounts) -> Result<f64> {
    nonempty(j, "cluster_purity")?;
    let mut s = 0u64;
    for y in 0..j.p {
        s += (0..j.k).map(|c| j.at(y, c)).max().unwrap_or(0);
    }
    Ok(s as f64 / j.total as f64)
}

/// Phone-normalized mutual information `I(phone; code) / H(phone)`, natural
/// logs, `0·log 0 = 0`. A single-phone table has `H(phone) = 0` and no
/// defined value.
pub fn pnmi(j: &JointCounts) -> Result<f64> {
    nonempty(j, "pnmi")?;
    let n = j.total as f64;
    let py: Vec<f64> = j.phone_marginal().iter().map(|&c| c as f64 / n).collect();
    let pc: Vec<f64> = j.code_marginal().iter().map(|&c| c as f64 / n).collect();
    let h_phone: f64 = -py.iter().filter(|&&p| p > 0.0).map(|&p| p * libm::log(p)).sum::<f64>();
    if h_phone == 0.0 {
        return Err(Error::UndefinedMetric(String::from(
            "pnmi needs at least two phones with mass",
        )));
    }
    let mut mi = 0.0;
    for y in 0..j.p {
        for c in 0..j.k {
            let pyc = j.at(y, c) as f64 / n;
            if pyc > 0.0 {
                mi += pyc * libm::log(pyc / (py[y] * pc[c]));
            }
        }
    }
    // Tiny negative round-off from the log sums is still zero information.
    Ok((mi / h_phone).max(0.0))
}

/// All three quality metrics at once.
pub fn quality(j: &JointCounts) -> Result<QualityReport> {
    Ok(QualityReport {
        phone_purity: phone_purity(j)?,
        cluster_purity: cluster_purity(j)?,
        pnmi: pnmi(j)?,
    })
}

/// Frames beyond this many are stride-subsampled before probe training.
const PROBE_FRAME_CAP: usize = 4000;
const PROBE_STEPS: usize = 300;
const PROBE_LR: f64 = 0.05;
const PROBE_EVAL_FRACTION: f64 = 0.2;

/// Held-out accuracy of a multinomial logistic regression from frozen
/// per-frame representations to phone labels.
///
/// The frame permutation, the 80/20 split, and the zero-initialized convex
/// fit make the result a pure function of `(reps, phones, n_phones, seed)`.
pub fn phone_probe(reps: &Tensor, phones: &[usize], n_phones: usize, seed: u64) -> Result<f64> {
    let (n, d) = (reps.rows(), reps.cols());
    if phones.len() != n {
        return Err(Error::Alignment {
            context: String::from("phone_probe: representations vs phones"),
            left: n,
            right: phones.len(),
        });
    }
    if let Some(&bad) = phones.iter().find(|&&y| y >= n_phones) {
        return Err(Error::Vocabulary { code: bad, vocab: n_phones });
    }
    let mut distinct = vec![false; n_phones];
    for &y in phones {
        distinct[y] = true;
    }
    if distinct.iter().filter(|&&d| d).count() < 2 {
        return Err(Error::UndefinedMetric(String::from(
            "phone_probe needs at least two distinct phones",
        )));
    }
    if n < 5 {
        return Err(Error::InsufficientData { needed: 5, got: n });
    }

    // Deterministic subsample, then a seeded permutation split.
    let stride = n.div_ceil(PROBE_FRAME_CAP);
    let kept: Vec<usize> = (0..n).step_by(stride).collect();
    let mut stream = Stream::open(seed, "probe-split", &[]);
    let perm = stream.permutation(kept.len());
    let n_eval = ((kept.len() as f64 * PROBE_EVAL_FRACTION) as usize).max(1);
    let n_train = kept.len() - n_eval;
    if n_train == 0 {
        return Err(Error::InsufficientData { needed: 2, got: kept.len() });
    }
    let pick = |slot: &[usize]| -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(slot.len() * d);
        let mut labels = Vec::with_capacity(slot.len());
        for &s in slot {
            let i = kept[s];
            data.extend_from_slice(reps.row(i));
            labels.push(phones[i]);
        }
        (Tensor::matrix(slot.len(), d, data).expect("probe split rows"), labels)
    };
    let (x_train, y_train) = pick(&perm[..n_train]);
    let (x_eval, y_eval) = pick(&perm[n_train..]);

    // Convex fit from zero init: full-batch Adam on mean cross-entropy.
    let mut ps = ParamSet::new();
    ps.add("probe.w", Tensor::zeros(vec![d, n_phones]));
    ps.add("probe.b", Tensor::zeros(vec![n_phones]));
    let mut adam = AdamState::new(&ps);
    let hyper = AdamHyper::default();
    for _ in 0..PROBE_STEPS {
        let mut g = Graph::new();
        let x = g.constant(x_train.clone());
        let w = g.leaf(ps.get("probe.w")?.clone(), true);
        let b = g.leaf(ps.get("probe.b")?.clone(), true);
        let logits = g.matmul(x, w)?;
        let logits = g.add_bias(logits, b)?;
        let ce = g.ce_sum_rows(logits, &y_train)?;
        let loss = g.scale(ce, 1.0 / n_train as f64);
        g.backward(loss, 1.0)?;
        ps.at_mut(0).grad = Tensor::matrix(d, n_phones, g.grad(w).expect("probe w grad").to_vec())?;
        ps.at_mut(1).grad = Tensor::new(vec![n_phones], g.grad(b).expect("probe b grad").to_vec())?;
        adam.step(&mut ps, PROBE_LR, &hyper)?;
    }

    // Held-out argmax accuracy; ties break toward the lower class.
    let w = &ps.get("probe.w")?;
    let b = &ps.get("probe.b")?;
    let mut correct = 0usize;
    for (i, &y) in y_eval.iter().enumerate() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for c in 0..n_phones {
            let mut z = b.data()[c];
            for j in 0..d {
                z += x_eval.at(i, j) * w.at(j, c);
            }
            if z > best.1 {
                best = (c, z);
            }
        }
        if best.0 == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / y_eval.len() as f64)
}
