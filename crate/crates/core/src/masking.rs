//! Span masking over frame sequences.
//!
//! Every position independently starts a mask span with probability `p`;
//! spans have fixed length, overlapping or abutting spans merge, and spans
//! running past the end truncate. The expected masked fraction is therefore
//! `1 - (1 - p)^span`, not `p`.

use alloc::vec;
use alloc::vec::Vec;

use crate::rng::Stream;

/// Sample a span mask of length `t_len`. Draws exactly `t_len` uniforms from
/// `stream`, one per position, regardless of outcomes.
pub fn span_mask(t_len: usize, p: f64, span: usize, stream: &mut Stream) -> Vec<bool> {
    let mut mask = vec![false; t_len];
    for i in 0..t_len {
        let start_here = stream.uniform() < p;
        if start_here {
            let end = (i + span).min(t_len);
            mask[i..end].fill(true);
        }
    }
    mask
}

/// Indices of masked positions, ascending.
pub fn masked_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect()
}

/// Fraction of positions masked.
pub fn mask_fraction(mask: &[bool]) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
}

/// Expected masked fraction for start probability `p` and span length `span`
/// on an infinite sequence: `1 - (1 - p)^span`.
pub fn expected_mask_fraction(p: f64, span: usize) -> f64 {
    1.0 - libm::pow(1.0 - p, span as f64)
}

/// Replace masked positions with the distinguished mask symbol (the code one
/// past the real codebook); everything else passes through unchanged.
///
/// Frame inputs have no symbol to substitute — the speech front-end swaps
/// masked rows for its learned mask vector instead, taking the same `mask`.
pub fn apply_mask_codes(
    codes: &[usize],
    mask: &[bool],
    mask_symbol: usize,
) -> crate::error::Result<Vec<usize>> {
    if codes.len() != mask.len() {
        return Err(crate::error::Error::Alignment {
            context: alloc::string::String::from("apply_mask_codes: codes vs mask"),
            left: codes.len(),
            right: mask.len(),
        });
    }
    Ok(codes
        .iter()
        .zip(mask)
        .map(|(&c, &m)| if m { mask_symbol } else { c })
        .collect())
}
