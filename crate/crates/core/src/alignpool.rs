//! Attention-based word pooling.
//!
//! Cross-attention maps are scored by sharpness (sum of row and column L2
//! norms), the sharpest layer-head pairs are averaged, and each word's
//! character rows are collapsed into a temporal profile over encoder frames.
//! The profile weights the encoder states into a word-local acoustic summary.
//! All accumulation is done in `f64`.

use ndarray::{Array1, ArrayView1, ArrayView2, ArrayView4, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textnorm::Span;

/// Number of layer-head pairs kept by dynamic selection.
pub const DEFAULT_TOP_K: usize = 10;

/// Profile mass at or below this is treated as no evidence.
pub const MASS_EPSILON: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum PoolError {
    #[error("attention map contains non-finite values")]
    NonFinite,
    #[error("word has an empty character span")]
    EmptyCharSpan,
    #[error("character span {0:?} exceeds alignment sequence length {1}")]
    CharSpanOutOfRange(Span, usize),
    #[error("no layer-head pairs selected")]
    EmptySelection,
    #[error("every encoder frame is masked")]
    AllFramesMasked,
}

/// Sharpness `S(A) = Σ_j ||A[j,:]||₂ + Σ_t ||A[:,t]||₂`.
pub fn sharpness<T>(a: ArrayView2<'_, T>) -> Result<f64, PoolError>
where
    T: Copy + Into<f64>,
{
    let (rows, cols) = a.dim();
    let mut col_sq = vec![0.0f64; cols];
    let mut total = 0.0;
    for j in 0..rows {
        let mut row_sq = 0.0;
        for (t, v) in a.row(j).iter().enumerate() {
            let v: f64 = (*v).into();
            if !v.is_finite() {
                return Err(PoolError::NonFinite);
            }
            let sq = v * v;
            row_sq += sq;
            col_sq[t] += sq;
        }
        total += row_sq.sqrt();
    }
    total += col_sq.iter().map(|s| s.sqrt()).sum::<f64>();
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSelection {
    /// `(layer, head)` pairs, sharpest first.
    pub pairs: Vec<(usize, usize)>,
    pub scores: Vec<f64>,
}

impl HeadSelection {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Scores every layer-head map of one utterance and keeps the `k` sharpest.
/// Ties go to the lower layer, then the lower head.
pub fn select_top_heads(attn: ArrayView4<'_, f32>, k: usize) -> Result<HeadSelection, PoolError> {
    let (layers, heads, _, _) = attn.dim();
    let mut scored = Vec::with_capacity(layers * heads);
    for l in 0..layers {
        for h in 0..heads {
            let map = attn.index_axis(Axis(0), l);
            let map = map.index_axis(Axis(0), h);
            scored.push(((l, h), sharpness(map)?));
        }
    }
    // Stable sort keeps index order among equal scores.
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    scored.truncate(k.max(1).min(layers * heads));
    let (pairs, scores) = scored.into_iter().unzip();
    Ok(HeadSelection { pairs, scores })
}

/// Selection that averages every layer-head pair (the all-head ablation).
pub fn all_heads(attn: ArrayView4<'_, f32>) -> Result<HeadSelection, PoolError> {
    let (layers, heads, _, _) = attn.dim();
    select_top_heads(attn, layers * heads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordAttentionProfile {
    pub word_index: usize,
    pub weights: Vec<f64>,
    /// Set when the masked profile had mass ≤ 1e-8; weights are then uniform
    /// over valid frames.
    pub degenerate: bool,
}

/// Temporal attention profile of one word: the selected maps averaged over
/// heads then over the word's character rows, masked, and normalized.
pub fn word_attention_profile(
    attn: ArrayView4<'_, f32>,
    selection: &HeadSelection,
    word_index: usize,
    char_span: Span,
    encoder_mask: &[u8],
) -> Result<WordAttentionProfile, PoolError> {
    if char_span.is_empty() {
        return Err(PoolError::EmptyCharSpan);
    }
    if selection.is_empty() {
        return Err(PoolError::EmptySelection);
    }
    let (_, _, u, l) = attn.dim();
    if char_span.end > u {
        return Err(PoolError::CharSpanOutOfRange(char_span, u));
    }
    debug_assert_eq!(encoder_mask.len(), l);

    let mut head_mean = vec![vec![0.0f64; l]; char_span.len()];
    for &(layer, head) in &selection.pairs {
        for (row, j) in head_mean.iter_mut().zip(char_span.range()) {
            let src = attn.slice(ndarray::s![layer, head, j, ..]);
            for (acc, v) in row.iter_mut().zip(src.iter()) {
                *acc += f64::from(*v);
            }
        }
    }
    let k = selection.len() as f64;
    let c = char_span.len() as f64;
    let mut weights = vec![0.0f64; l];
    for row in &head_mean {
        for (w, v) in weights.iter_mut().zip(row) {
            *w += v / k;
        }
    }
    for (w, m) in weights.iter_mut().zip(encoder_mask) {
        *w = if *m != 0 { *w / c } else { 0.0 };
    }

    let mass: f64 = weights.iter().sum();
    let degenerate = mass <= MASS_EPSILON;
    if degenerate {
        let valid = encoder_mask.iter().filter(|m| **m != 0).count();
        if valid == 0 {
            return Err(PoolError::AllFramesMasked);
        }
        let u = 1.0 / valid as f64;
        for (w, m) in weights.iter_mut().zip(encoder_mask) {
            *w = if *m != 0 { u } else { 0.0 };
        }
    } else {
        let denom = mass + MASS_EPSILON;
        for w in &mut weights {
            *w /= denom;
        }
    }
    Ok(WordAttentionProfile {
        word_index,
        weights,
        degenerate,
    })
}

/// `r_loc = Σ_t α(t) e_t`.
pub fn local_pool(profile: &WordAttentionProfile, encoder_states: ArrayView2<'_, f32>) -> Array1<f64> {
    weighted_frames(&profile.weights, encoder_states)
}

fn weighted_frames(weights: &[f64], encoder_states: ArrayView2<'_, f32>) -> Array1<f64> {
    let (l, d) = encoder_states.dim();
    assert_eq!(weights.len(), l, "profile length must equal frame count");
    let mut out = Array1::<f64>::zeros(d);
    for (w, frame) in weights.iter().zip(encoder_states.rows()) {
        if *w == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(frame.iter()) {
            *o += w * f64::from(*v);
        }
    }
    out
}

/// Masked mean of encoder frames.
pub fn global_pool(encoder_states: ArrayView2<'_, f32>, encoder_mask: &[u8]) -> Result<Array1<f64>, PoolError> {
    let (_, d) = encoder_states.dim();
    let mut out = Array1::<f64>::zeros(d);
    let mut count = 0usize;
    for (frame, m) in encoder_states.rows().into_iter().zip(encoder_mask) {
        if *m == 0 {
            continue;
        }
        count += 1;
        for (o, v) in out.iter_mut().zip(frame.iter()) {
            *o += f64::from(*v);
        }
    }
    if count == 0 {
        return Err(PoolError::AllFramesMasked);
    }
    out /= count as f64;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWordState {
    pub vector: Array1<f64>,
    /// False when the token span was empty; the word must be masked.
    pub valid: bool,
}

/// Mean decoder state over a word's token span.
pub fn decoder_word_state(decoder_states: ArrayView2<'_, f32>, token_span: Span) -> DecoderWordState {
    let (_, d) = decoder_states.dim();
    let mut vector = Array1::<f64>::zeros(d);
    if token_span.is_empty() {
        return DecoderWordState { vector, valid: false };
    }
    for j in token_span.range() {
        let row: ArrayView1<'_, f32> = decoder_states.row(j);
        for (o, v) in vector.iter_mut().zip(row.iter()) {
            *o += f64::from(*v);
        }
    }
    vector /= token_span.len() as f64;
    DecoderWordState { vector, valid: true }
}
