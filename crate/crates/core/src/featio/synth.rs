//! Deterministic synthetic bundles with a planted ground truth.
//!
//! Every synthetic utterance has sharp near-monotonic attention heads mixed
//! with diffuse ones, so dynamic head selection has something to find. The
//! planted mode decides where the label signal lives:
//!
//! * `Decoder`: `c_i = [v_dec · d_i > 0]`, with decoder tokens of word `i`
//!   shifted along `v_dec`.
//! * `Local`: `c_i = [v_enc · r_i^loc > 0]`, where `r_i^loc` is the
//!   attention-pooled encoder summary computed exactly as the pipeline
//!   computes it, and the frames under word `i` are shifted along `v_enc`.
//!   Decoder states are pure noise, so only the local branch can separate.
//! * `Noise`: labels are fair coin flips.

use ndarray::{Array1, Array2, Array4};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{FeatError, FeatureBundle, Severity};
use crate::alignpool::{self, DEFAULT_TOP_K};
use crate::textnorm::{Span, WordLabelSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthDims {
    /// `L`
    pub frames: usize,
    /// `D_e`
    pub encoder_dim: usize,
    /// `T`
    pub tokens: usize,
    /// `D_h`
    pub decoder_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// `N`
    pub words: usize,
    /// `U`
    pub chars: usize,
}

impl Default for SynthDims {
    fn default() -> Self {
        Self {
            frames: 60,
            encoder_dim: 16,
            tokens: 12,
            decoder_dim: 16,
            layers: 3,
            heads: 4,
            words: 8,
            chars: 32,
        }
    }
}

impl SynthDims {
    fn check(&self) -> Result<(), FeatError> {
        let all = [
            self.frames,
            self.encoder_dim,
            self.tokens,
            self.decoder_dim,
            self.layers,
            self.heads,
            self.words,
            self.chars,
        ];
        if all.contains(&0) {
            return Err(FeatError::InvalidDims(format!("all dims must be positive: {self:?}")));
        }
        if self.words > self.tokens || self.words > self.chars {
            return Err(FeatError::InvalidDims(format!(
                "need words ≤ tokens and words ≤ chars: {self:?}"
            )));
        }
        if self.frames < self.words {
            return Err(FeatError::InvalidDims(format!("need words ≤ frames: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantMode {
    Decoder,
    Local,
    Noise,
}

impl std::str::FromStr for PlantMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "decoder" => Ok(PlantMode::Decoder),
            "local" => Ok(PlantMode::Local),
            "noise" => Ok(PlantMode::Noise),
            other => Err(format!("unknown planted mode {other:?} (decoder|local|noise)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedSignalSpec {
    pub mode: PlantMode,
    /// Seeds the planted directions; shared by every utterance of a dataset.
    pub direction_seed: u64,
    /// Shift applied along the planted direction.
    pub strength: f64,
}

impl PlantedSignalSpec {
    pub fn new(mode: PlantMode, direction_seed: u64) -> Self {
        Self {
            mode,
            direction_seed,
            strength: 1.5,
        }
    }

    /// Unit planted directions `(v_dec, v_enc)`.
    pub fn directions(&self, decoder_dim: usize, encoder_dim: usize) -> (Array1<f64>, Array1<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.direction_seed ^ 0x9e37_79b9_7f4a_7c15);
        (unit(&mut rng, decoder_dim), unit(&mut rng, encoder_dim))
    }
}

fn unit(rng: &mut impl Rng, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            return v / norm;
        }
    }
}

/// Splits `total` items into `parts` contiguous non-empty spans.
fn partition(total: usize, parts: usize, offset: usize) -> Vec<Span> {
    let base = total / parts;
    let extra = total % parts;
    let mut cursor = offset;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let s = Span::new(cursor, cursor + len);
            cursor += len;
            s
        })
        .collect()
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

pub fn synthesize_bundle(seed: u64, dims: SynthDims, planted: &PlantedSignalSpec) -> Result<FeatureBundle, FeatError> {
    dims.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let SynthDims {
        frames: l,
        encoder_dim: de,
        tokens: t,
        decoder_dim: dh,
        layers: _,
        heads: _,
        words: n,
        chars: u,
    } = dims;
    let (v_dec, v_enc) = planted.directions(dh, de);

    let padding = rng.random_range(0..=(l - n) / 4);
    let valid_frames = l - padding;
    let encoder_mask: Vec<u8> = (0..l).map(|i| u8::from(i < valid_frames)).collect();

    let frame_spans = partition(valid_frames, n, 0);
    let char_spans = partition(u, n, 0);
    let prompt = usize::from(t > n);
    let token_spans = partition(t - prompt, n, prompt);

    let signs: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();

    let mut encoder = normal_matrix(&mut rng, l, de);
    let mut decoder = normal_matrix(&mut rng, t, dh);
    match planted.mode {
        PlantMode::Local => {
            for (span, s) in frame_spans.iter().zip(&signs) {
                for f in span.range() {
                    let mut row = encoder.row_mut(f);
                    row.scaled_add(planted.strength * s, &v_enc);
                }
            }
        }
        PlantMode::Decoder => {
            for (span, s) in token_spans.iter().zip(&signs) {
                for j in span.range() {
                    let mut row = decoder.row_mut(j);
                    row.scaled_add(planted.strength * s, &v_dec);
                }
            }
        }
        PlantMode::Noise => {}
    }

    let attention = synth_attention(&mut rng, dims, &frame_spans, &char_spans);

    let encoder_states = encoder.mapv(|v| v as f32);
    let decoder_states = decoder.mapv(|v| v as f32);

    let correct: Vec<u8> = match planted.mode {
        PlantMode::Decoder => token_spans
            .iter()
            .map(|span| {
                let d = alignpool::decoder_word_state(decoder_states.view(), *span);
                u8::from(d.vector.dot(&v_dec) > 0.0)
            })
            .collect(),
        PlantMode::Local => {
            let sel = alignpool::select_top_heads(attention.view(), DEFAULT_TOP_K)
                .map_err(|e| FeatError::Validation(e.to_string()))?;
            char_spans
                .iter()
                .enumerate()
                .map(|(i, span)| {
                    let p = alignpool::word_attention_profile(attention.view(), &sel, i, *span, &encoder_mask)
                        .map_err(|e| FeatError::Validation(e.to_string()))?;
                    let r = alignpool::local_pool(&p, encoder_states.view());
                    Ok(u8::from(r.dot(&v_enc) > 0.0))
                })
                .collect::<Result<_, FeatError>>()?
        }
        PlantMode::Noise => (0..n).map(|_| u8::from(rng.random::<bool>())).collect(),
    };

    let severity = [Severity::Mild, Severity::Moderate, Severity::ModeratelySevere][rng.random_range(0..3)];
    let words = char_spans
        .iter()
        .map(|s| (0..s.len()).map(|_| char::from(b'a' + (rng.next_u32() % 26) as u8)).collect())
        .collect();
    let target = 100.0 * correct.iter().map(|c| f64::from(*c)).sum::<f64>() / n as f64;

    Ok(FeatureBundle {
        utterance_id: format!("synth{seed:08}"),
        scene_id: format!("scene{seed:08}"),
        listener_id: "L0000".into(),
        severity,
        words,
        encoder_states,
        encoder_mask,
        decoder_states,
        cross_attention: Some(attention),
        token_spans,
        char_spans,
        labels: WordLabelSet {
            correct,
            valid: vec![1; n],
        },
        target_score: Some(target),
    })
}

/// Row-softmax attention. Roughly half of the heads peak on the frame
/// region of each character's word, sweeping left to right within it; the
/// rest are diffuse.
fn synth_attention(rng: &mut ChaCha8Rng, dims: SynthDims, frame_spans: &[Span], char_spans: &[Span]) -> Array4<f32> {
    let SynthDims {
        frames: l,
        layers,
        heads,
        chars: u,
        ..
    } = dims;
    let pairs = layers * heads;
    let sharp_count = pairs.div_ceil(2);
    let mut order: Vec<usize> = (0..pairs).collect();
    for i in (1..pairs).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut sharp = vec![false; pairs];
    for &p in &order[..sharp_count] {
        sharp[p] = true;
    }

    let mut centers = vec![0.0f64; u];
    let mut widths = vec![1.0f64; u];
    for (fs, cs) in frame_spans.iter().zip(char_spans) {
        let per_char = fs.len() as f64 / cs.len() as f64;
        for (k, j) in cs.range().enumerate() {
            centers[j] = fs.start as f64 + (k as f64 + 0.5) * per_char;
            widths[j] = (0.6 * per_char).max(0.5);
        }
    }

    let mut attn = Array4::<f32>::zeros((layers, heads, u, l));
    let mut logits = vec![0.0f64; l];
    for p in 0..pairs {
        let (layer, head) = (p / heads, p % heads);
        let jitter = rng.random_range(0.8..1.25);
        for j in 0..u {
            if sharp[p] {
                let w = widths[j] * jitter;
                for (t, z) in logits.iter_mut().enumerate() {
                    let d = (t as f64 - centers[j]) / w;
                    *z = -0.5 * d * d;
                }
            } else {
                for z in logits.iter_mut() {
                    *z = 0.3 * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            for (t, z) in logits.iter().enumerate() {
                attn[[layer, head, j, t]] = ((z - max).exp() / total) as f32;
            }
        }
    }
    attn
}
