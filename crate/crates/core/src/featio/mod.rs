//! Feature bundles: the per-utterance unit of exchange between the feature
//! extractor and the training pipeline.

pub mod container;
pub mod dataset;
pub mod synth;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::textnorm::{Span, WordLabelSet};
use container::{Container, TensorData};

pub use dataset::{read_index, write_index, Dataset, IndexEntry, INDEX_FILE};
pub use synth::{synthesize_bundle, PlantMode, PlantedSignalSpec, SynthDims};

pub const BUNDLE_MAGIC: &[u8; 4] = b"WLB1";

/// Tolerance on attention row sums for softmax-produced maps.
pub const ROW_SUM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum FeatError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u64),
    #[error("validation failure: {0}")]
    Validation(String),
    #[error("invalid synthesis dims: {0}")]
    InvalidDims(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Mild,
    Moderate,
    ModeratelySevere,
    Unknown,
}

impl Severity {
    pub const ALL: [Severity; 4] = [
        Severity::Mild,
        Severity::Moderate,
        Severity::ModeratelySevere,
        Severity::Unknown,
    ];

    /// Row of the severity embedding table.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::ModeratelySevere => "moderately_severe",
            Severity::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Severity {
    type Err = FeatError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace([' ', '-'], "_").as_str() {
            "mild" => Ok(Severity::Mild),
            "moderate" => Ok(Severity::Moderate),
            "moderately_severe" => Ok(Severity::ModeratelySevere),
            "unknown" | "" => Ok(Severity::Unknown),
            other => Err(FeatError::Validation(format!("unknown severity {other:?}"))),
        }
    }
}

/// All frozen-model tensors and metadata for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub utterance_id: String,
    pub scene_id: String,
    pub listener_id: String,
    pub severity: Severity,
    /// Normalized reference words, informational.
    pub words: Vec<String>,
    /// `L × D_e`.
    pub encoder_states: Array2<f32>,
    /// Length `L`; nonzero marks a frame inside the true utterance.
    pub encoder_mask: Vec<u8>,
    /// `T × D_h`.
    pub decoder_states: Array2<f32>,
    /// `layers × heads × U × L`, post-softmax.
    pub cross_attention: Option<Array4<f32>>,
    pub token_spans: Vec<Span>,
    pub char_spans: Vec<Span>,
    pub labels: WordLabelSet,
    pub target_score: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleMetadata {
    utterance_id: String,
    scene_id: String,
    listener_id: String,
    severity: Severity,
    #[serde(default)]
    words: Vec<String>,
    token_spans: Vec<(usize, usize)>,
    char_spans: Vec<(usize, usize)>,
    correct: Vec<u8>,
    valid: Vec<u8>,
    #[serde(default)]
    target_score: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ValidationOptions {
    /// Fail when the bundle carries no cross-attention.
    pub require_attention: bool,
    /// Fail when any attention row sum is farther than 1e-3 from 1.
    pub require_softmax_rows: bool,
}

impl FeatureBundle {
    pub fn num_words(&self) -> usize {
        self.labels.len()
    }

    pub fn frames(&self) -> usize {
        self.encoder_states.nrows()
    }

    /// Largest `|row sum − 1|` over every attention row, if attention exists.
    pub fn attention_row_deviation(&self) -> Option<f64> {
        let attn = self.cross_attention.as_ref()?;
        let mut worst = 0.0f64;
        for row in attn.lanes(Axis(3)) {
            let s: f64 = row.iter().map(|v| f64::from(*v)).sum();
            worst = worst.max((s - 1.0).abs());
        }
        Some(worst)
    }

    pub fn validate(&self, opts: ValidationOptions) -> Result<(), FeatError> {
        let fail = |msg: String| Err(FeatError::Validation(format!("{}: {msg}", self.utterance_id)));
        let (l, _) = self.encoder_states.dim();
        let (t, _) = self.decoder_states.dim();
        let n = self.labels.correct.len();
        if self.encoder_mask.len() != l {
            return fail(format!("encoder_mask has {} frames, encoder_states {l}", self.encoder_mask.len()));
        }
        if !self.encoder_mask.iter().any(|m| *m != 0) {
            return fail("encoder_mask has no valid frame".into());
        }
        if self.labels.valid.len() != n || self.token_spans.len() != n || self.char_spans.len() != n {
            return fail(format!(
                "word count mismatch: correct {n}, valid {}, token_spans {}, char_spans {}",
                self.labels.valid.len(),
                self.token_spans.len(),
                self.char_spans.len()
            ));
        }
        if !self.words.is_empty() && self.words.len() != n {
            return fail(format!("{} words listed for {n} labels", self.words.len()));
        }
        if n == 0 {
            return fail("bundle has no reference words".into());
        }
        if self.encoder_states.iter().chain(self.decoder_states.iter()).any(|v| !v.is_finite()) {
            return fail("non-finite encoder/decoder state".into());
        }
        check_spans(&self.token_spans, t).or_else(|m| fail(format!("token span {m} (T = {t})")))?;
        if let Some(y) = self.target_score {
            if !(0.0..=100.0).contains(&y) {
                return fail(format!("target score {y} outside [0, 100]"));
            }
        }
        match &self.cross_attention {
            Some(attn) => {
                let (_, _, u, al) = attn.dim();
                if al != l {
                    return fail(format!("cross_attention has {al} frames, encoder_states {l}"));
                }
                if attn.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return fail("cross_attention must be finite and nonnegative".into());
                }
                check_spans(&self.char_spans, u).or_else(|m| fail(format!("char span {m} (U = {u})")))?;
                if opts.require_softmax_rows {
                    let dev = self.attention_row_deviation().unwrap_or(0.0);
                    if dev > ROW_SUM_TOLERANCE {
                        return fail(format!("attention row sum deviates from 1 by {dev:.3e}"));
                    }
                }
            }
            None if opts.require_attention => return fail("cross_attention required but absent".into()),
            None => {}
        }
        Ok(())
    }

    fn to_tensors(&self) -> Vec<TensorData> {
        let (l, de) = self.encoder_states.dim();
        let (t, dh) = self.decoder_states.dim();
        let mut out = vec![
            TensorData::f32("encoder_states", vec![l, de], &standard(&self.encoder_states)),
            TensorData::u8("encoder_mask", vec![l], &self.encoder_mask),
            TensorData::f32("decoder_states", vec![t, dh], &standard(&self.decoder_states)),
        ];
        if let Some(attn) = &self.cross_attention {
            let (a, b, c, d) = attn.dim();
            let values: Vec<f32> = attn.iter().copied().collect();
            out.push(TensorData::f32("cross_attention", vec![a, b, c, d], &values));
        }
        out
    }

    fn metadata(&self) -> Value {
        let meta = BundleMetadata {
            utterance_id: self.utterance_id.clone(),
            scene_id: self.scene_id.clone(),
            listener_id: self.listener_id.clone(),
            severity: self.severity,
            words: self.words.clone(),
            token_spans: self.token_spans.iter().map(|s| (s.start, s.end)).collect(),
            char_spans: self.char_spans.iter().map(|s| (s.start, s.end)).collect(),
            correct: self.labels.correct.clone(),
            valid: self.labels.valid.clone(),
            target_score: self.target_score,
        };
        serde_json::to_value(meta).expect("bundle metadata serializes")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FeatError> {
        self.validate(ValidationOptions::default())?;
        container::encode(BUNDLE_MAGIC, &self.to_tensors(), self.metadata())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatError> {
        let c = container::decode(BUNDLE_MAGIC, bytes)?;
        Self::from_container(&c)
    }

    fn from_container(c: &Container) -> Result<Self, FeatError> {
        let meta: BundleMetadata = serde_json::from_value(c.manifest.metadata.clone())
            .map_err(|e| FeatError::CorruptManifest(format!("metadata: {e}")))?;
        let encoder_states = matrix(c.f32("encoder_states")?, "encoder_states")?;
        let decoder_states = matrix(c.f32("decoder_states")?, "decoder_states")?;
        let (_, encoder_mask) = c.u8("encoder_mask")?;
        let cross_attention = if c.has("cross_attention") {
            let (shape, values) = c.f32("cross_attention")?;
            let dims: [usize; 4] = shape
                .try_into()
                .map_err(|s| FeatError::ShapeMismatch(format!("cross_attention rank: {s:?}")))?;
            Some(Array4::from_shape_vec(dims, values).map_err(|e| FeatError::ShapeMismatch(e.to_string()))?)
        } else {
            None
        };
        let spans = |v: Vec<(usize, usize)>| -> Result<Vec<Span>, FeatError> {
            v.into_iter()
                .map(|(s, e)| {
                    if s <= e {
                        Ok(Span::new(s, e))
                    } else {
                        Err(FeatError::ShapeMismatch(format!("reversed span ({s}, {e})")))
                    }
                })
                .collect()
        };
        let bundle = FeatureBundle {
            utterance_id: meta.utterance_id,
            scene_id: meta.scene_id,
            listener_id: meta.listener_id,
            severity: meta.severity,
            words: meta.words,
            encoder_states,
            encoder_mask,
            decoder_states,
            cross_attention,
            token_spans: spans(meta.token_spans)?,
            char_spans: spans(meta.char_spans)?,
            labels: WordLabelSet {
                correct: meta.correct,
                valid: meta.valid,
            },
            target_score: meta.target_score,
        };
        bundle
            .validate(ValidationOptions::default())
            .map_err(|e| FeatError::ShapeMismatch(e.to_string()))?;
        Ok(bundle)
    }
}

fn standard(a: &Array2<f32>) -> Vec<f32> {
    a.iter().copied().collect()
}

fn matrix((shape, values): (Vec<usize>, Vec<f32>), name: &str) -> Result<Array2<f32>, FeatError> {
    let dims: [usize; 2] = shape
        .try_into()
        .map_err(|s| FeatError::ShapeMismatch(format!("{name} rank: {s:?}")))?;
    Array2::from_shape_vec(dims, values).map_err(|e| FeatError::ShapeMismatch(e.to_string()))
}

fn check_spans(spans: &[Span], bound: usize) -> Result<(), String> {
    let mut prev_end = 0;
    for s in spans {
        if s.end > bound {
            return Err(format!("{s:?} out of range"));
        }
        if !s.is_empty() {
            if s.start < prev_end {
                return Err(format!("{s:?} overlaps or is out of order"));
            }
            prev_end = s.end;
        }
    }
    Ok(())
}

pub fn validate_bundle(b: &FeatureBundle, opts: ValidationOptions) -> Result<(), FeatError> {
    b.validate(opts)
}

pub fn write_bundle(b: &FeatureBundle, path: &Path) -> Result<(), FeatError> {
    b.validate(ValidationOptions::default())?;
    container::write(path, BUNDLE_MAGIC, &b.to_tensors(), b.metadata())
}

pub fn read_bundle(path: &Path) -> Result<FeatureBundle, FeatError> {
    let c = container::read(path, BUNDLE_MAGIC)?;
    FeatureBundle::from_container(&c)
}
