use ndarray::{Array1, Array2};

use super::{FusionConfig, FusionError, HeadPolicy};
use crate::alignpool;
use crate::featio::{FeatureBundle, Severity};

/// Pooled per-word inputs of one utterance. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceFeatures {
    pub utterance_id: String,
    pub scene_id: String,
    pub severity: Severity,
    /// `N × D_h`, rows `d_i`.
    pub decoder: Array2<f64>,
    /// `N × D_e`, rows `r_i^loc`.
    pub local: Option<Array2<f64>>,
    /// `g`, length `D_e`.
    pub global: Option<Array1<f64>>,
    pub correct: Vec<u8>,
    pub valid: Vec<u8>,
    pub target: Option<f64>,
    /// Words whose attention profile fell back to uniform.
    pub degenerate_words: usize,
}

impl UtteranceFeatures {
    pub fn num_words(&self) -> usize {
        self.correct.len()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|m| **m != 0).count()
    }
}

/// Pools one bundle into word features according to the configured mode.
/// Words with an empty token span (or, when local pooling is used, an empty
/// character span) are masked out.
pub fn build_features(bundle: &FeatureBundle, config: &FusionConfig) -> Result<UtteranceFeatures, FusionError> {
    let n = bundle.num_words();
    let (_, dh) = bundle.decoder_states.dim();
    let (_, de) = bundle.encoder_states.dim();
    if dh != config.decoder_dim {
        return Err(FusionError::DimMismatch {
            what: "decoder_dim",
            expected: config.decoder_dim,
            found: dh,
        });
    }
    if (config.mode.uses_local() || config.mode.uses_global()) && de != config.encoder_dim {
        return Err(FusionError::DimMismatch {
            what: "encoder_dim",
            expected: config.encoder_dim,
            found: de,
        });
    }

    let mut valid = bundle.labels.valid.clone();
    let mut correct = bundle.labels.correct.clone();
    let mut decoder = Array2::<f64>::zeros((n, dh));
    for (i, span) in bundle.token_spans.iter().enumerate() {
        let state = alignpool::decoder_word_state(bundle.decoder_states.view(), *span);
        if !state.valid {
            valid[i] = 0;
        }
        decoder.row_mut(i).assign(&state.vector);
    }

    let mut degenerate_words = 0;
    let local = if config.mode.uses_local() {
        let attn = bundle
            .cross_attention
            .as_ref()
            .ok_or(FusionError::MissingAttention(config.mode))?;
        let selection = match config.head_selection {
            HeadPolicy::TopK(k) => alignpool::select_top_heads(attn.view(), k)?,
            HeadPolicy::All => alignpool::all_heads(attn.view())?,
        };
        let mut local = Array2::<f64>::zeros((n, de));
        for (i, span) in bundle.char_spans.iter().enumerate() {
            if span.is_empty() {
                valid[i] = 0;
                continue;
            }
            let profile =
                alignpool::word_attention_profile(attn.view(), &selection, i, *span, &bundle.encoder_mask)?;
            degenerate_words += usize::from(profile.degenerate);
            local
                .row_mut(i)
                .assign(&alignpool::local_pool(&profile, bundle.encoder_states.view()));
        }
        Some(local)
    } else {
        None
    };

    let global = if config.mode.uses_global() {
        Some(alignpool::global_pool(bundle.encoder_states.view(), &bundle.encoder_mask)?)
    } else {
        None
    };

    for (c, m) in correct.iter_mut().zip(&valid) {
        if *m == 0 {
            *c = 0;
        }
    }

    Ok(UtteranceFeatures {
        utterance_id: bundle.utterance_id.clone(),
        scene_id: bundle.scene_id.clone(),
        severity: bundle.severity,
        decoder,
        local,
        global,
        correct,
        valid,
        target: bundle.target_score,
        degenerate_words,
    })
}

/// Words of several utterances stacked row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub decoder: Array2<f64>,
    pub local: Option<Array2<f64>>,
    /// `g` repeated for every word of its utterance.
    pub global: Option<Array2<f64>>,
    pub severity: Vec<usize>,
    pub correct: Vec<f64>,
    pub valid: Vec<f64>,
    /// Row range of each utterance.
    pub offsets: Vec<usize>,
}

impl Batch {
    pub fn from_utterances(utterances: &[&UtteranceFeatures], config: &FusionConfig) -> Self {
        let total: usize = utterances.iter().map(|u| u.num_words()).sum();
        let dh = config.decoder_dim;
        let de = config.encoder_dim;
        let mut decoder = Array2::<f64>::zeros((total, dh));
        let mut local = config.mode.uses_local().then(|| Array2::<f64>::zeros((total, de)));
        let mut global = config.mode.uses_global().then(|| Array2::<f64>::zeros((total, de)));
        let mut severity = Vec::with_capacity(total);
        let mut correct = Vec::with_capacity(total);
        let mut valid = Vec::with_capacity(total);
        let mut offsets = Vec::with_capacity(utterances.len() + 1);
        let mut row = 0;
        for u in utterances {
            offsets.push(row);
            let n = u.num_words();
            decoder.slice_mut(ndarray::s![row..row + n, ..]).assign(&u.decoder);
            if let (Some(dst), Some(src)) = (local.as_mut(), u.local.as_ref()) {
                dst.slice_mut(ndarray::s![row..row + n, ..]).assign(src);
            }
            if let (Some(dst), Some(g)) = (global.as_mut(), u.global.as_ref()) {
                for i in row..row + n {
                    dst.row_mut(i).assign(g);
                }
            }
            severity.extend(std::iter::repeat_n(u.severity.index(), n));
            correct.extend(u.correct.iter().map(|c| f64::from(*c)));
            valid.extend(u.valid.iter().map(|m| f64::from(*m)));
            row += n;
        }
        offsets.push(row);
        Batch {
            decoder,
            local,
            global,
            severity,
            correct,
            valid,
            offsets,
        }
    }

    pub fn len(&self) -> usize {
        self.correct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correct.is_empty()
    }

    pub fn valid_count(&self) -> f64 {
        self.valid.iter().sum()
    }
}
