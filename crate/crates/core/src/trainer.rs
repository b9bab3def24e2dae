//! Scene-grouped cross-validation around the fusion head.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignpool::DEFAULT_TOP_K;
use crate::fusionhead::{
    adamw_step, forward, loss_and_gradients, lr_at, sentence_score, AdamWConfig, Batch, Checkpoint, CheckpointMeta,
    FusionConfig, FusionError, FusionMode, FusionParams, HeadPolicy, OptimizerState, UtteranceFeatures,
};
use crate::metrics::{word_metrics, MetricsError, WordBatch, DEFAULT_THRESHOLD};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("{scenes} distinct scenes cannot fill {folds} folds")]
    TooFewScenes { scenes: usize, folds: usize },
    #[error("fold {fold} has no validation utterance with a valid word")]
    EmptyValidation { fold: usize },
    #[error("fold {fold} has no training utterance with a valid word")]
    EmptyTraining { fold: usize },
    #[error("checkpoints disagree: {0}")]
    ConfigMismatch(String),
    #[error("no checkpoints given")]
    NoCheckpoints,
    #[error("bad training config: {0}")]
    Config(String),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Every training knob. Loaded from a TOML file; missing keys keep their
/// defaults and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Utterances per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub warmup_fraction: f64,
    pub threshold: f64,
    pub proj_dim: usize,
    pub severity_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub layernorm_epsilon: f64,
    /// Number of sharpest heads, or 0 for all heads.
    pub top_k: usize,
    /// Utterances per gradient work unit. Fixed so that results do not
    /// depend on the number of worker threads.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            clip_norm: 1.0,
            warmup_fraction: 0.1,
            threshold: DEFAULT_THRESHOLD,
            proj_dim: 256,
            severity_dim: 128,
            hidden_dim: 256,
            dropout: 0.1,
            layernorm_epsilon: 1e-5,
            top_k: DEFAULT_TOP_K,
            chunk_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainerError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TrainerError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainerError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainerError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn check(&self) -> Result<(), TrainerError> {
        let bad = |m: &str| Err(TrainerError::Config(m.to_owned()));
        if self.epochs == 0 || self.batch_size == 0 || self.chunk_size == 0 {
            return bad("epochs, batch_size and chunk_size must be positive");
        }
        if self.proj_dim == 0 || self.hidden_dim == 0 {
            return bad("proj_dim and hidden_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn head_policy(&self) -> HeadPolicy {
        if self.top_k == 0 {
            HeadPolicy::All
        } else {
            HeadPolicy::TopK(self.top_k)
        }
    }

    pub fn fusion_config(&self, mode: FusionMode, decoder_dim: usize, encoder_dim: usize) -> FusionConfig {
        FusionConfig {
            mode,
            decoder_dim,
            encoder_dim,
            proj_dim: self.proj_dim,
            severity_dim: self.severity_dim,
            hidden_dim: self.hidden_dim,
            dropout_rate: self.dropout,
            layernorm_epsilon: self.layernorm_epsilon,
            head_selection: self.head_policy(),
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
            clip_max_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }
}

/// Scene → fold assignment. All utterances of a scene share a fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, scene: &str) -> Option<usize> {
        self.assignment.get(scene).copied()
    }

    /// Indices of `(train, validation)` utterances for fold `k`.
    pub fn split<'a>(&self, scene_ids: impl IntoIterator<Item = &'a str>, k: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, s) in scene_ids.into_iter().enumerate() {
            if self.fold_of(s) == Some(k) {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        (train, val)
    }
}

/// Shuffles the distinct scenes with the seed and deals them round-robin.
pub fn make_grouped_folds<'a>(
    scene_ids: impl IntoIterator<Item = &'a str>,
    folds: usize,
    seed: u64,
) -> Result<FoldPlan, TrainerError> {
    let mut scenes: Vec<&str> = scene_ids.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    if folds < 2 || scenes.len() < folds {
        return Err(TrainerError::TooFewScenes {
            scenes: scenes.len(),
            folds,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scenes.shuffle(&mut rng);
    let assignment = scenes
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s.to_owned(), i % folds))
        .collect();
    Ok(FoldPlan { folds, seed, assignment })
}

/// SplitMix64 finalizer over a sequence of words.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for p in parts {
        h ^= *p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub seed: u64,
    pub fold: usize,
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
}

/// Eval-mode probabilities for each utterance, computed chunk by chunk.
pub fn predict_probabilities(
    params: &FusionParams,
    config: &FusionConfig,
    utterances: &[&UtteranceFeatures],
    chunk_size: usize,
) -> Result<Vec<Vec<f64>>, TrainerError> {
    let chunks: Vec<Result<Vec<Vec<f64>>, FusionError>> = utterances
        .par_chunks(chunk_size.max(1))
        .map(|chunk| {
            let batch = Batch::from_utterances(chunk, config);
            let fwd = forward(params, config, &batch, None)?;
            Ok(batch
                .offsets
                .windows(2)
                .map(|w| fwd.probabilities.as_slice().expect("contiguous")[w[0]..w[1]].to_vec())
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(utterances.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

fn validation_f1(
    params: &FusionParams,
    config: &FusionConfig,
    val: &[&UtteranceFeatures],
    cfg: &TrainConfig,
) -> Result<f64, TrainerError> {
    let probs = predict_probabilities(params, config, val, cfg.chunk_size)?;
    let batches: Vec<WordBatch<'_>> = val
        .iter()
        .zip(&probs)
        .map(|(u, p)| WordBatch {
            probabilities: p,
            correct: &u.correct,
            valid: &u.valid,
        })
        .collect();
    Ok(word_metrics(&batches, cfg.threshold)?.f1)
}

/// Trains one fold and keeps the parameters of the epoch with the best
/// validation F1 (earliest epoch on ties). Must be called inside the rayon
/// pool that should do the work.
pub fn train_fold(
    train: &[&UtteranceFeatures],
    val: &[&UtteranceFeatures],
    config: &FusionConfig,
    cfg: &TrainConfig,
    seed: u64,
    fold: usize,
) -> Result<FoldOutcome, TrainerError> {
    let train: Vec<&UtteranceFeatures> = train.iter().copied().filter(|u| u.num_valid() > 0).collect();
    if train.is_empty() {
        return Err(TrainerError::EmptyTraining { fold });
    }
    if val.iter().all(|u| u.num_valid() == 0) {
        return Err(TrainerError::EmptyValidation { fold });
    }

    let mut params = FusionParams::init(config, mix_seed(&[seed, fold as u64, 0]));
    let mut state = OptimizerState::new(&params, cfg.adamw());
    let per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let total = per_epoch * cfg.epochs as u64;

    let mut best: Option<(f64, usize, u64, FusionParams)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, fold as u64, epoch as u64]));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_words = 0.0;
        for batch_idx in order.chunks(cfg.batch_size) {
            let members: Vec<&UtteranceFeatures> = batch_idx.iter().map(|i| train[*i]).collect();
            let normalizer: f64 = members.iter().map(|u| u.num_valid() as f64).sum();
            let parts: Vec<Result<(f64, FusionParams), FusionError>> = members
                .par_chunks(cfg.chunk_size)
                .enumerate()
                .map(|(c, chunk)| {
                    let batch = Batch::from_utterances(chunk, config);
                    let dropout = mix_seed(&[seed, fold as u64, step, c as u64, 1]);
                    let (l, g) = loss_and_gradients(&params, config, &batch, normalizer, Some(dropout))?;
                    Ok((l, g.params))
                })
                .collect();
            let mut grads = params.zeros_like();
            for p in parts {
                let (l, g) = p?;
                loss_sum += l;
                grads.add_assign(&g);
            }
            loss_words += normalizer;
            let lr = lr_at(step + 1, total + 1, cfg.learning_rate, cfg.warmup_fraction);
            adamw_step(&mut params, &grads, &mut state, lr);
            step += 1;
            if !params.is_finite() {
                return Err(FusionError::NonFiniteActivation("parameters").into());
            }
        }
        let f1 = validation_f1(&params, config, val, cfg)?;
        history.push(EpochLog {
            seed,
            fold,
            epoch,
            steps: step,
            train_loss: loss_sum / loss_words,
            val_f1: f1,
        });
        if best.as_ref().is_none_or(|(b, ..)| f1 > *b) {
            best = Some((f1, epoch, step, params.clone()));
        }
    }
    let (val_f1, epoch, best_step, best_params) = best.expect("at least one epoch");
    Ok(FoldOutcome {
        checkpoint: Checkpoint {
            config: config.clone(),
            params: best_params,
            meta: CheckpointMeta {
                seed,
                fold,
                epoch,
                step: best_step,
                val_f1,
            },
        },
        history,
    })
}

/// All folds of one seed.
pub fn train_seed(
    features: &[UtteranceFeatures],
    config: &FusionConfig,
    cfg: &TrainConfig,
    seed: u64,
    folds: usize,
) -> Result<(FoldPlan, Vec<FoldOutcome>), TrainerError> {
    let plan = make_grouped_folds(features.iter().map(|u| u.scene_id.as_str()), folds, seed)?;
    let mut outcomes = Vec::with_capacity(folds);
    for k in 0..folds {
        let (tr, va) = plan.split(features.iter().map(|u| u.scene_id.as_str()), k);
        let train: Vec<&UtteranceFeatures> = tr.iter().map(|i| &features[*i]).collect();
        let val: Vec<&UtteranceFeatures> = va.iter().map(|i| &features[*i]).collect();
        outcomes.push(train_fold(&train, &val, config, cfg, seed, k)?);
    }
    Ok((plan, outcomes))
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub utterance_id: String,
    pub seed: u64,
    /// P(correct) per reference word, averaged over the seed's folds.
    pub probabilities: Vec<f64>,
    pub valid: Vec<u8>,
    /// `None` when no word is valid.
    pub score: Option<f64>,
    pub folds: usize,
}

/// Fold-averaged predictions, one record per (seed, utterance), seeds in
/// ascending order.
pub fn predict(
    features: &[UtteranceFeatures],
    checkpoints: &[Checkpoint],
    chunk_size: usize,
) -> Result<Vec<PredictionRecord>, TrainerError> {
    let first = checkpoints.first().ok_or(TrainerError::NoCheckpoints)?;
    if let Some(c) = checkpoints.iter().find(|c| c.config != first.config) {
        return Err(TrainerError::ConfigMismatch(format!(
            "seed {} fold {} was trained with a different configuration",
            c.meta.seed, c.meta.fold
        )));
    }
    let mut by_seed: BTreeMap<u64, Vec<&Checkpoint>> = BTreeMap::new();
    for c in checkpoints {
        by_seed.entry(c.meta.seed).or_default().push(c);
    }
    let refs: Vec<&UtteranceFeatures> = features.iter().collect();
    let mut out = Vec::with_capacity(by_seed.len() * features.len());
    for (seed, ckpts) in by_seed {
        let mut sums: Vec<Vec<f64>> = features.iter().map(|u| vec![0.0; u.num_words()]).collect();
        for c in &ckpts {
            let probs = predict_probabilities(&c.params, &c.config, &refs, chunk_size)?;
            for (s, p) in sums.iter_mut().zip(probs) {
                s.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            }
        }
        let k = ckpts.len() as f64;
        for (u, s) in features.iter().zip(sums) {
            let probabilities: Vec<f64> = s.into_iter().map(|v| v / k).collect();
            out.push(PredictionRecord {
                utterance_id: u.utterance_id.clone(),
                seed,
                score: sentence_score(&probabilities, &u.valid),
                probabilities,
                valid: u.valid.clone(),
                folds: ckpts.len(),
            });
        }
    }
    Ok(out)
}
