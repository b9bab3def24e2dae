use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Batch, FusionConfig, FusionError, FusionParams};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Masked BCE from logits: `softplus(ℓ) − c ℓ` averaged over valid words.
pub fn masked_bce_logits(logits: &[f64], correct: &[f64], valid: &[f64]) -> Result<f64, FusionError> {
    let total: f64 = valid.iter().sum();
    if total <= 0.0 {
        return Err(FusionError::NoValidWords);
    }
    let sum: f64 = logits
        .iter()
        .zip(correct)
        .zip(valid)
        .filter(|(_, m)| **m != 0.0)
        .map(|((l, c), m)| m * (softplus(*l) - c * l))
        .sum();
    Ok(sum / total)
}

/// The same loss written directly on probabilities.
pub fn masked_bce_probs(probabilities: &[f64], correct: &[f64], valid: &[f64]) -> Result<f64, FusionError> {
    let total: f64 = valid.iter().sum();
    if total <= 0.0 {
        return Err(FusionError::NoValidWords);
    }
    let sum: f64 = probabilities
        .iter()
        .zip(correct)
        .zip(valid)
        .filter(|(_, m)| **m != 0.0)
        .map(|((p, c), m)| m * (c * p.ln() + (1.0 - c) * (1.0 - p).ln()))
        .sum();
    Ok(-sum / total)
}

/// `ŷ = 100 · Σ m_i p_i / Σ m_i`; `None` when no word is valid.
pub fn sentence_score(probabilities: &[f64], valid: &[u8]) -> Option<f64> {
    let count = valid.iter().filter(|m| **m != 0).count();
    if count == 0 {
        return None;
    }
    let sum: f64 = probabilities
        .iter()
        .zip(valid)
        .filter(|(_, m)| **m != 0)
        .map(|(p, _)| *p)
        .sum();
    Some(100.0 * sum / count as f64)
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Array1<f64>,
    pub probabilities: Array1<f64>,
    z: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    normed: Array2<f64>,
    pre_act: Array2<f64>,
    /// Inverted-dropout multipliers (0 or 1/(1−rate)), train mode only.
    keep: Option<Array2<f64>>,
    dropped: Array2<f64>,
}

impl Forward {
    /// The fused vectors `z_i`, one row per word.
    pub fn fused(&self) -> &Array2<f64> {
        &self.z
    }
}

fn project(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = x.dot(&w.t());
    out += b;
    out
}

fn fuse(params: &FusionParams, config: &FusionConfig, batch: &Batch) -> Result<Array2<f64>, FusionError> {
    let n = batch.len();
    let mut z = Array2::<f64>::zeros((n, config.fused_dim()));
    let p = config.proj_dim;
    let (dec, loc, glob, sev) = config.block_offsets();
    z.slice_mut(s![.., dec..dec + p])
        .assign(&project(&batch.decoder, &params.dec_w, &params.dec_b));
    if let Some(o) = loc {
        let (x, w, b) = match (&batch.local, &params.loc_w, &params.loc_b) {
            (Some(x), Some(w), Some(b)) => (x, w, b),
            _ => return Err(FusionError::MissingAttention(config.mode)),
        };
        z.slice_mut(s![.., o..o + p]).assign(&project(x, w, b));
    }
    if let Some(o) = glob {
        let (x, w, b) = match (&batch.global, &params.glob_w, &params.glob_b) {
            (Some(x), Some(w), Some(b)) => (x, w, b),
            _ => {
                return Err(FusionError::DimMismatch {
                    what: "global features",
                    expected: config.encoder_dim,
                    found: 0,
                })
            }
        };
        z.slice_mut(s![.., o..o + p]).assign(&project(x, w, b));
    }
    for (i, sv) in batch.severity.iter().enumerate() {
        z.slice_mut(s![i, sev..]).assign(&params.severity.row(*sv));
    }
    Ok(z)
}

/// Forward pass. `dropout_seed` switches on train mode; evaluation mode is a
/// pure function of its inputs.
pub fn forward(
    params: &FusionParams,
    config: &FusionConfig,
    batch: &Batch,
    dropout_seed: Option<u64>,
) -> Result<Forward, FusionError> {
    let z = fuse(params, config, batch)?;
    let (n, width) = z.dim();

    let mut xhat = Array2::<f64>::zeros((n, width));
    let mut inv_std = Array1::<f64>::zeros(n);
    for i in 0..n {
        let row = z.row(i);
        let mean = row.sum() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let is = 1.0 / (var + config.layernorm_epsilon).sqrt();
        inv_std[i] = is;
        xhat.row_mut(i).zip_mut_with(&row, |o, v| *o = (v - mean) * is);
    }
    let normed = &xhat * &params.ln_gain + &params.ln_bias;

    let pre_act = project(&normed, &params.hid_w, &params.hid_b);
    let activated = pre_act.mapv(gelu);

    let rate = config.dropout_rate;
    let (keep, dropped) = match dropout_seed {
        Some(seed) if rate > 0.0 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale = 1.0 / (1.0 - rate);
            let keep = Array2::from_shape_simple_fn(activated.raw_dim(), || {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    scale
                }
            });
            let dropped = &activated * &keep;
            (Some(keep), dropped)
        }
        _ => (None, activated),
    };

    let mut logits = dropped.dot(&params.out_w);
    logits += params.out_b[0];
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(FusionError::NonFiniteActivation("logits"));
    }
    let probabilities = logits.mapv(sigmoid);
    Ok(Forward {
        logits,
        probabilities,
        z,
        xhat,
        inv_std,
        normed,
        pre_act,
        keep,
        dropped,
    })
}

/// Gradients of the inputs, used to check the mask semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradients {
    pub decoder: Array2<f64>,
    pub local: Option<Array2<f64>>,
    pub global: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: FusionParams,
    pub inputs: InputGradients,
}

/// Exact gradients of `Σ_i m_i BCE_i / normalizer` with respect to every
/// parameter and input. Passing the batch's own valid count as `normalizer`
/// gives the gradient of the masked mean loss.
pub fn backward(
    params: &FusionParams,
    config: &FusionConfig,
    batch: &Batch,
    fwd: &Forward,
    normalizer: f64,
) -> Gradients {
    let n = batch.len();
    let width = config.fused_dim();
    let mut grads = params.zeros_like();

    let dlogit: Array1<f64> = Array1::from_shape_fn(n, |i| {
        batch.valid[i] * (fwd.probabilities[i] - batch.correct[i]) / normalizer
    });

    grads.out_b[0] = dlogit.sum();
    grads.out_w = fwd.dropped.t().dot(&dlogit);

    // d(dropped) = dlogit ⊗ out_w
    let mut d_pre = Array2::<f64>::zeros(fwd.pre_act.raw_dim());
    for i in 0..n {
        if dlogit[i] == 0.0 {
            continue;
        }
        let mut row = d_pre.row_mut(i);
        row.assign(&params.out_w);
        row *= dlogit[i];
    }
    if let Some(keep) = &fwd.keep {
        d_pre *= keep;
    }
    d_pre.zip_mut_with(&fwd.pre_act, |g, x| *g *= gelu_grad(*x));

    grads.hid_w = d_pre.t().dot(&fwd.normed);
    grads.hid_b = d_pre.sum_axis(Axis(0));
    let d_normed = d_pre.dot(&params.hid_w);

    grads.ln_gain = (&d_normed * &fwd.xhat).sum_axis(Axis(0));
    grads.ln_bias = d_normed.sum_axis(Axis(0));
    let d_xhat = &d_normed * &params.ln_gain;

    let mut d_z = Array2::<f64>::zeros((n, width));
    let w = width as f64;
    for i in 0..n {
        let gx = d_xhat.row(i);
        let xh = fwd.xhat.row(i);
        let sum_g = gx.sum();
        let sum_gx = gx.dot(&xh);
        let is = fwd.inv_std[i];
        for (k, o) in d_z.row_mut(i).iter_mut().enumerate() {
            *o = is * (gx[k] - sum_g / w - xh[k] * sum_gx / w);
        }
    }

    let p = config.proj_dim;
    let (dec, loc, glob, sev) = config.block_offsets();
    let d_dec = d_z.slice(s![.., dec..dec + p]);
    grads.dec_w = d_dec.t().dot(&batch.decoder);
    grads.dec_b = d_dec.sum_axis(Axis(0));
    let input_dec = d_dec.dot(&params.dec_w);

    let mut input_loc = None;
    if let (Some(o), Some(x), Some(wt)) = (loc, &batch.local, &params.loc_w) {
        let d = d_z.slice(s![.., o..o + p]);
        grads.loc_w = Some(d.t().dot(x));
        grads.loc_b = Some(d.sum_axis(Axis(0)));
        input_loc = Some(d.dot(wt));
    }
    let mut input_glob = None;
    if let (Some(o), Some(x), Some(wt)) = (glob, &batch.global, &params.glob_w) {
        let d = d_z.slice(s![.., o..o + p]);
        grads.glob_w = Some(d.t().dot(x));
        grads.glob_b = Some(d.sum_axis(Axis(0)));
        input_glob = Some(d.dot(wt));
    }
    for (i, sv) in batch.severity.iter().enumerate() {
        let d = d_z.slice(s![i, sev..]);
        let mut row = grads.severity.row_mut(*sv);
        row += &d;
    }

    Gradients {
        params: grads,
        inputs: InputGradients {
            decoder: input_dec,
            local: input_loc,
            global: input_glob,
        },
    }
}

/// Summed masked BCE (not yet divided) and gradients scaled by
/// `1/normalizer`.
pub fn loss_and_gradients(
    params: &FusionParams,
    config: &FusionConfig,
    batch: &Batch,
    normalizer: f64,
    dropout_seed: Option<u64>,
) -> Result<(f64, Gradients), FusionError> {
    let fwd = forward(params, config, batch, dropout_seed)?;
    let loss_sum: f64 = fwd
        .logits
        .iter()
        .zip(&batch.correct)
        .zip(&batch.valid)
        .filter(|(_, m)| **m != 0.0)
        .map(|((l, c), m)| m * (softplus(*l) - c * l))
        .sum();
    let grads = backward(params, config, batch, &fwd, normalizer);
    Ok((loss_sum, grads))
}
