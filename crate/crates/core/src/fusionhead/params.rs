use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use super::FusionConfig;
use crate::featio::Severity;

/// Trainable parameters. Every array is in standard (row-major) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// `proj × D_h`
    pub dec_w: Array2<f64>,
    pub dec_b: Array1<f64>,
    /// `proj × D_e`
    pub loc_w: Option<Array2<f64>>,
    pub loc_b: Option<Array1<f64>>,
    pub glob_w: Option<Array2<f64>>,
    pub glob_b: Option<Array1<f64>>,
    /// One row per [`Severity`].
    pub severity: Array2<f64>,
    pub ln_gain: Array1<f64>,
    pub ln_bias: Array1<f64>,
    /// `hidden × fused`
    pub hid_w: Array2<f64>,
    pub hid_b: Array1<f64>,
    pub out_w: Array1<f64>,
    pub out_b: Array1<f64>,
}

/// A named flat view of one parameter tensor.
pub struct ParamView<'a> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub values: &'a [f64],
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
}

fn uniform_vec(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Array1<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array1::from_shape_simple_fn(len, || rng.random_range(-bound..bound))
}

impl FusionParams {
    /// Linear layers uniform in ±1/√fan_in, severity rows N(0, 0.02²),
    /// LayerNorm gain 1 and bias 0.
    pub fn init(config: &FusionConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = config.proj_dim;
        let z = config.fused_dim();
        let dec_w = uniform(&mut rng, (p, config.decoder_dim), config.decoder_dim);
        let dec_b = uniform_vec(&mut rng, p, config.decoder_dim);
        let (loc_w, loc_b) = if config.mode.uses_local() {
            (
                Some(uniform(&mut rng, (p, config.encoder_dim), config.encoder_dim)),
                Some(uniform_vec(&mut rng, p, config.encoder_dim)),
            )
        } else {
            (None, None)
        };
        let (glob_w, glob_b) = if config.mode.uses_global() {
            (
                Some(uniform(&mut rng, (p, config.encoder_dim), config.encoder_dim)),
                Some(uniform_vec(&mut rng, p, config.encoder_dim)),
            )
        } else {
            (None, None)
        };
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let severity = Array2::from_shape_simple_fn((Severity::ALL.len(), config.severity_dim), || rng.sample(normal));
        let hid_w = uniform(&mut rng, (config.hidden_dim, z), z);
        let hid_b = uniform_vec(&mut rng, config.hidden_dim, z);
        let out_w = uniform_vec(&mut rng, config.hidden_dim, config.hidden_dim);
        let out_b = uniform_vec(&mut rng, 1, config.hidden_dim);
        Self {
            dec_w,
            dec_b,
            loc_w,
            loc_b,
            glob_w,
            glob_b,
            severity,
            ln_gain: Array1::ones(z),
            ln_bias: Array1::zeros(z),
            hid_w,
            hid_b,
            out_w,
            out_b,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        let z1 = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        Self {
            dec_w: z2(&self.dec_w),
            dec_b: z1(&self.dec_b),
            loc_w: self.loc_w.as_ref().map(z2),
            loc_b: self.loc_b.as_ref().map(z1),
            glob_w: self.glob_w.as_ref().map(z2),
            glob_b: self.glob_b.as_ref().map(z1),
            severity: z2(&self.severity),
            ln_gain: z1(&self.ln_gain),
            ln_bias: z1(&self.ln_bias),
            hid_w: z2(&self.hid_w),
            hid_b: z1(&self.hid_b),
            out_w: z1(&self.out_w),
            out_b: z1(&self.out_b),
        }
    }

    /// All tensors in a fixed order.
    pub fn views(&self) -> Vec<ParamView<'_>> {
        fn view<'a, D: ndarray::Dimension>(name: &'static str, a: &'a ndarray::Array<f64, D>, decay: bool) -> ParamView<'a> {
            ParamView {
                name,
                shape: a.shape().to_vec(),
                values: a.as_slice().expect("standard layout"),
                decay,
            }
        }
        let mut out = Vec::with_capacity(13);
        out.push(view("dec_w", &self.dec_w, true));
        if let Some(w) = &self.loc_w {
            out.push(view("loc_w", w, true));
        }
        if let Some(w) = &self.glob_w {
            out.push(view("glob_w", w, true));
        }
        out.push(view("severity", &self.severity, false));
        out.push(view("hid_w", &self.hid_w, true));
        out.push(view("dec_b", &self.dec_b, false));
        if let Some(b) = &self.loc_b {
            out.push(view("loc_b", b, false));
        }
        if let Some(b) = &self.glob_b {
            out.push(view("glob_b", b, false));
        }
        out.push(view("ln_gain", &self.ln_gain, false));
        out.push(view("ln_bias", &self.ln_bias, false));
        out.push(view("hid_b", &self.hid_b, false));
        out.push(view("out_w", &self.out_w, true));
        out.push(view("out_b", &self.out_b, false));
        out
    }

    /// Mutable flat slices in the same order as [`FusionParams::views`].
    pub fn slices_mut(&mut self) -> Vec<(&'static str, &mut [f64], bool)> {
        let mut out: Vec<(&'static str, &mut [f64], bool)> = Vec::with_capacity(13);
        out.push(("dec_w", self.dec_w.as_slice_mut().expect("standard layout"), true));
        if let Some(w) = self.loc_w.as_mut() {
            out.push(("loc_w", w.as_slice_mut().expect("standard layout"), true));
        }
        if let Some(w) = self.glob_w.as_mut() {
            out.push(("glob_w", w.as_slice_mut().expect("standard layout"), true));
        }
        out.push(("severity", self.severity.as_slice_mut().expect("standard layout"), false));
        out.push(("hid_w", self.hid_w.as_slice_mut().expect("standard layout"), true));
        out.push(("dec_b", self.dec_b.as_slice_mut().expect("standard layout"), false));
        if let Some(b) = self.loc_b.as_mut() {
            out.push(("loc_b", b.as_slice_mut().expect("standard layout"), false));
        }
        if let Some(b) = self.glob_b.as_mut() {
            out.push(("glob_b", b.as_slice_mut().expect("standard layout"), false));
        }
        out.push(("ln_gain", self.ln_gain.as_slice_mut().expect("standard layout"), false));
        out.push(("ln_bias", self.ln_bias.as_slice_mut().expect("standard layout"), false));
        out.push(("hid_b", self.hid_b.as_slice_mut().expect("standard layout"), false));
        out.push(("out_w", self.out_w.as_slice_mut().expect("standard layout"), true));
        out.push(("out_b", self.out_b.as_slice_mut().expect("standard layout"), false));
        out
    }

    pub fn count(&self) -> usize {
        self.views().iter().map(|v| v.values.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.views().iter().all(|v| v.values.iter().all(|x| x.is_finite()))
    }

    /// `self += other`, elementwise over every tensor.
    pub fn add_assign(&mut self, other: &FusionParams) {
        let src = other.views();
        for ((_, dst, _), s) in self.slices_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s.values) {
                *d += v;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, values, _) in self.slices_mut() {
            values.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.views().iter().flat_map(|v| v.values.iter()).map(|x| x * x).sum()
    }
}
