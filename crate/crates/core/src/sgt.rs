//! The learned Gaussian obfuscation: a transformer estimator of per-position
//! means and diagonal scales, and affine sampling `x̃ = x + μ + σ ⊙ u`.
//!
//! Sequences are stored row-major as `T × d` (one row per position); a batch
//! of `B` sequences is `B·T` rows stacked.

use alloc::vec::Vec;

use crate::array::RealArray;
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{block_forward, check_layout, normal_init, push_block, tiled_positions, BlockLayout, ParamSet};
use crate::real::Real;
use crate::rng::{gaussian_draw, RngStream};
use crate::tape::{Tape, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgtConfig {
    /// Embedding dimension `d`.
    pub d_model: usize,
    /// Trunk width.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub context: usize,
    pub causal: bool,
    /// Per-coordinate embedding scale (median row norm over `√d`). All
    /// scale bounds below are relative to it.
    pub scale: f64,
    pub sigma_min_rel: f64,
    pub sigma_max_rel: f64,
    pub sigma_init_rel: f64,
    pub mean_init_std: f64,
}

impl Default for SgtConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            width: 64,
            layers: 1,
            heads: 2,
            ff_mult: 4,
            context: 64,
            causal: false,
            scale: 1.0,
            sigma_min_rel: 1e-4,
            sigma_max_rel: 10.0,
            sigma_init_rel: 0.05,
            mean_init_std: 1e-3,
        }
    }
}

impl SgtConfig {
    /// Config matched to an embedding table's dimension and scale.
    pub fn for_embeddings(d_model: usize, median_norm: f64, context: usize) -> Self {
        Self {
            d_model,
            width: d_model.max(8),
            context,
            scale: median_norm / (d_model as f64).sqrt(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.width == 0 || self.context == 0 || self.ff_mult == 0 {
            return Err(Error::Config("estimator extents must be positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(alloc::format!(
                "heads ({}) must divide width ({})",
                self.heads,
                self.width
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config("embedding scale must be positive".into()));
        }
        if !(self.sigma_min_rel > 0.0 && self.sigma_min_rel < self.sigma_max_rel && self.sigma_max_rel.is_finite()) {
            return Err(Error::Config("need 0 < sigma_min_rel < sigma_max_rel".into()));
        }
        if !(self.sigma_init_rel > 0.0) || !(self.mean_init_std >= 0.0) {
            return Err(Error::Config("initial scales must be positive".into()));
        }
        Ok(())
    }

    pub fn log_sigma_min(&self) -> f64 {
        (self.sigma_min_rel * self.scale).ln()
    }

    pub fn log_sigma_max(&self) -> f64 {
        (self.sigma_max_rel * self.scale).ln()
    }
}

/// Per-position means and standard deviations, same shape as the input.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianField<F = f32> {
    pub mu: RealArray<F>,
    pub sigma: RealArray<F>,
}

impl<F: Real> GaussianField<F> {
    pub fn new(mu: RealArray<F>, sigma: RealArray<F>) -> Result<Self> {
        mu.same_shape(&sigma)?;
        mu.check_finite("field mean")?;
        sigma.check_finite("field scale")?;
        if sigma.data().iter().any(|s| *s <= F::zero()) {
            return Err(invalid!("field scales must be strictly positive"));
        }
        Ok(Self { mu, sigma })
    }

    pub fn rows(&self) -> usize {
        self.mu.rows()
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }

    /// Rows `start..end` of the field.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            mu: self.mu.slice_rows(start, end),
            sigma: self.sigma.slice_rows(start, end),
        }
    }
}

/// Anything that maps clean embeddings to a Gaussian field: the learned
/// estimator, constant noise, or the identity passthrough.
pub trait Mechanism<F: Real> {
    fn name(&self) -> &str;
    /// Field for `seq_len`-row sequences stacked in `clean`.
    fn field(&self, clean: &RealArray<F>, seq_len: usize) -> Result<GaussianField<F>>;
}

/// Zero mean and a fixed tiny scale: obfuscation is (almost) the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Passthrough {
    pub sigma: f64,
}

impl<F: Real> Mechanism<F> for Passthrough {
    fn name(&self) -> &str {
        "passthrough"
    }

    fn field(&self, clean: &RealArray<F>, _seq_len: usize) -> Result<GaussianField<F>> {
        GaussianField::new(
            RealArray::zeros(clean.shape()),
            RealArray::full(clean.shape(), F::of(self.sigma)),
        )
    }
}

/// Clean inputs, their fields, the standard-normal draws and the result.
/// `obfuscated` is exactly `clean + mu + sigma * noise` evaluated in that
/// order, element by element.
#[derive(Debug, Clone, PartialEq)]
pub struct ObfuscationBatch<F = f32> {
    pub seq_len: usize,
    pub clean: RealArray<F>,
    pub field: GaussianField<F>,
    pub noise: RealArray<F>,
    pub obfuscated: RealArray<F>,
}

impl<F: Real> ObfuscationBatch<F> {
    pub fn assemble(clean: RealArray<F>, field: GaussianField<F>, noise: RealArray<F>, seq_len: usize) -> Result<Self> {
        clean.same_shape(&field.mu)?;
        clean.same_shape(&noise)?;
        if seq_len == 0 || clean.rows() % seq_len != 0 {
            return Err(shape_err!("{} rows are not whole sequences of length {seq_len}", clean.rows()));
        }
        let obfuscated = affine(&clean, &field, &noise);
        Ok(Self {
            seq_len,
            clean,
            field,
            noise,
            obfuscated,
        })
    }

    pub fn sequences(&self) -> usize {
        self.clean.rows() / self.seq_len
    }

    /// Recomputes the affine identity and compares bitwise.
    pub fn identity_holds(&self) -> bool {
        affine(&self.clean, &self.field, &self.noise)
            .data()
            .iter()
            .zip(self.obfuscated.data())
            .all(|(a, b)| a.to_bits_eq(*b))
    }
}

trait BitEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<F: Real> BitEq for F {
    fn to_bits_eq(self, other: Self) -> bool {
        // f32 and f64 both round-trip exactly through f64
        self.f64().to_bits() == other.f64().to_bits()
    }
}

fn affine<F: Real>(clean: &RealArray<F>, field: &GaussianField<F>, noise: &RealArray<F>) -> RealArray<F> {
    let data = clean
        .data()
        .iter()
        .zip(field.mu.data())
        .zip(field.sigma.data())
        .zip(noise.data())
        .map(|(((x, m), s), u)| *x + *m + *s * *u)
        .collect();
    RealArray::new(clean.shape().to_vec(), data).expect("same shape")
}

/// Samples obfuscations of stacked sequences under `mech`. One independent
/// standard-normal vector is drawn per position.
pub fn obfuscate<F: Real, M: Mechanism<F> + ?Sized>(
    mech: &M,
    clean: &RealArray<F>,
    seq_len: usize,
    stream: &mut RngStream,
) -> Result<ObfuscationBatch<F>> {
    clean.check_finite("clean embeddings")?;
    let field = mech.field(clean, seq_len)?;
    let noise = gaussian_draw(stream, clean.shape());
    ObfuscationBatch::assemble(clean.clone(), field, noise, seq_len)
}

/// Conditional density family of an affine obfuscation. Only the diagonal
/// Gaussian is provided.
pub trait DensityFamily {
    /// `Σ_t log p(x̃_t | x_t)` summed over rows.
    fn log_density<F: Real>(&self, obf: &RealArray<F>, clean: &RealArray<F>, field: &GaussianField<F>) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DiagonalGaussian;

impl DensityFamily for DiagonalGaussian {
    fn log_density<F: Real>(&self, obf: &RealArray<F>, clean: &RealArray<F>, field: &GaussianField<F>) -> Result<f64> {
        obf.same_shape(clean)?;
        obf.same_shape(&field.mu)?;
        obf.same_shape(&field.sigma)?;
        let mut total = 0.0f64;
        for (((y, x), m), s) in obf
            .data()
            .iter()
            .zip(clean.data())
            .zip(field.mu.data())
            .zip(field.sigma.data())
        {
            let s = s.f64();
            if !(s > 0.0) {
                return Err(invalid!("nonpositive scale {s}"));
            }
            let z = (y.f64() - x.f64() - m.f64()) / s;
            total += -0.5 * LN_2PI - s.ln() - 0.5 * z * z;
        }
        Ok(total)
    }
}

/// Gaussian log-density of `obf` given `clean` and its field, summed over
/// positions and coordinates.
pub fn conditional_log_density<F: Real>(obf: &RealArray<F>, clean: &RealArray<F>, field: &GaussianField<F>) -> Result<f64> {
    DiagonalGaussian.log_density(obf, clean, field)
}

/// Differentiable outputs of the estimator on a tape.
#[derive(Debug, Clone, Copy)]
pub struct FieldVars {
    pub mu: Var,
    /// Clamped log-scale.
    pub log_sigma: Var,
    pub sigma: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgtEstimator<F = f32> {
    config: SgtConfig,
    params: ParamSet<F>,
    w_in: usize,
    b_in: usize,
    blocks: Vec<BlockLayout>,
    lnf_g: usize,
    lnf_b: usize,
    w_mu: usize,
    b_mu: usize,
    w_s: usize,
    b_s: usize,
}

impl<F: Real> SgtEstimator<F> {
    pub fn new(config: SgtConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let (d, w) = (config.d_model, config.width);
        let mut params = ParamSet::new();
        let in_std = 1.0 / (d as f64).sqrt();
        let w_in = params.push("in.weight", normal_init(rng, d, w, in_std));
        let b_in = params.push("in.bias", RealArray::zeros(&[1, w]));
        let residual_std = 0.02f64.max(0.5 / (w as f64).sqrt()) / (2.0 * config.layers.max(1) as f64).sqrt();
        let blocks = (0..config.layers)
            .map(|l| push_block(&mut params, &alloc::format!("trunk{l}"), w, w * config.ff_mult, residual_std, rng))
            .collect();
        let lnf_g = params.push("ln_f.gamma", RealArray::full(&[1, w], F::one()));
        let lnf_b = params.push("ln_f.beta", RealArray::zeros(&[1, w]));
        let w_mu = params.push("mean.weight", normal_init(rng, w, d, config.mean_init_std));
        let b_mu = params.push("mean.bias", RealArray::zeros(&[1, d]));
        let w_s = params.push("log_scale.weight", normal_init(rng, w, d, config.mean_init_std));
        let b_s = params.push(
            "log_scale.bias",
            RealArray::full(&[1, d], F::of(config.sigma_init_rel.ln())),
        );
        Ok(Self {
            config,
            params,
            w_in,
            b_in,
            blocks,
            lnf_g,
            lnf_b,
            w_mu,
            b_mu,
            w_s,
            b_s,
        })
    }

    pub fn from_params(config: SgtConfig, params: ParamSet<F>) -> Result<Self> {
        let mut e = Self::new(config, &mut RngStream::new(0, 0))?;
        check_layout(&e.params, &params)?;
        e.params = params;
        Ok(e)
    }

    pub fn config(&self) -> &SgtConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn cast<G: Real>(&self) -> SgtEstimator<G> {
        SgtEstimator {
            config: self.config,
            params: self.params.cast(),
            w_in: self.w_in,
            b_in: self.b_in,
            blocks: self.blocks.clone(),
            lnf_g: self.lnf_g,
            lnf_b: self.lnf_b,
            w_mu: self.w_mu,
            b_mu: self.b_mu,
            w_s: self.w_s,
            b_s: self.b_s,
        }
    }

    /// Index of the log-scale bias, the parameter that sets the noise
    /// floor at initialization.
    pub fn log_scale_bias(&self) -> usize {
        self.b_s
    }

    pub fn check_input(&self, x: &RealArray<F>, seq_len: usize) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.config.d_model {
            return Err(shape_err!(
                "input of shape {:?} does not match embedding dimension {}",
                x.shape(),
                self.config.d_model
            ));
        }
        if seq_len == 0 || seq_len > self.config.context || x.rows() % seq_len != 0 {
            return Err(shape_err!(
                "{} rows are not whole sequences of length {seq_len} (context {})",
                x.rows(),
                self.config.context
            ));
        }
        Ok(())
    }

    /// Builds the field on `tape` for stacked sequences `x`.
    pub fn field_on_tape(&self, tape: &mut Tape<F>, vars: &[Var], x: Var, seq_len: usize) -> FieldVars {
        let c = &self.config;
        let n = tape.value(x).rows();
        let xs = tape.scale(x, 1.0 / c.scale);
        let h = tape.matmul(xs, vars[self.w_in]);
        let h = tape.add_row(h, vars[self.b_in]);
        let pe = tape.constant(tiled_positions(n, seq_len, c.width));
        let mut h = tape.add(h, pe);
        for b in &self.blocks {
            h = block_forward(tape, vars, b, h, c.heads, seq_len, c.causal);
        }
        let h = tape.layer_norm(h, vars[self.lnf_g], vars[self.lnf_b]);
        let m = tape.matmul(h, vars[self.w_mu]);
        let m = tape.add_row(m, vars[self.b_mu]);
        let mu = tape.scale(m, c.scale);
        let s = tape.matmul(h, vars[self.w_s]);
        let s = tape.add_row(s, vars[self.b_s]);
        let s = tape.offset(s, c.scale.ln());
        let log_sigma = tape.clamp(s, c.log_sigma_min(), c.log_sigma_max());
        let sigma = tape.exp(log_sigma);
        FieldVars { mu, log_sigma, sigma }
    }

    /// Deterministic field for stacked sequences.
    pub fn estimate_field(&self, x: &RealArray<F>, seq_len: usize) -> Result<GaussianField<F>> {
        self.check_input(x, seq_len)?;
        x.check_finite("estimator input")?;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let f = self.field_on_tape(&mut tape, &vars, xv, seq_len);
        GaussianField::new(tape.value(f.mu).clone(), tape.value(f.sigma).clone())
    }

    /// A fixed input used to fingerprint a parameter set.
    pub fn probe_input(&self) -> RealArray<F> {
        let t = self.config.context.min(4);
        let d = self.config.d_model;
        RealArray::from_fn(t, d, |i, j| {
            F::of(self.config.scale * libm::sin(1.0 + (i * d + j) as f64))
        })
    }
}

impl<F: Real> Mechanism<F> for SgtEstimator<F> {
    fn name(&self) -> &str {
        "sgt"
    }

    fn field(&self, clean: &RealArray<F>, seq_len: usize) -> Result<GaussianField<F>> {
        self.estimate_field(clean, seq_len)
    }
}
