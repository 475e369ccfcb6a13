//! The HardKuma distribution.
//!
//! A Kumaraswamy sample `s ~ Kuma(alpha, beta)` is stretched to `(lo, hi)`
//! with `lo < 0 < 1 < hi` and clipped back into `[0, 1]`. The clipping puts
//! point masses at exactly 0 and 1 while keeping the map from the uniform
//! driver `u` to `z` differentiable almost everywhere.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Stretch interval `(lo, hi)` applied to the Kumaraswamy sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stretch {
    lo: f64,
    hi: f64,
}

impl Stretch {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < 0.0 && hi > 1.0 && lo.is_finite() && hi.is_finite()) {
            return Err(Error::Config(format!(
                "stretch interval ({lo}, {hi}) must satisfy lo < 0 < 1 < hi"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Kumaraswamy-space point that stretches to 0.
    pub fn zero_point(&self) -> f64 {
        -self.lo / self.width()
    }

    /// Kumaraswamy-space point that stretches to 1.
    pub fn one_point(&self) -> f64 {
        (1.0 - self.lo) / self.width()
    }
}

impl Default for Stretch {
    fn default() -> Self {
        Self { lo: -0.1, hi: 1.1 }
    }
}

/// Per-head gate parameters.
///
/// `alpha` and `beta` are stored as logarithms so that unconstrained updates
/// on the raw values can never make them non-positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateParams {
    pub log_alpha: f64,
    pub log_beta: f64,
    pub stretch: Stretch,
}

impl GateParams {
    pub fn new(alpha: f64, beta: f64, stretch: Stretch) -> Result<Self> {
        for (v, name) in [(alpha, "alpha > 0"), (beta, "beta > 0")] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain { value: v, domain: name });
            }
        }
        Ok(Self { log_alpha: alpha.ln(), log_beta: beta.ln(), stretch })
    }

    /// `alpha = beta = 1`: a uniform Kumaraswamy before stretching.
    pub fn uniform(stretch: Stretch) -> Self {
        Self { log_alpha: 0.0, log_beta: 0.0, stretch }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn beta(&self) -> f64 {
        self.log_beta.exp()
    }
}

/// One draw from a gate, with every intermediate kept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateSample {
    pub u: f64,
    pub s: f64,
    pub z: f64,
}

impl GateSample {
    /// Whether the stretched value landed strictly outside `[0, 1]`.
    pub fn is_clipped(&self, stretch: Stretch) -> bool {
        let t = stretched(self.s, stretch);
        !(0.0..=1.0).contains(&t)
    }
}

fn stretched(s: f64, stretch: Stretch) -> f64 {
    stretch.lo + stretch.width() * s
}

pub fn kuma_pdf(x: f64, g: &GateParams) -> Result<f64> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::Domain { value: x, domain: "(0, 1)" });
    }
    let (a, b) = (g.alpha(), g.beta());
    let xa = x.powf(a);
    Ok(a * b * x.powf(a - 1.0) * (1.0 - xa).powf(b - 1.0))
}

pub fn kuma_cdf(x: f64, g: &GateParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain { value: x, domain: "[0, 1]" });
    }
    Ok(cdf_unchecked(x, g.alpha(), g.beta()))
}

fn cdf_unchecked(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    // 1 - (1 - x^a)^b, with both powers evaluated in log space
    let xa = (a * x.ln()).exp();
    -(b * (-xa).ln_1p()).exp_m1()
}

/// Draws `z` from the uniform driver `u` via `s = (1 - u^(1/beta))^(1/alpha)`.
pub fn sample(g: &GateParams, u: f64) -> Result<GateSample> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain { value: u, domain: "(0, 1)" });
    }
    let s = kuma_from_uniform(u, g.alpha(), g.beta());
    let z = stretched(s, g.stretch).clamp(0.0, 1.0);
    Ok(GateSample { u, s, z })
}

fn kuma_from_uniform(u: f64, a: f64, b: f64) -> f64 {
    // w = 1 - u^(1/b)
    let w = -(u.ln() / b).exp_m1();
    (w.ln() / a).exp()
}

/// Samples a gate using a caller-owned generator.
pub fn sample_with<R: Rng + ?Sized>(g: &GateParams, rng: &mut R) -> GateSample {
    let u = open_uniform(rng);
    sample(g, u).expect("open_uniform returns values in (0, 1)")
}

/// Uniform draw from the open interval (0, 1).
pub fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}

/// `P(z == 0)`.
pub fn prob_zero(g: &GateParams) -> f64 {
    cdf_unchecked(g.stretch.zero_point(), g.alpha(), g.beta())
}

/// `P(z == 1)`.
pub fn prob_one(g: &GateParams) -> f64 {
    1.0 - cdf_unchecked(g.stretch.one_point(), g.alpha(), g.beta())
}

/// Expected number of non-zero gates. An empty list gives 0.
pub fn expected_l0(gates: &[GateParams]) -> f64 {
    gates.iter().map(|g| 1.0 - prob_zero(g)).sum()
}

/// `(dP0/dalpha, dP0/dbeta)` for `P0 = prob_zero(g)`.
pub fn prob_zero_grad(g: &GateParams) -> (f64, f64) {
    let (a, b) = (g.alpha(), g.beta());
    let x = g.stretch.zero_point();
    let ln_x = x.ln();
    let xa = (a * ln_x).exp();
    let ln_rest = (-xa).ln_1p(); // ln(1 - x^a)
    let d_alpha = b * ((b - 1.0) * ln_rest).exp() * xa * ln_x;
    let d_beta = -(b * ln_rest).exp() * ln_rest;
    (d_alpha, d_beta)
}

/// Gradient of [`expected_l0`] for one gate with respect to its raw
/// (log-space) parameters.
pub fn expected_l0_grad_raw(g: &GateParams) -> (f64, f64) {
    let (da, db) = prob_zero_grad(g);
    (-da * g.alpha(), -db * g.beta())
}

/// `(dz/dalpha, dz/dbeta)` holding `u` fixed.
///
/// Zero when the stretched value falls strictly outside `[0, 1]`. Exactly at
/// a clip boundary the interior derivative is returned.
pub fn pathwise_grad(g: &GateParams, u: f64) -> Result<(f64, f64)> {
    let smp = sample(g, u)?;
    if smp.is_clipped(g.stretch) {
        return Ok((0.0, 0.0));
    }
    let (a, b) = (g.alpha(), g.beta());
    let width = g.stretch.width();
    let ln_u = u.ln();
    let u_pow = (ln_u / b).exp(); // u^(1/b)
    let w = -(ln_u / b).exp_m1();
    let ln_w = w.ln();
    let s = smp.s;
    // ln s = ln(w) / a
    let ds_da = -s * ln_w / (a * a);
    // dw/db = u^(1/b) ln(u) / b^2
    let dw_db = u_pow * ln_u / (b * b);
    let ds_db = s * dw_db / (a * w);
    Ok((width * ds_da, width * ds_db))
}

/// [`pathwise_grad`] with respect to `(log alpha, log beta)`.
pub fn pathwise_grad_raw(g: &GateParams, u: f64) -> Result<(f64, f64)> {
    let (da, db) = pathwise_grad(g, u)?;
    Ok((da * g.alpha(), db * g.beta()))
}

/// Monte Carlo estimate of `E[z]` with a fixed seed.
pub fn expected_gate(g: &GateParams, n_samples: usize, seed: u64) -> f64 {
    let n = n_samples.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = (0..n).map(|_| sample_with(g, &mut rng).z).sum();
    total / n as f64
}
