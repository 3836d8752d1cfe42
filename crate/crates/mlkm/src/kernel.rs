//! Shift-invariant kernels, their spectral densities, and random cosine
//! feature maps.
//!
//! Every kernel here is normalized so K(x, x) = 1, which makes its spectral
//! measure a probability density and the cosine features unbiased:
//! E[φ(x)·φ(y)] = K(x, y).

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Cauchy, ChiSquared, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

/// Kernel family with its family-specific smoothness parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum KernelFamily {
    /// exp(−‖x−y‖² / 2ℓ²)
    Gaussian,
    /// 2^{1−ν}/Γ(ν) · t^ν K_ν(t) with t = √(2ν)‖x−y‖/ℓ
    Matern { nu: f64 },
    /// exp(−‖x−y‖₁ / ℓ)
    Laplacian,
    /// ∏_j 1 / (1 + (x_j−y_j)²/ℓ²)
    Cauchy,
}

/// A shift-invariant kernel: family plus bandwidth ℓ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    #[serde(flatten)]
    family: KernelFamily,
    scale: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "kernel scale must be positive and finite, got {scale}"
            )));
        }
        if let KernelFamily::Matern { nu } = family {
            if !(nu > 0.0 && nu.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "Matern nu must be positive and finite, got {nu}"
                )));
            }
        }
        Ok(Self { family, scale })
    }

    pub fn gaussian(scale: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, scale)
    }

    pub fn matern(scale: f64, nu: f64) -> Result<Self> {
        Self::new(KernelFamily::Matern { nu }, scale)
    }

    pub fn laplacian(scale: f64) -> Result<Self> {
        Self::new(KernelFamily::Laplacian, scale)
    }

    pub fn cauchy(scale: f64) -> Result<Self> {
        Self::new(KernelFamily::Cauchy, scale)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Hölder smoothness index of the kernel: drives the width rule and the
    /// excess-risk exponent. Gaussian is infinitely smooth.
    pub fn holder_q(&self) -> f64 {
        match self.family {
            KernelFamily::Gaussian => f64::INFINITY,
            KernelFamily::Matern { nu } => nu,
            KernelFamily::Laplacian => 0.5,
            KernelFamily::Cauchy => 1.0,
        }
    }

    /// Closed-form kernel value with K(x, x) = 1.
    pub fn eval(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::DimMismatch(format!(
                "kernel arguments have lengths {} and {}",
                x.len(),
                y.len()
            )));
        }
        let l = self.scale;
        Ok(match self.family {
            KernelFamily::Gaussian => {
                let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-sq / (2.0 * l * l)).exp()
            }
            KernelFamily::Laplacian => {
                let l1: f64 = x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum();
                (-l1 / l).exp()
            }
            KernelFamily::Cauchy => x
                .iter()
                .zip(y)
                .map(|(a, b)| {
                    let r = (a - b) / l;
                    1.0 / (1.0 + r * r)
                })
                .product(),
            KernelFamily::Matern { nu } => {
                let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                let t = (2.0 * nu).sqrt() * sq.sqrt() / l;
                matern_normalized(nu, t)
            }
        })
    }
}

/// Matern correlation 2^{1−ν}/Γ(ν) t^ν K_ν(t), with the half-integer cases
/// evaluated by their polynomial-times-exponential closed form.
fn matern_normalized(nu: f64, t: f64) -> f64 {
    if t <= 1e-14 {
        return 1.0;
    }
    let p = nu - 0.5;
    if (p - p.round()).abs() < 1e-9 && p >= 0.0 {
        return matern_half_integer(p.round() as u32, t);
    }
    // ln K = (1−ν)ln2 − lnΓ(ν) + ν ln t + ln K_ν(t)
    let lnk = (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu)
        + nu * t.ln()
        + ln_bessel_k(nu, t);
    lnk.exp()
}

/// exp(−t) (p!/(2p)!) Σ_{i=0}^{p} (p+i)!/(i!(p−i)!) (2t)^{p−i}
fn matern_half_integer(p: u32, t: f64) -> f64 {
    let mut sum = 0.0;
    for i in 0..=p {
        let ln_coef = ln_factorial(p + i) - ln_factorial(i) - ln_factorial(p - i);
        sum += ln_coef.exp() * (2.0 * t).powi((p - i) as i32);
    }
    let ln_front = ln_factorial(p) - ln_factorial(2 * p);
    (-t).exp() * ln_front.exp() * sum
}

fn ln_factorial(n: u32) -> f64 {
    ln_gamma(n as f64 + 1.0)
}

/// Lanczos approximation (g = 7) of ln Γ.
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut a = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn ln_cosh(y: f64) -> f64 {
    let a = y.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// ln K_ν(x) by trapezoidal quadrature of ∫₀^∞ exp(−x cosh t) cosh(νt) dt in
/// log space. The integrand has vanishing derivative at t = 0 and decays
/// double-exponentially, so the plain trapezoid rule converges quickly.
fn ln_bessel_k(nu: f64, x: f64) -> f64 {
    debug_assert!(x > 0.0);
    // upper limit: x·cosh(T) − ν·T ≥ 750
    let mut t_max = 5.0f64;
    for _ in 0..4 {
        let target: f64 = (750.0 + nu * t_max) / x;
        t_max = (target + (target * target + 1.0).sqrt()).ln().max(1.0);
    }
    let steps = ((t_max / 2e-3) as usize).clamp(4_000, 40_000);
    let h = t_max / steps as f64;
    let f = |t: f64| -x * t.cosh() + ln_cosh(nu * t);
    let mut max_exp = f(0.0);
    for i in 1..=steps {
        max_exp = max_exp.max(f(i as f64 * h));
    }
    let mut sum = 0.5 * (f(0.0) - max_exp).exp();
    for i in 1..steps {
        sum += (f(i as f64 * h) - max_exp).exp();
    }
    sum += 0.5 * (f(t_max) - max_exp).exp();
    max_exp + (h * sum).ln()
}

/// A frozen sample of frequencies and phases defining a cosine feature map
/// φ(x) with entries √(2/D) cos(ω_k·x + b_k). Immutable after construction;
/// identical (kernel, dims, seed) give a bitwise-identical map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    kernel: KernelSpec,
    input_dim: usize,
    num_features: usize,
    seed: u64,
    omegas: Array2<f64>,
    phases: Array1<f64>,
}

impl FeatureMap {
    /// Draw a feature map from the kernel's spectral probability density
    /// (Bochner sampling) with phases uniform on [0, 2π).
    pub fn sample(
        kernel: KernelSpec,
        input_dim: usize,
        num_features: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_features == 0 {
            return Err(Error::InvalidWidth);
        }
        if input_dim == 0 {
            return Err(Error::InvalidDim);
        }
        let mut rng = seeding::rng(seed, 0);
        let inv_scale = 1.0 / kernel.scale();
        let mut omegas = Array2::<f64>::zeros((num_features, input_dim));
        match kernel.family() {
            KernelFamily::Gaussian => {
                let normal = Normal::new(0.0, inv_scale).expect("valid std");
                omegas.mapv_inplace(|_| normal.sample(&mut rng));
            }
            KernelFamily::Laplacian => {
                let cauchy = Cauchy::new(0.0, inv_scale).expect("valid scale");
                omegas.mapv_inplace(|_| cauchy.sample(&mut rng));
            }
            KernelFamily::Cauchy => {
                omegas.mapv_inplace(|_| sample_laplace(&mut rng, inv_scale));
            }
            KernelFamily::Matern { nu } => {
                // multivariate t with 2ν degrees of freedom: one chi-square
                // mixing draw shared by all coordinates of a frequency row
                let normal = Normal::new(0.0, 1.0).expect("valid std");
                let chi2 = ChiSquared::new(2.0 * nu).expect("valid dof");
                for mut row in omegas.rows_mut() {
                    for w in row.iter_mut() {
                        *w = normal.sample(&mut rng);
                    }
                    let u = chi2.sample(&mut rng);
                    let factor = (2.0 * nu / u).sqrt() * inv_scale;
                    row.mapv_inplace(|z| z * factor);
                }
            }
        }
        let phases = Array1::from_iter(
            (0..num_features).map(|_| rng.random_range(0.0..2.0 * PI)),
        );
        Ok(Self {
            kernel,
            input_dim,
            num_features,
            seed,
            omegas,
            phases,
        })
    }

    /// Assemble a map from explicit frequencies and phases; test and
    /// diagnostic construction path inside the crate.
    pub(crate) fn from_raw_parts(
        kernel: KernelSpec,
        omegas: Array2<f64>,
        phases: Array1<f64>,
        seed: u64,
    ) -> Result<Self> {
        if omegas.nrows() == 0 {
            return Err(Error::InvalidWidth);
        }
        if omegas.ncols() == 0 {
            return Err(Error::InvalidDim);
        }
        if phases.len() != omegas.nrows() {
            return Err(Error::DimMismatch(format!(
                "{} phases for {} frequency rows",
                phases.len(),
                omegas.nrows()
            )));
        }
        Ok(Self {
            kernel,
            input_dim: omegas.ncols(),
            num_features: omegas.nrows(),
            seed,
            omegas,
            phases,
        })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn omegas(&self) -> ArrayView2<f64> {
        self.omegas.view()
    }

    pub fn phases(&self) -> ArrayView1<f64> {
        self.phases.view()
    }

    fn feature_scale(&self) -> f64 {
        (2.0 / self.num_features as f64).sqrt()
    }

    /// φ(x): entry k is √(2/D) cos(ω_k·x + b_k).
    pub fn apply(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::DimMismatch(format!(
                "feature map expects input of length {}, got {}",
                self.input_dim,
                x.len()
            )));
        }
        let scale = self.feature_scale();
        let mut out = self.omegas.dot(&x);
        out.zip_mut_with(&self.phases, |v, &b| *v = scale * (*v + b).cos());
        Ok(out)
    }

    /// Row-wise φ over an n × input_dim matrix, returning n × D.
    pub fn apply_matrix(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim {
            return Err(Error::DimMismatch(format!(
                "feature map expects {} columns, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        let scale = self.feature_scale();
        let mut out = x.dot(&self.omegas.t());
        for mut row in out.rows_mut() {
            row.zip_mut_with(&self.phases, |v, &b| *v = scale * (*v + b).cos());
        }
        Ok(out)
    }

    /// Pre-activations ω x + b alongside the features; used by the network
    /// gradients which need sin of the same argument.
    pub(crate) fn preactivations(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim {
            return Err(Error::DimMismatch(format!(
                "feature map expects {} columns, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        let mut out = x.dot(&self.omegas.t());
        for mut row in out.rows_mut() {
            row.zip_mut_with(&self.phases, |v, &b| *v += b);
        }
        Ok(out)
    }
}

fn sample_laplace<R: Rng>(rng: &mut R, scale: f64) -> f64 {
    let u: f64 = rng.random_range(-0.5..0.5);
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Worst-case feature-space kernel error max |φ(x)·φ(y) − K(x, y)| over the
/// given pairs. Decreases stochastically as O(1/√D).
pub fn mc_kernel_error(
    kernel: &KernelSpec,
    fm: &FeatureMap,
    pairs: &[(Array1<f64>, Array1<f64>)],
) -> Result<f64> {
    let mut worst = 0.0f64;
    for (x, y) in pairs {
        let fx = fm.apply(x.view())?;
        let fy = fm.apply(y.view())?;
        let approx = fx.dot(&fy);
        let exact = kernel.eval(x.view(), y.view())?;
        worst = worst.max((approx - exact).abs());
    }
    Ok(worst)
}

/// Empirical mean of the products φ(x)·φ(y) over many independently seeded
/// maps, together with its standard error; drives the unbiasedness checks.
pub fn seed_averaged_product(
    kernel: &KernelSpec,
    input_dim: usize,
    num_features: usize,
    x: ArrayView1<f64>,
    y: ArrayView1<f64>,
    seeds: impl Iterator<Item = u64>,
) -> Result<(f64, f64)> {
    let mut vals = Vec::new();
    for seed in seeds {
        let fm = FeatureMap::sample(*kernel, input_dim, num_features, seed)?;
        let fx = fm.apply(x)?;
        let fy = fm.apply(y)?;
        vals.push(fx.dot(&fy));
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}
