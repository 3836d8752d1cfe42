//! Multi-layer kernel machine architectures: dimension bookkeeping, forward
//! evaluation, and exact reverse-mode gradients for both the plain cascade
//! and the residual-block variant.
//!
//! The cascade evaluates f(x) = W_L φ_L(W_{L−1} φ_{L−1}(… W_1 φ_1(x))) with
//! strictly decreasing widths D_1 > … > D_L and a scalar output. The residual
//! variant replaces every layer past the first with a block
//! T(z) = W⁽²⁾ φ(W⁽¹⁾ z) + W⁽¹⁾ z and appends a 1 × D_L readout.
//!
//! Gradients are hand-derived for this fixed architecture; the feature
//! Jacobian rows are −√(2/D) sin(ω_k·z + b_k) ω_k.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{FeatureMap, KernelSpec};
use crate::seeding;

/// Layer widths, per-layer kernels, and the residual-mode switch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    input_dim: usize,
    widths: Vec<usize>,
    kernels: Vec<KernelSpec>,
    residual: bool,
}

impl Architecture {
    pub fn new(
        input_dim: usize,
        widths: Vec<usize>,
        kernels: Vec<KernelSpec>,
        residual: bool,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidDim);
        }
        if widths.is_empty() {
            return Err(Error::InvalidArgument("at least one layer required".into()));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidWidth);
        }
        if widths.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "widths must be strictly decreasing, got {widths:?}"
            )));
        }
        if kernels.len() != widths.len() {
            return Err(Error::InvalidArgument(format!(
                "need one kernel per layer: {} kernels for {} layers",
                kernels.len(),
                widths.len()
            )));
        }
        Ok(Self {
            input_dim,
            widths,
            kernels,
            residual,
        })
    }

    /// Parse a layer string such as "4-32-8-1": input dimension, hidden
    /// widths, and the mandatory trailing scalar output.
    pub fn from_layer_string(s: &str, kernels: Vec<KernelSpec>, residual: bool) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('-')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad layer string `{s}`")))
            })
            .collect::<Result<_>>()?;
        if parts.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "layer string `{s}` needs input, at least one width, and a trailing 1"
            )));
        }
        if *parts.last().unwrap() != 1 {
            return Err(Error::InvalidArgument(format!(
                "layer string `{s}` must end in 1"
            )));
        }
        let input_dim = parts[0];
        let widths = parts[1..parts.len() - 1].to_vec();
        Self::new(input_dim, widths, kernels, residual)
    }

    pub fn layer_string(&self) -> String {
        let mut s = self.input_dim.to_string();
        for w in &self.widths {
            s.push('-');
            s.push_str(&w.to_string());
        }
        s.push_str("-1");
        s
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn layers(&self) -> usize {
        self.widths.len()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn kernels(&self) -> &[KernelSpec] {
        &self.kernels
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    /// Input dimension of the layer-`l` feature map (0-based): the raw input
    /// for layer 0, the layer's own width afterwards.
    pub fn feature_input_dim(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else {
            self.widths[l]
        }
    }

    /// Output width after layer `l` (0-based); the final layer emits a scalar.
    fn width_after(&self, l: usize) -> usize {
        if l + 1 < self.widths.len() {
            self.widths[l + 1]
        } else {
            1
        }
    }

    /// Draw the frozen per-layer feature maps from disjoint seed streams.
    pub fn sample_feature_maps(&self, seed: u64) -> Result<Vec<FeatureMap>> {
        (0..self.layers())
            .map(|l| {
                FeatureMap::sample(
                    self.kernels[l],
                    self.feature_input_dim(l),
                    self.widths[l],
                    seeding::derive(seed, l as u64),
                )
            })
            .collect()
    }

    /// Number of trainable weight entries.
    pub fn parameter_count(&self) -> usize {
        if self.residual {
            let blocks: usize = (1..self.layers())
                .map(|l| self.widths[l] * self.widths[l - 1] + self.widths[l] * self.widths[l])
                .sum();
            blocks + self.widths[self.layers() - 1]
        } else {
            (0..self.layers())
                .map(|l| self.width_after(l) * self.widths[l])
                .sum()
        }
    }

    /// Machine-independent storage accounting: weights and their gradients
    /// (counting the input-layer frequency matrix) plus one activation slot
    /// per random feature.
    pub fn storage_count(&self) -> usize {
        let weight_entries = self.input_dim * self.widths[0] + self.parameter_count();
        let feature_entries: usize = self.widths.iter().sum();
        2 * weight_entries + feature_entries
    }
}

/// One residual block: `project` carries the input to the block width (and is
/// the skip path), `mix` recombines the block's random features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub project: Array2<f64>,
    pub mix: Array2<f64>,
}

/// Trainable parameters for either architecture mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Weights {
    Dense {
        layers: Vec<Array2<f64>>,
    },
    Residual {
        blocks: Vec<ResidualBlock>,
        readout: Array2<f64>,
    },
}

fn uniform_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

impl Weights {
    pub fn zeros(arch: &Architecture) -> Self {
        if arch.residual {
            let blocks = (1..arch.layers())
                .map(|l| ResidualBlock {
                    project: Array2::zeros((arch.widths[l], arch.widths[l - 1])),
                    mix: Array2::zeros((arch.widths[l], arch.widths[l])),
                })
                .collect();
            Weights::Residual {
                blocks,
                readout: Array2::zeros((1, arch.widths[arch.layers() - 1])),
            }
        } else {
            let layers = (0..arch.layers())
                .map(|l| Array2::zeros((arch.width_after(l), arch.widths[l])))
                .collect();
            Weights::Dense { layers }
        }
    }

    /// Scale-balanced uniform initialization on ±√(6/(fan_in+fan_out)).
    pub fn uniform_init<R: Rng>(arch: &Architecture, rng: &mut R) -> Self {
        if arch.residual {
            let blocks = (1..arch.layers())
                .map(|l| ResidualBlock {
                    project: uniform_matrix(arch.widths[l], arch.widths[l - 1], rng),
                    mix: uniform_matrix(arch.widths[l], arch.widths[l], rng),
                })
                .collect();
            Weights::Residual {
                blocks,
                readout: uniform_matrix(1, arch.widths[arch.layers() - 1], rng),
            }
        } else {
            let layers = (0..arch.layers())
                .map(|l| uniform_matrix(arch.width_after(l), arch.widths[l], rng))
                .collect();
            Weights::Dense { layers }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Weights::Dense { layers } => layers.iter().map(|w| w.len()).sum(),
            Weights::Residual { blocks, readout } => {
                blocks
                    .iter()
                    .map(|b| b.project.len() + b.mix.len())
                    .sum::<usize>()
                    + readout.len()
            }
        }
    }

    /// Number of independently trainable units: one per layer in cascade
    /// mode; one per block plus the readout in residual mode.
    pub fn unit_count(&self) -> usize {
        match self {
            Weights::Dense { layers } => layers.len(),
            Weights::Residual { blocks, .. } => blocks.len() + 1,
        }
    }

    /// Canonical flattening: units ascending, `project` before `mix` inside a
    /// residual block, row-major within each matrix, readout last.
    pub fn flatten(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        match self {
            Weights::Dense { layers } => {
                for w in layers {
                    out.extend(w.iter());
                }
            }
            Weights::Residual { blocks, readout } => {
                for b in blocks {
                    out.extend(b.project.iter());
                    out.extend(b.mix.iter());
                }
                out.extend(readout.iter());
            }
        }
        Array1::from_vec(out)
    }

    /// Rebuild weights from a canonical flat vector.
    pub fn from_flat(arch: &Architecture, flat: ArrayView1<f64>) -> Result<Self> {
        let mut w = Weights::zeros(arch);
        if flat.len() != w.param_count() {
            return Err(Error::DimMismatch(format!(
                "flat vector has {} entries, architecture needs {}",
                flat.len(),
                w.param_count()
            )));
        }
        let mut idx = 0;
        let mut fill = |m: &mut Array2<f64>| {
            for v in m.iter_mut() {
                *v = flat[idx];
                idx += 1;
            }
        };
        match &mut w {
            Weights::Dense { layers } => layers.iter_mut().for_each(&mut fill),
            Weights::Residual { blocks, readout } => {
                for b in blocks.iter_mut() {
                    fill(&mut b.project);
                    fill(&mut b.mix);
                }
                fill(readout);
            }
        }
        Ok(w)
    }

    pub fn l2_norm_sq(&self) -> f64 {
        match self {
            Weights::Dense { layers } => layers.iter().map(|w| w.iter().map(|v| v * v).sum::<f64>()).sum(),
            Weights::Residual { blocks, readout } => {
                blocks
                    .iter()
                    .map(|b| {
                        b.project.iter().map(|v| v * v).sum::<f64>()
                            + b.mix.iter().map(|v| v * v).sum::<f64>()
                    })
                    .sum::<f64>()
                    + readout.iter().map(|v| v * v).sum::<f64>()
            }
        }
    }

    /// self += alpha · other, entrywise across all matrices.
    pub fn axpy(&mut self, alpha: f64, other: &Weights) {
        match (self, other) {
            (Weights::Dense { layers }, Weights::Dense { layers: og }) => {
                for (w, g) in layers.iter_mut().zip(og) {
                    w.zip_mut_with(g, |a, &b| *a += alpha * b);
                }
            }
            (
                Weights::Residual { blocks, readout },
                Weights::Residual {
                    blocks: ob,
                    readout: or,
                },
            ) => {
                for (b, g) in blocks.iter_mut().zip(ob) {
                    b.project.zip_mut_with(&g.project, |a, &v| *a += alpha * v);
                    b.mix.zip_mut_with(&g.mix, |a, &v| *a += alpha * v);
                }
                readout.zip_mut_with(or, |a, &v| *a += alpha * v);
            }
            _ => panic!("weight modes differ"),
        }
    }

    /// self.unit += alpha · gradient-of-unit.
    pub fn step_unit(&mut self, unit: usize, alpha: f64, grad: &LayerGradient) {
        assert_eq!(unit, grad.unit, "gradient belongs to a different unit");
        match self {
            Weights::Dense { layers } => {
                layers[unit].zip_mut_with(&grad.matrices[0], |a, &b| *a += alpha * b);
            }
            Weights::Residual { blocks, readout } => {
                if unit < blocks.len() {
                    blocks[unit]
                        .project
                        .zip_mut_with(&grad.matrices[0], |a, &b| *a += alpha * b);
                    blocks[unit]
                        .mix
                        .zip_mut_with(&grad.matrices[1], |a, &b| *a += alpha * b);
                } else {
                    readout.zip_mut_with(&grad.matrices[0], |a, &b| *a += alpha * b);
                }
            }
        }
    }

    fn check_congruent(&self, arch: &Architecture) -> Result<()> {
        let ok = match self {
            Weights::Dense { layers } => {
                !arch.residual
                    && layers.len() == arch.layers()
                    && layers
                        .iter()
                        .enumerate()
                        .all(|(l, w)| w.dim() == (arch.width_after(l), arch.widths[l]))
            }
            Weights::Residual { blocks, readout } => {
                arch.residual
                    && blocks.len() + 1 == arch.layers()
                    && blocks.iter().enumerate().all(|(i, b)| {
                        let l = i + 1;
                        b.project.dim() == (arch.widths[l], arch.widths[l - 1])
                            && b.mix.dim() == (arch.widths[l], arch.widths[l])
                    })
                    && readout.dim() == (1, arch.widths[arch.layers() - 1])
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::DimMismatch(
                "weights do not match the architecture".into(),
            ))
        }
    }
}

/// Full gradient of the penalized empirical loss: one array per weight
/// matrix, shape-congruent with [`Weights`], plus the loss value.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub grads: Weights,
    pub loss: f64,
}

/// Gradient restricted to one trainable unit, all other layers held fixed.
/// `matrices` holds one array for a cascade layer or the readout, two
/// (`project`, `mix`) for a residual block.
#[derive(Debug, Clone)]
pub struct LayerGradient {
    pub unit: usize,
    pub matrices: Vec<Array2<f64>>,
    pub loss: f64,
}

fn check_setup(arch: &Architecture, weights: &Weights, maps: &[FeatureMap]) -> Result<()> {
    weights.check_congruent(arch)?;
    if maps.len() != arch.layers() {
        return Err(Error::DimMismatch(format!(
            "need {} feature maps, got {}",
            arch.layers(),
            maps.len()
        )));
    }
    for (l, fm) in maps.iter().enumerate() {
        if fm.input_dim() != arch.feature_input_dim(l) || fm.num_features() != arch.widths()[l] {
            return Err(Error::DimMismatch(format!(
                "feature map {l} has dims {}→{}, architecture expects {}→{}",
                fm.input_dim(),
                fm.num_features(),
                arch.feature_input_dim(l),
                arch.widths()[l]
            )));
        }
    }
    Ok(())
}

fn feature_cos(pre: &Array2<f64>, width: usize) -> Array2<f64> {
    let c = (2.0 / width as f64).sqrt();
    pre.mapv(|p| c * p.cos())
}

enum Trace {
    Dense {
        // per layer: pre-activations ω z + b and features √(2/D) cos(·)
        preacts: Vec<Array2<f64>>,
        feats: Vec<Array2<f64>>,
        output: Array1<f64>,
    },
    Residual {
        // inputs[b] feeds block b; inputs[0] is φ_1(X)
        inputs: Vec<Array2<f64>>,
        preacts: Vec<Array2<f64>>,
        feats: Vec<Array2<f64>>,
        output: Array1<f64>,
    },
}

impl Trace {
    fn output(&self) -> &Array1<f64> {
        match self {
            Trace::Dense { output, .. } | Trace::Residual { output, .. } => output,
        }
    }
}

fn run_forward(
    arch: &Architecture,
    weights: &Weights,
    maps: &[FeatureMap],
    x: ArrayView2<f64>,
) -> Result<Trace> {
    if x.ncols() != arch.input_dim() {
        return Err(Error::DimMismatch(format!(
            "input has {} columns, architecture expects {}",
            x.ncols(),
            arch.input_dim()
        )));
    }
    match weights {
        Weights::Dense { layers } => {
            let l_count = arch.layers();
            let mut preacts = Vec::with_capacity(l_count);
            let mut feats = Vec::with_capacity(l_count);
            let mut z = x.to_owned();
            for l in 0..l_count {
                let pre = maps[l].preactivations(z.view())?;
                let a = feature_cos(&pre, arch.widths()[l]);
                z = a.dot(&layers[l].t());
                preacts.push(pre);
                feats.push(a);
            }
            let output = z.column(0).to_owned();
            Ok(Trace::Dense {
                preacts,
                feats,
                output,
            })
        }
        Weights::Residual { blocks, readout } => {
            let mut inputs = Vec::with_capacity(blocks.len() + 1);
            let mut preacts = Vec::with_capacity(blocks.len());
            let mut feats = Vec::with_capacity(blocks.len());
            let pre0 = maps[0].preactivations(x)?;
            inputs.push(feature_cos(&pre0, arch.widths()[0]));
            for (b, block) in blocks.iter().enumerate() {
                let h = inputs[b].dot(&block.project.t());
                let pre = maps[b + 1].preactivations(h.view())?;
                let a = feature_cos(&pre, arch.widths()[b + 1]);
                let state = a.dot(&block.mix.t()) + &h;
                preacts.push(pre);
                feats.push(a);
                inputs.push(state);
            }
            let output = inputs.last().unwrap().dot(&readout.t()).column(0).to_owned();
            Ok(Trace::Residual {
                inputs,
                preacts,
                feats,
                output,
            })
        }
    }
}

/// Backprop signal through a feature map: given dLoss/dA and the stored
/// pre-activations, returns dLoss/dZ = (dA ⊙ (−c sin(P))) Ω.
fn backprop_features(
    g_feats: &Array2<f64>,
    pre: &Array2<f64>,
    fm: &FeatureMap,
) -> Array2<f64> {
    let c = (2.0 / fm.num_features() as f64).sqrt();
    let mut t = g_feats.clone();
    t.zip_mut_with(pre, |g, &p| *g *= -c * p.sin());
    t.dot(&fm.omegas())
}

enum GradScope {
    All,
    Unit(usize),
}

/// Shared reverse pass. `seed` is dLoss/d(output) as an n-vector; ridge adds
/// 2λW to every collected gradient.
fn run_backward(
    arch: &Architecture,
    weights: &Weights,
    maps: &[FeatureMap],
    x: ArrayView2<f64>,
    trace: &Trace,
    seed: &Array1<f64>,
    ridge: f64,
    scope: &GradScope,
) -> Vec<(usize, Vec<Array2<f64>>)> {
    let _ = x;
    let want = |unit: usize| match scope {
        GradScope::All => true,
        GradScope::Unit(u) => *u == unit,
    };
    let lowest = match scope {
        GradScope::All => 0,
        GradScope::Unit(u) => *u,
    };
    let mut collected = Vec::new();
    match (weights, trace) {
        (Weights::Dense { layers }, Trace::Dense { preacts, feats, .. }) => {
            // g is dLoss/dZ_l, starting at the scalar output
            let mut g = seed
                .view()
                .insert_axis(ndarray::Axis(1))
                .to_owned();
            for l in (lowest..arch.layers()).rev() {
                if want(l) {
                    let mut grad = g.t().dot(&feats[l]);
                    if ridge != 0.0 {
                        grad.zip_mut_with(&layers[l], |a, &w| *a += 2.0 * ridge * w);
                    }
                    collected.push((l, vec![grad]));
                }
                if l > lowest {
                    let g_feats = g.dot(&layers[l]);
                    g = backprop_features(&g_feats, &preacts[l], &maps[l]);
                }
            }
        }
        (
            Weights::Residual { blocks, readout },
            Trace::Residual {
                inputs,
                preacts,
                feats,
                ..
            },
        ) => {
            let readout_unit = blocks.len();
            let g_out = seed.view().insert_axis(ndarray::Axis(1)).to_owned();
            if want(readout_unit) {
                let mut grad = g_out.t().dot(inputs.last().unwrap());
                if ridge != 0.0 {
                    grad.zip_mut_with(readout, |a, &w| *a += 2.0 * ridge * w);
                }
                collected.push((readout_unit, vec![grad]));
            }
            let mut g_state = g_out.dot(readout);
            for b in (lowest.min(readout_unit)..blocks.len()).rev() {
                let block = &blocks[b];
                let want_b = want(b);
                let mut grad_mix = None;
                if want_b {
                    let mut gm = g_state.t().dot(&feats[b]);
                    if ridge != 0.0 {
                        gm.zip_mut_with(&block.mix, |a, &w| *a += 2.0 * ridge * w);
                    }
                    grad_mix = Some(gm);
                }
                let g_feats = g_state.dot(&block.mix);
                // skip path contributes g_state directly to dLoss/dH
                let mut g_hidden = backprop_features(&g_feats, &preacts[b], &maps[b + 1]);
                g_hidden += &g_state;
                if want_b {
                    let mut gp = g_hidden.t().dot(&inputs[b]);
                    if ridge != 0.0 {
                        gp.zip_mut_with(&block.project, |a, &w| *a += 2.0 * ridge * w);
                    }
                    collected.push((b, vec![gp, grad_mix.unwrap()]));
                }
                if b > lowest {
                    g_state = g_hidden.dot(&block.project);
                }
            }
        }
        _ => unreachable!("trace mode always matches weight mode"),
    }
    collected.sort_by_key(|(u, _)| *u);
    collected
}

fn check_batch(x: ArrayView2<f64>, y: ArrayView1<f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    if x.nrows() != y.len() {
        return Err(Error::DimMismatch(format!(
            "{} inputs vs {} targets",
            x.nrows(),
            y.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("training batch".into()));
    }
    Ok(())
}

/// Scalar forward pass; pure in all arguments.
pub fn forward(
    arch: &Architecture,
    weights: &Weights,
    maps: &[FeatureMap],
    x: ArrayView1<f64>,
) -> Result<f64> {
    let x2 = x.insert_axis(ndarray::Axis(0));
    Ok(forward_batch(arch, weights, maps, x2)?[0])
}

/// Forward pass over the rows of an n × d matrix.
pub fn forward_batch(
    arch: &Architecture,
    weights: &Weights,
    maps: &[FeatureMap],
    x: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    check_setup(arch, weights, maps)?;
    Ok(run_forward(arch, weights, maps, x)?.output().clone())
}

/// Mean-squared-error of the model on a batch plus the ridge penalty.
pub fn penalized_loss(
    arch: &Architecture,
    weights: &Weights,
    maps: &[FeatureMap],
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    ridge: f64,
) -> Result<f64> {
    let f = forward_batch(arch, weights, maps, x)?;
    let n = y.len() as f64;
    let mse = f
        .iter()
        .zip(y)
        .map(|(fi, yi)| (fi - yi) * (fi - yi))
        .sum::<f64>()
        / n;
    Ok(mse + ridge * weights.l2_norm_sq())
}

/// Exact gradient of mean-squared error + λ‖W‖² with respect to every weight
/// matrix.
pub fn backward(
    arch: &Architecture,
    weights: &Weights,
    maps: &[FeatureMap],
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    ridge: f64,
) -> Result<GradientBundle> {
    check_setup(arch, weights, maps)?;
    check_batch(x, y)?;
    let trace = run_forward(arch, weights, maps, x)?;
    let n = y.len() as f64;
    let resid = trace.output() - &y;
    let loss = resid.dot(&resid) / n + ridge * weights.l2_norm_sq();
    let seed = resid.mapv(|r| 2.0 * r / n);
    let parts = run_backward(arch, weights, maps, x, &trace, &seed, ridge, &GradScope::All);
    let mut grads = Weights::zeros(arch);
    match &mut grads {
        Weights::Dense { layers } => {
            for (u, mut m) in parts {
                layers[u] = m.pop().unwrap();
            }
        }
        Weights::Residual { blocks, readout } => {
            for (u, mut m) in parts {
                if u < blocks.len() {
                    blocks[u].mix = m.pop().unwrap();
                    blocks[u].project = m.pop().unwrap();
                } else {
                    *readout = m.pop().unwrap();
                }
            }
        }
    }
    Ok(GradientBundle { grads, loss })
}

/// Gradient of the unpenalized batch mean-squared error with respect to one
/// trainable unit only (0-based), all other layers treated as constants.
pub fn layer_gradient(
    arch: &Architecture,
    weights: &Weights,
    maps: &[FeatureMap],
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    unit: usize,
) -> Result<LayerGradient> {
    unit_gradient(arch, weights, maps, x, y, unit, 0.0)
}

/// As [`layer_gradient`] but with the ridge term included; the trainer's hot
/// path.
pub fn unit_gradient(
    arch: &Architecture,
    weights: &Weights,
    maps: &[FeatureMap],
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    unit: usize,
    ridge: f64,
) -> Result<LayerGradient> {
    check_setup(arch, weights, maps)?;
    check_batch(x, y)?;
    if unit >= weights.unit_count() {
        return Err(Error::InvalidArgument(format!(
            "unit {unit} out of range for {} units",
            weights.unit_count()
        )));
    }
    let trace = run_forward(arch, weights, maps, x)?;
    let n = y.len() as f64;
    let resid = trace.output() - &y;
    let loss = resid.dot(&resid) / n + ridge * weights.l2_norm_sq();
    let seed = resid.mapv(|r| 2.0 * r / n);
    let mut parts = run_backward(
        arch,
        weights,
        maps,
        x,
        &trace,
        &seed,
        ridge,
        &GradScope::Unit(unit),
    );
    let (u, matrices) = parts.pop().expect("requested unit is collected");
    debug_assert!(parts.is_empty());
    Ok(LayerGradient {
        unit: u,
        matrices,
        loss,
    })
}

/// Jacobian of the model output with respect to the flattened parameters:
/// row i is ∇_W f(x_i) in the canonical order of [`Weights::flatten`].
pub fn param_jacobian(
    arch: &Architecture,
    weights: &Weights,
    maps: &[FeatureMap],
    x: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_setup(arch, weights, maps)?;
    if x.nrows() == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let p = weights.param_count();
    let mut jac = Array2::<f64>::zeros((x.nrows(), p));
    let one = Array1::from_elem(1, 1.0);
    for (i, row) in x.rows().into_iter().enumerate() {
        let xi = row.insert_axis(ndarray::Axis(0));
        let trace = run_forward(arch, weights, maps, xi)?;
        let parts = run_backward(arch, weights, maps, xi, &trace, &one, 0.0, &GradScope::All);
        let mut grads = Weights::zeros(arch);
        match &mut grads {
            Weights::Dense { layers } => {
                for (u, mut m) in parts {
                    layers[u] = m.pop().unwrap();
                }
            }
            Weights::Residual { blocks, readout } => {
                for (u, mut m) in parts {
                    if u < blocks.len() {
                        blocks[u].mix = m.pop().unwrap();
                        blocks[u].project = m.pop().unwrap();
                    } else {
                        *readout = m.pop().unwrap();
                    }
                }
            }
        }
        jac.row_mut(i).assign(&grads.flatten());
    }
    Ok(jac)
}

/// A self-contained fitted network: architecture, frozen feature maps, and
/// trained weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub arch: Architecture,
    pub feature_maps: Vec<FeatureMap>,
    pub weights: Weights,
}

impl Model {
    pub fn predict(&self, x: ArrayView1<f64>) -> Result<f64> {
        forward(&self.arch, &self.weights, &self.feature_maps, x)
    }

    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        forward_batch(&self.arch, &self.weights, &self.feature_maps, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};

    fn gaussian_kernels(n: usize, scale: f64) -> Vec<KernelSpec> {
        (0..n).map(|_| KernelSpec::gaussian(scale).unwrap()).collect()
    }

    fn small_arch(residual: bool) -> (Architecture, Vec<FeatureMap>) {
        let arch = Architecture::new(3, vec![8, 4], gaussian_kernels(2, 1.0), residual).unwrap();
        let maps = arch.sample_feature_maps(11).unwrap();
        (arch, maps)
    }

    fn random_batch(n: usize, d: usize, seed: u64) -> (Array2<f64>, Array1<f64>) {
        let mut rng = seeding::rng(seed, 0);
        let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let y = Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0));
        (x, y)
    }

    /// Independent scalar-loop forward pass for cascade mode.
    fn forward_oracle(
        arch: &Architecture,
        weights: &Weights,
        maps: &[FeatureMap],
        x: &[f64],
    ) -> f64 {
        let Weights::Dense { layers } = weights else {
            panic!("oracle covers cascade mode")
        };
        let mut z: Vec<f64> = x.to_vec();
        for l in 0..arch.layers() {
            let d = arch.widths()[l];
            let c = (2.0 / d as f64).sqrt();
            let mut a = vec![0.0; d];
            for k in 0..d {
                let mut dot = 0.0;
                for (j, &zj) in z.iter().enumerate() {
                    dot += maps[l].omegas()[[k, j]] * zj;
                }
                a[k] = c * (dot + maps[l].phases()[k]).cos();
            }
            let rows = layers[l].nrows();
            let mut out = vec![0.0; rows];
            for r in 0..rows {
                for (k, &ak) in a.iter().enumerate() {
                    out[r] += layers[l][[r, k]] * ak;
                }
            }
            z = out;
        }
        z[0]
    }

    /// Central finite differences on the flattened parameters.
    fn finite_difference_check(
        arch: &Architecture,
        weights: &Weights,
        maps: &[FeatureMap],
        x: &Array2<f64>,
        y: &Array1<f64>,
        ridge: f64,
    ) {
        let bundle = backward(arch, weights, maps, x.view(), y.view(), ridge).unwrap();
        let analytic = bundle.grads.flatten();
        let flat = weights.flatten();
        let h = 1e-6;
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let wp = Weights::from_flat(arch, plus.view()).unwrap();
            let wm = Weights::from_flat(arch, minus.view()).unwrap();
            let lp = penalized_loss(arch, &wp, maps, x.view(), y.view(), ridge).unwrap();
            let lm = penalized_loss(arch, &wm, maps, x.view(), y.view(), ridge).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic[i] - numeric).abs() / denom < 1e-5,
                "param {i}: analytic {} vs numeric {}",
                analytic[i],
                numeric
            );
        }
    }

    #[test]
    fn constant_features_with_unit_weights_output_two() {
        let arch = Architecture::new(2, vec![2], gaussian_kernels(1, 1.0), false).unwrap();
        // zero frequencies and phases: every feature is √(2/2)·cos(0) = 1
        let maps = vec![FeatureMap::from_raw_parts(
            arch.kernels()[0],
            Array2::zeros((2, 2)),
            Array1::zeros(2),
            0,
        )
        .unwrap()];
        let weights = Weights::Dense {
            layers: vec![array![[1.0, 1.0]]],
        };
        let f = forward(&arch, &weights, &maps, array![5.0, -3.0].view()).unwrap();
        assert!((f - 2.0).abs() < 1e-14);
        let f2 = forward(&arch, &weights, &maps, array![0.0, 0.0].view()).unwrap();
        assert!((f2 - 2.0).abs() < 1e-14);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let (arch, maps) = small_arch(false);
        let weights = Weights::zeros(&arch);
        let (x, _) = random_batch(4, 3, 1);
        let f = forward_batch(&arch, &weights, &maps, x.view()).unwrap();
        assert!(f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let (arch, maps) = small_arch(false);
        let mut rng = seeding::rng(5, 2);
        let weights = Weights::uniform_init(&arch, &mut rng);
        let (x, _) = random_batch(6, 3, 2);
        let f = forward_batch(&arch, &weights, &maps, x.view()).unwrap();
        for (i, row) in x.rows().into_iter().enumerate() {
            let oracle = forward_oracle(&arch, &weights, &maps, row.as_slice().unwrap());
            assert!((f[i] - oracle).abs() < 1e-12, "{} vs {}", f[i], oracle);
        }
    }

    #[test]
    fn zero_weights_zero_targets_give_zero_gradient() {
        let arch = Architecture::new(3, vec![4], gaussian_kernels(1, 1.0), false).unwrap();
        let maps = arch.sample_feature_maps(3).unwrap();
        let weights = Weights::zeros(&arch);
        let x = array![[0.2, -0.4, 1.0]];
        let y = array![0.0];
        let g = backward(&arch, &weights, &maps, x.view(), y.view(), 0.0).unwrap();
        assert!(g.grads.flatten().iter().all(|v| *v == 0.0));
        assert_eq!(g.loss, 0.0);
    }

    #[test]
    fn zero_residual_batch_leaves_pure_penalty_gradient() {
        let (arch, maps) = small_arch(false);
        let mut rng = seeding::rng(9, 0);
        let weights = Weights::uniform_init(&arch, &mut rng);
        let (x, _) = random_batch(5, 3, 7);
        let y = forward_batch(&arch, &weights, &maps, x.view()).unwrap();
        let ridge = 1.0;
        let g = backward(&arch, &weights, &maps, x.view(), y.view(), ridge).unwrap();
        let expect = weights.flatten().mapv(|w| 2.0 * ridge * w);
        let got = g.grads.flatten();
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences_cascade() {
        let (arch, maps) = small_arch(false);
        let mut rng = seeding::rng(13, 0);
        let weights = Weights::uniform_init(&arch, &mut rng);
        let (x, y) = random_batch(5, 3, 3);
        finite_difference_check(&arch, &weights, &maps, &x, &y, 0.0);
        finite_difference_check(&arch, &weights, &maps, &x, &y, 0.3);
    }

    #[test]
    fn gradients_match_finite_differences_residual() {
        let (arch, maps) = small_arch(true);
        let mut rng = seeding::rng(14, 0);
        let weights = Weights::uniform_init(&arch, &mut rng);
        let (x, y) = random_batch(5, 3, 4);
        finite_difference_check(&arch, &weights, &maps, &x, &y, 0.0);
        finite_difference_check(&arch, &weights, &maps, &x, &y, 0.1);
    }

    #[test]
    fn layer_gradient_equals_backward_block() {
        for residual in [false, true] {
            let (arch, maps) = small_arch(residual);
            let mut rng = seeding::rng(15, residual as u64);
            let weights = Weights::uniform_init(&arch, &mut rng);
            let (x, y) = random_batch(6, 3, 5);
            let full = backward(&arch, &weights, &maps, x.view(), y.view(), 0.0).unwrap();
            for unit in 0..weights.unit_count() {
                let lg = layer_gradient(&arch, &weights, &maps, x.view(), y.view(), unit).unwrap();
                let reference: Vec<&Array2<f64>> = match &full.grads {
                    Weights::Dense { layers } => vec![&layers[unit]],
                    Weights::Residual { blocks, readout } => {
                        if unit < blocks.len() {
                            vec![&blocks[unit].project, &blocks[unit].mix]
                        } else {
                            vec![readout]
                        }
                    }
                };
                assert_eq!(lg.matrices.len(), reference.len());
                for (got, want) in lg.matrices.iter().zip(reference) {
                    for (a, b) in got.iter().zip(want.iter()) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn final_layer_gradient_is_linear_regression_gradient() {
        let (arch, maps) = small_arch(false);
        let mut rng = seeding::rng(16, 0);
        let weights = Weights::uniform_init(&arch, &mut rng);
        let (x, y) = random_batch(7, 3, 6);
        // features seen by the last layer: φ_2 of the layer-1 output
        let Weights::Dense { layers } = &weights else {
            unreachable!()
        };
        let a1 = maps[0].apply_matrix(x.view()).unwrap();
        let z1 = a1.dot(&layers[0].t());
        let psi = maps[1].apply_matrix(z1.view()).unwrap();
        let f = psi.dot(&layers[1].t()).column(0).to_owned();
        let n = y.len() as f64;
        let resid = &f - &y;
        let closed_form = resid
            .view()
            .insert_axis(Axis(1))
            .t()
            .dot(&psi)
            .mapv(|v| 2.0 * v / n);
        let lg = layer_gradient(&arch, &weights, &maps, x.view(), y.view(), 1).unwrap();
        for (a, b) in lg.matrices[0].iter().zip(closed_form.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_of_single_layer_model_is_feature_matrix() {
        let arch = Architecture::new(3, vec![6], gaussian_kernels(1, 1.0), false).unwrap();
        let maps = arch.sample_feature_maps(8).unwrap();
        let mut rng = seeding::rng(17, 0);
        let weights = Weights::uniform_init(&arch, &mut rng);
        let (x, _) = random_batch(5, 3, 9);
        let jac = param_jacobian(&arch, &weights, &maps, x.view()).unwrap();
        let psi = maps[0].apply_matrix(x.view()).unwrap();
        assert_eq!(jac.dim(), psi.dim());
        for (a, b) in jac.iter().zip(psi.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn jacobian_rows_match_finite_differences() {
        for residual in [false, true] {
            let (arch, maps) = small_arch(residual);
            let mut rng = seeding::rng(18, residual as u64);
            let weights = Weights::uniform_init(&arch, &mut rng);
            let (x, _) = random_batch(3, 3, 10);
            let jac = param_jacobian(&arch, &weights, &maps, x.view()).unwrap();
            let flat = weights.flatten();
            let h = 1e-6;
            for (i, row) in x.rows().into_iter().enumerate() {
                for p in 0..flat.len() {
                    let mut plus = flat.clone();
                    plus[p] += h;
                    let mut minus = flat.clone();
                    minus[p] -= h;
                    let wp = Weights::from_flat(&arch, plus.view()).unwrap();
                    let wm = Weights::from_flat(&arch, minus.view()).unwrap();
                    let fp = forward(&arch, &wp, &maps, row).unwrap();
                    let fm_ = forward(&arch, &wm, &maps, row).unwrap();
                    let numeric = (fp - fm_) / (2.0 * h);
                    let denom = jac[[i, p]].abs().max(numeric.abs()).max(1e-8);
                    assert!(
                        (jac[[i, p]] - numeric).abs() / denom < 1e-5,
                        "row {i} param {p}"
                    );
                }
            }
        }
    }

    #[test]
    fn duplicated_inputs_give_identical_jacobian_rows() {
        let (arch, maps) = small_arch(false);
        let mut rng = seeding::rng(19, 0);
        let weights = Weights::uniform_init(&arch, &mut rng);
        let x = array![[0.1, -0.2, 0.3], [0.1, -0.2, 0.3]];
        let jac = param_jacobian(&arch, &weights, &maps, x.view()).unwrap();
        for p in 0..jac.ncols() {
            assert_eq!(jac[[0, p]].to_bits(), jac[[1, p]].to_bits());
        }
    }

    #[test]
    fn residual_with_zero_mix_is_a_product_of_linear_maps() {
        let arch = Architecture::new(3, vec![8, 4, 2], gaussian_kernels(3, 1.0), true).unwrap();
        let maps = arch.sample_feature_maps(21).unwrap();
        let mut rng = seeding::rng(22, 0);
        let mut weights = Weights::uniform_init(&arch, &mut rng);
        if let Weights::Residual { blocks, .. } = &mut weights {
            for b in blocks {
                b.mix.fill(0.0);
            }
        }
        let (x, _) = random_batch(4, 3, 12);
        let f = forward_batch(&arch, &weights, &maps, x.view()).unwrap();
        let Weights::Residual { blocks, readout } = &weights else {
            unreachable!()
        };
        let phi = maps[0].apply_matrix(x.view()).unwrap();
        let mut z = phi;
        for b in blocks {
            z = z.dot(&b.project.t());
        }
        let direct = z.dot(&readout.t()).column(0).to_owned();
        for (a, b) in f.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_count_matches_flattened_gradient_length() {
        for residual in [false, true] {
            let (arch, maps) = small_arch(residual);
            let mut rng = seeding::rng(23, 0);
            let weights = Weights::uniform_init(&arch, &mut rng);
            let (x, y) = random_batch(4, 3, 13);
            let g = backward(&arch, &weights, &maps, x.view(), y.view(), 0.0).unwrap();
            assert_eq!(weights.param_count(), g.grads.flatten().len());
            assert_eq!(arch.parameter_count(), weights.param_count());
        }
    }

    #[test]
    fn storage_count_reproduces_large_architecture_accounting() {
        let arch = Architecture::from_layer_string(
            "128-256-16-1",
            gaussian_kernels(2, 1.0),
            false,
        )
        .unwrap();
        assert_eq!(arch.storage_count(), 74_032);
        assert_eq!(arch.parameter_count(), 256 * 16 + 16);
    }

    #[test]
    fn bad_layer_strings_are_rejected()     {
        assert!(Architecture::from_layer_string("4-8-16-1", gaussian_kernels(2, 1.0), false).is_err());
        assert!(Architecture::from_layer_string("4-8-4", gaussian_kernels(2, 1.0), false).is_err());
        assert!(Architecture::from_layer_string("4", gaussian_kernels(0, 1.0), false).is_err());
    }

    #[test]
    fn non_finite_batch_is_rejected() {
        let (arch, maps) = small_arch(false);
        let weights = Weights::zeros(&arch);
        let x = array![[f64::NAN, 0.0, 0.0]];
        let y = array![0.0];
        assert!(matches!(
            backward(&arch, &weights, &maps, x.view(), y.view(), 0.0),
            Err(Error::NonFiniteInput(_))
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let (arch, maps) = small_arch(false);
        let mut rng = seeding::rng(29, 0);
        let weights = Weights::uniform_init(&arch, &mut rng);
        let x = array![0.5, -0.25, 0.75];
        let a = forward(&arch, &weights, &maps, x.view()).unwrap();
        let b = forward(&arch, &weights, &maps, x.view()).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
