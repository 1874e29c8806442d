//! Data-adaptive mixing of two similarity channels (raw and filtered, or two
//! modalities). The mixing weight α is learnt offline as a function of a
//! per-query statistic, then looked up at match time.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{brent_minimize, gaussian_blur};

pub const DEFAULT_STEP: f64 = 0.02;
pub const DEFAULT_SMOOTHING: f64 = 0.05;
pub const DEFAULT_SIGMOID_GAIN: f64 = 10.0;

/// Which similarity channel of the corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Raw,
    Filtered,
}

/// All pairwise set similarities of a training corpus, for both channels:
/// `ρ(set(p, i), set(q, j))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCorpus {
    pub persons: usize,
    pub illuminations: usize,
    raw: Vec<f64>,
    filtered: Vec<f64>,
}

impl SimilarityCorpus {
    pub fn from_fn(persons: usize, illuminations: usize, mut f: impl FnMut(usize, usize, usize, usize, Channel) -> f64) -> Self {
        let n = persons * illuminations * persons * illuminations;
        let mut raw = Vec::with_capacity(n);
        let mut filtered = Vec::with_capacity(n);
        for p in 0..persons {
            for i in 0..illuminations {
                for q in 0..persons {
                    for j in 0..illuminations {
                        raw.push(f(p, i, q, j, Channel::Raw));
                        filtered.push(f(p, i, q, j, Channel::Filtered));
                    }
                }
            }
        }
        SimilarityCorpus { persons, illuminations, raw, filtered }
    }

    pub fn get(&self, p: usize, i: usize, q: usize, j: usize, channel: Channel) -> f64 {
        let idx = ((p * self.illuminations + i) * self.persons + q) * self.illuminations + j;
        match channel {
            Channel::Raw => self.raw[idx],
            Channel::Filtered => self.filtered[idx],
        }
    }
}

/// Abscissa of the density.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Abscissa {
    /// Best minus second-best raw similarity of the query against the gallery.
    ConfusionMargin,
    /// Raw similarity of the query to its true match.
    GenuineSimilarity,
}

/// How a separation δ updates the density.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// Add δ itself.
    Linear,
    /// Add `sig(C·δ) − ½`.
    Sigmoid { gain: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub step: f64,
    pub smoothing: f64,
    pub abscissa: Abscissa,
    pub update: UpdateRule,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            step: DEFAULT_STEP,
            smoothing: DEFAULT_SMOOTHING,
            abscissa: Abscissa::ConfusionMargin,
            update: UpdateRule::Linear,
        }
    }
}

/// `p(α, μ)` on a regular grid over `[0,1]²`: rows are α nodes, columns μ nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointDensityGrid {
    pub values: DMatrix<f64>,
    pub d_alpha: f64,
    pub d_mu: f64,
}

impl JointDensityGrid {
    pub fn integral(&self) -> f64 {
        self.values.sum() * self.d_alpha * self.d_mu
    }

    pub fn alpha_at(&self, k: usize) -> f64 {
        k as f64 * self.d_alpha
    }

    pub fn mu_at(&self, m: usize) -> f64 {
        m as f64 * self.d_mu
    }
}

fn grid_nodes(step: f64) -> Result<usize> {
    if !(step > 0.0 && step <= 0.5) {
        return Err(Error::InvalidParams(format!("grid step {step} outside (0, 0.5]")));
    }
    Ok((1.0 / step).round() as usize + 1)
}

/// Best minus second-best of `values`, clamped to [0, 1].
pub fn confusion_margin(values: &[f64]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &v in values {
        if v > best {
            second = best;
            best = v;
        } else if v > second {
            second = v;
        }
    }
    if second == f64::NEG_INFINITY {
        return 0.0;
    }
    (best - second).clamp(0.0, 1.0)
}

/// Offline estimate of `p(α, μ)`. For every person `p` and ordered pair of
/// distinct illuminations `(i, j)`, the query is `(p, i)` against the gallery at
/// `j`. For each α node the separation is the fused genuine similarity minus the
/// best fused impostor similarity; it is accumulated at `(α, μ)`. The map is then
/// smoothed, clipped at zero and normalised to unit integral.
pub fn learn_joint_density(corpus: &SimilarityCorpus, cfg: &FusionConfig) -> Result<JointDensityGrid> {
    if corpus.persons < 2 || corpus.illuminations < 2 {
        return Err(Error::InsufficientCorpus(format!(
            "need at least 2 persons and 2 illuminations, got {} and {}",
            corpus.persons, corpus.illuminations
        )));
    }
    let nodes = grid_nodes(cfg.step)?;
    if let UpdateRule::Sigmoid { gain } = cfg.update {
        if !(gain > 0.0) {
            return Err(Error::InvalidParams("sigmoid gain must be positive".into()));
        }
    }
    let mut acc = DMatrix::zeros(nodes, nodes);
    for p in 0..corpus.persons {
        for i in 0..corpus.illuminations {
            for j in 0..corpus.illuminations {
                if i == j {
                    continue;
                }
                let raw_row: Vec<f64> = (0..corpus.persons).map(|q| corpus.get(p, i, q, j, Channel::Raw)).collect();
                let x = match cfg.abscissa {
                    Abscissa::ConfusionMargin => confusion_margin(&raw_row),
                    Abscissa::GenuineSimilarity => raw_row[p].clamp(0.0, 1.0),
                };
                let m = ((x / cfg.step).round() as usize).min(nodes - 1);
                for k in 0..nodes {
                    let a = k as f64 * cfg.step;
                    let fused = |q: usize| {
                        (1.0 - a) * corpus.get(p, i, q, j, Channel::Raw) + a * corpus.get(p, i, q, j, Channel::Filtered)
                    };
                    let genuine = fused(p);
                    let impostor = (0..corpus.persons).filter(|&q| q != p).map(fused).fold(f64::NEG_INFINITY, f64::max);
                    let delta = genuine - impostor;
                    acc[(k, m)] += match cfg.update {
                        UpdateRule::Linear => delta,
                        UpdateRule::Sigmoid { gain } => 1.0 / (1.0 + (-gain * delta).exp()) - 0.5,
                    };
                }
            }
        }
    }
    let smoothed = if cfg.smoothing > 0.0 { gaussian_blur(&acc, cfg.smoothing / cfg.step) } else { acc };
    Ok(normalise(smoothed.map(|v| v.max(0.0)), cfg.step))
}

fn normalise(values: DMatrix<f64>, step: f64) -> JointDensityGrid {
    let total = values.sum() * step * step;
    let values = if total > 0.0 {
        values / total
    } else {
        // nothing accumulated: uniform over the unit square
        let n = values.nrows() * values.ncols();
        DMatrix::from_element(values.nrows(), values.ncols(), 1.0 / (n as f64 * step * step))
    };
    JointDensityGrid { values, d_alpha: step, d_mu: step }
}

/// Uniform density on the grid.
pub fn uniform_density(step: f64) -> Result<JointDensityGrid> {
    let nodes = grid_nodes(step)?;
    Ok(normalise(DMatrix::zeros(nodes, nodes), step))
}

/// Piece-wise linear `α*(μ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaFunction {
    pub abscissae: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Set once the monotone post-processing has been applied.
    pub monotone: bool,
}

impl AlphaFunction {
    pub fn constant(alpha: f64) -> Self {
        AlphaFunction { abscissae: vec![0.0, 1.0], alphas: vec![alpha, alpha], monotone: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.abscissae.len() != self.alphas.len() {
            return Err(Error::LengthMismatch(self.abscissae.len(), self.alphas.len()));
        }
        if self.abscissae.is_empty() {
            return Err(Error::InvalidParams("empty alpha function".into()));
        }
        if self.abscissae.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParams("abscissae must be strictly increasing".into()));
        }
        if self.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidParams("alphas must lie in [0, 1]".into()));
        }
        if self.monotone && self.alphas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParams("monotone alpha function decreases".into()));
        }
        Ok(())
    }

    /// Linear interpolation, clamped at both ends.
    pub fn eval(&self, x: f64) -> f64 {
        let xs = &self.abscissae;
        let ys = &self.alphas;
        if x <= xs[0] {
            return ys[0];
        }
        if x >= xs[xs.len() - 1] {
            return ys[ys.len() - 1];
        }
        let k = xs.partition_point(|&v| v <= x) - 1;
        let t = (x - xs[k]) / (xs[k + 1] - xs[k]);
        ys[k] + t * (ys[k + 1] - ys[k])
    }

    /// Running maximum followed by a 3-bin moving average. A function already
    /// flagged monotone is returned unchanged.
    pub fn make_monotone(&self) -> AlphaFunction {
        if self.monotone {
            return self.clone();
        }
        let mut run = self.alphas.clone();
        for k in 1..run.len() {
            run[k] = run[k].max(run[k - 1]);
        }
        let n = run.len();
        let mut smooth: Vec<f64> = (0..n)
            .map(|k| {
                let lo = k.saturating_sub(1);
                let hi = (k + 1).min(n - 1);
                run[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
            })
            .collect();
        // the average of a non-decreasing run is non-decreasing up to rounding
        for k in 1..n {
            smooth[k] = smooth[k].max(smooth[k - 1]);
        }
        AlphaFunction { abscissae: self.abscissae.clone(), alphas: smooth, monotone: true }
    }
}

/// `α*(μ) = argmax_α p(α, μ)` per column; ties go to the smaller α.
pub fn extract_alpha_function(density: &JointDensityGrid, enforce_monotone: bool) -> AlphaFunction {
    let (rows, cols) = density.values.shape();
    let mut alphas = Vec::with_capacity(cols);
    for m in 0..cols {
        let mut best = 0;
        for k in 1..rows {
            if density.values[(k, m)] > density.values[(best, m)] {
                best = k;
            }
        }
        alphas.push(density.alpha_at(best).min(1.0));
    }
    let f = AlphaFunction { abscissae: (0..cols).map(|m| density.mu_at(m)).collect(), alphas, monotone: false };
    if enforce_monotone {
        f.make_monotone()
    } else {
        f
    }
}

/// `(1 − α*) raw + α* filtered`, with `α*` looked up at `x`.
pub fn fused_similarity(raw: f64, filtered: f64, x: f64, f: &AlphaFunction) -> f64 {
    let a = f.eval(x);
    (1.0 - a) * raw + a * filtered
}

/// Least-squares fit of `(1 + eᵃ) / (1 + e^{a/x})` to the function (abscissae ≤ 0 skipped).
pub fn fit_analytic(f: &AlphaFunction) -> f64 {
    let pts: Vec<(f64, f64)> = f.abscissae.iter().zip(&f.alphas).filter(|(x, _)| **x > 0.0).map(|(x, y)| (*x, *y)).collect();
    let cost = |a: f64| pts.iter().map(|(x, y)| (analytic(a, *x) - y).powi(2)).sum::<f64>();
    brent_minimize(cost, -20.0, 20.0, 1e-8)
}

/// `(1 + eᵃ) / (1 + e^{a/x})`, evaluated without overflow.
pub fn analytic(a: f64, x: f64) -> f64 {
    let ln_num = softplus(a);
    let ln_den = softplus(a / x);
    (ln_num - ln_den).exp()
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}
