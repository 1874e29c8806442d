//! Pose-clustered manifold matching under illumination change: a parallax
//! pose measure, 1-D pose clusters, the pose-specific illumination subspace,
//! Mahalanobis-constrained illumination correction, and per-pose likelihood
//! ratios fitted with a monotone RBF network.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::energy_rank;
use crate::linalg::{self, sym_eigen_desc};

pub const ILLUM_ENERGY: f64 = 0.9;
pub const REFERENCE_ENERGY: f64 = 0.95;
/// Noise variance as a fraction of the principal energy of a reference cluster.
pub const NOISE_OMEGA: f64 = 2.2e-4;
pub const RBF_TERMS: usize = 6;
const PARZEN_GRID: usize = 200;
const ENVELOPE_GRID: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Pose {
    Left,
    Front,
    Right,
}

impl Pose {
    pub const ALL: [Pose; 3] = [Pose::Left, Pose::Front, Pose::Right];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// `(x_e − x_n) / ‖e₁ − e₂‖` with `x_e`, `x_n` the x-coordinates of the eye and
/// nostril midpoints.
pub fn parallax_measure(eye1: [f64; 2], eye2: [f64; 2], nostril1: [f64; 2], nostril2: [f64; 2]) -> Result<f64> {
    let sep = (eye1[0] - eye2[0]).hypot(eye1[1] - eye2[1]);
    if !(sep > 0.0) {
        return Err(Error::CoincidentEyes);
    }
    let xe = 0.5 * (eye1[0] + eye2[0]);
    let xn = 0.5 * (nostril1[0] + nostril2[0]);
    Ok((xe - xn) / sep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseGaussian {
    pub mean: f64,
    pub std: f64,
}

impl PoseGaussian {
    fn log_density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        -0.5 * z * z - self.std.ln()
    }
}

/// Three 1-D Gaussians over the parallax measure, ordered by mean:
/// LEFT, FRONT, RIGHT.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseClusterModel {
    pub gaussians: [PoseGaussian; 3],
}

/// Three-cluster 1-D k-means (initialised at the 1/6, 1/2 and 5/6 quantiles,
/// so deterministic) and a Gaussian per cluster.
pub fn fit_pose_clusters(etas: &[f64]) -> Result<PoseClusterModel> {
    if etas.len() < 3 {
        return Err(Error::TooFewPoints { needed: 3, got: etas.len() });
    }
    let mut sorted = etas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |f: f64| sorted[((sorted.len() - 1) as f64 * f).round() as usize];
    let mut centres = [q(1.0 / 6.0), q(0.5), q(5.0 / 6.0)];
    let mut labels = vec![0usize; sorted.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (l, &x) in labels.iter_mut().zip(&sorted) {
            let best = (0..3).min_by(|&a, &b| (x - centres[a]).abs().total_cmp(&(x - centres[b]).abs())).unwrap();
            changed |= *l != best;
            *l = best;
        }
        for (c, centre) in centres.iter_mut().enumerate() {
            let members: Vec<f64> = sorted.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(x, _)| *x).collect();
            if !members.is_empty() {
                *centre = members.iter().sum::<f64>() / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    let mut gaussians = Vec::with_capacity(3);
    for c in 0..3 {
        let members: Vec<f64> = sorted.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(x, _)| *x).collect();
        if members.len() < 2 {
            return Err(Error::DegenerateCluster(c));
        }
        let mean = members.iter().sum::<f64>() / members.len() as f64;
        let var = members.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / members.len() as f64;
        if !(var > 0.0) {
            return Err(Error::DegenerateCluster(c));
        }
        gaussians.push(PoseGaussian { mean, std: var.sqrt() });
    }
    gaussians.sort_by(|a, b| a.mean.total_cmp(&b.mean));
    if gaussians.windows(2).any(|w| !(w[1].mean > w[0].mean)) {
        return Err(Error::DegenerateCluster(1));
    }
    let [a, b, c]: [PoseGaussian; 3] = gaussians.try_into().expect("three clusters");
    Ok(PoseClusterModel { gaussians: [a, b, c] })
}

/// Pose with the highest 1-D density; ties go to the lower-mean pose.
pub fn assign_pose(model: &PoseClusterModel, eta: f64) -> Pose {
    let mut best = 0;
    for k in 1..3 {
        if model.gaussians[k].log_density(eta) > model.gaussians[best].log_density(eta) {
            best = k;
        }
    }
    Pose::ALL[best]
}

/// Principal subspace of within-person scatter across illuminations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IlluminationSubspace {
    /// `D × k`, orthonormal columns.
    pub basis: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
    pub pose: Option<Pose>,
    /// The scatter was (numerically) zero; the single basis vector is arbitrary.
    pub degenerate: bool,
}

/// Leading eigenpairs of `Σ cᵢcᵢᵀ` over the given columns, through whichever
/// of the `D×D` scatter or the `N×N` Gram matrix is smaller.
fn scatter_eigen(cols: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (d, n) = cols.shape();
    if d <= n {
        return sym_eigen_desc(&(cols * cols.transpose()));
    }
    let (vals, vecs) = sym_eigen_desc(&(cols.transpose() * cols));
    let top = vals.get(0).copied().unwrap_or(0.0);
    let keep = vals.iter().take_while(|&&v| v > 1e-12 * top && v > 0.0).count();
    let mut basis = DMatrix::zeros(d, keep);
    for j in 0..keep {
        let mut u = cols * vecs.column(j) / vals[j].sqrt();
        linalg::canonical_sign(&mut u);
        basis.set_column(j, &u);
    }
    (DVector::from_iterator(keep, vals.iter().take(keep).copied()), basis)
}

/// `corpus[person][illumination]` is a list of frames of one pose.
pub fn learn_illumination_subspace(corpus: &[Vec<Vec<DVector<f64>>>], energy: f64) -> Result<IlluminationSubspace> {
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(Error::InvalidParams(format!("energy fraction {energy} outside (0, 1]")));
    }
    let multi = corpus.iter().any(|p| p.iter().filter(|s| !s.is_empty()).count() >= 2);
    if !multi {
        return Err(Error::SingleIllumination);
    }
    let dim = corpus.iter().flatten().flatten().next().map(|x| x.len()).unwrap_or(0);
    let mut cols: Vec<DVector<f64>> = Vec::new();
    let mut raw_energy = 0.0;
    for person in corpus {
        let frames: Vec<&DVector<f64>> = person.iter().flatten().collect();
        if frames.is_empty() {
            continue;
        }
        if let Some(x) = frames.iter().find(|x| x.len() != dim) {
            return Err(Error::DimensionMismatch(dim, x.len()));
        }
        let owned: Vec<DVector<f64>> = frames.iter().map(|x| (*x).clone()).collect();
        raw_energy += owned.iter().map(|x| x.norm_squared()).sum::<f64>();
        let mean = linalg::mean(&owned);
        cols.extend(owned.into_iter().map(|x| x - &mean));
    }
    let (vals, vecs) = scatter_eigen(&linalg::columns_to_matrix(dim, &cols));
    let total: f64 = vals.iter().map(|v| v.max(0.0)).sum();
    // scatter at rounding level relative to the frames themselves counts as none
    if vals.is_empty() || total <= 1e-24 * raw_energy.max(1e-300) {
        let mut basis = DMatrix::zeros(dim, 1);
        basis[(0, 0)] = 1.0;
        return Ok(IlluminationSubspace { basis, eigenvalues: DVector::zeros(1), pose: None, degenerate: true });
    }
    let k = energy_rank(vals.as_slice(), energy).max(1);
    Ok(IlluminationSubspace {
        basis: vecs.columns(0, k).into_owned(),
        eigenvalues: DVector::from_iterator(k, vals.iter().take(k).map(|v| v.max(0.0))),
        pose: None,
        degenerate: false,
    })
}

/// Gaussian of a reference pose cluster in factored form: principal basis
/// `V_P` with variances `λ`, isotropic `noise` variance on the complement
/// (`None` restricts the metric to the principal block).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCluster {
    pub mean: DVector<f64>,
    pub basis: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
    pub noise: Option<f64>,
}

impl ReferenceCluster {
    /// Principal subspace holding `energy` of the cluster variance, noise
    /// `ω Σ λᵢ` over the principal eigenvalues.
    pub fn from_frames(frames: &[DVector<f64>], energy: f64, omega: f64) -> Result<ReferenceCluster> {
        if frames.len() < 2 {
            return Err(Error::TooFewPoints { needed: 2, got: frames.len() });
        }
        let mean = linalg::mean(frames);
        let cols: Vec<DVector<f64>> = frames.iter().map(|x| x - &mean).collect();
        let (vals, vecs) = scatter_eigen(&linalg::columns_to_matrix(mean.len(), &cols));
        let vals = vals / frames.len() as f64;
        let k = energy_rank(vals.as_slice(), energy);
        if k == 0 {
            return Err(Error::SingularCovariance);
        }
        let eigenvalues = DVector::from_iterator(k, vals.iter().take(k).copied());
        let noise = omega * eigenvalues.sum();
        let noise = (noise > 0.0 && k < mean.len()).then_some(noise);
        Ok(ReferenceCluster { mean, basis: vecs.columns(0, k).into_owned(), eigenvalues, noise })
    }

    /// `B₂ Λ₂⁻¹ B₂ᵀ v`.
    pub fn precision_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let c = self.basis.tr_mul(v);
        let scaled = c.component_div(&self.eigenvalues);
        let mut out = &self.basis * scaled;
        if let Some(n) = self.noise {
            out += (v - &self.basis * c) / n;
        }
        out
    }

    fn precision_apply_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for j in 0..m.ncols() {
            out.set_column(j, &self.precision_apply(&m.column(j).into_owned()));
        }
        out
    }

    /// Mahalanobis objective `(y − mean)ᵀ B₂Λ₂⁻¹B₂ᵀ (y − mean)`.
    pub fn objective(&self, y: &DVector<f64>) -> f64 {
        let r = y - &self.mean;
        r.dot(&self.precision_apply(&r))
    }
}

/// Adds the illumination-subspace vector `B_I a*` that brings `x` closest to the
/// reference mean in the reference cluster's Mahalanobis metric. Returns the
/// corrected frame and `a*`.
pub fn mahalanobis_illum_correct(
    x: &DVector<f64>,
    b_i: &DMatrix<f64>,
    reference: &ReferenceCluster,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let d = reference.mean.len();
    if x.len() != d {
        return Err(Error::DimensionMismatch(d, x.len()));
    }
    if b_i.nrows() != d {
        return Err(Error::DimensionMismatch(d, b_i.nrows()));
    }
    if reference.eigenvalues.iter().any(|&l| !(l > 0.0)) || reference.noise.is_some_and(|n| !(n > 0.0)) {
        return Err(Error::InvalidParams("reference variances must be positive".into()));
    }
    let pb = reference.precision_apply_matrix(b_i);
    let normal = b_i.tr_mul(&pb);
    let rhs = pb.tr_mul(&(&reference.mean - x));
    let (vals, _) = sym_eigen_desc(&normal);
    let k = normal.nrows();
    if k == 0 || !(vals[k - 1] > 1e-12 * vals[0].abs()) {
        return Err(Error::SingularNormalEquations);
    }
    let a = normal.cholesky().ok_or(Error::SingularNormalEquations)?.solve(&rhs);
    Ok((x + b_i * &a, a))
}

/// Illumination-corrects every frame of `novel` against `reference`.
pub fn correct_cluster(novel: &[DVector<f64>], b_i: &DMatrix<f64>, reference: &ReferenceCluster) -> Result<Vec<DVector<f64>>> {
    novel.iter().map(|x| mahalanobis_illum_correct(x, b_i, reference).map(|(y, _)| y)).collect()
}

/// Euclidean distance between the cluster centres.
pub fn pose_cluster_distance(c1: &[DVector<f64>], c2: &[DVector<f64>]) -> Result<f64> {
    if c1.is_empty() || c2.is_empty() {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    let (m1, m2) = (linalg::mean(c1), linalg::mean(c2));
    if m1.len() != m2.len() {
        return Err(Error::DimensionMismatch(m1.len(), m2.len()));
    }
    Ok((m1 - m2).norm())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfTerm {
    pub weight: f64,
    pub centre: f64,
    pub spread: f64,
}

/// `μ̂(D) = bias + Σ αⱼ G(D; μⱼ, σⱼ)`, optionally replaced by its monotone
/// envelope `max_{δ ≥ D} μ̂(δ)`, clipped at zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodRatioModel {
    pub terms: Vec<RbfTerm>,
    pub bias: f64,
    pub monotone: bool,
    /// Envelope samples on a regular grid starting at `grid_start`.
    pub grid_start: f64,
    pub grid_step: f64,
    pub envelope: Vec<f64>,
}

impl LikelihoodRatioModel {
    pub fn constant(value: f64) -> Self {
        LikelihoodRatioModel { terms: Vec::new(), bias: value, monotone: true, grid_start: 0.0, grid_step: 1.0, envelope: vec![value] }
    }

    /// The raw network output.
    pub fn rbf(&self, d: f64) -> f64 {
        self.bias + self.terms.iter().map(|t| t.weight * gauss(d, t.centre, t.spread)).sum::<f64>()
    }

    fn build_envelope(&mut self, lo: f64, hi: f64) {
        let step = (hi - lo) / (ENVELOPE_GRID - 1) as f64;
        let mut env: Vec<f64> = (0..ENVELOPE_GRID).map(|k| self.rbf(lo + k as f64 * step).max(0.0)).collect();
        for k in (0..ENVELOPE_GRID - 1).rev() {
            env[k] = env[k].max(env[k + 1]);
        }
        self.grid_start = lo;
        self.grid_step = step;
        self.envelope = env;
    }
}

fn gauss(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Likelihood ratio at distance `d`. The monotone form interpolates the
/// envelope linearly and is constant outside its grid.
pub fn evaluate_lr(model: &LikelihoodRatioModel, d: f64) -> f64 {
    if !model.monotone {
        return model.rbf(d).max(0.0);
    }
    let env = &model.envelope;
    let t = (d - model.grid_start) / model.grid_step;
    if !(t > 0.0) {
        return env[0];
    }
    if t >= (env.len() - 1) as f64 {
        return env[env.len() - 1];
    }
    let k = t.floor() as usize;
    let f = t - k as f64;
    env[k] + f * (env[k + 1] - env[k])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrConfig {
    pub terms: usize,
    /// RBF spread; defaults to the spacing of the (evenly spaced) centres.
    pub spread: Option<f64>,
    pub monotone: bool,
}

impl Default for LrConfig {
    fn default() -> Self {
        LrConfig { terms: RBF_TERMS, spread: None, monotone: true }
    }
}

/// Silverman's rule of thumb bandwidth.
pub fn silverman_bandwidth(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let quantile = |f: f64| {
        let pos = f * (s.len() - 1) as f64;
        let k = pos.floor() as usize;
        let r = pos - k as f64;
        if k + 1 < s.len() {
            s[k] + r * (s[k + 1] - s[k])
        } else {
            s[k]
        }
    };
    let iqr = quantile(0.75) - quantile(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

pub fn parzen_density(samples: &[f64], h: f64, x: f64) -> f64 {
    samples.iter().map(|s| gauss(x, *s, h)).sum::<f64>() / samples.len() as f64
}

/// Parzen estimate of `p(D|same)/p(D|different)`, RBF fit to its local peaks,
/// then the monotone envelope.
pub fn fit_likelihood_ratio(intra: &[f64], inter: &[f64], cfg: &LrConfig) -> Result<LikelihoodRatioModel> {
    if intra.is_empty() {
        return Err(Error::NoPositives);
    }
    if inter.is_empty() {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    if cfg.terms == 0 {
        return Err(Error::InvalidParams("at least one RBF term is needed".into()));
    }
    let all: Vec<f64> = intra.iter().chain(inter).copied().collect();
    if all.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidParams("distances must be finite".into()));
    }
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { lo.abs().max(1.0) };
    let bandwidth = |xs: &[f64]| {
        let h = silverman_bandwidth(xs);
        if h > 0.0 {
            h
        } else {
            1e-2 * range
        }
    };
    let (hs, hn) = (bandwidth(intra), bandwidth(inter));
    let grid: Vec<f64> = (0..PARZEN_GRID).map(|k| lo + range * k as f64 / (PARZEN_GRID - 1) as f64).collect();
    let ps: Vec<f64> = grid.iter().map(|&x| parzen_density(intra, hs, x)).collect();
    let pn: Vec<f64> = grid.iter().map(|&x| parzen_density(inter, hn, x)).collect();
    let eps = 1e-9 * ps.iter().chain(&pn).copied().fold(0.0, f64::max);
    let ratio: Vec<f64> = ps.iter().zip(&pn).map(|(s, n)| (s + eps) / (n + eps)).collect();
    let peaks: Vec<(f64, f64)> = (0..grid.len())
        .filter(|&k| (k == 0 || ratio[k] >= ratio[k - 1]) && (k + 1 == grid.len() || ratio[k] >= ratio[k + 1]))
        .map(|k| (grid[k], ratio[k]))
        .collect();

    let m = cfg.terms;
    let centres: Vec<f64> =
        if m == 1 { vec![lo + 0.5 * range] } else { (0..m).map(|j| lo + range * j as f64 / (m - 1) as f64).collect() };
    let spread = cfg.spread.unwrap_or(if m == 1 { range } else { range / (m - 1) as f64 });
    if !(spread > 0.0) {
        return Err(Error::InvalidParams("RBF spread must be positive".into()));
    }
    // ridge-regularised least squares for the output weights
    let design = DMatrix::from_fn(peaks.len(), m, |r, c| gauss(peaks[r].0, centres[c], spread));
    let target = DVector::from_iterator(peaks.len(), peaks.iter().map(|p| p.1));
    let mut normal = design.tr_mul(&design);
    let ridge = 1e-10 * normal.trace().max(1e-300);
    for i in 0..m {
        normal[(i, i)] += ridge;
    }
    let weights = normal.cholesky().ok_or(Error::SingularNormalEquations)?.solve(&design.tr_mul(&target));
    let mut model = LikelihoodRatioModel {
        terms: (0..m).map(|j| RbfTerm { weight: weights[j], centre: centres[j], spread }).collect(),
        bias: 0.0,
        monotone: cfg.monotone,
        grid_start: 0.0,
        grid_step: 1.0,
        envelope: Vec::new(),
    };
    model.build_envelope(lo - 3.0 * spread, hi + 3.0 * spread);
    Ok(model)
}

/// Product of per-pose likelihood ratios over the poses with a distance.
pub fn combined_score(models: &[LikelihoodRatioModel; 3], distances: &[Option<f64>; 3]) -> f64 {
    models.iter().zip(distances).filter_map(|(m, d)| d.map(|d| evaluate_lr(m, d))).product()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn frontal_symmetric_layout_is_zero() {
        let eta = parallax_measure([-10.0, 0.0], [10.0, 0.0], [-3.0, 15.0], [3.0, 15.0]).unwrap();
        assert_eq!(eta, 0.0);
        assert!(matches!(parallax_measure([1.0, 1.0], [1.0, 1.0], [0.0, 0.0], [0.0, 0.0]), Err(Error::CoincidentEyes)));
    }

    #[test]
    fn parallax_similarity_invariance() {
        let (e1, e2, n1, n2) = ([31.0, 40.0], [57.0, 42.0], [40.0, 60.0], [50.0, 61.0]);
        let base = parallax_measure(e1, e2, n1, n2).unwrap();
        let s = |p: [f64; 2]| [2.0 * p[0], 2.0 * p[1]];
        assert_eq!(parallax_measure(s(e1), s(e2), s(n1), s(n2)).unwrap(), base);
        let t = |p: [f64; 2]| [p[0] + 16.0, p[1] - 8.0];
        assert_eq!(parallax_measure(t(e1), t(e2), t(n1), t(n2)).unwrap(), base);
        // oracle: the printed ratio by hand
        let oracle = ((31.0 + 57.0) / 2.0 - (40.0 + 50.0) / 2.0) / (26.0f64 * 26.0 + 4.0).sqrt();
        assert!((base - oracle).abs() < 1e-15);
    }

    fn planted_etas(rng: &mut Rng) -> (Vec<f64>, Vec<usize>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (label, centre) in [(0usize, -0.3), (1, 0.0), (2, 0.3)] {
            for _ in 0..40 {
                xs.push(centre + 0.03 * rng.normal());
                ys.push(label);
            }
        }
        (xs, ys)
    }

    #[test]
    fn planted_pose_clusters_recovered() {
        let (xs, ys) = planted_etas(&mut Rng::new(1));
        let m = fit_pose_clusters(&xs).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert_eq!(assign_pose(&m, *x), Pose::ALL[*y]);
        }
        for (k, g) in m.gaussians.iter().enumerate() {
            assert_eq!(assign_pose(&m, g.mean), Pose::ALL[k]);
        }
    }

    #[test]
    fn tie_goes_to_lower_mean() {
        let g = |mean| PoseGaussian { mean, std: 0.1 };
        let m = PoseClusterModel { gaussians: [g(-1.0), g(0.0), g(1.0)] };
        assert_eq!(assign_pose(&m, -0.5), Pose::Left);
        assert_eq!(assign_pose(&m, 0.5), Pose::Front);
    }

    #[test]
    fn degenerate_pose_clusters() {
        assert!(matches!(fit_pose_clusters(&[0.0, 1.0]), Err(Error::TooFewPoints { .. })));
        assert!(matches!(fit_pose_clusters(&[0.0, 0.0, 0.0, 1.0, 2.0]), Err(Error::DegenerateCluster(_))));
    }

    fn illum_corpus(rng: &mut Rng, dirs: &DMatrix<f64>, persons: usize, noise: f64) -> Vec<Vec<Vec<DVector<f64>>>> {
        let d = dirs.nrows();
        (0..persons)
            .map(|_| {
                let identity = DVector::from_fn(d, |_, _| rng.normal());
                (0..4)
                    .map(|_| {
                        let light = DVector::from_fn(dirs.ncols(), |_, _| 3.0 * rng.normal());
                        (0..10).map(|_| &identity + dirs * &light + DVector::from_fn(d, |_, _| noise * rng.normal())).collect()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn planted_illumination_plane_recovered() {
        let mut rng = Rng::new(2);
        let dirs = crate::linalg::orthonormal_columns(&DMatrix::from_fn(20, 2, |_, _| rng.normal()), 1e-10);
        let corpus = illum_corpus(&mut rng, &dirs, 5, 0.01);
        let s = learn_illumination_subspace(&corpus, ILLUM_ENERGY).unwrap();
        assert_eq!(s.basis.ncols(), 2);
        // largest principal angle between the learnt basis and the plant
        let (_, sv, _) = crate::linalg::svd_desc(&(s.basis.transpose() * &dirs));
        let worst = sv[sv.len() - 1].min(1.0).acos().to_degrees();
        assert!(worst < 5.0, "{worst}°");
        let full = learn_illumination_subspace(&corpus, 1.0).unwrap();
        // rank: 5 persons × 40 frames centred per person, in 20 dimensions
        assert_eq!(full.basis.ncols(), 20);
    }

    #[test]
    fn constant_frames_give_degenerate_subspace() {
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let corpus = vec![vec![vec![x.clone(); 3], vec![x.clone(); 2]]];
        let s = learn_illumination_subspace(&corpus, ILLUM_ENERGY).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.basis.ncols(), 1);
        assert_eq!(s.eigenvalues[0], 0.0);
    }

    #[test]
    fn single_illumination_rejected() {
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let corpus = vec![vec![vec![x.clone(); 3]], vec![vec![x; 3], vec![]]];
        assert!(matches!(learn_illumination_subspace(&corpus, 0.9), Err(Error::SingleIllumination)));
    }

    fn isotropic_reference(mean: Vec<f64>, var: f64) -> ReferenceCluster {
        let d = mean.len();
        ReferenceCluster {
            mean: DVector::from_vec(mean),
            basis: DMatrix::identity(d, d),
            eigenvalues: DVector::from_element(d, var),
            noise: None,
        }
    }

    #[test]
    fn correction_at_reference_mean_is_identity() {
        let r = isotropic_reference(vec![1.0, -2.0, 0.5], 2.0);
        let b = DMatrix::from_column_slice(3, 1, &[0.6, 0.8, 0.0]);
        let (y, a) = mahalanobis_illum_correct(&r.mean, &b, &r).unwrap();
        assert_eq!(a[0], 0.0);
        assert_eq!(y, r.mean);
    }

    #[test]
    fn correction_matches_scalar_least_squares() {
        let r = isotropic_reference(vec![3.0, 1.0], 0.7);
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let x = DVector::from_vec(vec![-1.5, 4.0]);
        let (y, a) = mahalanobis_illum_correct(&x, &b, &r).unwrap();
        // d/dt [(x₁ + t − m₁)² + (x₂ − m₂)²] = 0  ⇒  t = m₁ − x₁
        assert!((a[0] - 4.5).abs() < 1e-12);
        assert!((y[0] - 3.0).abs() < 1e-12 && y[1] == 4.0);
    }

    #[test]
    fn singular_normal_equations() {
        let r = isotropic_reference(vec![0.0, 0.0], 1.0);
        let b = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        assert!(matches!(mahalanobis_illum_correct(&r.mean, &b, &r), Err(Error::SingularNormalEquations)));
    }

    #[test]
    fn cluster_distance_basics() {
        let a = vec![DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![2.0, 0.0])];
        let b = vec![DVector::from_vec(vec![1.0, 1.0])];
        assert_eq!(pose_cluster_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(pose_cluster_distance(&a, &b).unwrap(), 1.0);
        assert_eq!(pose_cluster_distance(&a, &b).unwrap(), pose_cluster_distance(&b, &a).unwrap());
        assert!(pose_cluster_distance(&a, &[]).is_err());
    }

    fn toy_distances(rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        let intra = (0..200).map(|_| (2.0 + rng.normal()).abs()).collect();
        let inter = (0..400).map(|_| (8.0 + 1.5 * rng.normal()).abs()).collect();
        (intra, inter)
    }

    #[test]
    fn likelihood_ratio_favours_small_distances() {
        let (intra, inter) = toy_distances(&mut Rng::new(3));
        let m = fit_likelihood_ratio(&intra, &inter, &LrConfig::default()).unwrap();
        assert_eq!(m.terms.len(), RBF_TERMS);
        assert!(evaluate_lr(&m, 1.5) > evaluate_lr(&m, 9.0));
        let grid: Vec<f64> = (0..500).map(|k| -5.0 + 0.05 * k as f64).collect();
        let vals: Vec<f64> = grid.iter().map(|&d| evaluate_lr(&m, d)).collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn missing_pose_skipped_and_neutral_element() {
        let one = LikelihoodRatioModel::constant(1.0);
        let ms = [one.clone(), one.clone(), one];
        assert_eq!(combined_score(&ms, &[Some(3.0), Some(0.5), Some(100.0)]), 1.0);
        let two = LikelihoodRatioModel::constant(2.0);
        let three = LikelihoodRatioModel::constant(3.0);
        let five = LikelihoodRatioModel::constant(5.0);
        assert_eq!(combined_score(&[two, three, five], &[Some(1.0), None, Some(1.0)]), 10.0);
    }

    #[test]
    fn silverman_matches_formula() {
        let xs: Vec<f64> = (0..100).map(|k| k as f64).collect();
        let sd = (xs.iter().map(|x| (x - 49.5f64).powi(2)).sum::<f64>() / 99.0).sqrt();
        let iqr = 74.25 - 24.75;
        let oracle = 0.9 * sd.min(iqr / 1.34) * 100f64.powf(-0.2);
        assert!((silverman_bandwidth(&xs) - oracle).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn correction_is_local_minimum(seed in 0u64..10_000) {
            let mut rng = Rng::new(seed);
            let d = 6;
            let frames: Vec<DVector<f64>> = (0..30).map(|_| DVector::from_fn(d, |i, _| (i + 1) as f64 * rng.normal())).collect();
            let r = ReferenceCluster::from_frames(&frames, 0.8, 0.05).unwrap();
            let b = crate::linalg::orthonormal_columns(&DMatrix::from_fn(d, 2, |_, _| rng.normal()), 1e-10);
            let x = DVector::from_fn(d, |_, _| 3.0 * rng.normal());
            let (_, a) = mahalanobis_illum_correct(&x, &b, &r).unwrap();
            let obj = |a: &DVector<f64>| r.objective(&(&x + &b * a));
            let best = obj(&a);
            for _ in 0..100 {
                let mut delta = DVector::from_fn(2, |_, _| rng.normal());
                delta *= 1e-3 / delta.norm();
                prop_assert!(obj(&(&a + delta)) >= best - 1e-12 * best.abs().max(1.0));
            }
        }

        #[test]
        fn parallax_translation_scale_exact(tx in -100i32..100, ty in -100i32..100, sexp in -3i32..4) {
            let s = 2f64.powi(sexp);
            let pts = [[31.0, 40.0], [57.0, 42.0], [40.0, 60.0], [50.0, 61.0]];
            let base = parallax_measure(pts[0], pts[1], pts[2], pts[3]).unwrap();
            let f = |p: [f64; 2]| [s * p[0] + tx as f64, s * p[1] + ty as f64];
            let moved = parallax_measure(f(pts[0]), f(pts[1]), f(pts[2]), f(pts[3])).unwrap();
            prop_assert_eq!(moved, base);
        }

        #[test]
        fn lr_envelope_non_increasing(seed in 0u64..10_000) {
            let (intra, inter) = toy_distances(&mut Rng::new(seed));
            let m = fit_likelihood_ratio(&intra, &inter, &LrConfig::default()).unwrap();
            let mut prev = f64::INFINITY;
            for k in 0..300 {
                let v = evaluate_lr(&m, -2.0 + 0.05 * k as f64);
                prop_assert!(v <= prev && v >= 0.0);
                prev = v;
            }
        }
    }
}
