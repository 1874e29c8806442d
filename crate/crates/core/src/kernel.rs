//! Kernel PCA unfolding, RANSAC outlier rejection, affine repopulation and
//! the robust kernel RAD set distance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{image_to_vector, FaceSet};
use crate::divergence::{kl_gaussian, rad};
use crate::error::{Error, Result};
use crate::gmm::{energy_rank, ppca_from_scatter, GaussianComponent};
use crate::linalg::{self, sym_eigen_desc};
use crate::rng::Rng;

pub const DEFAULT_GAMMA: f64 = 0.380;
pub const DEFAULT_DIM: usize = 20;
pub const DEFAULT_RANSAC_LIMIT: usize = 100;
/// Relative eigenvalue cut below which kernel directions count as numerically absent.
const EIG_REL_TOL: f64 = 1e-10;
/// Median of the χ² distribution with one degree of freedom.
const CHI2_1_MEDIAN: f64 = 0.454_936_423_119_572_7;

pub fn rbf(a: &DVector<f64>, b: &DVector<f64>, gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KpcaModel {
    pub support_points: Vec<DVector<f64>>,
    /// `N × d`; column `j` is `u_j / √λ_j`.
    pub alphas: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
    pub gamma: f64,
    pub row_means: DVector<f64>,
    pub grand_mean: f64,
}

impl KpcaModel {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    fn project_from_row(&self, k: &DVector<f64>) -> DVector<f64> {
        let km = k.mean();
        let kc = DVector::from_fn(k.len(), |m, _| k[m] - km - self.row_means[m] + self.grand_mean);
        self.alphas.tr_mul(&kc)
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidParams(format!("kernel gamma must be positive, got {gamma}")));
    }
    Ok(())
}

fn kernel_matrix(data: &[DVector<f64>], gamma: f64) -> DMatrix<f64> {
    let n = data.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in 0..i {
            let v = rbf(&data[i], &data[j], gamma);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Kernel PCA from a precomputed kernel matrix over `support`.
fn kpca_from_kernel(support: Vec<DVector<f64>>, k: &DMatrix<f64>, dim: usize, gamma: f64) -> Result<KpcaModel> {
    let n = k.nrows();
    let row_means = DVector::from_fn(n, |i, _| k.row(i).mean());
    let grand = row_means.mean();
    let kc = DMatrix::from_fn(n, n, |i, j| k[(i, j)] - row_means[i] - row_means[j] + grand);
    let (vals, vecs) = sym_eigen_desc(&kc);
    let top = vals.iter().cloned().fold(0.0, f64::max);
    let keep = vals.iter().take(dim).take_while(|&&v| v > EIG_REL_TOL * top && v > 1e-300).count();
    if keep == 0 {
        return Err(Error::RankDeficient(0));
    }
    let eigenvalues = DVector::from_iterator(keep, vals.iter().take(keep).cloned());
    let alphas = DMatrix::from_fn(n, keep, |m, j| vecs[(m, j)] / eigenvalues[j].sqrt());
    Ok(KpcaModel { support_points: support, alphas, eigenvalues, gamma, row_means, grand_mean: grand })
}

/// RBF kernel PCA with double centring. Keeps at most `dim` components; fewer
/// when the centred kernel has lower numerical rank.
pub fn kpca_fit(data: &[DVector<f64>], dim: usize, gamma: f64) -> Result<KpcaModel> {
    check_gamma(gamma)?;
    if dim == 0 {
        return Err(Error::InvalidParams("kpca dimension must be at least 1".into()));
    }
    if data.len() < dim {
        return Err(Error::TooFewPoints { needed: dim, got: data.len() });
    }
    let k = kernel_matrix(data, gamma);
    kpca_from_kernel(data.to_vec(), &k, dim, gamma)
}

pub fn kpca_project(model: &KpcaModel, x: &DVector<f64>) -> DVector<f64> {
    let k = DVector::from_iterator(model.support_points.len(), model.support_points.iter().map(|s| rbf(s, x, model.gamma)));
    model.project_from_row(&k)
}

/// Default Mahalanobis radius for a model of `dim` components: √ of the 0.999
/// quantile of χ² with `dim + 1` degrees of freedom (Wilson-Hilferty).
pub fn default_threshold(dim: usize) -> f64 {
    let k = (dim + 1) as f64;
    let z = 3.090_232_306_167_813_5;
    let a = 2.0 / (9.0 * k);
    (k * (1.0 - a + z * a.sqrt()).powi(3)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    /// Mahalanobis radius; `None` picks [`default_threshold`].
    pub threshold: Option<f64>,
    pub limit: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig { threshold: None, limit: DEFAULT_RANSAC_LIMIT }
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mahalanobis distances to the projection-space origin under a model fitted on
/// the points `subset` of the kernel matrix `k_all`.
///
/// A minimal sample gives a very poor variance estimate, so each coordinate is
/// scaled robustly instead: by the median of its squares over all points,
/// matched to the χ²₁ median.
fn consensus_distances(k_all: &DMatrix<f64>, subset: &[usize], model: &KpcaModel) -> Vec<f64> {
    let n = k_all.nrows();
    let d = model.dim();
    let mut coords: Vec<Vec<f64>> = vec![Vec::with_capacity(n); d];
    for i in 0..n {
        let k = DVector::from_iterator(subset.len(), subset.iter().map(|&m| k_all[(i, m)]));
        let a = model.project_from_row(&k);
        for j in 0..d {
            coords[j].push(a[j] * a[j]);
        }
    }
    let scales: Vec<f64> = coords
        .iter()
        .map(|c| {
            let mean = c.iter().sum::<f64>() / n as f64;
            (median(c) / CHI2_1_MEDIAN).max(1e-12 * mean).max(1e-300)
        })
        .collect();
    (0..n).map(|i| coords.iter().zip(&scales).map(|(c, s)| c[i] / s).sum::<f64>().sqrt()).collect()
}

const LOCAL_STEPS: usize = 10;

/// RANSAC kernel PCA: minimal samples of `dim + 1` points, consensus by
/// Mahalanobis radius, refit on the largest consensus set.

pub fn ransac_kpca(
    data: &[DVector<f64>],
    dim: usize,
    gamma: f64,
    cfg: &RansacConfig,
    rng: &mut Rng,
) -> Result<(KpcaModel, Vec<bool>)> {
    check_gamma(gamma)?;
    if cfg.limit == 0 {
        return Err(Error::InvalidParams("ransac limit must be at least 1".into()));
    }
    let n = data.len();
    let minimal = dim + 1;
    if n < minimal {
        return Err(Error::TooFewPoints { needed: minimal, got: n });
    }
    let threshold = cfg.threshold.unwrap_or_else(|| default_threshold(dim));
    let k_all = kernel_matrix(data, gamma);
    let fit = |idx: &[usize]| {
        let k_sub = DMatrix::from_fn(idx.len(), idx.len(), |i, j| k_all[(idx[i], idx[j])]);
        kpca_from_kernel(idx.iter().map(|&i| data[i].clone()).collect(), &k_sub, dim, gamma)
    };
    let consensus = |idx: &[usize], model: &KpcaModel| -> Vec<usize> {
        let d = consensus_distances(&k_all, idx, model);
        (0..n).filter(|&i| d[i] < threshold).collect()
    };
    let mut best: Option<(Vec<usize>, KpcaModel)> = None;
    for _ in 0..cfg.limit {
        let mut subset = rng.sample_indices(n, minimal);
        subset.sort_unstable();
        let Ok(model) = fit(&subset) else { continue };
        let mut inliers = consensus(&subset, &model);
        if best.as_ref().is_some_and(|(b, _)| inliers.len() <= b.len()) {
            continue;
        }
        // Local optimisation: refit on the consensus set until it stops changing.
        // A minimal sample containing outliers can inflate the metric enough to
        // accept everything; the refit on that set rejects them again.
        let mut model = model;
        for _ in 0..LOCAL_STEPS {
            if inliers.len() < minimal {
                break;
            }
            let Ok(refit) = fit(&inliers) else { break };
            let next = consensus(&inliers, &refit);
            let done = next == inliers;
            model = refit;
            inliers = next;
            if done {
                break;
            }
        }
        if best.as_ref().is_none_or(|(b, _)| inliers.len() > b.len()) {
            best = Some((inliers, model));
        }
    }
    let (inliers, model) = best.ok_or(Error::NoConsensus)?;
    if inliers.len() < minimal {
        return Err(Error::NoConsensus);
    }
    let mut flags = vec![false; n];
    for &i in &inliers {
        flags[i] = true;
    }
    Ok((model, flags))
}

/// Standard deviations of the random affine warp parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffinePerturbation {
    /// Rotation, degrees.
    pub sigma_theta: f64,
    /// Translation, pixels.
    pub sigma_t: f64,
    pub sigma_k: f64,
    pub sigma_s: f64,
}

impl Default for AffinePerturbation {
    fn default() -> Self {
        AffinePerturbation { sigma_theta: 3.0, sigma_t: 1.5, sigma_k: 0.05, sigma_s: 0.05 }
    }
}

impl AffinePerturbation {
    pub fn zero() -> Self {
        AffinePerturbation { sigma_theta: 0.0, sigma_t: 0.0, sigma_k: 0.0, sigma_s: 0.0 }
    }
}

fn reflect_coord(v: f64, n: usize) -> f64 {
    let n = n as f64;
    if n <= 1.0 {
        return 0.0;
    }
    // reflect about -0.5 and n-0.5 (half-sample symmetric)
    let period = 2.0 * n;
    let mut m = (v + 0.5).rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    (m - 0.5).clamp(0.0, n - 1.0)
}

fn bilinear(img: &DMatrix<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.shape();
    let y = reflect_coord(y, h);
    let x = reflect_coord(x, w);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let top = img[(y0, x0)] * (1.0 - fx) + img[(y0, x1)] * fx;
    let bot = img[(y1, x0)] * (1.0 - fx) + img[(y1, x1)] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Warps `img` by `p' = R(θ) K(k) S(1+sx, 1+sy) (p − c) + c + t` (inverse mapping, bilinear).
pub fn affine_warp(img: &DMatrix<f64>, theta: f64, t: (f64, f64), k: f64, s: (f64, f64)) -> DMatrix<f64> {
    let (c, sn) = (theta.cos(), theta.sin());
    let r = nalgebra::Matrix2::new(c, -sn, sn, c);
    let shear = nalgebra::Matrix2::new(1.0, k, 0.0, 1.0);
    let scale = nalgebra::Matrix2::new(1.0 + s.0, 0.0, 0.0, 1.0 + s.1);
    let a = r * shear * scale;
    let inv = a.try_inverse().unwrap_or(nalgebra::Matrix2::identity());
    let (h, w) = img.shape();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    DMatrix::from_fn(h, w, |y, x| {
        let q = nalgebra::Vector2::new(x as f64 - cx - t.0, y as f64 - cy - t.1);
        let src = inv * q;
        bilinear(img, src.y + cy, src.x + cx)
    })
}

/// Appends `per_face` randomly warped copies of every frame after the originals.
pub fn affine_repopulate(faces: &FaceSet, per_face: usize, pert: &AffinePerturbation, rng: &mut Rng) -> FaceSet {
    let mut out = faces.clone();
    for i in 0..faces.len() {
        let img = faces.image(i);
        for _ in 0..per_face {
            let theta = pert.sigma_theta.to_radians() * rng.normal();
            let t = (pert.sigma_t * rng.normal(), pert.sigma_t * rng.normal());
            let k = pert.sigma_k * rng.normal();
            let s = (pert.sigma_s * rng.normal(), pert.sigma_s * rng.normal());
            out.frames.push(image_to_vector(&affine_warp(&img, theta, t, k, s)));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KpcaParams {
    pub gamma: f64,
    pub dim: usize,
}

impl Default for KpcaParams {
    fn default() -> Self {
        KpcaParams { gamma: DEFAULT_GAMMA, dim: DEFAULT_DIM }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RepopulateConfig {
    pub per_face: usize,
    pub perturbation: AffinePerturbation,
}

impl Default for RepopulateConfig {
    fn default() -> Self {
        RepopulateConfig { per_face: 0, perturbation: AffinePerturbation::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelRadConfig {
    pub kpca: KpcaParams,
    pub ransac: RansacConfig,
    pub repopulate: RepopulateConfig,
    /// Energy fraction for the PPCA principal subspace of each projected set.
    pub ppca_energy: f64,
}

impl Default for KernelRadConfig {
    fn default() -> Self {
        KernelRadConfig {
            kpca: KpcaParams::default(),
            ransac: RansacConfig::default(),
            repopulate: RepopulateConfig::default(),
            ppca_energy: 0.85,
        }
    }
}

/// Single Gaussian with PPCA covariance fitted to projected points.
pub fn ppca_gaussian(points: &[DVector<f64>], energy: f64) -> GaussianComponent {
    let mu = linalg::mean(points);
    let s = linalg::covariance(points, &mu);
    let (vals, _) = sym_eigen_desc(&s);
    let d = mu.len();
    let q = energy_rank(vals.as_slice(), energy).clamp(usize::from(d > 1), d.saturating_sub(1));
    GaussianComponent { prior: 1.0, mean: mu, cov: ppca_from_scatter(&s, q) }
}

fn set_order(a: &FaceSet, b: &FaceSet) -> std::cmp::Ordering {
    for (x, y) in a.frames.iter().zip(&b.frames) {
        let o = linalg::lex_cmp(x, y);
        if o != std::cmp::Ordering::Equal {
            return o;
        }
    }
    a.len().cmp(&b.len())
}

/// Robust kernel RAD between two image sets, in bits.
///
/// The kernel map is fitted per pair on the union of both sets. The union is
/// put in a canonical order first, so `d(A, B) == d(B, A)` exactly.
pub fn robust_kernel_rad(a: &FaceSet, b: &FaceSet, cfg: &KernelRadConfig, rng: &mut Rng) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(a.dim(), b.dim()));
    }
    let (first, second) = if set_order(a, b) == std::cmp::Ordering::Greater { (b, a) } else { (a, b) };
    let mut union = first.frames.clone();
    union.extend(second.frames.iter().cloned());
    let dim = cfg.kpca.dim.min(union.len() - 1).max(1);
    let (model, flags) = ransac_kpca(&union, dim, cfg.kpca.gamma, &cfg.ransac, &mut rng.substream(1))?;
    let project_set = |set: &FaceSet, offset: usize, stream: u64| -> Result<Vec<DVector<f64>>> {
        let kept: Vec<DVector<f64>> =
            set.frames.iter().enumerate().filter(|(i, _)| flags[offset + i]).map(|(_, x)| x.clone()).collect();
        if kept.is_empty() {
            return Err(Error::NoConsensus);
        }
        let mut pts = FaceSet { frames: kept, height: set.height, width: set.width, temporal: false };
        if cfg.repopulate.per_face > 0 {
            pts = affine_repopulate(&pts, cfg.repopulate.per_face, &cfg.repopulate.perturbation, &mut rng.substream(stream));
        }
        Ok(pts.frames.iter().map(|x| kpca_project(&model, x)).collect())
    };
    let pa = project_set(first, 0, 2)?;
    let pb = project_set(second, first.len(), 3)?;
    let ga = ppca_gaussian(&pa, cfg.ppca_energy);
    let gb = ppca_gaussian(&pb, cfg.ppca_energy);
    rad(kl_gaussian(&ga, &gb)?, kl_gaussian(&gb, &ga)?)
}
