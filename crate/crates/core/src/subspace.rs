//! Linear subspaces and the principal-angle matchers built on them: MSM,
//! constrained MSM, boosted angle weighting, BoMPA and maximally probable
//! mutual modes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::FaceSet;
use crate::error::{Error, Result};
use crate::gmm::{fit_ppca_mixture, Covariance, PPCA_MAX_COMPONENTS};
use crate::linalg::{self, canonical_sign, orthonormal_columns, svd_desc, sym_eigen_desc};
use crate::rng::Rng;

pub const DEFAULT_MSM_DIM: usize = 9;
pub const DEFAULT_MSM_ANGLES: usize = 3;
pub const DEFAULT_CONSTRAINT_DIM: usize = 70;
pub const DEFAULT_BOOST_ROUNDS: usize = 50;
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Singular values below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-10;
/// Eigenvalues of the summed projection below `1 - EIG_MARGIN` form the constraint block.
const EIG_MARGIN: f64 = 1e-9;
/// A projected basis column shorter than this is considered annihilated.
const PROJ_TOL: f64 = 1e-8;

/// How many principal directions to keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubspaceDim {
    Fixed(usize),
    /// Smallest dimension holding this fraction of the spectrum.
    Energy(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSubspace {
    /// `D × d`, orthonormal columns.
    pub basis: DMatrix<f64>,
    /// Descending.
    pub eigenvalues: DVector<f64>,
    pub mean: Option<DVector<f64>>,
    pub sample_count: usize,
    /// Set when fewer directions than requested were available.
    #[serde(default)]
    pub truncated: bool,
}

impl LinearSubspace {
    /// Wraps an orthonormal basis with unit eigenvalues.
    pub fn from_basis(basis: DMatrix<f64>) -> Self {
        let d = basis.ncols();
        LinearSubspace { basis, eigenvalues: DVector::from_element(d, 1.0), mean: None, sample_count: 0, truncated: false }
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }
}

/// PCA subspace of a data set, optionally without mean subtraction (then the
/// spectrum is that of the autocorrelation `Σ x xᵀ / N`).
pub fn pca_subspace(data: &[DVector<f64>], dim: SubspaceDim, subtract_mean: bool) -> Result<LinearSubspace> {
    let n = data.len();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    let d_in = data[0].len();
    if let Some(x) = data.iter().find(|x| x.len() != d_in) {
        return Err(Error::DimensionMismatch(d_in, x.len()));
    }
    let mean = subtract_mean.then(|| linalg::mean(data));
    let mut x = linalg::data_matrix(data);
    if let Some(mu) = &mean {
        for mut c in x.column_iter_mut() {
            c -= mu;
        }
    }
    let (u, s, _) = svd_desc(&x);
    let top = s.get(0).copied().unwrap_or(0.0);
    let rank = if top > 0.0 { s.iter().take_while(|&&v| v > RANK_TOL * top).count() } else { 0 };
    let eig: Vec<f64> = s.iter().take(rank).map(|v| v * v / n as f64).collect();
    let (k, truncated) = match dim {
        SubspaceDim::Fixed(0) => return Err(Error::InvalidParams("subspace dimension must be positive".into())),
        SubspaceDim::Fixed(k) => (k.min(rank), k > rank),
        SubspaceDim::Energy(e) if !(e > 0.0 && e <= 1.0) => {
            return Err(Error::InvalidParams(format!("energy fraction {e} outside (0, 1]")))
        }
        SubspaceDim::Energy(e) => (crate::gmm::energy_rank(&eig, e), false),
    };
    Ok(LinearSubspace {
        basis: u.columns(0, k).into_owned(),
        eigenvalues: DVector::from_iterator(k, eig.into_iter().take(k)),
        mean,
        sample_count: n,
        truncated,
    })
}

/// Cosines of the principal angles (descending) with the matching principal vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PrincipalAngles {
    pub correlations: DVector<f64>,
    /// Columns are the principal vectors in the first subspace.
    pub vectors1: DMatrix<f64>,
    pub vectors2: DMatrix<f64>,
}

pub fn principal_angles(u1: &LinearSubspace, u2: &LinearSubspace) -> Result<PrincipalAngles> {
    if u1.ambient_dim() != u2.ambient_dim() {
        return Err(Error::DimensionMismatch(u1.ambient_dim(), u2.ambient_dim()));
    }
    let m = u1.basis.transpose() * &u2.basis;
    let (u, s, v) = svd_desc(&m);
    let mut p1 = &u1.basis * u;
    let mut p2 = &u2.basis * v;
    for j in 0..p1.ncols() {
        // first non-negligible coordinate of each vector in the first subspace is positive
        if let Some(x) = p1.column(j).iter().find(|x| x.abs() > 1e-12) {
            if *x < 0.0 {
                p1.column_mut(j).neg_mut();
                p2.column_mut(j).neg_mut();
            }
        }
    }
    Ok(PrincipalAngles { correlations: s.map(|c| c.clamp(0.0, 1.0)), vectors1: p1, vectors2: p2 })
}

/// Mean of the leading `n_angles` canonical correlations.
pub fn msm_similarity(u1: &LinearSubspace, u2: &LinearSubspace, n_angles: usize) -> Result<f64> {
    if n_angles == 0 {
        return Err(Error::InvalidParams("n_angles must be at least 1".into()));
    }
    let pa = principal_angles(u1, u2)?;
    let k = n_angles.min(pa.correlations.len());
    if k == 0 {
        return Ok(0.0);
    }
    Ok(pa.correlations.iter().take(k).sum::<f64>() / k as f64)
}

/// `N Σ Nᵢ BᵢBᵢᵀ / Σ Nᵢ` over `N` subspaces. Equal weights when no sample counts are set.
pub fn weighted_projection_sum(subspaces: &[LinearSubspace]) -> Result<DMatrix<f64>> {
    let first = subspaces.first().ok_or(Error::TooFewPoints { needed: 1, got: 0 })?;
    let d = first.ambient_dim();
    let total: usize = subspaces.iter().map(|s| s.sample_count).sum();
    let mut p = DMatrix::zeros(d, d);
    for s in subspaces {
        if s.ambient_dim() != d {
            return Err(Error::DimensionMismatch(d, s.ambient_dim()));
        }
        let w = if total == 0 { 1.0 } else { s.sample_count as f64 * subspaces.len() as f64 / total as f64 };
        p += s.projector() * w;
    }
    Ok(p)
}

/// Constraint subspace: eigenvectors of the sample-weighted projection sum with
/// eigenvalue below one. `retain` keeps only the leading directions of that block.
pub fn constraint_subspace(subspaces: &[LinearSubspace], retain: Option<usize>) -> Result<LinearSubspace> {
    let p = weighted_projection_sum(subspaces)?;
    let (vals, vecs) = sym_eigen_desc(&p);
    let block: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] < 1.0 - EIG_MARGIN).collect();
    if block.is_empty() {
        return Err(Error::AllEigenvaluesLarge);
    }
    let keep = retain.map_or(block.len(), |r| r.min(block.len()));
    let truncated = retain.is_some_and(|r| r > block.len());
    let basis = DMatrix::from_fn(p.nrows(), keep, |r, c| vecs[(r, block[c])]);
    Ok(LinearSubspace {
        basis,
        eigenvalues: DVector::from_iterator(keep, block[..keep].iter().map(|&i| vals[i].max(0.0))),
        mean: None,
        sample_count: subspaces.iter().map(|s| s.sample_count).sum(),
        truncated,
    })
}

/// Expresses `u` in the coordinates of the constraint subspace and re-orthonormalises.
pub fn project_onto_constraint(u: &LinearSubspace, constraint: &LinearSubspace) -> Result<LinearSubspace> {
    if u.ambient_dim() != constraint.ambient_dim() {
        return Err(Error::DimensionMismatch(u.ambient_dim(), constraint.ambient_dim()));
    }
    let p = constraint.basis.transpose() * &u.basis;
    let gram_err = (p.transpose() * &p - DMatrix::identity(p.ncols(), p.ncols())).amax();
    let basis = if gram_err <= 1e-12 {
        p
    } else {
        let scale = (0..p.ncols()).map(|j| p.column(j).norm()).fold(0.0, f64::max);
        if scale < PROJ_TOL {
            return Err(Error::ProjectedRankZero);
        }
        orthonormal_columns(&p, PROJ_TOL / scale)
    };
    if basis.ncols() == 0 {
        return Err(Error::ProjectedRankZero);
    }
    Ok(LinearSubspace { sample_count: u.sample_count, ..LinearSubspace::from_basis(basis) })
}

pub fn cmsm_similarity(
    u1: &LinearSubspace,
    u2: &LinearSubspace,
    constraint: &LinearSubspace,
    n_angles: usize,
) -> Result<f64> {
    let p1 = project_onto_constraint(u1, constraint)?;
    let p2 = project_onto_constraint(u2, constraint)?;
    msm_similarity(&p1, &p2, n_angles)
}

/// Per-angle weights of the linear subspace similarity function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleWeights {
    pub weights: Vec<f64>,
}

impl AngleWeights {
    pub fn uniform(n: usize) -> Self {
        AngleWeights { weights: vec![1.0; n] }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || !self.weights.iter().any(|&w| w > 0.0) {
            return Err(Error::InvalidParams("angle weights must be non-negative with one positive".into()));
        }
        Ok(())
    }

    /// `f(Θ) = (1/N) Σ wᵢ cos θᵢ / Σ wᵢ`. Missing angles count as orthogonal.
    pub fn similarity(&self, correlations: &[f64]) -> f64 {
        let n = self.weights.len();
        let total: f64 = self.weights.iter().sum();
        if n == 0 || total <= 0.0 {
            return 0.0;
        }
        let s: f64 = self.weights.iter().zip(correlations).map(|(w, c)| w * c).sum();
        s / total / n as f64
    }
}

/// One boosting round: `cos θ_angle > threshold` votes "same class" with weight `alpha`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakLearner {
    pub angle: usize,
    pub threshold: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostReport {
    pub weights: AngleWeights,
    pub learners: Vec<WeakLearner>,
    /// Training error of the returned strong classifier after each round.
    pub training_error: Vec<f64>,
    /// False when the training pairs could not be separated (a warning, not an error).
    pub separable: bool,
}

impl BoostReport {
    /// The thresholded strong classifier: weighted votes against half the total weight.
    pub fn classify(&self, correlations: &[f64]) -> bool {
        strong_vote(&self.learners, correlations)
    }
}

fn strong_vote(learners: &[WeakLearner], x: &[f64]) -> bool {
    let total: f64 = learners.iter().map(|l| l.alpha).sum();
    let votes: f64 = learners.iter().filter(|l| x.get(l.angle).copied().unwrap_or(0.0) > l.threshold).map(|l| l.alpha).sum();
    votes >= 0.5 * total
}

/// AdaBoost over per-angle threshold learners. In-class items are vectors of
/// canonical correlations from same-class pairs. The classifier with the lowest
/// training error seen over the rounds is kept, so the reported error never increases.
pub fn boost_angle_weights(in_class: &[Vec<f64>], out_class: &[Vec<f64>], rounds: usize) -> Result<BoostReport> {
    if in_class.is_empty() {
        return Err(Error::NoPositives);
    }
    if out_class.is_empty() {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    if rounds == 0 {
        return Err(Error::InvalidParams("at least one boosting round is needed".into()));
    }
    let n_angles = in_class.iter().chain(out_class).map(Vec::len).max().unwrap_or(0);
    if n_angles == 0 {
        return Err(Error::InvalidParams("empty angle vectors".into()));
    }
    let items: Vec<(Vec<f64>, bool)> = in_class
        .iter()
        .map(|v| (v.clone(), true))
        .chain(out_class.iter().map(|v| (v.clone(), false)))
        .map(|(mut v, y)| {
            v.resize(n_angles, 0.0);
            (v, y)
        })
        .collect();
    let (np, nn) = (in_class.len() as f64, out_class.len() as f64);
    let mut w: Vec<f64> = items.iter().map(|(_, y)| if *y { 0.5 / np } else { 0.5 / nn }).collect();
    let error_of = |learners: &[WeakLearner]| {
        items.iter().filter(|(x, y)| strong_vote(learners, x) != *y).count() as f64 / items.len() as f64
    };

    let mut learners: Vec<WeakLearner> = Vec::new();
    let mut best_len = 0;
    let mut best_err = f64::INFINITY;
    let mut trace = Vec::new();
    for _ in 0..rounds {
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        let Some((angle, threshold, eps)) = best_stump(&items, &w, n_angles) else { break };
        if eps >= 0.5 {
            break;
        }
        let eps = eps.max(1e-10);
        let beta = eps / (1.0 - eps);
        learners.push(WeakLearner { angle, threshold, alpha: (1.0 / beta).ln() });
        for ((x, y), wi) in items.iter().zip(w.iter_mut()) {
            if (x[angle] > threshold) == *y {
                *wi *= beta;
            }
        }
        let err = error_of(&learners);
        if err < best_err {
            best_err = err;
            best_len = learners.len();
        }
        trace.push(best_err);
        if best_err == 0.0 {
            break;
        }
    }
    learners.truncate(best_len);
    let mut weights = vec![0.0; n_angles];
    for l in &learners {
        weights[l.angle] += l.alpha;
    }
    if !weights.iter().any(|&x| x > 0.0) {
        weights = vec![1.0; n_angles];
    }
    Ok(BoostReport { weights: AngleWeights { weights }, learners, training_error: trace, separable: best_err == 0.0 })
}

/// Best (angle, threshold, weighted error) over all angles and all midpoints
/// of the sorted training values, plus a threshold below the minimum.
fn best_stump(items: &[(Vec<f64>, bool)], w: &[f64], n_angles: usize) -> Option<(usize, f64, f64)> {
    let mut best: Option<(usize, f64, f64)> = None;
    let pos_total: f64 = items.iter().zip(w).filter(|((_, y), _)| *y).map(|(_, wi)| wi).sum();
    for a in 0..n_angles {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.sort_by(|&i, &j| items[i].0[a].total_cmp(&items[j].0[a]));
        // threshold below everything: all predicted positive, negatives are the errors
        let mut err = 1.0 - pos_total;
        let mut consider = |c: f64, e: f64| {
            if best.is_none_or(|(_, _, be)| e < be - 1e-15) {
                best = Some((a, c, e));
            }
        };
        consider(items[order[0]].0[a] - 1.0, err);
        for k in 0..order.len() {
            let (x, y) = (&items[order[k]].0, items[order[k]].1);
            // moving the threshold past this item flips it to "negative"
            err += if y { w[order[k]] } else { -w[order[k]] };
            let next = order.get(k + 1).map(|&j| items[j].0[a]);
            match next {
                Some(v) if v == x[a] => continue,
                Some(v) => consider(0.5 * (x[a] + v), err),
                None => consider(x[a] + 1.0, err),
            }
        }
    }
    best
}

/// Precomputed pieces of a set for BoMPA matching.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldModel {
    pub global: LinearSubspace,
    /// Principal subspaces of the PPCA mixture components.
    pub patches: Vec<LinearSubspace>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BompaConfig {
    pub global_dim: usize,
    pub alpha: f64,
    pub max_components: usize,
}

impl Default for BompaConfig {
    fn default() -> Self {
        BompaConfig { global_dim: DEFAULT_MSM_DIM, alpha: DEFAULT_ALPHA, max_components: PPCA_MAX_COMPONENTS }
    }
}

pub fn manifold_model(set: &FaceSet, cfg: &BompaConfig, rng: &mut Rng) -> Result<ManifoldModel> {
    let global = pca_subspace(&set.frames, SubspaceDim::Fixed(cfg.global_dim), false)?;
    let fit = fit_ppca_mixture(&set.frames, cfg.max_components, rng)?;
    let patches = fit
        .mixture
        .components
        .iter()
        .filter_map(|c| match &c.cov {
            Covariance::Ppca { basis, eigenvalues, .. } => Some(LinearSubspace {
                basis: basis.clone(),
                eigenvalues: eigenvalues.clone(),
                mean: Some(c.mean.clone()),
                sample_count: 0,
                truncated: false,
            }),
            _ => None,
        })
        .collect();
    Ok(ManifoldModel { global, patches })
}

/// Best local match `max_{i,j} f_L` over all patch pairs.
pub fn local_similarity(a: &ManifoldModel, b: &ManifoldModel, weights_local: &AngleWeights) -> Result<f64> {
    let mut best = 0.0f64;
    for p in &a.patches {
        for q in &b.patches {
            let pa = principal_angles(p, q)?;
            best = best.max(weights_local.similarity(pa.correlations.as_slice()));
        }
    }
    Ok(best)
}

/// `(1−α) f_G(global) + α max f_L(patches)`.
pub fn bompa_from_models(
    a: &ManifoldModel,
    b: &ManifoldModel,
    weights_global: &AngleWeights,
    weights_local: &AngleWeights,
    alpha: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParams(format!("alpha {alpha} outside [0, 1]")));
    }
    let fg = weights_global.similarity(principal_angles(&a.global, &b.global)?.correlations.as_slice());
    if alpha == 0.0 {
        return Ok(fg);
    }
    let fl = local_similarity(a, b, weights_local)?;
    Ok((1.0 - alpha) * fg + alpha * fl)
}

pub fn bompa_similarity(
    a: &FaceSet,
    b: &FaceSet,
    weights_global: &AngleWeights,
    weights_local: &AngleWeights,
    cfg: &BompaConfig,
    rng: &mut Rng,
) -> Result<f64> {
    weights_global.validate()?;
    weights_local.validate()?;
    let ma = manifold_model(a, cfg, &mut rng.substream(1))?;
    let mb = manifold_model(b, cfg, &mut rng.substream(2))?;
    bompa_from_models(&ma, &mb, weights_global, weights_local, cfg.alpha)
}

/// Zero-mean Gaussian with `C = B diag(λ) Bᵀ + σ² (I − BBᵀ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilisticSubspace {
    pub subspace: LinearSubspace,
    /// Variance σ² of the isotropic noise outside the principal subspace.
    pub noise: f64,
}

/// Uncentred PCA with the noise variance set to the mean of the discarded part
/// of the autocorrelation spectrum, floored at `COV_FLOOR`.
pub fn probabilistic_subspace(data: &[DVector<f64>], dim: SubspaceDim) -> Result<ProbabilisticSubspace> {
    let subspace = pca_subspace(data, dim, false)?;
    let d = subspace.ambient_dim();
    let total = data.iter().map(|x| x.norm_squared()).sum::<f64>() / data.len() as f64;
    let residual = (total - subspace.eigenvalues.sum()).max(0.0);
    let noise = if subspace.dim() < d { residual / (d - subspace.dim()) as f64 } else { 0.0 };
    Ok(ProbabilisticSubspace { subspace, noise: noise.max(crate::gmm::COV_FLOOR) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MutualMode {
    /// `(λ_min Π λᵢ⁽¹⁾ λᵢ⁽²⁾)^{-1/2}` up to the constant factor.
    pub score: f64,
    pub log_score: f64,
    /// Unit direction along which both densities are jointly most probable.
    pub mode: DVector<f64>,
    /// Smallest eigenvalue of `C₁⁻¹ + C₂⁻¹`.
    pub eigenvalue: f64,
}

/// Maximally probable mutual mode of two probabilistic subspaces: the
/// eigenvector of `C₁⁻¹ + C₂⁻¹` with the smallest eigenvalue. Inverses use the
/// principal-plus-noise form, so only the span of both bases is decomposed.
pub fn mpmm_similarity(s1: &ProbabilisticSubspace, s2: &ProbabilisticSubspace) -> Result<MutualMode> {
    let d = s1.subspace.ambient_dim();
    if s2.subspace.ambient_dim() != d {
        return Err(Error::DimensionMismatch(d, s2.subspace.ambient_dim()));
    }
    for s in [s1, s2] {
        if !(s.noise > 0.0) || s.subspace.eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidParams("variances must be positive".into()));
        }
    }
    let iso = 1.0 / s1.noise + 1.0 / s2.noise;
    let both = DMatrix::from_fn(d, s1.subspace.dim() + s2.subspace.dim(), |r, c| {
        if c < s1.subspace.dim() {
            s1.subspace.basis[(r, c)]
        } else {
            s2.subspace.basis[(r, c - s1.subspace.dim())]
        }
    });
    let q = orthonormal_columns(&both, 1e-10);
    let r = q.ncols();
    let mut a = DMatrix::identity(r, r) * iso;
    for s in [s1, s2] {
        let qb = q.transpose() * &s.subspace.basis;
        let corr = DMatrix::from_diagonal(&s.subspace.eigenvalues.map(|l| 1.0 / l - 1.0 / s.noise));
        a += &qb * corr * qb.transpose();
    }
    let (vals, vecs) = sym_eigen_desc(&a);
    let (eigenvalue, mut mode) = if r > 0 && (r == d || vals[r - 1] <= iso) {
        (vals[r - 1], &q * vecs.column(r - 1))
    } else {
        (iso, complement_direction(&q, d))
    };
    mode.normalize_mut();
    canonical_sign(&mut mode);
    let log_prod: f64 = s1.subspace.eigenvalues.iter().chain(s2.subspace.eigenvalues.iter()).map(|l| l.ln()).sum();
    let log_score = -0.5 * (eigenvalue.ln() + log_prod);
    Ok(MutualMode { score: log_score.exp(), log_score, mode, eigenvalue })
}

/// A unit vector orthogonal to the columns of `q` (which span fewer than `d` dimensions).
fn complement_direction(q: &DMatrix<f64>, d: usize) -> DVector<f64> {
    let mut best = DVector::zeros(d);
    for k in 0..d {
        let mut e = DVector::zeros(d);
        e[k] = 1.0;
        let v = &e - q * (q.transpose() * &e);
        if v.norm() > best.norm() {
            best = v;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random_subspace(rng: &mut Rng, d: usize, k: usize) -> LinearSubspace {
        let m = DMatrix::from_fn(d, k, |_, _| rng.normal());
        LinearSubspace::from_basis(orthonormal_columns(&m, 1e-10))
    }

    fn e(d: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(d);
        v[i] = 1.0;
        v
    }

    #[test]
    fn line_through_origin() {
        let dir = DVector::from_vec(vec![3.0, 4.0]) / 5.0;
        let data: Vec<DVector<f64>> = [-2.0, -0.5, 1.0, 3.0].iter().map(|t| &dir * *t).collect();
        let s = pca_subspace(&data, SubspaceDim::Fixed(1), false).unwrap();
        assert!((s.basis.column(0).dot(&dir).abs() - 1.0).abs() < 1e-9);
        assert!(!s.truncated);
        let s = pca_subspace(&data, SubspaceDim::Fixed(2), false).unwrap();
        assert_eq!(s.dim(), 1);
        assert!(s.truncated);
        assert!(matches!(pca_subspace(&data[..1], SubspaceDim::Fixed(1), false), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn energy_on_isotropic_gaussian_keeps_everything() {
        let mut rng = Rng::new(1);
        let data: Vec<DVector<f64>> = (0..2000).map(|_| DVector::from_fn(5, |_, _| rng.normal())).collect();
        let s = pca_subspace(&data, SubspaceDim::Energy(0.95), true).unwrap();
        // oracle: with five roughly equal eigenvalues, four hold only ~80%
        let total: f64 = s.eigenvalues.sum();
        let four: f64 = s.eigenvalues.iter().take(4).sum();
        assert!(four / total < 0.95);
        assert_eq!(s.dim(), 5);
    }

    #[test]
    fn identical_subspaces_correlate_fully() {
        let u = random_subspace(&mut Rng::new(2), 6, 3);
        let pa = principal_angles(&u, &u).unwrap();
        assert!(pa.correlations.iter().all(|&c| (c - 1.0).abs() < 1e-12));
        assert!((msm_similarity(&u, &u, 3).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_angle_between_lines() {
        let a = LinearSubspace::from_basis(DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let b = LinearSubspace::from_basis(DMatrix::from_column_slice(3, 1, &[h, h, 0.0]));
        let rho = principal_angles(&a, &b).unwrap().correlations[0];
        // brute force: max over unit vectors in both spans is just the two unit vectors
        let brute = (0..360).map(|k| (k as f64).to_radians().cos().abs() * h).fold(0.0, f64::max);
        assert!((rho - h).abs() < 1e-12);
        assert!((rho - brute).abs() < 1e-12);
    }

    #[test]
    fn planes_sharing_a_line() {
        let a = LinearSubspace::from_basis(DMatrix::from_columns(&[e(3, 0), e(3, 1)]));
        let b = LinearSubspace::from_basis(DMatrix::from_columns(&[e(3, 0), e(3, 2)]));
        let pa = principal_angles(&a, &b).unwrap();
        assert_eq!(pa.correlations[0], 1.0);
        assert!(pa.correlations[1].abs() < 1e-15);
        assert!((pa.vectors1.column(0) - pa.vectors2.column(0)).norm() < 1e-12);
    }

    #[test]
    fn orthogonal_subspaces_score_zero() {
        let a = LinearSubspace::from_basis(DMatrix::from_columns(&[e(4, 0), e(4, 1)]));
        let b = LinearSubspace::from_basis(DMatrix::from_columns(&[e(4, 2), e(4, 3)]));
        assert_eq!(msm_similarity(&a, &b, 3).unwrap(), 0.0);
        assert!(msm_similarity(&a, &b, 0).is_err());
    }

    #[test]
    fn msm_is_mean_of_leading_correlations() {
        let mut rng = Rng::new(3);
        for _ in 0..10 {
            let a = random_subspace(&mut rng, 10, 4);
            let b = random_subspace(&mut rng, 10, 5);
            let c = principal_angles(&a, &b).unwrap().correlations;
            let oracle = (c[0] + c[1] + c[2]) / 3.0;
            assert!((msm_similarity(&a, &b, 3).unwrap() - oracle).abs() < 1e-15);
        }
    }

    #[test]
    fn constraint_of_single_subspace_is_complement() {
        let a = LinearSubspace::from_basis(DMatrix::from_columns(&[e(4, 0), e(4, 1)]));
        let c = constraint_subspace(std::slice::from_ref(&a), None).unwrap();
        assert_eq!(c.dim(), 2);
        assert!(c.eigenvalues.iter().all(|&v| v.abs() < 1e-12));
        assert!((a.basis.transpose() * &c.basis).amax() < 1e-12);
    }

    #[test]
    fn equal_counts_reduce_to_plain_sum() {
        let mut rng = Rng::new(4);
        let subs: Vec<LinearSubspace> = (0..4)
            .map(|_| LinearSubspace { sample_count: 17, ..random_subspace(&mut rng, 8, 2) })
            .collect();
        let oracle = subs.iter().fold(DMatrix::zeros(8, 8), |acc, s| acc + &s.basis * s.basis.transpose());
        assert!((weighted_projection_sum(&subs).unwrap() - oracle).amax() < 1e-12);
    }

    #[test]
    fn all_large_eigenvalues_rejected() {
        // two copies of the full space sum to 2·I
        let full = LinearSubspace::from_basis(DMatrix::identity(3, 3));
        assert!(matches!(constraint_subspace(&[full.clone(), full], None), Err(Error::AllEigenvaluesLarge)));
        assert!(matches!(constraint_subspace(&[], None), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn cmsm_with_full_constraint_is_msm() {
        let mut rng = Rng::new(5);
        let full = LinearSubspace::from_basis(DMatrix::identity(7, 7));
        for _ in 0..5 {
            let a = random_subspace(&mut rng, 7, 3);
            let b = random_subspace(&mut rng, 7, 3);
            assert_eq!(cmsm_similarity(&a, &b, &full, 3).unwrap(), msm_similarity(&a, &b, 3).unwrap());
        }
    }

    #[test]
    fn cmsm_orthogonal_constraint_has_rank_zero() {
        let a = LinearSubspace::from_basis(DMatrix::from_columns(&[e(4, 0)]));
        let b = LinearSubspace::from_basis(DMatrix::from_columns(&[e(4, 1)]));
        let c = LinearSubspace::from_basis(DMatrix::from_columns(&[e(4, 2), e(4, 3)]));
        assert!(matches!(cmsm_similarity(&a, &b, &c, 3), Err(Error::ProjectedRankZero)));
    }

    /// Classes share a common 3-D "lighting" subspace plus a private 2-D one.
    fn class_sample(rng: &mut Rng, common: &DMatrix<f64>, own: &DMatrix<f64>, n: usize) -> Vec<DVector<f64>> {
        (0..n)
            .map(|_| {
                let c = DVector::from_fn(common.ncols(), |_, _| 2.0 * rng.normal());
                let o = DVector::from_fn(own.ncols(), |_, _| rng.normal());
                common * c + own * o + DVector::from_fn(common.nrows(), |_, _| 0.05 * rng.normal())
            })
            .collect()
    }

    #[test]
    fn constraint_widens_the_class_gap() {
        let mut rng = Rng::new(6);
        let d = 30;
        let common = orthonormal_columns(&DMatrix::from_fn(d, 3, |_, _| rng.normal()), 1e-10);
        let owns: Vec<DMatrix<f64>> = (0..6).map(|_| DMatrix::from_fn(d, 2, |_, _| rng.normal())).collect();
        let fit = |x: &[DVector<f64>]| pca_subspace(x, SubspaceDim::Fixed(5), false).unwrap();
        let train: Vec<LinearSubspace> = owns.iter().map(|o| fit(&class_sample(&mut rng, &common, o, 40))).collect();
        let constraint = constraint_subspace(&train, None).unwrap();
        let gallery: Vec<LinearSubspace> = owns.iter().map(|o| fit(&class_sample(&mut rng, &common, o, 40))).collect();
        let probes: Vec<LinearSubspace> = owns.iter().map(|o| fit(&class_sample(&mut rng, &common, o, 40))).collect();
        let gap = |f: &dyn Fn(&LinearSubspace, &LinearSubspace) -> f64| {
            let (mut intra, mut inter, mut ni, mut no) = (0.0, 0.0, 0.0, 0.0);
            for (i, p) in probes.iter().enumerate() {
                for (j, g) in gallery.iter().enumerate() {
                    if i == j {
                        intra += f(p, g);
                        ni += 1.0;
                    } else {
                        inter += f(p, g);
                        no += 1.0;
                    }
                }
            }
            intra / ni - inter / no
        };
        let msm = gap(&|a, b| msm_similarity(a, b, 3).unwrap());
        let cmsm = gap(&|a, b| cmsm_similarity(a, b, &constraint, 3).unwrap());
        assert!(cmsm > msm, "cmsm gap {cmsm} vs msm gap {msm}");
    }

    fn planted_angles(rng: &mut Rng, same: bool) -> Vec<f64> {
        let second = if same { 0.8 + 0.15 * rng.uniform() } else { 0.3 + 0.4 * rng.uniform() };
        vec![0.9 + 0.1 * rng.uniform(), second, 0.2 * rng.uniform(), 0.1 * rng.uniform()]
    }

    #[test]
    fn boosting_finds_the_planted_angle() {
        let mut rng = Rng::new(7);
        let pos: Vec<Vec<f64>> = (0..20).map(|_| planted_angles(&mut rng, true)).collect();
        let neg: Vec<Vec<f64>> = (0..60).map(|_| planted_angles(&mut rng, false)).collect();
        let r = boost_angle_weights(&pos, &neg, DEFAULT_BOOST_ROUNDS).unwrap();
        let w = &r.weights.weights;
        assert!(w[1] > w[0] + w[2] + w[3], "{w:?}");
        assert!(r.separable);
        assert!(pos.iter().all(|x| r.classify(x)));
        assert!(neg.iter().all(|x| !r.classify(x)));
    }

    #[test]
    fn shared_mode_makes_first_angle_uninformative() {
        // Every class shares one common direction (an extrinsic factor), so the first
        // canonical correlation is near 1 for all pairs and should not get the top weight.
        let mut rng = Rng::new(8);
        let d = 25;
        let common = orthonormal_columns(&DMatrix::from_fn(d, 1, |_, _| rng.normal()), 1e-10);
        let owns: Vec<DMatrix<f64>> = (0..8).map(|_| DMatrix::from_fn(d, 3, |_, _| rng.normal())).collect();
        let fit = |x: &[DVector<f64>]| pca_subspace(x, SubspaceDim::Fixed(4), false).unwrap();
        let sets: Vec<Vec<DVector<f64>>> = owns.iter().map(|o| class_sample(&mut rng, &common, o, 60)).collect();
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (i, s) in sets.iter().enumerate() {
            let idx = rng.sample_indices(s.len(), s.len());
            let half_a: Vec<DVector<f64>> = idx[..30].iter().map(|&k| s[k].clone()).collect();
            let half_b: Vec<DVector<f64>> = idx[30..].iter().map(|&k| s[k].clone()).collect();
            pos.push(principal_angles(&fit(&half_a), &fit(&half_b)).unwrap().correlations.as_slice().to_vec());
            for t in &sets[i + 1..] {
                neg.push(principal_angles(&fit(s), &fit(t)).unwrap().correlations.as_slice().to_vec());
            }
        }
        let r = boost_angle_weights(&pos, &neg, DEFAULT_BOOST_ROUNDS).unwrap();
        let w = &r.weights.weights;
        let top = (0..w.len()).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
        assert_ne!(top, 0, "{w:?}");
    }

    #[test]
    fn single_pair_each_side() {
        let r = boost_angle_weights(&[vec![0.9, 0.5]], &[vec![0.4, 0.6]], 10).unwrap();
        r.weights.validate().unwrap();
        assert!(r.weights.weights.iter().all(|w| w.is_finite()));
        assert!(matches!(boost_angle_weights(&[], &[vec![0.1]], 10), Err(Error::NoPositives)));
    }

    #[test]
    fn unseparable_data_still_returns_weights() {
        let same = vec![vec![0.5, 0.5]; 3];
        let r = boost_angle_weights(&same, &same, 10).unwrap();
        assert!(!r.separable);
        r.weights.validate().unwrap();
    }

    #[test]
    fn weighted_similarity_function() {
        let w = AngleWeights { weights: vec![1.0, 3.0] };
        // (1/2)(1·0.8 + 3·0.4)/4
        assert!((w.similarity(&[0.8, 0.4]) - 0.25).abs() < 1e-15);
        assert_eq!(w.similarity(&[]), 0.0);
    }

    fn arc_set(rng: &mut Rng, basis: &DMatrix<f64>, phase: f64, n: usize) -> FaceSet {
        let frames = (0..n)
            .map(|_| {
                let t = std::f64::consts::PI * rng.uniform();
                let c = DVector::from_vec(vec![(t + phase).cos(), (t + phase).sin(), 0.5 * (2.0 * t).cos()]);
                basis * c + DVector::from_fn(basis.nrows(), |_, _| 0.02 * rng.normal()) + DVector::from_element(basis.nrows(), 1.0)
            })
            .collect();
        FaceSet::new(frames, 1, basis.nrows())
    }

    #[test]
    fn alpha_zero_is_global_term() {
        let mut rng = Rng::new(9);
        let basis = DMatrix::from_fn(8, 3, |_, _| rng.normal());
        let a = arc_set(&mut rng, &basis, 0.0, 40);
        let b = arc_set(&mut rng, &basis, 0.5, 40);
        let wg = AngleWeights::uniform(3);
        let cfg = BompaConfig { global_dim: 3, alpha: 0.0, max_components: 2 };
        let got = bompa_similarity(&a, &b, &wg, &wg, &cfg, &mut Rng::new(1)).unwrap();
        let ua = pca_subspace(&a.frames, SubspaceDim::Fixed(3), false).unwrap();
        let ub = pca_subspace(&b.frames, SubspaceDim::Fixed(3), false).unwrap();
        assert_eq!(got, wg.similarity(principal_angles(&ua, &ub).unwrap().correlations.as_slice()));
    }

    #[test]
    fn alpha_one_on_single_patches_is_local_term() {
        let mut rng = Rng::new(10);
        let basis = DMatrix::from_fn(6, 3, |_, _| rng.normal());
        let a = arc_set(&mut rng, &basis, 0.0, 40);
        let b = arc_set(&mut rng, &basis, 0.7, 40);
        let w = AngleWeights::uniform(2);
        let cfg = BompaConfig { global_dim: 2, alpha: 1.0, max_components: 1 };
        let got = bompa_similarity(&a, &b, &w, &w, &cfg, &mut Rng::new(2)).unwrap();
        let ma = manifold_model(&a, &cfg, &mut Rng::new(2).substream(1)).unwrap();
        let mb = manifold_model(&b, &cfg, &mut Rng::new(2).substream(2)).unwrap();
        assert_eq!(ma.patches.len(), 1);
        let local = w.similarity(principal_angles(&ma.patches[0], &mb.patches[0]).unwrap().correlations.as_slice());
        assert_eq!(got, local);
    }

    #[test]
    fn bompa_prefers_same_class() {
        let cfg = BompaConfig { global_dim: 3, alpha: 0.5, max_components: 3 };
        let w = AngleWeights::uniform(3);
        let mut wins = 0;
        for seed in 0..20 {
            let mut rng = Rng::new(300 + seed);
            let ba = DMatrix::from_fn(12, 3, |_, _| rng.normal());
            let bb = DMatrix::from_fn(12, 3, |_, _| rng.normal());
            let a1 = arc_set(&mut rng, &ba, 0.0, 40);
            let a2 = arc_set(&mut rng, &ba, 0.0, 40);
            let b1 = arc_set(&mut rng, &bb, 0.0, 40);
            let same = bompa_similarity(&a1, &a2, &w, &w, &cfg, &mut Rng::new(seed)).unwrap();
            let cross = bompa_similarity(&a1, &b1, &w, &w, &cfg, &mut Rng::new(seed)).unwrap();
            wins += usize::from(same >= cross);
        }
        assert!(wins >= 18, "{wins}/20");
    }

    fn prob(basis: DMatrix<f64>, eig: &[f64], noise: f64) -> ProbabilisticSubspace {
        ProbabilisticSubspace {
            subspace: LinearSubspace { eigenvalues: DVector::from_column_slice(eig), ..LinearSubspace::from_basis(basis) },
            noise,
        }
    }

    #[test]
    fn mpmm_isotropic() {
        let s = prob(DMatrix::from_columns(&[e(2, 0)]), &[1.0], 1.0);
        let m = mpmm_similarity(&s, &s).unwrap();
        assert!((m.eigenvalue - 2.0).abs() < 1e-12);
        // every direction has v'(C1⁻¹+C2⁻¹)v = 2
        assert!((m.mode.norm() - 1.0).abs() < 1e-12);
        assert!((m.score - 2f64.powf(-0.5)).abs() < 1e-12);
    }

    #[test]
    fn mpmm_anisotropic_matches_grid_search() {
        let s = prob(DMatrix::from_columns(&[e(2, 0)]), &[4.0], 1.0);
        let m = mpmm_similarity(&s, &s).unwrap();
        // oracle: maximise [v'(C1⁻¹+C2⁻¹)v]^{-1/2} over the unit circle, C = diag(4, 1)
        let (mut best, mut arg) = (0.0, 0.0);
        for k in 0..3600 {
            let t = k as f64 * std::f64::consts::PI / 3600.0;
            let q = 2.0 * (t.cos().powi(2) / 4.0 + t.sin().powi(2));
            if q.powf(-0.5) > best {
                best = q.powf(-0.5);
                arg = t;
            }
        }
        assert!((m.mode[0].abs() - arg.cos().abs()).abs() < 1e-9);
        assert!((m.mode[0].abs() - 1.0).abs() < 1e-12);
        assert!((m.eigenvalue.powf(-0.5) - best).abs() < 1e-12);
    }

    #[test]
    fn probabilistic_subspace_noise_is_mean_residual_eigenvalue() {
        // Four orthogonal axes; the top two are kept and the other two share
        // the residual energy.
        let e = |k: usize, a: f64| DVector::from_fn(4, |i, _| if i == k { a } else { 0.0 });
        let data = vec![e(0, 3.0), e(0, -3.0), e(1, 2.0), e(1, -2.0), e(2, 1.0), e(3, 1.0)];
        let p = probabilistic_subspace(&data, SubspaceDim::Fixed(2)).unwrap();
        let n = 6.0;
        assert!((p.subspace.eigenvalues[0] - 18.0 / n).abs() < 1e-12);
        assert!((p.subspace.eigenvalues[1] - 8.0 / n).abs() < 1e-12);
        assert!((p.noise - (2.0 / n) / 2.0).abs() < 1e-12, "{}", p.noise);
    }

    #[test]
    fn mpmm_rejects_bad_variances() {
        let s = prob(DMatrix::from_columns(&[e(2, 0)]), &[4.0], 0.0);
        assert!(mpmm_similarity(&s, &s).is_err());
    }

    fn random_prob(rng: &mut Rng, d: usize, m: usize) -> ProbabilisticSubspace {
        let b = random_subspace(rng, d, m).basis;
        let eig: Vec<f64> = (0..m).map(|i| 5.0 + 3.0 * (m - i) as f64 + rng.uniform()).collect();
        prob(b, &eig, 0.5 + rng.uniform())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn angles_sorted_and_rotation_invariant(seed in 0u64..10_000, d in 4usize..10, k1 in 1usize..4, k2 in 1usize..4) {
            let mut rng = Rng::new(seed);
            let a = random_subspace(&mut rng, d, k1);
            let b = random_subspace(&mut rng, d, k2);
            let c = principal_angles(&a, &b).unwrap().correlations;
            prop_assert!(c.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!(c.as_slice().windows(2).all(|w| w[0] >= w[1]));
            let q = orthonormal_columns(&DMatrix::from_fn(k1, k1, |_, _| rng.normal()), 1e-12);
            prop_assume!(q.ncols() == k1);
            let rotated = LinearSubspace::from_basis(&a.basis * q);
            let c2 = principal_angles(&rotated, &b).unwrap().correlations;
            for (x, y) in c.iter().zip(c2.iter()) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1e-12) + 1e-13, "{} vs {}", x, y);
            }
        }

        #[test]
        fn projection_sum_eigenvalues_bounded(seed in 0u64..10_000, n in 1usize..6, d in 3usize..8) {
            let mut rng = Rng::new(seed);
            let subs: Vec<LinearSubspace> = (0..n)
                .map(|_| LinearSubspace { sample_count: 1 + rng.below(50) as usize, ..random_subspace(&mut rng, d, 2) })
                .collect();
            let (vals, _) = sym_eigen_desc(&weighted_projection_sum(&subs).unwrap());
            prop_assert!(vals.iter().all(|&v| v >= -1e-9 && v <= n as f64 + 1e-9));
        }

        #[test]
        fn cmsm_identity_constraint_exact(seed in 0u64..10_000) {
            let mut rng = Rng::new(seed);
            let full = LinearSubspace::from_basis(DMatrix::identity(6, 6));
            let a = random_subspace(&mut rng, 6, 2);
            let b = random_subspace(&mut rng, 6, 3);
            prop_assert_eq!(cmsm_similarity(&a, &b, &full, 3).unwrap(), msm_similarity(&a, &b, 3).unwrap());
        }

        #[test]
        fn boost_error_non_increasing(seed in 0u64..10_000, np in 1usize..12, nn in 1usize..20) {
            let mut rng = Rng::new(seed);
            let pos: Vec<Vec<f64>> = (0..np).map(|_| (0..4).map(|_| 0.3 + 0.7 * rng.uniform()).collect()).collect();
            let neg: Vec<Vec<f64>> = (0..nn).map(|_| (0..4).map(|_| 0.7 * rng.uniform()).collect()).collect();
            let r = boost_angle_weights(&pos, &neg, 20).unwrap();
            prop_assert!(r.training_error.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(r.weights.weights.iter().all(|&w| w >= 0.0));
            r.weights.validate().unwrap();
        }

        #[test]
        fn mpmm_symmetric_and_scale_invariant(seed in 0u64..10_000, c in 0.1f64..10.0) {
            let mut rng = Rng::new(seed);
            let a = random_prob(&mut rng, 6, 2);
            let b = random_prob(&mut rng, 6, 2);
            let ab = mpmm_similarity(&a, &b).unwrap();
            let ba = mpmm_similarity(&b, &a).unwrap();
            prop_assert!((ab.mode.dot(&ba.mode).abs() - 1.0).abs() < 1e-9);
            let scale = |s: &ProbabilisticSubspace| ProbabilisticSubspace {
                subspace: LinearSubspace { eigenvalues: &s.subspace.eigenvalues * c, ..s.subspace.clone() },
                noise: s.noise * c,
            };
            let scaled = mpmm_similarity(&scale(&a), &scale(&b)).unwrap();
            prop_assert!((scaled.mode.dot(&ab.mode).abs() - 1.0).abs() < 1e-9);
        }
    }
}
