//! Clustering appearance manifolds in an embedded "manifold space": CMSM
//! distances, metric repair, classical MDS, threshold clustering and
//! support-weighted description-length merging of Gaussian classes.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FaceSet;
use crate::error::{Error, Result};
use crate::linalg::{self, sym_eigen_desc};
use crate::subspace::{
    constraint_subspace, msm_similarity, pca_subspace, project_onto_constraint, LinearSubspace, SubspaceDim, DEFAULT_MSM_ANGLES,
    DEFAULT_MSM_DIM,
};

pub const DEFAULT_MERGE_THRESHOLD: f64 = -20.0;
pub const EMBED_ENERGY: f64 = 0.95;
pub const EMBED_MAX_DIM: usize = 10;
/// Negative eigenvalue mass (fraction of total absolute mass) above which the
/// embedding is flagged as markedly non-Euclidean.
pub const NEGATIVE_MASS_WARNING: f64 = 0.2;
pub const CLASS_RIDGE: f64 = 1e-6;

/// Uncentred PCA subspaces of each face set, carrying their frame counts.
pub fn manifold_subspaces(manifolds: &[FaceSet], dim: SubspaceDim) -> Result<Vec<LinearSubspace>> {
    manifolds.par_iter().map(|m| pca_subspace(&m.frames, dim, false)).collect()
}

/// `max(0, 1 − CMSM similarity)` between every pair, zero diagonal.
pub fn cmsm_distance_matrix(subspaces: &[LinearSubspace], constraint: &LinearSubspace, n_angles: usize) -> Result<DMatrix<f64>> {
    let m = subspaces.len();
    if m < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: m });
    }
    let projected: Vec<LinearSubspace> = subspaces.par_iter().map(|u| project_onto_constraint(u, constraint)).collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
    let sims: Vec<f64> = pairs.par_iter().map(|&(i, j)| msm_similarity(&projected[i], &projected[j], n_angles)).collect::<Result<_>>()?;
    let mut d = DMatrix::zeros(m, m);
    for (&(i, j), s) in pairs.iter().zip(sims) {
        d[(i, j)] = (1.0 - s).max(0.0);
        d[(j, i)] = d[(i, j)];
    }
    Ok(d)
}

pub fn pairwise_cmsm_matrix(manifolds: &[FaceSet], constraint: &LinearSubspace) -> Result<DMatrix<f64>> {
    let subs = manifold_subspaces(manifolds, SubspaceDim::Fixed(DEFAULT_MSM_DIM))?;
    cmsm_distance_matrix(&subs, constraint, DEFAULT_MSM_ANGLES)
}

fn check_square(d: &DMatrix<f64>) -> Result<()> {
    if d.nrows() != d.ncols() {
        return Err(Error::ShapeMismatch { expected: "square matrix".into(), got: format!("{}x{}", d.nrows(), d.ncols()) });
    }
    if d.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidParams("distances must be finite and non-negative".into()));
    }
    Ok(())
}

/// Connected components of the graph joining pairs with `D(i,j) ≤ threshold`,
/// labelled in order of first appearance.
pub fn isotropic_cluster(d: &DMatrix<f64>, threshold: f64) -> Result<Vec<usize>> {
    check_square(d)?;
    if !(threshold >= 0.0) {
        return Err(Error::InvalidParams(format!("threshold {threshold} is negative")));
    }
    let n = d.nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if d[(i, j)] <= threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    Ok(relabel(&roots))
}

/// Contiguous ids in order of first appearance.
pub fn relabel(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

pub fn class_count(assignment: &[usize]) -> usize {
    assignment.iter().copied().max().map_or(0, |m| m + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinedConstraint {
    pub constraint: LinearSubspace,
    pub alpha: f64,
    pub n_high: usize,
    pub n_low: usize,
}

/// Class subspace of a provisional class: leading directions of the members'
/// summed projectors, as many as the widest member.
fn class_subspace(members: &[&LinearSubspace]) -> LinearSubspace {
    let d = members[0].ambient_dim();
    let width = members.iter().map(|m| m.dim()).max().unwrap_or(0);
    let mut p = DMatrix::zeros(d, d);
    for m in members {
        p += m.projector();
    }
    let (_, vecs) = sym_eigen_desc(&p);
    LinearSubspace {
        sample_count: members.iter().map(|m| m.sample_count).sum(),
        ..LinearSubspace::from_basis(vecs.columns(0, width.min(d)).into_owned())
    }
}

/// Leading `dim` eigenvectors of `α B_sB_sᵀ + (1−α) B_gB_gᵀ`, dropping
/// directions with zero weight.
pub fn mix_subspaces(alpha: f64, specific: &LinearSubspace, generic: &LinearSubspace, dim: usize) -> Result<LinearSubspace> {
    if specific.ambient_dim() != generic.ambient_dim() {
        return Err(Error::DimensionMismatch(generic.ambient_dim(), specific.ambient_dim()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParams(format!("mixing weight {alpha} outside [0, 1]")));
    }
    let m = specific.projector() * alpha + generic.projector() * (1.0 - alpha);
    let (vals, vecs) = sym_eigen_desc(&m);
    let keep = vals.iter().take(dim).take_while(|&&v| v > 1e-12).count();
    if keep == 0 {
        return Err(Error::ProjectedRankZero);
    }
    Ok(LinearSubspace {
        basis: vecs.columns(0, keep).into_owned(),
        eigenvalues: DVector::from_iterator(keep, vals.iter().take(keep).copied()),
        mean: None,
        sample_count: specific.sample_count + generic.sample_count,
        truncated: keep < dim,
    })
}

/// Clusters with the generic constraint at both operating points, learns a
/// data-specific constraint from the high-precision classes and mixes it with
/// the generic one, weighted by `α = 1 − (N_h − N_l)/(M − 1)`.
pub fn refine_constraint(
    generic: &LinearSubspace,
    subspaces: &[LinearSubspace],
    t_precision: f64,
    t_recall: f64,
    n_angles: usize,
) -> Result<RefinedConstraint> {
    if !(t_precision <= t_recall) {
        return Err(Error::InvalidParams(format!("precision threshold {t_precision} exceeds recall threshold {t_recall}")));
    }
    let d = cmsm_distance_matrix(subspaces, generic, n_angles)?;
    let high = isotropic_cluster(&d, t_precision)?;
    let low = isotropic_cluster(&d, t_recall)?;
    let (n_high, n_low) = (class_count(&high), class_count(&low));
    let m = subspaces.len();
    let alpha = (1.0 - (n_high as f64 - n_low as f64) / (m as f64 - 1.0)).clamp(0.0, 1.0);
    let classes: Vec<LinearSubspace> = (0..n_high)
        .map(|c| {
            let members: Vec<&LinearSubspace> = subspaces.iter().zip(&high).filter(|(_, &l)| l == c).map(|(s, _)| s).collect();
            class_subspace(&members)
        })
        .collect();
    let specific = constraint_subspace(&classes, Some(generic.dim()))?;
    let constraint = mix_subspaces(alpha, &specific, generic, generic.dim())?;
    Ok(RefinedConstraint { constraint, alpha, n_high, n_low })
}

/// Shortest-path completion `D̂(i,j) = min[D(i,j), D̂(i,k) + D̂(k,j)]`, iterated
/// to a fixed point so the triangle inequality holds exactly.
pub fn metric_repair(d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(d)?;
    let n = d.nrows();
    let mut out = d.clone();
    loop {
        let mut changed = false;
        for k in 0..n {
            for i in 0..n {
                let dik = out[(i, k)];
                for j in 0..n {
                    let via = dik + out[(k, j)];
                    if via < out[(i, j)] {
                        out[(i, j)] = via;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return Ok(out);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSpaceEmbedding {
    /// One row per manifold.
    pub points: DMatrix<f64>,
    /// `‖D_embedded − D̂‖_F / ‖D̂‖_F`.
    pub stress: f64,
    pub eigenvalues: DVector<f64>,
    /// Fraction of absolute spectral mass on negative eigenvalues.
    pub negative_mass: f64,
    pub non_euclidean_warning: bool,
    pub source: DMatrix<f64>,
}

/// Smallest dimension holding `EMBED_ENERGY` of the positive eigenmass,
/// capped at `EMBED_MAX_DIM` and `M − 1`.
pub fn default_embedding_dim(eigenvalues: &[f64]) -> usize {
    let pos: Vec<f64> = eigenvalues.iter().map(|v| v.max(0.0)).collect();
    let e = crate::gmm::energy_rank(&pos, EMBED_ENERGY).max(1);
    e.min(EMBED_MAX_DIM).min(eigenvalues.len().saturating_sub(1).max(1))
}

/// Classical MDS: spectral embedding of `−½ J D² J`.
pub fn mds_embed(d: &DMatrix<f64>, dim: Option<usize>) -> Result<ManifoldSpaceEmbedding> {
    check_square(d)?;
    let m = d.nrows();
    if m < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: m });
    }
    let sq = d.map(|v| v * v);
    let row_mean = DVector::from_fn(m, |i, _| sq.row(i).mean());
    let all = sq.mean();
    let b = DMatrix::from_fn(m, m, |i, j| -0.5 * (sq[(i, j)] - row_mean[i] - row_mean[j] + all));
    let (vals, vecs) = sym_eigen_desc(&b);
    let e = dim.unwrap_or_else(|| default_embedding_dim(vals.as_slice()));
    if e == 0 || e > m - 1 {
        return Err(Error::InvalidParams(format!("embedding dimension {e} outside 1..={}", m - 1)));
    }
    let mut points = DMatrix::zeros(m, e);
    for c in 0..e {
        let mut v = vecs.column(c).into_owned();
        linalg::canonical_sign(&mut v);
        points.set_column(c, &(v * vals[c].max(0.0).sqrt()));
    }
    let abs_mass: f64 = vals.iter().map(|v| v.abs()).sum();
    let neg_mass: f64 = vals.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    let negative_mass = if abs_mass > 0.0 { neg_mass / abs_mass } else { 0.0 };
    let rec = DMatrix::from_fn(m, m, |i, j| (points.row(i) - points.row(j)).norm());
    let norm = d.norm();
    let stress = if norm > 0.0 { (rec - d).norm() / norm } else { 0.0 };
    Ok(ManifoldSpaceEmbedding {
        points,
        stress,
        eigenvalues: vals,
        negative_mass,
        non_euclidean_warning: negative_mass > NEGATIVE_MASS_WARNING,
        source: d.clone(),
    })
}

/// How the class description length is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DlForm {
    /// `½ N_E log₂(Σn) − C Σ n(j) log₂ P(m_j) / Σ n(j)`.
    #[default]
    Weighted,
    /// Subtracts the support-weighted geometric-mean likelihood raised to the
    /// power `C` instead of its logarithm.
    Printed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGaussian {
    pub members: Vec<usize>,
    pub support: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub ridged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub assignment: Vec<usize>,
    pub classes: Vec<ClassGaussian>,
    pub supports: Vec<f64>,
    /// Class count after each merge, starting with the seed count.
    pub class_counts: Vec<usize>,
    /// ΔDL_w of each accepted merge.
    pub merges: Vec<f64>,
}

/// Support-weighted Gaussian of the given embedded points. A singular
/// covariance gets a `CLASS_RIDGE` ridge.
pub fn fit_class(points: &DMatrix<f64>, members: &[usize], supports: &[f64]) -> ClassGaussian {
    let e = points.ncols();
    let total: f64 = members.iter().map(|&j| supports[j]).sum();
    let mut mean = DVector::zeros(e);
    for &j in members {
        mean += points.row(j).transpose() * (supports[j] / total);
    }
    let mut cov = DMatrix::zeros(e, e);
    for &j in members {
        let r = points.row(j).transpose() - &mean;
        cov += &r * r.transpose() * (supports[j] / total);
    }
    let (vals, _) = sym_eigen_desc(&cov);
    let ridged = !(vals[e - 1] > 1e-12 * vals[0].max(1e-300) && vals[e - 1] > 0.0) || cov.clone().cholesky().is_none();
    if ridged {
        for i in 0..e {
            cov[(i, i)] += CLASS_RIDGE;
        }
    }
    ClassGaussian { members: members.to_vec(), support: total, mean, cov, ridged }
}

fn log2_density(g: &ClassGaussian, x: &DVector<f64>) -> f64 {
    let e = x.len() as f64;
    let ch = g.cov.clone().cholesky().expect("ridged class covariance is positive definite");
    let r = x - &g.mean;
    let maha = r.dot(&ch.solve(&r));
    let ln = -0.5 * (maha + linalg::log_det_spd(&g.cov) + e * (2.0 * std::f64::consts::PI).ln());
    ln / std::f64::consts::LN_2
}

/// Weighted description length of a class's members under its own Gaussian.
pub fn weighted_dl(points: &DMatrix<f64>, class: &ClassGaussian, supports: &[f64], form: DlForm) -> f64 {
    let e = points.ncols() as f64;
    let n_e = e + e * (e + 1.0) / 2.0;
    let c = class.members.len() as f64;
    let weighted = c * class.members.iter().map(|&j| supports[j] * log2_density(class, &points.row(j).transpose())).sum::<f64>() / class.support;
    let penalty = 0.5 * n_e * class.support.log2();
    match form {
        DlForm::Weighted => penalty - weighted,
        DlForm::Printed => penalty - weighted.exp2(),
    }
}

/// `DL_w(a ∪ b) − DL_w(a) − DL_w(b)`.
pub fn merge_delta(points: &DMatrix<f64>, a: &ClassGaussian, b: &ClassGaussian, supports: &[f64], form: DlForm) -> f64 {
    let mut members = a.members.clone();
    members.extend(&b.members);
    members.sort_unstable();
    let merged = fit_class(points, &members, supports);
    weighted_dl(points, &merged, supports, form) - weighted_dl(points, a, supports, form) - weighted_dl(points, b, supports, form)
}

/// Greedy pairwise merging of seed classes while the best `ΔDL_w` is below
/// `threshold`. Ties go to the lowest pair index.
pub fn anisotropic_merge(
    embedding: &DMatrix<f64>,
    seeds: &[usize],
    supports: &[f64],
    threshold: f64,
    form: DlForm,
) -> Result<ClusterState> {
    let m = embedding.nrows();
    if seeds.len() != m {
        return Err(Error::LengthMismatch(m, seeds.len()));
    }
    if supports.len() != m {
        return Err(Error::LengthMismatch(m, supports.len()));
    }
    if supports.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidParams("supports must be positive".into()));
    }
    let seeds = relabel(seeds);
    let mut classes: Vec<ClassGaussian> = (0..class_count(&seeds))
        .map(|c| {
            let members: Vec<usize> = (0..m).filter(|&j| seeds[j] == c).collect();
            fit_class(embedding, &members, supports)
        })
        .collect();
    let mut class_counts = vec![classes.len()];
    let mut merges = Vec::new();
    while classes.len() > 1 {
        let pairs: Vec<(usize, usize)> = (0..classes.len()).flat_map(|a| (a + 1..classes.len()).map(move |b| (a, b))).collect();
        let deltas: Vec<f64> = pairs.par_iter().map(|&(a, b)| merge_delta(embedding, &classes[a], &classes[b], supports, form)).collect();
        let mut best = 0;
        for k in 1..pairs.len() {
            if deltas[k] < deltas[best] {
                best = k;
            }
        }
        if !(deltas[best] < threshold) {
            break;
        }
        let (a, b) = pairs[best];
        let gone = classes.remove(b);
        let mut members = classes[a].members.clone();
        members.extend(gone.members);
        members.sort_unstable();
        classes[a] = fit_class(embedding, &members, supports);
        merges.push(deltas[best]);
        class_counts.push(classes.len());
    }
    classes.sort_by_key(|c| c.members[0]);
    let mut assignment = vec![0; m];
    for (c, class) in classes.iter().enumerate() {
        for &j in &class.members {
            assignment[j] = c;
        }
    }
    Ok(ClusterState { assignment, classes, supports: supports.to_vec(), class_counts, merges })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub t_precision: f64,
    pub t_recall: f64,
    pub n_angles: usize,
    pub embed_dim: Option<usize>,
    pub merge_threshold: f64,
    pub dl_form: DlForm,
    pub refine: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            t_precision: 0.05,
            t_recall: 0.3,
            n_angles: DEFAULT_MSM_ANGLES,
            embed_dim: None,
            merge_threshold: DEFAULT_MERGE_THRESHOLD,
            dl_form: DlForm::Weighted,
            refine: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub refined: Option<RefinedConstraint>,
    pub distances: DMatrix<f64>,
    pub embedding: ManifoldSpaceEmbedding,
    pub seeds: Vec<usize>,
    pub state: ClusterState,
}

/// Full pipeline: (refined) constraint, CMSM distances, metric repair, MDS,
/// high-precision seeds and anisotropic merging. Supports are the manifolds'
/// sample counts.
pub fn cluster_manifolds(subspaces: &[LinearSubspace], generic: &LinearSubspace, cfg: &ClusterConfig) -> Result<ClusterReport> {
    let refined = if cfg.refine { Some(refine_constraint(generic, subspaces, cfg.t_precision, cfg.t_recall, cfg.n_angles)?) } else { None };
    let constraint = refined.as_ref().map_or(generic, |r| &r.constraint);
    let distances = cmsm_distance_matrix(subspaces, constraint, cfg.n_angles)?;
    let repaired = metric_repair(&distances)?;
    let embedding = mds_embed(&repaired, cfg.embed_dim.map(|e| e.min(subspaces.len() - 1)))?;
    let seeds = isotropic_cluster(&repaired, cfg.t_precision)?;
    let supports: Vec<f64> = subspaces.iter().map(|s| s.sample_count.max(1) as f64).collect();
    let state = anisotropic_merge(&embedding.points, &seeds, &supports, cfg.merge_threshold, cfg.dl_form)?;
    Ok(ClusterReport { refined, distances, embedding, seeds, state })
}
