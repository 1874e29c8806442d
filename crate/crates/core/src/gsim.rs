//! Recognition through the generic shape-illumination manifold: sequences are
//! pose-matched across illuminations by a genetic algorithm, reilluminated
//! from local neighbourhoods, and the resulting difference-of-log images are
//! scored under a mixture learnt offline.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{image_to_vector, FaceSet};
use crate::error::{Error, Result};
use crate::filters::{apply_filter, FilterKind, FilterTag};
use crate::gmm::{self, fit_ppca_mixture, GaussianMixture};
use crate::linalg::sym_eigen_desc;
use crate::rng::Rng;

pub const DEFAULT_KNN: usize = 8;
pub const DEFAULT_OMEGA: f64 = 1.0;
pub const DEFAULT_LOG_EPSILON: f64 = 1.0 / 255.0;
pub const DEFAULT_TOP_FRACTION: f64 = 0.15;
pub const GSIM_MAX_COMPONENTS: usize = 12;

/// All-pairs geodesic distances over a symmetrised K-NN graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeodesicGraph {
    pub n: usize,
    /// `knn[i]` lists the K nearest neighbours of node `i`, nearest first.
    pub knn: Vec<Vec<usize>>,
    pub dist: DMatrix<f64>,
}

impl GeodesicGraph {
    /// Smallest positive geodesic distance, or 1 if there is none.
    pub fn min_positive(&self) -> f64 {
        let m = self.dist.iter().copied().filter(|&d| d > 0.0).fold(f64::INFINITY, f64::min);
        if m.is_finite() {
            m
        } else {
            1.0
        }
    }
}

fn euclidean_matrix(v: &[DVector<f64>]) -> DMatrix<f64> {
    let n = v.len();
    let rows: Vec<Vec<f64>> = (0..n).into_par_iter().map(|i| (0..n).map(|j| (&v[i] - &v[j]).norm()).collect()).collect();
    DMatrix::from_fn(n, n, |i, j| if i <= j { rows[i][j] } else { rows[j][i] })
}

/// Indices of the `k` nearest neighbours of each node (ties by index).
fn knn_lists(e: &DMatrix<f64>, k: usize) -> Vec<Vec<usize>> {
    let n = e.nrows();
    (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| e[(i, a)].total_cmp(&e[(i, b)]).then(a.cmp(&b)));
            others.truncate(k);
            others
        })
        .collect()
}

fn component_labels(adj: &[Vec<usize>]) -> (usize, Vec<usize>) {
    let n = adj.len();
    let mut labels = vec![usize::MAX; n];
    let mut count = 0;
    for s in 0..n {
        if labels[s] != usize::MAX {
            continue;
        }
        let mut stack = vec![s];
        labels[s] = count;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if labels[v] == usize::MAX {
                    labels[v] = count;
                    stack.push(v);
                }
            }
        }
        count += 1;
    }
    (count, labels)
}

pub fn build_geodesics(vectors: &[DVector<f64>], k: usize) -> Result<GeodesicGraph> {
    let n = vectors.len();
    if k == 0 || k >= n {
        return Err(Error::InvalidParams(format!("need 1 <= K < n, got K={k}, n={n}")));
    }
    let e = euclidean_matrix(vectors);
    let knn = knn_lists(&e, k);
    let mut adj = vec![Vec::new(); n];
    let mut d = vec![f64::INFINITY; n * n];
    for i in 0..n {
        d[i * n + i] = 0.0;
        for &j in &knn[i] {
            d[i * n + j] = e[(i, j)];
            d[j * n + i] = e[(i, j)];
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    let (count, labels) = component_labels(&adj);
    if count > 1 {
        return Err(Error::DisconnectedGraph { count, labels });
    }
    // Repeat until a full pass changes nothing, so the triangle inequality
    // holds exactly in floating point and not merely up to rounding.
    // distances only ever decrease, so this terminates
    loop {
        let mut changed = false;
        for m in 0..n {
            for i in 0..n {
                let dim = d[i * n + m];
                if !dim.is_finite() {
                    continue;
                }
                for j in 0..n {
                    let via = dim + d[m * n + j];
                    if via < d[i * n + j] {
                        d[i * n + j] = via;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(GeodesicGraph { n, knn, dist: DMatrix::from_row_slice(n, n, &d) })
}

/// Geodesics with `K` clamped to `n − 1` and raised until the graph is
/// connected. A single node gives the trivial graph.
pub fn connected_geodesics(vectors: &[DVector<f64>], k: usize) -> Result<GeodesicGraph> {
    let n = vectors.len();
    if n == 0 {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    if n == 1 {
        return Ok(GeodesicGraph { n, knn: vec![Vec::new()], dist: DMatrix::zeros(1, 1) });
    }
    let mut k = k.clamp(1, n - 1);
    loop {
        match build_geodesics(vectors, k) {
            Err(Error::DisconnectedGraph { .. }) if k < n - 1 => k = (2 * k).min(n - 1),
            other => return other,
        }
    }
}

/// Flattened distance-transformed edge map.
pub fn pose_signature(frame: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(image_to_vector(&apply_filter(&FilterKind::new(FilterTag::Ed), frame)?))
}

pub fn set_signatures(set: &FaceSet) -> Result<Vec<DVector<f64>>> {
    (0..set.len()).into_par_iter().map(|i| pose_signature(&set.image(i))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaConfig {
    pub population: usize,
    pub elite: usize,
    pub mutation: f64,
    pub migration: f64,
    pub crossover: f64,
    pub max_generations: usize,
    /// Start one chromosome at the nearest-signature mapping.
    pub seed_greedy: bool,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig { population: 20, elite: 2, mutation: 0.05, migration: 0.20, crossover: 0.80, max_generations: 200, seed_greedy: true }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        let rate = |r: f64| (0.0..=1.0).contains(&r);
        if !(rate(self.mutation) && rate(self.migration) && rate(self.crossover)) {
            return Err(Error::InvalidParams("GA rates must lie in [0, 1]".into()));
        }
        if self.population == 0 || self.population < self.elite {
            return Err(Error::InvalidParams("GA population must be positive and at least the elite size".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseMatch {
    /// `mapping[i]` is the frame of sequence 2 matched to frame `i` of sequence 1.
    pub mapping: Vec<usize>,
    pub fitness: f64,
    pub matching_term: f64,
    pub regularization_term: f64,
    /// Best fitness after each generation (the initial population first).
    pub history: Vec<f64>,
}

/// Precomputed pieces of the pose-matching fitness.
pub struct FitnessTerms<'a> {
    /// Squared signature distances, `N₁ × N₂`.
    pub de2: DMatrix<f64>,
    geo1: &'a GeodesicGraph,
    geo2: &'a GeodesicGraph,
    floor: f64,
}

impl<'a> FitnessTerms<'a> {
    pub fn new(sigs1: &[DVector<f64>], sigs2: &[DVector<f64>], geo1: &'a GeodesicGraph, geo2: &'a GeodesicGraph) -> Result<Self> {
        if sigs1.is_empty() || sigs2.is_empty() {
            return Err(Error::TooFewPoints { needed: 1, got: 0 });
        }
        if geo1.n != sigs1.len() {
            return Err(Error::LengthMismatch(sigs1.len(), geo1.n));
        }
        if geo2.n != sigs2.len() {
            return Err(Error::LengthMismatch(sigs2.len(), geo2.n));
        }
        let rows: Vec<Vec<f64>> = sigs1.par_iter().map(|a| sigs2.iter().map(|b| (a - b).norm_squared()).collect()).collect();
        let de2 = DMatrix::from_fn(sigs1.len(), sigs2.len(), |i, j| rows[i][j]);
        Ok(FitnessTerms { de2, geo1, geo2, floor: geo1.min_positive() })
    }

    /// `(matching, regularisation)`. Zero domain geodesics (duplicate
    /// frames) are clamped at the smallest positive one.
    pub fn terms(&self, c: &[usize]) -> (f64, f64) {
        let matching = c.iter().enumerate().map(|(j, &cj)| self.de2[(j, cj)]).sum();
        let mut reg = 0.0;
        for (j, nbrs) in self.geo1.knn.iter().enumerate() {
            for &nb in nbrs {
                reg += self.geo2.dist[(c[j], c[nb])] / self.geo1.dist[(j, nb)].max(self.floor);
            }
        }
        (matching, reg)
    }

    pub fn greedy(&self) -> Vec<usize> {
        (0..self.de2.nrows())
            .map(|i| (0..self.de2.ncols()).min_by(|&a, &b| self.de2[(i, a)].total_cmp(&self.de2[(i, b)])).unwrap())
            .collect()
    }
}

pub fn ga_pose_match(
    sigs1: &[DVector<f64>],
    sigs2: &[DVector<f64>],
    geo1: &GeodesicGraph,
    geo2: &GeodesicGraph,
    omega: f64,
    cfg: &GaConfig,
    rng: &mut Rng,
) -> Result<PoseMatch> {
    cfg.validate()?;
    let terms = FitnessTerms::new(sigs1, sigs2, geo1, geo2)?;
    let (n1, n2) = (sigs1.len(), sigs2.len());
    let fitness = |c: &[usize]| {
        let (m, r) = terms.terms(c);
        m + omega * r
    };
    let random = |rng: &mut Rng| (0..n1).map(|_| rng.below(n2)).collect::<Vec<usize>>();
    let mut pop: Vec<Vec<usize>> = (0..cfg.population).map(|_| random(rng)).collect();
    if cfg.seed_greedy {
        pop[0] = terms.greedy();
    }
    let migrants = ((cfg.migration * cfg.population as f64).round() as usize).min(cfg.population - cfg.elite);
    // rank roulette: the best of the sorted population gets weight P
    let rank_weights: Vec<f64> = (0..cfg.population).map(|r| (cfg.population - r) as f64).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut history = Vec::with_capacity(cfg.max_generations + 1);
    for generation in 0..=cfg.max_generations {
        let scores: Vec<f64> = pop.par_iter().map(|c| fitness(c)).collect();
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        if best.as_ref().is_none_or(|(_, f)| scores[order[0]] < *f) {
            best = Some((pop[order[0]].clone(), scores[order[0]]));
        }
        history.push(best.as_ref().unwrap().1);
        if generation == cfg.max_generations {
            break;
        }
        let sorted: Vec<&Vec<usize>> = order.iter().map(|&i| &pop[i]).collect();
        let mut next: Vec<Vec<usize>> = sorted.iter().take(cfg.elite).map(|c| (*c).clone()).collect();
        for _ in 0..migrants {
            next.push(random(rng));
        }
        while next.len() < cfg.population {
            let a = sorted[rng.categorical(&rank_weights)];
            let mut child = if rng.uniform() < cfg.crossover {
                let b = sorted[rng.categorical(&rank_weights)];
                (0..n1).map(|g| if rng.uniform() < 0.5 { a[g] } else { b[g] }).collect()
            } else {
                a.clone()
            };
            for gene in child.iter_mut() {
                if rng.uniform() < cfg.mutation {
                    *gene = rng.below(n2);
                }
            }
            next.push(child);
        }
        pop = next;
    }
    let (mapping, fitness) = best.expect("population is non-empty");
    let (matching_term, regularization_term) = terms.terms(&mapping);
    Ok(PoseMatch { mapping, fitness, matching_term, regularization_term, history })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reillumination {
    pub frame: DVector<f64>,
    pub alpha: Vec<f64>,
    /// The neighbour system was singular and uniform weights were used.
    pub fallback: bool,
}

/// Affine combination of neighbour frames whose weights best reconstruct the
/// target signature from the neighbour signatures.
pub fn fine_reilluminate(target_sig: &DVector<f64>, neighbor_sigs: &[DVector<f64>], neighbor_frames: &[DVector<f64>]) -> Result<Reillumination> {
    let k = neighbor_sigs.len();
    if k == 0 {
        return Err(Error::InvalidParams("at least one neighbour is needed".into()));
    }
    if neighbor_frames.len() != k {
        return Err(Error::LengthMismatch(k, neighbor_frames.len()));
    }
    if let Some(s) = neighbor_sigs.iter().find(|s| s.len() != target_sig.len()) {
        return Err(Error::DimensionMismatch(target_sig.len(), s.len()));
    }
    let d = neighbor_frames[0].len();
    if let Some(f) = neighbor_frames.iter().find(|f| f.len() != d) {
        return Err(Error::DimensionMismatch(d, f.len()));
    }
    let combine = |alpha: &[f64]| neighbor_frames.iter().zip(alpha).fold(DVector::zeros(d), |acc, (f, a)| acc + f * *a);
    if k == 1 {
        return Ok(Reillumination { frame: neighbor_frames[0].clone(), alpha: vec![1.0], fallback: false });
    }
    let x1 = &neighbor_sigs[0];
    let diffs: Vec<DVector<f64>> = neighbor_sigs[1..].iter().map(|s| x1 - s).collect();
    let b = x1 - target_sig;
    let r = DMatrix::from_fn(k - 1, k - 1, |i, j| diffs[i].dot(&diffs[j]));
    let t = DVector::from_iterator(k - 1, diffs.iter().map(|a| a.dot(&b)));
    let (vals, _) = sym_eigen_desc(&r);
    let solved = if vals[0] > 0.0 && vals[k - 2] > 1e-12 * vals[0] { r.cholesky().map(|ch| ch.solve(&t)) } else { None };
    let Some(rest) = solved else {
        let alpha = vec![1.0 / k as f64; k];
        return Ok(Reillumination { frame: combine(&alpha), alpha, fallback: true });
    };
    let mut alpha = Vec::with_capacity(k);
    alpha.push(1.0 - rest.sum());
    alpha.extend(rest.iter());
    Ok(Reillumination { frame: combine(&alpha), alpha, fallback: false })
}

/// `log(second + ε) − log(first + ε)` per frame pair.
pub fn sim_samples(first: &[DVector<f64>], second: &[DVector<f64>], log_epsilon: f64) -> Result<Vec<DVector<f64>>> {
    if first.len() != second.len() {
        return Err(Error::ShapeMismatch { expected: format!("{} frames", first.len()), got: format!("{} frames", second.len()) });
    }
    if !(log_epsilon >= 0.0) {
        return Err(Error::InvalidParams(format!("log epsilon {log_epsilon} is negative")));
    }
    first
        .iter()
        .zip(second)
        .map(|(a, b)| {
            if a.len() != b.len() {
                return Err(Error::ShapeMismatch { expected: format!("dimension {}", a.len()), got: format!("dimension {}", b.len()) });
            }
            if a.iter().chain(b.iter()).any(|&v| !(v + log_epsilon > 0.0)) {
                return Err(Error::NonPositivePixels);
            }
            Ok(DVector::from_iterator(a.len(), a.iter().zip(b.iter()).map(|(x, y)| (y + log_epsilon).ln() - (x + log_epsilon).ln())))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GsimConfig {
    pub knn_k: usize,
    pub omega: f64,
    pub log_epsilon: f64,
    pub max_components: usize,
    pub top_fraction: f64,
    pub ga: GaConfig,
}

impl Default for GsimConfig {
    fn default() -> Self {
        GsimConfig {
            knn_k: DEFAULT_KNN,
            omega: DEFAULT_OMEGA,
            log_epsilon: DEFAULT_LOG_EPSILON,
            max_components: GSIM_MAX_COMPONENTS,
            top_fraction: DEFAULT_TOP_FRACTION,
            ga: GaConfig::default(),
        }
    }
}

/// Mixture over difference-of-log vectors plus the settings it was learnt with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GsimModel {
    pub mixture: GaussianMixture,
    pub log_epsilon: f64,
    pub knn_k: usize,
    pub omega: f64,
    pub ga: GaConfig,
}

impl GsimModel {
    pub fn config(&self) -> GsimConfig {
        GsimConfig { knn_k: self.knn_k, omega: self.omega, log_epsilon: self.log_epsilon, ga: self.ga.clone(), ..GsimConfig::default() }
    }
}

/// Frames of `a` rendered in the illumination of `b`: pose matching over
/// signature geodesics, then fine reillumination from the K signature
/// neighbours of each matched frame. Negative pixels are clipped to zero.
pub fn reilluminate(a: &FaceSet, b: &FaceSet, cfg: &GsimConfig, rng: &mut Rng) -> Result<(Vec<DVector<f64>>, PoseMatch)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(a.dim(), b.dim()));
    }
    let (sa, sb) = (set_signatures(a)?, set_signatures(b)?);
    let (ga, gb) = (connected_geodesics(&sa, cfg.knn_k)?, connected_geodesics(&sb, cfg.knn_k)?);
    let pm = ga_pose_match(&sa, &sb, &ga, &gb, cfg.omega, &cfg.ga, rng)?;
    let k = cfg.knn_k.max(1).min(b.len());
    let frames = pm
        .mapping
        .par_iter()
        .enumerate()
        .map(|(i, &ci)| {
            // the matched frame first, then its nearest signatures
            let mut nbrs: Vec<usize> = (0..b.len()).filter(|&j| j != ci).collect();
            nbrs.sort_by(|&x, &y| (&sb[ci] - &sb[x]).norm_squared().total_cmp(&(&sb[ci] - &sb[y]).norm_squared()).then(x.cmp(&y)));
            nbrs.insert(0, ci);
            // neighbours whose signature repeats an earlier one add nothing but singularity
            let mut kept: Vec<usize> = Vec::with_capacity(k);
            for j in nbrs {
                if kept.len() == k {
                    break;
                }
                if kept.iter().all(|&m| sb[m] != sb[j]) {
                    kept.push(j);
                }
            }
            let nbrs = kept;
            let sigs: Vec<DVector<f64>> = nbrs.iter().map(|&j| sb[j].clone()).collect();
            let fr: Vec<DVector<f64>> = nbrs.iter().map(|&j| b.frames[j].clone()).collect();
            fine_reilluminate(&sa[i], &sigs, &fr).map(|r| r.frame.map(|v| v.max(0.0)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((frames, pm))
}

/// gSIM samples over every person and ordered pair of distinct, non-empty
/// illuminations. `corpus[person][illumination]`.
pub fn gsim_samples(corpus: &[Vec<FaceSet>], cfg: &GsimConfig, rng: &Rng) -> Result<Vec<DVector<f64>>> {
    if !corpus.iter().any(|p| p.iter().filter(|s| !s.is_empty()).count() >= 2) {
        return Err(Error::SingleIllumination);
    }
    let mut tasks = Vec::new();
    for person in corpus {
        for (p, a) in person.iter().enumerate() {
            for (q, b) in person.iter().enumerate() {
                if p != q && !a.is_empty() && !b.is_empty() {
                    tasks.push((a, b));
                }
            }
        }
    }
    let per_task: Vec<Vec<DVector<f64>>> = tasks
        .par_iter()
        .enumerate()
        .map(|(t, (a, b))| {
            let mut r = rng.substream(t as u64 + 1);
            let (re, _) = reilluminate(a, b, cfg, &mut r)?;
            sim_samples(&a.frames, &re, cfg.log_epsilon)
        })
        .collect::<Result<_>>()?;
    Ok(per_task.into_iter().flatten().collect())
}

pub fn train_gsim(corpus: &[Vec<FaceSet>], cfg: &GsimConfig, rng: &Rng) -> Result<GsimModel> {
    let samples = gsim_samples(corpus, cfg, rng)?;
    let fit = fit_ppca_mixture(&samples, cfg.max_components, &mut rng.substream(0))?;
    Ok(GsimModel { mixture: fit.mixture, log_epsilon: cfg.log_epsilon, knn_k: cfg.knn_k, omega: cfg.omega, ga: cfg.ga.clone() })
}

/// Mean of the highest `⌈top_fraction · N⌉` log-likelihoods of the samples.
pub fn top_mean(mut scores: Vec<f64>, top_fraction: f64) -> Result<f64> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::InvalidParams(format!("top fraction {top_fraction} outside (0, 1]")));
    }
    if scores.is_empty() {
        return Err(Error::TooFewPoints { needed: 1, got: 0 });
    }
    scores.sort_by(|a, b| b.total_cmp(a));
    let m = ((top_fraction * scores.len() as f64).ceil() as usize).clamp(1, scores.len());
    Ok(scores[..m].iter().sum::<f64>() / m as f64)
}

/// Reilluminates `novel` in the gallery's illumination and scores the
/// postulated SIM samples under the model, keeping only the most likely.
pub fn robust_similarity(novel: &FaceSet, gallery: &FaceSet, model: &GsimModel, top_fraction: f64, rng: &mut Rng) -> Result<f64> {
    let (re, _) = reilluminate(novel, gallery, &model.config(), rng)?;
    let samples = sim_samples(&novel.frames, &re, model.log_epsilon)?;
    if samples[0].len() != model.mixture.components[0].mean.len() {
        return Err(Error::DimensionMismatch(model.mixture.components[0].mean.len(), samples[0].len()));
    }
    let dens = model.mixture.density();
    top_mean(samples.iter().map(|d| dens.log_pdf(d)).collect(), top_fraction)
}

/// Log-density of the model at the origin (no illumination change).
pub fn origin_log_density(model: &GsimModel) -> f64 {
    gmm::log_pdf(&model.mixture, &DVector::zeros(model.mixture.components[0].mean.len()))
}
