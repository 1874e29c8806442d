//! Gaussian mixtures: EM with k-means initialisation, MDL order selection,
//! two-stage PPCA fitting, sampling and log-density evaluation.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, lex_cmp, log_sum_exp, sym_eigen_desc};
use crate::rng::Rng;

pub const COV_FLOOR: f64 = 1e-6;
pub const KMEANS_RESTARTS: usize = 10;
pub const KMEANS_ITERS: usize = 100;
pub const EM_TOL: f64 = 1e-6;
pub const EM_MAX_ITERS: usize = 300;
pub const PPCA_ENERGY: f64 = 0.95;
/// Typical mixture orders: training manifolds, test manifolds and the two-stage PPCA sweep.
pub const TRAIN_MAX_COMPONENTS: usize = 18;
pub const TEST_MAX_COMPONENTS: usize = 5;
pub const PPCA_MAX_COMPONENTS: usize = 3;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Covariance family requested from the fitting routines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Diagonal,
    Full,
    /// Principal subspace of the given rank plus isotropic noise.
    Ppca(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Covariance {
    Diagonal(DVector<f64>),
    Full(DMatrix<f64>),
    /// `C = V diag(λ) Vᵀ + σ² (I − V Vᵀ)`; `eigenvalues` are the total variances along `V`.
    Ppca { basis: DMatrix<f64>, eigenvalues: DVector<f64>, noise: f64 },
}

impl Covariance {
    pub fn dim(&self) -> usize {
        match self {
            Covariance::Diagonal(d) => d.len(),
            Covariance::Full(m) => m.nrows(),
            Covariance::Ppca { basis, .. } => basis.nrows(),
        }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        match self {
            Covariance::Diagonal(d) => DMatrix::from_diagonal(d),
            Covariance::Full(m) => m.clone(),
            Covariance::Ppca { basis, eigenvalues, noise } => {
                let d = basis.nrows();
                let mut c = DMatrix::identity(d, d) * *noise;
                for j in 0..basis.ncols() {
                    let v = basis.column(j);
                    c.ger(eigenvalues[j] - noise, &v, &v, 1.0);
                }
                c
            }
        }
    }

    /// Free parameters of one component's covariance.
    pub fn n_params(&self) -> usize {
        let d = self.dim();
        match self {
            Covariance::Diagonal(_) => d,
            Covariance::Full(_) => d * (d + 1) / 2,
            Covariance::Ppca { basis, .. } => {
                let q = basis.ncols();
                d * q - q * q.saturating_sub(1) / 2 + 1
            }
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            Covariance::Diagonal(_) => "diagonal",
            Covariance::Full(_) => "full",
            Covariance::Ppca { .. } => "ppca",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ComponentRepr", into = "ComponentRepr")]
pub struct GaussianComponent {
    pub prior: f64,
    pub mean: DVector<f64>,
    pub cov: Covariance,
}

#[derive(Serialize, Deserialize)]
struct ComponentRepr {
    prior: f64,
    mean: Vec<f64>,
    cov_kind: String,
    cov_payload: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct PpcaPayload {
    basis: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    noise: f64,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().cloned().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], ncols_if_empty: usize) -> std::result::Result<DMatrix<f64>, String> {
    let c = rows.first().map_or(ncols_if_empty, |r| r.len());
    if rows.iter().any(|r| r.len() != c) {
        return Err("ragged matrix".into());
    }
    Ok(DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j]))
}

impl From<GaussianComponent> for ComponentRepr {
    fn from(c: GaussianComponent) -> Self {
        let payload = match &c.cov {
            Covariance::Diagonal(d) => serde_json::json!(d.iter().collect::<Vec<_>>()),
            Covariance::Full(m) => serde_json::json!(rows_of(m)),
            Covariance::Ppca { basis, eigenvalues, noise } => serde_json::to_value(PpcaPayload {
                basis: rows_of(basis),
                eigenvalues: eigenvalues.iter().cloned().collect(),
                noise: *noise,
            })
            .expect("plain data"),
        };
        ComponentRepr {
            prior: c.prior,
            mean: c.mean.iter().cloned().collect(),
            cov_kind: c.cov.kind_name().to_string(),
            cov_payload: payload,
        }
    }
}

impl TryFrom<ComponentRepr> for GaussianComponent {
    type Error = String;
    fn try_from(r: ComponentRepr) -> std::result::Result<Self, String> {
        let d = r.mean.len();
        let cov = match r.cov_kind.as_str() {
            "diagonal" => {
                let v: Vec<f64> = serde_json::from_value(r.cov_payload).map_err(|e| e.to_string())?;
                Covariance::Diagonal(DVector::from_vec(v))
            }
            "full" => {
                let rows: Vec<Vec<f64>> = serde_json::from_value(r.cov_payload).map_err(|e| e.to_string())?;
                Covariance::Full(matrix_from_rows(&rows, d)?)
            }
            "ppca" => {
                let p: PpcaPayload = serde_json::from_value(r.cov_payload).map_err(|e| e.to_string())?;
                let q = p.eigenvalues.len();
                let basis = if p.basis.is_empty() { DMatrix::zeros(d, q) } else { matrix_from_rows(&p.basis, q)? };
                Covariance::Ppca { basis, eigenvalues: DVector::from_vec(p.eigenvalues), noise: p.noise }
            }
            other => return Err(format!("unknown cov_kind '{other}'")),
        };
        if cov.dim() != d {
            return Err(format!("covariance dimension {} does not match mean dimension {d}", cov.dim()));
        }
        Ok(GaussianComponent { prior: r.prior, mean: DVector::from_vec(r.mean), cov })
    }
}

/// Cached factorisation of one component for repeated density evaluation.
#[derive(Clone, Debug)]
pub struct ComponentDensity {
    mean: DVector<f64>,
    /// `ln α − ½ (D ln 2π + ln |C|)`
    log_weight: f64,
    form: DensityForm,
}

#[derive(Clone, Debug)]
enum DensityForm {
    Diagonal(DVector<f64>),
    Full(DMatrix<f64>),
    Ppca { basis: DMatrix<f64>, inv_eig: DVector<f64>, inv_noise: f64 },
}

impl ComponentDensity {
    pub fn new(c: &GaussianComponent) -> Self {
        let d = c.mean.len() as f64;
        let (log_det, form) = match &c.cov {
            Covariance::Diagonal(v) => (v.iter().map(|x| x.ln()).sum(), DensityForm::Diagonal(v.map(|x| 1.0 / x))),
            Covariance::Full(m) => {
                let l = linalg::robust_cholesky(m);
                let ld = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
                (ld, DensityForm::Full(l))
            }
            Covariance::Ppca { basis, eigenvalues, noise } => {
                let q = basis.ncols() as f64;
                let ld = eigenvalues.iter().map(|x| x.ln()).sum::<f64>() + (d - q) * noise.ln();
                (
                    ld,
                    DensityForm::Ppca {
                        basis: basis.clone(),
                        inv_eig: eigenvalues.map(|x| 1.0 / x),
                        inv_noise: 1.0 / noise,
                    },
                )
            }
        };
        ComponentDensity { mean: c.mean.clone(), log_weight: c.prior.ln() - 0.5 * (d * LN_2PI + log_det), form }
    }

    /// Squared Mahalanobis distance `(x−μ)ᵀ C⁻¹ (x−μ)`.
    pub fn mahalanobis2(&self, x: &DVector<f64>) -> f64 {
        let r = x - &self.mean;
        match &self.form {
            DensityForm::Diagonal(inv) => r.iter().zip(inv.iter()).map(|(a, b)| a * a * b).sum(),
            DensityForm::Full(l) => {
                let z = l.solve_lower_triangular(&r).expect("cholesky factor is non-singular");
                z.norm_squared()
            }
            DensityForm::Ppca { basis, inv_eig, inv_noise } => {
                // Woodbury: C⁻¹ = V Λ⁻¹ Vᵀ + σ⁻² (I − V Vᵀ)
                let p = basis.tr_mul(&r);
                let inside: f64 = p.iter().zip(inv_eig.iter()).map(|(a, b)| a * a * b).sum();
                let resid = (r.norm_squared() - p.norm_squared()).max(0.0);
                inside + resid * inv_noise
            }
        }
    }

    /// `ln α + ln N(x; μ, C)`
    pub fn weighted_log_density(&self, x: &DVector<f64>) -> f64 {
        self.log_weight - 0.5 * self.mahalanobis2(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub dim: usize,
    pub components: Vec<GaussianComponent>,
    /// Per-component soft counts `E_i = Σ_j p(i | x_j)`.
    #[serde(default)]
    pub evidence: Option<DVector<f64>>,
}

/// Density evaluator with every component factorised once.
#[derive(Clone, Debug)]
pub struct MixtureDensity {
    comps: Vec<ComponentDensity>,
}

impl MixtureDensity {
    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let terms: Vec<f64> = self.comps.iter().map(|c| c.weighted_log_density(x)).collect();
        log_sum_exp(&terms)
    }

    /// Posterior component probabilities `p(i | x)` and `ln p(x)`.
    pub fn posterior(&self, x: &DVector<f64>) -> (Vec<f64>, f64) {
        let terms: Vec<f64> = self.comps.iter().map(|c| c.weighted_log_density(x)).collect();
        let lse = log_sum_exp(&terms);
        let post = if lse.is_finite() {
            terms.iter().map(|t| (t - lse).exp()).collect()
        } else {
            // every component underflows: share the point equally
            vec![1.0 / terms.len() as f64; terms.len()]
        };
        (post, lse)
    }

    /// `ln p(x)` for every point; parallel over fixed chunks, results in input order.
    pub fn log_pdf_batch(&self, data: &[DVector<f64>]) -> Vec<f64> {
        data.par_iter().with_min_len(64).map(|x| self.log_pdf(x)).collect()
    }
}

impl GaussianMixture {
    pub fn single(mean: DVector<f64>, cov: Covariance) -> Self {
        GaussianMixture { dim: mean.len(), components: vec![GaussianComponent { prior: 1.0, mean, cov }], evidence: None }
    }

    pub fn density(&self) -> MixtureDensity {
        MixtureDensity { comps: self.components.iter().map(ComponentDensity::new).collect() }
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Free parameters `N_E`: priors, means and covariances.
    pub fn n_free_params(&self) -> usize {
        let m = self.components.len();
        m.saturating_sub(1) + self.components.iter().map(|c| self.dim + c.cov.n_params()).sum::<usize>()
    }

    /// Sorts components by lexicographic mean order, permuting evidence alongside.
    pub fn canonicalize(&mut self) {
        let mut idx: Vec<usize> = (0..self.components.len()).collect();
        idx.sort_by(|&a, &b| lex_cmp(&self.components[a].mean, &self.components[b].mean));
        self.components = idx.iter().map(|&i| self.components[i].clone()).collect();
        if let Some(e) = &self.evidence {
            self.evidence = Some(DVector::from_iterator(idx.len(), idx.iter().map(|&i| e[i])));
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s: f64 = self.components.iter().map(|c| c.prior).sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParams(format!("priors sum to {s}")));
        }
        for c in &self.components {
            if c.mean.len() != self.dim || c.cov.dim() != self.dim {
                return Err(Error::DimensionMismatch(self.dim, c.mean.len()));
            }
        }
        Ok(())
    }
}

pub fn log_pdf(gmm: &GaussianMixture, x: &DVector<f64>) -> f64 {
    gmm.density().log_pdf(x)
}

/// Total natural-log likelihood of `data`.
pub fn log_likelihood(gmm: &GaussianMixture, data: &[DVector<f64>]) -> f64 {
    gmm.density().log_pdf_batch(data).iter().sum()
}

/// `L = ½ N_E log2 N − log2 P(data | θ)` in bits.
pub fn description_length(gmm: &GaussianMixture, data: &[DVector<f64>]) -> f64 {
    let n = data.len() as f64;
    0.5 * gmm.n_free_params() as f64 * n.log2() - log_likelihood(gmm, data) / std::f64::consts::LN_2
}

pub fn sample(gmm: &GaussianMixture, n: usize, rng: &mut Rng) -> Vec<DVector<f64>> {
    if n == 0 {
        return Vec::new();
    }
    let priors: Vec<f64> = gmm.components.iter().map(|c| c.prior).collect();
    let factors: Vec<DMatrix<f64>> = gmm
        .components
        .iter()
        .map(|c| match &c.cov {
            Covariance::Full(m) => linalg::robust_cholesky(m),
            _ => DMatrix::zeros(0, 0),
        })
        .collect();
    let d = gmm.dim;
    (0..n)
        .map(|_| {
            let k = rng.categorical(&priors);
            let c = &gmm.components[k];
            let z = DVector::from_fn(d, |_, _| rng.normal());
            match &c.cov {
                Covariance::Diagonal(v) => &c.mean + z.zip_map(v, |a, b| a * b.sqrt()),
                Covariance::Full(_) => &c.mean + &factors[k] * z,
                Covariance::Ppca { basis, eigenvalues, noise } => {
                    let p = basis.tr_mul(&z);
                    let resid = &z - basis * &p;
                    let inside = basis * p.zip_map(eigenvalues, |a, l| a * l.sqrt());
                    &c.mean + inside + resid * noise.sqrt()
                }
            }
        })
        .collect()
}

fn sq_dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Result of Lloyd's k-means: centres, hard labels and within-cluster sum of squares.
#[derive(Clone, Debug)]
pub struct KMeans {
    pub centers: Vec<DVector<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
}

/// k-means with k-means++ seeding, `restarts` runs of at most `max_iters` Lloyd steps; best inertia wins.
pub fn kmeans(data: &[DVector<f64>], k: usize, restarts: usize, max_iters: usize, rng: &mut Rng) -> KMeans {
    let mut best: Option<KMeans> = None;
    for r in 0..restarts.max(1) {
        let mut sub = rng.substream(r as u64);
        let run = kmeans_once(data, k, max_iters, &mut sub);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    best.expect("at least one restart")
}

fn kmeans_once(data: &[DVector<f64>], k: usize, max_iters: usize, rng: &mut Rng) -> KMeans {
    let n = data.len();
    let mut centers = vec![data[rng.below(n)].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 { rng.categorical(&d2) } else { rng.below(n) };
        centers.push(data[idx].clone());
        for (i, x) in data.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, centers.last().unwrap()));
        }
    }
    let mut labels = vec![0usize; n];
    for it in 0..max_iters {
        let mut changed = false;
        for (i, x) in data.iter().enumerate() {
            let mut bl = 0;
            let mut bd = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let d = sq_dist(x, c);
                if d < bd {
                    bd = d;
                    bl = j;
                }
            }
            if labels[i] != bl || it == 0 {
                changed |= labels[i] != bl;
                labels[i] = bl;
            }
        }
        if !changed && it > 0 {
            break;
        }
        for (j, c) in centers.iter_mut().enumerate() {
            let members: Vec<&DVector<f64>> = data.iter().zip(&labels).filter(|(_, &l)| l == j).map(|(x, _)| x).collect();
            if !members.is_empty() {
                let mut m = DVector::zeros(c.len());
                for x in &members {
                    m += *x;
                }
                *c = m / members.len() as f64;
            }
        }
    }
    let inertia = data.iter().zip(&labels).map(|(x, &l)| sq_dist(x, &centers[l])).sum();
    KMeans { centers, labels, inertia }
}

/// Maximum-likelihood PPCA of rank `q` from a scatter matrix, with variance floor.
pub fn ppca_from_scatter(s: &DMatrix<f64>, q: usize) -> Covariance {
    let d = s.nrows();
    let q = q.min(d.saturating_sub(1));
    let (vals, vecs) = sym_eigen_desc(s);
    let noise = if d > q { (vals.rows(q, d - q).iter().map(|v| v.max(0.0)).sum::<f64>() / (d - q) as f64).max(COV_FLOOR) } else { COV_FLOOR };
    let eig = DVector::from_iterator(q, vals.iter().take(q).map(|v| v.max(noise)));
    Covariance::Ppca { basis: vecs.columns(0, q).into_owned(), eigenvalues: eig, noise }
}

fn covariance_from_scatter(s: &DMatrix<f64>, kind: CovarianceKind) -> Covariance {
    match kind {
        CovarianceKind::Diagonal => Covariance::Diagonal(s.diagonal().map(|v| v.max(COV_FLOOR))),
        CovarianceKind::Full => Covariance::Full(linalg::floor_eigenvalues(s, COV_FLOOR)),
        CovarianceKind::Ppca(q) => ppca_from_scatter(s, q),
    }
}

/// Weighted mean and scatter (normalised by the weight total).
fn weighted_stats(data: &[DVector<f64>], w: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
    let d = data[0].len();
    let nk: f64 = w.iter().sum();
    // accumulate offsets from the first point: exact when all points coincide
    let origin = &data[0];
    let mut off = DVector::zeros(d);
    for (x, &wi) in data.iter().zip(w) {
        off.axpy(wi, &(x - origin), 1.0);
    }
    let mu = origin + off / nk;
    let mut s = DMatrix::zeros(d, d);
    for (x, &wi) in data.iter().zip(w) {
        if wi > 0.0 {
            let r = x - &mu;
            s.ger(wi, &r, &r, 1.0);
        }
    }
    s /= nk;
    (nk, mu, s)
}

/// E-step: responsibilities (row per point) and total log-likelihood.
fn e_step(gmm: &GaussianMixture, data: &[DVector<f64>]) -> (Vec<Vec<f64>>, f64) {
    let dens = gmm.density();
    let out: Vec<(Vec<f64>, f64)> = data.par_iter().with_min_len(64).map(|x| dens.posterior(x)).collect();
    let ll = out.iter().map(|(_, l)| *l).sum();
    (out.into_iter().map(|(r, _)| r).collect(), ll)
}

/// EM fit that also returns the log-likelihood recorded at every E-step.
pub fn fit_em_traced(
    data: &[DVector<f64>],
    n_components: usize,
    kind: CovarianceKind,
    rng: &mut Rng,
) -> Result<(GaussianMixture, Vec<f64>)> {
    if n_components == 0 {
        return Err(Error::InvalidParams("n_components must be at least 1".into()));
    }
    if data.len() < n_components || data.is_empty() {
        return Err(Error::TooFewPoints { needed: n_components.max(1), got: data.len() });
    }
    let d = data[0].len();
    if let Some(bad) = data.iter().find(|x| x.len() != d) {
        return Err(Error::DimensionMismatch(d, bad.len()));
    }
    // sorted copy: the fit then depends on the multiset only, not on input order
    let mut pts = data.to_vec();
    pts.sort_by(lex_cmp);
    let n = pts.len();

    let km = kmeans(&pts, n_components, KMEANS_RESTARTS, KMEANS_ITERS, rng);
    let global_mu = linalg::mean(&pts);
    let global_s = linalg::covariance(&pts, &global_mu);
    let mut comps = Vec::with_capacity(n_components);
    for j in 0..n_components {
        let w: Vec<f64> = km.labels.iter().map(|&l| if l == j { 1.0 } else { 0.0 }).collect();
        let cnt: f64 = w.iter().sum();
        let (mean, s) = if cnt >= 2.0 {
            let (_, mu, s) = weighted_stats(&pts, &w);
            (mu, s)
        } else {
            (km.centers[j].clone(), global_s.clone())
        };
        comps.push(GaussianComponent { prior: cnt.max(1.0) / n as f64, mean, cov: covariance_from_scatter(&s, kind) });
    }
    let total: f64 = comps.iter().map(|c| c.prior).sum();
    comps.iter_mut().for_each(|c| c.prior /= total);
    let mut gmm = GaussianMixture { dim: d, components: comps, evidence: None };

    let mut trace = Vec::new();
    let mut iter = 0;
    loop {
        let (resp, ll) = e_step(&gmm, &pts);
        let converged = trace.last().is_some_and(|&prev: &f64| (ll - prev) / (n as f64) < EM_TOL);
        trace.push(ll);
        let evidence = DVector::from_fn(n_components, |i, _| resp.iter().map(|r| r[i]).sum::<f64>());
        if converged || iter >= EM_MAX_ITERS {
            gmm.evidence = Some(evidence);
            break;
        }
        for i in 0..n_components {
            if evidence[i] < 1e-10 {
                return Err(Error::DegenerateCluster(i));
            }
            let w: Vec<f64> = resp.iter().map(|r| r[i]).collect();
            let (nk, mu, s) = weighted_stats(&pts, &w);
            gmm.components[i] = GaussianComponent { prior: nk / n as f64, mean: mu, cov: covariance_from_scatter(&s, kind) };
        }
        iter += 1;
    }
    gmm.canonicalize();
    Ok((gmm, trace))
}

pub fn fit_em(data: &[DVector<f64>], n_components: usize, kind: CovarianceKind, rng: &mut Rng) -> Result<GaussianMixture> {
    fit_em_traced(data, n_components, kind, rng).map(|(g, _)| g)
}

/// Fits `M = 1..=max_components` and keeps the minimum description length.
/// Orders that cannot be fitted get an infinite entry in the returned lengths.
pub fn select_mdl(
    data: &[DVector<f64>],
    max_components: usize,
    kind: CovarianceKind,
    rng: &mut Rng,
) -> Result<(GaussianMixture, Vec<f64>)> {
    if max_components == 0 {
        return Err(Error::InvalidParams("max_components must be at least 1".into()));
    }
    let mut dls = Vec::with_capacity(max_components);
    let mut best: Option<(f64, GaussianMixture)> = None;
    let mut first_err = None;
    for m in 1..=max_components {
        let mut sub = rng.substream(m as u64);
        match fit_em(data, m, kind, &mut sub) {
            Ok(g) => {
                let dl = description_length(&g, data);
                dls.push(dl);
                if best.as_ref().is_none_or(|(b, _)| dl < *b) {
                    best = Some((dl, g));
                }
            }
            Err(e) => {
                dls.push(f64::INFINITY);
                first_err.get_or_insert(e);
            }
        }
    }
    match best {
        Some((_, g)) => Ok((g, dls)),
        None => Err(first_err.expect("some order failed")),
    }
}

/// Outcome of the two-stage fit.
#[derive(Clone, Debug)]
pub struct PpcaFit {
    pub mixture: GaussianMixture,
    pub intrinsic_dim: usize,
    pub stage1_dl: f64,
    pub stage2_dl: f64,
}

/// Smallest `k` whose leading eigenvalues hold `energy` of the total.
pub fn energy_rank(eigenvalues: &[f64], energy: f64) -> usize {
    let total: f64 = eigenvalues.iter().map(|v| v.max(0.0)).sum();
    if total <= 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (k, v) in eigenvalues.iter().enumerate() {
        acc += v.max(0.0);
        if acc >= energy * total * (1.0 - 1e-12) {
            return k + 1;
        }
    }
    eigenvalues.len()
}

/// Two-stage PPCA mixture: diagonal MDL fit, intrinsic dimension from the
/// prior-weighted mean eigenspectrum of the component scatters, then an MDL
/// fit with PPCA components of that rank.
pub fn fit_ppca_mixture(data: &[DVector<f64>], max_components: usize, rng: &mut Rng) -> Result<PpcaFit> {
    if data.len() <= 3 {
        return Err(Error::TooFewPoints { needed: 4, got: data.len() });
    }
    let d = data[0].len();
    let mut r1 = rng.substream(1);
    let (stage1, dls1) = select_mdl(data, max_components, CovarianceKind::Diagonal, &mut r1)?;
    let stage1_dl = dls1.iter().cloned().fold(f64::INFINITY, f64::min);
    let dens = stage1.density();
    let resp: Vec<Vec<f64>> = data.iter().map(|x| dens.posterior(x).0).collect();
    let mut spectrum = DVector::zeros(d);
    for (i, c) in stage1.components.iter().enumerate() {
        let w: Vec<f64> = resp.iter().map(|r| r[i]).collect();
        if w.iter().sum::<f64>() <= 0.0 {
            continue;
        }
        let (_, _, s) = weighted_stats(data, &w);
        spectrum += sym_eigen_desc(&s).0 * c.prior;
    }
    let q = energy_rank(spectrum.as_slice(), PPCA_ENERGY).clamp(usize::from(d > 1), d.saturating_sub(1));
    let mut r2 = rng.substream(2);
    let (mixture, dls2) = select_mdl(data, max_components, CovarianceKind::Ppca(q), &mut r2)?;
    let stage2_dl = dls2.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(PpcaFit { mixture, intrinsic_dim: q, stage1_dl, stage2_dl })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn blob(rng: &mut Rng, center: &[f64], sd: f64, n: usize) -> Vec<DVector<f64>> {
        (0..n).map(|_| DVector::from_iterator(center.len(), center.iter().map(|c| c + sd * rng.normal()))).collect()
    }

    #[test]
    fn repeated_point_collapses_to_floor() {
        let data = vec![DVector::from_vec(vec![0.3, -1.0]); 10];
        let g = fit_em(&data, 1, CovarianceKind::Diagonal, &mut Rng::new(0)).unwrap();
        assert_eq!(g.components[0].mean, data[0]);
        match &g.components[0].cov {
            Covariance::Diagonal(v) => assert!(v.iter().all(|&x| x == COV_FLOOR)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn separated_blobs_recovered() {
        let mut rng = Rng::new(3);
        let mut data = blob(&mut rng, &[0.0, 0.0], 0.5, 200);
        data.extend(blob(&mut rng, &[8.0, 5.0], 0.5, 200));
        let oracle_a = linalg::mean(&data[..200]);
        let oracle_b = linalg::mean(&data[200..]);
        let g = fit_em(&data, 2, CovarianceKind::Full, &mut rng).unwrap();
        assert!((&g.components[0].mean - oracle_a).norm() < 0.05);
        assert!((&g.components[1].mean - oracle_b).norm() < 0.05);
        let e = g.evidence.as_ref().unwrap();
        assert!((e.sum() - 400.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_points() {
        let data = vec![DVector::from_vec(vec![1.0])];
        assert!(matches!(fit_em(&data, 2, CovarianceKind::Full, &mut Rng::new(0)), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn one_blob_selects_single_component() {
        let mut rng = Rng::new(4);
        let data = blob(&mut rng, &[1.0, 2.0, 3.0], 0.1, 300);
        let (g, dls) = select_mdl(&data, 4, CovarianceKind::Full, &mut rng).unwrap();
        assert_eq!(dls.len(), 4);
        assert_eq!(g.n_components(), 1);
        assert!(dls[0] < dls[1]);
    }

    #[test]
    fn free_parameter_counts() {
        let full = GaussianMixture {
            dim: 3,
            components: vec![
                GaussianComponent { prior: 0.5, mean: DVector::zeros(3), cov: Covariance::Full(DMatrix::identity(3, 3)) };
                2
            ],
            evidence: None,
        };
        // M−1 + MD + MD(D+1)/2 with M=2, D=3
        assert_eq!(full.n_free_params(), 1 + 6 + 12);
        let mut diag = full.clone();
        for c in &mut diag.components {
            c.cov = Covariance::Diagonal(DVector::from_element(3, 1.0));
        }
        // M−1 + 2MD
        assert_eq!(diag.n_free_params(), 1 + 12);
    }

    #[test]
    fn select_mdl_permutation_invariant() {
        let mut rng = Rng::new(9);
        let mut data = blob(&mut rng, &[0.0, 0.0], 1.0, 60);
        data.extend(blob(&mut rng, &[4.0, 1.0], 0.7, 60));
        let (g1, dl1) = select_mdl(&data, 3, CovarianceKind::Full, &mut Rng::new(5)).unwrap();
        let mut shuffled = data.clone();
        rng.shuffle(&mut shuffled);
        let (g2, dl2) = select_mdl(&shuffled, 3, CovarianceKind::Full, &mut Rng::new(5)).unwrap();
        for (a, b) in dl1.iter().zip(&dl2) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(g1.n_components(), g2.n_components());
        for (a, b) in g1.components.iter().zip(&g2.components) {
            assert!((&a.mean - &b.mean).norm() < 1e-9);
        }
    }

    #[test]
    fn plane_in_ten_dims_has_rank_two() {
        let mut rng = Rng::new(12);
        let basis = linalg::orthonormal_columns(&DMatrix::from_fn(10, 2, |_, _| rng.normal()), 1e-12);
        let data: Vec<DVector<f64>> = (0..300)
            .map(|_| {
                let c = DVector::from_vec(vec![3.0 * rng.normal(), 2.0 * rng.normal()]);
                &basis * c + DVector::from_fn(10, |_, _| 1e-3 * rng.normal())
            })
            .collect();
        let fit = fit_ppca_mixture(&data, 3, &mut rng).unwrap();
        assert_eq!(fit.intrinsic_dim, 2);
        assert!(fit.stage2_dl <= fit.stage1_dl);
    }

    #[test]
    fn sample_edge_cases() {
        let g = GaussianMixture::single(DVector::zeros(2), Covariance::Full(DMatrix::identity(2, 2)));
        assert!(sample(&g, 0, &mut Rng::new(0)).is_empty());
        let two = GaussianMixture {
            dim: 1,
            components: vec![
                GaussianComponent { prior: 1.0, mean: DVector::from_vec(vec![-50.0]), cov: Covariance::Diagonal(DVector::from_vec(vec![1.0])) },
                GaussianComponent { prior: 0.0, mean: DVector::from_vec(vec![50.0]), cov: Covariance::Diagonal(DVector::from_vec(vec![1.0])) },
            ],
            evidence: None,
        };
        assert!(sample(&two, 1000, &mut Rng::new(1)).iter().all(|x| x[0] < 0.0));
    }

    #[test]
    fn sample_mean_clt_bound() {
        let g = GaussianMixture::single(DVector::zeros(3), Covariance::Full(DMatrix::identity(3, 3)));
        let xs = sample(&g, 100_000, &mut Rng::new(2));
        let m = linalg::mean(&xs);
        assert!(m.iter().all(|v| v.abs() < 0.02), "{m}");
    }

    #[test]
    fn standard_normal_log_pdf() {
        let g = GaussianMixture::single(DVector::zeros(1), Covariance::Diagonal(DVector::from_vec(vec![1.0])));
        assert!((log_pdf(&g, &DVector::zeros(1)) - (-0.918_938_533_204_672_7)).abs() < 1e-15);
    }

    #[test]
    fn ppca_matches_dense_evaluation() {
        let mut rng = Rng::new(21);
        for trial in 0..20 {
            let d = 3 + trial % 5;
            let q = 1 + trial % (d - 1);
            let basis = linalg::orthonormal_columns(&DMatrix::from_fn(d, q, |_, _| rng.normal()), 1e-12);
            let noise = 0.1 + rng.uniform();
            let eig = DVector::from_fn(q, |_, _| noise + 5.0 * rng.uniform());
            let mean = DVector::from_fn(d, |_, _| rng.normal());
            let ppca = GaussianMixture::single(mean.clone(), Covariance::Ppca { basis, eigenvalues: eig, noise });
            let dense = GaussianMixture::single(mean, Covariance::Full(ppca.components[0].cov.dense()));
            for _ in 0..5 {
                let x = DVector::from_fn(d, |_, _| 2.0 * rng.normal());
                assert!((log_pdf(&ppca, &x) - log_pdf(&dense, &x)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn mixture_log_pdf_bounds_components() {
        let g = GaussianMixture {
            dim: 1,
            components: vec![
                GaussianComponent { prior: 0.3, mean: DVector::from_vec(vec![0.0]), cov: Covariance::Diagonal(DVector::from_vec(vec![1.0])) },
                GaussianComponent { prior: 0.7, mean: DVector::from_vec(vec![2.0]), cov: Covariance::Diagonal(DVector::from_vec(vec![0.5])) },
            ],
            evidence: None,
        };
        let x = DVector::from_vec(vec![0.7]);
        let dens = g.density();
        let lp = dens.log_pdf(&x);
        for c in &dens.comps {
            assert!(lp >= c.weighted_log_density(&x));
        }
    }

    #[test]
    fn own_samples_match_entropy() {
        // E[ln p(x)] = −½ (D ln 2πe + ln|C|), Var = D/2
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let g = GaussianMixture::single(DVector::from_vec(vec![1.0, -1.0]), Covariance::Full(c.clone()));
        let xs = sample(&g, 10_000, &mut Rng::new(8));
        let lp: Vec<f64> = g.density().log_pdf_batch(&xs);
        let mean = lp.iter().sum::<f64>() / lp.len() as f64;
        let expect = -0.5 * (2.0 * (LN_2PI + 1.0) + linalg::log_det_spd(&c));
        let sd = (1.0f64 / 10_000.0).sqrt();
        assert!((mean - expect).abs() < 3.0 * sd, "{mean} vs {expect}");
    }

    #[test]
    fn json_layout() {
        let g = GaussianMixture::single(DVector::from_vec(vec![1.0, 2.0]), Covariance::Diagonal(DVector::from_vec(vec![0.5, 0.25])));
        let v = serde_json::to_value(&g).unwrap();
        assert_eq!(v["dim"], 2);
        assert_eq!(v["components"][0]["cov_kind"], "diagonal");
        assert_eq!(v["components"][0]["cov_payload"][1], 0.25);
        let back: GaussianMixture = serde_json::from_value(v).unwrap();
        assert_eq!(back, g);
        let ppca = GaussianMixture::single(
            DVector::from_vec(vec![0.0, 0.0, 0.0]),
            ppca_from_scatter(&DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0, 0.1])), 1),
        );
        let s = serde_json::to_string(&ppca).unwrap();
        assert_eq!(serde_json::from_str::<GaussianMixture>(&s).unwrap(), ppca);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn em_log_likelihood_non_decreasing(seed in 0u64..10_000, k in 1usize..4, kind_ix in 0usize..3) {
            let mut rng = Rng::new(seed);
            let mut data = blob(&mut rng, &[0.0, 0.0, 0.0], 1.0, 40);
            data.extend(blob(&mut rng, &[3.0, 0.0, 1.0], 0.6, 40));
            let kind = [CovarianceKind::Diagonal, CovarianceKind::Full, CovarianceKind::Ppca(1)][kind_ix];
            if let Ok((_, trace)) = fit_em_traced(&data, k, kind, &mut rng) {
                for w in trace.windows(2) {
                    prop_assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
                }
            }
        }
    }
}
