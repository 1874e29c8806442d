//! Online, temporally coherent Gaussian mixture.
//!
//! Points arrive one at a time. Each step updates the parameters at fixed
//! complexity, proposes to split every component into its *historical* part
//! (the oldest fit of the same complexity) and the *difference* absorbed
//! since, and merges pairs of components whenever the expected description
//! length says the pair is better explained by one Gaussian.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{self, Covariance, CovarianceKind, GaussianComponent, GaussianMixture, COV_FLOOR};
use crate::linalg::{floor_eigenvalues, log_sum_exp};
use crate::rng::Rng;

pub const SEED_POINTS: usize = 20;
pub const SEED_MAX_COMPONENTS: usize = 3;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IncGmmConfig {
    pub seed_points: usize,
    pub seed_max_components: usize,
    /// Evidence a component must gain since its snapshot before a split is proposed.
    /// `None` means two points per mean and covariance parameter, `D(D+3)`.
    pub min_split_evidence: Option<f64>,
}

impl Default for IncGmmConfig {
    fn default() -> Self {
        IncGmmConfig { seed_points: SEED_POINTS, seed_max_components: SEED_MAX_COMPONENTS, min_split_evidence: None }
    }
}

impl IncGmmConfig {
    pub fn min_evidence(&self, dim: usize) -> f64 {
        self.min_split_evidence.unwrap_or((dim * (dim + 3)) as f64)
    }
}

/// Current fit plus the historical snapshot it is compared against.
/// Components correspond by index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncGmmState {
    pub current: GaussianMixture,
    pub historical: GaussianMixture,
    pub n_seen: usize,
    pub n_seen_historical: usize,
}

/// What a [`step`] changed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepOutcome {
    pub splits: usize,
    pub merges: usize,
}

impl StepOutcome {
    pub fn order_changed(&self) -> bool {
        self.splits + self.merges > 0
    }
}

fn full(c: &Covariance) -> DMatrix<f64> {
    match c {
        Covariance::Full(m) => m.clone(),
        other => other.dense(),
    }
}

fn evidence_of(g: &GaussianMixture) -> Result<&DVector<f64>> {
    let e = g.evidence.as_ref().ok_or_else(|| Error::InvalidParams("mixture carries no evidence".into()))?;
    if e.len() != g.components.len() {
        return Err(Error::LengthMismatch(e.len(), g.components.len()));
    }
    Ok(e)
}

impl IncGmmState {
    /// Starts from a fitted mixture with evidence; the snapshot equals the fit.
    pub fn new(mut current: GaussianMixture, n_seen: usize) -> Result<Self> {
        evidence_of(&current)?;
        current.validate()?;
        for c in &mut current.components {
            c.cov = Covariance::Full(full(&c.cov));
        }
        Ok(IncGmmState { historical: current.clone(), current, n_seen, n_seen_historical: n_seen })
    }

    /// Batch MDL fit of full-covariance mixtures to the seed points.
    pub fn seed(points: &[DVector<f64>], max_components: usize, rng: &mut Rng) -> Result<Self> {
        let d = points.first().map_or(0, |p| p.len());
        let needed = d + 2;
        if points.len() < needed {
            return Err(Error::TooFewPoints { needed, got: points.len() });
        }
        let (mut g, _) = gmm::select_mdl(points, max_components, CovarianceKind::Full, rng)?;
        let dens = g.density();
        let mut e = DVector::zeros(g.components.len());
        for x in points {
            let (post, _) = dens.posterior(x);
            for (k, p) in post.iter().enumerate() {
                e[k] += p;
            }
        }
        g.evidence = Some(e);
        IncGmmState::new(g, points.len())
    }

    pub fn dim(&self) -> usize {
        self.current.dim
    }

    pub fn n_components(&self) -> usize {
        self.current.components.len()
    }

    pub fn evidence(&self) -> &DVector<f64> {
        self.current.evidence.as_ref().expect("state always carries evidence")
    }

    pub fn historical_evidence(&self) -> &DVector<f64> {
        self.historical.evidence.as_ref().expect("state always carries evidence")
    }

    pub fn validate(&self) -> Result<()> {
        let e = evidence_of(&self.current)?;
        let eh = evidence_of(&self.historical)?;
        if e.len() != eh.len() {
            return Err(Error::LengthMismatch(e.len(), eh.len()));
        }
        if self.n_seen_historical > self.n_seen {
            return Err(Error::InvalidParams("historical count exceeds current count".into()));
        }
        self.current.validate()?;
        self.historical.validate()
    }

    /// Historical snapshot replaced by the current fit.
    pub fn reset_snapshot(&mut self) {
        self.historical = self.current.clone();
        self.n_seen_historical = self.n_seen;
    }

    /// Component `i` of the data absorbed since the snapshot.
    pub fn difference(&self, i: usize) -> Result<GaussianComponent> {
        difference_component(
            &self.current.components[i],
            self.evidence()[i],
            &self.historical.components[i],
            self.historical_evidence()[i],
            self.n_seen - self.n_seen_historical,
        )
    }
}

/// One-point update at fixed complexity, assuming the responsibilities of
/// earlier points do not change.
pub fn fixed_update(state: &mut IncGmmState, x: &DVector<f64>) -> Result<()> {
    if x.len() != state.dim() {
        return Err(Error::DimensionMismatch(state.dim(), x.len()));
    }
    let (post, _) = state.current.density().posterior(x);
    let n1 = (state.n_seen + 1) as f64;
    let mut e = state.evidence().clone();
    for (i, c) in state.current.components.iter_mut().enumerate() {
        let p = post[i];
        let e_old = e[i];
        let e_new = e_old + p;
        if e_new > 0.0 && p > 0.0 {
            let mu = c.mean.clone();
            let mu_s = (&mu * e_old + x * p) / e_new;
            let cov = full(&c.cov);
            let mut m = cov + &mu * mu.transpose() - &mu * mu_s.transpose() - &mu_s * mu.transpose()
                + &mu_s * mu_s.transpose();
            m *= e_old;
            let r = x - &mu_s;
            m.ger(p, &r, &r, 1.0);
            m /= e_new;
            c.mean = mu_s;
            c.cov = Covariance::Full(m);
        }
        e[i] = e_new;
        c.prior = e_new / n1;
    }
    state.current.evidence = Some(e);
    state.n_seen += 1;
    Ok(())
}

/// Component describing the data a component absorbed after its historical snapshot.
/// `n_new` is the number of points seen since the snapshot. The covariance is floored
/// at [`COV_FLOOR`] so a burst of coincident points still yields a usable Gaussian.
pub fn difference_component(
    current: &GaussianComponent,
    e: f64,
    historical: &GaussianComponent,
    e_h: f64,
    n_new: usize,
) -> Result<GaussianComponent> {
    let e_n = e - e_h;
    if !(e_n > 0.0) || n_new == 0 {
        return Err(Error::NoNewEvidence);
    }
    if current.mean.len() != historical.mean.len() {
        return Err(Error::DimensionMismatch(current.mean.len(), historical.mean.len()));
    }
    let prior = (e_n / n_new as f64).min(1.0);
    // μ_n = (μE − μ_h E_h)/(E − E_h), written as an offset from μ
    let shift = &current.mean - &historical.mean;
    let mu_n = &current.mean + &shift * (e_h / e_n);
    // C_n = [C E − (C_h + μ_h μ_hᵀ) E_h + (μ_h μᵀ + μ μ_hᵀ) E_h − μ μᵀ E]/(E − E_h)
    //       + μ_n μᵀ + μ μ_nᵀ − μ_n μ_nᵀ,
    // regrouped so that every term is invariant to translating the data
    let mut c = (full(&current.cov) * e - full(&historical.cov) * e_h) / e_n;
    c.ger(-e_h / e_n, &shift, &shift, 1.0);
    let dn = &mu_n - &current.mean;
    c.ger(-1.0, &dn, &dn, 1.0);
    Ok(GaussianComponent { prior, mean: mu_n, cov: Covariance::Full(floor_eigenvalues(&c, COV_FLOOR)) })
}

/// `ln ∫ N(x; μ_a, C_a) N(x; μ_b, C_b) dx = ln N(μ_a; μ_b, C_a + C_b)`.
pub fn log_product_integral(a: &GaussianComponent, b: &GaussianComponent) -> Result<f64> {
    let s = full(&a.cov) + full(&b.cov);
    let s = (&s + s.transpose()) * 0.5;
    let chol = s.cholesky().ok_or(Error::SingularCovariance)?;
    let l = chol.l();
    let r = &a.mean - &b.mean;
    let z = l.solve_lower_triangular(&r).ok_or(Error::SingularCovariance)?;
    let log_det = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
    Ok(-0.5 * (r.len() as f64 * LN_2PI + log_det + z.norm_squared()))
}

/// Single Gaussian with the first two moments of the count-weighted pair.
pub fn moment_match(p1: &GaussianComponent, n1: f64, p2: &GaussianComponent, n2: f64) -> GaussianComponent {
    let a1 = n1 / (n1 + n2);
    let a2 = 1.0 - a1;
    let mean = &p1.mean * a1 + &p2.mean * a2;
    let d = &p1.mean - &p2.mean;
    let mut c = full(&p1.cov) * a1 + full(&p2.cov) * a2;
    c.ger(a1 * a2, &d, &d, 1.0);
    GaussianComponent { prior: p1.prior + p2.prior, mean, cov: Covariance::Full(c) }
}

fn check_count(n: f64) -> Result<()> {
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidParams(format!("component count must be positive, got {n}")));
    }
    Ok(())
}

/// `ΔE[L] = E[L_split] − E[L_merged]` in bits; positive favours merging.
pub fn expected_dl_delta(p1: &GaussianComponent, n1: f64, p2: &GaussianComponent, n2: f64) -> Result<f64> {
    check_count(n1)?;
    check_count(n2)?;
    if p1.mean.len() != p2.mean.len() {
        return Err(Error::DimensionMismatch(p1.mean.len(), p2.mean.len()));
    }
    let d = p1.mean.len() as f64;
    let ln2 = std::f64::consts::LN_2;
    let a1 = n1 / (n1 + n2);
    let a2 = n2 / (n1 + n2);
    let i11 = log_product_integral(p1, p1)?;
    let i12 = log_product_integral(p1, p2)?;
    let i22 = log_product_integral(p2, p2)?;
    let ln_split = n1 * log_sum_exp(&[a1.ln() + i11, a2.ln() + i12]) + n2 * log_sum_exp(&[a1.ln() + i12, a2.ln() + i22]);
    let m = moment_match(p1, n1, p2, n2);
    let ln_merged = n1 * log_product_integral(&m, p1)? + n2 * log_product_integral(&m, p2)?;
    Ok(0.25 * d * (d + 1.0) * (n1 + n2).log2() - ln_split / ln2 + ln_merged / ln2)
}

fn floored(mut c: GaussianComponent) -> GaussianComponent {
    c.cov = Covariance::Full(floor_eigenvalues(&full(&c.cov), COV_FLOOR));
    c
}

/// One stream step: fixed-complexity update, split proposals, pairwise merging.
/// A proposed split is committed when its own merge test keeps it apart
/// (`ΔE[L] ≤ 0`). A rejected proposal is a committed merge of the historical
/// and difference parts, so the snapshot is reset after every proposal as
/// well as after any change of order.
pub fn step(state: &mut IncGmmState, x: &DVector<f64>, cfg: &IncGmmConfig) -> Result<StepOutcome> {
    fixed_update(state, x)?;
    let min_ev = cfg.min_evidence(state.dim());
    let mut out = StepOutcome::default();
    let e = state.evidence().clone();
    let eh = state.historical_evidence().clone();
    let n_new = state.n_seen - state.n_seen_historical;

    let mut proposed = false;
    let mut comps: Vec<(GaussianComponent, f64)> = Vec::with_capacity(e.len() + 1);
    for i in 0..e.len() {
        let gained = e[i] - eh[i];
        if n_new > 0 && gained >= min_ev && eh[i] > 0.0 {
            proposed = true;
            let diff = state.difference(i)?;
            let hist = floored(state.historical.components[i].clone());
            if expected_dl_delta(&hist, eh[i], &diff, gained)? <= 0.0 {
                comps.push((hist, eh[i]));
                comps.push((diff, gained));
                out.splits += 1;
                continue;
            }
        }
        comps.push((state.current.components[i].clone(), e[i]));
    }

    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..comps.len() {
            for b in a + 1..comps.len() {
                let delta = expected_dl_delta(&comps[a].0, comps[a].1, &comps[b].0, comps[b].1)?;
                if delta > 0.0 && best.is_none_or(|(bd, _, _)| delta > bd) {
                    best = Some((delta, a, b));
                }
            }
        }
        let Some((_, a, b)) = best else { break };
        let (pb, nb) = comps.remove(b);
        let (pa, na) = comps[a].clone();
        comps[a] = (moment_match(&pa, na, &pb, nb), na + nb);
        out.merges += 1;
    }

    if out.order_changed() {
        let n = state.n_seen as f64;
        let evidence = DVector::from_iterator(comps.len(), comps.iter().map(|(_, ev)| *ev));
        state.current.components = comps
            .into_iter()
            .map(|(mut c, ev)| {
                c.prior = ev / n;
                c
            })
            .collect();
        state.current.evidence = Some(evidence);
    }
    if proposed || out.order_changed() {
        state.reset_snapshot();
    }
    Ok(out)
}

/// Seeds on the first `cfg.seed_points` points and streams the rest in order.
pub fn fit_stream(points: &[DVector<f64>], cfg: &IncGmmConfig, rng: &mut Rng) -> Result<IncGmmState> {
    let k = cfg.seed_points.min(points.len());
    let mut state = IncGmmState::seed(&points[..k], cfg.seed_max_components, rng)?;
    for x in &points[k..] {
        step(&mut state, x, cfg)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::synth;
    use proptest::prelude::*;

    fn comp(mean: &[f64], cov: DMatrix<f64>) -> GaussianComponent {
        GaussianComponent { prior: 1.0, mean: DVector::from_column_slice(mean), cov: Covariance::Full(cov) }
    }

    fn single_state(mean: &[f64], cov: DMatrix<f64>, e: f64) -> IncGmmState {
        let mut g = GaussianMixture::single(DVector::from_column_slice(mean), Covariance::Full(cov));
        g.evidence = Some(DVector::from_element(1, e));
        IncGmmState::new(g, e as usize).unwrap()
    }

    fn outer(v: &DVector<f64>) -> DMatrix<f64> {
        v * v.transpose()
    }

    #[test]
    fn one_component_update_matches_hand_algebra() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let mut s = single_state(&[1.0, 2.0], cov.clone(), 4.0);
        let x = DVector::from_vec(vec![3.0, -2.0]);
        fixed_update(&mut s, &x).unwrap();
        let mu = DVector::from_vec(vec![1.0, 2.0]);
        let mu_s = (&mu * 4.0 + &x) / 5.0;
        // pooled second moment about the new mean
        let c_s = ((&cov + outer(&(&mu - &mu_s))) * 4.0 + outer(&(&x - &mu_s))) / 5.0;
        let c = &s.current.components[0];
        assert!((&c.mean - &mu_s).norm() < 1e-12);
        assert!((c.cov.dense() - c_s).norm() < 1e-12);
        assert_eq!(s.evidence()[0], 5.0);
        assert_eq!(s.n_seen, 5);
        assert_eq!(c.prior, 1.0);
    }

    #[test]
    fn update_at_the_mean_shrinks_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 3.0]);
        let mut s = single_state(&[0.5, -1.0], cov.clone(), 9.0);
        fixed_update(&mut s, &DVector::from_vec(vec![0.5, -1.0])).unwrap();
        let c = &s.current.components[0];
        assert_eq!(c.mean, DVector::from_vec(vec![0.5, -1.0]));
        assert!((c.cov.dense() - cov * 0.9).norm() < 1e-14);
    }

    #[test]
    fn wholly_assigned_stream_reproduces_batch_moments() {
        let mut rng = Rng::new(11);
        let centres = [[0.0, 0.0], [1e3, 0.0], [0.0, 1e3]];
        let mut groups: Vec<Vec<DVector<f64>>> = vec![Vec::new(); 3];
        let mut stream = Vec::new();
        for t in 0..300 {
            let k = if t < 15 { t % 3 } else { rng.below(3) };
            let c = &centres[k];
            let x = DVector::from_vec(vec![c[0] + rng.normal(), c[1] + 0.5 * rng.normal()]);
            groups[k].push(x.clone());
            stream.push((k, x));
        }
        // seed with the batch fit of the first five points of each group
        let mut comps = Vec::new();
        let mut ev = Vec::new();
        for g in &groups {
            let first: Vec<_> = g[..5].to_vec();
            let m = crate::linalg::mean(&first);
            comps.push(GaussianComponent {
                prior: 1.0 / 3.0,
                mean: m.clone(),
                cov: Covariance::Full(crate::linalg::covariance(&first, &m)),
            });
            ev.push(5.0);
        }
        let g = GaussianMixture { dim: 2, components: comps, evidence: Some(DVector::from_vec(ev)) };
        let mut s = IncGmmState::new(g, 15).unwrap();
        for (_, x) in &stream[15..] {
            fixed_update(&mut s, x).unwrap();
        }
        for (k, g) in groups.iter().enumerate() {
            let m = crate::linalg::mean(g);
            let c = crate::linalg::covariance(g, &m);
            let got = &s.current.components[k];
            assert!((&got.mean - &m).norm() < 1e-9, "mean {k}");
            assert!((got.cov.dense() - c).norm() < 1e-9, "cov {k}");
            assert!((got.prior - g.len() as f64 / 300.0).abs() < 1e-12);
        }
    }

    #[test]
    fn difference_of_identical_snapshot_is_an_error() {
        let s = single_state(&[0.0, 0.0], DMatrix::identity(2, 2), 10.0);
        assert!(matches!(s.difference(0), Err(Error::NoNewEvidence)));
    }

    #[test]
    fn difference_recovers_a_burst_at_one_location() {
        let mut s = single_state(&[0.0, 0.0], DMatrix::identity(2, 2), 10.0);
        let z = DVector::from_vec(vec![0.7, -0.2]);
        for _ in 0..5 {
            fixed_update(&mut s, &z).unwrap();
        }
        let d = s.difference(0).unwrap();
        assert!((&d.mean - &z).norm() < 1e-6);
        assert!(d.prior > 0.0 && d.prior <= 1.0);
        assert!((d.prior - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn difference_equals_batch_fit_of_new_points(seed in 0u64..500, n_old in 4usize..20, n_new in 3usize..20) {
            let mut rng = Rng::new(seed);
            let pts: Vec<DVector<f64>> = (0..n_old + n_new)
                .map(|_| DVector::from_vec(vec![3.0 + rng.normal(), -1.0 + 2.0 * rng.normal(), rng.normal()]))
                .collect();
            let old = &pts[..n_old];
            let m = crate::linalg::mean(old);
            let mut g = GaussianMixture::single(m.clone(), Covariance::Full(crate::linalg::covariance(old, &m)));
            g.evidence = Some(DVector::from_element(1, n_old as f64));
            let mut s = IncGmmState::new(g, n_old).unwrap();
            for x in &pts[n_old..] {
                fixed_update(&mut s, x).unwrap();
            }
            let new = &pts[n_old..];
            let mn = crate::linalg::mean(new);
            let cn = floor_eigenvalues(&crate::linalg::covariance(new, &mn), COV_FLOOR);
            let d = s.difference(0).unwrap();
            prop_assert!((&d.mean - &mn).norm() < 1e-9);
            prop_assert!((d.cov.dense() - cn).norm() < 1e-9);
        }

        #[test]
        fn priors_sum_to_one_after_every_update(seed in 0u64..200) {
            let mut rng = Rng::new(seed);
            let g = GaussianMixture {
                dim: 2,
                components: vec![
                    GaussianComponent { prior: 0.25, mean: DVector::from_vec(vec![0.0, 0.0]), cov: Covariance::Full(DMatrix::identity(2, 2)) },
                    GaussianComponent { prior: 0.75, mean: DVector::from_vec(vec![2.0, 1.0]), cov: Covariance::Full(DMatrix::identity(2, 2) * 0.5) },
                ],
                evidence: Some(DVector::from_vec(vec![2.0, 6.0])),
            };
            let mut s = IncGmmState::new(g, 8).unwrap();
            let cfg = IncGmmConfig::default();
            for _ in 0..40 {
                let x = DVector::from_vec(vec![2.0 * rng.normal(), 2.0 * rng.normal()]);
                step(&mut s, &x, &cfg).unwrap();
                let total: f64 = s.current.components.iter().map(|c| c.prior).sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                prop_assert!((s.evidence().sum() - s.n_seen as f64).abs() < 1e-9);
                prop_assert_eq!(s.current.components.len(), s.historical.components.len());
            }
        }

        #[test]
        fn identical_components_favour_merging(n1 in 1.0f64..1e4, n2 in 1.0f64..1e4, v in 0.01f64..100.0) {
            let c = comp(&[1.0, -3.0], DMatrix::from_row_slice(2, 2, &[v, 0.1 * v, 0.1 * v, 2.0 * v]));
            let delta = expected_dl_delta(&c, n1, &c, n2).unwrap();
            let complexity = 1.5 * (n1 + n2).log2();
            prop_assert!(delta > 0.0);
            prop_assert!((delta - complexity).abs() < 1e-6 * complexity.max(1.0) * (n1 + n2));
        }
    }

    #[test]
    fn product_integral_matches_quadrature() {
        let c = comp(&[0.0], DMatrix::identity(1, 1));
        let closed = log_product_integral(&c, &c).unwrap().exp();
        // Simpson on [-12, 12]
        let n = 4000;
        let h = 24.0 / n as f64;
        let f = |x: f64| (-(x * x)).exp() / (2.0 * std::f64::consts::PI);
        let mut s = f(-12.0) + f(12.0);
        for k in 1..n {
            let x = -12.0 + k as f64 * h;
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        let quad = s * h / 3.0;
        assert!((quad - closed).abs() < 1e-12);
        assert!((closed - 0.28209).abs() < 1e-5);
        assert!((closed - 0.5 / std::f64::consts::PI.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn product_integral_2d_matches_grid_sum() {
        let a = comp(&[0.3, -0.2], DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.8]));
        let b = comp(&[-0.5, 0.6], DMatrix::from_row_slice(2, 2, &[0.6, -0.1, -0.1, 1.5]));
        let da = gmm::ComponentDensity::new(&a);
        let db = gmm::ComponentDensity::new(&b);
        let h = 0.02;
        let mut s = 0.0;
        for i in 0..800 {
            for j in 0..800 {
                let x = DVector::from_vec(vec![-8.0 + i as f64 * h, -8.0 + j as f64 * h]);
                s += (da.weighted_log_density(&x) + db.weighted_log_density(&x)).exp();
            }
        }
        let grid = s * h * h;
        let closed = log_product_integral(&a, &b).unwrap().exp();
        assert!((grid - closed).abs() < 1e-8 * closed.max(1.0), "{grid} {closed}");
    }

    #[test]
    fn far_apart_components_stay_split() {
        let a = comp(&[0.0, 0.0], DMatrix::identity(2, 2));
        let b = comp(&[20.0, 0.0], DMatrix::identity(2, 2));
        assert!(expected_dl_delta(&a, 1e3, &b, 1e3).unwrap() < 0.0);
    }

    #[test]
    fn merge_is_moment_matched() {
        let a = comp(&[0.0], DMatrix::from_element(1, 1, 1.0));
        let b = comp(&[4.0], DMatrix::from_element(1, 1, 2.0));
        let m = moment_match(&a, 1.0, &b, 3.0);
        // 0.25·N(0,1) + 0.75·N(4,2): mean 3, variance E[x²] − 9
        let ex2 = 0.25 * 1.0 + 0.75 * (2.0 + 16.0);
        assert!((m.mean[0] - 3.0).abs() < 1e-15);
        assert!((m.cov.dense()[(0, 0)] - (ex2 - 9.0)).abs() < 1e-14);
    }

    fn seeded(rng: &mut Rng) -> IncGmmState {
        let pts: Vec<_> = (0..SEED_POINTS).map(|_| DVector::from_vec(vec![rng.normal(), rng.normal()])).collect();
        let mut g = GaussianMixture::single(crate::linalg::mean(&pts), Covariance::Full(DMatrix::identity(2, 2)));
        g.evidence = Some(DVector::from_element(1, SEED_POINTS as f64));
        IncGmmState::new(g, SEED_POINTS).unwrap()
    }

    #[test]
    fn stationary_stream_keeps_one_component() {
        let mut rng = Rng::new(5);
        let mut s = seeded(&mut rng);
        let cfg = IncGmmConfig::default();
        for t in 0..1000 {
            let x = DVector::from_vec(vec![rng.normal(), rng.normal()]);
            step(&mut s, &x, &cfg).unwrap();
            assert_eq!(s.n_components(), 1, "step {t}");
        }
    }

    #[test]
    fn jump_to_a_far_mode_adds_a_component() {
        let mut rng = Rng::new(6);
        let mut s = seeded(&mut rng);
        let cfg = IncGmmConfig::default();
        for _ in 0..200 {
            step(&mut s, &DVector::from_vec(vec![rng.normal(), rng.normal()]), &cfg).unwrap();
        }
        assert_eq!(s.n_components(), 1);
        for _ in 0..200 {
            step(&mut s, &DVector::from_vec(vec![30.0 + rng.normal(), rng.normal()]), &cfg).unwrap();
        }
        assert_eq!(s.n_components(), 2, "{:#?}", s.current);
        let mut xs: Vec<f64> = s.current.components.iter().map(|c| c.mean[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert!(xs[0].abs() < 0.5 && (xs[1] - 30.0).abs() < 0.5, "{xs:?}");
    }

    #[test]
    fn checkpoint_resumes_to_the_same_state() {
        let mut rng = Rng::new(2);
        let pts = synth::temporally_ordered(&synth::radial_gaussian(100, &mut rng));
        let cfg = IncGmmConfig::default();
        let full = fit_stream(&pts, &cfg, &mut Rng::new(9)).unwrap();
        let mut half = fit_stream(&pts[..60], &cfg, &mut Rng::new(9)).unwrap();
        let json = serde_json::to_string(&half).unwrap();
        half = serde_json::from_str(&json).unwrap();
        for x in &pts[60..] {
            step(&mut half, x, &cfg).unwrap();
        }
        assert_eq!(half, full);
    }

    #[test]
    fn seed_reports_too_few_points() {
        let pts = vec![DVector::from_vec(vec![0.0, 0.0]); 3];
        assert!(matches!(IncGmmState::seed(&pts, 3, &mut Rng::new(0)), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn synthetic_sets_match_batch_description_length() {
        let cfg = IncGmmConfig::default();
        for (name, gen, n) in [("radial", synth::radial_gaussian as fn(usize, &mut Rng) -> Vec<DVector<f64>>, 100), ("sinusoid", synth::sinusoid, 80)] {
            let mut rel = 0.0;
            for seed in 0..10u64 {
                let mut rng = Rng::new(seed);
                let pts = synth::temporally_ordered(&gen(n, &mut rng));
                let s = fit_stream(&pts, &cfg, &mut rng.substream(1)).unwrap();
                let inc = gmm::description_length(&s.current, &pts);
                let (batch, _) = gmm::select_mdl(&pts, gmm::TRAIN_MAX_COMPONENTS, CovarianceKind::Full, &mut rng.substream(2)).unwrap();
                let b = gmm::description_length(&batch, &pts);
                rel += (inc - b).abs() / b.abs();
                eprintln!("{name} seed {seed}: inc {inc:.1} ({} comps) batch {b:.1} ({} comps)", s.n_components(), batch.n_components());
            }
            rel /= 10.0;
            assert!(rel <= 0.15, "{name}: mean relative DL gap {rel}");
        }
    }
}
