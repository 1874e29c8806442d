//! Kullback-Leibler and resistor-average divergences between densities,
//! and the divergence-ranking recogniser built on them.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{self, CovarianceKind, GaussianComponent, GaussianMixture};
use crate::rng::Rng;

pub const DEFAULT_MC_SAMPLES: usize = 1000;
pub const DENSITY_FLOOR: f64 = 1e-300;
const MC_CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    PToQ,
    QToP,
    Rad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Nats,
    Bits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceEstimate {
    pub value: f64,
    /// Monte-Carlo standard error; zero for closed forms.
    pub stderr: f64,
    pub mc_samples: usize,
    pub direction: Direction,
    pub unit: Unit,
}

/// Closed-form `D_KL(p‖q)` between two Gaussians, in bits.
pub fn kl_gaussian(p: &GaussianComponent, q: &GaussianComponent) -> Result<f64> {
    let d = p.mean.len();
    if q.mean.len() != d {
        return Err(Error::DimensionMismatch(d, q.mean.len()));
    }
    let sp = p.cov.dense();
    let sq = q.cov.dense();
    let lq = sq.clone().cholesky().ok_or(Error::SingularCovariance)?;
    let lp = sp.clone().cholesky().ok_or(Error::SingularCovariance)?;
    let ld = |l: &nalgebra::DMatrix<f64>| 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
    let log_det_ratio = ld(&lq.l()) - ld(&lp.l());
    let trace = lq.solve(&sp).trace();
    let dm = &q.mean - &p.mean;
    let maha = dm.dot(&lq.solve(&dm));
    let nats = 0.5 * (log_det_ratio + trace + maha - d as f64);
    Ok(nats.max(0.0) / std::f64::consts::LN_2)
}

/// Monte-Carlo `D_KL(p‖q)` in nats from `m_samples` draws of `p`.
///
/// Draws are generated in fixed-size chunks, each from its own substream of
/// `rng`, and reduced in chunk order; the estimate is independent of the
/// thread count.
pub fn kl_mc(p: &GaussianMixture, q: &GaussianMixture, m_samples: usize, rng: &mut Rng) -> Result<DivergenceEstimate> {
    if m_samples == 0 {
        return Err(Error::InvalidParams("m_samples must be at least 1".into()));
    }
    if p.dim != q.dim {
        return Err(Error::DimensionMismatch(p.dim, q.dim));
    }
    let dp = p.density();
    let dq = q.density();
    let floor = DENSITY_FLOOR.ln();
    let base = rng.substream(0x6b6c);
    let n_chunks = m_samples.div_ceil(MC_CHUNK);
    let sums: Vec<(f64, f64)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let n = MC_CHUNK.min(m_samples - c * MC_CHUNK);
            let mut r = base.substream(c as u64);
            let xs = gmm::sample(p, n, &mut r);
            let mut s = 0.0;
            let mut s2 = 0.0;
            for x in &xs {
                let v = dp.log_pdf(x).max(floor) - dq.log_pdf(x).max(floor);
                s += v;
                s2 += v * v;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let m = m_samples as f64;
    let mean = s / m;
    let var = if m_samples > 1 { ((s2 - m * mean * mean) / (m - 1.0)).max(0.0) } else { 0.0 };
    Ok(DivergenceEstimate {
        value: mean,
        stderr: (var / m).sqrt(),
        mc_samples: m_samples,
        direction: Direction::PToQ,
        unit: Unit::Nats,
    })
}

/// Resistor-average combination `(d_pq⁻¹ + d_qp⁻¹)⁻¹`; zero when either side is zero.
pub fn rad(d_pq: f64, d_qp: f64) -> Result<f64> {
    if d_pq < 0.0 || d_qp < 0.0 || d_pq.is_nan() || d_qp.is_nan() {
        return Err(Error::NegativeInput);
    }
    if d_pq == 0.0 || d_qp == 0.0 {
        return Ok(0.0);
    }
    // a·b/(a+b) is exact for equal inputs and symmetric in its arguments
    Ok(d_pq * d_qp / (d_pq + d_qp))
}

/// Settings of the divergence-ranking recogniser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MddConfig {
    pub mc_samples: usize,
    pub max_components: usize,
    pub covariance: CovarianceKind,
}

impl Default for MddConfig {
    fn default() -> Self {
        MddConfig { mc_samples: DEFAULT_MC_SAMPLES, max_components: gmm::TEST_MAX_COMPONENTS, covariance: CovarianceKind::Diagonal }
    }
}

/// Ranks gallery densities by `D_KL(test‖gallery)` ascending.
/// The test density is fitted with MDL order selection.
pub fn mdd_classify(
    test: &[DVector<f64>],
    gallery: &[(String, GaussianMixture)],
    cfg: &MddConfig,
    rng: &mut Rng,
) -> Result<Vec<(String, f64)>> {
    if gallery.is_empty() {
        return Err(Error::InvalidParams("gallery is empty".into()));
    }
    let mut fit_rng = rng.substream(0);
    let (p, _) = gmm::select_mdl(test, cfg.max_components, cfg.covariance, &mut fit_rng)?;
    mdd_rank(&p, gallery, cfg.mc_samples, rng)
}

/// Ranking step of [`mdd_classify`] for an already fitted test density.
pub fn mdd_rank(
    p: &GaussianMixture,
    gallery: &[(String, GaussianMixture)],
    mc_samples: usize,
    rng: &Rng,
) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::with_capacity(gallery.len());
    for (i, (label, q)) in gallery.iter().enumerate() {
        let mut r = rng.substream(1000 + i as u64);
        out.push((label.clone(), kl_mc(p, q, mc_samples, &mut r)?.value));
    }
    out.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(out)
}
