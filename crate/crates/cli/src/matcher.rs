//! Dispatch from `--method` to the library's set-to-set scores.

use manifold_match::dataset::{image_to_vector, FaceSet};
use manifold_match::divergence::kl_mc;
use manifold_match::eval::{LabeledSet, ScoreDirection};
use manifold_match::filters::{apply_filter, FilterKind, FilterTag};
use manifold_match::gmm::{select_mdl, GaussianMixture};
use manifold_match::gsim::{robust_similarity, train_gsim, GsimModel};
use manifold_match::kernel::robust_kernel_rad;
use manifold_match::subspace::{
    bompa_from_models, cmsm_similarity, constraint_subspace, manifold_model, mpmm_similarity, msm_similarity, pca_subspace,
    probabilistic_subspace, AngleWeights, LinearSubspace, ManifoldModel, ProbabilisticSubspace, SubspaceDim,
};
use manifold_match::{dataset, Error, Result, Rng};
use rayon::prelude::*;

use crate::config::{Method, RunConfig};

// Substreams of the run seed. Every per-set fit draws from the same stream and
// so does every comparison, so identical sets get identical models and a
// pair's score does not depend on where it sits in a batch.
const FIT_STREAM: u64 = 1;
const COMPARE_STREAM: u64 = 2;
const GSIM_TRAIN_STREAM: u64 = 3;

/// Whatever a method needs from one set before comparing it with another.
pub enum SetModel {
    Frames,
    Subspace(LinearSubspace),
    Probabilistic(ProbabilisticSubspace),
    Mixture(GaussianMixture),
    Manifold(ManifoldModel),
}

pub struct Matcher<'a> {
    pub method: Method,
    cfg: &'a RunConfig,
    constraint: Option<LinearSubspace>,
    gsim: Option<GsimModel>,
    rng: Rng,
}

impl<'a> Matcher<'a> {
    /// `corpus` supplies the per-person class subspaces behind the `cmsm`
    /// constraint and, without a saved model, the `gsim` training data.
    pub fn new(method: Method, cfg: &'a RunConfig, corpus: &[LabeledSet], rng: &Rng) -> Result<Self> {
        let constraint = match method {
            Method::Cmsm => Some(learn_constraint(corpus, cfg)?),
            _ => None,
        };
        let gsim = match method {
            Method::Gsim => Some(match &cfg.gsim.model {
                Some(path) => dataset::load_json(path)?,
                None => train_gsim(&group_by_person(corpus), &cfg.gsim.train, &rng.substream(GSIM_TRAIN_STREAM))?,
            }),
            _ => None,
        };
        Ok(Matcher { method, cfg, constraint, gsim, rng: rng.clone() })
    }

    pub fn direction(&self) -> ScoreDirection {
        match self.method {
            Method::Mdd | Method::Krad => ScoreDirection::Distance,
            _ => ScoreDirection::Similarity,
        }
    }

    /// Flips divergences so that larger is always more similar.
    pub fn similarity(&self, raw: f64) -> f64 {
        match self.direction() {
            ScoreDirection::Distance => -raw,
            ScoreDirection::Similarity => raw,
        }
    }

    pub fn model(&self, set: &FaceSet) -> Result<SetModel> {
        let dim = SubspaceDim::Fixed(self.cfg.subspace.dim);
        let mut rng = self.rng.substream(FIT_STREAM);
        Ok(match self.method {
            Method::Msm | Method::Cmsm => SetModel::Subspace(pca_subspace(&set.frames, dim, false)?),
            Method::Mpmm => SetModel::Probabilistic(probabilistic_subspace(&set.frames, dim)?),
            Method::Mdd => {
                let m = &self.cfg.mdd;
                SetModel::Mixture(select_mdl(&set.frames, m.max_components, m.covariance, &mut rng)?.0)
            }
            Method::Bompa => SetModel::Manifold(manifold_model(set, &self.cfg.bompa, &mut rng)?),
            Method::Krad | Method::Gsim => SetModel::Frames,
        })
    }

    pub fn models(&self, sets: &[LabeledSet]) -> Result<Vec<SetModel>> {
        sets.par_iter().map(|s| self.model(&s.set)).collect()
    }

    /// Raw score in the method's own direction.
    pub fn compare(&self, a: &FaceSet, ma: &SetModel, b: &FaceSet, mb: &SetModel) -> Result<f64> {
        let mut rng = self.rng.substream(COMPARE_STREAM);
        let angles = self.cfg.subspace.angles;
        match (self.method, ma, mb) {
            (Method::Msm, SetModel::Subspace(ua), SetModel::Subspace(ub)) => msm_similarity(ua, ub, angles),
            (Method::Cmsm, SetModel::Subspace(ua), SetModel::Subspace(ub)) => {
                cmsm_similarity(ua, ub, self.constraint.as_ref().expect("constraint learnt in new"), angles)
            }
            (Method::Mpmm, SetModel::Probabilistic(pa), SetModel::Probabilistic(pb)) => Ok(mpmm_similarity(pa, pb)?.log_score),
            (Method::Mdd, SetModel::Mixture(pa), SetModel::Mixture(pb)) => Ok(kl_mc(pa, pb, self.cfg.mdd.mc_samples, &mut rng)?.value),
            (Method::Bompa, SetModel::Manifold(ga), SetModel::Manifold(gb)) => {
                let w = AngleWeights::uniform(angles);
                bompa_from_models(ga, gb, &w, &w, self.cfg.bompa.alpha)
            }
            (Method::Krad, _, _) => robust_kernel_rad(a, b, &self.cfg.krad, &mut rng),
            (Method::Gsim, _, _) => {
                let model = self.gsim.as_ref().expect("model loaded in new");
                robust_similarity(a, b, model, self.cfg.gsim.train.top_fraction, &mut rng)
            }
            _ => Err(Error::InvalidParams(format!("set model does not fit method {}", self.method.name()))),
        }
    }

    pub fn score(&self, a: &FaceSet, b: &FaceSet) -> Result<f64> {
        self.compare(a, &self.model(a)?, b, &self.model(b)?)
    }
}

/// Sequences grouped by person, in first-appearance order.
pub fn group_by_person(corpus: &[LabeledSet]) -> Vec<Vec<FaceSet>> {
    let mut ids: Vec<&str> = Vec::new();
    let mut groups: Vec<Vec<FaceSet>> = Vec::new();
    for s in corpus {
        match ids.iter().position(|&p| p == s.person_id) {
            Some(i) => groups[i].push(s.set.clone()),
            None => {
                ids.push(&s.person_id);
                groups.push(vec![s.set.clone()]);
            }
        }
    }
    groups
}

/// Constraint subspace of the per-person subspaces of the pooled frames.
fn learn_constraint(corpus: &[LabeledSet], cfg: &RunConfig) -> Result<LinearSubspace> {
    let classes: Vec<LinearSubspace> = group_by_person(corpus)
        .par_iter()
        .map(|sets| {
            let frames: Vec<_> = sets.iter().flat_map(|s| s.frames.iter().cloned()).collect();
            pca_subspace(&frames, SubspaceDim::Fixed(cfg.subspace.dim), false)
        })
        .collect::<Result<_>>()?;
    constraint_subspace(&classes, Some(cfg.subspace.constraint_dim))
}

pub fn filter_set(kind: &FilterKind, set: &FaceSet) -> Result<FaceSet> {
    if kind.kind == FilterTag::Raw {
        return Ok(set.clone());
    }
    let frames = (0..set.len()).map(|i| apply_filter(kind, &set.image(i)).map(|img| image_to_vector(&img))).collect::<Result<_>>()?;
    Ok(FaceSet { frames, ..set.clone() })
}

pub fn filter_sets(kind: &FilterKind, sets: Vec<LabeledSet>) -> Result<Vec<LabeledSet>> {
    sets.into_par_iter().map(|s| Ok(LabeledSet { set: filter_set(kind, &s.set)?, ..s })).collect()
}
