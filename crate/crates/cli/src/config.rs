//! Run configuration: one JSON file whose sections mirror the library's
//! config types. Command-line flags override the file.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use manifold_match::divergence::MddConfig;
use manifold_match::filters::{FilterKind, FilterTag};
use manifold_match::gmm::{CovarianceKind, TRAIN_MAX_COMPONENTS};
use manifold_match::gsim::GsimConfig;
use manifold_match::inc_gmm::IncGmmConfig;
use manifold_match::kernel::KernelRadConfig;
use manifold_match::manifold_space::ClusterConfig;
use manifold_match::subspace::{BompaConfig, DEFAULT_CONSTRAINT_DIM, DEFAULT_MSM_ANGLES, DEFAULT_MSM_DIM};
use manifold_match::{dataset, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_SEED: u64 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mdd,
    Krad,
    Msm,
    Cmsm,
    Bompa,
    Mpmm,
    Gsim,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mdd => "mdd",
            Method::Krad => "krad",
            Method::Msm => "msm",
            Method::Cmsm => "cmsm",
            Method::Bompa => "bompa",
            Method::Mpmm => "mpmm",
            Method::Gsim => "gsim",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    RadialGaussian,
    Sinusoid,
    TwoClassBlobs,
    PlantedLighting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// Point count for the 2-D generators; `None` means 100 radial, 80 sinusoid.
    pub points: Option<usize>,
    /// Reorder point sets by nearest-neighbour chaining.
    pub temporal_order: bool,
    pub sequences_per_class: usize,
    pub persons: usize,
    pub lights: Vec<f64>,
    pub frames: usize,
    /// Image side in pixels.
    pub size: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            points: None,
            temporal_order: true,
            sequences_per_class: 4,
            persons: 4,
            lights: vec![1.0, 1.6, 0.6],
            frames: 20,
            size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub max_components: usize,
    pub covariance: CovarianceKind,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection { max_components: TRAIN_MAX_COMPONENTS, covariance: CovarianceKind::Full }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubspaceSection {
    pub dim: usize,
    pub angles: usize,
    /// Directions kept in the constraint subspace learnt for `cmsm`.
    pub constraint_dim: usize,
}

impl Default for SubspaceSection {
    fn default() -> Self {
        SubspaceSection { dim: DEFAULT_MSM_DIM, angles: DEFAULT_MSM_ANGLES, constraint_dim: DEFAULT_CONSTRAINT_DIM }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GsimSection {
    pub train: GsimConfig,
    /// A model written by `fit --method gsim`; when absent one is trained on the corpus.
    pub model: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub method: Option<Method>,
    pub filter: Option<FilterKind>,
    pub synth: SynthSection,
    pub fit: FitSection,
    pub subspace: SubspaceSection,
    pub mdd: MddConfig,
    pub krad: KernelRadConfig,
    pub bompa: BompaConfig,
    pub gsim: GsimSection,
    pub cluster: ClusterConfig,
    pub stream: IncGmmConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => dataset::load_json(p),
            None => Ok(RunConfig::default()),
        }
    }

    /// `MM_SEED` beats `--seed`, which beats the file.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> u64 {
        let seed = manifold_match::rng::seed_from_env(flag.or(self.seed).unwrap_or(DEFAULT_SEED));
        self.seed = Some(seed);
        seed
    }

    /// A filter flag keeps the file's parameters when it names the same filter.
    pub fn override_filter(&mut self, tag: Option<FilterTag>) {
        if let Some(t) = tag {
            if self.filter.as_ref().is_none_or(|f| f.kind != t) {
                self.filter = Some(FilterKind::new(t));
            }
        }
    }

    pub fn filter(&self) -> FilterKind {
        self.filter.clone().unwrap_or(FilterKind::new(FilterTag::Raw))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 3}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"subspace": {"dims": 3}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"mdd": {"mc_sample": 3}}"#).is_err());
    }

    #[test]
    fn partial_sections_take_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"subspace": {"dim": 4}, "mdd": {"mc_samples": 10}}"#).unwrap();
        assert_eq!(c.subspace.dim, 4);
        assert_eq!(c.subspace.angles, DEFAULT_MSM_ANGLES);
        assert_eq!(c.mdd.mc_samples, 10);
        assert_eq!(c.mdd.max_components, MddConfig::default().max_components);
    }

    #[test]
    fn default_config_round_trips() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn filter_flag_keeps_params_of_same_filter() {
        let mut c: RunConfig = serde_json::from_str(r#"{"filter": {"kind": "HP", "params": {"sigma": 2.5}}}"#).unwrap();
        c.override_filter(Some(FilterTag::Hp));
        assert_eq!(c.filter().sigma(), 2.5);
        c.override_filter(Some(FilterTag::Dx));
        assert_eq!(c.filter(), FilterKind::new(FilterTag::Dx));
    }
}
