use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use manifold_match::dataset::{self, SequenceManifest};
use manifold_match::eval::{self, LabeledSet, ScoreDirection};
use manifold_match::gmm::{select_mdl, GaussianMixture};
use manifold_match::gsim::train_gsim;
use manifold_match::inc_gmm::{self, IncGmmConfig, IncGmmState};
use manifold_match::manifold_space::{class_count, cluster_manifolds, manifold_subspaces};
use manifold_match::subspace::{LinearSubspace, SubspaceDim};
use manifold_match::{synth, Error, Result, Rng};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::{Generator, Method, RunConfig};
use crate::matcher::{filter_set, filter_sets, group_by_person, Matcher};

pub struct Ctx {
    pub cfg: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Ctx {
    fn rng(&self) -> Rng {
        Rng::new(self.seed)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn manifest(&self) -> Result<SequenceManifest> {
        let path = self.cfg.manifest.as_ref().ok_or_else(|| Error::InvalidParams("no manifest given (--manifest or \"manifest\")".into()))?;
        SequenceManifest::load(path)
    }

    fn method(&self) -> Result<Method> {
        self.cfg.method.ok_or_else(|| Error::InvalidParams("no method given (--method or \"method\")".into()))
    }

    /// Every sequence of the manifest, filtered.
    fn corpus(&self) -> Result<Vec<LabeledSet>> {
        filter_sets(&self.cfg.filter(), eval::load_labeled_sets(&self.manifest()?)?)
    }

    /// Records the effective configuration. Output directory and thread
    /// count do not affect results and are left out.
    fn finish(&self) -> Result<()> {
        let cfg = RunConfig { out: None, jobs: None, ..self.cfg.clone() };
        dataset::save_json(self.path("config.json"), &cfg)
    }
}

/// `person/sequence`.
pub fn parse_sequence_ref(s: &str) -> Result<(String, String)> {
    match s.split_once('/') {
        Some((p, q)) if !p.is_empty() && !q.is_empty() => Ok((p.to_string(), q.to_string())),
        _ => Err(Error::InvalidParams(format!("sequence reference '{s}' is not person/sequence"))),
    }
}

fn find(corpus: &[LabeledSet], (person, seq): &(String, String)) -> Result<usize> {
    corpus
        .iter()
        .position(|s| &s.person_id == person && &s.sequence_id == seq)
        .ok_or_else(|| Error::MissingSequence(format!("{person}/{seq}")))
}

fn direction_name(d: ScoreDirection) -> &'static str {
    match d {
        ScoreDirection::Similarity => "similarity",
        ScoreDirection::Distance => "distance",
    }
}

fn csv_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.12e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

#[derive(Serialize)]
struct SynthReport {
    generator: Generator,
    seed: u64,
    /// Points for the 2-D generators, sequences for the corpora.
    count: usize,
    /// SHA-256 of the written corpus, for the image generators.
    #[serde(skip_serializing_if = "Option::is_none")]
    checksum: Option<String>,
}

pub fn synth(ctx: &Ctx, generator: Generator) -> Result<()> {
    let s = &ctx.cfg.synth;
    let mut rng = ctx.rng();
    let (count, checksum) = match generator {
        Generator::RadialGaussian | Generator::Sinusoid => {
            let (default_n, f): (usize, fn(usize, &mut Rng) -> Vec<DVector<f64>>) = match generator {
                Generator::RadialGaussian => (100, synth::radial_gaussian),
                _ => (80, synth::sinusoid),
            };
            let n = s.points.unwrap_or(default_n);
            let mut pts = f(n, &mut rng);
            if s.temporal_order {
                pts = synth::temporally_ordered(&pts);
            }
            dataset::save_matrix(ctx.path("points.csv"), &synth::points_to_matrix(&pts)?)?;
            (n, None)
        }
        Generator::TwoClassBlobs | Generator::PlantedLighting => {
            let sets = match generator {
                Generator::TwoClassBlobs => synth::two_class_blobs(&mut rng, s.sequences_per_class, s.frames, s.size),
                _ => synth::planted_lighting_corpus(&mut rng, s.persons, &s.lights, s.frames, s.size),
            };
            synth::write_corpus(&ctx.out, &sets)?;
            (sets.len(), Some(synth::corpus_checksum(&ctx.out)?))
        }
    };
    dataset::save_json(ctx.path("synth.json"), &SynthReport { generator, seed: ctx.seed, count, checksum })?;
    ctx.finish()
}

fn load_points(path: &Path) -> Result<Vec<DVector<f64>>> {
    Ok(synth::matrix_to_points(&dataset::load_matrix(path)?))
}

pub fn fit(ctx: &Ctx, points: Option<&Path>, sequence: Option<&str>) -> Result<()> {
    let mut rng = ctx.rng();
    if ctx.cfg.method == Some(Method::Gsim) {
        let model = train_gsim(&group_by_person(&ctx.corpus()?), &ctx.cfg.gsim.train, &rng)?;
        dataset::save_json(ctx.path("gsim_model.json"), &model)?;
        return ctx.finish();
    }
    // Point sets use the `fit` section; image sequences the `mdd` one, as
    // the recogniser does: a full pixel-space covariance from one short
    // sequence is ill-posed and very slow.
    let (data, max_components, covariance) = match (points, sequence) {
        (Some(p), None) => (load_points(p)?, ctx.cfg.fit.max_components, ctx.cfg.fit.covariance),
        (None, Some(s)) => {
            let (person, seq) = parse_sequence_ref(s)?;
            let set = dataset::load_face_set(&ctx.manifest()?, &person, &seq)?;
            (filter_set(&ctx.cfg.filter(), &set)?.frames, ctx.cfg.mdd.max_components, ctx.cfg.mdd.covariance)
        }
        _ => return Err(Error::InvalidParams("fit needs exactly one of --points and --sequence".into())),
    };
    let (model, dls) = select_mdl(&data, max_components, covariance, &mut rng)?;
    dataset::save_json(ctx.path("model.json"), &model)?;
    let mut csv = String::from("components,description_length_bits\n");
    for (i, dl) in dls.iter().enumerate() {
        writeln!(csv, "{},{}", i + 1, csv_float(*dl)).unwrap();
    }
    ctx.write("description_length.csv", &csv)?;
    ctx.finish()
}

#[derive(Serialize)]
struct MatchReport {
    method: Method,
    filter: String,
    a: String,
    b: String,
    direction: &'static str,
    score: f64,
}

pub fn match_pair(ctx: &Ctx, a: &str, b: &str) -> Result<()> {
    let method = ctx.method()?;
    let corpus = ctx.corpus()?;
    let (ia, ib) = (find(&corpus, &parse_sequence_ref(a)?)?, find(&corpus, &parse_sequence_ref(b)?)?);
    let matcher = Matcher::new(method, &ctx.cfg, &corpus, &ctx.rng())?;
    let score = matcher.score(&corpus[ia].set, &corpus[ib].set)?;
    let report = MatchReport {
        method,
        filter: format!("{:?}", ctx.cfg.filter().kind).to_lowercase(),
        a: a.to_string(),
        b: b.to_string(),
        direction: direction_name(matcher.direction()),
        score,
    };
    dataset::save_json(ctx.path("match.json"), &report)?;
    ctx.finish()
}

#[derive(Serialize)]
struct RecognizeReport {
    probe: String,
    method: Method,
    identity: String,
    correct: bool,
}

/// Ranks every other sequence of the manifest against the probe.
pub fn recognize(ctx: &Ctx, probe: &str) -> Result<()> {
    let method = ctx.method()?;
    let corpus = ctx.corpus()?;
    let ip = find(&corpus, &parse_sequence_ref(probe)?)?;
    let matcher = Matcher::new(method, &ctx.cfg, &corpus, &ctx.rng())?;
    let models = matcher.models(&corpus)?;
    let gallery: Vec<usize> = (0..corpus.len()).filter(|&g| g != ip).collect();
    if gallery.is_empty() {
        return Err(Error::InsufficientCorpus("the probe is the only sequence".into()));
    }
    let raw: Vec<f64> = {
        use rayon::prelude::*;
        gallery.par_iter().map(|&g| matcher.compare(&corpus[ip].set, &models[ip], &corpus[g].set, &models[g])).collect::<Result<_>>()?
    };
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&x, &y| matcher.similarity(raw[y]).total_cmp(&matcher.similarity(raw[x])).then(x.cmp(&y)));
    let mut csv = String::from("rank,person,sequence,score\n");
    for (rank, &k) in order.iter().enumerate() {
        let s = &corpus[gallery[k]];
        writeln!(csv, "{},{},{},{}", rank + 1, s.person_id, s.sequence_id, csv_float(raw[k])).unwrap();
    }
    ctx.write("ranking.csv", &csv)?;
    let identity = corpus[gallery[order[0]]].person_id.clone();
    let correct = identity == corpus[ip].person_id;
    dataset::save_json(ctx.path("recognize.json"), &RecognizeReport { probe: probe.to_string(), method, identity, correct })?;
    ctx.finish()
}

#[derive(Serialize)]
struct ClusterSummary {
    n_classes: usize,
    /// Class count after each merge, starting with the seed count.
    class_counts: Vec<usize>,
    merges: Vec<f64>,
    seeds: Vec<usize>,
    /// Weight of the learnt constraint when refinement is on.
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    stress: f64,
}

/// Clusters every sequence of the manifest. The generic constraint is the
/// whole image space.
pub fn cluster(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let faces: Vec<_> = corpus.iter().map(|s| s.set.clone()).collect();
    let subs = manifold_subspaces(&faces, SubspaceDim::Fixed(ctx.cfg.subspace.dim))?;
    let d = faces.first().map_or(0, |f| f.dim());
    let generic = LinearSubspace::from_basis(DMatrix::identity(d, d));
    let report = cluster_manifolds(&subs, &generic, &ctx.cfg.cluster)?;
    let mut csv = String::from("person,sequence,class\n");
    for (s, c) in corpus.iter().zip(&report.state.assignment) {
        writeln!(csv, "{},{},{}", s.person_id, s.sequence_id, c).unwrap();
    }
    ctx.write("clusters.csv", &csv)?;
    dataset::save_matrix(ctx.path("distances.csv"), &report.distances)?;
    dataset::save_matrix(ctx.path("embedding.csv"), &report.embedding.points)?;
    let summary = ClusterSummary {
        n_classes: class_count(&report.state.assignment),
        class_counts: report.state.class_counts.clone(),
        merges: report.state.merges.clone(),
        seeds: report.seeds.clone(),
        alpha: report.refined.as_ref().map(|r| r.alpha),
        stress: report.embedding.stress,
    };
    dataset::save_json(ctx.path("cluster.json"), &summary)?;
    ctx.finish()
}

/// Illumination-pair protocol over the whole manifest.
pub fn evaluate(ctx: &Ctx) -> Result<()> {
    let method = ctx.method()?;
    let corpus = ctx.corpus()?;
    let matcher = Matcher::new(method, &ctx.cfg, &corpus, &ctx.rng())?;
    let models = matcher.models(&corpus)?;
    let report = eval::run_protocol_indexed(method.name(), &corpus, |p, g| {
        matcher.compare(&corpus[p].set, &models[p], &corpus[g].set, &models[g]).map(|raw| matcher.similarity(raw))
    })?;
    ctx.write("protocol.csv", &report.to_csv())?;
    dataset::save_json(ctx.path("protocol.json"), &report)?;
    ctx.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: IncGmmConfig,
    /// Index of the first point not yet absorbed.
    pub next_index: usize,
    pub state: IncGmmState,
}

/// Streams points through the online mixture. With `limit` the run stops
/// after that many points; `resume` continues from a checkpoint with the
/// configuration it was written with.
pub fn stream(ctx: &Ctx, points: &Path, resume: Option<&Path>, limit: Option<usize>) -> Result<()> {
    let pts = load_points(points)?;
    let mut cp = match resume {
        Some(p) => {
            let cp: Checkpoint = dataset::load_json(p)?;
            if cp.next_index > pts.len() {
                return Err(Error::InvalidParams(format!("checkpoint is at point {} of {}", cp.next_index, pts.len())));
            }
            cp
        }
        None => {
            let cfg = ctx.cfg.stream.clone();
            let k = cfg.seed_points.min(pts.len());
            let state = IncGmmState::seed(&pts[..k], cfg.seed_max_components, &mut ctx.rng())?;
            Checkpoint { config: cfg, next_index: k, state }
        }
    };
    let end = limit.unwrap_or(pts.len()).min(pts.len());
    let mut log = String::from("index,components,splits,merges\n");
    while cp.next_index < end {
        let outcome = inc_gmm::step(&mut cp.state, &pts[cp.next_index], &cp.config)?;
        writeln!(log, "{},{},{},{}", cp.next_index, cp.state.n_components(), outcome.splits, outcome.merges).unwrap();
        cp.next_index += 1;
    }
    ctx.write("stream_log.csv", &log)?;
    dataset::save_json(ctx.path("checkpoint.json"), &cp)?;
    let model: &GaussianMixture = &cp.state.current;
    dataset::save_json(ctx.path("model.json"), model)?;
    ctx.finish()
}
