//! Recognition rate, ROC and equal error rate, rank ordering score, and the
//! cross-illumination recognition protocol.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, FaceSet, SequenceManifest};
use crate::error::{Error, Result};

/// Fraction of predictions equal to the truth.
pub fn recognition_rate<T: PartialEq>(predictions: &[T], truths: &[T]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch(predictions.len(), truths.len()));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidParams("no predictions".into()));
    }
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Whether a larger score means "same person" (similarity) or a smaller one does (distance).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreDirection {
    Similarity,
    Distance,
}

/// Operating points over every distinct threshold, from the strictest to the most lenient.
/// A comparison is accepted when its score is at least as good as the threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub eer: f64,
}

fn check_scores(xs: &[f64], what: &str) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::InvalidParams(format!("no {what} scores")));
    }
    if xs.iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidParams(format!("NaN among {what} scores")));
    }
    Ok(())
}

/// ROC of intra-personal against inter-personal scores. The first point is
/// the empty acceptance region (threshold +∞ for similarities, −∞ for distances).
pub fn roc(intra: &[f64], inter: &[f64], direction: ScoreDirection) -> Result<RocCurve> {
    check_scores(intra, "intra-personal")?;
    check_scores(inter, "inter-personal")?;
    // work with "goodness" g: larger is more likely the same person
    let sign = match direction {
        ScoreDirection::Similarity => 1.0,
        ScoreDirection::Distance => -1.0,
    };
    let mut pos: Vec<f64> = intra.iter().map(|x| sign * x).collect();
    let mut neg: Vec<f64> = inter.iter().map(|x| sign * x).collect();
    pos.sort_by(|a, b| b.total_cmp(a));
    neg.sort_by(|a, b| b.total_cmp(a));
    let mut levels: Vec<f64> = pos.iter().chain(&neg).cloned().collect();
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();

    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut thresholds = vec![sign * f64::INFINITY];
    let mut tpr = vec![0.0];
    let mut fpr = vec![0.0];
    let (mut ip, mut in_) = (0, 0);
    for &t in &levels {
        while ip < pos.len() && pos[ip] >= t {
            ip += 1;
        }
        while in_ < neg.len() && neg[in_] >= t {
            in_ += 1;
        }
        thresholds.push(sign * t);
        tpr.push(ip as f64 / np);
        fpr.push(in_ as f64 / nn);
    }
    let eer = equal_error_rate(&tpr, &fpr);
    Ok(RocCurve { thresholds, tpr, fpr, eer })
}

/// Crossing of `p_f = 1 − p_t`, linearly interpolated between neighbouring operating points.
fn equal_error_rate(tpr: &[f64], fpr: &[f64]) -> f64 {
    // g = p_f − (1 − p_t) rises from −1 to +1 along the curve
    let g: Vec<f64> = tpr.iter().zip(fpr).map(|(t, f)| f - (1.0 - t)).collect();
    for k in 0..g.len() {
        if g[k] == 0.0 {
            return fpr[k];
        }
        if k + 1 < g.len() && g[k] < 0.0 && g[k + 1] > 0.0 {
            let lam = -g[k] / (g[k + 1] - g[k]);
            return fpr[k] + lam * (fpr[k + 1] - fpr[k]);
        }
    }
    // unreachable for a complete curve, which always ends at (1, 1)
    0.5
}

/// `ρ = 1 − (S − m)/M` where `S` sums the retrieval positions of in-class
/// items, `m` is its smallest and `m + M` its largest attainable value.
/// `order` lists item indices in retrieval order; `in_class` is indexed by item.
pub fn rank_ordering_score(order: &[usize], in_class: &[bool]) -> Result<f64> {
    if order.len() != in_class.len() {
        return Err(Error::LengthMismatch(order.len(), in_class.len()));
    }
    let mut seen = vec![false; order.len()];
    for &i in order {
        if i >= order.len() || std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidParams("retrieval order is not a permutation".into()));
        }
    }
    let flags: Vec<bool> = order.iter().map(|&i| in_class[i]).collect();
    rank_ordering_score_flags(&flags)
}

/// [`rank_ordering_score`] with the in-class flags already in retrieval order.
pub fn rank_ordering_score_flags(flags: &[bool]) -> Result<f64> {
    let n = flags.len();
    let k = flags.iter().filter(|&&f| f).count();
    if k == 0 {
        return Err(Error::NoPositives);
    }
    let s: usize = flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).sum();
    let m = k * (k - 1) / 2;
    let max_s = (n - k..n).sum::<usize>();
    let range = max_s - m;
    if range == 0 {
        return Ok(1.0);
    }
    Ok(1.0 - (s - m) as f64 / range as f64)
}

/// One sequence of a protocol corpus.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub person_id: String,
    pub sequence_id: String,
    pub illumination: String,
    pub set: FaceSet,
}

/// Loads every sequence listed in a manifest, in manifest order.
pub fn load_labeled_sets(manifest: &SequenceManifest) -> Result<Vec<LabeledSet>> {
    let mut out = Vec::new();
    for p in &manifest.persons {
        for s in &p.sequences {
            out.push(LabeledSet {
                person_id: p.person_id.clone(),
                sequence_id: s.sequence_id.clone(),
                illumination: s.illumination_tag.clone(),
                set: dataset::load_face_set(manifest, &p.person_id, &s.sequence_id)?,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub train_illumination: String,
    pub test_illumination: String,
    pub n_probes: usize,
    /// `None` when no probe had a gallery to be matched against.
    pub recognition_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub method: String,
    pub illuminations: Vec<String>,
    /// One row per ordered (train, test) illumination pair, train-major.
    pub pairs: Vec<PairResult>,
    pub mean: f64,
    pub std: f64,
}

/// Train on the sequences of one illumination, test on those of another, for
/// every ordered pair. Each probe is assigned the identity of its most similar
/// gallery sequence (ties to the earlier gallery entry). A probe is never
/// matched against itself; a probe whose person has no gallery sequence is skipped.
pub fn run_protocol<F>(method: &str, sets: &[LabeledSet], similarity: F) -> Result<ProtocolReport>
where
    F: Fn(&FaceSet, &FaceSet) -> Result<f64> + Sync,
{
    run_protocol_indexed(method, sets, |p, g| similarity(&sets[p].set, &sets[g].set))
}

/// [`run_protocol`] with the similarity addressed by `(probe, gallery)` indices
/// into `sets`, for callers that precompute per-set models.
pub fn run_protocol_indexed<F>(method: &str, sets: &[LabeledSet], similarity: F) -> Result<ProtocolReport>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    let mut illuminations: Vec<String> = sets.iter().map(|s| s.illumination.clone()).collect();
    illuminations.sort();
    illuminations.dedup();
    if illuminations.is_empty() {
        return Err(Error::InsufficientCorpus("no sequences".into()));
    }
    let mut pairs = Vec::new();
    for train in &illuminations {
        for test in &illuminations {
            let gallery: Vec<usize> = (0..sets.len()).filter(|&i| &sets[i].illumination == train).collect();
            let probes: Vec<usize> = (0..sets.len()).filter(|&i| &sets[i].illumination == test).collect();
            let outcomes: Vec<Option<bool>> = probes
                .par_iter()
                .map(|&p| -> Result<Option<bool>> {
                    let candidates: Vec<usize> = gallery.iter().copied().filter(|&g| g != p).collect();
                    if !candidates.iter().any(|&g| sets[g].person_id == sets[p].person_id) {
                        return Ok(None);
                    }
                    let mut best: Option<(f64, usize)> = None;
                    for &g in &candidates {
                        let s = similarity(p, g)?;
                        if best.is_none_or(|(b, _)| s > b) {
                            best = Some((s, g));
                        }
                    }
                    Ok(best.map(|(_, g)| sets[g].person_id == sets[p].person_id))
                })
                .collect::<Result<_>>()?;
            let scored: Vec<bool> = outcomes.into_iter().flatten().collect();
            let rate = if scored.is_empty() {
                None
            } else {
                Some(scored.iter().filter(|&&h| h).count() as f64 / scored.len() as f64)
            };
            pairs.push(PairResult {
                train_illumination: train.clone(),
                test_illumination: test.clone(),
                n_probes: scored.len(),
                recognition_rate: rate,
            });
        }
    }
    let rates: Vec<f64> = pairs.iter().filter_map(|p| p.recognition_rate).collect();
    if rates.is_empty() {
        return Err(Error::InsufficientCorpus("no probe has a gallery sequence of its person".into()));
    }
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let std = (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rates.len() as f64).sqrt();
    Ok(ProtocolReport { method: method.to_string(), illuminations, pairs, mean, std })
}

impl ProtocolReport {
    /// Train illuminations down, test illuminations across; empty cells have no probes.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("train\\test");
        for t in &self.illuminations {
            s.push(',');
            s.push_str(t);
        }
        s.push('\n');
        let n = self.illuminations.len();
        for (r, train) in self.illuminations.iter().enumerate() {
            s.push_str(train);
            for c in 0..n {
                s.push(',');
                if let Some(rate) = self.pairs[r * n + c].recognition_rate {
                    let _ = write!(s, "{rate:.6}");
                }
            }
            s.push('\n');
        }
        s
    }
}
