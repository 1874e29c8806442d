//! Synthetic data: 2-D point sets for the online mixture, and small face-like corpora.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::dataset::{self, FaceSet, PersonEntry, SequenceEntry, SequenceManifest, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::eval::LabeledSet;
use crate::rng::Rng;

/// `n` points with `r ~ N(5, 0.1)`, `φ ~ N(0, 0.7)`, mapped to Cartesian coordinates.
pub fn radial_gaussian(n: usize, rng: &mut Rng) -> Vec<DVector<f64>> {
    (0..n)
        .map(|_| {
            let r = 5.0 + 0.1 * rng.normal();
            let phi = 0.7 * rng.normal();
            DVector::from_vec(vec![r * phi.cos(), r * phi.sin()])
        })
        .collect()
}

/// `n` points with `x ~ U(0, 10)`, `y ~ N(sin x, 0.1)`.
pub fn sinusoid(n: usize, rng: &mut Rng) -> Vec<DVector<f64>> {
    (0..n)
        .map(|_| {
            let x = 10.0 * rng.uniform();
            let y = x.sin() + 0.1 * rng.normal();
            DVector::from_vec(vec![x, y])
        })
        .collect()
}

/// Temporal order by nearest-neighbour chaining, starting at the point with the smallest
/// first coordinate. Ties go to the lower index.
pub fn nn_chain_order(points: &[DVector<f64>]) -> Vec<usize> {
    if points.is_empty() {
        return Vec::new();
    }
    let mut start = 0;
    for (i, p) in points.iter().enumerate() {
        if p[0] < points[start][0] {
            start = i;
        }
    }
    let mut used = vec![false; points.len()];
    let mut order = Vec::with_capacity(points.len());
    let mut cur = start;
    used[cur] = true;
    order.push(cur);
    for _ in 1..points.len() {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for (j, p) in points.iter().enumerate() {
            if used[j] {
                continue;
            }
            let d = (p - &points[cur]).norm_squared();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        cur = best;
        used[cur] = true;
        order.push(cur);
    }
    order
}

/// Points reordered by [`nn_chain_order`].
pub fn temporally_ordered(points: &[DVector<f64>]) -> Vec<DVector<f64>> {
    nn_chain_order(points).into_iter().map(|i| points[i].clone()).collect()
}

/// Toy face under a single multiplicative light: albedo times a pose-dependent
/// shading blob, `n × n` pixels, row-major.
pub fn toy_face(albedo: &DVector<f64>, pose: f64, light: f64, n: usize) -> DVector<f64> {
    DVector::from_fn(n * n, |k, _| {
        let (r, c) = ((k / n) as f64, (k % n) as f64);
        let cx = 2.0 + pose * (n as f64 - 5.0);
        let shade = 0.3 + (-((c - cx).powi(2) + (r - n as f64 / 2.0).powi(2)) / 4.0).exp();
        light * albedo[k] * shade
    })
}

/// One person seen under each of `lights`: a random smooth albedo, `frames`
/// poses spread evenly with jitter, in random order. `shared` reuses one pose
/// list for every illumination.
pub fn planted_lighting_person(rng: &mut Rng, lights: &[f64], frames: usize, n: usize, shared: bool) -> Vec<FaceSet> {
    let (fr, fc, pr, pc) = (0.2 + 0.4 * rng.uniform(), 0.2 + 0.4 * rng.uniform(), 6.3 * rng.uniform(), 6.3 * rng.uniform());
    let albedo = DVector::from_fn(n * n, |k, _| 1.0 + 0.4 * ((k / n) as f64 * fr + pr).cos() * ((k % n) as f64 * fc + pc).cos());
    let draw = |rng: &mut Rng| {
        let mut p: Vec<f64> = (0..frames).map(|i| (i as f64 + 0.3 * rng.uniform()) / frames as f64).collect();
        rng.shuffle(&mut p);
        p
    };
    let common = draw(rng);
    lights
        .iter()
        .map(|&l| {
            let poses = if shared { common.clone() } else { draw(rng) };
            FaceSet::new(poses.iter().map(|&p| toy_face(&albedo, p, l, n)).collect(), n, n)
        })
        .collect()
}

/// `persons` planted-lighting people, one sequence per light, rescaled so the
/// brightest pixel of the corpus is 1. Illumination tags are `l0`, `l1`, ...
pub fn planted_lighting_corpus(rng: &mut Rng, persons: usize, lights: &[f64], frames: usize, n: usize) -> Vec<LabeledSet> {
    let mut out = Vec::new();
    for p in 0..persons {
        for (i, set) in planted_lighting_person(rng, lights, frames, n, false).into_iter().enumerate() {
            out.push(LabeledSet { person_id: format!("p{p:02}"), sequence_id: format!("l{i}"), illumination: format!("l{i}"), set });
        }
    }
    let peak = out.iter().flat_map(|s| s.set.frames.iter()).map(|f| f.max()).fold(0.0, f64::max);
    if peak > 0.0 {
        for s in &mut out {
            for f in &mut s.set.frames {
                *f /= peak;
            }
        }
    }
    out
}

const BLOB_CENTRES: [&[(f64, f64)]; 2] = [&[(0.3, 0.3), (0.7, 0.65)], &[(0.7, 0.25), (0.3, 0.7), (0.65, 0.8)]];

/// Two classes of Gaussian-blob images. Each frame shifts the class layout by
/// a random translation, scales it by a random gain and adds pixel noise.
/// Person ids are `class0` and `class1`.
pub fn two_class_blobs(rng: &mut Rng, sequences_per_class: usize, frames: usize, n: usize) -> Vec<LabeledSet> {
    let width = 0.12 * n as f64;
    let mut out = Vec::new();
    for (class, centres) in BLOB_CENTRES.iter().enumerate() {
        for s in 0..sequences_per_class {
            let frames: Vec<DVector<f64>> = (0..frames)
                .map(|_| {
                    let (dr, dc) = (0.04 * rng.normal(), 0.04 * rng.normal());
                    let gain = 0.8 + 0.4 * rng.uniform();
                    let noise: Vec<f64> = (0..n * n).map(|_| 0.01 * rng.normal()).collect();
                    DVector::from_fn(n * n, |k, _| {
                        let (r, c) = ((k / n) as f64, (k % n) as f64);
                        let v: f64 = centres
                            .iter()
                            .map(|&(cr, cc)| {
                                let (pr, pc) = ((cr + dr) * n as f64, (cc + dc) * n as f64);
                                (-((r - pr).powi(2) + (c - pc).powi(2)) / (2.0 * width * width)).exp()
                            })
                            .sum();
                        (0.1 + 0.7 * gain * v + noise[k]).clamp(0.0, 1.0)
                    })
                })
                .collect();
            out.push(LabeledSet {
                person_id: format!("class{class}"),
                sequence_id: format!("s{s:02}"),
                illumination: "ambient".into(),
                set: FaceSet::new(frames, n, n),
            });
        }
    }
    out
}

/// Writes every frame as 8-bit PGM under `dir/person/sequence/` and a
/// manifest at `dir/manifest.json`. Frames must already be in `[0, 1]`.
pub fn write_corpus(dir: &Path, sets: &[LabeledSet]) -> Result<SequenceManifest> {
    let first = sets.first().ok_or_else(|| Error::InsufficientCorpus("no sequences to write".into()))?;
    let (height, width) = (first.set.height, first.set.width);
    let mut persons: Vec<PersonEntry> = Vec::new();
    for s in sets {
        if (s.set.height, s.set.width) != (height, width) {
            return Err(Error::ShapeMismatch { expected: format!("{height}x{width}"), got: format!("{}x{}", s.set.height, s.set.width) });
        }
        let rel = Path::new(&s.person_id).join(&s.sequence_id);
        let seq_dir = dir.join(&rel);
        fs::create_dir_all(&seq_dir).map_err(|e| Error::io(&seq_dir, e))?;
        let mut frame_paths = Vec::with_capacity(s.set.len());
        for i in 0..s.set.len() {
            let name = format!("{i:04}.pgm");
            dataset::save_pgm(&seq_dir.join(&name), &s.set.image(i))?;
            frame_paths.push(format!("{}/{}/{}", s.person_id, s.sequence_id, name));
        }
        let entry = SequenceEntry { sequence_id: s.sequence_id.clone(), frame_paths, illumination_tag: s.illumination.clone() };
        match persons.iter_mut().find(|p| p.person_id == s.person_id) {
            Some(p) => p.sequences.push(entry),
            None => persons.push(PersonEntry { person_id: s.person_id.clone(), sequences: vec![entry] }),
        }
    }
    let manifest = SequenceManifest { root_path: ".".into(), height: Some(height), width: Some(width), persons };
    manifest.save(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// SHA-256 over the manifest file and then every frame file in manifest
/// order, as lowercase hex.
pub fn corpus_checksum(dir: &Path) -> Result<String> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut hasher = Sha256::new();
    hasher.update(fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?);
    let manifest = SequenceManifest::load(&manifest_path)?;
    for p in &manifest.persons {
        for s in &p.sequences {
            for f in &s.frame_paths {
                let path = Path::new(&manifest.root_path).join(f);
                hasher.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
            }
        }
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Stacks points as the rows of a matrix.
pub fn points_to_matrix(points: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let dim = points.first().map_or(0, |p| p.len());
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch(dim, p.len()));
    }
    Ok(DMatrix::from_fn(points.len(), dim, |r, c| points[r][c]))
}

pub fn matrix_to_points(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    m.row_iter().map(|r| r.transpose()).collect()
}
