//! Corpus ingestion and matrix persistence.
//!
//! A corpus is described by a JSON [`SequenceManifest`] at its root. Frame
//! paths are relative to `root_path`, which is itself resolved relative to
//! the manifest file when it is not absolute.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub sequence_id: String,
    pub frame_paths: Vec<String>,
    pub illumination_tag: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonEntry {
    pub person_id: String,
    pub sequences: Vec<SequenceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub root_path: String,
    /// Expected frame size; when absent the first frame of each sequence fixes it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    pub persons: Vec<PersonEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceSet {
    pub frames: Vec<DVector<f64>>,
    pub height: usize,
    pub width: usize,
    pub temporal: bool,
}

impl FaceSet {
    pub fn new(frames: Vec<DVector<f64>>, height: usize, width: usize) -> Self {
        FaceSet { frames, height, width, temporal: true }
    }

    pub fn dim(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame `i` as an `height × width` image (row-major flattening).
    pub fn image(&self, i: usize) -> DMatrix<f64> {
        vector_to_image(&self.frames[i], self.height, self.width)
    }
}

pub fn vector_to_image(v: &DVector<f64>, height: usize, width: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(height, width, v.as_slice())
}

pub fn image_to_vector(img: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(img.len(), img.transpose().iter().cloned())
}

impl SequenceManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: SequenceManifest = serde_json::from_str(&text)?;
        let root = Path::new(&m.root_path);
        if root.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            m.root_path = base.join(root).display().to_string();
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path.as_ref(), text + "\n").map_err(|e| Error::io(path.as_ref(), e))
    }

    /// Builds a manifest from a `root/person/sequence/*.{pgm,png}` layout.
    /// The sequence directory name doubles as the illumination tag.
    pub fn scan(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let mut persons = Vec::new();
        for pdir in sorted_dirs(root)? {
            let mut sequences = Vec::new();
            for sdir in sorted_dirs(&pdir)? {
                let mut frames: Vec<String> = Vec::new();
                for e in fs::read_dir(&sdir).map_err(|e| Error::io(&sdir, e))? {
                    let p = e.map_err(|e| Error::io(&sdir, e))?.path();
                    let ext = p.extension().and_then(|s| s.to_str()).unwrap_or("").to_ascii_lowercase();
                    if ext == "pgm" || ext == "png" {
                        frames.push(p.strip_prefix(root).unwrap_or(&p).display().to_string());
                    }
                }
                frames.sort();
                let id = file_name(&sdir);
                sequences.push(SequenceEntry { sequence_id: id.clone(), frame_paths: frames, illumination_tag: id });
            }
            persons.push(PersonEntry { person_id: file_name(&pdir), sequences });
        }
        Ok(SequenceManifest { root_path: root.display().to_string(), height: None, width: None, persons })
    }

    pub fn sequence(&self, person_id: &str, sequence_id: &str) -> Result<&SequenceEntry> {
        self.persons
            .iter()
            .filter(|p| p.person_id == person_id)
            .flat_map(|p| p.sequences.iter())
            .find(|s| s.sequence_id == sequence_id)
            .ok_or_else(|| Error::MissingSequence(format!("{person_id}/{sequence_id}")))
    }

    /// Sorted list of distinct illumination tags.
    pub fn illuminations(&self) -> Vec<String> {
        let mut tags: Vec<String> =
            self.persons.iter().flat_map(|p| p.sequences.iter().map(|s| s.illumination_tag.clone())).collect();
        tags.sort();
        tags.dedup();
        tags
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Decodes one 8-bit grayscale PGM or PNG into `(height, width, pixels/255)`.
pub fn load_gray_image(path: &Path) -> Result<(usize, usize, DVector<f64>)> {
    let decode_err = |reason: String| Error::DecodeError { path: path.display().to_string(), reason };
    let img = image::ImageReader::open(path)
        .map_err(|e| decode_err(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| decode_err(e.to_string()))?
        .decode()
        .map_err(|e| decode_err(e.to_string()))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => return Err(decode_err(format!("expected 8-bit grayscale, found {:?}", other.color()))),
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let v = DVector::from_iterator(w * h, gray.as_raw().iter().map(|&p| p as f64 / 255.0));
    Ok((h, w, v))
}

/// Writes a unit-range image as 8-bit binary PGM (values rounded, clamped).
pub fn save_pgm(path: &Path, img: &DMatrix<f64>) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", img.ncols(), img.nrows()).into_bytes();
    for r in 0..img.nrows() {
        for c in 0..img.ncols() {
            buf.push((img[(r, c)].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_face_set(manifest: &SequenceManifest, person_id: &str, sequence_id: &str) -> Result<FaceSet> {
    let seq = manifest.sequence(person_id, sequence_id)?;
    if seq.frame_paths.is_empty() {
        return Err(Error::MissingSequence(format!("{person_id}/{sequence_id} has no frames")));
    }
    let mut paths: Vec<&String> = seq.frame_paths.iter().collect();
    paths.sort_by(|a, b| {
        let fa = Path::new(a.as_str()).file_name();
        let fb = Path::new(b.as_str()).file_name();
        fa.cmp(&fb).then(a.cmp(b))
    });
    let root = Path::new(&manifest.root_path);
    let mut shape = manifest.height.zip(manifest.width);
    let mut frames = Vec::with_capacity(paths.len());
    for p in paths {
        let full = root.join(p);
        if !full.exists() {
            return Err(Error::MissingSequence(full.display().to_string()));
        }
        let (h, w, v) = load_gray_image(&full)?;
        match shape {
            None => shape = Some((h, w)),
            Some((eh, ew)) if (eh, ew) != (h, w) => {
                return Err(Error::ShapeMismatch { expected: format!("{eh}x{ew}"), got: format!("{h}x{w} in {p}") })
            }
            _ => {}
        }
        frames.push(v);
    }
    let (h, w) = shape.expect("at least one frame");
    Ok(FaceSet::new(frames, h, w))
}

/// Writes `m` as CSV: a `rows,cols` header line, the dimensions, then one line per row.
/// Values carry 17 significant digits, which is enough to round-trip any f64.
pub fn save_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(m.len() * 25 + 32);
    out.push_str("rows,cols\n");
    out.push_str(&format!("{},{}\n", m.nrows(), m.ncols()));
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:.16e}", m[(r, c)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(&text)
}

/// Parser behind [`load_matrix`]. Row/column numbers in errors are 0-based over data rows.
pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
    if lines.peek().map(|l| l.trim() == "rows,cols").unwrap_or(false) {
        lines.next();
    }
    let dims = lines.next().ok_or(Error::ParseError { row: 0, col: 0, reason: "missing dimensions".into() })?;
    let parts: Vec<&str> = dims.split(',').map(str::trim).collect();
    let parse_dim = |i: usize| -> Result<usize> {
        parts.get(i).and_then(|s| s.parse().ok()).ok_or(Error::ParseError {
            row: 0,
            col: i,
            reason: format!("bad dimension line '{dims}'"),
        })
    };
    if parts.len() != 2 {
        return Err(Error::ParseError { row: 0, col: parts.len(), reason: "dimension line needs two fields".into() });
    }
    let (rows, cols) = (parse_dim(0)?, parse_dim(1)?);
    let mut m = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for line in lines {
        if r >= rows {
            return Err(Error::ParseError { row: r, col: 0, reason: "too many rows".into() });
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(Error::ParseError {
                row: r,
                col: fields.len().min(cols),
                reason: format!("expected {cols} fields, found {}", fields.len()),
            });
        }
        for (c, f) in fields.iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| Error::ParseError {
                row: r,
                col: c,
                reason: format!("not a number: '{f}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::ParseError { row: r, col: c, reason: "non-finite value".into() });
            }
            m[(r, c)] = v;
        }
        r += 1;
    }
    if r != rows {
        return Err(Error::ParseError { row: r, col: 0, reason: format!("expected {rows} rows, found {r}") });
    }
    Ok(m)
}

/// Pretty JSON to disk for any serialisable model.
pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
