//! Data model for frame and text embeddings, and its on-disk format.
//!
//! A dataset lives in a directory holding `manifest.json` plus one raw tensor
//! file per matrix or vector. Tensor files are little-endian IEEE-754 binary32,
//! row-major, with no header; byte length is always `rows * cols * 4`.
//!
//! ```text
//! {
//!   "format": "vidalign-embeddings",
//!   "version": 1,
//!   "dim": 8,
//!   "videos": [
//!     { "id": "v0", "frames": 4, "labels": [0], "tensor": "videos/000000.f32" }
//!   ],
//!   "classes": [
//!     {
//!       "name": "clean and jerk",
//!       "global": { "tokens": 3, "tensor": "classes/0000/global.f32",
//!                   "summary": "classes/0000/global.summary.f32" },
//!       "subtexts": [ { "tokens": 5, "tensor": "...", "summary": "..." } ]
//!     }
//!   ],
//!   "candidates": [
//!     { "class": 0, "groups": [ [ { "tokens": 5, "tensor": "...", "summary": "..." } ] ] }
//!   ]
//! }
//! ```
//!
//! `labels` holds one class id for single-label data and several for
//! multi-label data. `candidates` is optional. Paths are relative to the
//! dataset root. Values are held in memory as `f64`; saving rounds to `f32`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_NAME: &str = "vidalign-embeddings";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbeddings {
    pub video_id: String,
    /// L x D, one row per sampled frame.
    pub frames: Array2<f64>,
    /// Class ids; a single-label video has exactly one entry.
    pub labels: Vec<usize>,
}

impl FrameEmbeddings {
    pub fn new(video_id: impl Into<String>, frames: Array2<f64>, label: usize) -> Self {
        Self {
            video_id: video_id.into(),
            frames,
            labels: vec![label],
        }
    }

    /// The class used as the positive during training (the first listed label).
    pub fn label(&self) -> usize {
        self.labels[0]
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }
}

/// Token-level embeddings of one text plus the encoder's sentence embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTokens {
    /// M x D word embeddings.
    pub tokens: Array2<f64>,
    pub summary: Array1<f64>,
}

impl TextTokens {
    pub fn new(tokens: Array2<f64>, summary: Array1<f64>) -> Self {
        Self { tokens, summary }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassTextBundle {
    pub class_name: String,
    pub global: TextTokens,
    pub subtexts: Vec<TextTokens>,
}

/// Alternative sub-text sets proposed for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct SubtextCandidateSet {
    pub class_id: usize,
    pub groups: Vec<Vec<TextTokens>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub dim: usize,
    pub videos: Vec<FrameEmbeddings>,
    pub classes: Vec<ClassTextBundle>,
    pub candidates: Vec<SubtextCandidateSet>,
}

impl EmbeddingDataset {
    pub fn new(dim: usize, videos: Vec<FrameEmbeddings>, classes: Vec<ClassTextBundle>) -> Self {
        Self {
            dim,
            videos,
            classes,
            candidates: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.class_name.clone()).collect()
    }

    pub fn is_multi_label(&self) -> bool {
        self.videos.iter().any(|v| v.labels.len() > 1)
    }

    /// Replaces every class's sub-texts with candidate group `group`.
    /// Classes without a candidate set keep their current sub-texts.
    pub fn with_candidate_group(&self, group: usize) -> Result<EmbeddingDataset> {
        let mut out = self.clone();
        for set in &self.candidates {
            let chosen = set
                .groups
                .get(group)
                .ok_or(Error::EmptyCandidates)
                .map_err(Error::in_class(set.class_id))?;
            out.classes[set.class_id].subtexts = chosen.clone();
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum IssueKind {
    ZeroDimension,
    EmptyMatrix,
    DimensionMismatch { expected: usize, found: usize },
    NonFinite,
    ZeroNorm { row: Option<usize> },
    EmptyLabelSet,
    LabelOutOfRange { label: usize, classes: usize },
    CandidateClassOutOfRange { class: usize, classes: usize },
    EmptyCandidateGroup,
}

impl fmt::Display for IssueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IssueKind::ZeroDimension => write!(f, "dimension is zero"),
            IssueKind::EmptyMatrix => write!(f, "matrix has no rows"),
            IssueKind::DimensionMismatch { expected, found } => {
                write!(f, "expected dimension {expected}, found {found}")
            }
            IssueKind::NonFinite => write!(f, "non-finite entry"),
            IssueKind::ZeroNorm { row: Some(r) } => write!(f, "row {r} has zero norm"),
            IssueKind::ZeroNorm { row: None } => write!(f, "vector has zero norm"),
            IssueKind::EmptyLabelSet => write!(f, "empty label set"),
            IssueKind::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            IssueKind::CandidateClassOutOfRange { class, classes } => {
                write!(
                    f,
                    "candidate class {class} out of range for {classes} classes"
                )
            }
            IssueKind::EmptyCandidateGroup => write!(f, "empty candidate group"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationIssue {
    pub location: String,
    pub kind: IssueKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }

    fn push(&mut self, location: impl Into<String>, kind: IssueKind) {
        self.issues.push(ValidationIssue {
            location: location.into(),
            kind,
        });
    }

    fn check_matrix(&mut self, location: &str, m: &Array2<f64>, dim: usize) {
        if m.nrows() == 0 {
            self.push(location, IssueKind::EmptyMatrix);
        }
        if m.ncols() != dim {
            self.push(
                location,
                IssueKind::DimensionMismatch {
                    expected: dim,
                    found: m.ncols(),
                },
            );
        }
        if m.iter().any(|x| !x.is_finite()) {
            self.push(location, IssueKind::NonFinite);
            return;
        }
        for (r, row) in m.rows().into_iter().enumerate() {
            if row.iter().all(|&x| x == 0.0) && m.ncols() > 0 {
                self.push(location, IssueKind::ZeroNorm { row: Some(r) });
            }
        }
    }

    fn check_vector(&mut self, location: &str, v: &Array1<f64>, dim: usize) {
        if v.len() != dim {
            self.push(
                location,
                IssueKind::DimensionMismatch {
                    expected: dim,
                    found: v.len(),
                },
            );
        }
        if v.iter().any(|x| !x.is_finite()) {
            self.push(location, IssueKind::NonFinite);
        } else if v.iter().all(|&x| x == 0.0) {
            self.push(location, IssueKind::ZeroNorm { row: None });
        }
    }

    fn check_text(&mut self, location: &str, t: &TextTokens, dim: usize) {
        self.check_matrix(&format!("{location}.tokens"), &t.tokens, dim);
        self.check_vector(&format!("{location}.summary"), &t.summary, dim);
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} issue(s)", self.issues.len())?;
        for issue in &self.issues {
            write!(f, "; {}: {}", issue.location, issue.kind)?;
        }
        Ok(())
    }
}

/// Lists every violated dataset invariant. An empty report means the dataset is valid.
pub fn validate(ds: &EmbeddingDataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    let dim = ds.dim;
    if dim == 0 {
        report.push("dim", IssueKind::ZeroDimension);
    }
    let num_classes = ds.classes.len();
    for (i, video) in ds.videos.iter().enumerate() {
        let loc = format!("videos[{i}]");
        report.check_matrix(&format!("{loc}.frames"), &video.frames, dim);
        if video.labels.is_empty() {
            report.push(format!("{loc}.labels"), IssueKind::EmptyLabelSet);
        }
        for &label in &video.labels {
            if label >= num_classes {
                report.push(
                    format!("{loc}.labels"),
                    IssueKind::LabelOutOfRange {
                        label,
                        classes: num_classes,
                    },
                );
            }
        }
    }
    for (c, class) in ds.classes.iter().enumerate() {
        let loc = format!("classes[{c}]");
        report.check_text(&format!("{loc}.global"), &class.global, dim);
        for (n, sub) in class.subtexts.iter().enumerate() {
            report.check_text(&format!("{loc}.subtexts[{n}]"), sub, dim);
        }
    }
    for (i, set) in ds.candidates.iter().enumerate() {
        let loc = format!("candidates[{i}]");
        if set.class_id >= num_classes {
            report.push(
                format!("{loc}.class"),
                IssueKind::CandidateClassOutOfRange {
                    class: set.class_id,
                    classes: num_classes,
                },
            );
        }
        for (g, group) in set.groups.iter().enumerate() {
            if group.is_empty() {
                report.push(format!("{loc}.groups[{g}]"), IssueKind::EmptyCandidateGroup);
            }
            for (n, sub) in group.iter().enumerate() {
                report.check_text(&format!("{loc}.groups[{g}][{n}]"), sub, dim);
            }
        }
    }
    report
}

pub fn l2_normalize(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.mapv(|x| x / norm))
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dim: usize,
    videos: Vec<VideoEntry>,
    classes: Vec<ClassEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    candidates: Vec<CandidateEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VideoEntry {
    id: String,
    frames: usize,
    labels: Vec<usize>,
    tensor: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TextEntry {
    tokens: usize,
    tensor: String,
    summary: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassEntry {
    name: String,
    global: TextEntry,
    subtexts: Vec<TextEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CandidateEntry {
    class: usize,
    groups: Vec<Vec<TextEntry>>,
}

fn read_tensor(root: &Path, rel: &str, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let path = root.join(rel);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = (rows * cols * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::ShapeMismatch {
            path,
            expected,
            found: bytes.len() as u64,
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(rel.to_string()));
    }
    Ok(values)
}

fn read_matrix(root: &Path, rel: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let data = read_tensor(root, rel, rows, cols)?;
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

fn read_text(root: &Path, entry: &TextEntry, dim: usize) -> Result<TextTokens> {
    let tokens = read_matrix(root, &entry.tensor, entry.tokens, dim)?;
    let summary = Array1::from(read_tensor(root, &entry.summary, 1, dim)?);
    Ok(TextTokens { tokens, summary })
}

fn write_tensor<'a>(root: &Path, rel: &str, values: impl Iterator<Item = &'a f64>) -> Result<()> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes: Vec<u8> = values.flat_map(|&x| (x as f32).to_le_bytes()).collect();
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

fn write_text(root: &Path, stem: &str, t: &TextTokens) -> Result<TextEntry> {
    let tensor = format!("{stem}.f32");
    let summary = format!("{stem}.summary.f32");
    write_tensor(root, &tensor, t.tokens.iter())?;
    write_tensor(root, &summary, t.summary.iter())?;
    Ok(TextEntry {
        tokens: t.tokens.nrows(),
        tensor,
        summary,
    })
}

/// Reads and fully validates a dataset directory.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let root = root.as_ref();
    let manifest_path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::ManifestParse(e.to_string()))?;
    if manifest.format != FORMAT_NAME {
        return Err(Error::ManifestParse(format!(
            "unknown format {:?}",
            manifest.format
        )));
    }
    if manifest.version != FORMAT_VERSION {
        return Err(Error::ManifestParse(format!(
            "unsupported version {}",
            manifest.version
        )));
    }
    let dim = manifest.dim;

    let videos = manifest
        .videos
        .iter()
        .map(|v| {
            Ok(FrameEmbeddings {
                video_id: v.id.clone(),
                frames: read_matrix(root, &v.tensor, v.frames, dim)?,
                labels: v.labels.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = manifest
        .classes
        .iter()
        .map(|c| {
            Ok(ClassTextBundle {
                class_name: c.name.clone(),
                global: read_text(root, &c.global, dim)?,
                subtexts: c
                    .subtexts
                    .iter()
                    .map(|s| read_text(root, s, dim))
                    .collect::<Result<Vec<_>>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let candidates = manifest
        .candidates
        .iter()
        .map(|set| {
            Ok(SubtextCandidateSet {
                class_id: set.class,
                groups: set
                    .groups
                    .iter()
                    .map(|g| g.iter().map(|s| read_text(root, s, dim)).collect())
                    .collect::<Result<Vec<_>>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let ds = EmbeddingDataset {
        dim,
        videos,
        classes,
        candidates,
    };
    let report = validate(&ds);
    if !report.is_valid() {
        return Err(Error::ValidationFailure(report));
    }
    Ok(ds)
}

/// Writes `ds` under `root`, creating directories as needed.
///
/// Output bytes depend only on the dataset contents, so saving the same
/// dataset twice yields identical directories.
pub fn save_dataset(ds: &EmbeddingDataset, root: impl AsRef<Path>) -> Result<()> {
    let report = validate(ds);
    if !report.is_valid() {
        return Err(Error::ValidationFailure(report));
    }
    let root: PathBuf = root.as_ref().to_path_buf();
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;

    let mut videos = Vec::with_capacity(ds.videos.len());
    for (i, v) in ds.videos.iter().enumerate() {
        let tensor = format!("videos/{i:06}.f32");
        write_tensor(&root, &tensor, v.frames.iter())?;
        videos.push(VideoEntry {
            id: v.video_id.clone(),
            frames: v.frames.nrows(),
            labels: v.labels.clone(),
            tensor,
        });
    }
    let mut classes = Vec::with_capacity(ds.classes.len());
    for (c, class) in ds.classes.iter().enumerate() {
        let global = write_text(&root, &format!("classes/{c:04}/global"), &class.global)?;
        let subtexts = class
            .subtexts
            .iter()
            .enumerate()
            .map(|(n, s)| write_text(&root, &format!("classes/{c:04}/sub{n:03}"), s))
            .collect::<Result<Vec<_>>>()?;
        classes.push(ClassEntry {
            name: class.class_name.clone(),
            global,
            subtexts,
        });
    }
    let mut candidates = Vec::with_capacity(ds.candidates.len());
    for (i, set) in ds.candidates.iter().enumerate() {
        let groups = set
            .groups
            .iter()
            .enumerate()
            .map(|(g, group)| {
                group
                    .iter()
                    .enumerate()
                    .map(|(n, s)| {
                        write_text(&root, &format!("candidates/{i:04}/g{g:03}/sub{n:03}"), s)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        candidates.push(CandidateEntry {
            class: set.class_id,
            groups,
        });
    }

    let manifest = Manifest {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        dim: ds.dim,
        videos,
        classes,
        candidates,
    };
    let path = root.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Rounds every stored value to binary32, i.e. what a save/load cycle yields.
pub fn round_to_storage(ds: &EmbeddingDataset) -> EmbeddingDataset {
    let r = |x: &f64| *x as f32 as f64;
    let text = |t: &TextTokens| TextTokens {
        tokens: t.tokens.map(r),
        summary: t.summary.map(r),
    };
    EmbeddingDataset {
        dim: ds.dim,
        videos: ds
            .videos
            .iter()
            .map(|v| FrameEmbeddings {
                video_id: v.video_id.clone(),
                frames: v.frames.map(r),
                labels: v.labels.clone(),
            })
            .collect(),
        classes: ds
            .classes
            .iter()
            .map(|c| ClassTextBundle {
                class_name: c.class_name.clone(),
                global: text(&c.global),
                subtexts: c.subtexts.iter().map(text).collect(),
            })
            .collect(),
        candidates: ds
            .candidates
            .iter()
            .map(|s| SubtextCandidateSet {
                class_id: s.class_id,
                groups: s
                    .groups
                    .iter()
                    .map(|g| g.iter().map(text).collect())
                    .collect(),
            })
            .collect(),
    }
}
