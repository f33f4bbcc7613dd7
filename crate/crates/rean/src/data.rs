//! Template serialization, dataset manifests and the synthetic embedding
//! generator used for desk-scale benchmarks.
//!
//! Template files: magic `REAT`, version u32, D u32, N u32, subject id and
//! template id as length-prefixed UTF-8, then N*D little-endian f32 values
//! row by row. Manifests are line-oriented: `path<TAB>subject_id<TAB>split`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::aggregator::FrameEmbeddingSet;
use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, Matrix, Real};

pub const TEMPLATE_MAGIC: [u8; 4] = *b"REAT";
pub const TEMPLATE_VERSION: u32 = 1;

// -- binary helpers ---------------------------------------------------------

pub(crate) fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                needed: self.pos + n,
                available: self.buf.len(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let b = self.take(len)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::Config("non-UTF8 string in template header".into()))
    }
}

// -- template files ----------------------------------------------------------

/// Serialize a template. Values are stored as little-endian f32.
pub fn encode_template<T: Real>(set: &FrameEmbeddingSet<T>) -> Vec<u8> {
    let (n, d) = set.frames.shape();
    let mut buf = Vec::with_capacity(24 + set.subject_id.len() + set.template_id.len() + n * d * 4);
    buf.extend_from_slice(&TEMPLATE_MAGIC);
    put_u32(&mut buf, TEMPLATE_VERSION);
    put_u32(&mut buf, d as u32);
    put_u32(&mut buf, n as u32);
    put_str(&mut buf, &set.subject_id);
    put_str(&mut buf, &set.template_id);
    for v in set.frames.data() {
        buf.extend_from_slice(&(v.to_f64().unwrap() as f32).to_le_bytes());
    }
    buf
}

/// Parse a template file. Distinct error kinds for bad magic, unsupported
/// version and truncation.
pub fn decode_template<T: Real>(bytes: &[u8]) -> Result<FrameEmbeddingSet<T>> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != TEMPLATE_MAGIC {
        return Err(Error::BadMagic {
            expected: TEMPLATE_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32()?;
    if version != TEMPLATE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let d = r.u32()? as usize;
    let n = r.u32()? as usize;
    let subject_id = r.string()?;
    let template_id = r.string()?;
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        data.push(T::c(r.f32()? as f64));
    }
    Ok(FrameEmbeddingSet::new(
        template_id,
        subject_id,
        Matrix::from_vec(n, d, data)?,
    ))
}

pub fn write_template<T: Real>(path: &Path, set: &FrameEmbeddingSet<T>) -> Result<()> {
    fs::write(path, encode_template(set))?;
    Ok(())
}

pub fn read_template<T: Real>(path: &Path) -> Result<FrameEmbeddingSet<T>> {
    decode_template(&fs::read(path).map_err(|e| Error::file(path, e))?)
}

/// Adapter for externally extracted embeddings: wrap a raw row-major matrix
/// as a template ready for serialization.
pub fn import_embedding_matrix<T: Real>(
    template_id: &str,
    subject_id: &str,
    rows: usize,
    cols: usize,
    values: Vec<T>,
) -> Result<FrameEmbeddingSet<T>> {
    Ok(FrameEmbeddingSet::new(
        template_id,
        subject_id,
        Matrix::from_vec(rows, cols, values)?,
    ))
}

// -- manifests ----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Gallery,
    Probe,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Gallery => "gallery",
            Split::Probe => "probe",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "gallery" => Ok(Split::Gallery),
            "probe" => Ok(Split::Probe),
            other => Err(Error::Config(format!("unknown split tag '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub subject_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn to_string(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                e.path.display(),
                e.subject_id,
                e.split
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (path, subject, split) = match (parts.next(), parts.next(), parts.next()) {
                (Some(p), Some(s), Some(t)) if !s.is_empty() => (p, s, t),
                _ => {
                    return Err(Error::Manifest {
                        line: i + 1,
                        reason: "expected path<TAB>subject_id<TAB>split".into(),
                    })
                }
            };
            entries.push(ManifestEntry {
                path: PathBuf::from(path),
                subject_id: subject.to_string(),
                split: split.parse()?,
            });
        }
        Ok(DatasetManifest { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::file(path, e))?)
    }

    /// Load templates for one split, normalizing every frame on ingestion.
    /// Relative paths resolve against `base`.
    pub fn load_split<T: Real>(&self, base: &Path, split: Split) -> Result<Vec<FrameEmbeddingSet<T>>> {
        let mut out = Vec::new();
        for e in self.entries.iter().filter(|e| e.split == split) {
            let path = if e.path.is_absolute() {
                e.path.clone()
            } else {
                base.join(&e.path)
            };
            let mut set = read_template::<T>(&path)?;
            set.subject_id = e.subject_id.clone();
            set.normalize_frames();
            out.push(set);
        }
        Ok(out)
    }
}

// -- synthetic data -------------------------------------------------------------

/// Generator configuration. Noise tiers: `clean_sigma` for informative frames,
/// `corrupt_sigma` for the redundant seed frame; `redundancy_ratio` of each
/// template's frames are near-duplicates of the corrupted seed with
/// `duplicate_jitter` noise.
#[derive(Debug, Clone)]
pub struct SyntheticDatasetSpec {
    pub num_subjects: usize,
    pub templates_per_subject: usize,
    pub frames_per_template: usize,
    pub dim: usize,
    pub clean_sigma: f64,
    pub corrupt_sigma: f64,
    pub redundancy_ratio: f64,
    pub duplicate_jitter: f64,
    pub seed: u64,
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config("dimension must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.redundancy_ratio) {
            return Err(Error::Config("redundancy ratio must be in [0, 1)".into()));
        }
        if self.clean_sigma < 0.0 || self.corrupt_sigma < 0.0 || self.duplicate_jitter < 0.0 {
            return Err(Error::Config("noise sigmas must be >= 0".into()));
        }
        if self.num_subjects == 0 || self.templates_per_subject == 0 || self.frames_per_template == 0 {
            return Err(Error::Config("subject/template/frame counts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    /// video-style templates, grouped by subject in generation order
    pub templates: Vec<FrameEmbeddingSet<f64>>,
    /// one clean single-frame (still-style) template per subject
    pub stills: Vec<FrameEmbeddingSet<f64>>,
    pub subject_ids: Vec<String>,
}

fn gaussian_vec(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vec(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = gaussian_vec(d, rng);
    l2_normalize(&mut v);
    v
}

fn noisy_frame(proto: &[f64], sigma: f64, extra: Option<&[f64]>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = proto
        .iter()
        .zip(gaussian_vec(proto.len(), rng))
        .map(|(&p, g)| p + sigma * g)
        .collect();
    if let Some(e) = extra {
        for (vj, &ej) in v.iter_mut().zip(e) {
            *vj += ej;
        }
    }
    l2_normalize(&mut v);
    v
}

/// Deterministically generate a synthetic embedding dataset.
///
/// Per subject a unit prototype is drawn on the D-sphere. Each template holds
/// a fraction of clean frames (low-sigma noise around the prototype) and a
/// contiguous run of near-duplicate frames: one corrupted seed (high-sigma
/// noise plus a pull toward a dataset-wide distractor direction) repeated
/// with tiny jitter. Every frame is re-normalized to unit length.
pub fn generate_synthetic(spec: &SyntheticDatasetSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let distractor = unit_vec(d, &mut rng);
    let n_red = (spec.redundancy_ratio * spec.frames_per_template as f64).floor() as usize;
    let n_clean = spec.frames_per_template - n_red;

    let mut templates = Vec::new();
    let mut stills = Vec::new();
    let mut subject_ids = Vec::new();
    for s in 0..spec.num_subjects {
        let subject_id = format!("subj{s:04}");
        let proto = unit_vec(d, &mut rng);
        for t in 0..spec.templates_per_subject {
            let mut clean: Vec<Vec<f64>> = (0..n_clean)
                .map(|_| noisy_frame(&proto, spec.clean_sigma, None, &mut rng))
                .collect();
            let mut rows: Vec<Vec<f64>> = Vec::with_capacity(spec.frames_per_template);
            if n_red > 0 {
                let pull: Vec<f64> = distractor.iter().map(|&x| x * spec.corrupt_sigma).collect();
                let seed_frame = noisy_frame(&proto, spec.corrupt_sigma, Some(&pull), &mut rng);
                let run: Vec<Vec<f64>> = (0..n_red)
                    .map(|_| noisy_frame(&seed_frame, spec.duplicate_jitter, None, &mut rng))
                    .collect();
                let start = rng.gen_range(0..=n_clean);
                rows.extend(clean.drain(..start));
                rows.extend(run);
                rows.extend(clean);
            } else {
                rows = clean;
            }
            templates.push(FrameEmbeddingSet::new(
                format!("{subject_id}_t{t:02}"),
                subject_id.clone(),
                Matrix::from_rows(&rows)?,
            ));
        }
        let still = noisy_frame(&proto, spec.clean_sigma, None, &mut rng);
        stills.push(FrameEmbeddingSet::new(
            format!("{subject_id}_still"),
            subject_id.clone(),
            Matrix::from_rows(&[still])?,
        ));
        subject_ids.push(subject_id);
    }
    Ok(SyntheticDataset {
        templates,
        stills,
        subject_ids,
    })
}

/// How a synthetic dataset is carved into manifest splits.
#[derive(Debug, Clone, Copy)]
pub struct SplitPlan {
    /// leading subjects used for training
    pub train_subjects: usize,
    /// per training subject, how many trailing templates go to validation
    pub val_templates_per_subject: usize,
    /// how many of the held-out subjects get a gallery still; the rest
    /// become non-mated probes for open-set evaluation
    pub gallery_subjects: usize,
}

/// Assign every template of a synthetic dataset to exactly one split:
/// training subjects contribute train/val video templates, held-out subjects
/// contribute probe videos and (for the first `gallery_subjects`) a gallery
/// still.
pub fn plan_splits(
    ds: &SyntheticDataset,
    plan: &SplitPlan,
) -> Result<Vec<(FrameEmbeddingSet<f64>, Split)>> {
    let subjects = ds.subject_ids.len();
    if plan.train_subjects > subjects {
        return Err(Error::Config(format!(
            "train_subjects {} exceeds subject count {}",
            plan.train_subjects, subjects
        )));
    }
    let heldout = subjects - plan.train_subjects;
    if plan.gallery_subjects > heldout {
        return Err(Error::Config(format!(
            "gallery_subjects {} exceeds held-out count {}",
            plan.gallery_subjects, heldout
        )));
    }
    let per_subject = ds.templates.len() / subjects;
    if plan.val_templates_per_subject >= per_subject {
        return Err(Error::Config(
            "val templates per subject must leave at least one train template".into(),
        ));
    }
    let mut out = Vec::new();
    for (i, tpl) in ds.templates.iter().enumerate() {
        let s = i / per_subject;
        let t = i % per_subject;
        let split = if s < plan.train_subjects {
            if t >= per_subject - plan.val_templates_per_subject {
                Split::Val
            } else {
                Split::Train
            }
        } else {
            Split::Probe
        };
        out.push((tpl.clone(), split));
    }
    for (s, still) in ds.stills.iter().enumerate() {
        if s >= plan.train_subjects && s < plan.train_subjects + plan.gallery_subjects {
            out.push((still.clone(), Split::Gallery));
        }
    }
    Ok(out)
}

/// Write templates and a manifest under `dir` (templates in `templates/`).
pub fn write_dataset(dir: &Path, assignments: &[(FrameEmbeddingSet<f64>, Split)]) -> Result<DatasetManifest> {
    let tdir = dir.join("templates");
    fs::create_dir_all(&tdir)?;
    let mut manifest = DatasetManifest::default();
    for (set, split) in assignments {
        let rel = PathBuf::from("templates").join(format!("{}.reat", set.template_id));
        write_template(&dir.join(&rel), set)?;
        manifest.entries.push(ManifestEntry {
            path: rel,
            subject_id: set.subject_id.clone(),
            split: *split,
        });
    }
    manifest.write(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}
