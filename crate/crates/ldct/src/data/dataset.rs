//! On-disk dataset: a compact binary slice format, a JSON manifest, and a
//! loader enforcing that the target-domain training split never exposes
//! clean (NDCT) images.

use super::{apply_low_dose_noise, generate_phantom, DomainSpec, SlicePair};
use crate::rng::derive;
use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

/// Magic bytes of the slice file format.
pub const SLICE_MAGIC: [u8; 4] = *b"BNUA";
/// Current slice file format version.
pub const SLICE_VERSION: u32 = 1;
/// Current manifest schema version.
pub const MANIFEST_VERSION: u32 = 1;
/// Manifest filename inside a dataset directory.
pub const MANIFEST_NAME: &str = "manifest.json";

/// Writes one slice: magic, version, height, width (u32 LE), then row-major
/// f32 LE pixels. The encoding is bit-exact.
pub fn write_slice(path: &Path, img: &Array2<f32>) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let (h, wd) = img.dim();
    w.write_all(&SLICE_MAGIC).map_err(io_err)?;
    w.write_all(&SLICE_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(h as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(wd as u32).to_le_bytes()).map_err(io_err)?;
    for &v in img.iter() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a slice file written by [`write_slice`], validating magic, version,
/// and payload length.
pub fn read_slice(path: &Path) -> Result<Array2<f32>> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut buf)
        .map_err(io_err)?;
    let bad = |detail: &str| Error::Data(format!("{}: {detail}", path.display()));
    if buf.len() < 16 {
        return Err(bad("truncated header"));
    }
    if buf[0..4] != SLICE_MAGIC {
        return Err(bad("bad magic, not a slice file"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != SLICE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let h = u32_at(8) as usize;
    let w = u32_at(12) as usize;
    let expected = 16 + h * w * 4;
    if buf.len() != expected {
        return Err(bad(&format!(
            "payload length {} does not match {h}×{w} header",
            buf.len()
        )));
    }
    let mut out = Array2::zeros((h, w));
    for (i, v) in out.iter_mut().enumerate() {
        let off = 16 + i * 4;
        *v = f32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
    }
    Ok(out)
}

/// Role of a domain in the adaptation task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Source,
    Target,
}

impl DomainKind {
    fn dir(self) -> &'static str {
        match self {
            DomainKind::Source => "source",
            DomainKind::Target => "target",
        }
    }
}

/// Dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
    const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

/// Number of slices per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Generation parameters for a two-domain synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub slice_size: usize,
    pub seed: u64,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub source_counts: SplitCounts,
    pub target_counts: SplitCounts,
}

impl DatasetConfig {
    /// Desk-scale default: 128×128 slices, head → abdomen task.
    pub fn smoke() -> Self {
        let counts = SplitCounts {
            train: 64,
            val: 8,
            test: 8,
        };
        DatasetConfig {
            slice_size: 128,
            seed: 0,
            source: DomainSpec::head_like(),
            target: DomainSpec::abdomen_like(),
            source_counts: counts,
            target_counts: counts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.slice_size < 16 {
            return Err(Error::Config(format!(
                "slice_size {} too small (minimum 16)",
                self.slice_size
            )));
        }
        if self.source_counts.train == 0 || self.target_counts.train == 0 {
            return Err(Error::Config("train splits must be non-empty".into()));
        }
        self.source.validate()?;
        self.target.validate()?;
        if self.source.name == self.target.name {
            return Err(Error::Config(
                "source and target domains must have distinct names".into(),
            ));
        }
        Ok(())
    }
}

/// One slice in the manifest: LDCT path, optional NDCT path (absent for the
/// target training split), and the realized per-slice noise scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub ldct: String,
    pub ndct: Option<String>,
    pub noise_scale: f32,
}

/// Per-domain manifest section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainManifest {
    pub spec: DomainSpec,
    pub train: Vec<SliceEntry>,
    pub val: Vec<SliceEntry>,
    pub test: Vec<SliceEntry>,
}

impl DomainManifest {
    fn entries(&self, split: Split) -> &[SliceEntry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
    fn entries_mut(&mut self, split: Split) -> &mut Vec<SliceEntry> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

// DomainSpec has no Eq/PartialEq derive; manifests compare via JSON in tests.
impl PartialEq for DomainSpec {
    fn eq(&self, other: &Self) -> bool {
        serde_json::to_string(self).ok() == serde_json::to_string(other).ok()
    }
}

/// Dataset manifest: everything needed to reload and audit a generated set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub slice_size: usize,
    pub seed: u64,
    pub source: DomainManifest,
    pub target: DomainManifest,
}

fn json_err(path: &Path) -> impl Fn(serde_json::Error) -> Error + '_ {
    move |source| Error::Json {
        path: path.to_path_buf(),
        source,
    }
}

/// Generates the full two-domain dataset under `out_dir` and writes
/// `manifest.json`. Slice generation keys every RNG stream on
/// `(seed, role, split, index)`, so the same config always produces the same
/// bytes and no two slices share a stream.
pub fn build_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    let mut manifest = Manifest {
        version: MANIFEST_VERSION,
        slice_size: config.slice_size,
        seed: config.seed,
        source: DomainManifest {
            spec: config.source.clone(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        },
        target: DomainManifest {
            spec: config.target.clone(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        },
    };

    for kind in [DomainKind::Source, DomainKind::Target] {
        let (spec, counts) = match kind {
            DomainKind::Source => (&config.source, &config.source_counts),
            DomainKind::Target => (&config.target, &config.target_counts),
        };
        for split in Split::ALL {
            let dir = out_dir.join(kind.dir()).join(split.dir());
            fs::create_dir_all(&dir).map_err(|source| Error::Io {
                path: dir.clone(),
                source,
            })?;
            let hide_ndct = kind == DomainKind::Target && split == Split::Train;
            for idx in 0..counts.get(split) {
                let tag_ph = format!("phantom-{}-{}", kind.dir(), split.dir());
                let tag_no = format!("noise-{}-{}", kind.dir(), split.dir());
                let clean = generate_phantom(
                    spec,
                    config.slice_size,
                    &mut derive(config.seed, &tag_ph, idx as u64),
                );
                let pair =
                    apply_low_dose_noise(&clean, spec, &mut derive(config.seed, &tag_no, idx as u64))?;
                let rel_ldct = format!("{}/{}/ldct_{idx:04}.bnua", kind.dir(), split.dir());
                write_slice(&out_dir.join(&rel_ldct), &pair.ldct)?;
                let ndct = if hide_ndct {
                    None
                } else {
                    let rel_ndct = format!("{}/{}/ndct_{idx:04}.bnua", kind.dir(), split.dir());
                    write_slice(&out_dir.join(&rel_ndct), &pair.ndct)?;
                    Some(rel_ndct)
                };
                let domain = match kind {
                    DomainKind::Source => &mut manifest.source,
                    DomainKind::Target => &mut manifest.target,
                };
                domain.entries_mut(split).push(SliceEntry {
                    ldct: rel_ldct,
                    ndct,
                    noise_scale: pair.slice_noise_scale,
                });
            }
        }
    }

    let manifest_path = out_dir.join(MANIFEST_NAME);
    let json =
        serde_json::to_string_pretty(&manifest).map_err(json_err(&manifest_path))?;
    fs::write(&manifest_path, json).map_err(|source| Error::Io {
        path: manifest_path.clone(),
        source,
    })?;
    Ok(manifest)
}

/// A generated dataset opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    /// Opens the dataset rooted at `root` (must contain `manifest.json`).
    pub fn load(root: &Path) -> Result<Self> {
        let manifest_path = root.join(MANIFEST_NAME);
        let json = fs::read_to_string(&manifest_path).map_err(|source| Error::Io {
            path: manifest_path.clone(),
            source,
        })?;
        let manifest: Manifest =
            serde_json::from_str(&json).map_err(json_err(&manifest_path))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "unsupported manifest version {} in {}",
                manifest.version,
                manifest_path.display()
            )));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn spec(&self, kind: DomainKind) -> &DomainSpec {
        match kind {
            DomainKind::Source => &self.manifest.source.spec,
            DomainKind::Target => &self.manifest.target.spec,
        }
    }

    fn domain(&self, kind: DomainKind) -> &DomainManifest {
        match kind {
            DomainKind::Source => &self.manifest.source,
            DomainKind::Target => &self.manifest.target,
        }
    }

    pub fn len(&self, kind: DomainKind, split: Split) -> usize {
        self.domain(kind).entries(split).len()
    }

    /// Loads aligned (LDCT, NDCT) pairs for a split. The target training
    /// split has no clean images by construction, so requesting it is an
    /// error; use [`Dataset::target_train_ldct`] instead.
    pub fn load_pairs(&self, kind: DomainKind, split: Split) -> Result<Vec<SlicePair>> {
        if kind == DomainKind::Target && split == Split::Train {
            return Err(Error::Data(
                "NDCT is not available for the target training split; \
                 use target_train_ldct for unpaired training data"
                    .into(),
            ));
        }
        let spec = self.spec(kind);
        self.domain(kind)
            .entries(split)
            .iter()
            .map(|entry| {
                let ldct = read_slice(&self.root.join(&entry.ldct))?;
                let ndct_rel = entry.ndct.as_ref().ok_or_else(|| {
                    Error::Data(format!("missing NDCT entry alongside {}", entry.ldct))
                })?;
                let ndct = read_slice(&self.root.join(ndct_rel))?;
                let pair = SlicePair {
                    ndct,
                    ldct,
                    domain: spec.name.clone(),
                    slice_noise_scale: entry.noise_scale,
                };
                pair.validate()?;
                Ok(pair)
            })
            .collect()
    }

    /// Loads the target-domain training slices. Only LDCT images exist for
    /// this split, which is what makes the adaptation task unpaired.
    pub fn target_train_ldct(&self) -> Result<Vec<Array2<f32>>> {
        self.manifest
            .target
            .train
            .iter()
            .map(|entry| read_slice(&self.root.join(&entry.ldct)))
            .collect()
    }
}

/// Loads a real paired CT corpus laid out as
/// `<root>/<case>/{low,full}/slice_<n>.bnua` with matching slice numbers in
/// the `low` (quarter-dose) and `full` (routine-dose) subdirectories.
///
/// Clinical data cannot ship with this repository, so this entry point only
/// documents the expected layout and reports that no corpus is present.
pub fn load_clinical_corpus(root: &Path) -> Result<Vec<SlicePair>> {
    Err(Error::Data(format!(
        "no clinical corpus at {}: place paired slices under <case>/low and \
         <case>/full in slice file format, or use the synthetic generator",
        root.display()
    )))
}
