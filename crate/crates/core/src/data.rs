//! Per-cue feature sequences: CSV ingestion, fixed-length resampling,
//! normalization, dataset manifests and a synthetic generator.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Cue;
use crate::tensor::Tensor;

const DEFAULT_SCHEMA: &str = include_str!("../schema/openface_cues.toml");

/// Frame rate written into the timestamp column of generated files.
const SYNTH_FPS: f64 = 30.0;

/// One subject's frames for a single cue, shaped `(frames, features)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub subject_id: String,
    pub cue: Cue,
    pub frames: Tensor,
    /// 1 for depressed, 0 otherwise; `None` until joined with a manifest.
    pub label: Option<u8>,
}

impl FeatureSequence {
    pub fn new(subject_id: impl Into<String>, cue: Cue, frames: Tensor) -> Result<Self> {
        if frames.ndim() != 2 {
            return Err(Error::InvalidShape(format!(
                "feature sequence must be (frames, features), got {:?}",
                frames.shape()
            )));
        }
        Ok(Self {
            subject_id: subject_id.into(),
            cue,
            frames,
            label: None,
        })
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    fn with_frames(&self, frames: Tensor) -> Self {
        Self {
            subject_id: self.subject_id.clone(),
            cue: self.cue,
            frames,
            label: self.label,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    metadata: Vec<String>,
    cues: BTreeMap<String, CueColumns>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CueColumns {
    columns: Vec<String>,
}

/// Column names of each cue in the tracker's CSV export.
#[derive(Clone, Debug, PartialEq)]
pub struct CueSchema {
    metadata: Vec<String>,
    columns: BTreeMap<Cue, Vec<String>>,
}

impl Default for CueSchema {
    fn default() -> Self {
        Self::parse(DEFAULT_SCHEMA, Path::new("openface_cues.toml"))
            .expect("bundled schema is valid")
    }
}

impl CueSchema {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let file: SchemaFile = toml::from_str(text).map_err(|source| Error::Toml {
            path: path.to_path_buf(),
            source,
        })?;
        let mut columns = BTreeMap::new();
        for (name, cols) in file.cues {
            let cue: Cue = name.parse()?;
            if cols.columns.len() != cue.feature_dim() {
                return Err(Error::Config(format!(
                    "schema lists {} columns for `{cue}`, expected {}",
                    cols.columns.len(),
                    cue.feature_dim()
                )));
            }
            columns.insert(cue, cols.columns);
        }
        Ok(Self {
            metadata: file.metadata,
            columns,
        })
    }

    pub fn metadata(&self) -> &[String] {
        &self.metadata
    }

    pub fn columns(&self, cue: Cue) -> Result<&[String]> {
        self.columns
            .get(&cue)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("schema has no columns for `{cue}`")))
    }
}

/// Reads one cue of one subject. Metadata and unknown columns are ignored;
/// the schema's feature columns are read in schema order.
pub fn read_cue_csv(
    path: &Path,
    subject_id: &str,
    cue: Cue,
    schema: &CueSchema,
) -> Result<FeatureSequence> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_cue_csv(file, path, subject_id, cue, schema)
}

/// Like [`read_cue_csv`] for any reader; `source` names it in errors.
pub fn parse_cue_csv<R: Read>(
    reader: R,
    source: &Path,
    subject_id: &str,
    cue: Cue,
    schema: &CueSchema,
) -> Result<FeatureSequence> {
    let wanted = schema.columns(cue)?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut index = Vec::with_capacity(wanted.len());
    let mut missing = Vec::new();
    for name in wanted {
        match headers.iter().position(|h| h == name) {
            Some(i) => index.push(i),
            None => missing.push(name.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingColumns {
            path: source.to_path_buf(),
            missing,
        });
    }

    let mut data = Vec::new();
    let mut rows = 0;
    for record in rdr.records() {
        let record = record?;
        rows += 1;
        for (&i, name) in index.iter().zip(wanted) {
            let raw = record.get(i).unwrap_or("");
            let value = raw.parse::<f64>().map_err(|_| Error::MalformedNumber {
                path: source.to_path_buf(),
                row: rows,
                column: name.clone(),
                value: raw.to_string(),
            })?;
            data.push(value);
        }
    }
    if rows == 0 {
        return Err(Error::NoFrames(source.to_path_buf()));
    }
    FeatureSequence::new(subject_id, cue, Tensor::new(&[rows, wanted.len()], data)?)
}

/// Writes a sequence in the tracker layout: metadata columns followed by
/// the cue's feature columns.
pub fn write_cue_csv<W: Write>(writer: W, seq: &FeatureSequence, schema: &CueSchema) -> Result<()> {
    let columns = schema.columns(seq.cue)?;
    if columns.len() != seq.dim() {
        return Err(Error::ShapeMismatch {
            op: "write_cue_csv",
            left: vec![columns.len()],
            right: seq.frames.shape().to_vec(),
        });
    }
    let mut wtr = csv::Writer::from_writer(writer);
    let header: Vec<&str> = schema
        .metadata()
        .iter()
        .chain(columns)
        .map(String::as_str)
        .collect();
    wtr.write_record(&header)?;
    let mut fields = Vec::with_capacity(header.len());
    for (t, row) in seq.frames.data().chunks(seq.dim()).enumerate() {
        fields.clear();
        for meta in schema.metadata() {
            fields.push(match meta.as_str() {
                "frame" => (t + 1).to_string(),
                "timestamp" => format!("{:.3}", t as f64 / SYNTH_FPS),
                _ => "1".to_string(),
            });
        }
        fields.extend(row.iter().map(|v| format!("{v:?}")));
        wtr.write_record(&fields)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Keeps the first `target` frames, zero-padding the tail of shorter
/// sequences.
pub fn resample_head_first(seq: &FeatureSequence, target: usize) -> FeatureSequence {
    seq.with_frames(window(&seq.frames, 0, target))
}

/// Cuts a sequence into consecutive non-overlapping pieces of
/// `piece_len` frames; the last piece is zero-padded.
pub fn split_average_pieces(seq: &FeatureSequence, piece_len: usize) -> Vec<FeatureSequence> {
    assert!(piece_len > 0, "piece length must be positive");
    let count = seq.len().div_ceil(piece_len).max(1);
    (0..count).map(|i| piece(seq, i, piece_len)).collect()
}

/// Piece `index` of [`split_average_pieces`]; pieces past the end are all
/// zeros.
pub fn piece(seq: &FeatureSequence, index: usize, piece_len: usize) -> FeatureSequence {
    seq.with_frames(window(&seq.frames, index * piece_len, piece_len))
}

/// Rows `start..start + len` of a `(frames, features)` tensor, with rows
/// past the end filled with zeros.
fn window(frames: &Tensor, start: usize, len: usize) -> Tensor {
    let (t, d) = (frames.shape()[0], frames.shape()[1]);
    let mut data = vec![0.0; len * d];
    let end = t.min(start + len);
    if start < end {
        data[..(end - start) * d].copy_from_slice(&frames.data()[start * d..end * d]);
    }
    Tensor::from_parts(vec![len, d], data)
}

/// Per-feature z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    /// Population standard deviation; zero-variance features store 1.
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Statistics over every frame of every sequence, padding included.
    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a FeatureSequence>) -> Result<Self> {
        let seqs: Vec<&FeatureSequence> = seqs.into_iter().collect();
        let first = seqs.first().ok_or(Error::EmptyDataset("normalization"))?;
        let d = first.dim();
        let mut count = 0usize;
        let mut sum = vec![0.0; d];
        for seq in &seqs {
            if seq.dim() != d {
                return Err(Error::ShapeMismatch {
                    op: "normalization",
                    left: vec![d],
                    right: seq.frames.shape().to_vec(),
                });
            }
            for row in seq.frames.data().chunks(d) {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v;
                }
            }
            count += seq.len();
        }
        if count == 0 {
            return Err(Error::EmptyDataset("normalization"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut sq = vec![0.0; d];
        for seq in &seqs {
            for row in seq.frames.data().chunks(d) {
                for ((s, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = (s / n).sqrt();
                if sd > f64::EPSILON * m.abs().max(1.0) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, seq: &FeatureSequence) -> Result<FeatureSequence> {
        let d = self.mean.len();
        if seq.dim() != d {
            return Err(Error::ShapeMismatch {
                op: "normalization",
                left: vec![d],
                right: seq.frames.shape().to_vec(),
            });
        }
        let mut frames = seq.frames.clone();
        for row in frames.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(seq.with_frames(frames))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub label: u8,
    pub split: Split,
}

/// Subject labels and split assignment, plus free-form `key=value`
/// metadata stored as leading `#` comment lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub metadata: Vec<(String, String)>,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        BufReader::new(file)
            .read_to_string(&mut text)
            .map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut metadata = Vec::new();
        for line in text.as_bytes().lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let Some(rest) = line.strip_prefix('#') else {
                break;
            };
            if let Some((k, v)) = rest.split_once('=') {
                metadata.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut entries = Vec::new();
        for row in rdr.deserialize() {
            let entry: ManifestEntry = row?;
            if entry.label > 1 {
                return Err(Error::Config(format!(
                    "{}: subject {} has label {}, expected 0 or 1",
                    path.display(),
                    entry.subject_id,
                    entry.label
                )));
            }
            entries.push(entry);
        }
        Ok(Self { metadata, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for (k, v) in &self.metadata {
            writeln!(out, "# {k}={v}").expect("write to memory");
        }
        let mut wtr = csv::Writer::from_writer(&mut out);
        for entry in &self.entries {
            wtr.serialize(entry)?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        drop(wtr);
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

/// A labeled subject with its raw sequences for each loaded cue.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    pub label: u8,
    pub split: Split,
    pub cues: BTreeMap<Cue, FeatureSequence>,
}

impl Subject {
    pub fn cue(&self, cue: Cue) -> Result<&FeatureSequence> {
        self.cues
            .get(&cue)
            .ok_or_else(|| Error::MissingBranch(cue.to_string()).in_subject(&self.id))
    }
}

pub fn cue_file(root: &Path, subject_id: &str, cue: Cue) -> PathBuf {
    root.join(subject_id).join(format!("{cue}.csv"))
}

/// Loads the listed cues for every manifest subject under `root`.
pub fn load_dataset(
    root: &Path,
    manifest: &Manifest,
    cues: &[Cue],
    schema: &CueSchema,
) -> Result<Vec<Subject>> {
    manifest
        .entries
        .iter()
        .map(|entry| {
            let mut seqs = BTreeMap::new();
            for &cue in cues {
                let path = cue_file(root, &entry.subject_id, cue);
                let seq = read_cue_csv(&path, &entry.subject_id, cue, schema)
                    .map_err(|e| e.in_subject(&entry.subject_id))?;
                seqs.insert(cue, seq.with_label(entry.label));
            }
            Ok(Subject {
                id: entry.subject_id.clone(),
                label: entry.label,
                split: entry.split,
                cues: seqs,
            })
        })
        .collect()
}

/// Writes subjects as per-subject cue CSVs plus a manifest.
pub fn write_dataset(
    root: &Path,
    subjects: &[Subject],
    metadata: Vec<(String, String)>,
    schema: &CueSchema,
) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for subject in subjects {
        let dir = root.join(&subject.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for seq in subject.cues.values() {
            let path = cue_file(root, &subject.id, seq.cue);
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_cue_csv(io::BufWriter::new(file), seq, schema)
                .map_err(|e| e.in_subject(&subject.id))?;
        }
    }
    let manifest = Manifest {
        metadata,
        entries: subjects
            .iter()
            .map(|s| ManifestEntry {
                subject_id: s.id.clone(),
                label: s.label,
                split: s.split,
            })
            .collect(),
    };
    manifest.write(&root.join(MANIFEST_FILE))
}

/// Where class-1 modulation is injected.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalLayout {
    /// Every cue of a depressed subject carries the modulation.
    #[default]
    Shared,
    /// Each depressed subject carries it in exactly one cue, rotating
    /// through the cues, so no single cue separates the classes.
    SplitSignal,
}

impl fmt::Display for SignalLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignalLayout::Shared => "shared",
            SignalLayout::SplitSignal => "split-signal",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub subjects_per_class: usize,
    pub length: usize,
    pub cues: Vec<Cue>,
    /// Feature width per cue; cues not listed use the tracker width.
    pub dims: BTreeMap<String, usize>,
    /// Number of leading channels of each cue that carry the modulation.
    pub informative_channels: usize,
    pub amplitude: f64,
    /// Modulation period in frames.
    pub period: f64,
    pub noise_std: f64,
    pub layout: SignalLayout,
    /// When set, the modulation only spans the first this-many frames.
    pub signal_frames: Option<usize>,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects_per_class: 8,
            length: 5000,
            cues: vec![Cue::Landmarks2d, Cue::Pose],
            dims: BTreeMap::new(),
            informative_channels: 4,
            amplitude: 1.0,
            period: 200.0,
            noise_std: 1.0,
            layout: SignalLayout::Shared,
            signal_frames: None,
            validation_fraction: 0.0,
            test_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn dim(&self, cue: Cue) -> usize {
        self.dims
            .get(cue.name())
            .copied()
            .unwrap_or_else(|| cue.feature_dim())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.subjects_per_class == 0 || self.length == 0 {
            return fail("synthetic dataset needs subjects and frames".into());
        }
        if self.cues.is_empty() {
            return fail("synthetic dataset needs at least one cue".into());
        }
        for key in self.dims.keys() {
            key.parse::<Cue>()?;
        }
        if self.cues.iter().any(|&c| self.dim(c) == 0) {
            return fail("cue widths must be positive".into());
        }
        if self.period.is_nan()
            || self.period <= 0.0
            || self.noise_std.is_nan()
            || self.noise_std < 0.0
            || !self.amplitude.is_finite()
        {
            return fail("period must be positive and noise non-negative".into());
        }
        let (v, t) = (self.validation_fraction, self.test_fraction);
        if !(0.0..=1.0).contains(&v) || !(0.0..=1.0).contains(&t) || v + t > 1.0 {
            return fail(format!("invalid split fractions {v} and {t}"));
        }
        Ok(())
    }

    /// Subjects per split within one class, in train, validation, test
    /// order.
    pub fn split_sizes(&self) -> [usize; 3] {
        let n = self.subjects_per_class;
        let test = (n as f64 * self.test_fraction).round() as usize;
        let val = ((n as f64 * self.validation_fraction).round() as usize).min(n - test.min(n));
        [n - val - test.min(n), val, test.min(n)]
    }

    /// Manifest metadata describing this generation.
    pub fn metadata(&self) -> Vec<(String, String)> {
        let cues: Vec<&str> = self.cues.iter().map(|c| c.name()).collect();
        let mut meta = vec![
            ("generator".to_string(), "synthetic".to_string()),
            ("seed".to_string(), self.seed.to_string()),
            ("layout".to_string(), self.layout.to_string()),
            ("cues".to_string(), cues.join(";")),
            ("length".to_string(), self.length.to_string()),
            ("amplitude".to_string(), format!("{:?}", self.amplitude)),
            ("period".to_string(), format!("{:?}", self.period)),
            ("noise_std".to_string(), format!("{:?}", self.noise_std)),
            (
                "informative_channels".to_string(),
                self.informative_channels.to_string(),
            ),
        ];
        if let Some(n) = self.signal_frames {
            meta.push(("signal_frames".to_string(), n.to_string()));
        }
        meta
    }
}

/// Generates a labeled two-class dataset. Subject `i` has label `i % 2`
/// and draws from its own random stream, so subjects are independent of
/// each other and of generation order.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Subject>> {
    cfg.validate()?;
    let sizes = cfg.split_sizes();
    let mut cues = cfg.cues.clone();
    cues.sort();
    cues.dedup();
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;

    let total = 2 * cfg.subjects_per_class;
    let mut subjects = Vec::with_capacity(total);
    for i in 0..total {
        let label = (i % 2) as u8;
        let rank = i / 2;
        let split = if rank < sizes[0] {
            Split::Train
        } else if rank < sizes[0] + sizes[1] {
            Split::Validation
        } else {
            Split::Test
        };
        let signal_cue = match cfg.layout {
            SignalLayout::Shared => None,
            SignalLayout::SplitSignal => Some(cues[rank % cues.len()]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);

        let id = format!("synth{i:04}");
        let mut seqs = BTreeMap::new();
        for &cue in &cues {
            let d = cfg.dim(cue);
            let t = cfg.length;
            let mut data: Vec<f64> = (0..t * d).map(|_| noise.sample(&mut rng)).collect();
            let carries = label == 1 && signal_cue.is_none_or(|c| c == cue);
            if carries {
                let active = cfg.signal_frames.unwrap_or(t).min(t);
                for ch in 0..cfg.informative_channels.min(d) {
                    let phase = rng.random_range(0.0..2.0 * PI);
                    for step in 0..active {
                        let angle = 2.0 * PI * step as f64 / cfg.period + phase;
                        data[step * d + ch] += cfg.amplitude * angle.sin();
                    }
                }
            }
            let frames = Tensor::new(&[t, d], data)?;
            seqs.insert(
                cue,
                FeatureSequence::new(&id, cue, frames)?.with_label(label),
            );
        }
        subjects.push(Subject {
            id,
            label,
            split,
            cues: seqs,
        });
    }
    Ok(subjects)
}
