//! Synthetic weakly labelled clips with hidden strong labels.
//!
//! Each clip is Gaussian background noise over `N` frames of `D`-dimensional
//! features. Every event adds its class mean vector to the frames it covers.
//! The clip's weak label for a class is set iff at least one event of that
//! class occurs (the multi-instance bag rule); onsets and offsets are kept as
//! a strong reference used only for scoring.
//!
//! On disk a dataset is a directory holding
//! `train.milp`, `val.milp`, `test.milp` (feature matrices), `metadata.jsonl`
//! (one `{id, weak_labels, split}` object per clip), `reference.tsv`
//! (`clip_id  onset  offset  class`, seconds) and `manifest.json` with the
//! class names, frame rate and SHA-256 digests of the other files.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"MILP";
pub const FEATURE_VERSION: u8 = 1;

const DEFAULT_CLASS_NAMES: [&str; 8] =
    ["car", "train", "siren", "horn", "bus", "truck", "bicycle", "motorcycle"];

/// Generator settings. Defaults give 600/100/100 clips of 10 s at 12.5 Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub frames_per_clip: usize,
    pub frame_rate_hz: f64,
    pub feature_dim: usize,
    pub n_classes: usize,
    /// Mean number of events per clip (Poisson).
    pub events_per_clip: f64,
    pub min_event_frames: usize,
    pub max_event_frames: usize,
    /// Standard deviation of the background features.
    pub noise_std: f64,
    /// Norm of each class mean vector.
    pub class_separation: f64,
    /// Per-frame gain on event means is drawn from `[1 - j, 1 + j]`.
    pub amplitude_jitter: f64,
    /// Mean number of unlabelled look-alike bursts per clip (Poisson).
    pub distractors_per_clip: f64,
    /// Fraction of a class mean added over a distractor burst.
    pub distractor_strength: f64,
    pub max_distractor_frames: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 600,
            n_val: 100,
            n_test: 100,
            frames_per_clip: 125,
            frame_rate_hz: 12.5,
            feature_dim: 16,
            n_classes: 4,
            events_per_clip: 1.5,
            min_event_frames: 6,
            max_event_frames: 50,
            noise_std: 1.0,
            class_separation: 1.5,
            amplitude_jitter: 0.0,
            distractors_per_clip: 0.0,
            distractor_strength: 0.0,
            max_distractor_frames: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.frames_per_clip == 0 || self.feature_dim == 0 || self.n_classes == 0 {
            return bad("frames, feature dimension and classes must be positive".into());
        }
        if !(self.frame_rate_hz.is_finite() && self.frame_rate_hz > 0.0) {
            return bad(format!("frame rate {} must be positive", self.frame_rate_hz));
        }
        if self.min_event_frames == 0 || self.min_event_frames > self.max_event_frames {
            return bad(format!(
                "event duration range [{}, {}] is empty",
                self.min_event_frames, self.max_event_frames
            ));
        }
        if self.max_event_frames > self.frames_per_clip {
            return bad(format!(
                "events of {} frames do not fit in {}-frame clips",
                self.max_event_frames, self.frames_per_clip
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise level {} must be nonnegative", self.noise_std));
        }
        if !(self.events_per_clip >= 0.0 && self.events_per_clip.is_finite()) {
            return bad(format!("event rate {} must be nonnegative", self.events_per_clip));
        }
        if !(self.distractors_per_clip >= 0.0 && self.distractors_per_clip.is_finite()) {
            return bad(format!("distractor rate {} must be nonnegative", self.distractors_per_clip));
        }
        if !(0.0..=1.0).contains(&self.amplitude_jitter) {
            return bad(format!("amplitude jitter {} outside [0, 1]", self.amplitude_jitter));
        }
        if !self.distractor_strength.is_finite() {
            return bad("distractor strength must be finite".into());
        }
        if self.max_distractor_frames == 0 || self.max_distractor_frames > self.frames_per_clip {
            return bad(format!(
                "distractors of up to {} frames do not fit in {}-frame clips",
                self.max_distractor_frames, self.frames_per_clip
            ));
        }
        if !self.class_separation.is_finite() {
            return bad("class separation must be finite".into());
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.n_classes)
            .map(|c| match DEFAULT_CLASS_NAMES.get(c) {
                Some(name) if self.n_classes <= DEFAULT_CLASS_NAMES.len() => (*name).to_string(),
                _ => format!("class{c:02}"),
            })
            .collect()
    }
}

/// `N × D` feature matrix of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    values: Array2<f32>,
}

impl FrameFeatures {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::Shape("feature dimension must be at least 1".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("non-finite feature value".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// A strongly labelled event in frame units; `offset_frame` is exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StrongEvent {
    pub class: usize,
    pub onset_frame: usize,
    pub offset_frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub id: String,
    pub features: FrameFeatures,
    pub weak_labels: Vec<bool>,
    pub strong_ref: Vec<StrongEvent>,
}

impl ClipRecord {
    /// Weak labels implied by the strong reference under the bag rule.
    pub fn bag_labels(&self) -> Vec<bool> {
        let mut labels = vec![false; self.weak_labels.len()];
        for ev in &self.strong_ref {
            if ev.offset_frame > ev.onset_frame {
                labels[ev.class] = true;
            }
        }
        labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub frame_rate_hz: f64,
    pub train: Vec<ClipRecord>,
    pub val: Vec<ClipRecord>,
    pub test: Vec<ClipRecord>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> &[ClipRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn feature_dim(&self) -> Option<usize> {
        Split::ALL.iter().flat_map(|s| self.split(*s)).map(|c| c.features.dim()).next()
    }
}

/// Generates the three splits deterministically from `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unit = Normal::new(0.0f64, 1.0).expect("unit normal");

    let class_means: Vec<Array1<f64>> = (0..config.n_classes)
        .map(|_| {
            let v = Array1::from_shape_fn(config.feature_dim, |_| unit.sample(&mut rng));
            let norm = v.dot(&v).sqrt().max(f64::MIN_POSITIVE);
            v * (config.class_separation / norm)
        })
        .collect();

    let events = (config.events_per_clip > 0.0)
        .then(|| Poisson::new(config.events_per_clip).expect("positive rate"));
    let distractors = (config.distractors_per_clip > 0.0)
        .then(|| Poisson::new(config.distractors_per_clip).expect("positive rate"));
    let mut next_id = 0usize;
    let mut make_split = |count: usize, rng: &mut ChaCha8Rng| -> Vec<ClipRecord> {
        (0..count)
            .map(|_| {
                let id = format!("clip{next_id:05}");
                next_id += 1;
                generate_clip(config, &class_means, events.as_ref(), distractors.as_ref(), id, rng)
            })
            .collect()
    };
    let train = make_split(config.n_train, &mut rng);
    let val = make_split(config.n_val, &mut rng);
    let test = make_split(config.n_test, &mut rng);
    Ok(Dataset {
        class_names: config.class_names(),
        frame_rate_hz: config.frame_rate_hz,
        train,
        val,
        test,
    })
}

fn generate_clip(
    config: &SynthConfig,
    class_means: &[Array1<f64>],
    events: Option<&Poisson<f64>>,
    distractors: Option<&Poisson<f64>>,
    id: String,
    rng: &mut ChaCha8Rng,
) -> ClipRecord {
    let n = config.frames_per_clip;
    let noise = Normal::new(0.0, config.noise_std).expect("validated noise level");
    let mut features = Array2::from_shape_fn((n, config.feature_dim), |_| noise.sample(rng));

    let count = events.map_or(0, |p| p.sample(rng) as usize);
    let mut strong_ref = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(0..config.n_classes);
        let duration = rng.random_range(config.min_event_frames..=config.max_event_frames);
        let onset = rng.random_range(0..=n - duration);
        strong_ref.push(StrongEvent { class, onset_frame: onset, offset_frame: onset + duration });
    }
    strong_ref.sort();
    // overlapping events of one class add their mean once per frame
    for class in 0..config.n_classes {
        let mut active = vec![false; n];
        for ev in strong_ref.iter().filter(|e| e.class == class) {
            active[ev.onset_frame..ev.offset_frame].iter_mut().for_each(|a| *a = true);
        }
        for (frame, _) in active.iter().enumerate().filter(|(_, a)| **a) {
            let gain = if config.amplitude_jitter > 0.0 {
                rng.random_range(1.0 - config.amplitude_jitter..=1.0 + config.amplitude_jitter)
            } else {
                1.0
            };
            features.row_mut(frame).scaled_add(gain, &class_means[class]);
        }
    }

    // unlabelled bursts that partly resemble a class
    let count = distractors.map_or(0, |p| p.sample(rng) as usize);
    for _ in 0..count {
        let class = rng.random_range(0..config.n_classes);
        let duration = rng.random_range(1..=config.max_distractor_frames);
        let onset = rng.random_range(0..=n - duration);
        for frame in onset..onset + duration {
            let mut row = features.row_mut(frame);
            row.scaled_add(config.distractor_strength, &class_means[class]);
        }
    }

    let mut record = ClipRecord {
        id,
        features: FrameFeatures { values: features.mapv(|v| v as f32) },
        weak_labels: vec![false; config.n_classes],
        strong_ref,
    };
    record.weak_labels = record.bag_labels();
    record
}

#[derive(Debug, Serialize, Deserialize)]
struct MetadataRow {
    id: String,
    weak_labels: Vec<String>,
    split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    class_names: Vec<String>,
    frame_rate_hz: f64,
    /// File name → SHA-256 hex digest.
    files: BTreeMap<String, String>,
}

const METADATA_FILE: &str = "metadata.jsonl";
const REFERENCE_FILE: &str = "reference.tsv";
const MANIFEST_FILE: &str = "manifest.json";

pub fn features_file(split: Split) -> String {
    format!("{}.milp", split.name())
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialises the feature matrices of `clips` in the `MILP` binary layout.
pub fn encode_features(clips: &[ClipRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.push(FEATURE_VERSION);
    for clip in clips {
        let values = clip.features.values();
        out.extend_from_slice(&(values.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(values.ncols() as u32).to_le_bytes());
        for v in values.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a `MILP` feature file; any truncation is an error.
pub fn decode_features(bytes: &[u8]) -> Result<Vec<FrameFeatures>> {
    if bytes.len() < 5 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Malformed("missing MILP magic".into()));
    }
    if bytes[4] != FEATURE_VERSION {
        return Err(Error::Malformed(format!("unsupported feature file version {}", bytes[4])));
    }
    let mut cursor = Cursor { bytes, pos: 5 };
    let mut clips = Vec::new();
    while !cursor.at_end() {
        let n = u32::from_le_bytes(cursor.take(4)?.try_into().expect("4 bytes")) as usize;
        let d = u32::from_le_bytes(cursor.take(4)?.try_into().expect("4 bytes")) as usize;
        let len = n
            .checked_mul(d)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Malformed("feature shape overflows".into()))?;
        let values: Vec<f32> = cursor.take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let values =
            Array2::from_shape_vec((n, d), values).map_err(|e| Error::Malformed(e.to_string()))?;
        clips.push(FrameFeatures::new(values).map_err(|e| Error::Malformed(e.to_string()))?);
    }
    Ok(clips)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Malformed("feature file truncated".into()))?;
        let chunk = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(chunk)
    }
}

fn format_seconds(frames: usize, rate: f64) -> String {
    format!("{:.3}", frames as f64 / rate)
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files = BTreeMap::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        files.insert(name.clone(), sha256_hex(&bytes));
        fs::write(dir.join(name), bytes)?;
        Ok(())
    };

    for split in Split::ALL {
        put(features_file(split), encode_features(dataset.split(split)))?;
    }

    let mut metadata = Vec::new();
    let mut reference = Vec::new();
    for split in Split::ALL {
        for clip in dataset.split(split) {
            let row = MetadataRow {
                id: clip.id.clone(),
                weak_labels: clip
                    .weak_labels
                    .iter()
                    .zip(&dataset.class_names)
                    .filter(|(on, _)| **on)
                    .map(|(_, name)| name.clone())
                    .collect(),
                split,
            };
            serde_json::to_writer(&mut metadata, &row)?;
            metadata.push(b'\n');
            for ev in &clip.strong_ref {
                writeln!(
                    reference,
                    "{}\t{}\t{}\t{}",
                    clip.id,
                    format_seconds(ev.onset_frame, dataset.frame_rate_hz),
                    format_seconds(ev.offset_frame, dataset.frame_rate_hz),
                    dataset.class_names[ev.class]
                )?;
            }
        }
    }
    put(METADATA_FILE.into(), metadata)?;
    put(REFERENCE_FILE.into(), reference)?;

    let manifest = Manifest {
        format: "milpool-dataset".into(),
        version: 1,
        class_names: dataset.class_names.clone(),
        frame_rate_hz: dataset.frame_rate_hz,
        files,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), bytes)?;
    Ok(())
}

/// One row of a sed_eval-style event file, times in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRow {
    pub clip_id: String,
    pub onset: f64,
    pub offset: f64,
    pub class: String,
}

pub fn parse_event_rows(text: &str) -> Result<Vec<EventRow>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Malformed(format!("event line {}: `{line}`", n + 1));
            if fields.len() != 4 {
                return Err(bad());
            }
            Ok(EventRow {
                clip_id: fields[0].to_string(),
                onset: fields[1].trim().parse().map_err(|_| bad())?,
                offset: fields[2].trim().parse().map_err(|_| bad())?,
                class: fields[3].trim().to_string(),
            })
        })
        .collect()
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)
        .map_err(|e| Error::Malformed(format!("{MANIFEST_FILE}: {e}")))?;
    let read_checked = |name: &str| -> Result<Vec<u8>> {
        let bytes = fs::read(dir.join(name))?;
        match manifest.files.get(name) {
            Some(digest) if *digest == sha256_hex(&bytes) => Ok(bytes),
            Some(_) => Err(Error::Checksum(name.to_string())),
            None => Err(Error::Malformed(format!("{name} missing from manifest"))),
        }
    };
    let class_index: HashMap<&str, usize> =
        manifest.class_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let n_classes = manifest.class_names.len();

    let mut features: HashMap<Split, std::vec::IntoIter<FrameFeatures>> = HashMap::new();
    for split in Split::ALL {
        features.insert(split, decode_features(&read_checked(&features_file(split))?)?.into_iter());
    }

    let mut strong: HashMap<String, Vec<StrongEvent>> = HashMap::new();
    let reference = String::from_utf8(read_checked(REFERENCE_FILE)?)
        .map_err(|_| Error::Malformed(format!("{REFERENCE_FILE} is not UTF-8")))?;
    for row in parse_event_rows(&reference)? {
        let class = *class_index
            .get(row.class.as_str())
            .ok_or_else(|| Error::Malformed(format!("unknown class `{}`", row.class)))?;
        strong.entry(row.clip_id).or_default().push(StrongEvent {
            class,
            onset_frame: (row.onset * manifest.frame_rate_hz).round() as usize,
            offset_frame: (row.offset * manifest.frame_rate_hz).round() as usize,
        });
    }

    let mut dataset = Dataset {
        class_names: manifest.class_names.clone(),
        frame_rate_hz: manifest.frame_rate_hz,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let metadata = String::from_utf8(read_checked(METADATA_FILE)?)
        .map_err(|_| Error::Malformed(format!("{METADATA_FILE} is not UTF-8")))?;
    for line in metadata.lines().filter(|l| !l.trim().is_empty()) {
        let row: MetadataRow = serde_json::from_str(line)
            .map_err(|e| Error::Malformed(format!("{METADATA_FILE}: {e}")))?;
        let mut weak_labels = vec![false; n_classes];
        for name in &row.weak_labels {
            let c = class_index
                .get(name.as_str())
                .ok_or_else(|| Error::Malformed(format!("unknown class `{name}`")))?;
            weak_labels[*c] = true;
        }
        let clip_features = features
            .get_mut(&row.split)
            .and_then(Iterator::next)
            .ok_or_else(|| Error::Malformed(format!("no features for clip {}", row.id)))?;
        let mut strong_ref = strong.remove(&row.id).unwrap_or_default();
        strong_ref.sort();
        let record = ClipRecord { id: row.id, features: clip_features, weak_labels, strong_ref };
        if record.bag_labels() != record.weak_labels {
            return Err(Error::Malformed(format!("weak labels of {} contradict its events", record.id)));
        }
        match row.split {
            Split::Train => dataset.train.push(record),
            Split::Val => dataset.val.push(record),
            Split::Test => dataset.test.push(record),
        }
    }
    if features.values_mut().any(|it| it.next().is_some()) {
        return Err(Error::Malformed("feature files hold more clips than the metadata".into()));
    }
    if let Some(id) = strong.keys().next() {
        return Err(Error::Malformed(format!("reference events for unknown clip {id}")));
    }
    Ok(dataset)
}
