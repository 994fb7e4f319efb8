//! Event extraction and segment-based scoring.
//!
//! Frame probabilities are thresholded, median filtered and turned into
//! events; system and reference events are then compared in fixed-length
//! segments with micro-averaged error rate and F₁. [`Report`] lays results
//! out as single-vs-hierarchical rows with relative change annotations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::ops::AddAssign;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict_frames, ScorerParams};
use crate::pooling::FrameScores;
use crate::synth::{parse_event_rows, ClipRecord, EventRow};

/// An event with times in seconds.
pub type Event = EventRow;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostProcessConfig {
    pub threshold: f64,
    /// Odd window length of the median filter, in frames.
    pub median_filter_frames: usize,
    /// Detections shorter than this many frames are dropped.
    pub min_event_frames: usize,
}

impl Default for PostProcessConfig {
    fn default() -> Self {
        Self { threshold: 0.5, median_filter_frames: 5, min_event_frames: 3 }
    }
}

impl PostProcessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if self.median_filter_frames % 2 == 0 {
            return Err(Error::Config(format!(
                "median filter length {} must be odd",
                self.median_filter_frames
            )));
        }
        if self.min_event_frames == 0 {
            return Err(Error::Config("minimum event length must be positive".into()));
        }
        Ok(())
    }
}

pub fn binarize(scores: ArrayView1<'_, f64>, threshold: f64) -> Vec<bool> {
    scores.iter().map(|&s| s >= threshold).collect()
}

/// Median of each window of `window` frames centred on a frame; windows are
/// truncated at the edges and the lower median is taken, so a frame is set
/// iff a strict majority of its window is.
pub fn median_filter(bits: &[bool], window: usize) -> Vec<bool> {
    let half = window / 2;
    let mut prefix = Vec::with_capacity(bits.len() + 1);
    prefix.push(0usize);
    for &b in bits {
        prefix.push(prefix.last().unwrap() + usize::from(b));
    }
    (0..bits.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(bits.len());
            2 * (prefix[hi] - prefix[lo]) > hi - lo
        })
        .collect()
}

/// Half-open `[start, end)` runs of set frames.
pub fn runs(bits: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &b) in bits.iter().chain(std::iter::once(&false)).enumerate() {
        match (b, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    out
}

/// Detected events for one clip, ordered by class then onset.
pub fn post_process(
    clip_id: &str,
    scores: &FrameScores<f64>,
    class_names: &[String],
    cfg: &PostProcessConfig,
) -> Result<Vec<Event>> {
    cfg.validate()?;
    if class_names.len() != scores.n_classes() {
        return Err(Error::Shape(format!(
            "{} class names for {} score columns",
            class_names.len(),
            scores.n_classes()
        )));
    }
    let rate = scores.frame_rate_hz();
    let mut events = Vec::new();
    for (column, name) in scores.values().columns().into_iter().zip(class_names) {
        let bits = median_filter(&binarize(column, cfg.threshold), cfg.median_filter_frames);
        for (start, end) in runs(&bits) {
            if end - start >= cfg.min_event_frames {
                events.push(Event {
                    clip_id: clip_id.to_string(),
                    onset: start as f64 / rate,
                    offset: end as f64 / rate,
                    class: name.clone(),
                });
            }
        }
    }
    Ok(events)
}

/// Runs the scorer over `clips` and post-processes every clip.
pub fn detect(
    clips: &[ClipRecord],
    params: &ScorerParams,
    class_names: &[String],
    frame_rate_hz: f64,
    cfg: &PostProcessConfig,
) -> Result<Vec<Event>> {
    let mut out = Vec::new();
    for clip in clips {
        let scores = predict_frames(&clip.features, params, frame_rate_hz)?;
        out.extend(post_process(&clip.id, &scores, class_names, cfg)?);
    }
    Ok(out)
}

/// Detection plus scoring against the clips' strong reference.
pub fn evaluate_split(
    clips: &[ClipRecord],
    params: &ScorerParams,
    class_names: &[String],
    frame_rate_hz: f64,
    cfg: &PostProcessConfig,
) -> Result<(Vec<Event>, Metrics)> {
    if clips.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let system = detect(clips, params, class_names, frame_rate_hz, cfg)?;
    let reference = reference_events(clips, class_names, frame_rate_hz);
    let metrics = score(&system, &reference, &clip_durations(clips, frame_rate_hz), 1.0)?;
    Ok((system, metrics))
}

/// Tab-separated `clip_id  onset  offset  class` lines, times to 3 decimals.
pub fn format_events(events: &[Event]) -> String {
    let mut out = String::new();
    for e in events {
        writeln!(out, "{}\t{:.3}\t{:.3}\t{}", e.clip_id, e.onset, e.offset, e.class).unwrap();
    }
    out
}

pub fn parse_events(text: &str) -> Result<Vec<Event>> {
    parse_event_rows(text)
}

/// Strong reference of `clips` as events in seconds.
pub fn reference_events(clips: &[ClipRecord], class_names: &[String], frame_rate_hz: f64) -> Vec<Event> {
    let mut out = Vec::new();
    for clip in clips {
        for e in &clip.strong_ref {
            out.push(Event {
                clip_id: clip.id.clone(),
                onset: e.onset_frame as f64 / frame_rate_hz,
                offset: e.offset_frame as f64 / frame_rate_hz,
                class: class_names[e.class].clone(),
            });
        }
    }
    out
}

pub fn clip_durations(clips: &[ClipRecord], frame_rate_hz: f64) -> BTreeMap<String, f64> {
    clips
        .iter()
        .map(|c| (c.id.clone(), c.features.n_frames() as f64 / frame_rate_hz))
        .collect()
}

/// Aggregated segment-level counts; merge with `+=`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentCounts {
    pub n_ref: u64,
    pub n_sys: u64,
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub substitutions: u64,
    pub deletions: u64,
    pub insertions: u64,
}

impl AddAssign for SegmentCounts {
    fn add_assign(&mut self, o: Self) {
        self.n_ref += o.n_ref;
        self.n_sys += o.n_sys;
        self.true_positives += o.true_positives;
        self.false_positives += o.false_positives;
        self.false_negatives += o.false_negatives;
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
    }
}

impl SegmentCounts {
    /// Adds one segment given its reference and system activity over classes.
    pub fn add_segment(&mut self, reference: &BTreeSet<&str>, system: &BTreeSet<&str>) {
        let tp = reference.intersection(system).count() as u64;
        let fn_ = reference.len() as u64 - tp;
        let fp = system.len() as u64 - tp;
        self.n_ref += reference.len() as u64;
        self.n_sys += system.len() as u64;
        self.true_positives += tp;
        self.false_negatives += fn_;
        self.false_positives += fp;
        self.substitutions += fn_.min(fp);
        self.deletions += fn_.saturating_sub(fp);
        self.insertions += fp.saturating_sub(fn_);
    }
}

/// Segments touched by `[onset, offset)`, i.e. overlapped by a positive amount.
fn active_segments(onset: f64, offset: f64, segment_seconds: f64, n_segments: usize) -> std::ops::Range<usize> {
    let first = (onset / segment_seconds).floor().max(0.0) as usize;
    let last = ((offset / segment_seconds).ceil().max(0.0) as usize).min(n_segments);
    first.min(last)..last
}

type Activity<'a> = BTreeMap<&'a str, Vec<BTreeSet<&'a str>>>;

fn mark_events<'a>(
    events: &'a [Event],
    activity: &mut Activity<'a>,
    segment_seconds: f64,
) -> Result<()> {
    for e in events {
        if !(e.onset < e.offset) || e.onset < 0.0 {
            return Err(Error::InvalidValue(format!(
                "event {} {} has onset {} and offset {}",
                e.clip_id, e.class, e.onset, e.offset
            )));
        }
        let segments = activity
            .get_mut(e.clip_id.as_str())
            .ok_or_else(|| Error::InvalidValue(format!("event for unknown clip {}", e.clip_id)))?;
        let n = segments.len();
        for k in active_segments(e.onset, e.offset, segment_seconds, n) {
            segments[k].insert(e.class.as_str());
        }
    }
    Ok(())
}

/// Segment counts over every clip in `durations`.
pub fn count_segments<'a>(
    system: &'a [Event],
    reference: &'a [Event],
    durations: &'a BTreeMap<String, f64>,
    segment_seconds: f64,
) -> Result<SegmentCounts> {
    if !(segment_seconds > 0.0 && segment_seconds.is_finite()) {
        return Err(Error::Config(format!("segment length {segment_seconds} must be positive")));
    }
    // a trailing sliver below 1e-9 s does not open another segment
    let blank = || -> Activity<'a> {
        durations
            .iter()
            .map(|(id, &d)| {
                let n = (d / segment_seconds - 1e-9).ceil().max(0.0) as usize;
                (id.as_str(), vec![BTreeSet::new(); n])
            })
            .collect()
    };
    let mut sys = blank();
    let mut refs = blank();
    mark_events(system, &mut sys, segment_seconds)?;
    mark_events(reference, &mut refs, segment_seconds)?;
    let mut counts = SegmentCounts::default();
    for (id, ref_segments) in &refs {
        for (r, s) in ref_segments.iter().zip(&sys[id]) {
            counts.add_segment(r, s);
        }
    }
    Ok(counts)
}

/// Micro-averaged segment metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub counts: SegmentCounts,
    pub substitution_rate: f64,
    pub deletion_rate: f64,
    pub insertion_rate: f64,
    pub error_rate: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn from_counts(counts: SegmentCounts) -> Result<Self> {
        if counts.n_ref == 0 {
            return Err(Error::InvalidValue("error rate undefined: reference has no active segments".into()));
        }
        let n_ref = counts.n_ref as f64;
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(counts.true_positives, counts.true_positives + counts.false_positives);
        let recall = ratio(counts.true_positives, counts.true_positives + counts.false_negatives);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Ok(Self {
            counts,
            substitution_rate: counts.substitutions as f64 / n_ref,
            deletion_rate: counts.deletions as f64 / n_ref,
            insertion_rate: counts.insertions as f64 / n_ref,
            error_rate: (counts.substitutions + counts.deletions + counts.insertions) as f64 / n_ref,
            precision,
            recall,
            f1,
        })
    }
}

/// Segment-based ER and F₁ of `system` against `reference`.
pub fn score(
    system: &[Event],
    reference: &[Event],
    durations: &BTreeMap<String, f64>,
    segment_seconds: f64,
) -> Result<Metrics> {
    Metrics::from_counts(count_segments(system, reference, durations, segment_seconds)?)
}

/// One `(structure, pooling)` cell, with one metrics entry per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub structure: String,
    pub pooling: String,
    pub seeds: Vec<(u64, Metrics)>,
}

/// Row values as printed: rates in hundredths, percentages in hundredths of
/// a percent. Sub, Del and Ins are rounded by largest remainder so they
/// always sum to the printed ER.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DisplayedRow {
    pub sub: u64,
    pub del: u64,
    pub ins: u64,
    pub er: u64,
    pub precision: u64,
    pub recall: u64,
    pub f1: u64,
}

fn round_to(v: f64, scale: f64) -> u64 {
    (v * scale).round().max(0.0) as u64
}

/// Rounds parts to integers in units of `1/scale`, preserving the rounded total.
pub fn largest_remainder(parts: &[f64], scale: f64) -> (Vec<u64>, u64) {
    let total = round_to(parts.iter().sum(), scale);
    let scaled: Vec<f64> = parts.iter().map(|p| (p * scale).max(0.0)).collect();
    let mut out: Vec<u64> = scaled.iter().map(|v| v.floor() as u64).collect();
    let mut order: Vec<usize> = (0..parts.len()).collect();
    // stable: ties go to the earlier column
    order.sort_by(|&a, &b| {
        let ra = scaled[a] - scaled[a].floor();
        let rb = scaled[b] - scaled[b].floor();
        rb.total_cmp(&ra)
    });
    let mut missing = total.saturating_sub(out.iter().sum());
    for &i in order.iter().cycle().take(parts.len() * 4) {
        if missing == 0 {
            break;
        }
        out[i] += 1;
        missing -= 1;
    }
    (out, total)
}

impl ReportRow {
    fn mean(&self, f: impl Fn(&Metrics) -> f64) -> f64 {
        self.seeds.iter().map(|(_, m)| f(m)).sum::<f64>() / self.seeds.len().max(1) as f64
    }

    pub fn displayed(&self) -> DisplayedRow {
        let (parts, er) = largest_remainder(
            &[
                self.mean(|m| m.substitution_rate),
                self.mean(|m| m.deletion_rate),
                self.mean(|m| m.insertion_rate),
            ],
            100.0,
        );
        DisplayedRow {
            sub: parts[0],
            del: parts[1],
            ins: parts[2],
            er,
            precision: round_to(self.mean(|m| m.precision), 10_000.0),
            recall: round_to(self.mean(|m| m.recall), 10_000.0),
            f1: round_to(self.mean(|m| m.f1), 10_000.0),
        }
    }
}

/// Relative change from `base` to `new` in tenths of a percent, rounded half up.
pub fn relative_change_tenths(base: u64, new: u64) -> Option<u64> {
    (base > 0).then(|| (2 * base.abs_diff(new) * 1000 + base) / (2 * base))
}

/// `(3.8%↓)`-style annotation, or empty when there is no baseline.
pub fn change_annotation(base: Option<u64>, new: u64) -> String {
    match base.and_then(|b| relative_change_tenths(b, new).map(|t| (b, t))) {
        None => String::new(),
        Some((b, t)) => {
            let arrow = match new.cmp(&b) {
                std::cmp::Ordering::Less => "↓",
                std::cmp::Ordering::Greater => "↑",
                std::cmp::Ordering::Equal => "",
            };
            format!("({}.{}%{arrow})", t / 10, t % 10)
        }
    }
}

fn hundredths(v: u64) -> String {
    format!("{}.{:02}", v / 100, v % 100)
}

/// Table of rows; a row whose structure is not `flat` is compared with the
/// `flat` row of the same pooling function.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_COLUMNS: [&str; 12] = [
    "structure", "pooling", "Sub", "Del", "Ins", "ER", "Pre%", "Rec%", "F1%", "ER_change", "F1_change",
    "seed_ER",
];

impl Report {
    fn baseline(&self, row: &ReportRow) -> Option<DisplayedRow> {
        if row.structure == "flat" {
            return None;
        }
        self.rows
            .iter()
            .find(|r| r.structure == "flat" && r.pooling == row.pooling)
            .map(ReportRow::displayed)
    }

    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|row| {
                let d = row.displayed();
                let base = self.baseline(row);
                let seed_er = row
                    .seeds
                    .iter()
                    .map(|(s, m)| format!("{s}:{}", hundredths(round_to(m.error_rate, 100.0))))
                    .collect::<Vec<_>>()
                    .join(",");
                vec![
                    row.structure.clone(),
                    row.pooling.clone(),
                    hundredths(d.sub),
                    hundredths(d.del),
                    hundredths(d.ins),
                    hundredths(d.er),
                    hundredths(d.precision),
                    hundredths(d.recall),
                    hundredths(d.f1),
                    change_annotation(base.map(|b| b.er), d.er),
                    change_annotation(base.map(|b| b.f1), d.f1),
                    seed_er,
                ]
            })
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = REPORT_COLUMNS.join("\t");
        out.push('\n');
        for row in self.cells() {
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let cells = self.cells();
        let widths: Vec<usize> = REPORT_COLUMNS
            .iter()
            .enumerate()
            .map(|(i, h)| {
                cells.iter().map(|r| r[i].chars().count()).chain([h.len()]).max().unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, row: &[String]| {
            let padded: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| {
                    let pad = " ".repeat(w - c.chars().count());
                    if i < 2 { format!("{c}{pad}") } else { format!("{pad}{c}") }
                })
                .collect();
            out.push_str(padded.join("  ").trim_end());
            out.push('\n');
        };
        line(&mut out, &REPORT_COLUMNS.map(String::from));
        for row in &cells {
            line(&mut out, row);
        }
        out
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Parses the TSV written by [`Report::to_tsv`] back into displayed rows.
pub fn parse_report_tsv(text: &str) -> Result<Vec<BTreeMap<String, String>>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Malformed("empty report".into()))?
        .split('\t')
        .collect();
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let fields: Vec<&str> = l.split('\t').collect();
            if fields.len() != header.len() {
                return Err(Error::Malformed(format!("report line `{l}`")));
            }
            Ok(header.iter().map(|h| h.to_string()).zip(fields.iter().map(|f| f.to_string())).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ev(clip: &str, onset: f64, offset: f64, class: &str) -> Event {
        Event { clip_id: clip.into(), onset, offset, class: class.into() }
    }

    fn one_clip(seconds: f64) -> BTreeMap<String, f64> {
        BTreeMap::from([("a".to_string(), seconds)])
    }

    #[test]
    fn hand_worked_segments() {
        let reference = [ev("a", 2.0, 4.0, "car")];
        let system = [ev("a", 3.0, 5.0, "car")];
        let m = score(&system, &reference, &one_clip(6.0), 1.0).unwrap();
        let c = m.counts;
        assert_eq!((c.true_positives, c.false_negatives, c.false_positives), (1, 1, 1));
        assert_eq!((c.substitutions, c.deletions, c.insertions), (0, 1, 1));
        assert_eq!(m.error_rate, 1.0);
        assert_eq!(m.f1, 0.5);
    }

    #[test]
    fn perfect_system() {
        let reference = [ev("a", 0.5, 2.2, "car"), ev("a", 1.0, 3.0, "horn")];
        let m = score(&reference, &reference, &one_clip(4.0), 1.0).unwrap();
        assert_eq!(m.error_rate, 0.0);
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn substitutions_pair_misses_with_false_alarms() {
        let reference = [ev("a", 0.0, 1.0, "car")];
        let system = [ev("a", 0.0, 1.0, "horn"), ev("a", 0.2, 0.4, "siren")];
        let c = count_segments(&system, &reference, &one_clip(1.0), 1.0).unwrap();
        assert_eq!((c.substitutions, c.deletions, c.insertions), (1, 0, 1));
    }

    #[test]
    fn touching_boundary_is_not_overlap() {
        let reference = [ev("a", 1.0, 2.0, "car")];
        let system = [ev("a", 0.0, 1.0, "car")];
        let c = count_segments(&system, &reference, &one_clip(3.0), 1.0).unwrap();
        assert_eq!((c.n_ref, c.n_sys, c.true_positives), (1, 1, 0));
    }

    #[test]
    fn scoring_errors() {
        let reference = [ev("a", 0.0, 1.0, "car")];
        assert!(score(&[ev("b", 0.0, 1.0, "car")], &reference, &one_clip(2.0), 1.0).is_err());
        assert!(score(&reference, &[], &one_clip(2.0), 1.0).is_err());
        assert!(score(&[ev("a", 1.0, 1.0, "car")], &reference, &one_clip(2.0), 1.0).is_err());
        assert!(score(&[], &reference, &one_clip(2.0), 0.0).is_err());
    }

    #[test]
    fn median_filter_removes_isolated_frame() {
        let bits = [false, false, true, false, false];
        assert_eq!(median_filter(&bits, 5), vec![false; 5]);
        let scores = FrameScores::from_frames(&[0.1, 0.2, 0.9, 0.1, 0.0], 12.5).unwrap();
        let events = post_process("a", &scores, &["car".into()], &PostProcessConfig::default()).unwrap();
        assert!(events.is_empty());
    }

    #[test]
    fn post_process_clean_run() {
        let mut frames = vec![0.1; 20];
        frames[5..12].iter_mut().for_each(|v| *v = 0.8);
        let scores = FrameScores::from_frames(&frames, 12.5).unwrap();
        let events = post_process("a", &scores, &["car".into()], &PostProcessConfig::default()).unwrap();
        assert_eq!(events, vec![ev("a", 5.0 / 12.5, 12.0 / 12.5, "car")]);

        let low = FrameScores::from_frames(&[0.4; 20], 12.5).unwrap();
        assert!(post_process("a", &low, &["car".into()], &PostProcessConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn min_duration_suppression() {
        let mut frames = vec![0.0; 20];
        frames[4..6].iter_mut().for_each(|v| *v = 1.0);
        let scores = FrameScores::from_frames(&frames, 10.0).unwrap();
        let cfg = PostProcessConfig { median_filter_frames: 1, ..PostProcessConfig::default() };
        assert!(post_process("a", &scores, &["car".into()], &cfg).unwrap().is_empty());
        let cfg = PostProcessConfig { min_event_frames: 2, ..cfg };
        assert_eq!(post_process("a", &scores, &["car".into()], &cfg).unwrap().len(), 1);
    }

    #[test]
    fn config_validation() {
        assert!(PostProcessConfig { median_filter_frames: 4, ..Default::default() }.validate().is_err());
        assert!(PostProcessConfig { threshold: 1.0, ..Default::default() }.validate().is_err());
        assert!(PostProcessConfig { min_event_frames: 0, ..Default::default() }.validate().is_err());
    }

    fn sorted_median(bits: &[bool], window: usize) -> Vec<bool> {
        let half = window / 2;
        (0..bits.len())
            .map(|i| {
                let mut w: Vec<bool> = bits[i.saturating_sub(half)..(i + half + 1).min(bits.len())].to_vec();
                w.sort();
                w[(w.len() - 1) / 2]
            })
            .collect()
    }

    proptest! {
        #[test]
        fn median_filter_matches_sorting(bits in prop::collection::vec(any::<bool>(), 0..40), k in 0usize..5) {
            let window = 2 * k + 1;
            prop_assert_eq!(median_filter(&bits, window), sorted_median(&bits, window));
        }

        #[test]
        fn raising_threshold_never_adds_frames(
            scores in prop::collection::vec(0.0f64..=1.0, 1..50),
            a in 0.01f64..0.99,
            b in 0.01f64..0.99,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let view = ArrayView1::from(&scores[..]);
            let count = |t| binarize(view, t).iter().filter(|&&x| x).count();
            prop_assert!(count(hi) <= count(lo));
        }
    }

    /// Segment activity by direct overlap tests, independent of `score`.
    fn brute_force(
        system: &[Event],
        reference: &[Event],
        durations: &BTreeMap<String, f64>,
        classes: &[&str],
    ) -> SegmentCounts {
        let active = |events: &[Event], clip: &str, class: &str, k: usize| {
            events.iter().any(|e| {
                e.clip_id == clip
                    && e.class == class
                    && e.offset.min(k as f64 + 1.0) - e.onset.max(k as f64) > 0.0
            })
        };
        let mut c = SegmentCounts::default();
        for (clip, &d) in durations {
            for k in 0..d.ceil() as usize {
                let (mut fn_, mut fp) = (0u64, 0u64);
                for class in classes {
                    let r = active(reference, clip, class, k);
                    let s = active(system, clip, class, k);
                    c.n_ref += r as u64;
                    c.n_sys += s as u64;
                    c.true_positives += (r && s) as u64;
                    fn_ += (r && !s) as u64;
                    fp += (s && !r) as u64;
                }
                c.false_negatives += fn_;
                c.false_positives += fp;
                c.substitutions += fn_.min(fp);
                c.deletions += fn_.saturating_sub(fp);
                c.insertions += fp.saturating_sub(fn_);
            }
        }
        c
    }

    #[test]
    fn scorer_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let names = ["car", "horn", "siren"];
        for _ in 0..300 {
            let n_clips = rng.random_range(1..=3);
            let classes = &names[..rng.random_range(1..=3)];
            let durations: BTreeMap<String, f64> =
                (0..n_clips).map(|i| (format!("c{i}"), rng.random_range(1..=12) as f64)).collect();
            let make = |rng: &mut ChaCha8Rng| {
                let mut out = Vec::new();
                for (id, &d) in &durations {
                    for _ in 0..rng.random_range(0..5) {
                        // quarter-second grid so boundary contacts occur often
                        let on = rng.random_range(0..(d * 4.0) as usize) as f64 / 4.0;
                        let off = (on + rng.random_range(1..12) as f64 / 4.0).min(d);
                        out.push(ev(id, on, off, classes[rng.random_range(0..classes.len())]));
                    }
                }
                out
            };
            let system = make(&mut rng);
            let reference = make(&mut rng);
            let got = count_segments(&system, &reference, &durations, 1.0).unwrap();
            assert_eq!(got, brute_force(&system, &reference, &durations, classes));
            assert_eq!(got.true_positives + got.false_negatives, got.n_ref);
            assert_eq!(got.true_positives + got.false_positives, got.n_sys);
            assert_eq!(
                got.substitutions + got.deletions + got.insertions,
                got.false_negatives + got.false_positives - got.substitutions
            );
        }
    }

    fn row(structure: &str, pooling: &str, sub: f64, del: f64, ins: f64, f1: f64) -> ReportRow {
        let m = Metrics {
            counts: SegmentCounts::default(),
            substitution_rate: sub,
            deletion_rate: del,
            insertion_rate: ins,
            error_rate: sub + del + ins,
            precision: f1,
            recall: f1,
            f1,
        };
        ReportRow { structure: structure.into(), pooling: pooling.into(), seeds: vec![(0, m)] }
    }

    #[test]
    fn displayed_parts_sum_to_error_rate() {
        let r = row("5x5x5", "linear", 0.19, 0.40, 0.17, 0.4646);
        let d = r.displayed();
        assert_eq!((d.sub, d.del, d.ins, d.er), (19, 40, 17, 76));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let parts: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..0.6)).collect();
            let d = row("flat", "exp", parts[0], parts[1], parts[2], 0.5).displayed();
            assert_eq!(d.sub + d.del + d.ins, d.er);
            assert_eq!(d.er, ((parts[0] + parts[1] + parts[2]) * 100.0).round() as u64);
        }
    }

    #[test]
    fn relative_changes_from_displayed_values() {
        // (single ER, hierarchical ER, printed change)
        let er = [(79, 76, "(3.8%↓)"), (82, 79, "(3.7%↓)"), (83, 79, "(4.8%↓)"), (76, 69, "(9.2%↓)"), (81, 73, "(9.9%↓)"), (79, 73, "(7.6%↓)")];
        for (b, n, want) in er {
            assert_eq!(change_annotation(Some(b), n), want);
        }
        let f1 = [(4263, 4646, "(9.0%↑)"), (4062, 4581, "(12.8%↑)"), (4046, 4516, "(11.6%↑)"), (4595, 5237, "(14.0%↑)"), (4526, 5141, "(13.6%↑)")];
        for (b, n, want) in f1 {
            assert_eq!(change_annotation(Some(b), n), want);
        }
        assert_eq!(change_annotation(None, 10), "");
        assert_eq!(change_annotation(Some(0), 10), "");
        assert_eq!(change_annotation(Some(50), 50), "(0.0%)");
    }

    #[test]
    fn report_layout() {
        let empty = Report::default();
        assert_eq!(empty.to_tsv(), REPORT_COLUMNS.join("\t") + "\n");
        assert_eq!(empty.to_text().lines().count(), 1);

        let report = Report {
            rows: vec![
                row("flat", "linear", 0.25, 0.18, 0.36, 0.4263),
                row("5x5x5", "linear", 0.19, 0.40, 0.17, 0.4646),
            ],
        };
        let parsed = parse_report_tsv(&report.to_tsv()).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0]["ER"], "0.79");
        assert_eq!(parsed[0]["ER_change"], "");
        assert_eq!(parsed[1]["ER"], "0.76");
        assert_eq!(parsed[1]["F1%"], "46.46");
        assert_eq!(parsed[1]["ER_change"], "(3.8%↓)");
        assert_eq!(parsed[1]["F1_change"], "(9.0%↑)");
        assert_eq!(parsed[1]["seed_ER"], "0:0.76");
        let text = report.to_text();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().contains("0.76"));
    }

    #[test]
    fn reference_round_trip_through_text() {
        let events = vec![ev("clip00001", 0.48, 2.4, "car"), ev("clip00002", 1.0, 10.0, "horn")];
        assert_eq!(parse_events(&format_events(&events)).unwrap(), events);
    }

    #[test]
    fn segment_counts_merge() {
        let reference = [ev("a", 0.0, 2.0, "car"), ev("b", 1.0, 3.0, "horn")];
        let system = [ev("a", 1.0, 2.0, "car"), ev("b", 0.0, 1.0, "horn")];
        let both = BTreeMap::from([("a".to_string(), 3.0), ("b".to_string(), 3.0)]);
        let whole = count_segments(&system, &reference, &both, 1.0).unwrap();
        let mut merged = count_segments(&system[..1], &reference[..1], &one_clip(3.0), 1.0).unwrap();
        let only_b = BTreeMap::from([("b".to_string(), 3.0)]);
        merged += count_segments(&system[1..], &reference[1..], &only_b, 1.0).unwrap();
        assert_eq!(whole, merged);
    }
}
