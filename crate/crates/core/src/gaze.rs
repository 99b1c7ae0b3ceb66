//! Gaze logs: parsing, boundary entry, analysis windows, fixations and heatmaps.
//!
//! Log schema (UTF-8 CSV, one row per sample, columns in any order):
//!
//! ```text
//! participant,trial,image,side,rect_x,rect_y,presentation_ms,t_ms,x,y,kind
//! ```
//!
//! `side` is `left` or `right`, `rect_x`/`rect_y` are the top-left screen
//! pixel of the 448×448 presentation rectangle, `t_ms` counts from image
//! onset, and `kind` is `sample`, `fixation_start` or `fixation_end`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::map::{ImageMap, MAP_SIZE};

pub const SCREEN_WIDTH: f64 = 1920.0;
pub const SCREEN_HEIGHT: f64 = 1080.0;
/// On-screen side length of the presented (2× enlarged) image.
pub const RECT_SIZE: f64 = 448.0;
pub const FEEDFORWARD_MS: f64 = 150.0;
pub const PRESENTATION_DURATIONS: [u32; 2] = [150, 3000];
pub const BLUR_SIGMA: f64 = 15.0;
pub const BLUR_RADIUS: usize = 45;

pub const COLUMNS: [&str; 11] =
    ["participant", "trial", "image", "side", "rect_x", "rect_y", "presentation_ms", "t_ms", "x", "y", "kind"];

#[derive(Debug, Error)]
pub enum GazeError {
    #[error("cannot read gaze log {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("gaze log format error: {0}")]
    Format(String),
    #[error("no gaze samples contributed to image `{0}`")]
    NoSamples(String),
    #[error("input error: {0}")]
    Input(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SampleKind {
    Sample,
    FixationStart,
    FixationEnd,
}

impl SampleKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sample" => Some(SampleKind::Sample),
            "fixation_start" => Some(SampleKind::FixationStart),
            "fixation_end" => Some(SampleKind::FixationEnd),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SampleKind::Sample => "sample",
            SampleKind::FixationStart => "fixation_start",
            SampleKind::FixationEnd => "fixation_end",
        }
    }

    pub fn is_fixation(self) -> bool {
        self != SampleKind::Sample
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazeSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub kind: SampleKind,
}

impl GazeSample {
    fn sort_cmp(&self, o: &Self) -> Ordering {
        self.t
            .total_cmp(&o.t)
            .then(self.kind.cmp(&o.kind))
            .then(self.x.total_cmp(&o.x))
            .then(self.y.total_cmp(&o.y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "left" => Some(Side::Left),
            "right" => Some(Side::Right),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

/// Screen-pixel presentation rectangle, always 448×448.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x && x < self.x + RECT_SIZE && y >= self.y && y < self.y + RECT_SIZE
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + RECT_SIZE / 2.0, self.y + RECT_SIZE / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub participant: String,
    pub trial: String,
    pub image: String,
    pub side: Side,
    pub rect: Rect,
    pub presentation_ms: u32,
    /// Sorted by `(t, kind, x, y)`.
    pub samples: Vec<GazeSample>,
    /// Why the trial is unusable, if it is.
    pub invalid: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectedRow {
    /// 1-based line number in the file.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GazeLog {
    /// Ordered by `(participant, trial)`.
    pub trials: Vec<TrialRecord>,
    pub rejects: Vec<RejectedRow>,
}

impl GazeLog {
    pub fn rejects_csv(&self) -> String {
        let mut out = String::from("line,reason\n");
        for r in &self.rejects {
            out.push_str(&format!("{},\"{}\"\n", r.line, r.reason.replace('"', "'")));
        }
        out
    }
}

pub fn parse_gaze_log(path: &Path) -> Result<GazeLog, GazeError> {
    let text = fs::read_to_string(path).map_err(|e| GazeError::Io { path: path.display().to_string(), detail: e.to_string() })?;
    parse_gaze_text(&text)
}

struct TrialHead {
    image: String,
    side: Side,
    rect: Rect,
    presentation_ms: u32,
}

pub fn parse_gaze_text(text: &str) -> Result<GazeLog, GazeError> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().ok_or_else(|| GazeError::Format("empty file".into()))?.1;
    let names: Vec<&str> = header.trim_start_matches('\u{feff}').split(',').map(str::trim).collect();
    let mut col = [0usize; 11];
    for (slot, want) in col.iter_mut().zip(COLUMNS) {
        *slot = names.iter().position(|n| *n == want).ok_or_else(|| GazeError::Format(format!("missing required column `{want}`")))?;
    }
    let width = names.len();
    let mut rejects = Vec::new();
    let mut trials: BTreeMap<(String, String), (TrialHead, Vec<GazeSample>)> = BTreeMap::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut reject = |reason: String| rejects.push(RejectedRow { line: line_no, reason });
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != width {
            reject(format!("expected {width} fields, found {}", f.len()));
            continue;
        }
        let get = |k: usize| f[col[k]];
        let num = |k: usize| -> Result<f64, String> {
            get(k).parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| format!("`{}` is not a number: {:?}", COLUMNS[k], get(k)))
        };
        let parsed = (|| -> Result<((String, String), TrialHead, GazeSample), String> {
            let side = Side::parse(get(3)).ok_or_else(|| format!("unknown side {:?}", get(3)))?;
            let rect = Rect { x: num(4)?, y: num(5)? };
            if rect.x < 0.0 || rect.y < 0.0 || rect.x + RECT_SIZE > SCREEN_WIDTH || rect.y + RECT_SIZE > SCREEN_HEIGHT {
                return Err("image rectangle does not fit on screen".into());
            }
            let presentation_ms: u32 = get(6).parse().map_err(|_| format!("bad presentation_ms {:?}", get(6)))?;
            if !PRESENTATION_DURATIONS.contains(&presentation_ms) {
                return Err(format!("presentation_ms {presentation_ms} is not 150 or 3000"));
            }
            let (t, x, y) = (num(7)?, num(8)?, num(9)?);
            let kind = SampleKind::parse(get(10)).ok_or_else(|| format!("unknown kind {:?}", get(10)))?;
            if !(0.0..SCREEN_WIDTH).contains(&x) || !(0.0..SCREEN_HEIGHT).contains(&y) {
                return Err(format!("gaze ({x}, {y}) outside the screen"));
            }
            if t < 0.0 || t >= presentation_ms as f64 {
                return Err(format!("t_ms {t} outside the {presentation_ms} ms presentation"));
            }
            if get(0).is_empty() || get(1).is_empty() || get(2).is_empty() {
                return Err("empty participant, trial or image id".into());
            }
            let key = (get(0).to_string(), get(1).to_string());
            Ok((key, TrialHead { image: get(2).to_string(), side, rect, presentation_ms }, GazeSample { t, x, y, kind }))
        })();
        match parsed {
            Err(reason) => reject(reason),
            Ok((key, head, sample)) => match trials.get_mut(&key) {
                None => {
                    trials.insert(key, (head, vec![sample]));
                }
                Some((h, samples)) => {
                    if h.image != head.image || h.side != head.side || h.rect != head.rect || h.presentation_ms != head.presentation_ms {
                        reject(format!("trial fields disagree with earlier rows of trial {}/{}", key.0, key.1));
                    } else {
                        samples.push(sample);
                    }
                }
            },
        }
    }
    let trials = trials
        .into_iter()
        .map(|((participant, trial), (h, mut samples))| {
            samples.sort_by(GazeSample::sort_cmp);
            let invalid = samples
                .windows(2)
                .find(|w| w[0].kind == SampleKind::Sample && w[1].kind == SampleKind::Sample && w[0].t == w[1].t)
                .map(|w| format!("two gaze samples at t = {} ms with different positions", w[0].t));
            TrialRecord { participant, trial, image: h.image, side: h.side, rect: h.rect, presentation_ms: h.presentation_ms, samples, invalid }
        })
        .collect();
    Ok(GazeLog { trials, rejects })
}

/// Serializes trials back to the log schema, one row per sample.
pub fn write_gaze_csv(trials: &[TrialRecord]) -> String {
    let mut out = COLUMNS.join(",");
    out.push('\n');
    for t in trials {
        for s in &t.samples {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                t.participant,
                t.trial,
                t.image,
                t.side.as_str(),
                t.rect.x,
                t.rect.y,
                t.presentation_ms,
                s.t,
                s.x,
                s.y,
                s.kind.as_str()
            ));
        }
    }
    out
}

/// Timestamp of the first row of any kind inside the image rectangle.
pub fn boundary_entry(trial: &TrialRecord) -> Option<f64> {
    trial.samples.iter().find(|s| trial.rect.contains(s.x, s.y)).map(|s| s.t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Window {
    /// `[t0, t0 + 150)` ms.
    Feedforward,
    /// `[t0 + 150, presentation end)` ms.
    Recurrent,
}

impl Window {
    pub fn as_str(self) -> &'static str {
        match self {
            Window::Feedforward => "feedforward",
            Window::Recurrent => "recurrent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "feedforward" => Some(Window::Feedforward),
            "recurrent" => Some(Window::Recurrent),
            _ => None,
        }
    }
}

/// Splits the in-image rows at or after `t0` by the 150 ms threshold.
pub fn window_split(trial: &TrialRecord, t0: f64) -> (Vec<GazeSample>, Vec<GazeSample>) {
    let end = trial.presentation_ms as f64;
    trial
        .samples
        .iter()
        .filter(|s| s.t >= t0 && s.t < end && trial.rect.contains(s.x, s.y))
        .partition(|s| s.t < t0 + FEEDFORWARD_MS)
}

/// Screen position to 224×224 image coordinates: subtract the rectangle
/// origin, halve, clamp to `[0, 223]`.
pub fn to_image_coords(sample: &GazeSample, rect: &Rect) -> Result<(f64, f64), GazeError> {
    if !rect.contains(sample.x, sample.y) {
        return Err(GazeError::Input(format!("gaze ({}, {}) is outside the image rectangle", sample.x, sample.y)));
    }
    let hi = (MAP_SIZE - 1) as f64;
    Ok((((sample.x - rect.x) / 2.0).clamp(0.0, hi), ((sample.y - rect.y) / 2.0).clamp(0.0, hi)))
}

/// Centroid of a window, preferring fixation-tagged rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fixation {
    pub x: f64,
    pub y: f64,
    /// True when the window held no fixation-tagged rows and all rows were used.
    pub from_samples: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Exclusion {
    InvalidTrial(String),
    NeverEntered,
    EmptyWindow,
}

impl Exclusion {
    pub fn code(&self) -> &'static str {
        match self {
            Exclusion::InvalidTrial(_) => "invalid_trial",
            Exclusion::NeverEntered => "never_entered",
            Exclusion::EmptyWindow => "empty_window",
        }
    }
}

/// Centroid of the fixation-tagged rows of `window`, or of every row when
/// none is tagged. Coordinates are those of the input rows.
pub fn compile_fixation(window: &[GazeSample]) -> Result<Fixation, Exclusion> {
    if window.is_empty() {
        return Err(Exclusion::EmptyWindow);
    }
    let tagged: Vec<&GazeSample> = window.iter().filter(|s| s.kind.is_fixation()).collect();
    let (rows, from_samples): (Vec<&GazeSample>, bool) =
        if tagged.is_empty() { (window.iter().collect(), true) } else { (tagged, false) };
    let n = rows.len() as f64;
    Ok(Fixation {
        x: rows.iter().map(|s| s.x).sum::<f64>() / n,
        y: rows.iter().map(|s| s.y).sum::<f64>() / n,
        from_samples,
    })
}

/// The trial's feedforward fixation in image coordinates.
pub fn trial_fixation(trial: &TrialRecord) -> Result<Fixation, Exclusion> {
    if let Some(why) = &trial.invalid {
        return Err(Exclusion::InvalidTrial(why.clone()));
    }
    let t0 = boundary_entry(trial).ok_or(Exclusion::NeverEntered)?;
    let (ff, _) = window_split(trial, t0);
    let mapped: Vec<GazeSample> = ff
        .iter()
        .map(|s| {
            let (x, y) = to_image_coords(s, &trial.rect).expect("window rows are inside the rectangle");
            GazeSample { x, y, ..*s }
        })
        .collect();
    compile_fixation(&mapped)
}

/// Which rows are accumulated into a heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapSource {
    /// Raw gaze samples (`kind = sample`).
    Samples,
    /// Fixation-tagged rows.
    FixationEvents,
}

impl HeatmapSource {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "samples" => Some(HeatmapSource::Samples),
            "fixations" => Some(HeatmapSource::FixationEvents),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeatmapSource::Samples => "samples",
            HeatmapSource::FixationEvents => "fixations",
        }
    }

    fn accepts(self, kind: SampleKind) -> bool {
        match self {
            HeatmapSource::Samples => kind == SampleKind::Sample,
            HeatmapSource::FixationEvents => kind.is_fixation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub image: String,
    pub map: ImageMap,
    pub window: Window,
    pub n_participants: usize,
}

/// Normalized 1-D Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable convolution of a 224×224 field with zero padding.
pub fn blur(field: &[f64], sigma: f64, radius: usize) -> Vec<f64> {
    let n = MAP_SIZE;
    let k = gaussian_kernel(sigma, radius);
    let r = radius as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                let mut acc = 0.0;
                for (ki, &w) in k.iter().enumerate() {
                    let p = b as isize + ki as isize - r;
                    if p < 0 || p >= n as isize {
                        continue;
                    }
                    let p = p as usize;
                    acc += w * if horizontal { src[a * n + p] } else { src[p * n + a] };
                }
                if horizontal {
                    out[a * n + b] = acc;
                } else {
                    out[b * n + a] = acc;
                }
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

/// Heatmap for one image: per-participant sample counts at pixel
/// `(floor x, floor y)`, averaged over contributing participants, blurred
/// with σ = 15 px (radius 45) and divided by the maximum.
pub fn build_heatmap(image: &str, trials: &[&TrialRecord], window: Window, source: HeatmapSource) -> Result<Heatmap, GazeError> {
    let mut per: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for trial in trials.iter().filter(|t| t.image == image && t.invalid.is_none()) {
        let Some(t0) = boundary_entry(trial) else { continue };
        let (ff, rec) = window_split(trial, t0);
        let rows = match window {
            Window::Feedforward => ff,
            Window::Recurrent => rec,
        };
        for s in rows.iter().filter(|s| source.accepts(s.kind)) {
            let (x, y) = to_image_coords(s, &trial.rect)?;
            let field = per.entry(trial.participant.as_str()).or_insert_with(|| vec![0.0; MAP_SIZE * MAP_SIZE]);
            field[y.floor() as usize * MAP_SIZE + x.floor() as usize] += 1.0;
        }
    }
    if per.is_empty() {
        return Err(GazeError::NoSamples(image.to_string()));
    }
    let n = per.len();
    let mut mean = vec![0.0; MAP_SIZE * MAP_SIZE];
    for field in per.values() {
        for (m, v) in mean.iter_mut().zip(field) {
            *m += v / n as f64;
        }
    }
    Ok(Heatmap { image: image.to_string(), map: normalize_max(&blur(&mean, BLUR_SIGMA, BLUR_RADIUS)), window, n_participants: n })
}

pub fn normalize_max(field: &[f64]) -> ImageMap {
    let max = field.iter().copied().fold(0.0, f64::max);
    let values = field.iter().map(|&v| if max > 0.0 { (v / max) as f32 } else { 0.0 }).collect();
    ImageMap { values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "participant,trial,image,side,rect_x,rect_y,presentation_ms,t_ms,x,y,kind\n";

    fn fixture() -> String {
        let mut s = String::from(HEADER);
        for t in 0..5 {
            s.push_str(&format!("p1,1,img_a,left,600,316,150,{t},{},{},sample\n", 500 + t, 400));
        }
        for t in 0..4 {
            s.push_str(&format!("p1,2,img_b,right,1100,316,3000,{t},1200,500,sample\n"));
        }
        s
    }

    fn trial(samples: Vec<GazeSample>, presentation_ms: u32) -> TrialRecord {
        TrialRecord {
            participant: "p".into(),
            trial: "1".into(),
            image: "img".into(),
            side: Side::Left,
            rect: Rect { x: 600.0, y: 316.0 },
            presentation_ms,
            samples,
            invalid: None,
        }
    }

    fn s(t: f64, x: f64, y: f64) -> GazeSample {
        GazeSample { t, x, y, kind: SampleKind::Sample }
    }

    #[test]
    fn two_trial_fixture() {
        let log = parse_gaze_text(&fixture()).unwrap();
        assert_eq!(log.trials.len(), 2);
        assert_eq!(log.trials[0].samples.len(), 5);
        assert_eq!(log.trials[1].samples.len(), 4);
        assert!(log.rejects.is_empty());
        assert_eq!(parse_gaze_text(&write_gaze_csv(&log.trials)).unwrap(), log);
    }

    #[test]
    fn off_screen_row_is_rejected_and_trial_kept() {
        let text = fixture() + "p1,1,img_a,left,600,316,150,7,2500,400,sample\n";
        let log = parse_gaze_text(&text).unwrap();
        assert_eq!(log.rejects.len(), 1);
        assert_eq!(log.rejects[0].line, 11);
        assert!(log.rejects[0].reason.contains("outside the screen"));
        assert_eq!(log.trials[0].samples.len(), 5);
        for bad in [
            "p1,1,img_a,left,600,316,150,150,500,400,sample",
            "p1,1,img_a,left,600,316,150,-1,500,400,sample",
            "p1,1,img_a,up,600,316,150,3,500,400,sample",
            "p1,1,img_a,left,600,316,150,3,500,400,blink",
            "p1,1,img_z,left,600,316,150,3,500,400,sample",
            "p1,1,img_a,left,600,316,150,x,500,400,sample",
            "p1,1,img_a,left,600,316,150,3,500",
        ] {
            let log = parse_gaze_text(&format!("{}{bad}\n", fixture())).unwrap();
            assert_eq!(log.rejects.len(), 1, "{bad}");
        }
    }

    #[test]
    fn missing_column_is_a_format_error() {
        let text = "participant,trial,image,side,rect_x,rect_y,presentation_ms,t_ms,x,kind\n";
        match parse_gaze_text(text) {
            Err(GazeError::Format(m)) => assert!(m.contains("`y`")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn conflicting_duplicate_timestamps_invalidate_the_trial() {
        let text = format!("{HEADER}p,1,i,left,600,316,150,5,700,400,sample\np,1,i,left,600,316,150,5,701,400,sample\n");
        let log = parse_gaze_text(&text).unwrap();
        assert!(log.trials[0].invalid.is_some());
        assert!(matches!(trial_fixation(&log.trials[0]), Err(Exclusion::InvalidTrial(_))));
    }

    #[test]
    fn boundary_entry_examples() {
        let mut samples: Vec<_> = (0..80).map(|t| s(t as f64, 100.0, 100.0)).collect();
        samples.extend((80..150).map(|t| s(t as f64, 700.0, 400.0)));
        assert_eq!(boundary_entry(&trial(samples, 150)), Some(80.0));
        assert_eq!(boundary_entry(&trial(vec![s(0.0, 10.0, 10.0), s(1.0, 10.0, 10.0)], 150)), None);
        assert_eq!(boundary_entry(&trial(vec![s(0.0, 700.0, 400.0)], 150)), Some(0.0));
    }

    #[test]
    fn window_split_is_half_open() {
        let t0 = 20.0;
        let samples: Vec<_> = [0.0, 149.0, 150.0, 151.0].iter().map(|d| s(t0 + d, 700.0, 400.0)).collect();
        let (ff, rec) = window_split(&trial(samples, 3000), t0);
        assert_eq!(ff.iter().map(|s| s.t).collect::<Vec<_>>(), vec![20.0, 169.0]);
        assert_eq!(rec.iter().map(|s| s.t).collect::<Vec<_>>(), vec![170.0, 171.0]);

        let short: Vec<_> = (0..150).map(|t| s(t as f64, 700.0, 400.0)).collect();
        let (ff, rec) = window_split(&trial(short, 150), 0.0);
        assert_eq!(ff.len(), 150);
        assert!(rec.is_empty());

        let uniform: Vec<_> = (0..3000).map(|t| s(t as f64, 700.0, 400.0)).collect();
        for t0 in [0.0, 37.0, 99.0] {
            let (ff, rec) = window_split(&trial(uniform.clone(), 3000), t0);
            assert_eq!(ff.len(), 150);
            assert_eq!(rec.len(), 3000 - 150 - t0 as usize);
        }
    }

    #[test]
    fn image_coordinate_examples() {
        let r = Rect { x: 600.0, y: 316.0 };
        assert_eq!(to_image_coords(&s(0.0, 600.0, 316.0), &r).unwrap(), (0.0, 0.0));
        assert_eq!(to_image_coords(&s(0.0, 824.0, 540.0), &r).unwrap(), (112.0, 112.0));
        assert_eq!(to_image_coords(&s(0.0, 700.0, 416.0), &r).unwrap(), (50.0, 50.0));
        assert_eq!(to_image_coords(&s(0.0, 1047.9, 763.9), &r).unwrap(), (223.0, 223.0));
        assert!(to_image_coords(&s(0.0, 599.0, 316.0), &r).is_err());
    }

    #[test]
    fn fixation_centroids() {
        let f = compile_fixation(&[s(0.0, 100.0, 80.0), s(1.0, 100.0, 80.0)]).unwrap();
        assert_eq!((f.x, f.y, f.from_samples), (100.0, 80.0, true));
        let f = compile_fixation(&[s(0.0, 0.0, 0.0), s(1.0, 100.0, 100.0)]).unwrap();
        assert_eq!((f.x, f.y), (50.0, 50.0));
        // Mixed rows: only the three fixation-tagged rows count.
        let mixed = [
            s(0.0, 10.0, 10.0),
            GazeSample { t: 1.0, x: 30.0, y: 60.0, kind: SampleKind::FixationStart },
            s(2.0, 200.0, 200.0),
            GazeSample { t: 3.0, x: 36.0, y: 66.0, kind: SampleKind::FixationEnd },
            GazeSample { t: 4.0, x: 60.0, y: 30.0, kind: SampleKind::FixationStart },
        ];
        let f = compile_fixation(&mixed).unwrap();
        assert_eq!((f.x, f.y, f.from_samples), (42.0, 52.0, false));
        assert_eq!(compile_fixation(&[]), Err(Exclusion::EmptyWindow));
    }

    fn onscreen(x: f64, y: f64) -> GazeSample {
        s(5.0, 600.0 + 2.0 * x, 316.0 + 2.0 * y)
    }

    /// Two-dimensional truncated Gaussian, max-normalized, written out directly.
    fn analytic(cx: f64, cy: f64, x: usize, y: usize) -> f64 {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        if dx.abs() > 45.0 || dy.abs() > 45.0 {
            return 0.0;
        }
        (-(dx * dx + dy * dy) / (2.0 * 225.0)).exp()
    }

    #[test]
    fn single_sample_gives_analytic_kernel() {
        let t = trial(vec![onscreen(112.0, 112.0)], 150);
        let h = build_heatmap("img", &[&t], Window::Feedforward, HeatmapSource::Samples).unwrap();
        assert_eq!(h.map.at(112, 112), 1.0);
        assert_eq!(h.n_participants, 1);
        for y in 0..224 {
            for x in 0..224 {
                assert!((h.map.at(x, y) as f64 - analytic(112.0, 112.0, x, y)).abs() < 1e-6, "({x},{y})");
            }
        }
    }

    #[test]
    fn uniform_samples_give_flat_interior() {
        let samples: Vec<_> = (0..224 * 224).map(|i| onscreen((i % 224) as f64, (i / 224) as f64)).collect();
        let h = build_heatmap("img", &[&trial(samples, 150)], Window::Feedforward, HeatmapSource::Samples).unwrap();
        for y in 45..179 {
            for x in 45..179 {
                assert!((h.map.at(x, y) - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn two_participants_give_equal_peaks() {
        let a = trial(vec![onscreen(50.0, 50.0)], 150);
        let mut b = trial(vec![onscreen(170.0, 160.0)], 150);
        b.participant = "q".into();
        let h = build_heatmap("img", &[&a, &b], Window::Feedforward, HeatmapSource::Samples).unwrap();
        assert_eq!(h.n_participants, 2);
        assert_eq!(h.map.at(50, 50), h.map.at(170, 160));
        assert_eq!(h.map.at(50, 50), 1.0);
        assert!(matches!(
            build_heatmap("img", &[&a], Window::Recurrent, HeatmapSource::Samples),
            Err(GazeError::NoSamples(id)) if id == "img"
        ));
        assert!(matches!(
            build_heatmap("img", &[&a], Window::Feedforward, HeatmapSource::FixationEvents),
            Err(GazeError::NoSamples(_))
        ));
    }

    fn kind_strategy() -> impl Strategy<Value = SampleKind> {
        prop_oneof![Just(SampleKind::Sample), Just(SampleKind::FixationStart), Just(SampleKind::FixationEnd)]
    }

    proptest! {
        #[test]
        fn shuffled_rows_parse_identically(
            rows in proptest::collection::vec((0u32..150, 500u32..1100, 300u32..800, kind_strategy(), 0u8..3), 1..60),
            seed in any::<u64>(),
        ) {
            let mut lines: Vec<String> = rows
                .iter()
                .map(|(t, x, y, k, p)| format!("p{p},1,img,left,600,316,150,{t},{x},{y},{}", k.as_str()))
                .collect();
            let a = parse_gaze_text(&format!("{HEADER}{}\n", lines.join("\n"))).unwrap();
            use rand::{seq::SliceRandom, SeedableRng};
            lines.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = parse_gaze_text(&format!("{HEADER}{}\n", lines.join("\n"))).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn window_split_partitions_in_image_rows(ts in proptest::collection::vec((0u32..3000, 0u32..1920, 0u32..1080), 0..80), t0 in 0u32..200) {
            let samples: Vec<_> = ts.iter().map(|&(t, x, y)| s(t as f64, x as f64, y as f64)).collect();
            let tr = trial(samples.clone(), 3000);
            let (ff, rec) = window_split(&tr, t0 as f64);
            let inside = samples.iter().filter(|s| s.t >= t0 as f64 && tr.rect.contains(s.x, s.y)).count();
            prop_assert_eq!(ff.len() + rec.len(), inside);
            prop_assert!(ff.iter().all(|s| s.t < t0 as f64 + 150.0));
            prop_assert!(rec.iter().all(|s| s.t >= t0 as f64 + 150.0));
        }

        #[test]
        fn image_coordinates_stay_in_range(x in 600.0f64..1048.0, y in 316.0f64..764.0) {
            let (u, v) = to_image_coords(&s(0.0, x, y), &Rect { x: 600.0, y: 316.0 }).unwrap();
            prop_assert!((0.0..=223.0).contains(&u) && (0.0..=223.0).contains(&v));
        }

        #[test]
        fn blur_is_shift_equivariant_in_the_interior(x in 60usize..100, y in 60usize..100, dx in 0usize..60, dy in 0usize..60) {
            let a = build_heatmap("img", &[&trial(vec![onscreen(x as f64, y as f64)], 150)], Window::Feedforward, HeatmapSource::Samples).unwrap();
            let b = build_heatmap("img", &[&trial(vec![onscreen((x + dx) as f64, (y + dy) as f64)], 150)], Window::Feedforward, HeatmapSource::Samples).unwrap();
            for v in (y - 45)..=(y + 45) {
                for u in (x - 45)..=(x + 45) {
                    prop_assert_eq!(a.map.at(u, v), b.map.at(u + dx, v + dy));
                }
            }
            prop_assert!(a.map.max() == 1.0 && a.map.values.iter().all(|&v| v >= 0.0));
        }
    }
}
