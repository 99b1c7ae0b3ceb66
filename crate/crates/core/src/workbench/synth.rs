//! Synthetic image corpora and gaze logs for desk-scale runs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::WorkbenchError;
use crate::gaze::{GazeSample, Rect, SampleKind, Side, TrialRecord, SCREEN_HEIGHT, SCREEN_WIDTH};
use crate::image::{encode_ppm, write_bytes, RgbImage};
use crate::map::MAP_SIZE;

/// Category names in generation order; living and non-living kinds
/// alternate so any prefix is balanced for animacy.
pub const CATEGORIES: [(&str, bool); 12] = [
    ("human", true),
    ("car", false),
    ("dog", true),
    ("train", false),
    ("cat", true),
    ("house", false),
    ("bird", true),
    ("bed", false),
    ("fish", true),
    ("flower", false),
    ("snake", true),
    ("ball", false),
];

const COLORS: [[u8; 3]; 12] = [
    [220, 40, 40],
    [40, 90, 230],
    [240, 200, 20],
    [30, 170, 60],
    [200, 60, 210],
    [20, 200, 210],
    [250, 130, 20],
    [120, 60, 20],
    [250, 250, 250],
    [10, 10, 10],
    [130, 220, 140],
    [150, 120, 250],
];

pub const MANIFEST_HEADER: &str = "image,category,path,object_x,object_y,object_size,animate,human_acc,arousal,valence";

/// Presentation rectangle corners for the two screen sides.
pub const LEFT_RECT: Rect = Rect { x: 336.0, y: 316.0 };
pub const RIGHT_RECT: Rect = Rect { x: 1136.0, y: 316.0 };

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_categories: usize,
    pub images_per_category: usize,
    pub image_size: usize,
    pub n_participants: usize,
    /// Rows logged for a 3000 ms trial at 1 kHz; logging may stop early to
    /// keep files small. Short trials log at most 150 rows.
    pub samples_per_trial: usize,
    /// Spread of the screen-center fixation component, image pixels.
    pub central_sigma: f64,
    /// Spread of the object fixation component, image pixels.
    pub object_sigma: f64,
    /// Probability that a fixation targets the object rather than the center.
    pub object_weight: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_categories: 12,
            images_per_category: 30,
            image_size: MAP_SIZE,
            n_participants: 8,
            samples_per_trial: 3000,
            central_sigma: 30.0,
            object_sigma: 6.0,
            object_weight: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), WorkbenchError> {
        let bad = |m: String| Err(WorkbenchError::Config(m));
        if !(1..=CATEGORIES.len()).contains(&self.n_categories) {
            return bad(format!("n_categories must lie in 1..={}", CATEGORIES.len()));
        }
        if self.images_per_category == 0 || self.n_participants == 0 {
            return bad("image and participant counts must be positive".into());
        }
        if self.image_size != MAP_SIZE {
            return bad(format!("image_size must be {MAP_SIZE}"));
        }
        if !(150..=3000).contains(&self.samples_per_trial) {
            return bad("samples_per_trial must lie in 150..=3000".into());
        }
        if !(self.central_sigma > 0.0 && self.object_sigma > 0.0) {
            return bad("fixation spreads must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.object_weight) {
            return bad("object_weight must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub id: String,
    pub category: String,
    /// Relative to the corpus root.
    pub path: String,
    pub object_x: f64,
    pub object_y: f64,
    pub object_size: f64,
    pub animate: bool,
    pub human_acc: f64,
    pub arousal: f64,
    pub valence: f64,
}

pub fn manifest_csv(images: &[SynthImage]) -> String {
    let mut out = format!("{MANIFEST_HEADER}\n");
    for m in images {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            m.id, m.category, m.path, m.object_x, m.object_y, m.object_size, m.animate, m.human_acc, m.arousal, m.valence
        )
        .unwrap();
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<SynthImage>, WorkbenchError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(WorkbenchError::Input(format!("manifest header must be `{MANIFEST_HEADER}`")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |what: &str| WorkbenchError::Input(format!("manifest line {}: bad {what}", i + 2));
        if f.len() != 10 {
            return Err(bad("field count"));
        }
        let num = |k: usize, what: &str| f[k].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad(what));
        out.push(SynthImage {
            id: f[0].to_string(),
            category: f[1].to_string(),
            path: f[2].to_string(),
            object_x: num(3, "object_x")?,
            object_y: num(4, "object_y")?,
            object_size: num(5, "object_size")?,
            animate: f[6].parse().map_err(|_| bad("animate"))?,
            human_acc: num(7, "human_acc")?,
            arousal: num(8, "arousal")?,
            valence: num(9, "valence")?,
        });
    }
    Ok(out)
}

fn inside_glyph(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let d = (dx * dx + dy * dy).sqrt();
    match shape % 12 {
        0 => d <= r,
        1 => ax <= r && ay <= r,
        2 => dy <= r && dy >= -r && ax <= (r + dy) / 2.0,
        3 => (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r),
        4 => d <= r && d >= r * 0.55,
        5 => ax + ay <= r,
        6 => ax <= r && ay <= r / 2.5,
        7 => ax <= r / 2.5 && ay <= r,
        8 => (ax - ay).abs() <= r / 3.0 && ax <= r && ay <= r,
        9 => ax <= r && ay <= r && !(ax <= r / 2.0 && ay <= r / 2.0),
        10 => d <= r && (dx.atan2(dy) * 3.0).sin() > 0.0,
        _ => ax <= r && ay <= r && ((dx / r * 2.0).floor() + (dy / r * 2.0).floor()) as i64 % 2 == 0,
    }
}

/// Renders one image: a textured grey background with the category's glyph
/// centered at `(cx, cy)`.
pub fn render_image(category: usize, cx: f64, cy: f64, radius: f64, rng: &mut ChaCha8Rng) -> RgbImage {
    let base: f64 = rng.random_range(115.0..140.0);
    let (gx, gy): (f64, f64) = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    let period: f64 = rng.random_range(6.0..20.0);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let color = COLORS[category];
    let size = MAP_SIZE;
    let mut noise = vec![0.0f64; size * size];
    for v in &mut noise {
        *v = rng.random_range(-18.0..18.0);
    }
    RgbImage::from_fn(size, size, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        if inside_glyph(category, xf + 0.5 - cx, yf + 0.5 - cy, radius) {
            return color;
        }
        let stripe = 10.0 * ((xf + yf) / period + phase).sin();
        let v = (base + gx * (xf - 112.0) + gy * (yf - 112.0) + stripe + noise[y * size + x]).clamp(0.0, 255.0) as u8;
        [v, v, v]
    })
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Writes `root/<category>/<id>.ppm` plus `root/manifest.csv` and returns the
/// manifest rows. Each glyph sits near the center of a uniformly chosen
/// 56-pixel block.
pub fn synth_images(spec: &SyntheticSpec, seed: u64, root: &Path) -> Result<Vec<SynthImage>, WorkbenchError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let block = MAP_SIZE as f64 / 4.0;
    for (k, &(name, animate)) in CATEGORIES.iter().enumerate().take(spec.n_categories) {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| WorkbenchError::Io { path: dir.display().to_string(), detail: e.to_string() })?;
        let arousal_mean = 2.0 + 3.0 * ((k * 5) % 7) as f64 / 6.0;
        let valence_mean = 2.0 + 3.0 * ((k * 3) % 7) as f64 / 6.0;
        for i in 0..spec.images_per_category {
            let b = rng.random_range(0..16usize);
            let cx = round2((b % 4) as f64 * block + block / 2.0 + rng.random_range(-12.0..12.0));
            let cy = round2((b / 4) as f64 * block + block / 2.0 + rng.random_range(-12.0..12.0));
            let radius = round2(rng.random_range(20.0..28.0));
            let img = render_image(k, cx, cy, radius, &mut rng);
            let id = format!("{name}_{i:03}");
            let rel = format!("{name}/{id}.ppm");
            write_bytes(&root.join(&rel), &encode_ppm(&img)).map_err(|e| WorkbenchError::Io { path: rel.clone(), detail: e.to_string() })?;
            let human_acc = if rng.random_bool(0.8) { 1.0 } else { [0.75, 0.875][rng.random_range(0..2)] };
            let rating = |mean: f64, rng: &mut ChaCha8Rng| ((mean + rng.random_range(-1.5..1.5)).clamp(1.0, 7.0) * 2.0).round() / 2.0;
            let arousal = rating(arousal_mean, &mut rng);
            let valence = rating(valence_mean, &mut rng);
            rows.push(SynthImage {
                id,
                category: name.to_string(),
                path: rel,
                object_x: cx,
                object_y: cy,
                object_size: radius,
                animate,
                human_acc,
                arousal,
                valence,
            });
        }
    }
    let path = root.join("manifest.csv");
    fs::write(&path, manifest_csv(&rows)).map_err(|e| WorkbenchError::Io { path: path.display().to_string(), detail: e.to_string() })?;
    Ok(rows)
}

fn fixation_target(spec: &SyntheticSpec, img: &SynthImage, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let hi = MAP_SIZE as f64 - 0.01;
    let (mx, my, s) = if rng.random_bool(spec.object_weight) {
        (img.object_x, img.object_y, spec.object_sigma)
    } else {
        (MAP_SIZE as f64 / 2.0, MAP_SIZE as f64 / 2.0, spec.central_sigma)
    };
    let n = Normal::new(0.0, s).expect("positive spread");
    ((mx + n.sample(rng)).clamp(0.0, hi), (my + n.sample(rng)).clamp(0.0, hi))
}

/// One trial per participant and image at 1 kHz. Gaze rests on the screen
/// center until it enters the image between 40 and 120 ms, then holds a
/// sequence of fixations roughly 300 ms long, each drawn from the
/// center/object mixture and bracketed by fixation events.
pub fn synth_gaze(spec: &SyntheticSpec, manifest: &[SynthImage], seed: u64) -> Result<Vec<TrialRecord>, WorkbenchError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 1.5).expect("positive spread");
    let mut trials = Vec::new();
    let hi = MAP_SIZE as f64 - 0.01;
    for p in 0..spec.n_participants {
        for (i, img) in manifest.iter().enumerate() {
            let presentation_ms: u32 = if (p + i) % 2 == 0 { 3000 } else { 150 };
            let rows = (presentation_ms as usize).min(spec.samples_per_trial);
            let side = if rng.random_bool(0.5) { Side::Left } else { Side::Right };
            let rect = if side == Side::Left { LEFT_RECT } else { RIGHT_RECT };
            let entry = rng.random_range(40..120usize);
            let mut samples = Vec::with_capacity(rows + 8);
            let rest = (SCREEN_WIDTH / 2.0, SCREEN_HEIGHT / 2.0);
            for t in 0..entry.min(rows) {
                samples.push(GazeSample { t: t as f64, x: rest.0, y: rest.1, kind: SampleKind::Sample });
            }
            let mut t = entry;
            while t < rows {
                let (fx, fy) = fixation_target(spec, img, &mut rng);
                let end = (t + rng.random_range(250..350usize)).min(rows);
                let screen = |x: f64, y: f64| (round2(rect.x + 2.0 * x), round2(rect.y + 2.0 * y));
                let (sx, sy) = screen(fx, fy);
                samples.push(GazeSample { t: t as f64, x: sx, y: sy, kind: SampleKind::FixationStart });
                for s in t..end {
                    let (x, y) = screen((fx + jitter.sample(&mut rng)).clamp(0.0, hi), (fy + jitter.sample(&mut rng)).clamp(0.0, hi));
                    samples.push(GazeSample { t: s as f64, x, y, kind: SampleKind::Sample });
                }
                samples.push(GazeSample { t: (end - 1) as f64, x: sx, y: sy, kind: SampleKind::FixationEnd });
                t = end;
            }
            samples.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.kind.cmp(&b.kind)).then(a.x.total_cmp(&b.x)).then(a.y.total_cmp(&b.y)));
            trials.push(TrialRecord {
                participant: format!("p{p:02}"),
                trial: format!("{i:04}"),
                image: img.id.clone(),
                side,
                rect,
                presentation_ms,
                samples,
                invalid: None,
            });
        }
    }
    Ok(trials)
}
