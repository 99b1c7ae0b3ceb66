//! GradCAM grids at the tapped layers, their global maxima and full-resolution maps.

use thiserror::Error;

use crate::autodiff::Graph;
use crate::map::{ImageMap, MAP_SIZE};
use crate::model::spec::{Tap, INPUT_CHANNELS, INPUT_SIZE};
use crate::model::{argmax_rows, Mode, Model, ModelError, ParamGrads};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error("input error: {0}")]
    Input(String),
    #[error("degenerate grid: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassSource {
    Predicted,
    GroundTruth,
}

impl ClassSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassSource::Predicted => "predicted",
            ClassSource::GroundTruth => "ground_truth",
        }
    }
}

/// Which logit to explain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassChoice {
    Predicted,
    GroundTruth(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyGrid {
    pub tap: Tap,
    pub rows: usize,
    pub cols: usize,
    /// Row-major, nonnegative.
    pub values: Vec<f64>,
    pub class_used: usize,
    pub class_source: ClassSource,
}

impl SaliencyGrid {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,value\n");
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push_str(&format!("{r},{c},{}\n", self.at(r, c)));
            }
        }
        out
    }

    pub fn from_csv(text: &str, tap: Tap, class_used: usize, class_source: ClassSource) -> Result<Self, String> {
        let mut cells = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let parse = || -> Option<(usize, usize, f64)> { Some((f.first()?.parse().ok()?, f.get(1)?.parse().ok()?, f.get(2)?.parse().ok()?)) };
            cells.push(parse().ok_or_else(|| format!("line {}: malformed grid row", i + 1))?);
        }
        let rows = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let cols = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        if rows * cols != cells.len() || cells.is_empty() {
            return Err("grid CSV does not cover a full rectangle".into());
        }
        let mut values = vec![f64::NAN; rows * cols];
        for (r, c, v) in cells {
            values[r * cols + c] = v;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err("grid CSV has duplicate cells".into());
        }
        Ok(SaliencyGrid { tap, rows, cols, values, class_used, class_source })
    }
}

/// GradCAM for one image at all three taps, from a single backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcamResult {
    pub predicted: usize,
    pub logits: Vec<f32>,
    /// Indexed by `Tap::index`.
    pub grids: Vec<SaliencyGrid>,
}

impl GradcamResult {
    pub fn grid(&self, tap: Tap) -> &SaliencyGrid {
        &self.grids[tap.index()]
    }
}

fn as_batch_of_one(image: &Tensor) -> Result<Tensor, SaliencyError> {
    let shape = image.shape();
    let ok = match shape {
        [c, h, w] => [*c, *h, *w] == [INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE],
        [1, c, h, w] => [*c, *h, *w] == [INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE],
        _ => false,
    };
    if !ok {
        return Err(SaliencyError::Input(format!("expected a [3,224,224] image, got {shape:?}")));
    }
    Ok(image.clone().reshape(&[1, INPUT_CHANNELS, INPUT_SIZE, INPUT_SIZE]).expect("same length"))
}

/// Channel weights are the spatial means of the class logit's gradient at
/// each tapped activation; the grid is the rectified weighted channel sum.
/// Runs the network in eval mode.
pub fn gradcam_all(model: &Model, image: &Tensor, choice: ClassChoice) -> Result<GradcamResult, SaliencyError> {
    let x = as_batch_of_one(image)?;
    let classes = model.config().num_classes();
    if let ClassChoice::GroundTruth(c) = choice {
        if c >= classes {
            return Err(SaliencyError::Input(format!("class {c} out of range for {classes} classes")));
        }
    }
    let mut g = Graph::new();
    let input = g.leaf(x, false);
    let pass = model.forward(&mut g, input, Mode::Eval, ParamGrads::None)?;
    for tap in Tap::ALL {
        g.retain(pass.tap(tap));
    }
    let logits = g.value(pass.logits).clone();
    let predicted = argmax_rows(&logits)[0];
    let (class_used, class_source) = match choice {
        ClassChoice::Predicted => (predicted, ClassSource::Predicted),
        ClassChoice::GroundTruth(c) => (c, ClassSource::GroundTruth),
    };
    let score = g.select(pass.logits, class_used).map_err(ModelError::from)?;
    let grads = g.backward(score).map_err(ModelError::from)?;
    let grids = Tap::ALL
        .iter()
        .map(|&tap| {
            let id = pass.tap(tap);
            let act = g.value(id);
            let grad = grads.get(id).expect("retained tap");
            let (_, k, h, w) = act.dims4().expect("spatial tap");
            Ok(SaliencyGrid {
                tap,
                rows: h,
                cols: w,
                values: combine(act.data(), grad.data(), k, h * w),
                class_used,
                class_source,
            })
        })
        .collect::<Result<_, SaliencyError>>()?;
    Ok(GradcamResult { predicted, logits: logits.into_data(), grids })
}

/// `ReLU(Σ_k mean(grad_k) · act_k)` over `k` channels of `plane` cells.
fn combine(act: &[f32], grad: &[f32], channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; plane];
    for k in 0..channels {
        let gk = &grad[k * plane..(k + 1) * plane];
        let alpha = gk.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        if alpha == 0.0 {
            continue;
        }
        for (o, &a) in out.iter_mut().zip(&act[k * plane..(k + 1) * plane]) {
            *o += alpha * a as f64;
        }
    }
    for o in &mut out {
        *o = o.max(0.0);
    }
    out
}

pub fn gradcam(model: &Model, image: &Tensor, choice: ClassChoice, tap: Tap) -> Result<SaliencyGrid, SaliencyError> {
    Ok(gradcam_all(model, image, choice)?.grids.swap_remove(tap.index()))
}

/// Center of cell `(row, col)` in 224×224 image coordinates.
pub fn cell_center(row: usize, col: usize, rows: usize, cols: usize) -> (f64, f64) {
    let s = MAP_SIZE as f64;
    ((col as f64 + 0.5) * s / cols as f64, (row as f64 + 0.5) * s / rows as f64)
}

/// Mean cell center of the 4-connected plateau of maximal cells that
/// contains the row-major-first maximum.
pub fn global_maximum(grid: &SaliencyGrid) -> Result<(f64, f64), SaliencyError> {
    let (rows, cols) = (grid.rows, grid.cols);
    if rows == 0 || cols == 0 || grid.values.len() != rows * cols {
        return Err(SaliencyError::Input("empty grid".into()));
    }
    if grid.is_zero() {
        return Err(SaliencyError::Degenerate(format!("{} grid is identically zero", grid.tap)));
    }
    let mut first = 0;
    for (i, &v) in grid.values.iter().enumerate() {
        if v > grid.values[first] {
            first = i;
        }
    }
    let top = grid.values[first];
    let mut seen = vec![false; rows * cols];
    let mut stack = vec![first];
    seen[first] = true;
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    while let Some(i) = stack.pop() {
        let (r, c) = (i / cols, i % cols);
        let (x, y) = cell_center(r, c, rows, cols);
        sx += x;
        sy += y;
        n += 1;
        let mut visit = |r: usize, c: usize| {
            let j = r * cols + c;
            if !seen[j] && grid.values[j] == top {
                seen[j] = true;
                stack.push(j);
            }
        };
        if r > 0 {
            visit(r - 1, c);
        }
        if r + 1 < rows {
            visit(r + 1, c);
        }
        if c > 0 {
            visit(r, c - 1);
        }
        if c + 1 < cols {
            visit(r, c + 1);
        }
    }
    Ok((sx / n as f64, sy / n as f64))
}

/// Bilinear upsampling to 224×224 followed by division by the maximum.
///
/// Pixel `x` samples the grid at `x·cols/224 − 0.5` (clamped), so pixels at
/// cell centers reproduce cell values exactly.
pub fn upsample_and_normalize(grid: &SaliencyGrid) -> ImageMap {
    let axis = |n: usize| -> Vec<(usize, usize, f64)> {
        (0..MAP_SIZE)
            .map(|p| {
                let u = (p as f64 * n as f64 / MAP_SIZE as f64 - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = u.floor() as usize;
                (i0, (i0 + 1).min(n - 1), u - i0 as f64)
            })
            .collect()
    };
    let ys = axis(grid.rows);
    let xs = axis(grid.cols);
    let mut vals = vec![0.0f64; MAP_SIZE * MAP_SIZE];
    for (py, &(r0, r1, fy)) in ys.iter().enumerate() {
        for (px, &(c0, c1, fx)) in xs.iter().enumerate() {
            let top = grid.at(r0, c0) * (1.0 - fx) + grid.at(r0, c1) * fx;
            let bot = grid.at(r1, c0) * (1.0 - fx) + grid.at(r1, c1) * fx;
            vals[py * MAP_SIZE + px] = top * (1.0 - fy) + bot * fy;
        }
    }
    let max = vals.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut vals {
            *v /= max;
        }
    }
    ImageMap { values: vals.into_iter().map(|v| v as f32).collect() }
}
