//! Browser bindings for three small operations of the workbench.
//!
//! The plain Rust functions carry the logic and are tested natively; the
//! `#[wasm_bindgen]` wrappers only convert errors.

use gazecam::compare::block_on_grid;
use gazecam::gaze::{blur, normalize_max};
use gazecam::map::MAP_SIZE;
use gazecam::model::{tap_grid, theoretical_rfs, ArchitectureConfig, Family, Tap};
use gazecam::saliency::{global_maximum, upsample_and_normalize, ClassSource, SaliencyGrid};
use wasm_bindgen::prelude::*;

/// Max-normalized heatmap (row-major 224×224) of clicked points given as
/// flat `x0, y0, x1, y1, …` image coordinates, blurred with `sigma` and a
/// `3σ` truncation radius.
pub fn heatmap(points: &[f64], sigma: f64) -> Result<Vec<f32>, String> {
    if points.len() % 2 != 0 {
        return Err("points must come in x,y pairs".into());
    }
    if !(sigma > 0.0 && sigma <= 60.0) {
        return Err(format!("sigma must lie in (0, 60], got {sigma}"));
    }
    let hi = (MAP_SIZE - 1) as f64;
    let mut field = vec![0.0; MAP_SIZE * MAP_SIZE];
    for p in points.chunks(2) {
        let (x, y) = (p[0].clamp(0.0, hi), p[1].clamp(0.0, hi));
        field[y.floor() as usize * MAP_SIZE + x.floor() as usize] += 1.0;
    }
    let radius = (3.0 * sigma).ceil() as usize;
    Ok(normalize_max(&blur(&field, sigma, radius)).values)
}

/// `layer,rfs,jump` rows followed by one `tap,rows,cols` row per tap.
pub fn receptive_fields(table: &str) -> Result<String, String> {
    let config = ArchitectureConfig::parse(table).map_err(|e| e.to_string())?;
    let mut out = String::from("layer,rfs,jump\n");
    for rf in theoretical_rfs(&config) {
        out.push_str(&format!("{},{},{}\n", rf.layer, rf.size, rf.jump));
    }
    for tap in Tap::ALL {
        let (r, c) = tap_grid(&config, tap).map_err(|e| e.to_string())?;
        out.push_str(&format!("tap:{tap},{r},{c}\n"));
    }
    Ok(out)
}

/// Layer table text of a built-in family.
pub fn builtin_table(name: &str, width: usize, classes: usize) -> Result<String, String> {
    let family = Family::parse(name).ok_or_else(|| format!("unknown model {name:?}"))?;
    if width == 0 || classes == 0 {
        return Err("width and classes must be positive".into());
    }
    Ok(family.config(width, classes).to_text())
}

#[wasm_bindgen]
pub struct Upsampled {
    map: Vec<f32>,
    max_x: f64,
    max_y: f64,
    block: usize,
}

#[wasm_bindgen]
impl Upsampled {
    #[wasm_bindgen(getter)]
    pub fn map(&self) -> Vec<f32> {
        self.map.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn max_x(&self) -> f64 {
        self.max_x
    }
    #[wasm_bindgen(getter)]
    pub fn max_y(&self) -> f64 {
        self.max_y
    }
    /// Target block of the maximum on the 4×4 grid.
    #[wasm_bindgen(getter)]
    pub fn block(&self) -> usize {
        self.block
    }
}

/// Bilinear upsampling of a row-major `rows`×`cols` grid to 224×224, its
/// global maximum in image coordinates and the block holding it.
pub fn upsample(values: &[f64], rows: usize, cols: usize) -> Result<Upsampled, String> {
    if rows == 0 || cols == 0 || values.len() != rows * cols {
        return Err(format!("expected {rows}x{cols} values, got {}", values.len()));
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err("grid values must be finite and nonnegative".into());
    }
    let grid = SaliencyGrid { tap: Tap::Late, rows, cols, values: values.to_vec(), class_used: 0, class_source: ClassSource::Predicted };
    let (max_x, max_y) = global_maximum(&grid).map_err(|e| e.to_string())?;
    let block = block_on_grid(max_x, max_y, 4).map_err(|e| e.to_string())?.index;
    Ok(Upsampled { map: upsample_and_normalize(&grid).values, max_x, max_y, block })
}

#[wasm_bindgen(js_name = heatmap)]
pub fn heatmap_js(points: &[f64], sigma: f64) -> Result<Vec<f32>, JsError> {
    heatmap(points, sigma).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = receptiveFields)]
pub fn receptive_fields_js(table: &str) -> Result<String, JsError> {
    receptive_fields(table).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = builtinTable)]
pub fn builtin_table_js(name: &str, width: usize, classes: usize) -> Result<String, JsError> {
    builtin_table(name, width, classes).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = upsample)]
pub fn upsample_js(values: &[f64], rows: usize, cols: usize) -> Result<Upsampled, JsError> {
    upsample(values, rows, cols).map_err(|e| JsError::new(&e))
}
