//! Dense 224×224 maps shared by gaze heatmaps and saliency maps.

use crate::model::spec::INPUT_SIZE;

/// Side length of every comparison map, in image pixels.
pub const MAP_SIZE: usize = INPUT_SIZE;
pub const MAP_LEN: usize = MAP_SIZE * MAP_SIZE;

pub const HEATMAP_MAGIC: &[u8; 8] = b"GZCMH001";
pub const SALIENCY_MAGIC: &[u8; 8] = b"GZCMS001";

/// Row-major 224×224 values; `values[y * 224 + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMap {
    pub values: Vec<f32>,
}

impl ImageMap {
    pub fn zeros() -> Self {
        ImageMap { values: vec![0.0; MAP_LEN] }
    }

    pub fn from_values(values: Vec<f32>) -> Option<Self> {
        (values.len() == MAP_LEN).then_some(ImageMap { values })
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.values[y * MAP_SIZE + x]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    /// True for nonnegative finite maps whose maximum is exactly 1, or that
    /// are identically zero.
    pub fn is_normalized(&self) -> bool {
        let ok = self.values.iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0);
        let m = self.max();
        ok && (m == 1.0 || m == 0.0)
    }

    /// Magic, then 224×224 little-endian f32.
    pub fn encode(&self, magic: &[u8; 8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * MAP_LEN);
        out.extend_from_slice(magic);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<Self, String> {
        if bytes.get(..8) != Some(magic.as_slice()) {
            return Err(format!("missing {} magic", String::from_utf8_lossy(magic)));
        }
        let body = &bytes[8..];
        if body.len() != 4 * MAP_LEN {
            return Err(format!("expected {} data bytes, found {}", 4 * MAP_LEN, body.len()));
        }
        let values = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(ImageMap { values })
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        crate::image::encode_pgm(MAP_SIZE, MAP_SIZE, &self.values)
    }

    /// `x,y,value` rows for every pixel.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(MAP_LEN * 16);
        out.push_str("x,y,value\n");
        for y in 0..MAP_SIZE {
            for x in 0..MAP_SIZE {
                out.push_str(&format!("{x},{y},{}\n", self.at(x, y)));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_and_magic_check() {
        let m = ImageMap::from_values((0..MAP_LEN).map(|i| i as f32 / MAP_LEN as f32).collect()).unwrap();
        let bytes = m.encode(HEATMAP_MAGIC);
        assert_eq!(&bytes[..8], b"GZCMH001");
        assert_eq!(ImageMap::decode(HEATMAP_MAGIC, &bytes).unwrap(), m);
        assert!(ImageMap::decode(SALIENCY_MAGIC, &bytes).is_err());
        assert!(ImageMap::decode(HEATMAP_MAGIC, &bytes[..100]).is_err());
    }

    #[test]
    fn normalization_predicate() {
        assert!(ImageMap::zeros().is_normalized());
        let mut m = ImageMap::zeros();
        m.values[5] = 0.5;
        assert!(!m.is_normalized());
        m.values[6] = 1.0;
        assert!(m.is_normalized());
        m.values[7] = -0.1;
        assert!(!m.is_normalized());
    }
}
