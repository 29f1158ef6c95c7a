use cevae::data::Pgm;
use cevae::diffcore::Tensor;
use serde::{Deserialize, Serialize};

/// Affine map between stored grey levels and raw scores:
/// `raw = min + level / 255 * (max - min)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapScale {
    pub min: f64,
    pub max: f64,
}

/// Min-max scale an `[H, W]` map to an 8-bit image. A constant map is stored as black.
pub fn to_pgm(map: &Tensor<f32>) -> (Pgm, HeatmapScale) {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let data = map.data();
    let min = data.iter().fold(f64::INFINITY, |m, &v| m.min(v as f64));
    let max = data.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let span = max - min;
    let unit: Vec<f32> = data
        .iter()
        .map(|&v| if span > 0.0 { ((v as f64 - min) / span) as f32 } else { 0.0 })
        .collect();
    (Pgm::from_unit(w, h, &unit), HeatmapScale { min, max })
}

/// One CSV row per image row, full `f32` precision.
pub fn to_csv(map: &Tensor<f32>) -> String {
    let w = map.shape()[1];
    let mut out = String::new();
    for row in map.data().chunks(w) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_recovers_extremes() {
        let map = Tensor::new([2, 2], vec![0.5f32, 1.5, 1.0, 2.5]).unwrap();
        let (pgm, scale) = to_pgm(&map);
        assert_eq!(scale, HeatmapScale { min: 0.5, max: 2.5 });
        assert_eq!(pgm.pixels, vec![0, 128, 64, 255]);
        let back: Vec<f64> = pgm
            .pixels
            .iter()
            .map(|&p| scale.min + p as f64 / 255.0 * (scale.max - scale.min))
            .collect();
        for (b, v) in back.iter().zip(map.data()) {
            assert!((b - *v as f64).abs() <= (scale.max - scale.min) / 510.0 + 1e-12);
        }
    }

    #[test]
    fn constant_map_is_black() {
        let map = Tensor::new([1, 3], vec![0.2f32; 3]).unwrap();
        let (pgm, scale) = to_pgm(&map);
        assert_eq!(pgm.pixels, vec![0, 0, 0]);
        assert_eq!(scale.min, scale.max);
    }

    #[test]
    fn csv_layout() {
        let map = Tensor::new([2, 2], vec![1.0f32, 0.5, 0.0, 2.0]).unwrap();
        assert_eq!(to_csv(&map), "1,0.5\n0,2\n");
    }
}
