//! Pixel-domain just-noticeable-difference thresholds from luminance
//! adaptation and contrast masking.
//!
//! Both components are computed on `[0, 255]`-scaled luma and returned in
//! `[0, 1]` intensity units. Windows replicate edge pixels.

use crate::error::{Error, Result};
use crate::imaging::{to_luma, Image};
use crate::tensor::NdArray;

/// Weight of the overlap term in the nonlinear-additivity fusion.
pub const OVERLAP: f64 = 0.3;

const GRADIENT_KERNELS: [[[f64; 5]; 5]; 4] = [
    [
        [0.0, 0.0, 0.0, 0.0, 0.0],
        [1.0, 3.0, 8.0, 3.0, 1.0],
        [0.0, 0.0, 0.0, 0.0, 0.0],
        [-1.0, -3.0, -8.0, -3.0, -1.0],
        [0.0, 0.0, 0.0, 0.0, 0.0],
    ],
    [
        [0.0, 0.0, 1.0, 0.0, 0.0],
        [0.0, 8.0, 3.0, 0.0, 0.0],
        [1.0, 3.0, 0.0, -3.0, -1.0],
        [0.0, 0.0, -3.0, -8.0, 0.0],
        [0.0, 0.0, -1.0, 0.0, 0.0],
    ],
    [
        [0.0, 0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 3.0, 8.0, 0.0],
        [-1.0, -3.0, 0.0, 3.0, 1.0],
        [0.0, -8.0, -3.0, 0.0, 0.0],
        [0.0, 0.0, -1.0, 0.0, 0.0],
    ],
    [
        [0.0, 1.0, 0.0, -1.0, 0.0],
        [0.0, 3.0, 0.0, -3.0, 0.0],
        [0.0, 8.0, 0.0, -8.0, 0.0],
        [0.0, 3.0, 0.0, -3.0, 0.0],
        [0.0, 1.0, 0.0, -1.0, 0.0],
    ],
];

/// Per-pixel thresholds in `[0, 1]` intensity units.
#[derive(Clone, Debug, PartialEq)]
pub struct JndMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl JndMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Invalid(format!("{height}x{width} map needs {} values", height * width)));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid("JND values must be finite and nonnegative".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// The map repeated over `channels`, shaped `[channels, h, w]`.
    pub fn broadcast(&self, channels: usize) -> NdArray {
        let n = self.data.len();
        NdArray::from_fn(&[channels, self.height, self.width], |i| self.data[i % n])
    }

    /// Grayscale rendering, values clamped to `[0, 1]`.
    pub fn to_image(&self) -> Image {
        Image::new(self.height, self.width, 1, self.data.iter().map(|v| v.min(1.0)).collect())
            .expect("clamped values are valid")
    }
}

fn scaled_luma(img: &Image, op: &str) -> Result<Vec<f64>> {
    if img.channels() != 1 {
        return Err(Error::Invalid(format!("{op} expects a single-channel image")));
    }
    Ok(img.data().iter().map(|v| v * 255.0).collect())
}

/// Applies `f` to each 5x5 edge-replicated neighbourhood.
fn window5(y: &[f64], h: usize, w: usize, f: impl Fn(&dyn Fn(isize, isize) -> f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let at = |dy: isize, dx: isize| {
                let rr = (r as isize + dy).clamp(0, h as isize - 1) as usize;
                let cc = (c as isize + dx).clamp(0, w as isize - 1) as usize;
                y[rr * w + cc]
            };
            out.push(f(&at));
        }
    }
    out
}

/// Threshold for a background luminance `b` in `[0, 255]`, in `[0, 1]` units.
pub fn la_of_background(b: f64) -> f64 {
    let t = if b <= 127.0 {
        17.0 * (1.0 - (b / 127.0).sqrt()) + 3.0
    } else {
        3.0 * (b - 127.0) / 128.0 + 3.0
    };
    t / 255.0
}

pub fn luminance_adaptation(luma: &Image) -> Result<JndMap> {
    let y = scaled_luma(luma, "luminance_adaptation")?;
    let (h, w) = (luma.height(), luma.width());
    let data = window5(&y, h, w, |at| {
        let mut s = 0.0;
        for dy in -2..=2 {
            for dx in -2..=2 {
                s += at(dy, dx);
            }
        }
        la_of_background(s / 25.0)
    });
    JndMap::new(h, w, data)
}

pub fn contrast_masking(luma: &Image) -> Result<JndMap> {
    let y = scaled_luma(luma, "contrast_masking")?;
    let (h, w) = (luma.height(), luma.width());
    // Kernels sum to zero, so responses are taken relative to the centre
    // pixel; flat windows then give exactly zero.
    let data = window5(&y, h, w, |at| {
        let centre = at(0, 0);
        let mut g = 0.0f64;
        for k in &GRADIENT_KERNELS {
            let mut s = 0.0;
            for (i, row) in k.iter().enumerate() {
                for (j, &kv) in row.iter().enumerate() {
                    if kv != 0.0 {
                        s += kv * (at(i as isize - 2, j as isize - 2) - centre);
                    }
                }
            }
            g = g.max((s / 16.0).abs());
        }
        0.115 * g.powf(0.8) / 255.0
    });
    JndMap::new(h, w, data)
}

/// `LA + CM - 0.3 min(LA, CM)` on the luma of `img`, clamped at zero.
pub fn jnd_map(img: &Image) -> Result<JndMap> {
    let luma = to_luma(img);
    let la = luminance_adaptation(&luma)?;
    let cm = contrast_masking(&luma)?;
    let data = la
        .data
        .iter()
        .zip(&cm.data)
        .map(|(&a, &c)| (a + c - OVERLAP * a.min(c)).max(0.0))
        .collect();
    JndMap::new(img.height(), img.width(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn la_formula_points() {
        assert!((la_of_background(127.0) - 3.0 / 255.0).abs() < 1e-15);
        assert!((la_of_background(0.0) - 20.0 / 255.0).abs() < 1e-15);
        assert!((la_of_background(255.0) - 6.0 / 255.0).abs() < 1e-15);
        let flat = |v: f64| luminance_adaptation(&Image::constant(6, 6, 1, v).unwrap()).unwrap();
        assert!(flat(0.0).data().iter().all(|&x| (x - 20.0 / 255.0).abs() < 1e-15));
        assert!(flat(1.0).data().iter().all(|&x| (x - 6.0 / 255.0).abs() < 1e-13));
    }

    #[test]
    fn cm_flat_and_edge() {
        let flat = Image::constant(8, 8, 1, 0.4).unwrap();
        assert!(contrast_masking(&flat).unwrap().data().iter().all(|&v| v == 0.0));
        let step = Image::from_fn(8, 10, 1, |_, _, x| if x < 5 { 0.0 } else { 1.0 }).unwrap();
        let cm = contrast_masking(&step).unwrap();
        for y in 0..8 {
            for x in 3..7 {
                assert!(cm.get(y, x) > 0.0, "({x},{y})");
            }
            assert_eq!(cm.get(y, 0), 0.0);
        }
        assert!(contrast_masking(&Image::constant(2, 2, 3, 0.0).unwrap()).is_err());
    }

    /// Direct per-pixel evaluation of the four kernel responses.
    fn cm_oracle(img: &Image, y: usize, x: usize) -> f64 {
        let (h, w) = (img.height() as isize, img.width() as isize);
        let px = |r: isize, c: isize| 255.0 * img.get(0, r.clamp(0, h - 1) as usize, c.clamp(0, w - 1) as usize);
        let mut best = 0.0f64;
        for k in GRADIENT_KERNELS {
            let mut s = 0.0;
            for i in 0..5 {
                for j in 0..5 {
                    s += k[i][j] * px(y as isize + i as isize - 2, x as isize + j as isize - 2);
                }
            }
            best = best.max(s.abs() / 16.0);
        }
        0.115 * best.powf(0.8) / 255.0
    }

    #[test]
    fn cm_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Image::from_fn(9, 11, 1, |_, _, _| 0.0).unwrap();
        let img = Image::new(9, 11, 1, img.data().iter().map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let cm = contrast_masking(&img).unwrap();
        for y in 0..9 {
            for x in 0..11 {
                assert!((cm.get(y, x) - cm_oracle(&img, y, x)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn fusion_properties() {
        let flat = Image::constant(6, 6, 3, 0.5).unwrap();
        let j = jnd_map(&flat).unwrap();
        let la = luminance_adaptation(&to_luma(&flat)).unwrap();
        assert_eq!(j, la);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = Image::new(12, 12, 1, (0..144).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let (j, la, cm) = (
            jnd_map(&img).unwrap(),
            luminance_adaptation(&img).unwrap(),
            contrast_masking(&img).unwrap(),
        );
        for i in 0..144 {
            let (a, c, v) = (la.data()[i], cm.data()[i], j.data()[i]);
            assert!(v >= 0.7 * a.max(c) - 1e-15 && v > 0.0);
            assert!(v <= a + c + 1e-15);
        }

        let dark = jnd_map(&Image::constant(6, 6, 1, 0.0).unwrap()).unwrap();
        let mid = jnd_map(&Image::constant(6, 6, 1, 127.0 / 255.0).unwrap()).unwrap();
        assert!(dark.get(3, 3) > mid.get(3, 3));
    }

    #[test]
    fn broadcast_and_render() {
        let j = JndMap::new(2, 2, vec![0.1, 0.2, 0.3, 2.0]).unwrap();
        let b = j.broadcast(3);
        assert_eq!(b.shape(), &[3, 2, 2]);
        assert_eq!(&b.data()[8..], j.data());
        assert_eq!(j.to_image().get(0, 1, 1), 1.0);
        assert!(JndMap::new(1, 1, vec![-0.1]).is_err());
    }
}
