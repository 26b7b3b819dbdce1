//! Synthetic training and evaluation pairs: procedural textures, random
//! corner perturbations, an optional smooth local displacement field and
//! brightness jitter.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dlt_solve, remap, GlobalOffsets, Homography};
use crate::imaging::{load_image, save_image, Image};
use crate::tensor::NdArray;

/// Image size the displacement bounds are quoted at.
pub const REFERENCE_SIZE: f64 = 128.0;
/// Peak amplitude of the local displacement field, in pixels at 128px.
pub const FIELD_AMPLITUDE: f64 = 3.0;
/// Half-width of the additive brightness jitter.
pub const JITTER: f64 = 0.05;

const FIELD_ITERS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    /// Largest corner displacement of the bucket at 128px.
    pub fn bound(self) -> f64 {
        match self {
            Difficulty::Easy => 4.0,
            Difficulty::Moderate => 10.0,
            Difficulty::Hard => 20.0,
        }
    }

    /// Bucket of a maximum corner displacement `d` on a `size`-pixel image.
    pub fn classify(d: f64, size: usize) -> Difficulty {
        let s = size as f64 / REFERENCE_SIZE;
        if d <= Difficulty::Easy.bound() * s {
            Difficulty::Easy
        } else if d <= Difficulty::Moderate.bound() * s {
            Difficulty::Moderate
        } else {
            Difficulty::Hard
        }
    }

    fn lower(self) -> Option<Difficulty> {
        match self {
            Difficulty::Easy => None,
            Difficulty::Moderate => Some(Difficulty::Easy),
            Difficulty::Hard => Some(Difficulty::Moderate),
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        })
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Ok(Difficulty::Easy),
            "moderate" => Ok(Difficulty::Moderate),
            "hard" => Ok(Difficulty::Hard),
            _ => Err(Error::Invalid(format!("unknown difficulty {s:?} (easy, moderate, hard)"))),
        }
    }
}

/// How a pair is generated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairOptions {
    pub size: usize,
    pub difficulty: Difficulty,
    /// Corner bound in pixels at 128px; defaults to the difficulty bound.
    pub max_offset: Option<f64>,
    /// All four corners move together.
    pub translation_only: bool,
    pub local_field: bool,
    pub jitter: bool,
}

impl PairOptions {
    pub fn new(size: usize, difficulty: Difficulty) -> Self {
        Self {
            size,
            difficulty,
            max_offset: None,
            translation_only: false,
            local_field: true,
            jitter: true,
        }
    }

    fn bound_px(&self) -> f64 {
        self.max_offset.unwrap_or(self.difficulty.bound()) * self.size as f64 / REFERENCE_SIZE
    }

    /// Source border needed around the crop.
    pub fn margin(&self) -> usize {
        let field = if self.local_field { FIELD_AMPLITUDE * self.size as f64 / REFERENCE_SIZE } else { 0.0 };
        (self.bound_px() * 1.5 + field).ceil() as usize + 2
    }
}

/// A reference/target pair with its generating alignment.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub reference: Image,
    pub target: Image,
    /// Displacement of each reference corner into the target frame.
    pub offsets: GlobalOffsets,
    /// `[h, w, 2]` target coordinates of every reference pixel, when known.
    pub flow: Option<NdArray>,
    pub difficulty: Difficulty,
}

impl SynthPair {
    /// Identity-to-target homography defined by [`SynthPair::offsets`].
    pub fn homography(&self) -> Result<Homography> {
        dlt_solve(&self.offsets, self.reference.height(), self.reference.width())
    }
}

struct Grating {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: [f64; 3],
}

struct Blob {
    x: f64,
    y: f64,
    inv_two_sigma2: f64,
    amp: [f64; 3],
}

/// Smooth random texture: oriented low-frequency gratings plus Gaussian
/// blobs, values in `[0.1, 0.9]`.
pub fn procedural_texture<R: Rng>(rng: &mut R, height: usize, width: usize, channels: usize) -> Result<Image> {
    let gratings: Vec<Grating> = (0..6)
        .map(|_| {
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let freq = rng.gen_range(0.015..0.07) * std::f64::consts::TAU;
            Grating {
                kx: freq * theta.cos(),
                ky: freq * theta.sin(),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                amp: [0; 3].map(|_| rng.gen_range(0.02..0.08)),
            }
        })
        .collect();
    let blobs: Vec<Blob> = (0..(height * width / 400).max(4))
        .map(|_| {
            let sigma: f64 = rng.gen_range(2.5..7.0);
            Blob {
                x: rng.gen_range(0.0..width as f64),
                y: rng.gen_range(0.0..height as f64),
                inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
                amp: [0; 3].map(|_| rng.gen_range(-0.25..0.25)),
            }
        })
        .collect();
    let mut raw = vec![0.0; channels * height * width];
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f64, y as f64);
            let mut v = [0.5; 3];
            for g in &gratings {
                let s = (g.kx * xf + g.ky * yf + g.phase).sin();
                for c in 0..3 {
                    v[c] += g.amp[c] * s;
                }
            }
            for b in &blobs {
                let d2 = (xf - b.x).powi(2) + (yf - b.y).powi(2);
                if d2 * b.inv_two_sigma2 < 12.0 {
                    let e = (-d2 * b.inv_two_sigma2).exp();
                    for c in 0..3 {
                        v[c] += b.amp[c] * e;
                    }
                }
            }
            for c in 0..channels {
                raw[(c * height + y) * width + x] = v[c];
            }
        }
    }
    // Soft squash into [0.1, 0.9] keeps brightness jitter away from clipping.
    Image::new(height, width, channels, raw.into_iter().map(|v| 0.5 + 0.4 * (2.0 * (v - 0.5)).tanh()).collect())
}

/// Smooth displacement field `phi(q)` from two sinusoids per axis.
struct Field {
    terms: Vec<[f64; 4]>,
}

impl Field {
    fn random<R: Rng>(rng: &mut R, size: usize) -> Self {
        let amp = FIELD_AMPLITUDE * size as f64 / REFERENCE_SIZE / 2.0;
        // Wavelengths of at least half the image keep the field's Jacobian small.
        let terms = (0..4)
            .map(|_| {
                let k = std::f64::consts::TAU / (size as f64 * rng.gen_range(0.5..1.5));
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                [amp * rng.gen_range(0.5..1.0), k * theta.cos(), k * theta.sin(), rng.gen_range(0.0..6.3)]
            })
            .collect();
        Self { terms }
    }

    fn at(&self, x: f64, y: f64) -> [f64; 2] {
        let s = |t: &[f64; 4]| t[0] * (t[1] * x + t[2] * y + t[3]).sin();
        [s(&self.terms[0]) + s(&self.terms[1]), s(&self.terms[2]) + s(&self.terms[3])]
    }
}

/// Generates one pair from `source`.
///
/// The reference is a random `size x size` crop. The target satisfies
/// `target(q) = source(origin + H^-1(q) + phi(q)) + b`, where `H` moves the
/// crop corners by offsets uniform in the difficulty bound, `phi` is the
/// optional local field and `b` the optional jitter. The recorded flow maps
/// each reference pixel to its target position.
pub fn gen_pair<R: Rng>(rng: &mut R, source: &Image, opts: &PairOptions) -> Result<SynthPair> {
    let size = opts.size;
    let margin = opts.margin();
    let need = size + 2 * margin;
    if source.height() < need || source.width() < need {
        return Err(Error::Invalid(format!(
            "source {}x{} too small: {} difficulty at {size}px needs at least {need}x{need}",
            source.height(),
            source.width(),
            opts.difficulty
        )));
    }
    let offsets = sample_offsets(rng, opts);
    let oy = rng.gen_range(margin..=source.height() - size - margin) as f64;
    let ox = rng.gen_range(margin..=source.width() - size - margin) as f64;
    let field = opts.local_field.then(|| Field::random(rng, size));
    let jitter = if opts.jitter { rng.gen_range(-JITTER..JITTER) } else { 0.0 };

    let h = dlt_solve(&offsets, size, size)?;
    let h_inv = h.inverse()?;
    let mut src_grid = Vec::with_capacity(size * size * 2);
    for y in 0..size {
        for x in 0..size {
            let [px, py] = h_inv.project(x as f64, y as f64)?;
            let [fx, fy] = field.as_ref().map_or([0.0, 0.0], |f| f.at(x as f64, y as f64));
            src_grid.push(ox + px + fx);
            src_grid.push(oy + py + fy);
        }
    }
    let raw = remap(source, &NdArray::new(&[size, size, 2], src_grid)?)?;
    let target = Image::new(size, size, raw.channels(), raw.data().iter().map(|v| (v + jitter).clamp(0.0, 1.0)).collect())?;
    let reference = source.crop(oy as usize, ox as usize, size, size)?;

    // Reference pixel p lands at q with H^-1(q) + phi(q) = p, i.e. the fixed
    // point of q = H(p - phi(q)).
    let mut flow = Vec::with_capacity(size * size * 2);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let mut q = h.project(xf, yf)?;
            if let Some(f) = &field {
                for _ in 0..FIELD_ITERS {
                    let [dx, dy] = f.at(q[0], q[1]);
                    q = h.project(xf - dx, yf - dy)?;
                }
            }
            flow.extend_from_slice(&q);
        }
    }
    Ok(SynthPair {
        reference,
        target,
        offsets,
        flow: Some(NdArray::new(&[size, size, 2], flow)?),
        difficulty: Difficulty::classify(offsets.max_abs(), size),
    })
}

/// Corner offsets in the difficulty's bound, resampled until their maximum
/// exceeds the next easier bucket so the label matches the request.
fn sample_offsets<R: Rng>(rng: &mut R, opts: &PairOptions) -> GlobalOffsets {
    let d = opts.bound_px();
    let floor = match (opts.max_offset, opts.difficulty.lower()) {
        (None, Some(l)) => l.bound() * opts.size as f64 / REFERENCE_SIZE,
        _ => -1.0,
    };
    loop {
        let o = if d == 0.0 {
            GlobalOffsets([[0.0; 2]; 4])
        } else if opts.translation_only {
            GlobalOffsets::translation(rng.gen_range(-d..=d), rng.gen_range(-d..=d))
        } else {
            GlobalOffsets([0; 4].map(|_| [rng.gen_range(-d..=d), rng.gen_range(-d..=d)]))
        };
        if o.max_abs() > floor {
            return o;
        }
    }
}

/// `count` pairs from procedural sources, one fresh texture per pair.
pub fn procedural_pairs<R: Rng>(rng: &mut R, count: usize, channels: usize, opts: &PairOptions) -> Result<Vec<SynthPair>> {
    let side = opts.size + 2 * opts.margin();
    (0..count)
        .map(|_| {
            let src = procedural_texture(rng, side, side, channels)?;
            gen_pair(rng, &src, opts)
        })
        .collect()
}

const PAIRS_FILE: &str = "pairs.csv";

fn pair_paths(dir: &Path, id: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    (dir.join(format!("{id:05}_ref.png")), dir.join(format!("{id:05}_tar.png")))
}

/// Writes `pairs` as PNG images plus a `pairs.csv` index of ids,
/// difficulties and corner offsets.
pub fn save_dataset(dir: impl AsRef<Path>, pairs: &[SynthPair]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut index = String::from("id,difficulty,dx0,dy0,dx1,dy1,dx2,dy2,dx3,dy3\n");
    for (id, p) in pairs.iter().enumerate() {
        let (r, t) = pair_paths(dir, id);
        save_image(&p.reference, r)?;
        save_image(&p.target, t)?;
        index.push_str(&format!("{id},{}", p.difficulty));
        for [x, y] in p.offsets.0 {
            index.push_str(&format!(",{x},{y}"));
        }
        index.push('\n');
    }
    std::fs::write(dir.join(PAIRS_FILE), index)?;
    Ok(())
}

/// Reads a directory written by [`save_dataset`]. Flows are not stored.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<SynthPair>> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(dir.join(PAIRS_FILE))?;
    let bad = |line: usize, what: &str| Error::Invalid(format!("{}:{}: {what}", PAIRS_FILE, line + 1));
    let mut pairs = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(bad(ln, "expected 10 fields"));
        }
        let id: usize = fields[0].parse().map_err(|_| bad(ln, "bad id"))?;
        let difficulty: Difficulty = fields[1].parse()?;
        let vals = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad(ln, "bad offset")))
            .collect::<Result<Vec<_>>>()?;
        let offsets = GlobalOffsets([0, 1, 2, 3].map(|k| [vals[2 * k], vals[2 * k + 1]]));
        let (r, t) = pair_paths(dir, id);
        let (reference, target) = (load_image(r)?, load_image(t)?);
        if (reference.height(), reference.width(), reference.channels())
            != (target.height(), target.width(), target.channels())
        {
            return Err(bad(ln, "reference and target extents differ"));
        }
        pairs.push(SynthPair {
            reference,
            target,
            offsets,
            flow: None,
            difficulty,
        });
    }
    if pairs.is_empty() {
        return Err(Error::Empty("load_dataset"));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{psnr_masked, Mask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plain(size: usize, d: f64) -> PairOptions {
        PairOptions {
            max_offset: Some(d),
            local_field: false,
            jitter: false,
            ..PairOptions::new(size, Difficulty::Easy)
        }
    }

    #[test]
    fn zero_displacement_reproduces_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = procedural_texture(&mut rng, 80, 80, 3).unwrap();
        let p = gen_pair(&mut rng, &src, &plain(64, 0.0)).unwrap();
        assert_eq!(p.target, p.reference);
        assert_eq!(p.offsets.max_abs(), 0.0);
        assert_eq!(p.difficulty, Difficulty::Easy);
    }

    #[test]
    fn translation_flow_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = procedural_texture(&mut rng, 96, 96, 1).unwrap();
        let opts = PairOptions {
            translation_only: true,
            ..plain(64, 6.0)
        };
        let p = gen_pair(&mut rng, &src, &opts).unwrap();
        let [dx, dy] = p.offsets.0[0];
        assert!(p.offsets.0.iter().all(|o| *o == [dx, dy]));
        let flow = p.flow.unwrap();
        for (i, q) in flow.data().chunks(2).enumerate() {
            let (x, y) = ((i % 64) as f64, (i / 64) as f64);
            assert!((q[0] - x - dx).abs() < 1e-9 && (q[1] - y - dy).abs() < 1e-9);
        }
    }

    /// Warping the target back through the recorded flow must recover the
    /// reference up to interpolation error.
    #[test]
    fn round_trip_through_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for difficulty in Difficulty::ALL {
            for field in [false, true] {
                let opts = PairOptions {
                    local_field: field,
                    jitter: false,
                    ..PairOptions::new(128, difficulty)
                };
                let p = procedural_pairs(&mut rng, 1, 3, &opts).unwrap().remove(0);
                assert_eq!(p.difficulty, difficulty);
                let flow = p.flow.as_ref().unwrap();
                let back = remap(&p.target, flow).unwrap();
                let inside = Mask::from_fn(128, 128, |y, x| {
                    let q = &flow.data()[2 * (y * 128 + x)..];
                    (0.0..=127.0).contains(&q[0]) && (0.0..=127.0).contains(&q[1])
                });
                let psnr = psnr_masked(&back, &p.reference, &inside).unwrap();
                assert!(psnr > 35.0, "{difficulty} field={field}: {psnr}");
            }
        }
    }

    #[test]
    fn jitter_and_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let opts = PairOptions {
            local_field: false,
            ..PairOptions::new(64, Difficulty::Moderate)
        };
        for p in procedural_pairs(&mut rng, 5, 1, &opts).unwrap() {
            let m = p.offsets.max_abs();
            assert!(m > 2.0 && m <= 5.0, "{m}");
            assert_eq!(p.difficulty, Difficulty::Moderate);
        }
        assert_eq!(Difficulty::classify(4.0, 128), Difficulty::Easy);
        assert_eq!(Difficulty::classify(4.01, 128), Difficulty::Moderate);
        assert_eq!(Difficulty::classify(10.5, 128), Difficulty::Hard);
        assert_eq!("Hard".parse::<Difficulty>().unwrap(), Difficulty::Hard);
        assert!("medium".parse::<Difficulty>().is_err());
    }

    #[test]
    fn small_source_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = procedural_texture(&mut rng, 64, 64, 1).unwrap();
        assert!(gen_pair(&mut rng, &src, &PairOptions::new(64, Difficulty::Easy)).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pairs = procedural_pairs(&mut rng, 3, 3, &PairOptions::new(32, Difficulty::Hard)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &pairs).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in pairs.iter().zip(&back) {
            assert_eq!(a.offsets, b.offsets);
            assert_eq!(a.difficulty, b.difficulty);
            let err = a.target.data().iter().zip(b.target.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            assert!(err <= 0.5 / 255.0 + 1e-12);
        }
    }
}
