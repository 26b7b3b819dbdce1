//! Images, overlap masks, file I/O and overlap-masked quality metrics.

use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::NdArray;

/// PSNR reported for a zero mean-squared error.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Planar (channel-major) image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Image(format!("unsupported channel count {channels}")));
        }
        if data.len() != height * width * channels {
            return shape_err(
                "Image::new",
                format!("{channels}x{height}x{width} needs {} values, got {}", height * width * channels, data.len()),
            );
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Image(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image from a `[c, h, w]` array, clamping into `[0, 1]`.
    pub fn from_array(a: &NdArray) -> Result<Self> {
        match *a.shape() {
            [c, h, w] => Self::new(h, w, c, a.data().iter().map(|v| v.clamp(0.0, 1.0)).collect()),
            _ => shape_err("Image::from_array", format!("expected [c,h,w], got {:?}", a.shape())),
        }
    }

    pub fn to_array(&self) -> NdArray {
        NdArray::new(&[self.channels, self.height, self.width], self.data.clone())
            .expect("image extents are consistent")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.height * self.width..][..self.height * self.width]
    }

    /// Copies a `height x width` window starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Invalid(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        Self::from_fn(height, width, self.channels, |c, y, x| self.get(c, y + top, x + left))
    }

    fn same_extent(&self, other: &Image, op: &'static str) -> Result<()> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels) {
            return shape_err(
                op,
                format!(
                    "{}x{}x{} vs {}x{}x{}",
                    self.channels, self.height, self.width, other.channels, other.height, other.width
                ),
            );
        }
        Ok(())
    }
}

/// Binary overlap mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return shape_err("Mask::new", format!("{height}x{width} vs {} values", data.len()));
        }
        if data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid("mask values must be exactly 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(if f(y, x) { 1.0 } else { 0.0 });
            }
        }
        Self { height, width, data }
    }

    /// Thresholds a coverage map: values `>= threshold` become 1.
    pub fn threshold(height: usize, width: usize, coverage: &[f64], threshold: f64) -> Result<Self> {
        if coverage.len() != height * width {
            return shape_err("Mask::threshold", format!("{height}x{width} vs {}", coverage.len()));
        }
        Ok(Self {
            height,
            width,
            data: coverage.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect(),
        })
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

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1.0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1.0).count()
    }

    pub fn to_image(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.clone(),
        }
    }

    fn check_against(&self, img: &Image, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (img.height, img.width) {
            return shape_err(
                op,
                format!("mask {}x{} vs image {}x{}", self.height, self.width, img.height, img.width),
            );
        }
        if self.count() == 0 {
            return Err(Error::Empty(op));
        }
        Ok(())
    }
}

/// Loads a PNG, binary PPM (P6) or binary PGM (P5) file.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let format = image::guess_format(&bytes)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Pnm) {
        return Err(Error::Image(format!("{}: unsupported format {format:?}", path.display())));
    }
    let dynamic = image::load_from_memory_with_format(&bytes, format)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let (w, h) = (dynamic.width() as usize, dynamic.height() as usize);
    if dynamic.color().has_color() {
        let rgb = dynamic.to_rgb8();
        Image::from_fn(h, w, 3, |c, y, x| rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    } else {
        let luma = dynamic.to_luma8();
        Image::from_fn(h, w, 1, |_, y, x| luma.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
    }
}

/// Saves with 8-bit quantization. The format follows the extension:
/// `.png`, `.ppm` (3 channels) or `.pgm` (1 channel).
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (w, h) = (img.width as u32, img.height as u32);
    let mut interleaved = Vec::with_capacity(img.data.len());
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                interleaved.push(quant(img.get(c, y, x)));
            }
        }
    }
    let color = if img.channels == 3 {
        image::ExtendedColorType::Rgb8
    } else {
        image::ExtendedColorType::L8
    };
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let res = match ext.as_str() {
        "png" => image::ImageEncoder::write_image(
            image::codecs::png::PngEncoder::new(file),
            &interleaved,
            w,
            h,
            color,
        ),
        "ppm" | "pgm" => {
            use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
            let want = if ext == "ppm" { 3 } else { 1 };
            if img.channels != want {
                return Err(Error::Image(format!(
                    "{}: .{ext} needs {want} channel(s), image has {}",
                    path.display(),
                    img.channels
                )));
            }
            let subtype = if ext == "ppm" {
                PnmSubtype::Pixmap(SampleEncoding::Binary)
            } else {
                PnmSubtype::Graymap(SampleEncoding::Binary)
            };
            image::ImageEncoder::write_image(
                PnmEncoder::new(file).with_subtype(subtype),
                &interleaved,
                w,
                h,
                color,
            )
        }
        _ => return Err(Error::Image(format!("{}: unsupported extension", path.display()))),
    };
    res.map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Rec. 601 luma; single-channel images pass through.
pub fn to_luma(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let n = img.height * img.width;
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let data = (0..n)
        .map(|i| (0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).clamp(0.0, 1.0))
        .collect();
    Image {
        height: img.height,
        width: img.width,
        channels: 1,
        data,
    }
}

/// PSNR (peak 1.0) from the mean squared error over masked pixels and all
/// channels, capped at [`PSNR_CAP`].
pub fn psnr_masked(a: &Image, b: &Image, mask: &Mask) -> Result<f64> {
    a.same_extent(b, "psnr_masked")?;
    mask.check_against(a, "psnr_masked")?;
    let n = a.height * a.width;
    let mut sse = 0.0;
    for c in 0..a.channels {
        let (pa, pb) = (a.plane(c), b.plane(c));
        for i in 0..n {
            if mask.data[i] == 1.0 {
                sse += (pa[i] - pb[i]).powi(2);
            }
        }
    }
    let mse = sse / (mask.count() * a.channels) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM on luminance over window centres inside the mask.
///
/// Uses an 11x11 Gaussian window (sigma 1.5); near the border the window is
/// truncated to the image and renormalized.
pub fn ssim_masked(a: &Image, b: &Image, mask: &Mask) -> Result<f64> {
    a.same_extent(b, "ssim_masked")?;
    mask.check_against(a, "ssim_masked")?;
    let (la, lb) = (to_luma(a), to_luma(b));
    let (h, w) = (a.height, a.width);
    let ab: Vec<f64> = la.data.iter().zip(&lb.data).map(|(x, y)| x * y).collect();
    let aa: Vec<f64> = la.data.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = lb.data.iter().map(|x| x * x).collect();
    let blur = GaussianBlur::new(h, w);
    let mu_a = blur.apply(&la.data);
    let mu_b = blur.apply(&lb.data);
    let e_aa = blur.apply(&aa);
    let e_bb = blur.apply(&bb);
    let e_ab = blur.apply(&ab);
    let mut total = 0.0;
    for i in 0..h * w {
        if mask.data[i] != 1.0 {
            continue;
        }
        total += ssim_from_moments(mu_a[i], mu_b[i], e_aa[i], e_bb[i], e_ab[i]);
    }
    Ok(total / mask.count() as f64)
}

pub(crate) fn ssim_from_moments(mu_a: f64, mu_b: f64, e_aa: f64, e_bb: f64, e_ab: f64) -> f64 {
    let var_a = e_aa - mu_a * mu_a;
    let var_b = e_bb - mu_b * mu_b;
    let cov = e_ab - mu_a * mu_b;
    ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
}

/// Unnormalized 1D Gaussian taps for offsets `-5..=5`.
pub(crate) fn ssim_taps() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    k
}

struct GaussianBlur {
    h: usize,
    w: usize,
    taps: [f64; 2 * SSIM_RADIUS + 1],
}

impl GaussianBlur {
    fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            taps: ssim_taps(),
        }
    }

    fn pass(&self, src: &[f64], len: usize, stride: usize, count: usize, step: usize) -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        let r = SSIM_RADIUS as isize;
        for line in 0..count {
            let base = line * step;
            for i in 0..len as isize {
                let (mut acc, mut norm) = (0.0, 0.0);
                for d in -r..=r {
                    let j = i + d;
                    if j < 0 || j >= len as isize {
                        continue;
                    }
                    let t = self.taps[(d + r) as usize];
                    acc += t * src[base + j as usize * stride];
                    norm += t;
                }
                out[base + i as usize * stride] = acc / norm;
            }
        }
        out
    }

    fn apply(&self, src: &[f64]) -> Vec<f64> {
        let horiz = self.pass(src, self.w, 1, self.h, self.w);
        self.pass(&horiz, self.h, self.w, self.w, 1)
    }
}

/// Pixelwise mean of two images.
pub fn average_fusion(a: &Image, b: &Image) -> Result<Image> {
    a.same_extent(b, "average_fusion")?;
    Ok(Image {
        height: a.height,
        width: a.width,
        channels: a.channels,
        data: a.data.iter().zip(&b.data).map(|(x, y)| 0.5 * (x + y)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        Image::from_fn(h, w, c, |c, y, x| ((x + 2 * y + c) % 17) as f64 / 16.0).unwrap()
    }

    #[test]
    fn rejects_out_of_range_and_bad_channels() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.0, 0.0]).is_err());
        assert!(Mask::new(1, 2, vec![0.0, 0.5]).is_err());
    }

    #[test]
    fn luma_weights() {
        let white = Image::constant(1, 1, 3, 1.0).unwrap();
        assert!((to_luma(&white).get(0, 0, 0) - 1.0).abs() < 1e-15);
        let red = Image::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(to_luma(&red).get(0, 0, 0), 0.299);
        let g = ramp(3, 4, 1);
        assert_eq!(to_luma(&g), g);
    }

    #[test]
    fn psnr_cap_and_closed_form() {
        let a = ramp(8, 8, 3);
        let m = Mask::full(8, 8);
        assert_eq!(psnr_masked(&a, &a, &m).unwrap(), PSNR_CAP);
        let z = Image::constant(4, 4, 1, 0.0).unwrap();
        let h = Image::constant(4, 4, 1, 0.5).unwrap();
        let p = psnr_masked(&z, &h, &Mask::full(4, 4)).unwrap();
        assert!((p - 6.020_599_913_279_624).abs() < 1e-9);
    }

    #[test]
    fn psnr_mask_selects_matching_half() {
        let a = ramp(6, 6, 1);
        let b = Image::from_fn(6, 6, 1, |c, y, x| if x < 3 { a.get(c, y, x) } else { 0.0 }).unwrap();
        let left = Mask::from_fn(6, 6, |_, x| x < 3);
        assert_eq!(psnr_masked(&a, &b, &left).unwrap(), PSNR_CAP);
        assert!(psnr_masked(&a, &b, &Mask::full(6, 6)).unwrap() < PSNR_CAP);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let a = ramp(4, 4, 1);
        let m = Mask::from_fn(4, 4, |_, _| false);
        assert!(matches!(psnr_masked(&a, &a, &m), Err(Error::Empty(_))));
        assert!(matches!(ssim_masked(&a, &a, &m), Err(Error::Empty(_))));
    }

    #[test]
    fn ssim_self_is_one_for_any_mask() {
        let a = ramp(16, 12, 3);
        for m in [Mask::full(16, 12), Mask::from_fn(16, 12, |y, x| (x + y) % 3 == 0)] {
            assert_eq!(ssim_masked(&a, &a, &m).unwrap(), 1.0);
        }
    }

    #[test]
    fn ssim_inverted_binary_is_negative() {
        let a = Image::from_fn(16, 16, 1, |_, y, x| ((x / 2 + y / 3) % 2) as f64).unwrap();
        let inv = Image::from_fn(16, 16, 1, |c, y, x| 1.0 - a.get(c, y, x)).unwrap();
        let s = ssim_masked(&a, &inv, &Mask::full(16, 16)).unwrap();
        assert!((-1.0..0.0).contains(&s), "{s}");
    }

    #[test]
    fn fusion_basics() {
        let a = ramp(4, 5, 3);
        assert_eq!(average_fusion(&a, &a).unwrap(), a);
        let z = Image::constant(2, 2, 1, 0.0).unwrap();
        let o = Image::constant(2, 2, 1, 1.0).unwrap();
        assert!(average_fusion(&z, &o).unwrap().data().iter().all(|&v| v == 0.5));
        assert!(average_fusion(&a, &z).is_err());
    }

    #[test]
    fn png_and_pnm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Image::from_fn(4, 4, 3, |c, y, x| (x * 4 + y + c) as f64 / 20.0).unwrap();
        for name in ["g.png", "g.ppm"] {
            let p = dir.path().join(name);
            save_image(&g, &p).unwrap();
            let back = load_image(&p).unwrap();
            assert_eq!(back.channels(), 3);
            let worst = g.data().iter().zip(back.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(worst <= 1.0 / 255.0, "{name}: {worst}");
        }
        let l = to_luma(&g);
        let p = dir.path().join("l.pgm");
        save_image(&l, &p).unwrap();
        assert_eq!(load_image(&p).unwrap().channels(), 1);
        assert!(save_image(&g, dir.path().join("g.pgm")).is_err());
        assert!(save_image(&g, dir.path().join("g.bmp")).is_err());
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_image(dir.path().join("missing.png")).is_err());
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"definitely not an image").unwrap();
        assert!(load_image(&junk).is_err());
    }

    #[test]
    fn hand_written_p6_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        std::fs::write(&p, bytes).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!((img.channels(), img.height(), img.width()), (3, 1, 2));
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(2, 0, 1), 1.0);
    }
}
