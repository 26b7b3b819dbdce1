//! The alignment network: shared feature extractor, global homography
//! stage, local mesh stage with cross-scale regression, and mesh assembly.

use crate::correlation::{fsc_regress, FscHead, HeadSpec, HeadVariant};
use crate::cross_scale::{build_pyramid, combine_local, cross_scale_offsets, PairHeads, MAX_LEVELS};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{
    apply_homography_var, dlt_solve_var, image_corners, overlap_mask_from_array, regular_mesh, warp_var, Homography, Mesh,
};
use crate::imaging::{Image, Mask};
use crate::nn::{Bound, Conv2d, Params};
use crate::tensor::{NdArray, Tape, Var};

/// Local offsets are predicted in units of `RANGE * cell size`.
pub const LOCAL_RANGE: f64 = 2.0;

/// Smallest standard deviation used when standardizing an input image.
const STD_FLOOR: f64 = 1e-2;

const MIN_DENOMINATOR: f64 = 1e-6;

/// Architecture and geometry settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    /// Number of pooling steps in the cross-scale pyramids.
    pub levels: usize,
    pub c_f: usize,
    pub c_c: usize,
    pub c_r: usize,
    pub stride_f: usize,
    pub stride_c: usize,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            channels: 3,
            rows: 13,
            cols: 13,
            levels: 2,
            c_f: 64,
            c_c: 128,
            c_r: 64,
            stride_f: 4,
            stride_c: 16,
            hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.stride_f.is_power_of_two() || !self.stride_c.is_power_of_two() || self.stride_c <= self.stride_f {
            return bad(format!(
                "strides must be powers of two with coarse > fine, got {} / {}",
                self.stride_f, self.stride_c
            ));
        }
        if self.height % self.stride_c != 0 || self.width % self.stride_c != 0 {
            return bad(format!(
                "image {}x{} not divisible by coarse stride {}",
                self.height, self.width, self.stride_c
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.rows < 2 || self.cols < 2 {
            return bad(format!("mesh must be at least 2x2, got {}x{}", self.rows, self.cols));
        }
        if self.levels > MAX_LEVELS {
            return bad(format!("levels must be at most {MAX_LEVELS}, got {}", self.levels));
        }
        let (hf, wf) = self.fine_extent();
        if hf < 1 << self.levels || wf < 1 << self.levels {
            return bad(format!("fine map {hf}x{wf} too small for {} pooling steps", self.levels));
        }
        if [self.c_f, self.c_c, self.c_r, self.hidden].contains(&0) {
            return bad("channel widths must be positive".into());
        }
        Ok(())
    }

    pub fn fine_extent(&self) -> (usize, usize) {
        (self.height / self.stride_f, self.width / self.stride_f)
    }

    pub fn coarse_extent(&self) -> (usize, usize) {
        (self.height / self.stride_c, self.width / self.stride_c)
    }

    pub fn cell_size(&self) -> (f64, f64) {
        (
            (self.width - 1) as f64 / (self.cols - 1) as f64,
            (self.height - 1) as f64 / (self.rows - 1) as f64,
        )
    }
}

/// Shared conv stack producing fine and coarse feature maps.
pub struct Extractor {
    fine: Vec<Conv2d>,
    coarse: Vec<Conv2d>,
}

impl Extractor {
    fn register(p: &mut Params, seed: u64, cfg: &ModelConfig) -> Result<Self> {
        let mut fine = Vec::new();
        let mut c_in = cfg.channels;
        for i in 0..cfg.stride_f.trailing_zeros() {
            fine.push(Conv2d::register(p, seed, &format!("ext.fine{i}"), c_in, cfg.c_f, 3, 1, 1)?);
            c_in = cfg.c_f;
        }
        fine.push(Conv2d::register(p, seed, "ext.fine_out", c_in, cfg.c_f, 3, 1, 1)?);
        let mut coarse = Vec::new();
        c_in = cfg.c_f;
        for i in 0..(cfg.stride_c / cfg.stride_f).trailing_zeros() {
            coarse.push(Conv2d::register(p, seed, &format!("ext.coarse{i}"), c_in, cfg.c_c, 3, 1, 1)?);
            c_in = cfg.c_c;
        }
        coarse.push(Conv2d::register(p, seed, "ext.coarse_out", c_in, cfg.c_c, 3, 1, 1)?);
        Ok(Self { fine, coarse })
    }

    /// Every layer but the last is conv, relu, 2x2 max pool; the last conv
    /// output is returned as is. Pooling rather than strided convolution
    /// keeps sub-cell shifts visible in the features.
    fn run(p: &Bound, layers: &[Conv2d], x: &Var) -> Result<Var> {
        let mut x = x.clone();
        for (i, conv) in layers.iter().enumerate() {
            x = conv.forward(p, &x)?;
            if i + 1 < layers.len() {
                x = x.relu()?.maxpool2d()?;
            }
        }
        Ok(x)
    }

    /// Inputs are standardized per image (statistics held constant) before
    /// the first convolution.
    pub fn forward(&self, p: &Bound, img: &Var) -> Result<(Var, Var)> {
        let v = img.value();
        let n = v.len().max(1) as f64;
        let mean = v.sum() / n;
        let var = v.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let x = img.add_scalar(-mean)?.mul_scalar(1.0 / var.sqrt().max(STD_FLOOR))?;
        let fine = Self::run(p, &self.fine, &x)?;
        let coarse = Self::run(p, &self.coarse, &fine.relu()?)?;
        Ok((fine, coarse))
    }
}

/// Everything produced by one forward pass.
pub struct ForwardOutput {
    /// Corner offsets `[4, 2]` in pixels.
    pub o_g: Var,
    /// Homography `[3, 3]` used for both stages.
    pub h: Var,
    /// Set when the predicted corners were degenerate and the identity was used.
    pub degenerate: bool,
    pub o_intra: Var,
    pub o_cross: Var,
    pub o_l: Var,
    /// Homography-stage mesh `H(M)`.
    pub mesh_h: Var,
    /// Final mesh `H(M) + O_l`.
    pub mesh: Var,
    pub warped_h: Var,
    pub mask_h: Mask,
    pub warped: Var,
    pub mask: Mask,
}

/// Plain-valued result of aligning one pair.
#[derive(Clone, Debug)]
pub struct Alignment {
    pub homography: Homography,
    pub mesh: Mesh,
    pub warped: Image,
    pub mask: Mask,
    pub degenerate: bool,
}

pub struct AlignModel {
    config: ModelConfig,
    params: Params,
    extractor: Extractor,
    global: FscHead,
    intra: FscHead,
    cross: PairHeads,
    regular: NdArray,
}

impl AlignModel {
    /// Builds a model with freshly initialized parameters. Every head's final
    /// layer starts at zero, so the untrained model is the identity alignment.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let extractor = Extractor::register(&mut params, seed, &config)?;
        let (hc, wc) = config.coarse_extent();
        let (hf, wf) = config.fine_extent();
        let spec = |h: usize, w: usize, out: usize| HeadSpec {
            variant: HeadVariant::Fsc,
            h1: h,
            w1: w,
            h2: h,
            w2: w,
            c_r: config.c_r,
            hidden: config.hidden,
            output_dim: out,
        };
        let local_dim = 2 * config.rows * config.cols;
        let global = FscHead::register(&mut params, seed, "global", spec(hc, wc, 8))?;
        let intra = FscHead::register(&mut params, seed, "local.intra", spec(hf, wf, local_dim))?;
        let cross = PairHeads::register(&mut params, seed, "local.cross", config.levels, hf, wf, spec(hf, wf, local_dim))?;
        let regular = regular_mesh(config.rows, config.cols, config.height, config.width)?.into_array();
        Ok(Self {
            config,
            params,
            extractor,
            global,
            intra,
            cross,
            regular,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn regular_mesh(&self) -> &NdArray {
        &self.regular
    }

    pub fn extractor(&self) -> &Extractor {
        &self.extractor
    }

    pub fn extract(&self, p: &Bound, img: &Var) -> Result<(Var, Var)> {
        let s = img.shape();
        let c = &self.config;
        if s != [c.channels, c.height, c.width] {
            return shape_err(
                "extract",
                format!("model expects [{}, {}, {}], got {s:?}", c.channels, c.height, c.width),
            );
        }
        self.extractor.forward(p, img)
    }

    /// Corner offsets in pixels and the homography they define. Degenerate
    /// corner sets, or ones whose homography sends part of the image to
    /// infinity, fall back to the identity (flagged in the result).
    pub fn global_stage(&self, p: &Bound, coarse_ref: &Var, coarse_tar: &Var) -> Result<(Var, Var, bool)> {
        if coarse_ref.shape() != coarse_tar.shape() {
            return shape_err("global_stage", format!("{:?} vs {:?}", coarse_ref.shape(), coarse_tar.shape()));
        }
        let tape = coarse_ref.tape();
        let raw = fsc_regress(p, coarse_ref, coarse_tar, &self.global)?.reshape(&[4, 2])?;
        let (w, h) = (self.config.width as f64, self.config.height as f64);
        let scale = tape.constant(NdArray::from_fn(&[4, 2], |i| if i % 2 == 0 { w } else { h }));
        let o_g = raw.mul(&scale)?;
        let identity = || tape.constant(Homography::identity().to_array());
        let hom = match dlt_solve_var(&o_g, self.config.height, self.config.width) {
            Ok(hv) if self.homography_usable(&Homography::from_array(&hv.value())?) => hv,
            Ok(_) | Err(Error::Degenerate(_)) => return Ok((o_g, identity(), true)),
            Err(e) => return Err(e),
        };
        Ok((o_g, hom, false))
    }

    /// The projective denominator is affine, so positivity at the four
    /// corners covers the whole image rectangle.
    fn homography_usable(&self, h: &Homography) -> bool {
        let m = &h.0;
        h.det().abs() > 1e-12
            && image_corners(self.config.height, self.config.width)
                .iter()
                .all(|[x, y]| m[2][0] * x + m[2][1] * y + m[2][2] > MIN_DENOMINATOR)
    }

    /// Pre-warps the fine target features by `hom` (in feature units) and
    /// regresses intra- and cross-scale offsets, each in pixels.
    pub fn local_stage(&self, p: &Bound, fine_ref: &Var, fine_tar: &Var, hom: &Var) -> Result<(Var, Var, Var)> {
        if fine_ref.shape() != fine_tar.shape() {
            return shape_err("local_stage", format!("{:?} vs {:?}", fine_ref.shape(), fine_tar.shape()));
        }
        let tape = fine_ref.tape();
        let warped_tar = self.prewarp_features(fine_tar, hom)?;
        let c = &self.config;
        let shape = [c.rows, c.cols, 2];
        let (cw, ch) = c.cell_size();
        let scale = tape.constant(NdArray::from_fn(&shape, |i| {
            LOCAL_RANGE * if i % 2 == 0 { cw } else { ch }
        }));
        let intra = fsc_regress(p, fine_ref, &warped_tar, &self.intra)?.reshape(&shape)?.mul(&scale)?;
        let pyr_ref = build_pyramid(fine_ref, c.levels)?;
        let pyr_tar = build_pyramid(&warped_tar, c.levels)?;
        let cross = cross_scale_offsets(p, &pyr_ref, &pyr_tar, &self.cross, c.rows, c.cols)?.mul(&scale)?;
        let o_l = combine_local(&intra, &cross)?;
        Ok((intra, cross, o_l))
    }

    /// Samples `f` at `H(p * s) / s` for every feature position `p`.
    pub fn prewarp_features(&self, f: &Var, hom: &Var) -> Result<Var> {
        let s = f.shape();
        let stride = self.config.stride_f as f64;
        let points = NdArray::from_fn(&[s[1], s[2], 2], |i| {
            let cell = i / 2;
            if i % 2 == 0 {
                (cell % s[2]) as f64 * stride
            } else {
                (cell / s[2]) as f64 * stride
            }
        });
        let grid = apply_homography_var(&points, hom)?.mul_scalar(1.0 / stride)?;
        f.grid_sample(&grid)
    }

    pub fn forward(&self, p: &Bound, img_ref: &Var, img_tar: &Var) -> Result<ForwardOutput> {
        let (fine_ref, coarse_ref) = self.extract(p, img_ref)?;
        let (fine_tar, coarse_tar) = self.extract(p, img_tar)?;
        let (o_g, h, degenerate) = self.global_stage(p, &coarse_ref, &coarse_tar)?;
        let (o_intra, o_cross, o_l) = self.local_stage(p, &fine_ref, &fine_tar, &h)?;
        let mesh_h = apply_homography_var(&self.regular, &h)?;
        let mesh = mesh_h.add(&o_l)?;
        let (height, width) = (self.config.height, self.config.width);
        let warped_h = warp_var(img_tar, &mesh_h)?;
        let mask_h = overlap_mask_from_array(&mesh_h.value(), height, width)?;
        let warped = warp_var(img_tar, &mesh)?;
        let mask = overlap_mask_from_array(&mesh.value(), height, width)?;
        Ok(ForwardOutput {
            o_g,
            h,
            degenerate,
            o_intra,
            o_cross,
            o_l,
            mesh_h,
            mesh,
            warped_h,
            mask_h,
            warped,
            mask,
        })
    }

    /// Aligns `tar` onto `reference` without recording gradients.
    pub fn align(&self, reference: &Image, tar: &Image) -> Result<Alignment> {
        let tape = Tape::new();
        let p = self.params.bind_constant(&tape);
        let out = self.forward(&p, &tape.constant(reference.to_array()), &tape.constant(tar.to_array()))?;
        Ok(Alignment {
            homography: Homography::from_array(&out.h.value())?,
            mesh: Mesh::from_array((*out.mesh.value()).clone())?,
            warped: Image::from_array(&out.warped.value())?,
            mask: out.mask,
            degenerate: out.degenerate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{assemble_final_mesh, GlobalOffsets, LocalOffsets};
    use crate::tensor::fd::relative_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            height: 32,
            width: 32,
            channels: 1,
            rows: 3,
            cols: 3,
            levels: 1,
            c_f: 3,
            c_c: 4,
            c_r: 2,
            stride_f: 4,
            stride_c: 8,
            hidden: 4,
        }
    }

    fn texture(h: usize, w: usize, c: usize, phase: f64) -> Image {
        Image::from_fn(h, w, c, |k, y, x| {
            0.5 + 0.25 * ((x as f64 * 0.37 + phase).sin() * (y as f64 * 0.29 + k as f64).cos())
        })
        .unwrap()
    }

    /// Fills the zero-initialized final head layers with uniform noise.
    fn randomize(m: &mut AlignModel, seed: u64, amp: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = m.params().names().iter().filter(|n| n.ends_with("fc2.w")).cloned().collect();
        for n in names {
            let v = m.params_mut().get_mut(&n).unwrap();
            *v = NdArray::from_fn(v.shape(), |_| rng.gen_range(-amp..amp));
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let c = ModelConfig::default();
        assert_eq!(c.fine_extent(), (32, 32));
        assert_eq!(c.coarse_extent(), (8, 8));
        for bad in [
            ModelConfig { stride_f: 3, ..tiny() },
            ModelConfig { stride_c: 4, ..tiny() },
            ModelConfig { height: 36, ..tiny() },
            ModelConfig { channels: 2, ..tiny() },
            ModelConfig { levels: 5, ..tiny() },
            ModelConfig { levels: 4, ..tiny() },
            ModelConfig { rows: 1, ..tiny() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn extractor_shapes_and_zero_weights() {
        let mut m = AlignModel::new(ModelConfig { height: 128, width: 128, ..tiny() }, 0).unwrap();
        let c = m.config().clone();
        let img = texture(128, 128, 1, 0.0).to_array();
        let t = Tape::new();
        let p = m.params().bind(&t);
        let (f, g) = m.extract(&p, &t.constant(img.clone())).unwrap();
        assert_eq!(f.shape(), vec![c.c_f, 32, 32]);
        assert_eq!(g.shape(), vec![c.c_c, 16, 16]);
        assert!(m.extract(&p, &t.constant(NdArray::zeros(&[1, 64, 64]))).is_err());

        for (name, v) in m.params().names().to_vec().iter().zip(m.params_mut().values_mut()) {
            if name.starts_with("ext.") {
                *v = NdArray::zeros(v.shape());
            }
        }
        let t = Tape::new();
        let p = m.params().bind(&t);
        let (f, g) = m.extract(&p, &t.constant(img)).unwrap();
        assert_eq!(f.value().max_abs(), 0.0);
        assert_eq!(g.value().max_abs(), 0.0);
    }

    #[test]
    fn untrained_model_is_identity() {
        for levels in [0, 1] {
            let m = AlignModel::new(ModelConfig { levels, ..tiny() }, 3).unwrap();
            let (a, b) = (texture(32, 32, 1, 0.0), texture(32, 32, 1, 1.3));
            let t = Tape::new();
            let p = m.params().bind(&t);
            let out = m.forward(&p, &t.constant(a.to_array()), &t.constant(b.to_array())).unwrap();
            assert_eq!(out.o_g.value().max_abs(), 0.0);
            assert_eq!(*out.h.value(), Homography::identity().to_array());
            assert!(!out.degenerate);
            assert_eq!(out.o_l.value().max_abs(), 0.0);
            assert_eq!(*out.mesh.value(), *m.regular_mesh());
            assert_eq!(*out.warped.value(), b.to_array());
            assert_eq!(out.mask, Mask::full(32, 32));
            assert_eq!(out.mask_h, Mask::full(32, 32));
            let al = m.align(&a, &b).unwrap();
            assert_eq!(al.warped, b);
        }
    }

    #[test]
    fn identity_prewarp_is_bitwise() {
        let m = AlignModel::new(tiny(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Tape::new();
        let f = t.constant(NdArray::from_fn(&[3, 8, 8], |_| rng.gen_range(-1.0..1.0)));
        let h = t.constant(Homography::identity().to_array());
        assert_eq!(m.prewarp_features(&f, &h).unwrap().value(), f.value());
    }

    #[test]
    fn no_levels_means_intra_only() {
        let mut m = AlignModel::new(ModelConfig { levels: 0, ..tiny() }, 1).unwrap();
        randomize(&mut m, 5, 0.3);
        let t = Tape::new();
        let p = m.params().bind(&t);
        let (a, b) = (texture(32, 32, 1, 0.0), texture(32, 32, 1, 0.4));
        let out = m.forward(&p, &t.constant(a.to_array()), &t.constant(b.to_array())).unwrap();
        assert_eq!(out.o_cross.value().max_abs(), 0.0);
        assert_eq!(out.o_l.value(), out.o_intra.value());
    }

    #[test]
    fn final_mesh_matches_assembly() {
        let mut m = AlignModel::new(tiny(), 2).unwrap();
        randomize(&mut m, 6, 0.05);
        let (a, b) = (texture(32, 32, 1, 0.0), texture(32, 32, 1, 0.7));
        let t = Tape::new();
        let p = m.params().bind(&t);
        let out = m.forward(&p, &t.constant(a.to_array()), &t.constant(b.to_array())).unwrap();
        assert!(!out.degenerate);
        assert!(out.o_l.value().max_abs() > 0.0);
        let regular = Mesh::from_array(m.regular_mesh().clone()).unwrap();
        let o_g = GlobalOffsets::from_array(&out.o_g.value()).unwrap();
        let o_l = LocalOffsets((*out.o_l.value()).clone());
        let want = assemble_final_mesh(&regular, &o_g, &o_l, 32, 32).unwrap();
        let diff = want.as_array().zip_map(&out.mesh.value(), |x, y| x - y).unwrap().max_abs();
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn degenerate_corners_fall_back_to_identity() {
        let mut m = AlignModel::new(tiny(), 0).unwrap();
        // Bias of the global head's last layer sends every corner to (15, 15).
        let b = m.params_mut().get_mut("global.fc2.b").unwrap();
        *b = NdArray::new(&[8], [15.0, 15.0, -16.0, 15.0, 15.0, -16.0, -16.0, -16.0].iter().map(|v| v / 32.0).collect()).unwrap();
        let (a, t_img) = (texture(32, 32, 1, 0.0), texture(32, 32, 1, 0.1));
        let al = m.align(&a, &t_img).unwrap();
        assert!(al.degenerate);
        assert_eq!(al.homography, Homography::identity());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut m = AlignModel::new(tiny(), 7).unwrap();
        randomize(&mut m, 8, 0.05);
        let (a, b) = (texture(32, 32, 1, 0.0), texture(32, 32, 1, 0.5));
        let x = m.align(&a, &b).unwrap();
        let y = m.align(&a, &b).unwrap();
        assert_eq!(x.mesh, y.mesh);
        assert_eq!(x.warped, y.warped);
    }

    #[test]
    fn pipeline_gradient_wrt_extractor_weight() {
        let mut m = AlignModel::new(tiny(), 9).unwrap();
        randomize(&mut m, 10, 0.05);
        let (a, b) = (texture(32, 32, 1, 0.0).to_array(), texture(32, 32, 1, 0.9).to_array());
        let name = "ext.fine0.w";
        let eval = |m: &AlignModel| -> f64 {
            let t = Tape::new();
            let p = m.params().bind_constant(&t);
            let out = m.forward(&p, &t.constant(a.clone()), &t.constant(b.clone())).unwrap();
            out.warped.mean().unwrap().value().item()
        };
        let t = Tape::new();
        let p = m.params().bind(&t);
        let out = m.forward(&p, &t.constant(a.clone()), &t.constant(b.clone())).unwrap();
        out.warped.mean().unwrap().backward().unwrap();
        let g = p.var(name).unwrap().grad().unwrap();
        let idx = (0..g.len()).max_by(|&i, &j| g.data()[i].abs().total_cmp(&g.data()[j].abs())).unwrap();
        let analytic = g.data()[idx];
        drop(p);
        let step = 1e-5;
        let orig = m.params().get(name).unwrap().data()[idx];
        m.params_mut().get_mut(name).unwrap().data_mut()[idx] = orig + step;
        let plus = eval(&m);
        m.params_mut().get_mut(name).unwrap().data_mut()[idx] = orig - step;
        let minus = eval(&m);
        let numeric = (plus - minus) / (2.0 * step);
        assert!(analytic.abs() > 1e-6, "{analytic}");
        let err = relative_error(&[analytic], &[numeric]);
        assert!(err < 1e-3, "{analytic} vs {numeric}: {err}");
    }
}
