//! 4D feature correlation, the two-reshape regression head and its
//! single-reshape baseline, and an analytic FLOP model.

use crate::error::{shape_err, Error, Result};
use crate::nn::{Bound, Conv2d, Dense, Params};
use crate::tensor::{NdArray, Var};

const NORM_EPS: f64 = 1e-12;
const TRUNK_CONVS: usize = 3;

/// Divides every `[c]` feature vector of a `[c, h, w]` map by its length.
/// Vectors shorter than `1e-12` map to zero.
pub fn l2_normalize(x: &Var) -> Result<Var> {
    let s = x.shape();
    if s.len() != 3 {
        return shape_err("l2_normalize", format!("expected [c,h,w], got {s:?}"));
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let v = x.value();
    let mut inv = vec![0.0; hw];
    for (p, slot) in inv.iter_mut().enumerate() {
        let n = (0..c).map(|k| v.data()[k * hw + p].powi(2)).sum::<f64>().sqrt();
        if n > NORM_EPS {
            *slot = 1.0 / n;
        }
    }
    let out = NdArray::from_fn(&s, |i| v.data()[i] * inv[i % hw]);
    let shape = s.clone();
    x.tape().record(
        "l2_normalize",
        &[x],
        out,
        Box::new(move |g, _, y, _| {
            let (g, y) = (g.data(), y.data());
            let mut d = vec![0.0; g.len()];
            for p in 0..hw {
                if inv[p] == 0.0 {
                    continue;
                }
                let dot: f64 = (0..c).map(|k| y[k * hw + p] * g[k * hw + p]).sum();
                for k in 0..c {
                    let i = k * hw + p;
                    d[i] = (g[i] - y[i] * dot) * inv[p];
                }
            }
            vec![Some(NdArray::new(&shape, d).unwrap())]
        }),
    )
}

/// `T[k, l, i, j] = <f_tar[:, k, l], f_ref[:, i, j]>`, shaped `[h2, w2, h1, w1]`.
pub fn corr4d(f_ref: &Var, f_tar: &Var, normalize: bool) -> Result<Var> {
    let (sr, st) = (f_ref.shape(), f_tar.shape());
    if sr.len() != 3 || st.len() != 3 {
        return shape_err("corr4d", format!("expected [c,h,w] maps, got {sr:?} and {st:?}"));
    }
    if sr[0] != st[0] {
        return shape_err("corr4d", format!("channel mismatch: {} vs {}", sr[0], st[0]));
    }
    let (c, h1, w1, h2, w2) = (sr[0], sr[1], sr[2], st[1], st[2]);
    let (r, t) = if normalize {
        (l2_normalize(f_ref)?, l2_normalize(f_tar)?)
    } else {
        (f_ref.clone(), f_tar.clone())
    };
    let t = t.reshape(&[c, h2 * w2])?.permute(&[1, 0])?;
    let r = r.reshape(&[c, h1 * w1])?;
    t.matmul(&r)?.reshape(&[h2, w2, h1, w1])
}

/// `T1 = [h2*w2, h1, w1]` and `T2 = [h1*w1, h2, w2]` views of a correlation.
pub fn reshape_branches(t: &Var) -> Result<(Var, Var)> {
    let s = t.shape();
    if s.len() != 4 {
        return shape_err("reshape_branches", format!("expected [h2,w2,h1,w1], got {s:?}"));
    }
    let (h2, w2, h1, w1) = (s[0], s[1], s[2], s[3]);
    let t1 = t.reshape(&[h2 * w2, h1, w1])?;
    let t2 = t.permute(&[2, 3, 0, 1])?.reshape(&[h1 * w1, h2, w2])?;
    Ok((t1, t2))
}

/// Which reshapes feed the trunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadVariant {
    /// Both `T1` and `T2`, padded and concatenated.
    Fsc,
    /// `T1` only.
    Cl,
}

/// Input extents and widths of a regression head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadSpec {
    pub variant: HeadVariant,
    /// Reference map extent.
    pub h1: usize,
    pub w1: usize,
    /// Target map extent.
    pub h2: usize,
    pub w2: usize,
    /// Channels after branch compression; also the trunk width.
    pub c_r: usize,
    pub hidden: usize,
    pub output_dim: usize,
}

impl HeadSpec {
    /// Spatial extent entering the trunk.
    pub fn trunk_extent(&self) -> (usize, usize) {
        match self.variant {
            HeadVariant::Fsc => (self.h1.max(self.h2), self.w1.max(self.w2)),
            HeadVariant::Cl => (self.h1, self.w1),
        }
    }

    /// Spatial extent after the stride-2 trunk.
    pub fn trunk_output(&self) -> (usize, usize) {
        let (mut h, mut w) = self.trunk_extent();
        for _ in 0..TRUNK_CONVS {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }
}

struct Branch {
    compress: Conv2d,
    refine: Conv2d,
}

impl Branch {
    fn register(p: &mut Params, seed: u64, name: &str, c_in: usize, c_r: usize) -> Result<Self> {
        Ok(Self {
            compress: Conv2d::register(p, seed, &format!("{name}.compress"), c_in, c_r, 1, 1, 0)?,
            refine: Conv2d::register(p, seed, &format!("{name}.refine"), c_r, c_r, 3, 1, 1)?,
        })
    }

    fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let y = self.compress.forward(p, x)?.relu()?;
        self.refine.forward(p, &y)?.relu()
    }
}

/// Correlation regression head: per-branch compression, stride-2 conv trunk
/// and a two-layer linear stack whose last layer starts at zero.
pub struct FscHead {
    spec: HeadSpec,
    t1: Branch,
    t2: Option<Branch>,
    trunk: Vec<Conv2d>,
    fc1: Dense,
    fc2: Dense,
}

impl FscHead {
    /// Registers the head's parameters under `name.*`.
    pub fn register(params: &mut Params, seed: u64, name: &str, spec: HeadSpec) -> Result<Self> {
        let dims = [spec.h1, spec.w1, spec.h2, spec.w2, spec.c_r, spec.hidden, spec.output_dim];
        if dims.contains(&0) {
            return Err(Error::Invalid(format!("head {name}: all extents must be positive, got {spec:?}")));
        }
        let t1 = Branch::register(params, seed, &format!("{name}.t1"), spec.h2 * spec.w2, spec.c_r)?;
        let t2 = match spec.variant {
            HeadVariant::Fsc => Some(Branch::register(params, seed, &format!("{name}.t2"), spec.h1 * spec.w1, spec.c_r)?),
            HeadVariant::Cl => None,
        };
        let mut c_in = if t2.is_some() { 2 * spec.c_r } else { spec.c_r };
        let mut trunk = Vec::with_capacity(TRUNK_CONVS);
        for i in 0..TRUNK_CONVS {
            trunk.push(Conv2d::register(params, seed, &format!("{name}.trunk{i}"), c_in, spec.c_r, 3, 2, 1)?);
            c_in = spec.c_r;
        }
        let (ho, wo) = spec.trunk_output();
        let fc1 = Dense::register(params, seed, &format!("{name}.fc1"), spec.c_r * ho * wo, spec.hidden, false)?;
        let fc2 = Dense::register(params, seed, &format!("{name}.fc2"), spec.hidden, spec.output_dim, true)?;
        Ok(Self {
            spec,
            t1,
            t2,
            trunk,
            fc1,
            fc2,
        })
    }

    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    /// Regresses `output_dim` values from a reference and a target map.
    pub fn forward(&self, p: &Bound, f_ref: &Var, f_tar: &Var, normalize: bool) -> Result<Var> {
        let (sr, st) = (f_ref.shape(), f_tar.shape());
        let s = &self.spec;
        if sr.len() != 3 || st.len() != 3 || sr[1..] != [s.h1, s.w1] || st[1..] != [s.h2, s.w2] {
            return shape_err(
                "FscHead::forward",
                format!("head expects {}x{} / {}x{}, got {sr:?} / {st:?}", s.h1, s.w1, s.h2, s.w2),
            );
        }
        let t = corr4d(f_ref, f_tar, normalize)?;
        let (t1, t2) = reshape_branches(&t)?;
        let mut x = self.t1.forward(p, &t1)?;
        if let Some(b2) = &self.t2 {
            let y = b2.forward(p, &t2)?;
            let (th, tw) = s.trunk_extent();
            x = Var::pad_concat(&[x, y], th, tw)?;
        }
        for conv in &self.trunk {
            x = conv.forward(p, &x)?.relu()?;
        }
        let hidden = self.fc1.forward(p, &x)?.relu()?;
        self.fc2.forward(p, &hidden)
    }
}

/// Two-reshape regression.
pub fn fsc_regress(p: &Bound, f_ref: &Var, f_tar: &Var, head: &FscHead) -> Result<Var> {
    if head.spec.variant != HeadVariant::Fsc {
        return Err(Error::Invalid("fsc_regress needs a two-branch head".into()));
    }
    head.forward(p, f_ref, f_tar, true)
}

/// Single-reshape (`T1` only) baseline regression.
pub fn cl_regress(p: &Bound, f_ref: &Var, f_tar: &Var, head: &FscHead) -> Result<Var> {
    if head.spec.variant != HeadVariant::Cl {
        return Err(Error::Invalid("cl_regress needs a single-branch head".into()));
    }
    head.forward(p, f_ref, f_tar, true)
}

/// Correlation operators covered by the FLOP model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopVariant {
    Cl,
    Ccl,
    Fsc,
}

impl std::str::FromStr for FlopVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cl" => Ok(Self::Cl),
            "ccl" => Ok(Self::Ccl),
            "fsc" => Ok(Self::Fsc),
            _ => Err(Error::Invalid(format!("unknown variant {s:?} (expected cl, ccl or fsc)"))),
        }
    }
}

/// Sizes entering [`flops_estimate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopDims {
    /// Feature channels.
    pub c: u64,
    pub h1: u64,
    pub w1: u64,
    pub h2: u64,
    pub w2: u64,
    pub c_r: u64,
    pub hidden: u64,
    pub output_dim: u64,
}

/// Kernel size of the contextual correlation's target patches.
pub const CCL_KERNEL: u64 = 3;

fn conv_flops(c_in: u64, c_out: u64, k: u64, h_out: u64, w_out: u64) -> u64 {
    2 * c_in * c_out * k * k * h_out * w_out
}

/// Two-branch cost beyond the correlation: compression of one branch with
/// `c_in` channels on an `h x w` grid.
fn branch_flops(c_in: u64, c_r: u64, h: u64, w: u64) -> u64 {
    conv_flops(c_in, c_r, 1, h, w) + conv_flops(c_r, c_r, 3, h, w)
}

fn trunk_and_fc_flops(c_in: u64, c_r: u64, mut h: u64, mut w: u64, hidden: u64, out: u64) -> u64 {
    let mut total = 0;
    let mut ci = c_in;
    for _ in 0..TRUNK_CONVS {
        h = h.div_ceil(2);
        w = w.div_ceil(2);
        total += conv_flops(ci, c_r, 3, h, w);
        ci = c_r;
    }
    total + 2 * c_r * h * w * hidden + 2 * hidden * out
}

/// Closed-form FLOP count (two per multiply-add) of correlation plus head.
///
/// `corr4d` costs `2 c h1 w1 h2 w2`. The contextual variant instead slides
/// each of the `h2 w2` target `3x3` patches over the reference map, giving
/// `2 h2 w2 c 9 h1 w1`, and feeds the `T1`-shaped result to the same head as
/// the single-branch baseline.
pub fn flops_estimate(variant: FlopVariant, d: &FlopDims) -> u64 {
    let (hw1, hw2) = (d.h1 * d.w1, d.h2 * d.w2);
    let corr = 2 * d.c * hw1 * hw2;
    let t1 = branch_flops(hw2, d.c_r, d.h1, d.w1);
    let cl_tail = trunk_and_fc_flops(d.c_r, d.c_r, d.h1, d.w1, d.hidden, d.output_dim);
    match variant {
        FlopVariant::Cl => corr + t1 + cl_tail,
        FlopVariant::Ccl => corr * CCL_KERNEL * CCL_KERNEL + t1 + cl_tail,
        FlopVariant::Fsc => {
            let t2 = branch_flops(hw1, d.c_r, d.h2, d.w2);
            let (h, w) = (d.h1.max(d.h2), d.w1.max(d.w2));
            corr + t1 + t2 + trunk_and_fc_flops(2 * d.c_r, d.c_r, h, w, d.hidden, d.output_dim)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fd::{check_gradients, FD_STEP};
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdArray {
        NdArray::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn oracle(r: &NdArray, t: &NdArray, normalize: bool) -> Vec<f64> {
        let (c, h1, w1) = (r.shape()[0], r.shape()[1], r.shape()[2]);
        let (h2, w2) = (t.shape()[1], t.shape()[2]);
        let vec_at = |a: &NdArray, h: usize, w: usize, y: usize, x: usize| -> Vec<f64> {
            let v: Vec<f64> = (0..c).map(|k| a.data()[(k * h + y) * w + x]).collect();
            let n = v.iter().map(|e| e * e).sum::<f64>().sqrt();
            if !normalize {
                v
            } else if n > 1e-12 {
                v.iter().map(|e| e / n).collect()
            } else {
                vec![0.0; c]
            }
        };
        let mut out = Vec::new();
        for k in 0..h2 {
            for l in 0..w2 {
                let tv = vec_at(t, h2, w2, k, l);
                for i in 0..h1 {
                    for j in 0..w1 {
                        let rv = vec_at(r, h1, w1, i, j);
                        out.push(tv.iter().zip(&rv).map(|(a, b)| a * b).sum());
                    }
                }
            }
        }
        out
    }

    #[test]
    fn corr4d_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random(&mut rng, &[4, 5, 6]);
        let t = random(&mut rng, &[4, 3, 2]);
        for normalize in [false, true] {
            let tape = Tape::new();
            let c = corr4d(&tape.constant(r.clone()), &tape.constant(t.clone()), normalize).unwrap();
            assert_eq!(c.shape(), vec![3, 2, 5, 6]);
            let want = oracle(&r, &t, normalize);
            for (a, b) in c.value().data().iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn corr4d_unit_vector_and_self_similarity() {
        let tape = Tape::new();
        let mut e = NdArray::zeros(&[3, 2, 2]);
        e.data_mut()[4 + 3] = 1.0;
        let v = tape.constant(e);
        let c = corr4d(&v, &v, false).unwrap().value();
        assert_eq!(c.data().iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(c.data().iter().filter(|&&x| x == 0.0).count(), 15);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = tape.constant(random(&mut rng, &[5, 3, 4]));
        let c = corr4d(&f, &f, true).unwrap().value();
        for i in 0..3 {
            for j in 0..4 {
                let d = c.data()[((i * 4 + j) * 3 + i) * 4 + j];
                assert!((d - 1.0).abs() < 1e-12);
            }
        }
        assert!(c.data().iter().all(|v| v.abs() <= 1.0 + 1e-9));
        let bad = tape.constant(NdArray::zeros(&[4, 3, 4]));
        assert!(corr4d(&f, &bad, true).is_err());
    }

    #[test]
    fn branches_are_index_remappings() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let t = tape.constant(random(&mut rng, &[2, 3, 4, 5]));
        let (t1, t2) = reshape_branches(&t).unwrap();
        assert_eq!(t1.shape(), vec![6, 4, 5]);
        assert_eq!(t2.shape(), vec![20, 2, 3]);
        let tv = t.value();
        let (a, b) = (t1.value(), t2.value());
        for k in 0..2 {
            for l in 0..3 {
                for i in 0..4 {
                    for j in 0..5 {
                        let v = tv.data()[((k * 3 + l) * 4 + i) * 5 + j];
                        assert_eq!(a.data()[((k * 3 + l) * 4 + i) * 5 + j], v);
                        assert_eq!(b.data()[((i * 5 + j) * 2 + k) * 3 + l], v);
                    }
                }
            }
        }
        let sorted = |x: &NdArray| {
            let mut v = x.data().to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        assert_eq!(sorted(&a), sorted(&tv));
        assert_eq!(sorted(&b), sorted(&tv));
        let back = (*b).clone().reshape(&[4, 5, 2, 3]).unwrap().permute(&[2, 3, 0, 1]).unwrap();
        assert_eq!(back, *tv);
    }

    fn spec(variant: HeadVariant, out: usize) -> HeadSpec {
        HeadSpec {
            variant,
            h1: 4,
            w1: 4,
            h2: 3,
            w2: 2,
            c_r: 3,
            hidden: 5,
            output_dim: out,
        }
    }

    #[test]
    fn zero_final_layer_gives_zero_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (variant, out) in [(HeadVariant::Fsc, 8), (HeadVariant::Cl, 2 * 13 * 13)] {
            let mut p = Params::new();
            let head = FscHead::register(&mut p, 0, "h", spec(variant, out)).unwrap();
            let tape = Tape::new();
            let b = p.bind(&tape);
            let r = tape.constant(random(&mut rng, &[3, 4, 4]));
            let t = tape.constant(random(&mut rng, &[3, 3, 2]));
            let y = head.forward(&b, &r, &t, true).unwrap();
            assert_eq!(y.shape(), vec![out]);
            assert_eq!(y.value().max_abs(), 0.0);
        }
    }

    #[test]
    fn variant_checks_and_shared_t1() {
        let mut p = Params::new();
        let fsc = FscHead::register(&mut p, 0, "f", spec(HeadVariant::Fsc, 8)).unwrap();
        let cl = FscHead::register(&mut p, 0, "c", spec(HeadVariant::Cl, 8)).unwrap();
        assert!(p.names().iter().any(|n| n.starts_with("f.t2")));
        assert!(!p.names().iter().any(|n| n.starts_with("c.t2")));
        let tape = Tape::new();
        let b = p.bind(&tape);
        let r = tape.constant(NdArray::ones(&[3, 4, 4]));
        let t = tape.constant(NdArray::ones(&[3, 3, 2]));
        assert!(fsc_regress(&b, &r, &t, &cl).is_err());
        assert!(cl_regress(&b, &r, &t, &fsc).is_err());
        assert!(fsc_regress(&b, &t, &r, &fsc).is_err());
        assert!(cl_regress(&b, &r, &t, &cl).is_ok());
    }

    #[test]
    fn head_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = Params::new();
        let head = FscHead::register(&mut p, 3, "h", spec(HeadVariant::Fsc, 8)).unwrap();
        for v in p.values_mut() {
            if v.max_abs() == 0.0 {
                *v = NdArray::from_fn(v.shape(), |_| rng.gen_range(-0.5..0.5));
            }
        }
        let r = random(&mut rng, &[3, 4, 4]);
        let t = random(&mut rng, &[3, 3, 2]);
        let run = || {
            let tape = Tape::new();
            let b = p.bind(&tape);
            let y = head.forward(&b, &tape.constant(r.clone()), &tape.constant(t.clone()), true).unwrap();
            (*y.value()).clone()
        };
        let first = run();
        assert!(first.max_abs() > 0.0);
        assert_eq!(first, run());
    }

    #[test]
    fn corr_and_head_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = random(&mut rng, &[3, 4, 4]);
        let t = random(&mut rng, &[3, 4, 4]);
        for normalize in [false, true] {
            let err = check_gradients(&[r.clone(), t.clone()], &[true, true], 6, FD_STEP, |_, v| {
                corr4d(&v[0], &v[1], normalize)
            })
            .unwrap();
            assert!(err < 1e-6, "{err}");
        }

        let mut p = Params::new();
        let s = HeadSpec {
            h2: 4,
            w2: 4,
            ..spec(HeadVariant::Fsc, 8)
        };
        let head = FscHead::register(&mut p, 1, "h", s).unwrap();
        let fc2 = p.get_mut("h.fc2.w").unwrap();
        *fc2 = NdArray::from_fn(fc2.shape(), |_| rng.gen_range(-0.5..0.5));
        let err = check_gradients(&[r, t], &[true, true], 7, FD_STEP, |tape, v| {
            let b = p.bind(tape);
            fsc_regress(&b, &v[0], &v[1], &head)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn flop_formula_examples() {
        let d = FlopDims {
            c: 64,
            h1: 32,
            w1: 32,
            h2: 32,
            w2: 32,
            c_r: 0,
            hidden: 0,
            output_dim: 0,
        };
        assert_eq!(flops_estimate(FlopVariant::Cl, &d), 134_217_728);
        assert_eq!("FSC".parse::<FlopVariant>().unwrap(), FlopVariant::Fsc);
        assert!("cv".parse::<FlopVariant>().is_err());
    }
}
