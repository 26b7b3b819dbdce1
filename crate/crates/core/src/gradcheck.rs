//! Registry of finite-difference gradient checks over every differentiable
//! op, each run on randomized small shapes for a range of seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::correlation::{corr4d, fsc_regress, FscHead, HeadSpec, HeadVariant};
use crate::error::{Error, Result};
use crate::geometry::{apply_homography_var, dlt_solve_var, mesh_to_flow_var, regular_mesh, warp_var};
use crate::imaging::Mask;
use crate::jnd::JndMap;
use crate::losses::{l1_overlap, l_jnd, l_shape};
use crate::nn::Params;
use crate::tensor::fd::{check_gradients, FD_STEP};
use crate::tensor::{NdArray, Var};

/// Relative-error bound for single ops.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Relative-error bound for chains through bilinear warping.
pub const WARP_TOLERANCE: f64 = 1e-3;
pub const DEFAULT_SEEDS: u64 = 10;

pub struct Check {
    pub name: &'static str,
    pub tolerance: f64,
    run: fn(u64) -> Result<f64>,
}

impl Check {
    /// Worst relative error for one seed.
    pub fn run(&self, seed: u64) -> Result<f64> {
        (self.run)(seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub tolerance: f64,
    pub seeds: u64,
    pub worst: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0x6772_6164)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> NdArray {
    NdArray::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn check(inputs: &[NdArray], seed: u64, f: impl Fn(&[Var]) -> Result<Var>) -> Result<f64> {
    let wrt = vec![true; inputs.len()];
    check_gradients(inputs, &wrt, seed, FD_STEP, |_, v| f(v))
}

fn elementwise(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let shape = [r.gen_range(1..4), r.gen_range(2..6)];
    let (a, b) = (uniform(&mut r, &shape, -1.0, 1.0), uniform(&mut r, &shape, -1.0, 1.0));
    let (s, k) = (r.gen_range(-1.0..1.0), r.gen_range(-2.0..2.0));
    let worst = [
        check(&[a.clone(), b.clone()], seed, |v| v[0].add(&v[1])),
        check(&[a.clone(), b.clone()], seed, |v| v[0].sub(&v[1])),
        check(&[a.clone(), b.clone()], seed, |v| v[0].mul(&v[1])),
        check(&[a.clone()], seed, |v| v[0].add_scalar(s)),
        check(&[a.clone()], seed, |v| v[0].mul_scalar(k)),
        check(&[a.clone()], seed, |v| v[0].abs()),
        check(&[a.clone()], seed, |v| v[0].relu()),
        check(&[a.clone()], seed, |v| v[0].sum()),
        check(&[a.clone()], seed, |v| v[0].mean()),
        check(&[a, b], seed, |v| Var::add_n(v)),
    ];
    worst.into_iter().try_fold(0.0f64, |m, e| Ok(m.max(e?)))
}

fn matmul(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
    let a = uniform(&mut r, &[m, k], -1.0, 1.0);
    let b = uniform(&mut r, &[k, n], -1.0, 1.0);
    check(&[a, b], seed, |v| v[0].matmul(&v[1]))
}

fn conv2d(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (c_in, c_out) = (r.gen_range(1..3), r.gen_range(1..3));
    let k = [1, 3][r.gen_range(0..2)];
    let (stride, pad) = (r.gen_range(1..3), r.gen_range(0..2));
    let (h, w) = (r.gen_range(k.max(3)..7), r.gen_range(k.max(3)..7));
    let x = uniform(&mut r, &[c_in, h, w], -1.0, 1.0);
    let wt = uniform(&mut r, &[c_out, c_in, k, k], -1.0, 1.0);
    let b = uniform(&mut r, &[c_out], -1.0, 1.0);
    check(&[x, wt, b], seed, |v| v[0].conv2d(&v[1], Some(&v[2]), stride, pad))
}

fn maxpool2d(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let shape = [r.gen_range(1..3), r.gen_range(2..7), r.gen_range(2..7)];
    check(&[uniform(&mut r, &shape, -1.0, 1.0)], seed, |v| v[0].maxpool2d())
}

fn reshape_permute(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (a, b, c) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
    let x = uniform(&mut r, &[a, b, c], -1.0, 1.0);
    let mut axes = [0, 1, 2];
    for i in (1..3).rev() {
        axes.swap(i, r.gen_range(0..=i));
    }
    check(&[x], seed, |v| v[0].permute(&axes)?.reshape(&[a * b * c])?.reshape(&[c * b, a]))
}

fn pad_concat(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let sx = [r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4)];
    let sy = [r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4)];
    let (x, y) = (uniform(&mut r, &sx, -1.0, 1.0), uniform(&mut r, &sy, -1.0, 1.0));
    let (th, tw) = (r.gen_range(3..6), r.gen_range(3..6));
    check(&[x, y], seed, |v| Var::pad_concat(v, th, tw))
}

/// Sample coordinates keep their fractional parts away from the bilinear
/// kinks at integers.
fn grid_sample(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (c, h, w) = (r.gen_range(1..3), r.gen_range(3..6), r.gen_range(3..6));
    let (gh, gw) = (r.gen_range(1..4), r.gen_range(1..4));
    let img = uniform(&mut r, &[c, h, w], -1.0, 1.0);
    let grid = NdArray::from_fn(&[gh, gw, 2], |i| {
        let extent = if i % 2 == 0 { w } else { h } as f64;
        r.gen_range(-1.0..extent).floor() + r.gen_range(0.1..0.9)
    });
    check(&[img, grid], seed, |v| v[0].grid_sample(&v[1]))
}

fn linear(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (n_in, n_out) = (r.gen_range(1..7), r.gen_range(1..5));
    let x = uniform(&mut r, &[n_in], -1.0, 1.0);
    let wt = uniform(&mut r, &[n_out, n_in], -1.0, 1.0);
    let b = uniform(&mut r, &[n_out], -1.0, 1.0);
    check(&[x, wt, b], seed, |v| v[0].linear(&v[1], &v[2]))
}

/// At least two channels: a normalized 1-vector is a constant sign, whose
/// zero gradient leaves only roundoff to compare.
fn corr(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let c = r.gen_range(2..5);
    let sa = [c, r.gen_range(1..4), r.gen_range(1..4)];
    let sb = [c, r.gen_range(1..4), r.gen_range(1..4)];
    let (a, b) = (uniform(&mut r, &sa, -1.0, 1.0), uniform(&mut r, &sb, -1.0, 1.0));
    let raw = check(&[a.clone(), b.clone()], seed, |v| corr4d(&v[0], &v[1], false))?;
    let normalized = check(&[a, b], seed, |v| corr4d(&v[0], &v[1], true))?;
    Ok(raw.max(normalized))
}

/// Gradients with respect to both feature maps, through a head whose last
/// layer is randomized so the output depends on every earlier layer.
fn fsc(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let c = r.gen_range(2..4);
    let (h1, w1) = (r.gen_range(2..5), r.gen_range(2..5));
    let (h2, w2) = (r.gen_range(2..5), r.gen_range(2..5));
    let spec = HeadSpec {
        variant: HeadVariant::Fsc,
        h1,
        w1,
        h2,
        w2,
        c_r: 2,
        hidden: 3,
        output_dim: 2,
    };
    let mut p = Params::new();
    let head = FscHead::register(&mut p, seed, "h", spec)?;
    let fc2 = p.get_mut("h.fc2.w").ok_or(Error::Empty("fc2"))?;
    *fc2 = uniform(&mut r, fc2.shape(), -0.5, 0.5);
    let a = uniform(&mut r, &[c, h1, w1], -1.0, 1.0);
    let b = uniform(&mut r, &[c, h2, w2], -1.0, 1.0);
    check_gradients(&[a, b], &[true, true], seed, FD_STEP, |tape, v| {
        let bound = p.bind(tape);
        fsc_regress(&bound, &v[0], &v[1], &head)
    })
}

fn random_offsets(r: &mut ChaCha8Rng, bound: f64) -> NdArray {
    uniform(r, &[4, 2], -bound, bound)
}

fn dlt(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (h, w) = (r.gen_range(8..40), r.gen_range(8..40));
    let o = random_offsets(&mut r, 0.15 * h.min(w) as f64);
    check(&[o], seed, |v| dlt_solve_var(&v[0], h, w))
}

fn perturbed_mesh(r: &mut ChaCha8Rng, rows: usize, cols: usize, h: usize, w: usize, amp: f64) -> Result<NdArray> {
    let reg = regular_mesh(rows, cols, h, w)?.into_array();
    let d = reg.data().iter().map(|v| v + r.gen_range(-amp..amp)).collect();
    NdArray::new(reg.shape(), d)
}

fn mesh_to_flow(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (rows, cols) = (r.gen_range(2..4), r.gen_range(2..4));
    let (h, w) = (r.gen_range(4..9), r.gen_range(4..9));
    let mesh = perturbed_mesh(&mut r, rows, cols, h, w, 1.5)?;
    check(&[mesh], seed, |v| mesh_to_flow_var(&v[0], h, w))
}

fn warp(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (rows, cols) = (r.gen_range(2..4), r.gen_range(2..4));
    let (c, h, w) = (r.gen_range(1..3), r.gen_range(5..10), r.gen_range(5..10));
    let mesh = perturbed_mesh(&mut r, rows, cols, h, w, 1.5)?;
    let img = uniform(&mut r, &[c, h, w], 0.0, 1.0);
    check(&[img, mesh], seed, |v| warp_var(&v[0], &v[1]))
}

/// Corner offsets through the homography, the mesh it moves and the warp.
fn homography_warp(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (h, w) = (r.gen_range(6..11), r.gen_range(6..11));
    let img = uniform(&mut r, &[1, h, w], 0.0, 1.0);
    let o = random_offsets(&mut r, 1.5);
    let reg = regular_mesh(3, 3, h, w)?.into_array();
    check_gradients(&[o], &[true], seed, FD_STEP, |tape, v| {
        let hom = dlt_solve_var(&v[0], h, w)?;
        let mesh = apply_homography_var(&reg, &hom)?;
        warp_var(&tape.constant(img.clone()), &mesh)
    })
}

fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let keep: Vec<bool> = (0..h * w).map(|_| r.gen_bool(0.7)).collect();
    Mask::from_fn(h, w, |y, x| keep[y * w + x])
}

/// Overlap L1 on images and, as a warp chain, with respect to the mesh.
/// The mask is fixed outside the differentiated function.
fn content(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (c, h, w) = (r.gen_range(1..3), r.gen_range(5..9), r.gen_range(5..9));
    let a = uniform(&mut r, &[c, h, w], 0.0, 1.0);
    let b = uniform(&mut r, &[c, h, w], 0.0, 1.0);
    let mask = random_mask(&mut r, h, w);
    check(&[a, b], seed, |v| l1_overlap(&v[0], &v[1], &mask))
}

fn content_warp(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (h, w) = (r.gen_range(6..10), r.gen_range(6..10));
    let a = uniform(&mut r, &[1, h, w], 0.0, 1.0);
    let b = uniform(&mut r, &[1, h, w], 0.0, 1.0);
    let mesh = perturbed_mesh(&mut r, 3, 3, h, w, 1.0)?;
    let mask = random_mask(&mut r, h, w);
    check_gradients(&[mesh], &[true], seed, FD_STEP, |tape, v| {
        let warped = warp_var(&tape.constant(b.clone()), &v[0])?;
        l1_overlap(&tape.constant(a.clone()), &warped, &mask)
    })
}

fn shape(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (rows, cols) = (r.gen_range(2..5), r.gen_range(2..5));
    let (h, w) = (r.gen_range(10..40), r.gen_range(10..40));
    let regular = regular_mesh(rows, cols, h, w)?.into_array();
    let mesh = perturbed_mesh(&mut r, rows, cols, h, w, 2.0)?;
    check(&[mesh], seed, |v| l_shape(&v[0], &regular))
}

fn jnd(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let (c, h, w) = (r.gen_range(1..3), r.gen_range(3..7), r.gen_range(3..7));
    let a = uniform(&mut r, &[c, h, w], 0.0, 1.0);
    let b = uniform(&mut r, &[c, h, w], 0.0, 1.0);
    let mask = random_mask(&mut r, h, w);
    let map = JndMap::new(h, w, (0..h * w).map(|_| r.gen_range(0.0..0.2)).collect())?;
    check(&[a, b], seed, |v| l_jnd(&v[0], &v[1], &map, &mask))
}

pub fn registry() -> Vec<Check> {
    let op = |name, run| Check {
        name,
        tolerance: OP_TOLERANCE,
        run,
    };
    let chain = |name, run| Check {
        name,
        tolerance: WARP_TOLERANCE,
        run,
    };
    vec![
        op("elementwise", elementwise),
        op("matmul", matmul),
        op("conv2d", conv2d),
        op("maxpool2d", maxpool2d),
        op("reshape_permute", reshape_permute),
        op("pad_concat", pad_concat),
        op("grid_sample", grid_sample),
        op("linear", linear),
        op("corr4d", corr),
        op("fsc_regress", fsc),
        op("dlt_solve", dlt),
        op("mesh_to_flow", mesh_to_flow),
        op("l_content", content),
        op("l_shape", shape),
        op("l_jnd", jnd),
        chain("warp", warp),
        chain("homography_warp", homography_warp),
        chain("l_content_warp", content_warp),
    ]
}

pub fn names() -> Vec<&'static str> {
    registry().iter().map(|c| c.name).collect()
}

/// Runs every check (or only `only`) over seeds `0..seeds`.
pub fn run_checks(only: Option<&str>, seeds: u64) -> Result<Vec<CheckResult>> {
    let checks: Vec<Check> = registry().into_iter().filter(|c| only.map_or(true, |n| c.name == n)).collect();
    if checks.is_empty() {
        return Err(Error::Invalid(format!(
            "unknown op {:?}; expected one of {}",
            only.unwrap_or(""),
            names().join(", ")
        )));
    }
    checks
        .iter()
        .map(|c| {
            let mut worst = 0.0f64;
            for s in 0..seeds {
                let e = c.run(s)?;
                // NaN must fail the comparison rather than vanish in max().
                worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
                if worst.is_nan() {
                    break;
                }
            }
            Ok(CheckResult {
                name: c.name,
                tolerance: c.tolerance,
                seeds,
                worst,
            })
        })
        .collect()
}
