//! Training objective: overlap-masked content loss on both stages, mesh
//! shape preservation, and the JND-hinged difference loss.

use crate::error::{shape_err, Result};
use crate::imaging::Mask;
use crate::jnd::JndMap;
use crate::model::ForwardOutput;
use crate::tensor::{NdArray, Var};

/// Value returned by [`l_shape`] when an edge collapses to zero length.
pub const SHAPE_CAP: f64 = 1e3;

const MIN_EDGE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_h: f64,
    pub lambda_m: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 1.0,
            lambda_h: 1.0,
            lambda_m: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_content: f64,
    pub l_shape: f64,
    pub l_jnd: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

fn mask_array(mask: &Mask, channels: usize) -> NdArray {
    let n = mask.data().len();
    NdArray::from_fn(&[channels, mask.height(), mask.width()], |i| mask.data()[i % n])
}

fn check_image_pair(op: &'static str, reference: &Var, warped: &Var, mask: &Mask) -> Result<usize> {
    let (a, b) = (reference.shape(), warped.shape());
    if a != b || a.len() != 3 || a[1..] != [mask.height(), mask.width()] {
        return shape_err(op, format!("reference {a:?}, warped {b:?}, mask {}x{}", mask.height(), mask.width()));
    }
    Ok(a[0])
}

/// `Mean(ReLU(|ref - warped| * mask - jnd * mask))` over every channel and
/// pixel, masked-out pixels included in the count.
pub fn l_jnd(reference: &Var, warped: &Var, jnd: &JndMap, mask: &Mask) -> Result<Var> {
    let c = check_image_pair("l_jnd", reference, warped, mask)?;
    if (jnd.height(), jnd.width()) != (mask.height(), mask.width()) {
        return shape_err("l_jnd", format!("JND {}x{} vs mask {}x{}", jnd.height(), jnd.width(), mask.height(), mask.width()));
    }
    let tape = reference.tape();
    let m = mask_array(mask, c);
    let thr = jnd.broadcast(c).zip_map(&m, |j, k| j * k)?;
    let dif = reference.sub(warped)?.abs()?.mul(&tape.constant(m))?;
    dif.sub(&tape.constant(thr))?.relu()?.mean()
}

/// `Mean(|ref * mask - warped * mask|)` over the full grid.
pub fn l1_overlap(reference: &Var, warped: &Var, mask: &Mask) -> Result<Var> {
    let c = check_image_pair("l1_overlap", reference, warped, mask)?;
    let m = reference.tape().constant(mask_array(mask, c));
    reference.mul(&m)?.sub(&warped.mul(&m)?)?.abs()?.mean()
}

pub fn l_content(out: &ForwardOutput, reference: &Var, w: &LossWeights) -> Result<Var> {
    let h = l1_overlap(reference, &out.warped_h, &out.mask_h)?.mul_scalar(w.lambda_h)?;
    let m = l1_overlap(reference, &out.warped, &out.mask)?.mul_scalar(w.lambda_m)?;
    h.add(&m)
}

struct Edge {
    from: usize,
    to: usize,
    regular_len: f64,
}

/// Mesh edges (horizontal then vertical) and pairs of consecutive
/// same-direction edges, as indices into the edge list.
fn mesh_edges(regular: &[f64], rows: usize, cols: usize) -> (Vec<Edge>, Vec<(usize, usize)>) {
    let len = |a: usize, b: usize| (regular[2 * b] - regular[2 * a]).hypot(regular[2 * b + 1] - regular[2 * a + 1]);
    let mut edges = Vec::new();
    let mut pairs = Vec::new();
    for r in 0..rows {
        for c in 0..cols - 1 {
            let (a, b) = (r * cols + c, r * cols + c + 1);
            if c > 0 {
                pairs.push((edges.len() - 1, edges.len()));
            }
            edges.push(Edge {
                from: a,
                to: b,
                regular_len: len(a, b),
            });
        }
    }
    let first_vertical = edges.len();
    for r in 0..rows - 1 {
        for c in 0..cols {
            let (a, b) = (r * cols + c, (r + 1) * cols + c);
            if r > 0 {
                pairs.push((first_vertical + (r - 1) * cols + c, edges.len()));
            }
            edges.push(Edge {
                from: a,
                to: b,
                regular_len: len(a, b),
            });
        }
    }
    (edges, pairs)
}

/// Shape preservation of a `[rows, cols, 2]` mesh against the regular mesh:
/// mean squared change of unit direction between consecutive same-direction
/// edges, plus mean squared relative change of edge length. Returns `cap`
/// with zero gradient if any edge has zero length.
pub fn l_shape_with_cap(mesh: &Var, regular: &NdArray, cap: f64) -> Result<Var> {
    let s = mesh.shape();
    if s != regular.shape() || s.len() != 3 || s[2] != 2 || s[0] < 2 || s[1] < 2 {
        return shape_err("l_shape", format!("mesh {s:?} vs regular {:?}", regular.shape()));
    }
    let (rows, cols) = (s[0], s[1]);
    let (edges, pairs) = mesh_edges(regular.data(), rows, cols);
    let p = mesh.value();
    let vec_of = |e: &Edge| {
        let d = p.data();
        [d[2 * e.to] - d[2 * e.from], d[2 * e.to + 1] - d[2 * e.from + 1]]
    };
    let lens: Vec<f64> = edges.iter().map(|e| {
        let v = vec_of(e);
        v[0].hypot(v[1])
    }).collect();
    if lens.iter().any(|&l| l < MIN_EDGE) || edges.iter().any(|e| e.regular_len < MIN_EDGE) {
        return mesh.tape().record(
            "l_shape",
            &[mesh],
            NdArray::scalar(cap),
            Box::new(move |_, inp, _, _| vec![Some(NdArray::zeros(inp[0].shape()))]),
        );
    }
    let units: Vec<[f64; 2]> = edges.iter().zip(&lens).map(|(e, &l)| {
        let v = vec_of(e);
        [v[0] / l, v[1] / l]
    }).collect();
    let intra = if pairs.is_empty() {
        0.0
    } else {
        pairs.iter().map(|&(a, b)| {
            let (ua, ub) = (units[a], units[b]);
            (ub[0] - ua[0]).powi(2) + (ub[1] - ua[1]).powi(2)
        }).sum::<f64>() / pairs.len() as f64
    };
    let inter = edges.iter().zip(&lens).map(|(e, &l)| (l / e.regular_len - 1.0).powi(2)).sum::<f64>() / edges.len() as f64;

    mesh.tape().record(
        "l_shape",
        &[mesh],
        NdArray::scalar(intra + inter),
        Box::new(move |g, _, _, _| {
            let g = g.item();
            // Gradient with respect to each edge vector, then scattered to vertices.
            let mut de = vec![[0.0f64; 2]; edges.len()];
            if !pairs.is_empty() {
                let k = 2.0 * g / pairs.len() as f64;
                let mut du = vec![[0.0f64; 2]; edges.len()];
                for &(a, b) in &pairs {
                    let d = [units[b][0] - units[a][0], units[b][1] - units[a][1]];
                    du[b][0] += k * d[0];
                    du[b][1] += k * d[1];
                    du[a][0] -= k * d[0];
                    du[a][1] -= k * d[1];
                }
                for i in 0..edges.len() {
                    let u = units[i];
                    let dot = u[0] * du[i][0] + u[1] * du[i][1];
                    de[i][0] += (du[i][0] - u[0] * dot) / lens[i];
                    de[i][1] += (du[i][1] - u[1] * dot) / lens[i];
                }
            }
            let k = 2.0 * g / edges.len() as f64;
            for (i, e) in edges.iter().enumerate() {
                let q = lens[i] / e.regular_len - 1.0;
                de[i][0] += k * q * units[i][0] / e.regular_len;
                de[i][1] += k * q * units[i][1] / e.regular_len;
            }
            let mut d = vec![0.0; rows * cols * 2];
            for (e, v) in edges.iter().zip(&de) {
                d[2 * e.to] += v[0];
                d[2 * e.to + 1] += v[1];
                d[2 * e.from] -= v[0];
                d[2 * e.from + 1] -= v[1];
            }
            vec![Some(NdArray::new(&[rows, cols, 2], d).unwrap())]
        }),
    )
}

pub fn l_shape(mesh: &Var, regular: &NdArray) -> Result<Var> {
    l_shape_with_cap(mesh, regular, SHAPE_CAP)
}

/// `L = L_content + alpha L_shape + beta L_jnd`, the JND term taken on the
/// mesh stage. Returns the differentiable total and its recorded parts.
pub fn total_loss(
    out: &ForwardOutput,
    reference: &Var,
    regular: &NdArray,
    jnd: &JndMap,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let content = l_content(out, reference, w)?;
    let shape = l_shape(&out.mesh, regular)?;
    let j = l_jnd(reference, &out.warped, jnd, &out.mask)?;
    combine(&content, &shape, &j, w)
}

/// Weighted sum of already computed loss terms.
pub fn combine(content: &Var, shape: &Var, jnd: &Var, w: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let total = content.add(&shape.mul_scalar(w.alpha)?)?.add(&jnd.mul_scalar(w.beta)?)?;
    let breakdown = LossBreakdown {
        l_content: content.value().item(),
        l_shape: shape.value().item(),
        l_jnd: jnd.value().item(),
        total: total.value().item(),
        alpha: w.alpha,
        beta: w.beta,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{overlap_mask_from_array, regular_mesh, warp_var};
    use crate::tensor::fd::{check_gradients, FD_STEP};
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> NdArray {
        NdArray::from_fn(&[c, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn jnd_loss_piecewise() {
        let t = Tape::new();
        let (h, w) = (4, 5);
        let reference = NdArray::full(&[1, h, w], 0.5);
        let jnd = JndMap::new(h, w, vec![0.1; h * w]).unwrap();
        let full = Mask::full(h, w);

        let below = NdArray::from_fn(&[1, h, w], |i| 0.5 + if i % 2 == 0 { 0.1 } else { -0.05 });
        let l = l_jnd(&t.constant(reference.clone()), &t.constant(below), &jnd, &full).unwrap();
        assert_eq!(l.value().item(), 0.0);

        // Exceed by delta on 6 of 20 pixels.
        let delta = 0.07;
        let exceed = NdArray::from_fn(&[1, h, w], |i| if i < 6 { 0.5 + 0.1 + delta } else { 0.5 });
        let l = l_jnd(&t.constant(reference.clone()), &t.constant(exceed), &jnd, &full).unwrap();
        assert!((l.value().item() - 6.0 / 20.0 * delta).abs() < 1e-12);

        // A single pixel at threshold + 0.1 contributes 0.1 before the mean.
        let one = NdArray::from_fn(&[1, h, w], |i| if i == 7 { 0.5 + 0.2 } else { 0.5 });
        let l = l_jnd(&t.constant(reference), &t.constant(one), &jnd, &full).unwrap();
        assert!((l.value().item() * 20.0 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn jnd_loss_without_thresholds_is_masked_mae() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tape::new();
        let (a, b) = (random_image(&mut rng, 3, 6, 7), random_image(&mut rng, 3, 6, 7));
        let mask = Mask::from_fn(6, 7, |y, x| (x + y) % 3 != 0);
        let l = l_jnd(&t.constant(a.clone()), &t.constant(b.clone()), &JndMap::zeros(6, 7), &mask).unwrap();
        let mut mae = 0.0;
        for c in 0..3 {
            for y in 0..6 {
                for x in 0..7 {
                    let i = (c * 6 + y) * 7 + x;
                    if mask.get(y, x) {
                        mae += (a.data()[i] - b.data()[i]).abs();
                    }
                }
            }
        }
        assert!((l.value().item() - mae / (3.0 * 42.0)).abs() < 1e-12);
    }

    #[test]
    fn jnd_loss_nonincreasing_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = Tape::new();
        let (a, b) = (t.constant(random_image(&mut rng, 1, 5, 5)), t.constant(random_image(&mut rng, 1, 5, 5)));
        let mask = Mask::full(5, 5);
        let mut last = f64::INFINITY;
        for k in 0..8 {
            let j = JndMap::new(5, 5, vec![k as f64 * 0.05; 25]).unwrap();
            let v = l_jnd(&a, &b, &j, &mask).unwrap().value().item();
            assert!(v <= last);
            last = v;
        }
        assert!(l_jnd(&a, &b, &JndMap::zeros(4, 5), &mask).is_err());
    }

    #[test]
    fn overlap_l1_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tape::new();
        let a = t.constant(random_image(&mut rng, 3, 4, 4));
        let b = t.constant(random_image(&mut rng, 3, 4, 4));
        assert_eq!(l1_overlap(&a, &a, &Mask::full(4, 4)).unwrap().value().item(), 0.0);
        assert_eq!(l1_overlap(&a, &b, &Mask::from_fn(4, 4, |_, _| false)).unwrap().value().item(), 0.0);
        assert!(l1_overlap(&a, &b, &Mask::full(4, 4)).unwrap().value().item() > 0.0);
    }

    #[test]
    fn content_decreases_as_translation_shrinks() {
        let (h, w) = (32, 32);
        let t = Tape::new();
        let img = NdArray::from_fn(&[1, h, w], |i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            0.2 + 0.6 * (x + 0.5 * y) / 48.0
        });
        let reference = t.constant(img.clone());
        let regular = regular_mesh(5, 5, h, w).unwrap().into_array();
        let mut last = f64::INFINITY;
        for shift in (0..=8).rev() {
            let mesh = NdArray::from_fn(regular.shape(), |i| regular.data()[i] + if i % 2 == 0 { shift as f64 } else { 0.0 });
            let warped = warp_var(&reference, &t.constant(mesh.clone())).unwrap();
            let mask = overlap_mask_from_array(&mesh, h, w).unwrap();
            let v = l1_overlap(&reference, &warped, &mask).unwrap().value().item();
            assert!(v < last, "shift {shift}: {v} >= {last}");
            last = v;
        }
        assert_eq!(last, 0.0);
    }

    #[test]
    fn shape_loss_values() {
        let t = Tape::new();
        let regular = regular_mesh(4, 5, 40, 50).unwrap().into_array();
        assert_eq!(l_shape(&t.constant(regular.clone()), &regular).unwrap().value().item(), 0.0);

        // Rotation by 0.3 rad and scale 1.2 about an arbitrary centre.
        let (s, th) = (1.2f64, 0.3f64);
        let sim = NdArray::from_fn(regular.shape(), |i| {
            let (x, y) = (regular.data()[i & !1] - 20.0, regular.data()[i | 1] - 15.0);
            if i % 2 == 0 {
                s * (th.cos() * x - th.sin() * y) + 7.0
            } else {
                s * (th.sin() * x + th.cos() * y) - 3.0
            }
        });
        let v = l_shape(&t.constant(sim), &regular).unwrap().value().item();
        assert!((v - (s - 1.0).powi(2)).abs() < 1e-12, "{v}");

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noisy = NdArray::from_fn(regular.shape(), |i| regular.data()[i] + rng.gen_range(-1.0..1.0));
        assert!(l_shape(&t.constant(noisy), &regular).unwrap().value().item() > 0.0);

        let mut collapsed = regular.clone();
        collapsed.data_mut()[2] = 0.0;
        collapsed.data_mut()[3] = 0.0;
        let x = t.param(collapsed);
        let l = l_shape_with_cap(&x, &regular, 55.0).unwrap();
        assert_eq!(l.value().item(), 55.0);
        l.backward().unwrap();
        assert_eq!(x.grad().unwrap().max_abs(), 0.0);
    }

    #[test]
    fn breakdown_arithmetic() {
        let t = Tape::new();
        let v = |x: f64| t.constant(NdArray::scalar(x));
        let (total, b) = combine(&v(1.0), &v(0.2), &v(0.05), &LossWeights::default()).unwrap();
        assert!((b.total - 3.05).abs() < 1e-12);
        assert_eq!(b.total, b.l_content + b.alpha * b.l_shape + b.beta * b.l_jnd);
        assert_eq!(total.value().item(), b.total);
        let no_jnd = LossWeights { beta: 0.0, ..LossWeights::default() };
        assert_eq!(combine(&v(1.0), &v(0.2), &v(0.05), &no_jnd).unwrap().1.total, 3.0);
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let regular = regular_mesh(3, 4, 20, 30).unwrap().into_array();
        let mesh = NdArray::new(regular.shape(), regular.data().iter().map(|v| v + rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let err = check_gradients(&[mesh], &[true], 5, FD_STEP, |_, v| l_shape(&v[0], &regular)).unwrap();
        assert!(err < 1e-6, "{err}");

        let (a, b) = (random_image(&mut rng, 2, 5, 6), random_image(&mut rng, 2, 5, 6));
        let mask = Mask::from_fn(5, 6, |y, x| x + y > 2);
        let jnd = JndMap::new(5, 6, (0..30).map(|_| rng.gen_range(0.0..0.2)).collect()).unwrap();
        let err = check_gradients(&[a.clone(), b.clone()], &[false, true], 6, FD_STEP, |_, v| l_jnd(&v[0], &v[1], &jnd, &mask)).unwrap();
        assert!(err < 1e-4, "{err}");
        let err = check_gradients(&[a, b], &[false, true], 7, FD_STEP, |_, v| l1_overlap(&v[0], &v[1], &mask)).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
