//! Meshes, four-point homographies and mesh-parameterized warping.
//!
//! Coordinates are absolute pixel positions `(x, y)`. A mesh has `rows x
//! cols` vertices stored as a `[rows, cols, 2]` array; the regular mesh
//! spans `[0, w-1] x [0, h-1]` with its corners on the image corners.
//!
//! Warping is backward: output pixel `p` samples the target image at the
//! point obtained by bilinearly interpolating the deformed vertices of the
//! regular-mesh cell containing `p`.

use crate::error::{shape_err, Error, Result};
use crate::imaging::{Image, Mask};
use crate::tensor::{NdArray, Tape, Var};

/// Coverage threshold applied to a warped all-ones image.
pub const MASK_THRESHOLD: f64 = 0.999;

const DENOM_EPS: f64 = 1e-9;
const DET_EPS: f64 = 1e-12;

/// Grid of 2D vertex positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    positions: NdArray,
}

impl Mesh {
    pub fn from_array(positions: NdArray) -> Result<Self> {
        match *positions.shape() {
            [r, c, 2] if r >= 2 && c >= 2 => {
                if !positions.is_finite() {
                    return Err(Error::Invalid("mesh has non-finite vertices".into()));
                }
                Ok(Self { positions })
            }
            _ => shape_err("Mesh", format!("expected [rows>=2, cols>=2, 2], got {:?}", positions.shape())),
        }
    }

    pub fn rows(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.positions.shape()[1]
    }

    pub fn vertex(&self, r: usize, c: usize) -> [f64; 2] {
        let i = 2 * (r * self.cols() + c);
        [self.positions.data()[i], self.positions.data()[i + 1]]
    }

    pub fn as_array(&self) -> &NdArray {
        &self.positions
    }

    pub fn into_array(self) -> NdArray {
        self.positions
    }

    /// Adds a per-vertex displacement of the same shape.
    pub fn displaced(&self, offsets: &LocalOffsets) -> Result<Mesh> {
        Mesh::from_array(self.positions.zip_map(&offsets.0, |a, b| a + b)?)
    }
}

/// Displacements of the four image corners, ordered top-left, top-right,
/// bottom-left, bottom-right, each `(dx, dy)` in pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GlobalOffsets(pub [[f64; 2]; 4]);

impl GlobalOffsets {
    pub fn to_array(&self) -> NdArray {
        NdArray::new(&[4, 2], self.0.iter().flatten().copied().collect()).unwrap()
    }

    pub fn from_array(a: &NdArray) -> Result<Self> {
        if a.len() != 8 {
            return shape_err("GlobalOffsets", format!("need 8 values, got {:?}", a.shape()));
        }
        let d = a.data();
        Ok(Self([[d[0], d[1]], [d[2], d[3]], [d[4], d[5]], [d[6], d[7]]]))
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self([[dx, dy]; 4])
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Per-vertex displacements, `[rows, cols, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalOffsets(pub NdArray);

impl LocalOffsets {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self(NdArray::zeros(&[rows, cols, 2]))
    }
}

/// Projective transform normalized so that the bottom-right entry is 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub fn identity() -> Self {
        Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn from_array(a: &NdArray) -> Result<Self> {
        if a.len() != 9 {
            return shape_err("Homography", format!("need 9 values, got {:?}", a.shape()));
        }
        let d = a.data();
        Ok(Self([[d[0], d[1], d[2]], [d[3], d[4], d[5]], [d[6], d[7], d[8]]]))
    }

    pub fn to_array(&self) -> NdArray {
        NdArray::new(&[3, 3], self.0.iter().flatten().copied().collect()).unwrap()
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn project(&self, x: f64, y: f64) -> Result<[f64; 2]> {
        let m = &self.0;
        let den = m[2][0] * x + m[2][1] * y + m[2][2];
        if den.abs() < DENOM_EPS {
            return Err(Error::Degenerate(format!("point ({x}, {y}) maps to infinity")));
        }
        Ok([
            (m[0][0] * x + m[0][1] * y + m[0][2]) / den,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / den,
        ])
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.det();
        if det.abs() < DET_EPS {
            return Err(Error::Degenerate(format!("singular homography (det {det:e})")));
        }
        let m = &self.0;
        let mut inv = [[0.0; 3]; 3];
        inv[0][0] = m[1][1] * m[2][2] - m[1][2] * m[2][1];
        inv[0][1] = m[0][2] * m[2][1] - m[0][1] * m[2][2];
        inv[0][2] = m[0][1] * m[1][2] - m[0][2] * m[1][1];
        inv[1][0] = m[1][2] * m[2][0] - m[1][0] * m[2][2];
        inv[1][1] = m[0][0] * m[2][2] - m[0][2] * m[2][0];
        inv[1][2] = m[0][2] * m[1][0] - m[0][0] * m[1][2];
        inv[2][0] = m[1][0] * m[2][1] - m[1][1] * m[2][0];
        inv[2][1] = m[0][1] * m[2][0] - m[0][0] * m[2][1];
        inv[2][2] = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let s = 1.0 / inv[2][2];
        for row in &mut inv {
            for v in row {
                *v *= s;
            }
        }
        Ok(Self(inv))
    }
}

/// Image corners in offset order: top-left, top-right, bottom-left, bottom-right.
pub fn image_corners(h: usize, w: usize) -> [[f64; 2]; 4] {
    let (xr, yb) = ((w - 1) as f64, (h - 1) as f64);
    [[0.0, 0.0], [xr, 0.0], [0.0, yb], [xr, yb]]
}

/// Position of regular vertex `i` out of `n` spanning `[0, extent-1]`.
fn regular_coord(i: usize, n: usize, extent: usize) -> f64 {
    (i * (extent - 1)) as f64 / (n - 1) as f64
}

/// Uniform `rows x cols` mesh over an `h x w` image.
pub fn regular_mesh(rows: usize, cols: usize, h: usize, w: usize) -> Result<Mesh> {
    if rows < 2 || cols < 2 || h < 2 || w < 2 {
        return Err(Error::Invalid(format!(
            "regular mesh needs at least 2x2 vertices over a 2x2 image, got {rows}x{cols} over {h}x{w}"
        )));
    }
    let mut pos = Vec::with_capacity(rows * cols * 2);
    for r in 0..rows {
        for c in 0..cols {
            pos.push(regular_coord(c, cols, w));
            pos.push(regular_coord(r, rows, h));
        }
    }
    Mesh::from_array(NdArray::new(&[rows, cols, 2], pos)?)
}

/// Solves an 8x8 system with partial pivoting; `None` if singular.
fn solve8(mut a: [[f64; 8]; 8], mut b: [f64; 8]) -> Option<[f64; 8]> {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    for col in 0..8 {
        let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 * scale {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..8 {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..8 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 8];
    for row in (0..8).rev() {
        let mut s = b[row];
        for k in row + 1..8 {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

fn transpose8(a: &[[f64; 8]; 8]) -> [[f64; 8]; 8] {
    let mut t = [[0.0; 8]; 8];
    for i in 0..8 {
        for j in 0..8 {
            t[j][i] = a[i][j];
        }
    }
    t
}

/// The 8x8 direct linear system mapping `src` corners to `dst` corners with
/// the bottom-right homography entry fixed to 1.
fn dlt_system(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> ([[f64; 8]; 8], [f64; 8]) {
    let mut a = [[0.0; 8]; 8];
    let mut b = [0.0; 8];
    for k in 0..4 {
        let ([x, y], [u, v]) = (src[k], dst[k]);
        a[2 * k] = [x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u];
        b[2 * k] = u;
        a[2 * k + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v];
        b[2 * k + 1] = v;
    }
    (a, b)
}

fn check_general_position(pts: &[[f64; 2]; 4]) -> Result<()> {
    for i in 0..4 {
        for j in i + 1..4 {
            for k in j + 1..4 {
                let (p, q, r) = (pts[i], pts[j], pts[k]);
                let (ax, ay) = (q[0] - p[0], q[1] - p[1]);
                let (bx, by) = (r[0] - p[0], r[1] - p[1]);
                let cross = ax * by - ay * bx;
                let scale = (ax.hypot(ay) * bx.hypot(by)).max(f64::MIN_POSITIVE);
                if cross.abs() <= 1e-9 * scale {
                    return Err(Error::Degenerate(format!("corners {i}, {j}, {k} are collinear")));
                }
            }
        }
    }
    Ok(())
}

/// Homography entries (row-major, first eight) mapping `src` to `dst`.
///
/// Solved as a correction to the identity so that zero displacement gives
/// exactly the identity matrix.
fn dlt_params(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> Result<([[f64; 8]; 8], [f64; 8])> {
    check_general_position(dst)?;
    let (a, b) = dlt_system(src, dst);
    const IDENTITY: [f64; 8] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    let mut residual = b;
    for (r, row) in residual.iter_mut().zip(&a) {
        *r -= row.iter().zip(&IDENTITY).map(|(x, y)| x * y).sum::<f64>();
    }
    let delta = solve8(a, residual).ok_or_else(|| Error::Degenerate("singular corner system".into()))?;
    let mut h = IDENTITY;
    for (hv, d) in h.iter_mut().zip(delta) {
        *hv += d;
    }
    Ok((a, h))
}

/// Homography taking the image corners to the corners displaced by `offsets`.
pub fn dlt_solve(offsets: &GlobalOffsets, h: usize, w: usize) -> Result<Homography> {
    let t = Tape::new();
    let hv = dlt_solve_var(&t.constant(offsets.to_array()), h, w)?;
    let out = Homography::from_array(&hv.value())?;
    Ok(out)
}

/// Differentiable [`dlt_solve`] over a `[4, 2]` offset var; returns `[3, 3]`.
pub fn dlt_solve_var(offsets: &Var, h: usize, w: usize) -> Result<Var> {
    let o = offsets.value();
    if o.len() != 8 {
        return shape_err("dlt_solve", format!("offsets must be [4,2], got {:?}", o.shape()));
    }
    let src = image_corners(h, w);
    let mut dst = src;
    for (k, d) in dst.iter_mut().enumerate() {
        d[0] += o.data()[2 * k];
        d[1] += o.data()[2 * k + 1];
    }
    let (a, hp) = dlt_params(&src, &dst)?;
    let mut full: Vec<f64> = hp.to_vec();
    full.push(1.0);
    let hom = Homography::from_array(&NdArray::new(&[9], full.clone())?)?;
    if hom.det().abs() < DET_EPS {
        return Err(Error::Degenerate("homography determinant vanishes".into()));
    }
    let at = transpose8(&a);
    let shape = o.shape().to_vec();
    offsets.tape().record(
        "dlt_solve",
        &[offsets],
        NdArray::new(&[3, 3], full)?,
        Box::new(move |g, _, _, _| {
            // h = A^-1 b  =>  dL/db = lambda, dL/dA = -lambda h^T with A^T lambda = dL/dh.
            let mut gh = [0.0; 8];
            gh.copy_from_slice(&g.data()[..8]);
            let lambda = solve8(at, gh).unwrap_or([0.0; 8]);
            let mut d = vec![0.0; 8];
            for k in 0..4 {
                let [x, y] = src[k];
                let den = 1.0 + hp[6] * x + hp[7] * y;
                d[2 * k] = lambda[2 * k] * den;
                d[2 * k + 1] = lambda[2 * k + 1] * den;
            }
            vec![Some(NdArray::new(&shape, d).unwrap())]
        }),
    )
}

/// Projects a constant `[..., 2]` point array through a `[3, 3]` homography var.
pub fn apply_homography_var(points: &NdArray, hom: &Var) -> Result<Var> {
    if points.shape().last() != Some(&2) {
        return shape_err("apply_homography", format!("points must end in 2, got {:?}", points.shape()));
    }
    let hv = hom.value();
    if hv.shape() != [3, 3] {
        return shape_err("apply_homography", format!("homography must be [3,3], got {:?}", hv.shape()));
    }
    let m = Homography::from_array(&hv)?;
    let mut out = Vec::with_capacity(points.len());
    for p in points.data().chunks_exact(2) {
        out.extend(m.project(p[0], p[1])?);
    }
    let pts = points.clone();
    hom.tape().record(
        "apply_homography",
        &[hom],
        NdArray::new(points.shape(), out)?,
        Box::new(move |g, inp, outv, _| {
            let m = inp[0].data();
            let mut d = [0.0; 9];
            for ((p, q), gv) in pts.data().chunks_exact(2).zip(outv.data().chunks_exact(2)).zip(g.data().chunks_exact(2)) {
                let (x, y) = (p[0], p[1]);
                let (u, v) = (q[0], q[1]);
                let den = m[6] * x + m[7] * y + m[8];
                let (gu, gv) = (gv[0] / den, gv[1] / den);
                d[0] += gu * x;
                d[1] += gu * y;
                d[2] += gu;
                d[3] += gv * x;
                d[4] += gv * y;
                d[5] += gv;
                let back = gu * u + gv * v;
                d[6] -= back * x;
                d[7] -= back * y;
                d[8] -= back;
            }
            vec![Some(NdArray::new(&[3, 3], d.to_vec()).unwrap())]
        }),
    )
}

/// Transforms every vertex of `mesh` by `hom`.
pub fn apply_homography(mesh: &Mesh, hom: &Homography) -> Result<Mesh> {
    let t = Tape::new();
    let v = apply_homography_var(mesh.as_array(), &t.constant(hom.to_array()))?;
    Mesh::from_array((*v.value()).clone())
}

/// `M^f = H(M) + O_l` where `H` solves the corner system for `o_g`.
pub fn assemble_final_mesh(mesh: &Mesh, o_g: &GlobalOffsets, o_l: &LocalOffsets, h: usize, w: usize) -> Result<Mesh> {
    if o_l.0.shape() != mesh.as_array().shape() {
        return shape_err("assemble_final_mesh", format!("offsets {:?} vs mesh {:?}", o_l.0.shape(), mesh.as_array().shape()));
    }
    let hom = dlt_solve(o_g, h, w)?;
    apply_homography(mesh, &hom)?.displaced(o_l)
}

/// Per-pixel cell membership and cell-local coordinates in the regular mesh.
#[derive(Clone, Copy)]
struct CellCoord {
    row: usize,
    col: usize,
    s: f64,
    t: f64,
}

fn cell_coords(rows: usize, cols: usize, h: usize, w: usize) -> (Vec<CellCoord>, Vec<f64>) {
    let locate = |p: usize, n: usize, extent: usize| {
        let f = (p * (n - 1)) as f64 / (extent - 1) as f64;
        let i = (f.floor() as usize).min(n - 2);
        (i, f - i as f64)
    };
    let xs: Vec<(usize, f64)> = (0..w).map(|x| locate(x, cols, w)).collect();
    let mut cells = Vec::with_capacity(h * w);
    for y in 0..h {
        let (row, t) = locate(y, rows, h);
        for &(col, s) in &xs {
            cells.push(CellCoord { row, col, s, t });
        }
    }
    let regular = regular_mesh(rows, cols, h, w).expect("sizes validated").into_array().into_data();
    (cells, regular)
}

/// Differentiable sampling field `[h, w, 2]` from a `[rows, cols, 2]` mesh var.
///
/// Each pixel adds to its own position the bilinear interpolation of its
/// cell's vertex displacements from the regular mesh, so the regular mesh
/// maps to the exact identity field.
pub fn mesh_to_flow_var(mesh: &Var, h: usize, w: usize) -> Result<Var> {
    let ms = mesh.shape();
    if ms.len() != 3 || ms[2] != 2 || ms[0] < 2 || ms[1] < 2 {
        return shape_err("mesh_to_flow", format!("mesh must be [rows>=2, cols>=2, 2], got {ms:?}"));
    }
    if h < 2 || w < 2 {
        return Err(Error::Invalid(format!("mesh_to_flow needs at least 2x2 output, got {h}x{w}")));
    }
    let (rows, cols) = (ms[0], ms[1]);
    let (cells, regular) = cell_coords(rows, cols, h, w);
    let m = mesh.value();
    let disp: Vec<f64> = m.data().iter().zip(&regular).map(|(a, b)| a - b).collect();
    let mut out = Vec::with_capacity(h * w * 2);
    for (i, c) in cells.iter().enumerate() {
        let (y, x) = (i / w, i % w);
        let v = |r: usize, cc: usize, k: usize| disp[2 * (r * cols + cc) + k];
        for (k, base) in [(0, x as f64), (1, y as f64)] {
            let top = v(c.row, c.col, k) + c.s * (v(c.row, c.col + 1, k) - v(c.row, c.col, k));
            let bot = v(c.row + 1, c.col, k) + c.s * (v(c.row + 1, c.col + 1, k) - v(c.row + 1, c.col, k));
            out.push(base + (top + c.t * (bot - top)));
        }
    }
    mesh.tape().record(
        "mesh_to_flow",
        &[mesh],
        NdArray::new(&[h, w, 2], out)?,
        Box::new(move |g, _, _, _| {
            let mut d = vec![0.0; rows * cols * 2];
            for (c, gv) in cells.iter().zip(g.data().chunks_exact(2)) {
                let wts = [
                    (c.row, c.col, (1.0 - c.s) * (1.0 - c.t)),
                    (c.row, c.col + 1, c.s * (1.0 - c.t)),
                    (c.row + 1, c.col, (1.0 - c.s) * c.t),
                    (c.row + 1, c.col + 1, c.s * c.t),
                ];
                for (r, cc, wt) in wts {
                    let j = 2 * (r * cols + cc);
                    d[j] += wt * gv[0];
                    d[j + 1] += wt * gv[1];
                }
            }
            vec![Some(NdArray::new(&[rows, cols, 2], d).unwrap())]
        }),
    )
}

pub fn mesh_to_flow(mesh: &Mesh, h: usize, w: usize) -> Result<NdArray> {
    let t = Tape::new();
    let v = mesh_to_flow_var(&t.constant(mesh.as_array().clone()), h, w)?;
    let out = (*v.value()).clone();
    Ok(out)
}

/// Differentiable warp of a `[c, h, w]` image var by a mesh var; the output
/// has the same extent as the input.
pub fn warp_var(img: &Var, mesh: &Var) -> Result<Var> {
    let s = img.shape();
    if s.len() != 3 {
        return shape_err("warp", format!("image must be [c,h,w], got {s:?}"));
    }
    let grid = mesh_to_flow_var(mesh, s[1], s[2])?;
    img.grid_sample(&grid)
}

/// Mask of output pixels whose sample falls fully inside an `h x w` target.
pub fn overlap_mask_from_array(mesh: &NdArray, h: usize, w: usize) -> Result<Mask> {
    let t = Tape::new();
    let ones = t.constant(NdArray::ones(&[1, h, w]));
    let cover = warp_var(&ones, &t.constant(mesh.clone()))?;
    let m = Mask::threshold(h, w, cover.value().data(), MASK_THRESHOLD)?;
    Ok(m)
}

pub fn overlap_mask(mesh: &Mesh, h: usize, w: usize) -> Result<Mask> {
    overlap_mask_from_array(mesh.as_array(), h, w)
}

pub fn warp_image(img: &Image, mesh: &Mesh) -> Result<Image> {
    let t = Tape::new();
    let out = warp_var(&t.constant(img.to_array()), &t.constant(mesh.as_array().clone()))?;
    let out = Image::from_array(&out.value())?;
    Ok(out)
}

/// Bilinear resampling of `img` at the `[h', w', 2]` pixel coordinates in
/// `grid`; samples outside the image read as zero.
pub fn remap(img: &Image, grid: &NdArray) -> Result<Image> {
    let t = Tape::new();
    let out = t.constant(img.to_array()).grid_sample(&t.constant(grid.clone()))?;
    let out = Image::from_array(&out.value())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::fd::{check_gradients, FD_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn regular_mesh_corners_and_spacing() {
        let m = regular_mesh(2, 2, 100, 100).unwrap();
        assert_eq!(m.vertex(0, 0), [0.0, 0.0]);
        assert_eq!(m.vertex(0, 1), [99.0, 0.0]);
        assert_eq!(m.vertex(1, 0), [0.0, 99.0]);
        assert_eq!(m.vertex(1, 1), [99.0, 99.0]);

        let m = regular_mesh(13, 13, 128, 128).unwrap();
        assert_eq!((m.rows(), m.cols()), (13, 13));
        let step = m.vertex(0, 1)[0] - m.vertex(0, 0)[0];
        for c in 1..13 {
            let d = m.vertex(5, c)[0] - m.vertex(5, c - 1)[0];
            assert!(d > 0.0 && (d - step).abs() < 1e-12);
            let d = m.vertex(c, 5)[1] - m.vertex(c - 1, 5)[1];
            assert!(d > 0.0 && (d - step).abs() < 1e-12);
        }
        assert!(regular_mesh(1, 4, 10, 10).is_err());
        assert!(regular_mesh(4, 4, 1, 10).is_err());
    }

    #[test]
    fn dlt_identity_and_translation() {
        let h = dlt_solve(&GlobalOffsets::default(), 64, 80).unwrap();
        assert_eq!(h, Homography::identity());

        let h = dlt_solve(&GlobalOffsets::translation(5.0, -3.0), 64, 80).unwrap();
        let want = [[1.0, 0.0, 5.0], [0.0, 1.0, -3.0], [0.0, 0.0, 1.0]];
        for (r, wr) in h.0.iter().zip(&want) {
            for (a, b) in r.iter().zip(wr) {
                assert!((a - b).abs() < 1e-12, "{h:?}");
            }
        }
    }

    #[test]
    fn dlt_rejects_collinear_corners() {
        // Push the top-right corner onto the diagonal between the others.
        let mut o = GlobalOffsets::default();
        o.0[1] = [-99.0 / 2.0 + 0.0, 99.0 / 2.0];
        o.0[0] = [0.0, 0.0];
        let err = dlt_solve(&o, 100, 100);
        assert!(err.is_err());
        let all_same = GlobalOffsets([[0.0, 0.0], [-99.0, 0.0], [0.0, -99.0], [-99.0, -99.0]]);
        assert!(matches!(dlt_solve(&all_same, 100, 100), Err(Error::Degenerate(_))));
    }

    #[test]
    fn dlt_corner_roundtrip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (h, w) = (rng.gen_range(16..200), rng.gen_range(16..200));
            let o = GlobalOffsets(std::array::from_fn(|_| [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)]));
            let hom = dlt_solve(&o, h, w).unwrap();
            for (c, d) in image_corners(h, w).iter().zip(&o.0) {
                let p = hom.project(c[0], c[1]).unwrap();
                assert!((p[0] - c[0] - d[0]).abs() < 1e-8 && (p[1] - c[1] - d[1]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn apply_homography_cases() {
        let m = regular_mesh(5, 4, 40, 30).unwrap();
        assert_eq!(apply_homography(&m, &Homography::identity()).unwrap(), m);

        let t = Homography([[1.0, 0.0, 2.5], [0.0, 1.0, -1.0], [0.0, 0.0, 1.0]]);
        let moved = apply_homography(&m, &t).unwrap();
        for r in 0..5 {
            for c in 0..4 {
                let (a, b) = (m.vertex(r, c), moved.vertex(r, c));
                assert!((b[0] - a[0] - 2.5).abs() < 1e-12 && (b[1] - a[1] + 1.0).abs() < 1e-12);
            }
        }

        let o = GlobalOffsets([[1.0, 2.0], [-3.0, 1.5], [2.0, -2.5], [0.5, 3.0]]);
        let hom = dlt_solve(&o, 40, 30).unwrap();
        let back = apply_homography(&apply_homography(&m, &hom).unwrap(), &hom.inverse().unwrap()).unwrap();
        let err = back.as_array().zip_map(m.as_array(), |a, b| a - b).unwrap().max_abs();
        assert!(err < 1e-9, "{err}");

        let bad = Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(apply_homography(&m, &bad).is_err());
    }

    #[test]
    fn assemble_cases() {
        let m = regular_mesh(4, 4, 32, 32).unwrap();
        let zero = LocalOffsets::zeros(4, 4);
        assert_eq!(assemble_final_mesh(&m, &GlobalOffsets::default(), &zero, 32, 32).unwrap(), m);

        let shift = LocalOffsets(NdArray::from_fn(&[4, 4, 2], |i| if i % 2 == 0 { 2.0 } else { 0.0 }));
        let s = assemble_final_mesh(&m, &GlobalOffsets::default(), &shift, 32, 32).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(s.vertex(r, c), [m.vertex(r, c)[0] + 2.0, m.vertex(r, c)[1]]);
            }
        }

        let o = GlobalOffsets([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.5], [0.5, 0.5]]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l1 = LocalOffsets(NdArray::from_fn(&[4, 4, 2], |_| rng.gen_range(-1.0..1.0)));
        let l2 = LocalOffsets(NdArray::from_fn(&[4, 4, 2], |_| rng.gen_range(-1.0..1.0)));
        let sum = LocalOffsets(l1.0.zip_map(&l2.0, |a, b| a + b).unwrap());
        let a = assemble_final_mesh(&m, &o, &sum, 32, 32).unwrap();
        let b = assemble_final_mesh(&m, &o, &l1, 32, 32).unwrap().displaced(&l2).unwrap();
        assert!(a.as_array().zip_map(b.as_array(), |x, y| x - y).unwrap().max_abs() < 1e-12);
        assert!(assemble_final_mesh(&m, &o, &LocalOffsets::zeros(3, 4), 32, 32).is_err());
    }

    #[test]
    fn flow_identity_and_translation() {
        let (h, w) = (23, 31);
        let m = regular_mesh(5, 7, h, w).unwrap();
        let f = mesh_to_flow(&m, h, w).unwrap();
        for y in 0..h {
            for x in 0..w {
                let i = 2 * (y * w + x);
                assert_eq!((f.data()[i], f.data()[i + 1]), (x as f64, y as f64));
            }
        }
        let shifted = m.displaced(&LocalOffsets(NdArray::from_fn(&[5, 7, 2], |i| if i % 2 == 0 { 2.0 } else { 0.0 }))).unwrap();
        let f = mesh_to_flow(&shifted, h, w).unwrap();
        for y in 0..h {
            for x in 0..w {
                let i = 2 * (y * w + x);
                assert!((f.data()[i] - (x as f64 + 2.0)).abs() < 1e-12);
                assert_eq!(f.data()[i + 1], y as f64);
            }
        }
    }

    #[test]
    fn flow_from_homography_exact_at_vertices() {
        let (h, w) = (41, 41);
        let m = regular_mesh(6, 6, h, w).unwrap();
        let o = GlobalOffsets([[2.0, 1.0], [-1.0, 2.0], [1.5, -2.0], [-2.0, -1.0]]);
        let hom = dlt_solve(&o, h, w).unwrap();
        let f = mesh_to_flow(&apply_homography(&m, &hom).unwrap(), h, w).unwrap();
        let mut worst = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                let i = 2 * (y * w + x);
                let p = hom.project(x as f64, y as f64).unwrap();
                let e = (f.data()[i] - p[0]).abs().max((f.data()[i + 1] - p[1]).abs());
                worst = worst.max(e);
                if x % 8 == 0 && y % 8 == 0 {
                    assert!(e < 1e-9, "vertex ({x},{y}) off by {e}");
                }
            }
        }
        // Bilinear-per-cell approximation error of a mild homography.
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn warp_and_mask_cases() {
        let (h, w) = (16, 20);
        let img = Image::from_fn(h, w, 3, |c, y, x| ((x * 3 + y * 5 + c) % 11) as f64 / 10.0).unwrap();
        let m = regular_mesh(4, 5, h, w).unwrap();
        assert_eq!(warp_image(&img, &m).unwrap(), img);
        assert_eq!(overlap_mask(&m, h, w).unwrap(), Mask::full(h, w));

        let off = LocalOffsets(NdArray::from_fn(&[4, 5, 2], |i| if i % 2 == 0 { w as f64 } else { 0.0 }));
        assert_eq!(overlap_mask(&m.displaced(&off).unwrap(), h, w).unwrap().count(), 0);

        let half = LocalOffsets(NdArray::from_fn(&[4, 5, 2], |i| if i % 2 == 0 { w as f64 / 2.0 } else { 0.0 }));
        let mask = overlap_mask(&m.displaced(&half).unwrap(), h, w).unwrap();
        for y in 0..h {
            for x in 0..w {
                let expect = x < w / 2;
                if x + 1 < w / 2 || x > w / 2 {
                    assert_eq!(mask.get(y, x), expect, "({x},{y})");
                }
            }
        }
    }

    #[test]
    fn dlt_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for seed in 0..5 {
            let o = NdArray::from_fn(&[4, 2], |_| rng.gen_range(-4.0..4.0));
            let err = check_gradients(&[o], &[true], seed, FD_STEP, |_, v| dlt_solve_var(&v[0], 32, 48)).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn homography_and_flow_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts = NdArray::from_fn(&[5, 2], |_| rng.gen_range(0.0..20.0));
        let hom = NdArray::new(&[3, 3], vec![1.1, 0.05, 2.0, -0.03, 0.95, -1.0, 1e-3, -2e-3, 1.0]).unwrap();
        let err = check_gradients(&[hom], &[true], 13, FD_STEP, |_, v| apply_homography_var(&pts, &v[0])).unwrap();
        assert!(err < 1e-6, "{err}");

        let base = regular_mesh(3, 4, 9, 11).unwrap().into_array();
        let mesh = NdArray::new(base.shape(), base.data().iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let err = check_gradients(&[mesh], &[true], 14, FD_STEP, |_, v| mesh_to_flow_var(&v[0], 9, 11)).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn warp_mean_gradient_wrt_mesh() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (h, w) = (12, 14);
        let img = NdArray::from_fn(&[1, h, w], |i| ((i % w) as f64 * 0.4).sin() * 0.5 + 0.5);
        let base = regular_mesh(3, 3, h, w).unwrap().into_array();
        let mesh = NdArray::new(base.shape(), base.data().iter().map(|v| v + rng.gen_range(-0.4..0.4) + 0.13).collect()).unwrap();
        let err = check_gradients(&[img, mesh], &[false, true], 15, FD_STEP, |_, v| warp_var(&v[0], &v[1])?.mean()).unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
