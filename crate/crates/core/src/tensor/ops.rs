use super::array::inverse_axes;
use super::gemm::gemm;
use super::{NdArray, Var};
use crate::error::{shape_err, Error, Result};

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return shape_err(op, format!("{sa:?} vs {sb:?}"));
    }
    Ok(())
}

impl Var {
    pub fn add(&self, other: &Var) -> Result<Var> {
        same_shape("add", self, other)?;
        let value = self.value().zip_map(&other.value(), |a, b| a + b)?;
        self.tape().record(
            "add",
            &[self, other],
            value,
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        same_shape("sub", self, other)?;
        let value = self.value().zip_map(&other.value(), |a, b| a - b)?;
        self.tape().record(
            "sub",
            &[self, other],
            value,
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.scale(-1.0))]),
        )
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        same_shape("mul", self, other)?;
        let value = self.value().zip_map(&other.value(), |a, b| a * b)?;
        self.tape().record(
            "mul",
            &[self, other],
            value,
            Box::new(|g, x, _, need| {
                let ga = need[0].then(|| g.zip_map(x[1], |g, b| g * b).unwrap());
                let gb = need[1].then(|| g.zip_map(x[0], |g, a| g * a).unwrap());
                vec![ga, gb]
            }),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Result<Var> {
        let value = self.value().map(|v| v + s);
        self.tape().record(
            "add_scalar",
            &[self],
            value,
            Box::new(|g, _, _, _| vec![Some(g.clone())]),
        )
    }

    pub fn mul_scalar(&self, s: f64) -> Result<Var> {
        let value = self.value().map(|v| v * s);
        self.tape().record(
            "mul_scalar",
            &[self],
            value,
            Box::new(move |g, _, _, _| vec![Some(g.scale(s))]),
        )
    }

    /// |x|, with subgradient 0 at the origin.
    pub fn abs(&self) -> Result<Var> {
        let value = self.value().map(f64::abs);
        self.tape().record(
            "abs",
            &[self],
            value,
            Box::new(|g, x, _, _| {
                let sign = |v: f64| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                vec![Some(g.zip_map(x[0], |g, v| g * sign(v)).unwrap())]
            }),
        )
    }

    /// max(x, 0), with subgradient 0 at the origin.
    pub fn relu(&self) -> Result<Var> {
        let value = self.value().map(|v| v.max(0.0));
        self.tape().record(
            "relu",
            &[self],
            value,
            Box::new(|g, x, _, _| {
                vec![Some(
                    g.zip_map(x[0], |g, v| if v > 0.0 { g } else { 0.0 }).unwrap(),
                )]
            }),
        )
    }

    pub fn sum(&self) -> Result<Var> {
        let value = NdArray::scalar(self.value().sum());
        self.tape().record(
            "sum",
            &[self],
            value,
            Box::new(|g, x, _, _| vec![Some(NdArray::full(x[0].shape(), g.item()))]),
        )
    }

    pub fn mean(&self) -> Result<Var> {
        let v = self.value();
        if v.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let n = v.len() as f64;
        let value = NdArray::scalar(v.sum() / n);
        self.tape().record(
            "mean",
            &[self],
            value,
            Box::new(move |g, x, _, _| vec![Some(NdArray::full(x[0].shape(), g.item() / n))]),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let old = self.shape();
        let value = (*self.value()).clone().reshape(shape)?;
        self.tape().record(
            "reshape",
            &[self],
            value,
            Box::new(move |g, _, _, _| vec![Some(g.clone().reshape(&old).unwrap())]),
        )
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var> {
        let value = self.value().permute(axes)?;
        let inv = inverse_axes(axes);
        self.tape().record(
            "permute",
            &[self],
            value,
            Box::new(move |g, _, _, _| vec![Some(g.permute(&inv).unwrap())]),
        )
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value().data(), false, other.value().data(), false, &mut out, 0.0);
        let value = NdArray::new(&[m, n], out)?;
        self.tape().record(
            "matmul",
            &[self, other],
            value,
            Box::new(move |g, x, _, need| {
                let ga = need[0].then(|| {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, x[1].data(), true, &mut d, 0.0);
                    NdArray::new(&[m, k], d).unwrap()
                });
                let gb = need[1].then(|| {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, x[0].data(), true, g.data(), false, &mut d, 0.0);
                    NdArray::new(&[k, n], d).unwrap()
                });
                vec![ga, gb]
            }),
        )
    }

    /// Dense layer `W x + b` on the flattened input; `W` is `[out, in]`.
    pub fn linear(&self, weight: &Var, bias: &Var) -> Result<Var> {
        let (sw, sb) = (weight.shape(), bias.shape());
        let n_in: usize = self.shape().iter().product();
        if sw.len() != 2 || sw[1] != n_in || sb != [sw[0]] {
            return shape_err(
                "linear",
                format!("input of {n_in} values, weight {sw:?}, bias {sb:?}"),
            );
        }
        let n_out = sw[0];
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        let mut out = b.data().to_vec();
        for (o, row) in out.iter_mut().zip(w.data().chunks_exact(n_in)) {
            *o += row.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>();
        }
        let value = NdArray::new(&[n_out], out)?;
        let x_shape = x.shape().to_vec();
        self.tape().record(
            "linear",
            &[self, weight, bias],
            value,
            Box::new(move |g, inp, _, need| {
                let (x, w) = (inp[0].data(), inp[1].data());
                let gx = need[0].then(|| {
                    let mut d = vec![0.0; n_in];
                    for (&go, row) in g.data().iter().zip(w.chunks_exact(n_in)) {
                        for (di, wi) in d.iter_mut().zip(row) {
                            *di += go * wi;
                        }
                    }
                    NdArray::new(&x_shape, d).unwrap()
                });
                let gw = need[1].then(|| {
                    let mut d = Vec::with_capacity(n_out * n_in);
                    for &go in g.data() {
                        d.extend(x.iter().map(|xi| go * xi));
                    }
                    NdArray::new(&[n_out, n_in], d).unwrap()
                });
                vec![gx, gw, need[2].then(|| g.clone())]
            }),
        )
    }

    /// 2D cross-correlation of `[c_in, h, w]` with `[c_out, c_in, k, k]` weights.
    pub fn conv2d(
        &self,
        weight: &Var,
        bias: Option<&Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return shape_err("conv2d", format!("input {xs:?}, weight {ws:?}"));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d stride must be positive".into()));
        }
        if let Some(b) = bias {
            if b.shape() != [ws[0]] {
                return shape_err("conv2d", format!("bias {:?} for {} outputs", b.shape(), ws[0]));
            }
        }
        let geo = ConvGeometry::new(xs[0], xs[1], xs[2], ws[0], ws[2], stride, padding)?;
        let x = self.value();
        let w = weight.value();
        let mut out = vec![0.0; geo.c_out * geo.patches()];
        let cols = geo.im2col(x.data());
        gemm(
            geo.c_out,
            geo.patch_len(),
            geo.patches(),
            w.data(),
            false,
            cols.as_deref().unwrap_or(x.data()),
            false,
            &mut out,
            0.0,
        );
        if let Some(b) = bias {
            let b = b.value();
            for (plane, &bv) in out.chunks_exact_mut(geo.patches()).zip(b.data()) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = NdArray::new(&[geo.c_out, geo.out_h, geo.out_w], out)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.tape().record(
            "conv2d",
            &parents,
            value,
            Box::new(move |g, inp, _, need| {
                let (x, w) = (inp[0], inp[1]);
                let p = geo.patches();
                let kl = geo.patch_len();
                let mut res = Vec::with_capacity(3);
                let cols = geo.im2col(x.data());
                let cols_ref = cols.as_deref().unwrap_or(x.data());
                res.push(need[0].then(|| {
                    let mut dcols = vec![0.0; kl * p];
                    gemm(kl, geo.c_out, p, w.data(), true, g.data(), false, &mut dcols, 0.0);
                    let dx = if cols.is_some() { geo.col2im(&dcols) } else { dcols };
                    NdArray::new(x.shape(), dx).unwrap()
                }));
                res.push(need[1].then(|| {
                    let mut dw = vec![0.0; geo.c_out * kl];
                    gemm(geo.c_out, p, kl, g.data(), false, cols_ref, true, &mut dw, 0.0);
                    NdArray::new(w.shape(), dw).unwrap()
                }));
                if need.len() == 3 {
                    res.push(need[2].then(|| {
                        let db: Vec<f64> = g.data().chunks_exact(p).map(|c| c.iter().sum()).collect();
                        NdArray::new(&[geo.c_out], db).unwrap()
                    }));
                }
                res
            }),
        )
    }

    /// 2x2 max pooling with stride 2 on `[c, h, w]`. Odd extents behave as if
    /// padded bottom/right with negative infinity; ties go to the first
    /// element of the window in row-major order.
    pub fn maxpool2d(&self) -> Result<Var> {
        let s = self.shape();
        if s.len() != 3 {
            return shape_err("maxpool2d", format!("expected [c,h,w], got {s:?}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Empty("maxpool2d"));
        }
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let x = self.value();
        let arg = pool_argmax(x.data(), c, h, w);
        let value = NdArray::new(&[c, oh, ow], arg.iter().map(|&i| x.data()[i]).collect())?;
        self.tape().record(
            "maxpool2d",
            &[self],
            value,
            Box::new(move |g, inp, _, _| {
                let arg = pool_argmax(inp[0].data(), c, h, w);
                let mut d = NdArray::zeros(inp[0].shape());
                for (&i, &gv) in arg.iter().zip(g.data()) {
                    d.data_mut()[i] += gv;
                }
                vec![Some(d)]
            }),
        )
    }

    /// Sum of same-shaped vars, accumulated left to right.
    pub fn add_n(vars: &[Var]) -> Result<Var> {
        let first = vars.first().ok_or(Error::Empty("add_n"))?;
        let shape = first.shape();
        let mut acc = NdArray::zeros(&shape);
        for v in vars {
            if v.shape() != shape {
                return shape_err("add_n", format!("{:?} vs {shape:?}", v.shape()));
            }
            acc.add_assign(&v.value());
        }
        let refs: Vec<&Var> = vars.iter().collect();
        let n = vars.len();
        first.tape().record(
            "add_n",
            &refs,
            acc,
            Box::new(move |g, _, _, _| vec![Some(g.clone()); n]),
        )
    }

    /// Zero-pads each `[c_i, h_i, w_i]` input bottom/right to
    /// `[c_i, target_h, target_w]` and stacks them along the channel axis.
    pub fn pad_concat(xs: &[Var], target_h: usize, target_w: usize) -> Result<Var> {
        let first = xs.first().ok_or(Error::Empty("pad_concat"))?;
        let shapes: Vec<Vec<usize>> = xs.iter().map(Var::shape).collect();
        for s in &shapes {
            if s.len() != 3 {
                return shape_err("pad_concat", format!("expected [c,h,w], got {s:?}"));
            }
            if s[1] > target_h || s[2] > target_w {
                return shape_err(
                    "pad_concat",
                    format!("input {s:?} exceeds target {target_h}x{target_w}"),
                );
            }
        }
        let total_c: usize = shapes.iter().map(|s| s[0]).sum();
        let plane = target_h * target_w;
        let mut out = vec![0.0; total_c * plane];
        let mut base = 0;
        for (x, s) in xs.iter().zip(&shapes) {
            let v = x.value();
            for ci in 0..s[0] {
                for r in 0..s[1] {
                    let src = &v.data()[(ci * s[1] + r) * s[2]..][..s[2]];
                    out[(base + ci) * plane + r * target_w..][..s[2]].copy_from_slice(src);
                }
            }
            base += s[0];
        }
        let value = NdArray::new(&[total_c, target_h, target_w], out)?;
        let refs: Vec<&Var> = xs.iter().collect();
        first.tape().record(
            "pad_concat",
            &refs,
            value,
            Box::new(move |g, _, _, need| {
                let mut base = 0;
                let mut res = Vec::with_capacity(shapes.len());
                for (s, &nd) in shapes.iter().zip(need) {
                    res.push(nd.then(|| {
                        let mut d = Vec::with_capacity(s[0] * s[1] * s[2]);
                        for ci in 0..s[0] {
                            for r in 0..s[1] {
                                d.extend_from_slice(
                                    &g.data()[(base + ci) * plane + r * target_w..][..s[2]],
                                );
                            }
                        }
                        NdArray::new(s, d).unwrap()
                    }));
                    base += s[0];
                }
                res
            }),
        )
    }

    /// Bilinear sampling of `[c, h, w]` at absolute pixel coordinates
    /// `grid[h', w', (x, y)]`. Taps outside the image read as zero.
    pub fn grid_sample(&self, grid: &Var) -> Result<Var> {
        let s = self.shape();
        let gs = grid.shape();
        if s.len() != 3 || gs.len() != 3 || gs[2] != 2 {
            return shape_err("grid_sample", format!("image {s:?}, grid {gs:?}"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (gs[0], gs[1]);
        let img = self.value();
        let gr = grid.value();
        let mut out = vec![0.0; c * oh * ow];
        let plane = oh * ow;
        for (p, xy) in gr.data().chunks_exact(2).enumerate() {
            let taps = BilinearTaps::new(xy[0], xy[1], h, w);
            for ci in 0..c {
                let src = &img.data()[ci * h * w..][..h * w];
                out[ci * plane + p] = taps.sample(src);
            }
        }
        let value = NdArray::new(&[c, oh, ow], out)?;
        self.tape().record(
            "grid_sample",
            &[self, grid],
            value,
            Box::new(move |g, inp, _, need| {
                let (img, gr) = (inp[0], inp[1]);
                let mut dimg = need[0].then(|| NdArray::zeros(img.shape()));
                let mut dgrid = need[1].then(|| NdArray::zeros(gr.shape()));
                for (p, xy) in gr.data().chunks_exact(2).enumerate() {
                    let taps = BilinearTaps::new(xy[0], xy[1], h, w);
                    let (mut gx, mut gy) = (0.0, 0.0);
                    for ci in 0..c {
                        let go = g.data()[ci * plane + p];
                        if let Some(d) = dimg.as_mut() {
                            taps.scatter(&mut d.data_mut()[ci * h * w..][..h * w], go);
                        }
                        if dgrid.is_some() {
                            let (dx, dy) = taps.coord_grad(&img.data()[ci * h * w..][..h * w]);
                            gx += go * dx;
                            gy += go * dy;
                        }
                    }
                    if let Some(d) = dgrid.as_mut() {
                        d.data_mut()[2 * p] = gx;
                        d.data_mut()[2 * p + 1] = gy;
                    }
                }
                vec![dimg, dgrid]
            }),
        )
    }
}

/// The four neighbours of a sampling point and their bilinear weights.
struct BilinearTaps {
    // (x0, y0) and the fractional offsets; indices may lie outside the image.
    x0: i64,
    y0: i64,
    fx: f64,
    fy: f64,
    h: i64,
    w: i64,
}

impl BilinearTaps {
    fn new(x: f64, y: f64, h: usize, w: usize) -> Self {
        let (xf, yf) = (x.floor(), y.floor());
        Self {
            x0: xf as i64,
            y0: yf as i64,
            fx: x - xf,
            fy: y - yf,
            h: h as i64,
            w: w as i64,
        }
    }

    fn index(&self, dx: i64, dy: i64) -> Option<usize> {
        let (x, y) = (self.x0 + dx, self.y0 + dy);
        (x >= 0 && y >= 0 && x < self.w && y < self.h).then(|| (y * self.w + x) as usize)
    }

    fn weights(&self) -> [(i64, i64, f64); 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (0, 0, (1.0 - fx) * (1.0 - fy)),
            (1, 0, fx * (1.0 - fy)),
            (0, 1, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ]
    }

    fn read(&self, src: &[f64], dx: i64, dy: i64) -> f64 {
        self.index(dx, dy).map_or(0.0, |i| src[i])
    }

    fn sample(&self, src: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (dx, dy, wt) in self.weights() {
            if let Some(i) = self.index(dx, dy) {
                acc += wt * src[i];
            }
        }
        acc
    }

    fn scatter(&self, dst: &mut [f64], g: f64) {
        for (dx, dy, wt) in self.weights() {
            if let Some(i) = self.index(dx, dy) {
                dst[i] += wt * g;
            }
        }
    }

    fn coord_grad(&self, src: &[f64]) -> (f64, f64) {
        let v00 = self.read(src, 0, 0);
        let v10 = self.read(src, 1, 0);
        let v01 = self.read(src, 0, 1);
        let v11 = self.read(src, 1, 1);
        let dx = (v10 - v00) * (1.0 - self.fy) + (v11 - v01) * self.fy;
        let dy = (v01 - v00) * (1.0 - self.fx) + (v11 - v10) * self.fx;
        (dx, dy)
    }
}

fn pool_argmax(x: &[f64], c: usize, h: usize, w: usize) -> Vec<usize> {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                    if y >= h || xx >= w {
                        continue;
                    }
                    let i = (ci * h + y) * w + xx;
                    if best == usize::MAX || x[i] > x[best] {
                        best = i;
                    }
                }
                arg.push(best);
            }
        }
    }
    arg
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if k == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return shape_err(
                "conv2d",
                format!("kernel {k} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            );
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn patches(&self) -> usize {
        self.out_h * self.out_w
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// `None` when the input is already its own column matrix (1x1, stride 1, no padding).
    fn im2col(&self, x: &[f64]) -> Option<Vec<f64>> {
        if self.k == 1 && self.stride == 1 && self.pad == 0 {
            return None;
        }
        let p = self.patches();
        let mut cols = vec![0.0; self.patch_len() * p];
        for ci in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * p..][..p];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + ky) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let src = &x[(ci * self.h + y as usize) * self.w..][..self.w];
                        for ox in 0..self.out_w {
                            let xx = (ox * self.stride + kx) as isize - self.pad as isize;
                            if xx >= 0 && xx < self.w as isize {
                                dst[oy * self.out_w + ox] = src[xx as usize];
                            }
                        }
                    }
                }
            }
        }
        Some(cols)
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let p = self.patches();
        let mut x = vec![0.0; self.c_in * self.h * self.w];
        for ci in 0..self.c_in {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * p..][..p];
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + ky) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(ci * self.h + y as usize) * self.w..][..self.w];
                        for ox in 0..self.out_w {
                            let xx = (ox * self.stride + kx) as isize - self.pad as isize;
                            if xx >= 0 && xx < self.w as isize {
                                dst[xx as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}
