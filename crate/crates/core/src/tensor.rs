//! Dense row-major `f64` tensors and the numerical kernels the autodiff
//! tape is built on.
//!
//! Image tensors are laid out NCHW. Kernels here are plain functions over
//! slices; gradient bookkeeping lives in [`crate::autograd`].

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.rank(), 4, "expected NCHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.data.len(), "reshape {:?} -> {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Item `b` of the leading axis as its own tensor with leading dim 1.
    pub fn select_item(&self, b: usize) -> Tensor {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::new(shape, self.data[b * per..(b + 1) * per].to_vec())
    }

    /// Stack tensors along a new (or existing size-1) leading axis.
    pub fn stack(items: &[&Tensor]) -> Tensor {
        assert!(!items.is_empty());
        let inner: Vec<usize> = if items[0].shape.first() == Some(&1) {
            items[0].shape[1..].to_vec()
        } else {
            items[0].shape.clone()
        };
        let mut data = Vec::with_capacity(items.len() * numel(&inner));
        for t in items {
            assert_eq!(t.numel(), numel(&inner), "stack: ragged items");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor::new(shape, data)
    }
}

// ---------------------------------------------------------------------------
// Broadcasting and reductions

/// Numpy-style broadcast of two equal-rank shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Strides for reading `shape` while iterating over `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    shape
        .iter()
        .zip(out)
        .zip(own)
        .map(|((&s, &o), st)| if s == 1 && o != 1 { 0 } else { st })
        .collect()
}

/// Visit every multi-index of `out` in row-major order, passing the linear
/// offsets into each strided operand.
fn for_each_offset2(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for lin in 0..n {
        f(lin, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(&a.shape, &b.shape)
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape, b.shape));
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![0.0; numel(&out)];
    for_each_offset2(&out, &sa, &sb, |lin, oa, ob| data[lin] = f(a.data[oa], b.data[ob]));
    Tensor::new(out, data)
}

/// Sum `t` down to `shape`, where `shape` broadcasts to `t.shape()`.
pub fn reduce_to_shape(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape == shape {
        return t.clone();
    }
    let so = broadcast_strides(shape, &t.shape);
    let ident = strides_of(&t.shape);
    let mut out = vec![0.0; numel(shape)];
    for_each_offset2(&t.shape, &ident, &so, |_, it, io| out[io] += t.data[it]);
    Tensor::new(shape.to_vec(), out)
}

/// Shape with the given axes collapsed to 1.
pub fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}

/// Max over `axes` (kept as size 1) with the flat argmax of each output.
pub fn max_axes(t: &Tensor, axes: &[usize]) -> (Tensor, Vec<usize>) {
    let shape = reduced_shape(&t.shape, axes);
    let so = broadcast_strides(&shape, &t.shape);
    let ident = strides_of(&t.shape);
    let mut out = vec![f64::NEG_INFINITY; numel(&shape)];
    let mut arg = vec![0usize; numel(&shape)];
    for_each_offset2(&t.shape, &ident, &so, |_, it, io| {
        if t.data[it] > out[io] {
            out[io] = t.data[it];
            arg[io] = it;
        }
    });
    (Tensor::new(shape, out), arg)
}

pub fn permute(t: &Tensor, perm: &[usize]) -> Tensor {
    assert_eq!(perm.len(), t.rank());
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape[p]).collect();
    let src = strides_of(&t.shape);
    let read: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
    let ident = strides_of(&out_shape);
    let mut data = vec![0.0; t.numel()];
    for_each_offset2(&out_shape, &ident, &read, |lin, _, ir| data[lin] = t.data[ir]);
    Tensor::new(out_shape, data)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
    let first = parts[0].shape();
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut shape = first.to_vec();
    shape[axis] = total;
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for p in parts {
            assert_eq!(p.rank(), first.len());
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(shape, data)
}

pub fn narrow(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    assert!(start + len <= t.shape[axis], "narrow out of range");
    let outer: usize = t.shape[..axis].iter().product();
    let inner: usize = t.shape[axis + 1..].iter().product();
    let mut shape = t.shape.clone();
    shape[axis] = len;
    let mut data = Vec::with_capacity(numel(&shape));
    let full = t.shape[axis] * inner;
    for o in 0..outer {
        let base = o * full + start * inner;
        data.extend_from_slice(&t.data[base..base + len * inner]);
    }
    Tensor::new(shape, data)
}

/// Scatter-add `part` into a zero tensor of `full_shape` at `start` along `axis`.
pub fn unnarrow(part: &Tensor, full_shape: &[usize], axis: usize, start: usize) -> Tensor {
    let outer: usize = full_shape[..axis].iter().product();
    let inner: usize = full_shape[axis + 1..].iter().product();
    let len = part.shape[axis];
    let mut out = Tensor::zeros(full_shape);
    let full = full_shape[axis] * inner;
    for o in 0..outer {
        let dst = o * full + start * inner;
        let src = o * len * inner;
        out.data[dst..dst + len * inner].copy_from_slice(&part.data[src..src + len * inner]);
    }
    out
}

// ---------------------------------------------------------------------------
// Matrix products

/// `C = alpha * op(A) * op(B) + beta * C` on row-major slices, where the
/// transposes are expressed through strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe in-bounds row-major views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batched `[.., m, k] x [.., k, n]` with identical leading dims.
pub fn batched_matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Tensor {
    let ra = a.rank();
    assert!(ra >= 2 && ra == b.rank(), "matmul rank mismatch");
    assert_eq!(a.shape[..ra - 2], b.shape[..ra - 2], "matmul batch dims");
    let (am, ak) = (a.shape[ra - 2], a.shape[ra - 1]);
    let (bk, bn) = (b.shape[ra - 2], b.shape[ra - 1]);
    let (m, k) = if trans_a { (ak, am) } else { (am, ak) };
    let (k2, n) = if trans_b { (bn, bk) } else { (bk, bn) };
    assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", a.shape, b.shape);
    let batch: usize = a.shape[..ra - 2].iter().product();
    let mut shape = a.shape[..ra - 2].to_vec();
    shape.extend([m, n]);
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a.data[i * am * ak..(i + 1) * am * ak],
            trans_a,
            &b.data[i * bk * bn..(i + 1) * bk * bn],
            trans_b,
            &mut out[i * m * n..(i + 1) * m * n],
            0.0,
        );
    }
    Tensor::new(shape, out)
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn same3x3() -> Self {
        Self { stride: 1, padding: 1, groups: 1 }
    }

    pub fn pointwise() -> Self {
        Self { stride: 1, padding: 0, groups: 1 }
    }

    pub fn out_size(&self, size: usize, k: usize) -> usize {
        (size + 2 * self.padding - k) / self.stride + 1
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
    col: &mut [f64],
) {
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    let hw_out = ho * wo;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ki as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kj as isize;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    let hw_out = ho * wo;
    for c in 0..channels {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ki as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = ox as isize * s - p + kj as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

struct ConvDims {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
}

fn conv_dims(x: &[usize], weight: &[usize], geom: ConvGeom) -> ConvDims {
    assert_eq!(x.len(), 4, "conv input must be NCHW");
    assert_eq!(weight.len(), 4, "conv weight must be OIHW");
    let (b, cin, h, w) = (x[0], x[1], x[2], x[3]);
    let (cout, cin_g, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
    let g = geom.groups;
    assert!(cin % g == 0 && cout % g == 0, "channels not divisible by groups");
    assert_eq!(cin / g, cin_g, "weight in-channels {cin_g} vs input {cin}/{g}");
    assert!(h + 2 * geom.padding >= kh && w + 2 * geom.padding >= kw, "kernel larger than input");
    ConvDims {
        b,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ho: geom.out_size(h, kh),
        wo: geom.out_size(w, kw),
        cin_g,
        cout_g: cout / g,
    }
}

pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geom: ConvGeom) -> Tensor {
    let d = conv_dims(&x.shape, &weight.shape, geom);
    let k = d.cin_g * d.kh * d.kw;
    let hw = d.ho * d.wo;
    let mut out = vec![0.0; d.b * d.cout * hw];
    let mut col = vec![0.0; k * hw];
    for bi in 0..d.b {
        for g in 0..geom.groups {
            let xin = &x.data[(bi * d.cin + g * d.cin_g) * d.h * d.w..][..d.cin_g * d.h * d.w];
            im2col(xin, d.cin_g, d.h, d.w, d.kh, d.kw, geom, d.ho, d.wo, &mut col);
            let wg = &weight.data[g * d.cout_g * k..(g + 1) * d.cout_g * k];
            let og = &mut out[(bi * d.cout + g * d.cout_g) * hw..][..d.cout_g * hw];
            gemm(d.cout_g, k, hw, wg, false, &col, false, og, 0.0);
        }
        if let Some(bias) = bias {
            for c in 0..d.cout {
                let bv = bias.data[c];
                for v in &mut out[(bi * d.cout + c) * hw..][..hw] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(vec![d.b, d.cout, d.ho, d.wo], out)
}

/// Gradients of a convolution w.r.t. its input and weight (bias gradient is
/// the per-channel sum of `grad_out`, see [`conv2d_bias_grad`]).
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    geom: ConvGeom,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let d = conv_dims(&x.shape, &weight.shape, geom);
    let k = d.cin_g * d.kh * d.kw;
    let hw = d.ho * d.wo;
    let mut gx = need_input.then(|| vec![0.0; x.numel()]);
    let mut gw = need_weight.then(|| vec![0.0; weight.numel()]);
    let mut col = vec![0.0; k * hw];
    for bi in 0..d.b {
        for g in 0..geom.groups {
            let go = &grad_out.data[(bi * d.cout + g * d.cout_g) * hw..][..d.cout_g * hw];
            let wg = &weight.data[g * d.cout_g * k..(g + 1) * d.cout_g * k];
            if let Some(gw) = gw.as_mut() {
                let xin = &x.data[(bi * d.cin + g * d.cin_g) * d.h * d.w..][..d.cin_g * d.h * d.w];
                im2col(xin, d.cin_g, d.h, d.w, d.kh, d.kw, geom, d.ho, d.wo, &mut col);
                gemm(d.cout_g, hw, k, go, false, &col, true, &mut gw[g * d.cout_g * k..(g + 1) * d.cout_g * k], 1.0);
            }
            if let Some(gx) = gx.as_mut() {
                gemm(k, d.cout_g, hw, wg, true, go, false, &mut col, 0.0);
                let dst = &mut gx[(bi * d.cin + g * d.cin_g) * d.h * d.w..][..d.cin_g * d.h * d.w];
                col2im(&col, d.cin_g, d.h, d.w, d.kh, d.kw, geom, d.ho, d.wo, dst);
            }
        }
    }
    (
        gx.map(|v| Tensor::new(x.shape.clone(), v)),
        gw.map(|v| Tensor::new(weight.shape.clone(), v)),
    )
}

pub fn conv2d_bias_grad(grad_out: &Tensor) -> Tensor {
    let (b, c, h, w) = grad_out.dims4();
    let mut out = vec![0.0; c];
    for bi in 0..b {
        for (ci, o) in out.iter_mut().enumerate() {
            *o += grad_out.data[(bi * c + ci) * h * w..][..h * w].iter().sum::<f64>();
        }
    }
    Tensor::new(vec![c], out)
}

// ---------------------------------------------------------------------------
// Spatial resampling

/// 2x2/stride-2 max pooling with ceil-mode edges. Returns argmax offsets.
pub fn max_pool2x2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (b, c, h, w) = x.dims4();
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut arg = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut at = base + 2 * oy * w + 2 * ox;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for xx in 2 * ox..(2 * ox + 2).min(w) {
                        let i = base + y * w + xx;
                        if x.data[i] > best {
                            best = x.data[i];
                            at = i;
                        }
                    }
                }
                out.push(best);
                arg.push(at);
            }
        }
    }
    (Tensor::new(vec![b, c, ho, wo], out), arg)
}

/// Non-overlapping `k`x`k` average pooling; partial edge windows average
/// over their valid pixels.
pub fn avg_pool(x: &Tensor, k: usize) -> Tensor {
    let (b, c, h, w) = x.dims4();
    let (ho, wo) = (h.div_ceil(k), w.div_ceil(k));
    let mut out = vec![0.0; b * c * ho * wo];
    for plane in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let (y1, x1) = ((oy * k + k).min(h), (ox * k + k).min(w));
                let mut acc = 0.0;
                for y in oy * k..y1 {
                    for xx in ox * k..x1 {
                        acc += x.data[plane * h * w + y * w + xx];
                    }
                }
                out[plane * ho * wo + oy * wo + ox] = acc / ((y1 - oy * k) * (x1 - ox * k)) as f64;
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out)
}

pub fn avg_pool_backward(grad_out: &Tensor, input_shape: &[usize], k: usize) -> Tensor {
    let (b, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (_, _, ho, wo) = grad_out.dims4();
    let mut gx = vec![0.0; b * c * h * w];
    for plane in 0..b * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let (y1, x1) = ((oy * k + k).min(h), (ox * k + k).min(w));
                let g = grad_out.data[plane * ho * wo + oy * wo + ox] / ((y1 - oy * k) * (x1 - ox * k)) as f64;
                for y in oy * k..y1 {
                    for xx in ox * k..x1 {
                        gx[plane * h * w + y * w + xx] += g;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

pub fn upsample_nearest2x(x: &Tensor) -> Tensor {
    let (b, c, h, w) = x.dims4();
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; b * c * ho * wo];
    for plane in 0..b * c {
        for y in 0..ho {
            for xx in 0..wo {
                out[plane * ho * wo + y * wo + xx] = x.data[plane * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out)
}

pub fn upsample_nearest2x_backward(grad_out: &Tensor) -> Tensor {
    let (b, c, ho, wo) = grad_out.dims4();
    let (h, w) = (ho / 2, wo / 2);
    let mut gx = vec![0.0; b * c * h * w];
    for plane in 0..b * c {
        for y in 0..ho {
            for xx in 0..wo {
                gx[plane * h * w + (y / 2) * w + xx / 2] += grad_out.data[plane * ho * wo + y * wo + xx];
            }
        }
    }
    Tensor::new(vec![b, c, h, w], gx)
}

/// Replicate-pad the two spatial axes by `p` on every side.
pub fn pad_replicate(x: &Tensor, p: usize) -> Tensor {
    let (b, c, h, w) = x.dims4();
    let (ho, wo) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; b * c * ho * wo];
    for plane in 0..b * c {
        for y in 0..ho {
            let sy = y.saturating_sub(p).min(h - 1);
            for xx in 0..wo {
                let sx = xx.saturating_sub(p).min(w - 1);
                out[plane * ho * wo + y * wo + xx] = x.data[plane * h * w + sy * w + sx];
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out)
}

pub fn pad_replicate_backward(grad_out: &Tensor, p: usize) -> Tensor {
    let (b, c, ho, wo) = grad_out.dims4();
    let (h, w) = (ho - 2 * p, wo - 2 * p);
    let mut gx = vec![0.0; b * c * h * w];
    for plane in 0..b * c {
        for y in 0..ho {
            let sy = y.saturating_sub(p).min(h - 1);
            for xx in 0..wo {
                let sx = xx.saturating_sub(p).min(w - 1);
                gx[plane * h * w + sy * w + sx] += grad_out.data[plane * ho * wo + y * wo + xx];
            }
        }
    }
    Tensor::new(vec![b, c, h, w], gx)
}

/// Softmax over the last axis, stabilized by the row max.
pub fn softmax_last(x: &Tensor) -> Tensor {
    let n = *x.shape.last().expect("softmax on scalar");
    let mut out = x.data.clone();
    for row in out.chunks_mut(n) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Backward of a last-axis softmax given its output `y`.
pub fn softmax_last_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let n = *y.shape.last().unwrap();
    let mut gx = vec![0.0; y.numel()];
    for ((gy, yy), gx) in grad_out.data.chunks(n).zip(y.data.chunks(n)).zip(gx.chunks_mut(n)) {
        let dot: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
        for i in 0..n {
            gx[i] = yy[i] * (gy[i] - dot);
        }
    }
    Tensor::new(y.shape.clone(), gx)
}
