//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape once in reverse and returns gradients for leaf nodes.
//! Images are `[C, H, W]`, token sequences `[N, D]`.

use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pinhole intrinsics used by [`Tape::project`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pinhole<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
}

/// Depth below which projection clamps `z`.
pub const MIN_PROJECT_DEPTH: f64 = 1e-3;

const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Identity(Var),
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<T> },
    ConcatCols(Vec<Var>),
    Concat(Vec<Var>),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    Transpose(Var),
    Conv2d { x: Var, w: Var, b: Var },
    AvgPool { x: Var, k: usize },
    Upsample2(Var),
    GlobalAvgPool(Var),
    Bilinear { fmap: Var, pts: Var },
    Project { pts: Var, cam: Pinhole<T> },
    Clamp { a: Var, lo: T, hi: T },
    LogSumExp(Var),
    Index(Var, usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, `None` if it does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Record of a forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Unfolds `x` (`[C,H,W]`) into `[C*k*k, H*W]` patches with zero padding `k/2`.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = k / 2;
    let hw = h * w;
    let mut cols = vec![T::zero(); c * k * k * hw];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[ch * hw + iy as usize * w..];
                    let off = kx as isize - pad as isize;
                    for xx in x_lo..x_hi {
                        dst[y * w + xx] = src[(xx as isize + off) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = k / 2;
    let hw = h * w;
    let mut x = vec![T::zero(); c * hw];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ch * hw + iy as usize * w;
                    let off = kx as isize - pad as isize;
                    for xx in x_lo..x_hi {
                        x[base + (xx as isize + off) as usize] += src[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

/// Bilinear stencil for one coordinate: lower index, upper index, weight of
/// the upper index, and whether the coordinate was inside the valid range.
fn stencil<T: Scalar>(p: T, size: usize) -> (usize, usize, T, bool) {
    let hi = cast::<T>((size - 1) as f64);
    let inside = p >= T::zero() && p <= hi;
    let q = p.max(T::zero()).min(hi);
    if size == 1 {
        return (0, 0, T::zero(), false);
    }
    let mut i0 = q.floor().to_usize().unwrap_or(0);
    if i0 > size - 2 {
        i0 = size - 2;
    }
    let wgt = q - cast::<T>(i0 as f64);
    (i0, i0 + 1, wgt, inside)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn unary(&mut self, a: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let ng = self.needs(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "element-wise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(va.shape(), data)
    }

    /// `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = crate::tensor::matmul(self.value(a), self.value(b));
        self.binary(a, b, value, Op::MatMul { a, b, trans_b: false })
    }

    /// `[m,k] x [n,k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul_nt inner dimensions {k} != {k2}");
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            1,
            k as isize,
            T::zero(),
            out.data_mut(),
            n as isize,
            1,
        );
        self.binary(a, b, out, Op::MatMul { a, b, trans_b: true })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (m, n) = self.value(x).dims2();
        assert_eq!(self.value(b).len(), n, "bias length mismatch");
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for r in 0..m {
            for (o, &bv) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        self.binary(x, b, out, Op::AddBias(x, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.unary(a, v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.unary(a, v, Op::Identity(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.unary(a, v, Op::Silu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.unary(a, v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.unary(a, v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        self.unary(a, v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.sqrt());
        self.unary(a, v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.unary(a, v, Op::Sum(a))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / cast(t.len() as f64));
        self.unary(a, v, Op::Mean(a))
    }

    /// Column means of `[m, n]`, shape `[1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = t.dims2();
        let mut out = vec![T::zero(); n];
        for r in 0..m {
            for (o, &x) in out.iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        let inv = T::one() / cast(m as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        let v = Tensor::from_vec(&[1, n], out);
        self.unary(a, v, Op::MeanRows(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = t.dims2();
        let mut out = t.data().to_vec();
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let v = Tensor::from_vec(&[m, n], out);
        self.unary(a, v, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let t = self.value(x);
        let (m, n) = t.dims2();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), n);
        assert_eq!(b.len(), n);
        let inv_n = T::one() / cast(n as f64);
        let mut out = vec![T::zero(); m * n];
        let mut rstd = Vec::with_capacity(m);
        for r in 0..m {
            let row = t.row(r);
            let mu = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_n;
            let rs = T::one() / (var + cast(LN_EPS)).sqrt();
            for c in 0..n {
                out[r * n + c] = (row[c] - mu) * rs * g[c] + b[c];
            }
            rstd.push(rs);
        }
        let v = Tensor::from_vec(&[m, n], out);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(v, Op::LayerNorm { x, gamma, beta, rstd }, ng)
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pm, pn) = self.value(p).dims2();
                assert_eq!(pm, m, "concat_cols row mismatch");
                pn
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = vec![T::zero(); m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..m {
                out[r * n + off..r * n + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_vec(&[m, n], out), Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Concatenates along the leading dimension; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rest = self.value(parts[0]).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &rest[..], "concat trailing shape mismatch");
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&rest);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_vec(&shape, data), Op::Concat(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let (m, n) = t.dims2();
        assert!(start + len <= n, "slice_cols out of range");
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let v = Tensor::from_vec(&[m, len], out);
        self.unary(a, v, Op::SliceCols { a, start })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let (m, n) = t.dims2();
        assert!(start + len <= m, "slice_rows out of range");
        let v = Tensor::from_vec(&[len, n], t.data()[start * n..(start + len) * n].to_vec());
        self.unary(a, v, Op::SliceRows { a, start })
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = t.dims2();
        let src = t.data();
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = src[r * n + c];
            }
        }
        let v = Tensor::from_vec(&[n, m], out);
        self.unary(a, v, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape);
        self.unary(a, v, Op::Identity(a))
    }

    /// Same-size 2-D convolution: `x` `[C,H,W]`, `w` `[Co,C,k,k]` (odd `k`),
    /// `b` `[Co]`, zero padding `k/2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (c, h, wd) = self.value(x).dims3();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be rank 4");
        assert_eq!(ws[1], c, "conv input channels {} != {}", ws[1], c);
        assert_eq!(ws[2], ws[3]);
        assert!(ws[2] % 2 == 1, "conv kernel must be odd");
        let (co, k) = (ws[0], ws[2]);
        let hw = h * wd;
        let ckk = c * k * k;
        let mut out = vec![T::zero(); co * hw];
        let bias = self.value(b).data();
        assert_eq!(bias.len(), co);
        for (o, &bv) in out.chunks_mut(hw).zip(bias) {
            o.iter_mut().for_each(|v| *v = bv);
        }
        let xin = self.value(x).data();
        let wdata = self.value(w).data();
        if k == 1 {
            T::gemm(co, ckk, hw, T::one(), wdata, ckk as isize, 1, xin, hw as isize, 1, T::one(), &mut out, hw as isize, 1);
        } else {
            let cols = im2col(xin, c, h, wd, k);
            T::gemm(co, ckk, hw, T::one(), wdata, ckk as isize, 1, &cols, hw as isize, 1, T::one(), &mut out, hw as isize, 1);
        }
        let v = Tensor::from_vec(&[co, h, wd], out);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(v, Op::Conv2d { x, w, b }, ng)
    }

    /// Non-overlapping `k x k` average pooling; `H` and `W` must be multiples of `k`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert!(h % k == 0 && w % k == 0, "avg_pool: {h}x{w} not divisible by {k}");
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * oh * ow];
        let inv = T::one() / cast((k * k) as f64);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ch * oh + y / k) * ow + xx / k] += src[(ch * h + y) * w + xx];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let v = Tensor::from_vec(&[c, oh, ow], out);
        self.unary(x, v, Op::AvgPool { x, k })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let v = Tensor::from_vec(&[c, oh, ow], out);
        self.unary(x, v, Op::Upsample2(x))
    }

    /// `[C,H,W]` to the `[1,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let hw = h * w;
        let inv = T::one() / cast(hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::from_vec(&[1, c], out);
        self.unary(x, v, Op::GlobalAvgPool(x))
    }

    /// Bilinear lookup of `fmap` (`[C,H,W]`) at pixel coordinates `pts`
    /// (`[N,2]`, columns `(u, v)` = (column, row)); coordinates are clamped
    /// to the grid. Output `[N, C]`.
    pub fn bilinear_sample(&mut self, fmap: Var, pts: Var) -> Var {
        let (c, h, w) = self.value(fmap).dims3();
        let (n, two) = self.value(pts).dims2();
        assert_eq!(two, 2, "bilinear_sample expects [N,2] coordinates");
        let f = self.value(fmap).data();
        let p = self.value(pts).data();
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            let (x0, x1, wx, _) = stencil(p[2 * i], w);
            let (y0, y1, wy, _) = stencil(p[2 * i + 1], h);
            let one = T::one();
            let w00 = (one - wx) * (one - wy);
            let w01 = wx * (one - wy);
            let w10 = (one - wx) * wy;
            let w11 = wx * wy;
            for ch in 0..c {
                let base = ch * h * w;
                out[i * c + ch] = w00 * f[base + y0 * w + x0]
                    + w01 * f[base + y0 * w + x1]
                    + w10 * f[base + y1 * w + x0]
                    + w11 * f[base + y1 * w + x1];
            }
        }
        let v = Tensor::from_vec(&[n, c], out);
        self.binary(fmap, pts, v, Op::Bilinear { fmap, pts })
    }

    /// Pinhole projection of `[N,3]` camera-frame points to `[N,2]` pixels.
    pub fn project(&mut self, pts: Var, cam: Pinhole<T>) -> Var {
        let (n, three) = self.value(pts).dims2();
        assert_eq!(three, 3, "project expects [N,3] points");
        let p = self.value(pts).data();
        let zmin = cast::<T>(MIN_PROJECT_DEPTH);
        let mut out = vec![T::zero(); 2 * n];
        for i in 0..n {
            let z = p[3 * i + 2].max(zmin);
            out[2 * i] = cam.fx * p[3 * i] / z + cam.cx;
            out[2 * i + 1] = cam.fy * p[3 * i + 1] / z + cam.cy;
        }
        let v = Tensor::from_vec(&[n, 2], out);
        self.unary(pts, v, Op::Project { pts, cam })
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.unary(a, v, Op::Clamp { a, lo, hi })
    }

    /// `log(sum(exp(a)))` over all elements, shape `[1]`.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let d = self.value(a).data();
        let mx = d.iter().copied().fold(T::neg_infinity(), T::max);
        let s: T = d.iter().map(|&x| (x - mx).exp()).sum();
        let v = Tensor::scalar(mx + s.ln());
        self.unary(a, v, Op::LogSumExp(a))
    }

    /// Element `i` of the flattened tensor, shape `[1]`.
    pub fn index(&mut self, a: Var, i: usize) -> Var {
        let v = Tensor::scalar(self.value(a).data()[i]);
        self.unary(a, v, Op::Index(a, i))
    }

    /// Gradients of the single-element node `loss` with respect to all leaves.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = va.dims2();
                let n = out.dims2().1;
                if self.needs(*a) {
                    // dA = dC * B^T  (or dC * B when B was transposed)
                    let mut da = Tensor::zeros(&[m, k]);
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, vb.data(), rsb, csb, T::zero(), da.data_mut(), k as isize, 1);
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    if *trans_b {
                        // B is [n,k]: dB = dC^T * A
                        let mut db = Tensor::zeros(&[n, k]);
                        T::gemm(n, m, k, T::one(), g.data(), 1, n as isize, va.data(), k as isize, 1, T::zero(), db.data_mut(), k as isize, 1);
                        accumulate(grads, *b, db);
                    } else {
                        let mut db = Tensor::zeros(&[k, n]);
                        T::gemm(k, m, n, T::one(), va.data(), 1, k as isize, g.data(), n as isize, 1, T::zero(), db.data_mut(), n as isize, 1);
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&gg, &y)| gg * y).collect();
                    accumulate(grads, *a, Tensor::from_vec(va.shape(), d));
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&gg, &x)| gg * x).collect();
                    accumulate(grads, *b, Tensor::from_vec(vb.shape(), d));
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.needs(*b) {
                    let (m, n) = g.dims2();
                    let mut db = vec![T::zero(); n];
                    for r in 0..m {
                        for (d, &gg) in db.iter_mut().zip(g.row(r)) {
                            *d += gg;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    accumulate(grads, *b, Tensor::from_vec(&shape, db));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::Identity(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(grads, *a, g.clone().reshape(&shape));
            }
            Op::Silu(a) => {
                let va = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gg, &x)| {
                        let s = sigmoid(x);
                        gg * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                accumulate(grads, *a, Tensor::from_vec(va.shape(), d));
            }
            Op::Tanh(a) => {
                let d = g.data().iter().zip(out.data()).map(|(&gg, &y)| gg * (T::one() - y * y)).collect();
                accumulate(grads, *a, Tensor::from_vec(out.shape(), d));
            }
            Op::Exp(a) => {
                let d = g.data().iter().zip(out.data()).map(|(&gg, &y)| gg * y).collect();
                accumulate(grads, *a, Tensor::from_vec(out.shape(), d));
            }
            Op::Ln(a) => {
                let va = self.value(*a);
                let d = g.data().iter().zip(va.data()).map(|(&gg, &x)| gg / x).collect();
                accumulate(grads, *a, Tensor::from_vec(va.shape(), d));
            }
            Op::Sqrt(a) => {
                let two = cast::<T>(2.0);
                let d = g.data().iter().zip(out.data()).map(|(&gg, &y)| gg / (two * y)).collect();
                accumulate(grads, *a, Tensor::from_vec(out.shape(), d));
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let v = g.item() / cast(t.len() as f64);
                accumulate(grads, *a, Tensor::full(t.shape(), v));
            }
            Op::MeanRows(a) => {
                let (m, n) = self.value(*a).dims2();
                let inv = T::one() / cast(m as f64);
                let mut d = Vec::with_capacity(m * n);
                for _ in 0..m {
                    d.extend(g.data().iter().map(|&x| x * inv));
                }
                accumulate(grads, *a, Tensor::from_vec(&[m, n], d));
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = out.dims2();
                let mut d = vec![T::zero(); m * n];
                for r in 0..m {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..n {
                        d[r * n + c] = y[c] * (gr[c] - dot);
                    }
                }
                accumulate(grads, *a, Tensor::from_vec(&[m, n], d));
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let vx = self.value(*x);
                let (m, n) = vx.dims2();
                let gm = self.value(*gamma).data();
                let inv_n = T::one() / cast(n as f64);
                let mut dx = vec![T::zero(); m * n];
                let mut dg = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                for r in 0..m {
                    let row = vx.row(r);
                    let mu = row.iter().copied().sum::<T>() * inv_n;
                    let rs = rstd[r];
                    let gr = g.row(r);
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for c in 0..n {
                        let xh = (row[c] - mu) * rs;
                        let dxh = gr[c] * gm[c];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh;
                        dg[c] += gr[c] * xh;
                        db[c] += gr[c];
                    }
                    mean_dxh *= inv_n;
                    mean_dxh_xh *= inv_n;
                    for c in 0..n {
                        let xh = (row[c] - mu) * rs;
                        let dxh = gr[c] * gm[c];
                        dx[r * n + c] = rs * (dxh - mean_dxh - xh * mean_dxh_xh);
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, Tensor::from_vec(&[m, n], dx));
                }
                if self.needs(*gamma) {
                    let s = self.value(*gamma).shape().to_vec();
                    accumulate(grads, *gamma, Tensor::from_vec(&s, dg));
                }
                if self.needs(*beta) {
                    let s = self.value(*beta).shape().to_vec();
                    accumulate(grads, *beta, Tensor::from_vec(&s, db));
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = out.dims2();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g.data()[r * n + off..r * n + off + w]);
                        }
                        accumulate(grads, p, Tensor::from_vec(&[m, w], d));
                    }
                    off += w;
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let t = self.value(p);
                    let len = t.len();
                    if self.needs(p) {
                        let d = g.data()[off..off + len].to_vec();
                        accumulate(grads, p, Tensor::from_vec(t.shape(), d));
                    }
                    off += len;
                }
            }
            Op::SliceCols { a, start } => {
                let (m, n) = self.value(*a).dims2();
                let w = out.dims2().1;
                let mut d = vec![T::zero(); m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + w].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, Tensor::from_vec(&[m, n], d));
            }
            Op::SliceRows { a, start } => {
                let (m, n) = self.value(*a).dims2();
                let mut d = vec![T::zero(); m * n];
                d[start * n..start * n + g.len()].copy_from_slice(g.data());
                accumulate(grads, *a, Tensor::from_vec(&[m, n], d));
            }
            Op::Transpose(a) => {
                let (n, m) = g.dims2();
                let mut d = vec![T::zero(); m * n];
                for r in 0..n {
                    for c in 0..m {
                        d[c * n + r] = g.data()[r * m + c];
                    }
                }
                accumulate(grads, *a, Tensor::from_vec(&[m, n], d));
            }
            Op::Conv2d { x, w, b } => {
                let (c, h, wd) = self.value(*x).dims3();
                let ws = self.value(*w).shape();
                let (co, k) = (ws[0], ws[2]);
                let hw = h * wd;
                let ckk = c * k * k;
                let gd = g.data();
                if self.needs(*b) {
                    let db: Vec<T> = gd.chunks(hw).map(|ch| ch.iter().copied().sum()).collect();
                    accumulate(grads, *b, Tensor::from_vec(&[co], db));
                }
                let need_w = self.needs(*w);
                let need_x = self.needs(*x);
                if need_w || need_x {
                    let xin = self.value(*x).data();
                    let owned_cols;
                    let cols: &[T] = if k == 1 {
                        xin
                    } else {
                        owned_cols = im2col(xin, c, h, wd, k);
                        &owned_cols
                    };
                    if need_w {
                        let mut dw = Tensor::zeros(ws);
                        T::gemm(co, hw, ckk, T::one(), gd, hw as isize, 1, cols, 1, hw as isize, T::zero(), dw.data_mut(), ckk as isize, 1);
                        accumulate(grads, *w, dw);
                    }
                    if need_x {
                        let wdata = self.value(*w).data();
                        let mut dcols = vec![T::zero(); ckk * hw];
                        T::gemm(ckk, co, hw, T::one(), wdata, 1, ckk as isize, gd, hw as isize, 1, T::zero(), &mut dcols, hw as isize, 1);
                        let dx = if k == 1 { dcols } else { col2im(&dcols, c, h, wd, k) };
                        accumulate(grads, *x, Tensor::from_vec(&[c, h, wd], dx));
                    }
                }
            }
            Op::AvgPool { x, k } => {
                let (c, h, w) = self.value(*x).dims3();
                let (oh, ow) = (h / k, w / k);
                let inv = T::one() / cast((k * k) as f64);
                let mut d = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            d[(ch * h + y) * w + xx] = g.data()[(ch * oh + y / k) * ow + xx / k] * inv;
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(&[c, h, w], d));
            }
            Op::Upsample2(x) => {
                let (c, h, w) = self.value(*x).dims3();
                let (oh, ow) = (2 * h, 2 * w);
                let mut d = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            d[(ch * h + y / 2) * w + xx / 2] += g.data()[(ch * oh + y) * ow + xx];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(&[c, h, w], d));
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = self.value(*x).dims3();
                let hw = h * w;
                let inv = T::one() / cast(hw as f64);
                let mut d = Vec::with_capacity(c * hw);
                for ch in 0..c {
                    let v = g.data()[ch] * inv;
                    d.extend(std::iter::repeat_n(v, hw));
                }
                accumulate(grads, *x, Tensor::from_vec(&[c, h, w], d));
            }
            Op::Bilinear { fmap, pts } => {
                let (c, h, w) = self.value(*fmap).dims3();
                let p = self.value(*pts).data();
                let f = self.value(*fmap).data();
                let n = p.len() / 2;
                let mut df = if self.needs(*fmap) { Some(vec![T::zero(); c * h * w]) } else { None };
                let mut dp = if self.needs(*pts) { Some(vec![T::zero(); 2 * n]) } else { None };
                let one = T::one();
                for i in 0..n {
                    let (x0, x1, wx, in_x) = stencil(p[2 * i], w);
                    let (y0, y1, wy, in_y) = stencil(p[2 * i + 1], h);
                    let gr = &g.data()[i * c..(i + 1) * c];
                    if let Some(df) = df.as_mut() {
                        let w00 = (one - wx) * (one - wy);
                        let w01 = wx * (one - wy);
                        let w10 = (one - wx) * wy;
                        let w11 = wx * wy;
                        for ch in 0..c {
                            let base = ch * h * w;
                            df[base + y0 * w + x0] += gr[ch] * w00;
                            df[base + y0 * w + x1] += gr[ch] * w01;
                            df[base + y1 * w + x0] += gr[ch] * w10;
                            df[base + y1 * w + x1] += gr[ch] * w11;
                        }
                    }
                    if let Some(dp) = dp.as_mut() {
                        let mut du = T::zero();
                        let mut dv = T::zero();
                        for ch in 0..c {
                            let base = ch * h * w;
                            let f00 = f[base + y0 * w + x0];
                            let f01 = f[base + y0 * w + x1];
                            let f10 = f[base + y1 * w + x0];
                            let f11 = f[base + y1 * w + x1];
                            du += gr[ch] * ((one - wy) * (f01 - f00) + wy * (f11 - f10));
                            dv += gr[ch] * ((one - wx) * (f10 - f00) + wx * (f11 - f01));
                        }
                        if in_x {
                            dp[2 * i] += du;
                        }
                        if in_y {
                            dp[2 * i + 1] += dv;
                        }
                    }
                }
                if let Some(df) = df {
                    accumulate(grads, *fmap, Tensor::from_vec(&[c, h, w], df));
                }
                if let Some(dp) = dp {
                    accumulate(grads, *pts, Tensor::from_vec(&[n, 2], dp));
                }
            }
            Op::Project { pts, cam } => {
                let p = self.value(*pts).data();
                let n = p.len() / 3;
                let zmin = cast::<T>(MIN_PROJECT_DEPTH);
                let mut d = vec![T::zero(); 3 * n];
                for i in 0..n {
                    let (x, y, zr) = (p[3 * i], p[3 * i + 1], p[3 * i + 2]);
                    let z = zr.max(zmin);
                    let (gu, gv) = (g.data()[2 * i], g.data()[2 * i + 1]);
                    d[3 * i] = gu * cam.fx / z;
                    d[3 * i + 1] = gv * cam.fy / z;
                    if zr > zmin {
                        d[3 * i + 2] = -(gu * cam.fx * x + gv * cam.fy * y) / (z * z);
                    }
                }
                accumulate(grads, *pts, Tensor::from_vec(&[n, 3], d));
            }
            Op::Clamp { a, lo, hi } => {
                let va = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gg, &x)| if x >= *lo && x <= *hi { gg } else { T::zero() })
                    .collect();
                accumulate(grads, *a, Tensor::from_vec(va.shape(), d));
            }
            Op::LogSumExp(a) => {
                let va = self.value(*a);
                let lse = out.item();
                let gg = g.item();
                let d = va.data().iter().map(|&x| gg * (x - lse).exp()).collect();
                accumulate(grads, *a, Tensor::from_vec(va.shape(), d));
            }
            Op::Index(a, idx) => {
                let va = self.value(*a);
                let mut d = Tensor::zeros(va.shape());
                d.data_mut()[*idx] = g.item();
                accumulate(grads, *a, d);
            }
        }
    }
}
