//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and backward is a single reverse sweep. Parameters enter
//! the tape as leaves; gradients are read back per leaf after [`Tape::backward`].

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Exp(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SpatialMean(Var),
    Concat(Var, Var),
    Reshape(Var),
    Mse(Var, Var),
    SqNorm(Var),
    CosineRows(Var, Var),
    RowNormalize { x: Var, norm: f64 },
    StraightThrough(Var),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op,
    needs_grad: bool,
}

/// Sign pattern of every ReLU-family input seen while tracking is on.
///
/// Finite-difference checks compare signatures to detect probes that cross a
/// kink, where the analytic gradient is not defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KinkStats {
    pub at_zero: usize,
    pub signature: u64,
}

impl Default for KinkStats {
    fn default() -> Self {
        KinkStats { at_zero: 0, signature: 0xcbf2_9ce4_8422_2325 }
    }
}

impl KinkStats {
    fn observe(&mut self, positive: bool, zero: bool) {
        if zero {
            self.at_zero += 1;
        }
        let code = if zero { 2 } else { positive as u64 };
        self.signature = (self.signature ^ code).wrapping_mul(0x0000_0100_0000_01b3);
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    kinks: Option<KinkStats>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Spatial geometry of a convolution seen from its input side.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols_len(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col<T: Real>(&self, input: &[T], cols: &mut [T]) {
        let n = self.cols_len();
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let out = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut out[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &input[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], out: &mut [T]) {
        let n = self.cols_len();
        for ci in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut out[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dst[ix as usize] = dst[ix as usize] + src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), kinks: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Starts recording ReLU-family sign patterns.
    pub fn track_kinks(&mut self) {
        self.kinks = Some(KinkStats::default());
    }

    pub fn kinks(&self) -> Option<KinkStats> {
        self.kinks
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a tensor as a leaf. Gradients are kept only if the tensor
    /// requires them.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    /// Fails with a numeric error naming `layer` when `v` holds NaN or Inf.
    pub fn check_finite(&self, v: Var, layer: &str) -> Result<()> {
        if self.node(v).value.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric { layer: layer.to_string() })
        }
    }

    // ---- layers -------------------------------------------------------

    /// `y = x W^T + b` with `x: (B, in)`, `W: (out, in)`, `b: (out)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || numel(bs) != ws[0] {
            return Err(Error::shape("dense", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        let bias = &self.node(b).value;
        let mut y = Vec::with_capacity(batch * out);
        for _ in 0..batch {
            y.extend_from_slice(bias);
        }
        T::gemm(
            batch,
            inp,
            out,
            T::one(),
            (&self.node(x).value, inp as isize, 1),
            (&self.node(w).value, 1, inp as isize),
            T::one(),
            (&mut y, out as isize, 1),
        );
        let g = self.grad_of(&[x, w, b]);
        Ok(self.push(vec![batch, out], y, Op::Dense { x, w, b }, g))
    }

    /// 2-D convolution, `x: (B, Cin, H, W)`, `w: (Cout, Cin, K, K)`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || numel(self.shape(b)) != ws[0] {
            return Err(Error::shape("conv2d", format!("x {xs:?}, w {ws:?}")));
        }
        let (batch, cout, k) = (xs[0], ws[0], ws[2]);
        let geom = self.conv_geom("conv2d", &xs, k, stride, pad)?;
        let (rows, n) = (geom.cols_rows(), geom.cols_len());
        let mut cols = vec![T::zero(); rows * n];
        let mut y = vec![T::zero(); batch * cout * n];
        let in_len = geom.c * geom.h * geom.w;
        let (xv, wv, bv) = (&self.node(x).value, &self.node(w).value, &self.node(b).value);
        for bi in 0..batch {
            geom.im2col(&xv[bi * in_len..(bi + 1) * in_len], &mut cols);
            let out = &mut y[bi * cout * n..(bi + 1) * cout * n];
            for (co, chunk) in out.chunks_mut(n).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv[co]);
            }
            T::gemm(cout, rows, n, T::one(), (wv, rows as isize, 1), (&cols, n as isize, 1), T::one(), (out, n as isize, 1));
        }
        let g = self.grad_of(&[x, w, b]);
        Ok(self.push(vec![batch, cout, geom.oh, geom.ow], y, Op::Conv2d { x, w, b, stride, pad }, g))
    }

    /// Transposed 2-D convolution, `x: (B, Cin, H, W)`, `w: (Cin, Cout, K, K)`.
    /// Output extent is `(H - 1) * stride - 2 * pad + K`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || ws[2] != ws[3] || numel(self.shape(b)) != ws[1] {
            return Err(Error::shape("conv_transpose2d", format!("x {xs:?}, w {ws:?}")));
        }
        let (batch, cin, cout, k) = (xs[0], xs[1], ws[1], ws[2]);
        let geom = Self::transpose_geom(&xs, cout, k, stride, pad)?;
        let (rows, n) = (geom.cols_rows(), geom.cols_len());
        let out_len = cout * geom.h * geom.w;
        let mut cols = vec![T::zero(); rows * n];
        let mut y = vec![T::zero(); batch * out_len];
        let (xv, wv, bv) = (&self.node(x).value, &self.node(w).value, &self.node(b).value);
        for bi in 0..batch {
            T::gemm(
                rows,
                cin,
                n,
                T::one(),
                (wv, 1, rows as isize),
                (&xv[bi * cin * n..(bi + 1) * cin * n], n as isize, 1),
                T::zero(),
                (&mut cols, n as isize, 1),
            );
            let out = &mut y[bi * out_len..(bi + 1) * out_len];
            for (co, chunk) in out.chunks_mut(geom.h * geom.w).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bv[co]);
            }
            geom.col2im(&cols, out);
        }
        let g = self.grad_of(&[x, w, b]);
        Ok(self.push(
            vec![batch, cout, geom.h, geom.w],
            y,
            Op::ConvTranspose2d { x, w, b, stride, pad },
            g,
        ))
    }

    fn conv_geom(&self, op: &'static str, xs: &[usize], k: usize, stride: usize, pad: usize) -> Result<ConvGeom> {
        let oh = conv_out(xs[2], k, stride, pad);
        let ow = conv_out(xs[3], k, stride, pad);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok(ConvGeom { c: xs[1], h: xs[2], w: xs[3], k, stride, pad, oh, ow }),
            _ => Err(Error::shape(op, format!("kernel {k} does not fit input {xs:?}"))),
        }
    }

    fn transpose_geom(xs: &[usize], cout: usize, k: usize, stride: usize, pad: usize) -> Result<ConvGeom> {
        let full = |len: usize| ((len - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0);
        match (full(xs[2]), full(xs[3])) {
            (Some(h), Some(w)) if stride > 0 => {
                Ok(ConvGeom { c: cout, h, w, k, stride, pad, oh: xs[2], ow: xs[3] })
            }
            _ => Err(Error::shape("conv_transpose2d", format!("invalid geometry for {xs:?}"))),
        }
    }

    // ---- elementwise ----------------------------------------------------

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let value = self.node(x).value.iter().map(|&v| f(v)).collect();
        let g = self.grad_of(&[x]);
        self.push(self.node(x).shape.clone(), value, op, g)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.observe_kinks(x);
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.observe_kinks(x);
        let s = T::lit(slope);
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > T::zero() { v } else { v * s })
    }

    fn observe_kinks(&mut self, x: Var) {
        if let Some(mut k) = self.kinks.take() {
            for &v in &self.nodes[x.0].value {
                k.observe(v > T::zero(), v == T::zero());
            }
            self.kinks = Some(k);
        }
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let k = T::lit(c);
        self.unary(x, Op::Scale(x, c), |v| v * k)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let value = self.node(a).value.iter().zip(&self.node(b).value).map(|(&x, &y)| f(x, y)).collect();
        let g = self.grad_of(&[a, b]);
        Ok(self.push(self.node(a).shape.clone(), value, op, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    // ---- reductions and reshaping ---------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.node(x).value.iter().copied().sum();
        let g = self.grad_of(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.node(x).value.len();
        let s: T = self.node(x).value.iter().copied().sum();
        let g = self.grad_of(&[x]);
        self.push(vec![1], vec![s / T::lit(n as f64)], Op::Mean(x), g)
    }

    /// Mean over the leading (batch) axis: `(B, ...) -> (...)`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("mean_rows", format!("{shape:?}")));
        }
        let inner = numel(&shape[1..]);
        let mut acc = vec![T::zero(); inner];
        for row in self.node(x).value.chunks(inner) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a = *a + v;
            }
        }
        let inv = T::one() / T::lit(shape[0] as f64);
        acc.iter_mut().for_each(|a| *a = *a * inv);
        let g = self.grad_of(&[x]);
        Ok(self.push(shape[1..].to_vec(), acc, Op::MeanRows(x), g))
    }

    /// Mean over spatial axes: `(B, C, H, W) -> (B, C)`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("spatial_mean", format!("{shape:?}")));
        }
        let plane = shape[2] * shape[3];
        let inv = T::one() / T::lit(plane as f64);
        let value = self.node(x).value.chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let g = self.grad_of(&[x]);
        Ok(self.push(vec![shape[0], shape[1]], value, Op::SpatialMean(x), g))
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat", format!("{sa:?} vs {sb:?}")));
        }
        let inner = numel(&sa[2..]);
        let (ra, rb) = (sa[1] * inner, sb[1] * inner);
        let mut value = Vec::with_capacity(sa[0] * (ra + rb));
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        for i in 0..sa[0] {
            value.extend_from_slice(&va[i * ra..(i + 1) * ra]);
            value.extend_from_slice(&vb[i * rb..(i + 1) * rb]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let g = self.grad_of(&[a, b]);
        Ok(self.push(shape, value, Op::Concat(a, b), g))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.node(x).value.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let value = self.node(x).value.clone();
        let g = self.grad_of(&[x]);
        Ok(self.push(shape, value, Op::Reshape(x), g))
    }

    // ---- losses and similarity -----------------------------------------

    /// Mean squared error, averaged over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        if va.len() != vb.len() {
            return Err(Error::shape("mse", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let s: T = va.iter().zip(vb).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let v = s / T::lit(va.len() as f64);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(vec![1], vec![v], Op::Mse(a, b), g))
    }

    /// Squared L2 norm.
    pub fn sq_norm(&mut self, x: Var) -> Var {
        let s = self.node(x).value.iter().map(|&v| v * v).sum();
        let g = self.grad_of(&[x]);
        self.push(vec![1], vec![s], Op::SqNorm(x), g)
    }

    /// Row-wise cosine similarity of two `(B, C)` tensors, giving `(B)`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sa != sb {
            return Err(Error::shape("cosine_rows", format!("{sa:?} vs {sb:?}")));
        }
        let c = sa[1];
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        let value = va
            .chunks(c)
            .zip(vb.chunks(c))
            .map(|(x, y)| {
                let (dot, nx, ny) = cos_parts(x, y);
                dot / (nx * ny).max(T::lit(COS_EPS))
            })
            .collect();
        let g = self.grad_of(&[a, b]);
        Ok(self.push(vec![sa[0]], value, Op::CosineRows(a, b), g))
    }

    /// Scales each row of `(B, F)` to Euclidean norm `norm`.
    pub fn row_normalize(&mut self, x: Var, norm: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("row_normalize", format!("{shape:?}")));
        }
        let target = T::lit(norm);
        let mut value = self.node(x).value.clone();
        for row in value.chunks_mut(shape[1]) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n == T::zero() {
                return Err(Error::Degenerate("cannot normalise an all-zero latent".into()));
            }
            let s = target / n;
            row.iter_mut().for_each(|v| *v = *v * s);
        }
        let g = self.grad_of(&[x]);
        Ok(self.push(shape, value, Op::RowNormalize { x, norm }, g))
    }

    /// Replaces the forward value of `x` with `value` while passing the
    /// gradient through unchanged.
    pub fn straight_through(&mut self, x: Var, value: Vec<T>) -> Result<Var> {
        if value.len() != self.node(x).value.len() {
            return Err(Error::shape("straight_through", "value length differs from input"));
        }
        let g = self.grad_of(&[x]);
        Ok(self.push(self.node(x).shape.clone(), value, Op::StraightThrough(x), g))
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates d(loss)/d(node) to every node that needs a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::Usage(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(node, &gy, &mut grads);
            }
            grads[id] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(slot);
        };
        match node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (batch, inp) = (self.shape(x)[0], self.shape(x)[1]);
                let out = self.shape(w)[0];
                acc(x, &mut |gx| {
                    T::gemm(batch, out, inp, T::one(), (gy, out as isize, 1), (self.value(w), inp as isize, 1), T::one(), (gx, inp as isize, 1))
                });
                acc(w, &mut |gw| {
                    T::gemm(out, batch, inp, T::one(), (gy, 1, out as isize), (self.value(x), inp as isize, 1), T::one(), (gw, inp as isize, 1))
                });
                acc(b, &mut |gb| {
                    for row in gy.chunks(out) {
                        for (g, &d) in gb.iter_mut().zip(row) {
                            *g = *g + d;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.shape(x).to_vec();
                let cout = self.shape(w)[0];
                let k = self.shape(w)[2];
                let geom = self.conv_geom("conv2d", &xs, k, stride, pad).expect("validated in forward");
                let (rows, n) = (geom.cols_rows(), geom.cols_len());
                let in_len = geom.c * geom.h * geom.w;
                let mut cols = vec![T::zero(); rows * n];
                let xv = self.value(x);
                acc(w, &mut |gw| {
                    for bi in 0..xs[0] {
                        geom.im2col(&xv[bi * in_len..(bi + 1) * in_len], &mut cols);
                        let dy = &gy[bi * cout * n..(bi + 1) * cout * n];
                        T::gemm(cout, n, rows, T::one(), (dy, n as isize, 1), (&cols, 1, n as isize), T::one(), (gw, rows as isize, 1));
                    }
                });
                acc(x, &mut |gx| {
                    for bi in 0..xs[0] {
                        let dy = &gy[bi * cout * n..(bi + 1) * cout * n];
                        T::gemm(rows, cout, n, T::one(), (self.value(w), 1, rows as isize), (dy, n as isize, 1), T::zero(), (&mut cols, n as isize, 1));
                        geom.col2im(&cols, &mut gx[bi * in_len..(bi + 1) * in_len]);
                    }
                });
                acc(b, &mut |gb| {
                    for (i, plane) in gy.chunks(n).enumerate() {
                        gb[i % cout] = gb[i % cout] + plane.iter().copied().sum::<T>();
                    }
                });
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let xs = self.shape(x).to_vec();
                let (cin, cout, k) = (xs[1], self.shape(w)[1], self.shape(w)[2]);
                let geom = Self::transpose_geom(&xs, cout, k, stride, pad).expect("validated in forward");
                let (rows, n) = (geom.cols_rows(), geom.cols_len());
                let out_len = cout * geom.h * geom.w;
                let mut dcols = vec![T::zero(); rows * n];
                let xv = self.value(x);
                let mut cached: Vec<Vec<T>> = Vec::new();
                for bi in 0..xs[0] {
                    geom.im2col(&gy[bi * out_len..(bi + 1) * out_len], &mut dcols);
                    cached.push(dcols.clone());
                }
                acc(x, &mut |gx| {
                    for (bi, dc) in cached.iter().enumerate() {
                        T::gemm(cin, rows, n, T::one(), (self.value(w), rows as isize, 1), (dc, n as isize, 1), T::one(), (&mut gx[bi * cin * n..(bi + 1) * cin * n], n as isize, 1));
                    }
                });
                acc(w, &mut |gw| {
                    for (bi, dc) in cached.iter().enumerate() {
                        T::gemm(cin, n, rows, T::one(), (&xv[bi * cin * n..(bi + 1) * cin * n], n as isize, 1), (dc, 1, n as isize), T::one(), (gw, rows as isize, 1));
                    }
                });
                let plane = geom.h * geom.w;
                acc(b, &mut |gb| {
                    for (i, p) in gy.chunks(plane).enumerate() {
                        gb[i % cout] = gb[i % cout] + p.iter().copied().sum::<T>();
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(x);
                acc(x, &mut |gx| {
                    for ((g, &d), &v) in gx.iter_mut().zip(gy).zip(xv) {
                        if v > T::zero() {
                            *g = *g + d;
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(x);
                let s = T::lit(slope);
                acc(x, &mut |gx| {
                    for ((g, &d), &v) in gx.iter_mut().zip(gy).zip(xv) {
                        *g = *g + if v > T::zero() { d } else { d * s };
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = &node.value;
                acc(x, &mut |gx| {
                    for ((g, &d), &y) in gx.iter_mut().zip(gy).zip(yv) {
                        *g = *g + d * y * (T::one() - y);
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = &node.value;
                acc(x, &mut |gx| {
                    for ((g, &d), &y) in gx.iter_mut().zip(gy).zip(yv) {
                        *g = *g + d * (T::one() - y * y);
                    }
                });
            }
            Op::Log(x) => {
                let xv = self.value(x);
                acc(x, &mut |gx| {
                    for ((g, &d), &v) in gx.iter_mut().zip(gy).zip(xv) {
                        *g = *g + d / v;
                    }
                });
            }
            Op::Exp(x) => {
                let yv = &node.value;
                acc(x, &mut |gx| {
                    for ((g, &d), &y) in gx.iter_mut().zip(gy).zip(yv) {
                        *g = *g + d * y;
                    }
                });
            }
            Op::Add(a, b) => {
                acc(a, &mut |ga| add_into(ga, gy));
                acc(b, &mut |gb| add_into(gb, gy));
            }
            Op::Sub(a, b) => {
                acc(a, &mut |ga| add_into(ga, gy));
                acc(b, &mut |gb| {
                    for (g, &d) in gb.iter_mut().zip(gy) {
                        *g = *g - d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                acc(a, &mut |ga| {
                    for ((g, &d), &y) in ga.iter_mut().zip(gy).zip(vb) {
                        *g = *g + d * y;
                    }
                });
                acc(b, &mut |gb| {
                    for ((g, &d), &x) in gb.iter_mut().zip(gy).zip(va) {
                        *g = *g + d * x;
                    }
                });
            }
            Op::Scale(x, c) => {
                let k = T::lit(c);
                acc(x, &mut |gx| {
                    for (g, &d) in gx.iter_mut().zip(gy) {
                        *g = *g + d * k;
                    }
                });
            }
            Op::Sum(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|g| *g = *g + gy[0])),
            Op::Mean(x) => {
                let d = gy[0] / T::lit(self.value(x).len() as f64);
                acc(x, &mut |gx| gx.iter_mut().for_each(|g| *g = *g + d));
            }
            Op::MeanRows(x) => {
                let rows = self.shape(x)[0];
                let inv = T::one() / T::lit(rows as f64);
                acc(x, &mut |gx| {
                    for row in gx.chunks_mut(gy.len()) {
                        for (g, &d) in row.iter_mut().zip(gy) {
                            *g = *g + d * inv;
                        }
                    }
                });
            }
            Op::SpatialMean(x) => {
                let s = self.shape(x);
                let plane = s[2] * s[3];
                let inv = T::one() / T::lit(plane as f64);
                acc(x, &mut |gx| {
                    for (p, &d) in gx.chunks_mut(plane).zip(gy) {
                        p.iter_mut().for_each(|g| *g = *g + d * inv);
                    }
                });
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let inner = numel(&sa[2..]);
                let (ra, rb) = (sa[1] * inner, sb[1] * inner);
                acc(a, &mut |ga| {
                    for (i, row) in ga.chunks_mut(ra).enumerate() {
                        add_into(row, &gy[i * (ra + rb)..i * (ra + rb) + ra]);
                    }
                });
                acc(b, &mut |gb| {
                    for (i, row) in gb.chunks_mut(rb).enumerate() {
                        add_into(row, &gy[i * (ra + rb) + ra..(i + 1) * (ra + rb)]);
                    }
                });
            }
            Op::Reshape(x) | Op::StraightThrough(x) => acc(x, &mut |gx| add_into(gx, gy)),
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let k = T::lit(2.0) * gy[0] / T::lit(va.len() as f64);
                acc(a, &mut |ga| {
                    for ((g, &x), &y) in ga.iter_mut().zip(va).zip(vb) {
                        *g = *g + k * (x - y);
                    }
                });
                acc(b, &mut |gb| {
                    for ((g, &x), &y) in gb.iter_mut().zip(va).zip(vb) {
                        *g = *g - k * (x - y);
                    }
                });
            }
            Op::SqNorm(x) => {
                let xv = self.value(x);
                let k = T::lit(2.0) * gy[0];
                acc(x, &mut |gx| {
                    for (g, &v) in gx.iter_mut().zip(xv) {
                        *g = *g + k * v;
                    }
                });
            }
            Op::CosineRows(a, b) => {
                let c = self.shape(a)[1];
                let (va, vb) = (self.value(a), self.value(b));
                let mut one_side = |u: Var, own: &[T], other: &[T]| {
                    acc(u, &mut |gu| {
                        for (((g, x), y), &d) in gu.chunks_mut(c).zip(own.chunks(c)).zip(other.chunks(c)).zip(gy) {
                            let (dot, nx, ny) = cos_parts(x, y);
                            let denom = nx * ny;
                            if denom <= T::lit(COS_EPS) {
                                continue;
                            }
                            let cos = dot / denom;
                            for ((gi, &xi), &yi) in g.iter_mut().zip(x).zip(y) {
                                *gi = *gi + d * (yi / denom - cos * xi / (nx * nx));
                            }
                        }
                    });
                };
                one_side(a, va, vb);
                one_side(b, vb, va);
            }
            Op::RowNormalize { x, norm } => {
                let f = self.shape(x)[1];
                let xv = self.value(x);
                let target = T::lit(norm);
                acc(x, &mut |gx| {
                    for ((g, row), d) in gx.chunks_mut(f).zip(xv.chunks(f)).zip(gy.chunks(f)) {
                        let n2 = row.iter().map(|&v| v * v).sum::<T>();
                        let n = n2.sqrt();
                        let dot = row.iter().zip(d).map(|(&v, &dv)| v * dv).sum::<T>();
                        let s = target / n;
                        for ((gi, &xi), &di) in g.iter_mut().zip(row).zip(d) {
                            *gi = *gi + s * (di - xi * dot / n2);
                        }
                    }
                });
            }
        }
    }
}

const COS_EPS: f64 = 1e-12;

fn cos_parts<T: Real>(x: &[T], y: &[T]) -> (T, T, T) {
    let dot = x.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>();
    let nx = x.iter().map(|&a| a * a).sum::<T>().sqrt();
    let ny = y.iter().map(|&b| b * b).sum::<T>().sqrt();
    (dot, nx, ny)
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Result of [`Tape::backward`]: d(loss)/d(node) for every reached node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of `len` when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); len])
    }
}
