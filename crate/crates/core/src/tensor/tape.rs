//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every op applied to [`Var`] handles during a forward
//! pass. [`Tape::backward`] walks the record in reverse and returns the
//! gradient of a scalar loss with respect to every node that depends on a
//! watched parameter. Nodes that only depend on constants are never visited.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, p: usize, q: usize, r: usize },
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, cout: usize, geom: ConvGeom },
    Softmax { x: Var, axis: usize },
    CrossEntropy { scores: Var, probs: Vec<T>, pixel_weights: Vec<T>, targets: Vec<Option<usize>>, total_weight: T },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Transpose { x: Var, rows: usize, cols: usize },
    AdaptiveAvgPool { x: Var, bins: usize },
    UpsampleNearest { x: Var, factor: usize },
    AddRowBias { x: Var, bias: Var },
    SelectRows { x: Var, rows: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-threaded computation record.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one [`Tape::backward`] call, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `param`'s buffer.
    pub fn accumulate_into(&self, v: Var, param: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => param.accumulate_grad(g),
            None => Ok(()),
        }
    }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records `t` as a leaf. Gradients flow to it only if `t.requires_grad()`.
    pub fn watch(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape")
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [a, b] => Ok((*a, *b)),
            s => Err(Error::dim(format!("{what} expects a matrix, got shape {s:?}"))),
        }
    }

    fn dims3(&self, v: Var, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape(v) {
            [a, b, c] => Ok((*a, *b, *c)),
            s => Err(Error::dim(format!("{what} expects [c, h, w], got shape {s:?}"))),
        }
    }

    fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric(format!("{what} received NaN input")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.dims2(a, "matmul")?;
        let (q2, r) = self.dims2(b, "matmul")?;
        if q != q2 {
            return Err(Error::dim(format!("matmul inner dims {p}x{q} · {q2}x{r}")));
        }
        let mut out = vec![T::zero(); p * r];
        kernels::gemm_acc(self.value(a), self.value(b), &mut out, p, q, r);
        let needs = self.needs(&[a, b]);
        Ok(self.push(vec![p, r], out, Op::MatMul { a, b, p, q, r }, needs))
    }

    /// Cross-correlation of `input[cin×h×w]` with `kernel[cout×cin×k×k]`,
    /// zero padding, optional per-channel `bias[cout]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: usize, stride: usize) -> Result<Var> {
        let (cin, h, w) = self.dims3(input, "conv2d input")?;
        let (cout, kcin, k) = match self.shape(kernel) {
            [co, ci, ky, kx] if ky == kx => (*co, *ci, *ky),
            s => return Err(Error::dim(format!("conv2d kernel must be [cout, cin, k, k], got {s:?}"))),
        };
        if kcin != cin {
            return Err(Error::dim(format!("conv2d channel mismatch: input has {cin}, kernel expects {kcin}")));
        }
        if stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::dim(format!("conv2d geometry k={k} pad={padding} stride={stride} on {h}x{w}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::dim(format!("conv2d bias shape {:?}, expected [{cout}]", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            k,
            padding,
            stride,
            oh: (h + 2 * padding - k) / stride + 1,
            ow: (w + 2 * padding - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(self.value(input), self.value(kernel), bias.map(|b| self.value(b)), cout, &geom);
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let needs = self.needs(&deps);
        Ok(self.push(vec![cout, geom.oh, geom.ow], out, Op::Conv2d { input, kernel, bias, cout, geom }, needs))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax axis {axis} for shape {shape:?}")));
        }
        self.check_finite(x, "softmax")?;
        let out = kernels::softmax_axis(self.value(x), &shape, axis);
        let needs = self.needs(&[x]);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, needs))
    }

    /// Weighted mean negative log-likelihood of `softmax(scores)` over the
    /// class axis (axis 0) of `scores[c×n]`.
    ///
    /// Each pixel contributes with the weight of its target class; pixels
    /// labelled `ignore` are skipped. The loss is normalized by the total
    /// weight of the scored pixels.
    pub fn cross_entropy(&mut self, scores: Var, targets: &[usize], class_weights: Option<&[T]>, ignore: Option<usize>) -> Result<Var> {
        let (c, n) = self.dims2(scores, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::dim(format!("cross_entropy: {n} score columns, {} targets", targets.len())));
        }
        if let Some(w) = class_weights {
            if w.len() != c {
                return Err(Error::dim(format!("cross_entropy: {} class weights for {c} classes", w.len())));
            }
        }
        self.check_finite(scores, "cross_entropy")?;
        let probs = kernels::softmax_axis(self.value(scores), &[c, n], 0);
        let s = self.value(scores);
        let mut loss = T::zero();
        let mut total_weight = T::zero();
        let mut pixel_weights = vec![T::zero(); n];
        let mut resolved = Vec::with_capacity(n);
        for (i, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                resolved.push(None);
                continue;
            }
            if t >= c {
                return Err(Error::Label(format!("target id {t} outside [0, {c})")));
            }
            let w = class_weights.map_or(T::one(), |w| w[t]);
            // log-softmax at the target: s_t - max - ln Σ exp(s - max)
            let mut max = T::neg_infinity();
            for k in 0..c {
                max = max.max(s[k * n + i]);
            }
            let mut z = T::zero();
            for k in 0..c {
                z += (s[k * n + i] - max).exp();
            }
            let log_p = s[t * n + i] - max - z.ln();
            loss -= w * log_p;
            total_weight += w;
            pixel_weights[i] = w;
            resolved.push(Some(t));
        }
        if total_weight <= T::zero() {
            return Err(Error::contract("cross_entropy: no weighted target pixels"));
        }
        loss /= total_weight;
        let needs = self.needs(&[scores]);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy { scores, probs, pixel_weights, targets: resolved, total_weight },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        self.push(shape, out, Op::Relu(x), needs)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!("{what}: shapes {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let needs = self.needs(&[a, b]);
        Ok(self.push(shape, out, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let needs = self.needs(&[a, b]);
        Ok(self.push(shape, out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        self.push(shape, out, Op::Scale(x, s), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        let needs = self.needs(&[x]);
        self.push(vec![], vec![total], Op::Sum(x), needs)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!("concat along {axis}: {s:?} vs {base:?}")));
            }
            axis_total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = kernels::split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * len..(o + 1) * len]);
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec(), axis }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "transpose")?;
        let out = kernels::transpose(self.value(x), rows, cols);
        let needs = self.needs(&[x]);
        Ok(self.push(vec![cols, rows], out, Op::Transpose { x, rows, cols }, needs))
    }

    /// Averages `x[c×h×w]` over a `bins × bins` grid of (possibly overlapping) cells.
    pub fn adaptive_avg_pool(&mut self, x: Var, bins: usize) -> Result<Var> {
        let (c, h, w) = self.dims3(x, "adaptive_avg_pool")?;
        if bins == 0 || bins > h || bins > w {
            return Err(Error::dim(format!("adaptive_avg_pool: {bins} bins over {h}x{w}")));
        }
        let v = self.value(x);
        let mut out = vec![T::zero(); c * bins * bins];
        for ch in 0..c {
            for by in 0..bins {
                let (y0, y1) = kernels::pool_range(by, bins, h);
                for bx in 0..bins {
                    let (x0, x1) = kernels::pool_range(bx, bins, w);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += v[(ch * h + y) * w + xx];
                        }
                    }
                    out[(ch * bins + by) * bins + bx] = acc / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(vec![c, bins, bins], out, Op::AdaptiveAvgPool { x, bins }, needs))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = self.dims3(x, "upsample_nearest")?;
        if factor == 0 {
            return Err(Error::dim("upsample_nearest factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let v = self.value(x);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = v[(ch * h + y / factor) * w + xx / factor];
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(vec![c, oh, ow], out, Op::UpsampleNearest { x, factor }, needs))
    }

    /// `x[p×q] + bias[q]`, the bias repeated on every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (p, q) = self.dims2(x, "add_row_bias")?;
        if self.shape(bias) != [q] {
            return Err(Error::dim(format!("add_row_bias: bias {:?} for {p}x{q}", self.shape(bias))));
        }
        let b = self.value(bias);
        let out = self.value(x).iter().enumerate().map(|(i, &v)| v + b[i % q]).collect();
        let needs = self.needs(&[x, bias]);
        Ok(self.push(vec![p, q], out, Op::AddRowBias { x, bias }, needs))
    }

    /// Gathers rows (first-axis slices) of `x` in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&n, rest)) = shape.split_first() else {
            return Err(Error::dim("select_rows on a scalar"));
        };
        let inner: usize = rest.iter().product();
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= n {
                return Err(Error::dim(format!("select_rows: row {r} of {n}")));
            }
            out.extend_from_slice(&self.value(x)[r * inner..(r + 1) * inner]);
        }
        let mut new_shape = shape.clone();
        new_shape[0] = rows.len();
        let needs = self.needs(&[x]);
        Ok(self.push(new_shape, out, Op::SelectRows { x, rows: rows.to_vec() }, needs))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let n = &self.nodes[v.0];
        if !n.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n.value.len()]))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, p, q, r } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dOut · Bᵀ
                    let bt = kernels::transpose(bv, *q, *r);
                    kernels::gemm_acc(g, &bt, ga, *p, *r, *q);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // dB = Aᵀ · dOut
                    let at = kernels::transpose(av, *p, *q);
                    kernels::gemm_acc(&at, g, gb, *q, *p, *r);
                }
            }
            Op::Conv2d { input, kernel, bias, cout, geom } => {
                let (iv, kv) = (self.value(*input), self.value(*kernel));
                if let Some(gk) = self.slot(grads, *kernel) {
                    kernels::conv2d_kernel_grad_acc(iv, g, *cout, geom, gk);
                }
                if let Some(gi) = self.slot(grads, *input) {
                    kernels::conv2d_input_grad_acc(kv, g, *cout, geom, gi);
                }
                if let Some(gb) = bias.and_then(|b| self.slot(grads, b)) {
                    let n = geom.out_len();
                    for (co, b) in gb.iter_mut().enumerate() {
                        *b += g[co * n..(co + 1) * n].iter().copied().sum::<T>();
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let y = &node.value;
                    let (outer, len, inner) = kernels::split_axis(&node.shape, *axis);
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + j;
                            let dot: T = (0..len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                            for a in 0..len {
                                gx[idx(a)] += y[idx(a)] * (g[idx(a)] - dot);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { scores, probs, pixel_weights, targets, total_weight } => {
                if let Some(gs) = self.slot(grads, *scores) {
                    let n = targets.len();
                    let c = probs.len() / n;
                    let upstream = g[0] / *total_weight;
                    for (px, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let w = pixel_weights[px] * upstream;
                        for k in 0..c {
                            let onehot = if k == t { T::one() } else { T::zero() };
                            gs[k * n + px] += w * (probs[k * n + px] - onehot);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &v), &gi) in gx.iter_mut().zip(xv).zip(g) {
                        if v > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        kernels::axpy(T::one(), g, gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gi), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi * o;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, &gi), &o) in gb.iter_mut().zip(g).zip(av) {
                        *d += gi * o;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::axpy(*s, g, gx);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = kernels::split_axis(&node.shape, *axis);
                let mut offset = 0;
                for o in 0..outer {
                    for &p in parts {
                        let len = self.shape(p)[*axis] * inner;
                        if let Some(gp) = self.slot(grads, p) {
                            kernels::axpy(T::one(), &g[offset..offset + len], &mut gp[o * len..(o + 1) * len]);
                        }
                        offset += len;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::axpy(T::one(), g, gx);
                }
            }
            Op::Transpose { x, rows, cols } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let back = kernels::transpose(g, *cols, *rows);
                    kernels::axpy(T::one(), &back, gx);
                }
            }
            Op::AdaptiveAvgPool { x, bins } => {
                let (c, h, w) = match self.shape(*x) {
                    [c, h, w] => (*c, *h, *w),
                    _ => unreachable!(),
                };
                if let Some(gx) = self.slot(grads, *x) {
                    for ch in 0..c {
                        for by in 0..*bins {
                            let (y0, y1) = kernels::pool_range(by, *bins, h);
                            for bx in 0..*bins {
                                let (x0, x1) = kernels::pool_range(bx, *bins, w);
                                let share = g[(ch * bins + by) * bins + bx] / T::lit(((y1 - y0) * (x1 - x0)) as f64);
                                for y in y0..y1 {
                                    for xx in x0..x1 {
                                        gx[(ch * h + y) * w + xx] += share;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::UpsampleNearest { x, factor } => {
                let (c, h, w) = match self.shape(*x) {
                    [c, h, w] => (*c, *h, *w),
                    _ => unreachable!(),
                };
                if let Some(gx) = self.slot(grads, *x) {
                    let (oh, ow) = (h * factor, w * factor);
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                gx[(ch * h + y / factor) * w + xx / factor] += g[(ch * oh + y) * ow + xx];
                            }
                        }
                    }
                }
            }
            Op::AddRowBias { x, bias } => {
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::axpy(T::one(), g, gx);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    let q = gb.len();
                    for row in g.chunks(q) {
                        kernels::axpy(T::one(), row, gb);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let inner = node.value.len() / rows.len().max(1);
                if let Some(gx) = self.slot(grads, *x) {
                    for (k, &r) in rows.iter().enumerate() {
                        kernels::axpy(T::one(), &g[k * inner..(k + 1) * inner], &mut gx[r * inner..(r + 1) * inner]);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_values_and_identities() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab), &[19.0, 22.0, 43.0, 50.0]);

        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let ai = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(ai), tape.value(a));
        let zero = tape.constant(Tensor::zeros([2, 3]));
        let az = tape.matmul(a, zero).unwrap();
        assert!(tape.value(az).iter().all(|&v| v == 0.0));

        let bad = tape.constant(Tensor::zeros([3, 1]));
        assert!(matches!(tape.matmul(a, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv2d_identity_zero_and_box_sum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([1, 4, 4], |i| i as f64 - 3.0));
        let one = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, one, None, 0, 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let zk = tape.constant(Tensor::zeros([2, 1, 3, 3]));
        let z = tape.conv2d(x, zk, None, 1, 1).unwrap();
        assert!(tape.value(z).iter().all(|&v| v == 0.0));

        let ones = tape.constant(Tensor::full([1, 5, 5], 1.0));
        let k = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
        let s = tape.conv2d(ones, k, None, 1, 1).unwrap();
        let out = tape.to_tensor(s);
        assert_eq!(out.shape(), &[1, 5, 5]);
        assert_eq!(out.get(&[0, 2, 2]), 9.0);
        assert_eq!(out.get(&[0, 0, 0]), 4.0);
        assert_eq!(out.get(&[0, 4, 4]), 4.0);
        assert_eq!(out.get(&[0, 0, 2]), 6.0);

        let wrong = tape.constant(Tensor::zeros([1, 2, 3, 3]));
        assert!(matches!(tape.conv2d(ones, wrong, None, 1, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_values_and_nan_guard() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[3], &[2.0, 1.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let expected = [0.665_240_955_774_821_7, 0.244_728_471_054_797_6, 0.090_030_573_170_380_46];
        for (a, b) in tape.value(y).iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let nan = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(nan, 0), Err(Error::Numeric(_))));
        assert!(matches!(tape.softmax(x, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(Tensor::zeros([3, 4]));
        let l = tape.cross_entropy(s, &[0, 1, 2, 1], None, None).unwrap();
        assert!((tape.scalar_value(l) - 3f64.ln()).abs() < 1e-12);

        let s = tape.constant(t(&[2, 1], &[500.0, -500.0]));
        let l = tape.cross_entropy(s, &[0], None, None).unwrap();
        assert!(tape.scalar_value(l) < 1e-12);

        let s = tape.constant(Tensor::zeros([2, 2]));
        assert!(matches!(tape.cross_entropy(s, &[0, 2], None, None), Err(Error::Label(_))));
        // ignored pixels may hold any id
        let l = tape.cross_entropy(s, &[0, 255], None, Some(255)).unwrap();
        assert!((tape.scalar_value(l) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weighted_cross_entropy_matches_scalar_oracle() {
        // Oracle: exp-normalize per pixel, then the weighted average.
        let logits = [[0.3, -1.2], [1.5, 0.4]]; // [class][pixel]
        let nll = |px: usize, t: usize| {
            let z: f64 = (0..2).map(|k| f64::exp(logits[k][px])).sum();
            -(f64::exp(logits[t][px]) / z).ln()
        };
        let (l1, l2) = (nll(0, 0), nll(1, 1));
        let expected = (1.0 * l1 + 2.0 * l2) / 3.0;

        let mut tape = Tape::<f64>::new();
        let s = tape.constant(t(&[2, 2], &[0.3, -1.2, 1.5, 0.4]));
        let l = tape.cross_entropy(s, &[0, 1], Some(&[1.0, 2.0]), None).unwrap();
        assert!((tape.scalar_value(l) - expected).abs() < 1e-14);
    }

    #[test]
    fn shape_ops() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);

        let m = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let up = tape.upsample_nearest(m, 2).unwrap();
        assert_eq!(
            tape.value(up),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );

        let c = tape.constant(Tensor::full([2, 6, 6], 0.7));
        for bins in [1, 2, 3, 4] {
            let p = tape.adaptive_avg_pool(c, bins).unwrap();
            assert!(tape.value(p).iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }

        let a = tape.constant(Tensor::from_fn([2, 2], |i| i as f64));
        let b = tape.constant(Tensor::from_fn([2, 1], |i| 10.0 + i as f64));
        let cat = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(cat), &[0.0, 1.0, 10.0, 2.0, 3.0, 11.0]);
        let cat0 = tape.concat(&[a, a], 0).unwrap();
        assert_eq!(tape.shape(cat0), &[4, 2]);
        assert!(tape.concat(&[a, b], 0).is_err());

        let tr = tape.transpose(cat).unwrap();
        assert_eq!(tape.value(tr), &[0.0, 2.0, 1.0, 3.0, 10.0, 11.0]);
        assert!(tape.reshape(tr, &[4]).is_err());
    }

    #[test]
    fn backward_square_and_disconnected_leaf() {
        let x = Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap().into_param();
        let mut other = Tensor::new([2], vec![4.0, 5.0]).unwrap().into_param();
        let mut tape = Tape::<f64>::new();
        let xv = tape.watch(&x);
        let ov = tape.watch(&other);
        let sq = tape.mul(xv, xv).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(loss), Some(&[1.0][..]));
        assert_eq!(grads.get(xv), Some(&[2.0, -4.0, 1.0][..]));
        grads.accumulate_into(ov, &mut other).unwrap();
        assert_eq!(other.grad(), Some(&[0.0, 0.0][..]));
        assert!(tape.backward(sq).is_err());
    }
}
