use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    LeakyRelu { x: Var, slope: T },
    Sigmoid { x: Var },
    Gather { x: Var, indices: Vec<u32> },
    Duplicate { x: Var, k: usize },
    Concat { parts: Vec<Var> },
    Slice { x: Var, start: usize },
    MaxPool { x: Var, argmax: Vec<u32> },
    Mul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, s: T },
    AddScalar { x: Var },
    Powf { x: Var, p: T },
    Clamp { x: Var, lo: T, hi: T },
    Mean { x: Var },
    Variance { x: Var },
    Covariance { a: Var, b: Var },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of one forward pass. Nodes are appended in evaluation
/// order, so record order is a topological order of the graph.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients of a scalar with respect to every node that needs one.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`. Every parameter has one,
    /// zero if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    /// Drops every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf; receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Per-point 1×1 convolution: `out[.., j] = Σ_i x[.., i] w[i][j] + b[j]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let cin = xv.channels();
        if wv.shape().len() != 2 || wv.shape()[0] != cin {
            return Err(shape_err(format!("linear: input {:?} vs weight {:?}", xv.shape(), wv.shape())));
        }
        let cout = wv.shape()[1];
        if bv.shape() != [cout] {
            return Err(shape_err(format!("linear: bias {:?} for {cout} outputs", bv.shape())));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * cout);
        for _ in 0..rows {
            data.extend_from_slice(bv.data());
        }
        T::gemm(rows, cin, cout, xv.data(), false, wv.data(), false, T::one(), &mut data);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let out = Tensor::new(&shape, data)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self.value(x).map(|v| if v >= T::zero() { v } else { slope * v });
        let ng = self.needs(x);
        self.push(out, Op::LeakyRelu { x, slope }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid { x }, ng)
    }

    /// `out[i][j] = x[indices[i*k + j]]` for an `n×c` input; output `rows×k×c`.
    pub fn gather(&mut self, x: Var, indices: &[u32], k: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(shape_err(format!("gather: input must be n×c, got {:?}", xv.shape())));
        }
        if k == 0 || indices.is_empty() || indices.len() % k != 0 {
            return Err(shape_err(format!("gather: {} indices do not form rows of {k}", indices.len())));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= n) {
            return Err(shape_err(format!("gather: index {bad} out of range for {n} rows")));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            let i = i as usize;
            data.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(&[indices.len() / k, k, c], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Gather { x, indices: indices.to_vec() }, ng))
    }

    /// Repeats each row of an `n×c` input `k` times: `n×k×c`.
    pub fn duplicate(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || k == 0 {
            return Err(shape_err(format!("duplicate: input {:?}, k = {k}", xv.shape())));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let mut data = Vec::with_capacity(n * k * c);
        for row in xv.data().chunks_exact(c) {
            for _ in 0..k {
                data.extend_from_slice(row);
            }
        }
        let out = Tensor::new(&[n, k, c], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Duplicate { x, k }, ng))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat: no inputs".into()))?;
        let lead = self.value(*first).shape()[..self.value(*first).shape().len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(shape_err(format!("concat: leading shape {:?} vs {:?}", s, lead)));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(&shape, data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::Concat { parts: parts.to_vec() }, ng))
    }

    /// Channels `[start, end)` of the input.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.channels();
        if start >= end || end > c {
            return Err(shape_err(format!("slice: [{start}, {end}) of {c} channels")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(xv.rows() * w);
        for row in xv.data().chunks_exact(c) {
            data.extend_from_slice(&row[start..end]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let out = Tensor::new(&shape, data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Slice { x, start }, ng))
    }

    /// Maximum over the neighbour axis of an `n×k×c` input. The gradient goes
    /// to the first maximal entry.
    pub fn max_pool_neighbors(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 3 {
            return Err(shape_err(format!("max_pool: input must be n×k×c, got {:?}", xv.shape())));
        }
        let (n, k, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let d = xv.data();
        let mut data = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for i in 0..n {
            let base = i * k * c;
            for ch in 0..c {
                let mut best = d[base + ch];
                let mut arg = 0u32;
                for j in 1..k {
                    let v = d[base + j * c + ch];
                    if v > best {
                        best = v;
                        arg = j as u32;
                    }
                }
                data.push(best);
                argmax.push(arg);
            }
        }
        let out = Tensor::new(&[n, c], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor { shape: av.shape().to_vec(), data }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.needs(x);
        self.push(out, Op::Scale { x, s }, ng)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v + s);
        let ng = self.needs(x);
        self.push(out, Op::AddScalar { x }, ng)
    }

    /// Elementwise power; callers keep the base positive for fractional `p`.
    pub fn powf(&mut self, x: Var, p: T) -> Var {
        let out = self.value(x).map(|v| v.powf(p));
        let ng = self.needs(x);
        self.push(out, Op::Powf { x, p }, ng)
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only where the input
    /// already lies inside the closed interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| if v < lo { lo } else if v > hi { hi } else { v });
        let ng = self.needs(x);
        self.push(out, Op::Clamp { x, lo, hi }, ng)
    }

    pub fn reduce_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = T::of(xv.numel() as f64);
        let m = xv.data().iter().copied().sum::<T>() / n;
        let ng = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, ng)
    }

    /// Population variance over all elements.
    pub fn reduce_var(&mut self, x: Var) -> Var {
        let v = variance(self.value(x).data());
        let ng = self.needs(x);
        self.push(Tensor::scalar(v), Op::Variance { x }, ng)
    }

    /// Population covariance over all elements.
    pub fn reduce_cov(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cov")?;
        let c = covariance(self.value(a).data(), self.value(b).data());
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(c), Op::Covariance { a, b }, ng))
    }

    /// Reverse pass from a scalar node. A tape supports one backward pass
    /// until [`Tape::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Tape("backward already run on this tape; reset it first".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.needs_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
            if !node.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.needs(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (cin, cout, rows) = (wv.shape()[0], wv.shape()[1], xv.rows());
                if let Some(gx) = self.grad_slot(grads, *x) {
                    T::gemm(rows, cout, cin, gd, false, wv.data(), true, T::one(), gx);
                }
                if let Some(gw) = self.grad_slot(grads, *w) {
                    T::gemm(cin, rows, cout, xv.data(), true, gd, false, T::one(), gw);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for row in gd.chunks_exact(cout) {
                        add_into(gb, row);
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((d, &gi), &xi) in gx.iter_mut().zip(gd).zip(xv) {
                        *d += if xi >= T::zero() { gi } else { *slope * gi };
                    }
                }
            }
            Op::Sigmoid { x } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((d, &gi), &y) in gx.iter_mut().zip(gd).zip(out.data()) {
                        *d += gi * y * (T::one() - y);
                    }
                }
            }
            Op::Gather { x, indices } => {
                let c = self.value(*x).channels();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (&i, row) in indices.iter().zip(gd.chunks_exact(c)) {
                        let i = i as usize;
                        add_into(&mut gx[i * c..(i + 1) * c], row);
                    }
                }
            }
            Op::Duplicate { x, k } => {
                let c = self.value(*x).channels();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (dst, block) in gx.chunks_exact_mut(c).zip(gd.chunks_exact(k * c)) {
                        for row in block.chunks_exact(c) {
                            add_into(dst, row);
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let total = out.channels();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).channels();
                    if let Some(gp) = self.grad_slot(grads, p) {
                        for (dst, row) in gp.chunks_exact_mut(w).zip(gd.chunks_exact(total)) {
                            add_into(dst, &row[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let c = self.value(*x).channels();
                let w = out.channels();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (dst, row) in gx.chunks_exact_mut(c).zip(gd.chunks_exact(w)) {
                        add_into(&mut dst[*start..*start + w], row);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let s = self.value(*x).shape();
                let (k, c) = (s[1], s[2]);
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (idx, (&gi, &j)) in gd.iter().zip(argmax).enumerate() {
                        let (i, ch) = (idx / c, idx % c);
                        gx[i * k * c + j as usize * c + ch] += gi;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((d, &gi), &y) in ga.iter_mut().zip(gd).zip(bv) {
                        *d += gi * y;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for ((d, &gi), &x) in gb.iter_mut().zip(gd).zip(av) {
                        *d += gi * x;
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    add_into(ga, gd);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    add_into(gb, gd);
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    add_into(ga, gd);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for (d, &gi) in gb.iter_mut().zip(gd) {
                        *d -= gi;
                    }
                }
            }
            Op::Scale { x, s } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for (d, &gi) in gx.iter_mut().zip(gd) {
                        *d += *s * gi;
                    }
                }
            }
            Op::AddScalar { x } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    add_into(gx, gd);
                }
            }
            Op::Powf { x, p } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((d, &gi), &xi) in gx.iter_mut().zip(gd).zip(xv) {
                        *d += gi * *p * xi.powf(*p - T::one());
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((d, &gi), &xi) in gx.iter_mut().zip(gd).zip(xv) {
                        if xi >= *lo && xi <= *hi {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Mean { x } => {
                let n = T::of(self.value(*x).numel() as f64);
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let v = gd[0] / n;
                    gx.iter_mut().for_each(|d| *d += v);
                }
            }
            Op::Variance { x } => {
                let xv = self.value(*x).data();
                let n = T::of(xv.len() as f64);
                let m = xv.iter().copied().sum::<T>() / n;
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let s = gd[0] * T::of(2.0) / n;
                    for (d, &xi) in gx.iter_mut().zip(xv) {
                        *d += s * (xi - m);
                    }
                }
            }
            Op::Covariance { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let n = T::of(av.len() as f64);
                let s = gd[0] / n;
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let mb = bv.iter().copied().sum::<T>() / n;
                    for (d, &y) in ga.iter_mut().zip(bv) {
                        *d += s * (y - mb);
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    let ma = av.iter().copied().sum::<T>() / n;
                    for (d, &x) in gb.iter_mut().zip(av) {
                        *d += s * (x - ma);
                    }
                }
            }
        }
    }
}

fn variance<T: Real>(x: &[T]) -> T {
    covariance(x, x)
}

fn covariance<T: Real>(a: &[T], b: &[T]) -> T {
    let n = T::of(a.len() as f64);
    let ma = a.iter().copied().sum::<T>() / n;
    let mb = b.iter().copied().sum::<T>() / n;
    a.iter().zip(b).map(|(&x, &y)| (x - ma) * (y - mb)).sum::<T>() / n
}
