use crate::error::{NnError, Result};
use crate::ops::{slot, Op};
use crate::scalar::Scalar;
use crate::tape::{Node, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// (outer, channels, inner) view of a tensor broadcast against a per-channel vector.
fn channel_split(op: &'static str, shape: &[usize], channels: usize) -> Result<(usize, usize)> {
    if shape.len() < 2 || shape[1] != channels {
        return Err(NnError::shape(
            op,
            format!("expected [N, {channels}, ..], got {shape:?}"),
        ));
    }
    Ok((shape[0], shape[2..].iter().product()))
}

impl<F: Scalar> Tape<F> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (x, y) = (self.value(a), self.value(b));
        Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |p, q| p + q);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |p, q| p - q);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |p, q| p * q);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let v = self.value(x).map(|p| p * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let v = self.value(x).map(|p| p + c);
        self.push(v, Op::AddScalar(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(F::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|p| p.max(F::zero()));
        self.push(v, Op::Relu(x))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Tanh => self.tanh(x),
            Activation::Relu => self.relu(x),
        }
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / F::from_usize(t.len()).unwrap();
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Adds `bias[C]` along axis 1 of `x[N, C, ..]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let b = self.value(bias);
        if b.rank() != 1 {
            return Err(NnError::shape("add_channel", format!("bias must be rank 1, got {:?}", b.shape())));
        }
        let c = b.len();
        let (outer, inner) = channel_split("add_channel", self.shape(x), c)?;
        let mut out = self.value(x).clone();
        let bd = self.value(bias).data();
        for n in 0..outer {
            for (ch, &bv) in bd.iter().enumerate() {
                let base = (n * c + ch) * inner;
                out.data_mut()[base..base + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        Ok(self.push(out, Op::AddChannel { x, bias }))
    }

    /// Scales `x[N, C, ..]` by `weight[C]` along axis 1.
    pub fn mul_channel(&mut self, x: Var, weight: Var) -> Result<Var> {
        let w = self.value(weight);
        if w.rank() != 1 {
            return Err(NnError::shape("mul_channel", format!("weight must be rank 1, got {:?}", w.shape())));
        }
        let c = w.len();
        let (outer, inner) = channel_split("mul_channel", self.shape(x), c)?;
        let mut out = self.value(x).clone();
        let wd = self.value(weight).data();
        for n in 0..outer {
            for (ch, &wv) in wd.iter().enumerate() {
                let base = (n * c + ch) * inner;
                out.data_mut()[base..base + inner].iter_mut().for_each(|v| *v *= wv);
            }
        }
        Ok(self.push(out, Op::MulChannel { x, weight }))
    }

    /// `x[N, C, ..] * mask[N, 1, ..]`, the mask broadcast over channels.
    pub fn mul_spatial(&mut self, x: Var, mask: Var) -> Result<Var> {
        let (xs, ms) = (self.shape(x), self.shape(mask));
        if xs.len() < 2 || ms.len() != xs.len() || ms[1] != 1 || ms[0] != xs[0] || ms[2..] != xs[2..] {
            return Err(NnError::shape(
                "mul_spatial",
                format!("mask {ms:?} does not broadcast over {xs:?}"),
            ));
        }
        let (outer, c, inner) = (xs[0], xs[1], xs[2..].iter().product::<usize>());
        let mut out = self.value(x).clone();
        let md = self.value(mask).data();
        for n in 0..outer {
            let m = &md[n * inner..(n + 1) * inner];
            for ch in 0..c {
                let base = (n * c + ch) * inner;
                out.data_mut()[base..base + inner]
                    .iter_mut()
                    .zip(m)
                    .for_each(|(v, &mv)| *v *= mv);
            }
        }
        Ok(self.push(out, Op::MulSpatial { x, mask }))
    }
}

pub(crate) fn backward<F: Scalar>(
    op: &Op<F>,
    out: &Node<F>,
    nodes: &[Node<F>],
    g: &[F],
    adj: &mut [Option<Vec<F>>],
) {
    let val = |v: Var| nodes[v.0].value.data();
    match *op {
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(s) = slot(adj, nodes, v) {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(s) = slot(adj, nodes, a) {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
            }
            if let Some(s) = slot(adj, nodes, b) {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s -= g);
            }
        }
        Op::Mul(a, b) => {
            if let Some(s) = slot(adj, nodes, a) {
                for ((s, &g), &y) in s.iter_mut().zip(g).zip(val(b)) {
                    *s += g * y;
                }
            }
            if let Some(s) = slot(adj, nodes, b) {
                for ((s, &g), &x) in s.iter_mut().zip(g).zip(val(a)) {
                    *s += g * x;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(s) = slot(adj, nodes, x) {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s += g * c);
            }
        }
        Op::AddScalar(x) => {
            if let Some(s) = slot(adj, nodes, x) {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
            }
        }
        Op::Sigmoid(x) => {
            if let Some(s) = slot(adj, nodes, x) {
                for ((s, &g), &y) in s.iter_mut().zip(g).zip(out.value.data()) {
                    *s += g * y * (F::one() - y);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(s) = slot(adj, nodes, x) {
                for ((s, &g), &y) in s.iter_mut().zip(g).zip(out.value.data()) {
                    *s += g * (F::one() - y * y);
                }
            }
        }
        Op::Relu(x) => {
            if let Some(s) = slot(adj, nodes, x) {
                for ((s, &g), &xv) in s.iter_mut().zip(g).zip(val(x)) {
                    if xv > F::zero() {
                        *s += g;
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(s) = slot(adj, nodes, x) {
                s.iter_mut().for_each(|s| *s += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(s) = slot(adj, nodes, x) {
                let d = g[0] / F::from_usize(s.len()).unwrap();
                s.iter_mut().for_each(|s| *s += d);
            }
        }
        Op::AddChannel { x, bias } => {
            if let Some(s) = slot(adj, nodes, x) {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
            }
            let shape = nodes[x.0].value.shape();
            let c = shape[1];
            let inner: usize = shape[2..].iter().product();
            if let Some(s) = slot(adj, nodes, bias) {
                for (k, chunk) in g.chunks(inner).enumerate() {
                    s[k % c] += chunk.iter().copied().sum::<F>();
                }
            }
        }
        Op::MulChannel { x, weight } => {
            let shape = nodes[x.0].value.shape();
            let c = shape[1];
            let inner: usize = shape[2..].iter().product();
            let wd = val(weight);
            if let Some(s) = slot(adj, nodes, x) {
                for (k, (sc, gc)) in s.chunks_mut(inner).zip(g.chunks(inner)).enumerate() {
                    let w = wd[k % c];
                    sc.iter_mut().zip(gc).for_each(|(s, &g)| *s += g * w);
                }
            }
            let xd = val(x);
            if let Some(s) = slot(adj, nodes, weight) {
                for (k, (xc, gc)) in xd.chunks(inner).zip(g.chunks(inner)).enumerate() {
                    s[k % c] += xc.iter().zip(gc).map(|(&x, &g)| x * g).sum::<F>();
                }
            }
        }
        Op::MulSpatial { x, mask } => {
            let shape = nodes[x.0].value.shape();
            let c = shape[1];
            let inner: usize = shape[2..].iter().product();
            let md = val(mask);
            let xd = val(x);
            if let Some(s) = slot(adj, nodes, x) {
                for (k, (sc, gc)) in s.chunks_mut(inner).zip(g.chunks(inner)).enumerate() {
                    let m = &md[(k / c) * inner..(k / c + 1) * inner];
                    for ((s, &g), &mv) in sc.iter_mut().zip(gc).zip(m) {
                        *s += g * mv;
                    }
                }
            }
            if let Some(s) = slot(adj, nodes, mask) {
                for (k, (xc, gc)) in xd.chunks(inner).zip(g.chunks(inner)).enumerate() {
                    let n = k / c;
                    let sm = &mut s[n * inner..(n + 1) * inner];
                    for ((s, &g), &xv) in sm.iter_mut().zip(gc).zip(xc) {
                        *s += g * xv;
                    }
                }
            }
        }
        _ => unreachable!("not an elementwise op"),
    }
}
