use crate::error::{NnError, Result};
use crate::ops::{slot, Op};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tape::{Node, Tape, Var};
use crate::tensor::Tensor;

impl<F: Scalar> Tape<F> {
    /// `a[N, D] x b[D, M]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NnError::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, d, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); n * m];
        gemm(
            n,
            d,
            m,
            self.value(a).data(),
            Layout::Normal { cols: d },
            self.value(b).data(),
            Layout::Normal { cols: m },
            F::zero(),
            &mut out,
        );
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b)))
    }

    /// Affine map `x[N, D] * weights[D, M] + bias[M]`.
    pub fn dense(&mut self, x: Var, weights: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weights)?;
        self.add_channel(y, bias)
            .map_err(|_| NnError::shape("dense", format!("bias {:?} vs output {:?}", self.shape(bias), self.shape(y))))
    }
}

pub(crate) fn backward<F: Scalar>(
    op: &Op<F>,
    nodes: &[Node<F>],
    g: &[F],
    adj: &mut [Option<Vec<F>>],
) {
    let Op::MatMul(a, b) = *op else {
        unreachable!()
    };
    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
    let (n, d, m) = (sa[0], sa[1], sb[1]);
    // dA = G * B^T
    if let Some(s) = slot(adj, nodes, a) {
        gemm(
            n,
            m,
            d,
            g,
            Layout::Normal { cols: m },
            nodes[b.0].value.data(),
            Layout::Transposed { cols: m },
            F::one(),
            s,
        );
    }
    // dB = A^T * G
    if let Some(s) = slot(adj, nodes, b) {
        gemm(
            d,
            n,
            m,
            nodes[a.0].value.data(),
            Layout::Transposed { cols: d },
            g,
            Layout::Normal { cols: m },
            F::one(),
            s,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_arithmetic() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::new(&[1], vec![3.0]).unwrap());
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn identity_weights() {
        let mut tape = Tape::<f32>::new();
        let xv = Tensor::from_fn(&[3, 4], |i| i as f32 * 0.5 - 2.0);
        let x = tape.constant(xv.clone());
        let w = tape.constant(Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 }));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn bias_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 3], |i| i as f64));
        let w = tape.param("w", Tensor::from_fn(&[3, 2], |i| i as f64 * 0.1));
        let b = tape.param("b", Tensor::zeros(&[2]));
        let y = tape.dense(x, w, b).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(tape.matmul(x, w), Err(NnError::Shape { .. })));
    }
}
