use crate::error::{NnError, Result};
use crate::ops::{slot, Op};
use crate::scalar::Scalar;
use crate::tape::{Node, Tape, Var};
use crate::tensor::Tensor;

impl<F: Scalar> Tape<F> {
    /// Softmax along the last axis, stabilized by subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(value, Op::Softmax(x))
    }

    /// Mean negative log-likelihood of integer targets under row distributions
    /// `probs[N, C]`, scaled by `weight`: `-weight/N * sum_n ln(max(p[n, t_n], clamp))`.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize], weight: F, clamp: F) -> Result<Var> {
        let s = self.shape(probs);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(NnError::shape(
                "cross_entropy",
                format!("probs {s:?} vs {} targets", targets.len()),
            ));
        }
        let c = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(NnError::invalid(
                "cross_entropy",
                format!("target class {bad} out of range for {c} classes"),
            ));
        }
        let p = self.value(probs).data();
        let n = F::from_usize(targets.len()).unwrap();
        let total: F = targets
            .iter()
            .enumerate()
            .map(|(row, &t)| p[row * c + t].max(clamp).ln())
            .sum();
        let loss = -weight * total / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
                weight,
                clamp,
            },
        ))
    }
}

pub(crate) fn backward<F: Scalar>(
    op: &Op<F>,
    out: &Node<F>,
    nodes: &[Node<F>],
    g: &[F],
    adj: &mut [Option<Vec<F>>],
) {
    match op {
        Op::Softmax(x) => {
            let y = out.value.data();
            let c = *out.value.shape().last().unwrap();
            if let Some(s) = slot(adj, nodes, *x) {
                for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let dot: F = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((s, &gv), &yv) in srow.iter_mut().zip(grow).zip(yrow) {
                        *s += yv * (gv - dot);
                    }
                }
            }
        }
        Op::CrossEntropy {
            probs,
            targets,
            weight,
            clamp,
        } => {
            let p = nodes[probs.0].value.data();
            let c = nodes[probs.0].value.shape()[1];
            let n = F::from_usize(targets.len()).unwrap();
            if let Some(s) = slot(adj, nodes, *probs) {
                for (row, &t) in targets.iter().enumerate() {
                    let pv = p[row * c + t];
                    if pv > *clamp {
                        s[row * c + t] -= g[0] * *weight / (n * pv);
                    }
                }
            }
        }
        _ => unreachable!("not a softmax op"),
    }
}
