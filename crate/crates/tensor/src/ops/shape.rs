use crate::error::{NnError, Result};
use crate::ops::{slot, Op};
use crate::scalar::Scalar;
use crate::tape::{Node, Tape, Var};
use crate::tensor::Tensor;

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl<F: Scalar> Tape<F> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() || shape.contains(&0) {
            return Err(NnError::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", t.shape()),
            ));
        }
        let value = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(NnError::shape(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Narrow { input: x, axis, start },
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(NnError::invalid("concat", "no inputs"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(NnError::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(NnError::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Concat {
                inputs: parts.to_vec(),
                axis,
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
        Op::Reshape(x) => {
            if let Some(s) = slot(adj, nodes, *x) {
                s.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
            }
        }
        Op::Narrow { input, axis, start } => {
            let (outer, dim, inner) = split_at_axis(nodes[input.0].value.shape(), *axis);
            let len = out.value.shape()[*axis];
            if let Some(s) = slot(adj, nodes, *input) {
                for o in 0..outer {
                    let dst = &mut s[(o * dim + start) * inner..(o * dim + start + len) * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_at_axis(out.value.shape(), *axis);
            let mut offset = 0;
            for &p in inputs {
                let d = nodes[p.0].value.shape()[*axis];
                if let Some(s) = slot(adj, nodes, p) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + d) * inner];
                        s[o * d * inner..(o + 1) * d * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &v)| *a += v);
                    }
                }
                offset += d;
            }
        }
        _ => unreachable!("not a shape op"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn narrow_then_concat_round_trips() {
        let mut tape = Tape::<f32>::new();
        let xv = Tensor::from_fn(&[2, 5, 3], |i| i as f32);
        let x = tape.constant(xv.clone());
        let a = tape.narrow(x, 1, 0, 2).unwrap();
        let b = tape.narrow(x, 1, 2, 3).unwrap();
        let y = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(y), &xv);
        assert_eq!(tape.value(a).at(&[1, 1, 2]), xv.at(&[1, 1, 2]));
    }

    #[test]
    fn narrow_out_of_range() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.narrow(x, 1, 2, 2).is_err());
        assert!(tape.narrow(x, 2, 0, 1).is_err());
    }

    #[test]
    fn reshape_checks_count() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.reshape(x, &[3, 2]).is_ok());
        assert!(tape.reshape(x, &[4, 2]).is_err());
    }
}
