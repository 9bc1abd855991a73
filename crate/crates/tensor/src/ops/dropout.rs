use crate::error::{NnError, Result};
use crate::ops::{slot, Op};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tape::{Node, Tape, Var};
use crate::tensor::Tensor;

impl<F: Scalar> Tape<F> {
    /// Inverted dropout: each entry survives with probability `1 - p` and is
    /// scaled by `1 / (1 - p)`. Identity when `training` is false or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::invalid("dropout", format!("p must be in [0, 1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = F::from_f64_lossy(1.0 / (1.0 - p));
        let t = self.value(x);
        let mask: Vec<F> = (0..t.len())
            .map(|_| if rng.uniform() < p { F::zero() } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(value, Op::Dropout { input: x, mask }))
    }
}

pub(crate) fn backward<F: Scalar>(
    op: &Op<F>,
    nodes: &[Node<F>],
    g: &[F],
    adj: &mut [Option<Vec<F>>],
) {
    let Op::Dropout { input, mask } = op else {
        unreachable!()
    };
    if let Some(s) = slot(adj, nodes, *input) {
        for ((s, &gv), &m) in s.iter_mut().zip(g).zip(mask) {
            *s += gv * m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_not_training_or_p_zero() {
        let mut tape = Tape::<f32>::new();
        let mut rng = RngStream::new(3);
        let x = tape.constant(Tensor::from_fn(&[10], |i| i as f32));
        assert_eq!(tape.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    }

    #[test]
    fn rejects_p_of_one() {
        let mut tape = Tape::<f32>::new();
        let mut rng = RngStream::new(3);
        let x = tape.constant(Tensor::ones(&[4]));
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
        assert!(tape.dropout(x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn preserves_expectation() {
        // Monte-Carlo over 10^5 masks of a constant input.
        let mut tape = Tape::<f64>::new();
        let mut rng = RngStream::new(11);
        let x = tape.constant(Tensor::full(&[100_000], 2.0));
        let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let mean = tape.value(y).sum() / 100_000.0;
        assert!((mean - 2.0).abs() / 2.0 < 0.01, "mean {mean}");
    }
}
