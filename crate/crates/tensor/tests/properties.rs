use blinknet_tensor::checkpoint;
use blinknet_tensor::{ConvOptions, Tape, Tensor};
use proptest::prelude::*;

fn conv(x: &Tensor<f64>, k: &Tensor<f64>, dilation: usize) -> Tensor<f64> {
    let mut tape = Tape::<f64>::inference();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(k.clone());
    let y = tape.conv2d(xv, kv, None, ConvOptions::same(dilation)).unwrap();
    tape.value(y).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear_in_input(
        seed in 0u64..1000,
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        dilation in 1usize..3,
    ) {
        let mut r = blinknet_tensor::RngStream::new(seed);
        let shape = [2, 3, 6, 5];
        let x1 = Tensor::from_fn(&shape, |_| r.uniform_range(-1.0, 1.0));
        let x2 = Tensor::from_fn(&shape, |_| r.uniform_range(-1.0, 1.0));
        let k = Tensor::from_fn(&[4, 3, 3, 3], |_| r.uniform_range(-1.0, 1.0));
        let mix = Tensor::from_fn(&shape, |i| a * x1.data()[i] + b * x2.data()[i]);
        let lhs = conv(&mix, &k, dilation);
        let (c1, c2) = (conv(&x1, &k, dilation), conv(&x2, &k, dilation));
        let rhs = Tensor::from_fn(lhs.shape(), |i| a * c1.data()[i] + b * c2.data()[i]);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-5);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shift(
        logits in prop::collection::vec(-50.0f64..50.0, 1..12),
        shift in -500.0f64..500.0,
    ) {
        let n = logits.len();
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::new(&[1, n], logits.clone()).unwrap());
        let xs = tape.add_scalar(x, shift);
        let p = tape.softmax(x);
        let q = tape.softmax(xs);
        let total: f64 = tape.value(p).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(tape.value(p).data().iter().all(|&v| v >= 0.0));
        prop_assert!(tape.value(p).max_abs_diff(tape.value(q)) < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        values in prop::collection::vec(any::<f32>(), 1..64),
        name in "[a-z]{1,8}(\\.[a-z0-9]{1,6}){0,3}",
    ) {
        let t = Tensor::new(&[values.len()], values).unwrap();
        let bytes = checkpoint::encode("", [(name.as_str(), &t)]);
        let back = checkpoint::decode(&bytes).unwrap();
        let got = &back.tensors[&name];
        prop_assert_eq!(got.shape(), t.shape());
        for (x, y) in got.data().iter().zip(t.data()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
