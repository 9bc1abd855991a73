#![allow(dead_code)]

pub mod checks;

use blinknet::convlstm::{
    init_layer, stack_forward, LayerSpec, LayerVars, PeepholeMode, StepOptions,
};
use blinknet::ParamStore;
use blinknet_tensor::{RngStream, Tape, Tensor};

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Vector peephole LSTM written from the defining equations with plain
/// loops. `w*` are row-major `[out, in]` matrices.
pub struct ScalarLstm {
    pub cin: usize,
    pub ch: usize,
    pub wx: [Vec<f64>; 4],
    pub wh: [Vec<f64>; 4],
    pub b: [Vec<f64>; 4],
    pub wc: [Vec<f64>; 3],
}

impl ScalarLstm {
    pub fn from_store(store: &ParamStore<f64>, cin: usize, ch: usize) -> Self {
        let get = |g: &str, r: &str| {
            store
                .get(&format!("convlstm.layer0.{g}.{r}"))
                .unwrap()
                .data()
                .to_vec()
        };
        let gates = ["i", "f", "c", "o"];
        ScalarLstm {
            cin,
            ch,
            wx: gates.map(|g| get(g, "wx")),
            wh: gates.map(|g| get(g, "wh")),
            b: gates.map(|g| get(g, "b")),
            wc: ["i", "f", "o"].map(|g| get(g, "wc")),
        }
    }

    fn affine(&self, g: usize, x: &[f64], h: &[f64], k: usize) -> f64 {
        let mut z = self.b[g][k];
        for j in 0..self.cin {
            z += self.wx[g][k * self.cin + j] * x[j];
        }
        for j in 0..self.ch {
            z += self.wh[g][k * self.ch + j] * h[j];
        }
        z
    }

    /// Runs the sequence from zero state and returns every hidden state.
    pub fn run(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut h = vec![0.0; self.ch];
        let mut c = vec![0.0; self.ch];
        let mut out = Vec::new();
        for x in xs {
            let mut nh = vec![0.0; self.ch];
            let mut nc = vec![0.0; self.ch];
            for k in 0..self.ch {
                let i = sig(self.affine(0, x, &h, k) + self.wc[0][k] * c[k]);
                let f = sig(self.affine(1, x, &h, k) + self.wc[1][k] * c[k]);
                let g = self.affine(2, x, &h, k).tanh();
                nc[k] = f * c[k] + i * g;
                let o = sig(self.affine(3, x, &h, k) + self.wc[2][k] * nc[k]);
                nh[k] = o * nc[k].tanh();
            }
            h = nh;
            c = nc;
            out.push(h.clone());
        }
        out
    }
}

/// Random 1×1-kernel layer with every parameter drawn from `[-1.5, 1.5]`.
pub fn random_pointwise_layer(cin: usize, ch: usize, seed: u64) -> ParamStore<f64> {
    let mut rng = RngStream::new(seed);
    let mut store = ParamStore::new();
    let spec = LayerSpec {
        input_channels: cin,
        hidden_channels: ch,
        kernel: 1,
        peephole: PeepholeMode::Elementwise,
    };
    init_layer(&mut store, 0, &spec, &mut rng).unwrap();
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v = rng.uniform_range(-1.5, 1.5);
        }
    }
    store
}

/// Largest deviation between the ConvLSTM stack on a 1×1 grid and the
/// scalar oracle, over `seeds` random parameter draws.
pub fn convlstm_oracle_max_error(seeds: u64) -> f64 {
    let (cin, ch, steps) = (3, 2, 4);
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let store = random_pointwise_layer(cin, ch, 1000 + seed);
        let mut rng = RngStream::new(seed);
        let xs: Vec<Vec<f64>> = (0..steps)
            .map(|_| (0..cin).map(|_| rng.uniform_range(-2.0, 2.0)).collect())
            .collect();
        let expected = ScalarLstm::from_store(&store, cin, ch).run(&xs);

        let mut tape = Tape::<f64>::inference();
        let vars = store.register(&mut tape);
        let layer = LayerVars::from_params(&vars, 0).unwrap();
        let flat: Vec<f64> = xs.concat();
        let x = tape.constant(Tensor::new(&[steps, 1, cin, 1, 1], flat).unwrap());
        let opts = StepOptions::inference(PeepholeMode::Elementwise);
        let out = stack_forward(&mut tape, x, &[layer], &opts, &mut RngStream::new(0)).unwrap();
        let got = tape.value(out).data();
        for (t, e) in expected.iter().enumerate() {
            for k in 0..ch {
                worst = worst.max((got[t * ch + k] - e[k]).abs());
            }
        }
    }
    worst
}
