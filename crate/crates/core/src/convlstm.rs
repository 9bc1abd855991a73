//! Convolutional LSTM cell with peephole connections, and a layered stack.
//!
//! One step computes, with `*` a "same"-padded convolution and `∘` the
//! peephole product (per-channel scale or convolution):
//!
//! ```text
//! I = σ(Wxi*X + Whi*H + Wci∘C' + Bi)
//! F = σ(Wxf*X + Whf*H + Wcf∘C' + Bf)
//! C = F⊙C' + I⊙drop(tanh(Wxc*X + Whc*H + Bc))
//! O = σ(Wxo*X + Who*H + Wco∘C + Bo)
//! H = O⊙tanh(C)
//! ```
//!
//! Dropout hits only the candidate term so the carried memory `C` stays
//! undropped. The four input kernels (and the four hidden kernels) are
//! concatenated along the output-channel axis and evaluated as one
//! convolution each.

use blinknet_tensor::{init, ConvOptions, RngStream, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamStore, ParamVars};

/// Gate order used for fused kernels and parameter names.
pub const GATES: [&str; 4] = ["i", "f", "c", "o"];
/// Gates that carry a peephole weight.
pub const PEEPHOLE_GATES: [&str; 3] = ["i", "f", "o"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeepholeMode {
    /// One weight per hidden channel, multiplied elementwise.
    #[default]
    Elementwise,
    /// A `[Ch, Ch, k, k]` kernel convolved with the cell state.
    Convolutional,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutMask {
    /// Fresh mask at every time step.
    #[default]
    PerStep,
    /// One mask reused across all steps of a sequence.
    PerSequence,
}

/// Shape of one ConvLSTM layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub input_channels: usize,
    pub hidden_channels: usize,
    pub kernel: usize,
    pub peephole: PeepholeMode,
}

impl LayerSpec {
    fn check(&self) -> Result<()> {
        if self.input_channels == 0 || self.hidden_channels == 0 {
            return Err(Error::config("convlstm.channels", "must be positive"));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::config("convlstm.kernel", "must be odd and positive"));
        }
        Ok(())
    }
}

/// Recurrent options shared by all layers of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub dropout: f64,
    pub training: bool,
    pub mask: DropoutMask,
    pub peephole: PeepholeMode,
}

impl StepOptions {
    pub fn inference(peephole: PeepholeMode) -> Self {
        StepOptions {
            dropout: 0.0,
            training: false,
            mask: DropoutMask::PerStep,
            peephole,
        }
    }
}

pub fn param_name(layer: usize, gate: &str, role: &str) -> String {
    format!("convlstm.layer{layer}.{gate}.{role}")
}

/// Allocates and initializes the parameters of layer `layer`.
///
/// Kernels use Glorot-uniform initialization per gate, biases start at zero
/// except the forget gate at 1.0, and elementwise peepholes start at zero.
pub fn init_layer<F: Scalar>(
    store: &mut ParamStore<F>,
    layer: usize,
    spec: &LayerSpec,
    rng: &mut RngStream,
) -> Result<()> {
    spec.check()?;
    let (cin, ch, k) = (spec.input_channels, spec.hidden_channels, spec.kernel);
    for gate in GATES {
        store.insert(param_name(layer, gate, "wx"), init::conv_kernel([ch, cin, k, k], rng));
        store.insert(param_name(layer, gate, "wh"), init::conv_kernel([ch, ch, k, k], rng));
        let bias = if gate == "f" { F::one() } else { F::zero() };
        store.insert(param_name(layer, gate, "b"), Tensor::full(&[ch], bias));
    }
    for gate in PEEPHOLE_GATES {
        let w = match spec.peephole {
            PeepholeMode::Elementwise => Tensor::zeros(&[ch]),
            PeepholeMode::Convolutional => init::conv_kernel([ch, ch, k, k], rng),
        };
        store.insert(param_name(layer, gate, "wc"), w);
    }
    Ok(())
}

/// Tape handles for one layer's parameters, in [`GATES`] order.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub wx: [Var; 4],
    pub wh: [Var; 4],
    pub b: [Var; 4],
    /// Peepholes for `i`, `f`, `o`.
    pub wc: [Var; 3],
}

impl LayerVars {
    pub fn from_params(vars: &ParamVars, layer: usize) -> Result<Self> {
        let gate = |g: usize, role: &str| vars.get(&param_name(layer, GATES[g], role));
        let peep = |g: usize| vars.get(&param_name(layer, PEEPHOLE_GATES[g], "wc"));
        Ok(LayerVars {
            wx: [gate(0, "wx")?, gate(1, "wx")?, gate(2, "wx")?, gate(3, "wx")?],
            wh: [gate(0, "wh")?, gate(1, "wh")?, gate(2, "wh")?, gate(3, "wh")?],
            b: [gate(0, "b")?, gate(1, "b")?, gate(2, "b")?, gate(3, "b")?],
            wc: [peep(0)?, peep(1)?, peep(2)?],
        })
    }
}

/// Gate kernels concatenated once per forward pass.
#[derive(Clone, Copy, Debug)]
struct FusedLayer {
    wx: Var,
    wh: Var,
    b: Var,
    wc: [Var; 3],
    hidden: usize,
    pad: ConvOptions,
}

impl FusedLayer {
    fn new<F: Scalar>(tape: &mut Tape<F>, lv: &LayerVars) -> Result<Self> {
        let shape = tape.shape(lv.wx[0]).to_vec();
        if shape.len() != 4 || shape[2] != shape[3] || shape[2].is_multiple_of(2) {
            return Err(Error::config(
                "convlstm.kernel",
                format!("input kernel has shape {shape:?}, expected [Ch, C, k, k] with odd k"),
            ));
        }
        Ok(FusedLayer {
            wx: tape.concat(&lv.wx, 0)?,
            wh: tape.concat(&lv.wh, 0)?,
            b: tape.concat(&lv.b, 0)?,
            wc: lv.wc,
            hidden: shape[0],
            pad: ConvOptions::same(1),
        })
    }
}

/// Recurrent state `(H, C)`; both `[N, Ch, h, w]`.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub h: Var,
    pub c: Var,
}

/// Gate activations of one step, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct Gates {
    pub input: Var,
    pub forget: Var,
    pub output: Var,
    /// `tanh` candidate before dropout.
    pub candidate: Var,
}

/// All-zero `(H, C)` recorded as constants.
pub fn init_state<F: Scalar>(
    tape: &mut Tape<F>,
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
) -> Result<CellState> {
    let shape = [batch, channels, h, w];
    if shape.contains(&0) {
        return Err(blinknet_tensor::NnError::shape(
            "init_state",
            format!("zero extent in {shape:?}"),
        )
        .into());
    }
    Ok(CellState {
        h: tape.constant(Tensor::zeros(&shape)),
        c: tape.constant(Tensor::zeros(&shape)),
    })
}

fn peephole<F: Scalar>(
    tape: &mut Tape<F>,
    c: Var,
    w: Var,
    mode: PeepholeMode,
    pad: ConvOptions,
) -> Result<Var> {
    Ok(match mode {
        PeepholeMode::Elementwise => tape.mul_channel(c, w)?,
        PeepholeMode::Convolutional => tape.conv2d(c, w, None, pad)?,
    })
}

/// One step given the already-convolved input term `xpre = Wx*X + B`
/// (`[N, 4Ch, h, w]`). A `None` state is the zero state and skips the
/// hidden and peephole terms, which would contribute exactly zero.
fn step_from_preactivation<F: Scalar>(
    tape: &mut Tape<F>,
    xpre: Var,
    prev: Option<CellState>,
    layer: &FusedLayer,
    opts: &StepOptions,
    rng: &mut RngStream,
) -> Result<(CellState, Gates)> {
    let ch = layer.hidden;
    let pre = match prev {
        Some(s) => {
            let hpre = tape.conv2d(s.h, layer.wh, None, layer.pad)?;
            tape.add(xpre, hpre)?
        }
        None => xpre,
    };
    let slice = |tape: &mut Tape<F>, g: usize| tape.narrow(pre, 1, g * ch, ch);
    let (mut zi, mut zf, zc, mut zo) = (slice(tape, 0)?, slice(tape, 1)?, slice(tape, 2)?, slice(tape, 3)?);
    if let Some(s) = prev {
        let pi = peephole(tape, s.c, layer.wc[0], opts.peephole, layer.pad)?;
        zi = tape.add(zi, pi)?;
        let pf = peephole(tape, s.c, layer.wc[1], opts.peephole, layer.pad)?;
        zf = tape.add(zf, pf)?;
    }
    let input = tape.sigmoid(zi);
    let forget = tape.sigmoid(zf);
    let candidate = tape.tanh(zc);
    let dropped = tape.dropout(candidate, opts.dropout, opts.training, rng)?;
    let fresh = tape.mul(input, dropped)?;
    let c = match prev {
        Some(s) => {
            let kept = tape.mul(forget, s.c)?;
            tape.add(kept, fresh)?
        }
        None => fresh,
    };
    let po = peephole(tape, c, layer.wc[2], opts.peephole, layer.pad)?;
    zo = tape.add(zo, po)?;
    let output = tape.sigmoid(zo);
    let tc = tape.tanh(c);
    let h = tape.mul(output, tc)?;
    Ok((
        CellState { h, c },
        Gates {
            input,
            forget,
            output,
            candidate,
        },
    ))
}

fn check_step_shapes<F: Scalar>(tape: &Tape<F>, x: Var, state: &CellState, layer: &FusedLayer) -> Result<()> {
    let xs = tape.shape(x);
    let hs = tape.shape(state.h);
    let cs = tape.shape(state.c);
    let ok = xs.len() == 4
        && hs.len() == 4
        && hs == cs
        && xs[0] == hs[0]
        && xs[2..] == hs[2..]
        && hs[1] == layer.hidden;
    if ok {
        Ok(())
    } else {
        Err(blinknet_tensor::NnError::shape(
            "cell_step",
            format!("input {xs:?}, H {hs:?}, C {cs:?}, hidden channels {}", layer.hidden),
        )
        .into())
    }
}

/// One ConvLSTM step from an explicit state.
pub fn cell_step<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    state: CellState,
    params: &LayerVars,
    opts: &StepOptions,
    rng: &mut RngStream,
) -> Result<(CellState, Gates)> {
    let layer = FusedLayer::new(tape, params)?;
    check_step_shapes(tape, x, &state, &layer)?;
    let xpre = tape.conv2d(x, layer.wx, Some(layer.b), layer.pad)?;
    step_from_preactivation(tape, xpre, Some(state), &layer, opts, rng)
}

/// Runs every layer over a sequence `[T, N, C, h, w]` from zero state and
/// returns the top layer's hidden states `[T, N, Ch, h, w]`.
///
/// Layers are evaluated one after another over the whole sequence, which is
/// equivalent to interleaving them per frame, and lets the input convolution
/// of each layer run once over all `T·N` frames.
pub fn stack_forward<F: Scalar>(
    tape: &mut Tape<F>,
    x_seq: Var,
    layers: &[LayerVars],
    opts: &StepOptions,
    rng: &mut RngStream,
) -> Result<Var> {
    let shape = tape.shape(x_seq).to_vec();
    if shape.len() != 5 {
        return Err(blinknet_tensor::NnError::shape(
            "stack_forward",
            format!("expected [T, N, C, h, w], got {shape:?}"),
        )
        .into());
    }
    let (steps, batch) = (shape[0], shape[1]);
    if steps == 0 {
        return Err(Error::EmptySequence);
    }
    if layers.is_empty() {
        return Err(Error::config("convlstm.layers", "at least one layer is required"));
    }
    let mut current = tape.reshape(x_seq, &[steps * batch, shape[2], shape[3], shape[4]])?;
    let mut hidden = 0;
    for lv in layers {
        let layer = FusedLayer::new(tape, lv)?;
        hidden = layer.hidden;
        let xpre_all = tape.conv2d(current, layer.wx, Some(layer.b), layer.pad)?;
        let layer_rng = RngStream::new(rng.below(u64::MAX));
        let sequence_rng = layer_rng.clone();
        let mut state = None;
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xpre = tape.narrow(xpre_all, 0, t * batch, batch)?;
            let mut step_rng = match opts.mask {
                DropoutMask::PerStep => layer_rng.split(t as u64),
                DropoutMask::PerSequence => sequence_rng.clone(),
            };
            let (next, _) = step_from_preactivation(tape, xpre, state, &layer, opts, &mut step_rng)?;
            outputs.push(next.h);
            state = Some(next);
        }
        current = tape.concat(&outputs, 0)?;
    }
    Ok(tape.reshape(current, &[steps, batch, hidden, shape[3], shape[4]])?)
}
