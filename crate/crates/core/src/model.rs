//! The full network: attention mask, masked ROI, convolutional backbone,
//! ConvLSTM stack and four softmax heads.
//!
//! All frames of a `[T, N, 3, S, S]` batch go through attention and the
//! backbone as one `T·N` image batch; rows of every per-frame output are
//! ordered time-major (`row = t·N + n`).

use blinknet_tensor::{init, ConvOptions, RngStream, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::convlstm::{self, DropoutMask, LayerSpec, LayerVars, PeepholeMode, StepOptions};
use crate::error::{Error, Result};
use crate::params::{ParamStore, ParamVars};
use crate::semantics::{IntentState, LightState, ViewFace};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    #[default]
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::config("preset", format!("unknown preset `{other}` (expected paper or desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub enabled: bool,
    /// Output channels per layer; the last must be 1.
    pub channels: Vec<usize>,
    pub dilations: Vec<usize>,
    pub kernel: usize,
}

/// VGG-style blocks: block `b` holds `convs[b]` conv+relu layers of
/// `channels[b]` outputs, followed by a 2×2 max pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    pub convs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLstmConfig {
    /// Hidden channels per layer.
    pub hidden: Vec<usize>,
    pub kernel: usize,
    pub peephole: PeepholeMode,
    pub dropout_mask: DropoutMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadsConfig {
    pub trunk_width: usize,
    /// One trunk feeding all four output layers, or one trunk per head.
    pub shared_trunk: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelNormalization {
    /// 8-bit values divided by 255.
    #[default]
    UnitRange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Preset,
    pub input_size: usize,
    pub normalization: PixelNormalization,
    pub attention: AttentionConfig,
    pub backbone: BackboneConfig,
    pub convlstm: ConvLstmConfig,
    pub heads: HeadsConfig,
}

/// Output widths of the intent, left-light, right-light and view heads.
pub const HEAD_SIZES: [usize; 4] = [IntentState::COUNT, LightState::COUNT, LightState::COUNT, ViewFace::COUNT];
pub const HEAD_NAMES: [&str; 4] = ["intent", "left", "right", "view"];

impl ModelConfig {
    /// The published architecture at 224×224.
    pub fn paper() -> Self {
        ModelConfig {
            preset: Preset::Paper,
            input_size: 224,
            normalization: PixelNormalization::UnitRange,
            attention: AttentionConfig {
                enabled: true,
                channels: vec![32, 64, 64, 1],
                dilations: vec![1, 2, 2, 1],
                kernel: 3,
            },
            backbone: BackboneConfig {
                channels: vec![64, 128, 256, 512, 512],
                convs: vec![2, 2, 3, 3, 3],
            },
            convlstm: ConvLstmConfig {
                hidden: vec![256, 256],
                kernel: 3,
                peephole: PeepholeMode::Elementwise,
                dropout_mask: DropoutMask::PerStep,
            },
            heads: HeadsConfig {
                trunk_width: 512,
                shared_trunk: true,
            },
        }
    }

    /// Same topology narrowed for CPU training on 64×64 crops.
    pub fn desk() -> Self {
        ModelConfig {
            preset: Preset::Desk,
            input_size: 64,
            normalization: PixelNormalization::UnitRange,
            attention: AttentionConfig {
                enabled: true,
                channels: vec![4, 4, 4, 1],
                dilations: vec![1, 2, 2, 1],
                kernel: 3,
            },
            backbone: BackboneConfig {
                channels: vec![4, 8, 16, 64],
                convs: vec![1, 1, 1, 1],
            },
            convlstm: ConvLstmConfig {
                hidden: vec![32, 32],
                kernel: 3,
                peephole: PeepholeMode::Elementwise,
                dropout_mask: DropoutMask::PerStep,
            },
            heads: HeadsConfig {
                trunk_width: 64,
                shared_trunk: true,
            },
        }
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    /// Checks internal consistency, naming the first offending field.
    pub fn validate(&self) -> Result<()> {
        let a = &self.attention;
        if a.channels.is_empty() {
            return Err(Error::config("model.attention.channels", "must not be empty"));
        }
        if a.channels.len() != a.dilations.len() {
            return Err(Error::config(
                "model.attention.dilations",
                format!("{} dilations for {} layers", a.dilations.len(), a.channels.len()),
            ));
        }
        if a.channels.last() != Some(&1) {
            return Err(Error::config("model.attention.channels", "last layer must have 1 channel"));
        }
        if a.channels.contains(&0) || a.dilations.contains(&0) {
            return Err(Error::config("model.attention", "channels and dilations must be positive"));
        }
        if a.kernel == 0 || a.kernel.is_multiple_of(2) {
            return Err(Error::config("model.attention.kernel", "must be odd and positive"));
        }
        let b = &self.backbone;
        if b.channels.is_empty() || b.channels.len() != b.convs.len() {
            return Err(Error::config(
                "model.backbone.convs",
                format!("{} conv counts for {} blocks", b.convs.len(), b.channels.len()),
            ));
        }
        if b.channels.contains(&0) || b.convs.contains(&0) {
            return Err(Error::config("model.backbone", "channels and conv counts must be positive"));
        }
        let scale = 1usize << b.channels.len();
        if self.input_size == 0 || !self.input_size.is_multiple_of(scale) {
            return Err(Error::config(
                "model.input_size",
                format!("{} is not divisible by 2^{} backbone pools", self.input_size, b.channels.len()),
            ));
        }
        let c = &self.convlstm;
        if c.hidden.is_empty() || c.hidden.contains(&0) {
            return Err(Error::config("model.convlstm.hidden", "needs at least one positive width"));
        }
        if c.kernel == 0 || c.kernel.is_multiple_of(2) {
            return Err(Error::config("model.convlstm.kernel", "must be odd and positive"));
        }
        if self.heads.trunk_width == 0 {
            return Err(Error::config("model.heads.trunk_width", "must be positive"));
        }
        Ok(())
    }

    /// Spatial extent of the backbone output grid.
    pub fn grid(&self) -> usize {
        self.input_size >> self.backbone.channels.len()
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone.channels.last().unwrap_or(&3)
    }

    pub fn hidden_channels(&self) -> usize {
        *self.convlstm.hidden.last().unwrap_or(&0)
    }

    /// Width of the flattened top ConvLSTM state fed to the heads.
    pub fn head_input_width(&self) -> usize {
        self.hidden_channels() * self.grid() * self.grid()
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut input = self.feature_channels();
        self.convlstm
            .hidden
            .iter()
            .map(|&h| {
                let spec = LayerSpec {
                    input_channels: input,
                    hidden_channels: h,
                    kernel: self.convlstm.kernel,
                    peephole: self.convlstm.peephole,
                };
                input = h;
                spec
            })
            .collect()
    }

    /// Number of learnable scalars, computed from the shapes alone.
    pub fn parameter_count(&self) -> usize {
        let conv = |k: usize, c: usize, kh: usize| k * c * kh * kh + k;
        let mut total = 0;
        if self.attention.enabled {
            let mut cin = 3;
            for &c in &self.attention.channels {
                total += conv(c, cin, self.attention.kernel);
                cin = c;
            }
        }
        let mut cin = 3;
        for (&c, &n) in self.backbone.channels.iter().zip(&self.backbone.convs) {
            for _ in 0..n {
                total += conv(c, cin, 3);
                cin = c;
            }
        }
        for spec in self.layer_specs() {
            let (ci, h, k) = (spec.input_channels, spec.hidden_channels, spec.kernel);
            total += 4 * (h * ci * k * k + h * h * k * k + h);
            total += 3 * match spec.peephole {
                PeepholeMode::Elementwise => h,
                PeepholeMode::Convolutional => h * h * k * k,
            };
        }
        let trunk = self.head_input_width() * self.heads.trunk_width + self.heads.trunk_width;
        total += if self.heads.shared_trunk { trunk } else { 4 * trunk };
        total += HEAD_SIZES.iter().map(|&m| self.heads.trunk_width * m + m).sum::<usize>();
        total
    }
}

pub fn attention_name(layer: usize, role: &str) -> String {
    format!("attention.conv{layer}.{role}")
}

pub fn backbone_name(block: usize, conv: usize, role: &str) -> String {
    format!("backbone.block{block}.conv{conv}.{role}")
}

fn trunk_name(config: &HeadsConfig, head: &str, role: &str) -> String {
    if config.shared_trunk {
        format!("heads.trunk.{role}")
    } else {
        format!("heads.{head}.trunk.{role}")
    }
}

pub fn head_name(head: &str, role: &str) -> String {
    format!("heads.{head}.{role}")
}

/// Whether L2 weight decay applies: weights of the dense head layers.
pub fn is_dense_weight(name: &str) -> bool {
    name.starts_with("heads.") && name.ends_with(".weight")
}

/// Allocates every parameter under its stable name. Each sub-network draws
/// from its own split of `rng`, so changing one part's shape leaves the
/// others' initial values unchanged.
pub fn init_model<F: Scalar>(config: &ModelConfig, rng: &RngStream) -> Result<ParamStore<F>> {
    config.validate()?;
    let mut store = ParamStore::new();

    if config.attention.enabled {
        let mut r = rng.split(0);
        let mut cin = 3;
        for (l, &c) in config.attention.channels.iter().enumerate() {
            let k = config.attention.kernel;
            store.insert(attention_name(l, "weight"), init::conv_kernel([c, cin, k, k], &mut r));
            store.insert(attention_name(l, "bias"), Tensor::zeros(&[c]));
            cin = c;
        }
    }

    let mut r = rng.split(1);
    let mut cin = 3;
    for (b, (&c, &n)) in config.backbone.channels.iter().zip(&config.backbone.convs).enumerate() {
        for j in 0..n {
            store.insert(backbone_name(b, j, "weight"), init::conv_kernel([c, cin, 3, 3], &mut r));
            store.insert(backbone_name(b, j, "bias"), Tensor::zeros(&[c]));
            cin = c;
        }
    }

    let mut r = rng.split(2);
    for (l, spec) in config.layer_specs().iter().enumerate() {
        convlstm::init_layer(&mut store, l, spec, &mut r)?;
    }

    let mut r = rng.split(3);
    let (width, trunk) = (config.head_input_width(), config.heads.trunk_width);
    for (h, &head) in HEAD_NAMES.iter().enumerate() {
        if h == 0 || !config.heads.shared_trunk {
            store.insert(trunk_name(&config.heads, head, "weight"), init::dense_weights(width, trunk, &mut r));
            store.insert(trunk_name(&config.heads, head, "bias"), Tensor::zeros(&[trunk]));
        }
    }
    for (&head, &m) in HEAD_NAMES.iter().zip(&HEAD_SIZES) {
        store.insert(head_name(head, "weight"), init::dense_weights(trunk, m, &mut r));
        store.insert(head_name(head, "bias"), Tensor::zeros(&[m]));
    }
    log::debug!("initialized {} tensors, {} scalars", store.len(), store.scalar_count());
    Ok(store)
}

/// Stochastic behaviour of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub training: bool,
    /// Dropout on the dense trunk.
    pub dropout: f64,
    /// Dropout on the ConvLSTM candidate term.
    pub recurrent_dropout: f64,
}

impl ForwardOptions {
    pub fn inference() -> Self {
        ForwardOptions {
            training: false,
            dropout: 0.0,
            recurrent_dropout: 0.0,
        }
    }
}

/// Tape handles of a sequence forward pass. Distributions are `[T·N, k]`.
#[derive(Clone, Copy, Debug)]
pub struct SequenceOutput {
    pub steps: usize,
    pub batch: usize,
    pub intent: Var,
    pub left: Var,
    pub right: Var,
    pub view: Var,
    /// `[T·N, 1, S, S]`, absent when attention is disabled.
    pub mask: Option<Var>,
}

/// Per-frame probabilities read back from the tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameOutput {
    pub intent: Vec<f32>,
    pub left: Vec<f32>,
    pub right: Vec<f32>,
    pub view: Vec<f32>,
}

impl SequenceOutput {
    pub fn heads(&self) -> [Var; 4] {
        [self.intent, self.left, self.right, self.view]
    }

    /// Distributions for time step `t` of batch element `n`.
    pub fn frame<F: Scalar>(&self, tape: &Tape<F>, t: usize, n: usize) -> FrameOutput {
        let row = t * self.batch + n;
        let read = |v: Var| -> Vec<f32> {
            let width = tape.shape(v)[1];
            tape.value(v).data()[row * width..(row + 1) * width]
                .iter()
                .map(|x| x.to_f64_lossy() as f32)
                .collect()
        };
        FrameOutput {
            intent: read(self.intent),
            left: read(self.left),
            right: read(self.right),
            view: read(self.view),
        }
    }

    /// Every frame of batch element `n`, in time order.
    pub fn frames<F: Scalar>(&self, tape: &Tape<F>, n: usize) -> Vec<FrameOutput> {
        (0..self.steps).map(|t| self.frame(tape, t, n)).collect()
    }
}

fn conv_relu<F: Scalar>(tape: &mut Tape<F>, x: Var, w: Var, b: Var, opts: ConvOptions) -> Result<Var> {
    let y = tape.conv2d(x, w, Some(b), opts)?;
    Ok(tape.relu(y))
}

/// Attention sub-network on `[N, 3, S, S]`: returns the masked ROI and the
/// sigmoid mask `[N, 1, S, S]`.
pub fn attention_apply<F: Scalar>(
    tape: &mut Tape<F>,
    roi: Var,
    config: &ModelConfig,
    vars: &ParamVars,
) -> Result<(Var, Var)> {
    let shape = tape.shape(roi);
    if shape.len() != 4 || shape[1] != 3 {
        return Err(blinknet_tensor::NnError::shape(
            "attention_apply",
            format!("expected [N, 3, S, S], got {shape:?}"),
        )
        .into());
    }
    let a = &config.attention;
    let mut x = roi;
    for (l, &d) in a.dilations.iter().enumerate() {
        let w = vars.get(&attention_name(l, "weight"))?;
        let b = vars.get(&attention_name(l, "bias"))?;
        x = tape.conv2d(x, w, Some(b), ConvOptions::same(d))?;
        x = if l + 1 == a.dilations.len() { tape.sigmoid(x) } else { tape.relu(x) };
    }
    let masked = tape.mul_spatial(roi, x)?;
    Ok((masked, x))
}

/// Backbone on `[N, 3, S, S]`, returning `[N, C', S/2^B, S/2^B]`.
pub fn backbone_features<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    config: &ModelConfig,
    vars: &ParamVars,
) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 4 || shape[1] != 3 || shape[2] != config.input_size || shape[3] != config.input_size {
        return Err(blinknet_tensor::NnError::shape(
            "backbone_features",
            format!("expected [N, 3, {0}, {0}], got {shape:?}", config.input_size),
        )
        .into());
    }
    let mut x = x;
    for (b, &n) in config.backbone.convs.iter().enumerate() {
        for j in 0..n {
            let w = vars.get(&backbone_name(b, j, "weight"))?;
            let bias = vars.get(&backbone_name(b, j, "bias"))?;
            x = conv_relu(tape, x, w, bias, ConvOptions::same(1))?;
        }
        x = tape.max_pool2d(x, 2)?;
    }
    Ok(x)
}

/// Heads on top-layer states `[M, Ch, s, s]`; returns the four softmax
/// distributions in [`HEAD_NAMES`] order, each `[M, k]`.
pub fn heads<F: Scalar>(
    tape: &mut Tape<F>,
    hidden: Var,
    config: &ModelConfig,
    vars: &ParamVars,
    opts: &ForwardOptions,
    rng: &mut RngStream,
) -> Result<[Var; 4]> {
    let rows = tape.shape(hidden)[0];
    let flat = tape.reshape(hidden, &[rows, tape.value(hidden).len() / rows])?;
    let mut trunk = None;
    let mut out = Vec::with_capacity(4);
    for (h, &head) in HEAD_NAMES.iter().enumerate() {
        let features = match trunk {
            Some(t) if config.heads.shared_trunk => t,
            _ => {
                let w = vars.get(&trunk_name(&config.heads, head, "weight"))?;
                let b = vars.get(&trunk_name(&config.heads, head, "bias"))?;
                let z = tape.dense(flat, w, b)?;
                let a = tape.relu(z);
                let mut r = rng.split(h as u64);
                let t = tape.dropout(a, opts.dropout, opts.training, &mut r)?;
                trunk = Some(t);
                t
            }
        };
        let w = vars.get(&head_name(head, "weight"))?;
        let b = vars.get(&head_name(head, "bias"))?;
        let logits = tape.dense(features, w, b)?;
        out.push(tape.softmax(logits));
    }
    Ok([out[0], out[1], out[2], out[3]])
}

/// Full pipeline over frames `[T, N, 3, S, S]` with zero initial state.
pub fn forward_sequence<F: Scalar>(
    tape: &mut Tape<F>,
    frames: Var,
    config: &ModelConfig,
    vars: &ParamVars,
    opts: &ForwardOptions,
    rng: &mut RngStream,
) -> Result<SequenceOutput> {
    let shape = tape.shape(frames).to_vec();
    if shape.len() != 5 {
        return Err(blinknet_tensor::NnError::shape(
            "forward_sequence",
            format!("expected [T, N, 3, S, S], got {shape:?}"),
        )
        .into());
    }
    let (steps, batch) = (shape[0], shape[1]);
    if steps == 0 {
        return Err(Error::EmptySequence);
    }
    let images = tape.reshape(frames, &[steps * batch, shape[2], shape[3], shape[4]])?;
    let (masked, mask) = if config.attention.enabled {
        let (m, a) = attention_apply(tape, images, config, vars)?;
        (m, Some(a))
    } else {
        (images, None)
    };
    let features = backbone_features(tape, masked, config, vars)?;
    let fs = tape.shape(features).to_vec();
    let seq = tape.reshape(features, &[steps, batch, fs[1], fs[2], fs[3]])?;
    let layers = (0..config.convlstm.hidden.len())
        .map(|l| LayerVars::from_params(vars, l))
        .collect::<Result<Vec<_>>>()?;
    let step_opts = StepOptions {
        dropout: opts.recurrent_dropout,
        training: opts.training,
        mask: config.convlstm.dropout_mask,
        peephole: config.convlstm.peephole,
    };
    let mut lstm_rng = rng.split(0);
    let hidden = convlstm::stack_forward(tape, seq, &layers, &step_opts, &mut lstm_rng)?;
    let hs = tape.shape(hidden).to_vec();
    let rows = tape.reshape(hidden, &[steps * batch, hs[2], hs[3], hs[4]])?;
    let mut head_rng = rng.split(1);
    let [intent, left, right, view] = heads(tape, rows, config, vars, opts, &mut head_rng)?;
    Ok(SequenceOutput {
        steps,
        batch,
        intent,
        left,
        right,
        view,
        mask,
    })
}

/// Converts 8-bit HWC frames to a `[T, 1, 3, S, S]` tensor in `[0, 1]`.
pub fn frames_to_tensor<F: Scalar>(frames: &[u8], steps: usize, size: usize) -> Result<Tensor<F>> {
    let plane = size * size;
    if frames.len() != steps * plane * 3 {
        return Err(Error::LengthMismatch(format!(
            "{} bytes for {steps} frames of {size}×{size}×3",
            frames.len()
        )));
    }
    let scale = F::from_f64_lossy(1.0 / 255.0);
    let mut data = vec![F::zero(); frames.len()];
    for t in 0..steps {
        let src = &frames[t * plane * 3..(t + 1) * plane * 3];
        let dst = &mut data[t * plane * 3..(t + 1) * plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                dst[c * plane + p] = F::from_f64_lossy(src[p * 3 + c] as f64) * scale;
            }
        }
    }
    Ok(Tensor::new(&[steps, 1, 3, size, size], data)?)
}
