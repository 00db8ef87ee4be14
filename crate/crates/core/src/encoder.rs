//! Transformer and Conformer encoder stacks with stochastic depth.
//!
//! Both layer kinds use pre-norm residual blocks. During training each layer
//! `l` survives with probability `p_l = 1 - (l/L)(1 - p_L)`; a skipped layer
//! is the identity, a surviving one has every residual branch scaled by
//! `1/p_l`. Evaluation runs every layer unscaled.

use rand::Rng;
use thiserror::Error;

use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::LAYER_NORM_EPS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("layer index {l} outside 1..={layers}")]
    LayerRange { l: usize, layers: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Transformer,
    Conformer,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Transformer => "transformer",
            LayerKind::Conformer => "conformer",
        }
    }
}

impl std::str::FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "transformer" => Ok(LayerKind::Transformer),
            "conformer" => Ok(LayerKind::Conformer),
            _ => Err(format!("unknown layer kind `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub kind: LayerKind,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Depthwise kernel width, Conformer only. Must be odd.
    pub conv_kernel: usize,
    /// Survival probability of the top layer.
    pub p_last: f64,
    pub input_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            kind: LayerKind::Transformer,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            conv_kernel: 7,
            p_last: 0.7,
            input_dim: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::InvalidConfig(m));
        if self.layers == 0 {
            return bad("at least one layer is required".into());
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            ));
        }
        if self.d_ff == 0 || self.input_dim == 0 {
            return bad("d_ff and input_dim must be positive".into());
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if !(self.p_last > 0.0 && self.p_last <= 1.0) {
            return bad(format!("p_last {} must lie in (0, 1]", self.p_last));
        }
        Ok(())
    }

    pub fn survival(&self, l: usize) -> Result<f64, EncoderError> {
        survival_probability(l, self.layers, self.p_last)
    }
}

/// `p_l = 1 - (l / L) (1 - p_L)` for `1 <= l <= L`.
pub fn survival_probability(l: usize, layers: usize, p_last: f64) -> Result<f64, EncoderError> {
    if l == 0 || l > layers {
        return Err(EncoderError::LayerRange { l, layers });
    }
    Ok(1.0 - (l as f64 / layers as f64) * (1.0 - p_last))
}

/// Absolute sinusoidal position table, `frames × d_model`.
pub fn positional_encoding(frames: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; frames * d_model];
    for t in 0..frames {
        for i in 0..d_model {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            data[t * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[frames, d_model], data).expect("shape")
}

/// `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add_uniform(format!("{name}.weight"), fan_in, fan_out, rng),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add_row(y, p.var(self.bias))
    }

    /// Zeroes both weight and bias, turning the layer into a constant zero map.
    pub fn zero(&self, store: &mut ParamStore) {
        store.data_mut(self.weight).fill(0.0);
        store.data_mut(self.bias).fill(0.0);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        tape.layer_norm(x, p.var(self.gain), p.var(self.bias), LAYER_NORM_EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Swish,
}

/// Position-wise two-layer network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
    pub activation: Activation,
}

impl FeedForward {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        d_ff: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.inner"), d, d_ff, rng),
            outer: Linear::new(store, &format!("{name}.outer"), d_ff, d, rng),
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let h = self.inner.forward(tape, p, x)?;
        let h = match self.activation {
            Activation::Relu => tape.relu(h)?,
            Activation::Swish => tape.swish(h)?,
        };
        self.outer.forward(tape, p, h)
    }
}

/// Multi-head scaled dot-product self-attention over all positions.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl SelfAttention {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, rng),
            heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        Ok(self.forward_with_weights(tape, p, x)?.0)
    }

    /// Also returns each head's `T × T` attention matrix.
    pub fn forward_with_weights(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Vec<Var>), TensorError> {
        let q = self.query.forward(tape, p, x)?;
        let k = self.key.forward(tape, p, x)?;
        let v = self.value.forward(tape, p, x)?;
        let d = tape.value(q).shape()[1];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores, 1)?;
            outs.push(tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        Ok((self.output.forward(tape, p, cat)?, weights))
    }
}

/// Pointwise expansion, GLU, depthwise convolution, layer norm, swish,
/// pointwise projection. Includes its own leading layer norm.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub expand: Linear,
    pub depthwise: ParamId,
    pub mid_norm: LayerNorm,
    pub project: Linear,
}

impl ConvModule {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, kernel: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (kernel as f64).sqrt();
        let taps = (0..kernel * d).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            expand: Linear::new(store, &format!("{name}.expand"), d, 2 * d, rng),
            depthwise: store.add(
                format!("{name}.depthwise"),
                Tensor::new(&[kernel, d], taps).expect("shape"),
            ),
            mid_norm: LayerNorm::new(store, &format!("{name}.mid_norm"), d),
            project: Linear::new(store, &format!("{name}.project"), d, d, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let h = self.norm.forward(tape, p, x)?;
        let h = self.expand.forward(tape, p, h)?;
        let h = tape.glu(h)?;
        let h = tape.depthwise_conv1d(h, p.var(self.depthwise))?;
        let h = self.mid_norm.forward(tape, p, h)?;
        let h = tape.swish(h)?;
        self.project.forward(tape, p, h)
    }
}

fn scaled(tape: &mut Tape, x: Var, factor: f64) -> Result<Var, TensorError> {
    if factor == 1.0 {
        Ok(x)
    } else {
        tape.scale(x, factor)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn_norm: LayerNorm,
    pub attn: SelfAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut R) -> Self {
        Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), cfg.d_model),
            attn: SelfAttention::new(store, &format!("{name}.attn"), cfg.d_model, cfg.heads, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), cfg.d_model),
            ffn: FeedForward::new(
                store,
                &format!("{name}.ffn"),
                cfg.d_model,
                cfg.d_ff,
                Activation::Relu,
                rng,
            ),
        }
    }

    /// `branch_scale` multiplies each residual branch (1 outside training).
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, branch_scale: f64) -> Result<Var, TensorError> {
        let h = self.attn_norm.forward(tape, p, x)?;
        let h = self.attn.forward(tape, p, h)?;
        let h = scaled(tape, h, branch_scale)?;
        let x_mha = tape.add(x, h)?;

        let h = self.ffn_norm.forward(tape, p, x_mha)?;
        let h = self.ffn.forward(tape, p, h)?;
        let h = scaled(tape, h, branch_scale)?;
        tape.add(x_mha, h)
    }

    /// Zeroes the output projections so both branches contribute nothing.
    pub fn zero_branches(&self, store: &mut ParamStore) {
        self.attn.output.zero(store);
        self.ffn.outer.zero(store);
    }
}

#[derive(Clone, Debug)]
pub struct ConformerLayer {
    pub ffn1_norm: LayerNorm,
    pub ffn1: FeedForward,
    pub attn_norm: LayerNorm,
    pub attn: SelfAttention,
    pub conv: ConvModule,
    pub ffn2_norm: LayerNorm,
    pub ffn2: FeedForward,
    pub final_norm: LayerNorm,
}

impl ConformerLayer {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            ffn1_norm: LayerNorm::new(store, &format!("{name}.ffn1_norm"), d),
            ffn1: FeedForward::new(store, &format!("{name}.ffn1"), d, cfg.d_ff, Activation::Swish, rng),
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d),
            attn: SelfAttention::new(store, &format!("{name}.attn"), d, cfg.heads, rng),
            conv: ConvModule::new(store, &format!("{name}.conv"), d, cfg.conv_kernel, rng),
            ffn2_norm: LayerNorm::new(store, &format!("{name}.ffn2_norm"), d),
            ffn2: FeedForward::new(store, &format!("{name}.ffn2"), d, cfg.d_ff, Activation::Swish, rng),
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), d),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, branch_scale: f64) -> Result<Var, TensorError> {
        let h = self.ffn1_norm.forward(tape, p, x)?;
        let h = self.ffn1.forward(tape, p, h)?;
        let h = tape.scale(h, 0.5 * branch_scale)?;
        let x_ffn = tape.add(x, h)?;

        let h = self.attn_norm.forward(tape, p, x_ffn)?;
        let h = self.attn.forward(tape, p, h)?;
        let h = scaled(tape, h, branch_scale)?;
        let x_mha = tape.add(x_ffn, h)?;

        let h = self.conv.forward(tape, p, x_mha)?;
        let h = scaled(tape, h, branch_scale)?;
        let x_conv = tape.add(x_mha, h)?;

        let h = self.ffn2_norm.forward(tape, p, x_conv)?;
        let h = self.ffn2.forward(tape, p, h)?;
        let h = tape.scale(h, 0.5 * branch_scale)?;
        let y = tape.add(x_conv, h)?;
        self.final_norm.forward(tape, p, y)
    }

    pub fn zero_branches(&self, store: &mut ParamStore) {
        self.ffn1.outer.zero(store);
        self.attn.output.zero(store);
        self.conv.project.zero(store);
        self.ffn2.outer.zero(store);
    }
}

#[derive(Clone, Debug)]
pub enum EncoderLayer {
    Transformer(TransformerLayer),
    Conformer(ConformerLayer),
}

impl EncoderLayer {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, branch_scale: f64) -> Result<Var, TensorError> {
        match self {
            EncoderLayer::Transformer(l) => l.forward(tape, p, x, branch_scale),
            EncoderLayer::Conformer(l) => l.forward(tape, p, x, branch_scale),
        }
    }

    pub fn zero_branches(&self, store: &mut ParamStore) {
        match self {
            EncoderLayer::Transformer(l) => l.zero_branches(store),
            EncoderLayer::Conformer(l) => l.zero_branches(store),
        }
    }

    pub fn attention(&self) -> &SelfAttention {
        match self {
            EncoderLayer::Transformer(l) => &l.attn,
            EncoderLayer::Conformer(l) => &l.attn,
        }
    }
}

/// Every layer output `x_1 .. x_L` of one forward pass and whether each
/// layer ran.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub outputs: Vec<Var>,
    pub survived: Vec<bool>,
}

impl LayerTrace {
    /// `x_l` for `1 <= l <= L`.
    pub fn layer(&self, l: usize) -> Var {
        self.outputs[l - 1]
    }

    pub fn last(&self) -> Var {
        *self.outputs.last().expect("non-empty trace")
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub frontend: Linear,
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new<R: Rng>(config: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self, EncoderError> {
        config.validate()?;
        let frontend = Linear::new(store, "frontend", config.input_dim, config.d_model, rng);
        let layers = (0..config.layers)
            .map(|i| {
                let name = format!("layers.{i}");
                match config.kind {
                    LayerKind::Transformer => {
                        EncoderLayer::Transformer(TransformerLayer::new(store, &name, &config, rng))
                    }
                    LayerKind::Conformer => EncoderLayer::Conformer(ConformerLayer::new(store, &name, &config, rng)),
                }
            })
            .collect();
        Ok(Self {
            config,
            frontend,
            layers,
        })
    }

    /// Linear projection of `T × D` features plus sinusoidal positions.
    pub fn input_frontend(&self, tape: &mut Tape, p: &Bound, x0: &Tensor) -> Result<Var, TensorError> {
        match *x0.shape() {
            [_, d] if d == self.config.input_dim => {}
            ref s => {
                return Err(TensorError::ShapeMismatch {
                    op: "input_frontend",
                    left: s.to_vec(),
                    right: vec![self.config.input_dim],
                })
            }
        }
        let x = tape.leaf(x0.clone());
        let h = self.frontend.forward(tape, p, x)?;
        let pe = tape.leaf(positional_encoding(x0.shape()[0], self.config.d_model));
        tape.add(h, pe)
    }

    /// Survival draws for one training forward.
    pub fn draw_survival<R: Rng>(&self, rng: &mut R) -> Vec<bool> {
        (1..=self.config.layers)
            .map(|l| {
                let p = self.config.survival(l).expect("layer in range");
                p >= 1.0 || rng.random_bool(p)
            })
            .collect()
    }

    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x0: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<LayerTrace, TensorError> {
        match mode {
            Mode::Eval => self.run(tape, p, x0, None),
            Mode::Train => {
                let mask = self.draw_survival(rng);
                self.run(tape, p, x0, Some(&mask))
            }
        }
    }

    /// Training-mode forward with a given survival mask.
    pub fn forward_masked(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x0: &Tensor,
        survived: &[bool],
    ) -> Result<LayerTrace, TensorError> {
        assert_eq!(survived.len(), self.layers.len(), "mask length");
        self.run(tape, p, x0, Some(survived))
    }

    fn run(&self, tape: &mut Tape, p: &Bound, x0: &Tensor, mask: Option<&[bool]>) -> Result<LayerTrace, TensorError> {
        let mut x = self.input_frontend(tape, p, x0)?;
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut survived = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (alive, branch_scale) = match mask {
                None => (true, 1.0),
                Some(m) => {
                    let p_l = self.config.survival(i + 1).expect("layer in range");
                    (m[i], 1.0 / p_l)
                }
            };
            if alive {
                x = layer.forward(tape, p, x, branch_scale)?;
            }
            outputs.push(x);
            survived.push(alive);
        }
        Ok(LayerTrace { outputs, survived })
    }
}
