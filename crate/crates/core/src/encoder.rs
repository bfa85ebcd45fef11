//! Pre-norm self-attention encoder with CTC loss taps.
//!
//! Layers are numbered `1..=E`. With `K` levels, intermediate taps sit after
//! layers `⌊kE/K⌋` for `k = 1..K−1` and the last level reads the final layer.
//! At an intermediate tap the level's head produces posteriors `A`, and with
//! conditioning enabled the stream continues as `x + Linear(A)`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Where the per-level projection heads attach.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadLayout {
    /// Intermediate levels read the encoder stream at their tap layer.
    Tapped,
    /// Every level reads the final layer; non-final levels go through an adapter.
    Parallel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Output width of each level's head (blank included), finest level first.
    /// Its length is the number of levels `K`.
    pub level_vocab_sizes: Vec<usize>,
    pub conditioning: bool,
    pub frame_stack: usize,
    /// Neighbouring frames spliced onto each side of every input frame before stacking.
    pub context: usize,
    pub layout: HeadLayout,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn levels(&self) -> usize {
        self.level_vocab_sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.levels();
        if k == 0 {
            return Err(Error::Config("at least one output level is required".into()));
        }
        if self.layers == 0 || self.input_dim == 0 || self.d_ff == 0 || self.frame_stack == 0 {
            return Err(Error::Config(
                "layers, input_dim, d_ff and frame_stack must be positive".into(),
            ));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be at least 2".into()));
        }
        if self.layout == HeadLayout::Tapped && k > 1 {
            tap_positions(self.layers, k)?;
        }
        if self.level_vocab_sizes.iter().any(|&v| v < 2) {
            return Err(Error::Config("every level needs blank plus at least one label".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Intermediate tap layers in use (empty for parallel or single-level models).
    pub fn intermediate_taps(&self) -> Vec<usize> {
        match self.layout {
            HeadLayout::Tapped if self.levels() > 1 => tap_positions(self.layers, self.levels())
                .map(|t| t.intermediate)
                .unwrap_or_default(),
            _ => Vec::new(),
        }
    }

    pub fn output_frames(&self, input_frames: usize) -> usize {
        input_frames.div_ceil(self.frame_stack)
    }

    /// Width of one row entering the input projection.
    pub fn projected_width(&self) -> usize {
        self.input_dim * (2 * self.context + 1) * self.frame_stack
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapPositions {
    pub intermediate: Vec<usize>,
    pub final_layer: usize,
}

/// `{⌊kE/K⌋ : k = 1..K−1}` plus the final layer `E`; requires `1 < K ≤ E`.
pub fn tap_positions(layers: usize, levels: usize) -> Result<TapPositions> {
    if levels < 2 || levels > layers {
        return Err(Error::Config(format!(
            "{levels} losses over {layers} layers; need 1 < K ≤ E"
        )));
    }
    Ok(TapPositions {
        intermediate: (1..levels).map(|k| k * layers / levels).collect(),
        final_layer: layers,
    })
}

/// Concatenates every frame with `context` neighbours on each side,
/// repeating the first and last frame at the edges.
pub fn splice_frames(features: &Tensor, context: usize) -> Result<Tensor> {
    let (frames, dim) = features.dims2();
    if context == 0 {
        return features.clone().reshape(vec![frames, dim]);
    }
    let width = 2 * context + 1;
    let mut data = Vec::with_capacity(frames * dim * width);
    for t in 0..frames {
        for o in 0..width {
            let src = (t + o).saturating_sub(context).min(frames - 1);
            data.extend_from_slice(features.row(src));
        }
    }
    Tensor::new(vec![frames, dim * width], data)
}

/// Concatenates each run of `factor` frames, zero-padding the last run.
pub fn stack_frames(features: &Tensor, factor: usize) -> Result<Tensor> {
    let (frames, dim) = features.dims2();
    if factor == 1 {
        return features.clone().reshape(vec![frames, dim]);
    }
    let out_frames = frames.div_ceil(factor);
    let mut data = vec![0.0; out_frames * dim * factor];
    data[..frames * dim].copy_from_slice(features.data());
    Tensor::new(vec![out_frames, dim * factor], data)
}

pub fn positional_encoding(frames: usize, d_model: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[frames, d_model]);
    for t in 0..frames {
        for i in (0..d_model).step_by(2) {
            let angle = t as f64 / 10000f64.powf(i as f64 / d_model as f64);
            pe.row_mut(t)[i] = angle.sin();
            if i + 1 < d_model {
                pe.row_mut(t)[i + 1] = angle.cos();
            }
        }
    }
    pe
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    weight: usize,
    bias: usize,
}

impl Linear {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(self.weight, store.get(self.weight));
        let b = g.param(self.bias, store.get(self.bias));
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: usize,
    bias: usize,
}

impl Norm {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(self.gain, store.get(self.gain));
        let bias = g.param(self.bias, store.get(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Debug)]
struct LayerSlots {
    attn_norm: Norm,
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    ffn_norm: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
}

#[derive(Clone, Debug)]
struct Slots {
    input: Linear,
    layers: Vec<LayerSlots>,
    final_norm: Norm,
    heads: Vec<Linear>,
    conditioning: Vec<Linear>,
    adapters: Vec<Linear>,
}

/// Parameter initialisation choices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZeroInit {
    /// Conditioning projections start at zero so the model begins unconditioned.
    Conditioning,
    /// Attention and feed-forward output projections also start at zero,
    /// making every layer an identity map.
    ConditioningAndResiduals,
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> Result<usize> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.store.insert(name, Tensor::new(vec![rows, cols], data)?)
    }

    fn fill(&mut self, name: &str, shape: &[usize], value: f64) -> Result<usize> {
        self.store.insert(name, Tensor::filled(shape, value))
    }

    fn linear(&mut self, name: &str, rows: usize, cols: usize, zero: bool) -> Result<Linear> {
        let weight = if zero {
            self.fill(&format!("{name}.weight"), &[rows, cols], 0.0)?
        } else {
            self.xavier(&format!("{name}.weight"), rows, cols)?
        };
        let bias = self.fill(&format!("{name}.bias"), &[cols], 0.0)?;
        Ok(Linear { weight, bias })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.fill(&format!("{name}.gain"), &[d], 1.0)?,
            bias: self.fill(&format!("{name}.bias"), &[d], 0.0)?,
        })
    }
}

/// Graph handles produced by [`Encoder::encode`].
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Final normalized states, `T′×d_model`.
    pub final_states: Var,
    /// Per-level log-posteriors, finest level first; the last entry is the final head.
    pub level_log_probs: Vec<Var>,
    /// Per-level posteriors, aligned with `level_log_probs`.
    pub level_posteriors: Vec<Var>,
    /// Layer index each level was read from.
    pub level_layers: Vec<usize>,
    /// Attention weights per layer, per head (`T′×T′`).
    pub attention: Vec<Vec<Var>>,
    pub frames: usize,
}

/// Options for one forward pass.
pub struct ForwardOptions<'a> {
    /// Dropout randomness; `None` disables dropout regardless of the configured rate.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl ForwardOptions<'_> {
    pub fn eval() -> Self {
        ForwardOptions { dropout_rng: None }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    params: ParamStore,
    slots: Slots,
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        Self::with_init(config, seed, ZeroInit::Conditioning)
    }

    pub fn with_init(config: EncoderConfig, seed: u64, zero: ZeroInit) -> Result<Self> {
        config.validate()?;
        let zero_residual = zero == ZeroInit::ConditioningAndResiduals;
        let d = config.d_model;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore::new(),
        };
        let input = init.linear("input", config.projected_width(), d, false)?;
        let mut layers = Vec::with_capacity(config.layers);
        for i in 1..=config.layers {
            let p = format!("layers.{i}");
            layers.push(LayerSlots {
                attn_norm: init.norm(&format!("{p}.attn_norm"), d)?,
                query: init.linear(&format!("{p}.attn.query"), d, d, false)?,
                key: init.linear(&format!("{p}.attn.key"), d, d, false)?,
                value: init.linear(&format!("{p}.attn.value"), d, d, false)?,
                attn_out: init.linear(&format!("{p}.attn.out"), d, d, zero_residual)?,
                ffn_norm: init.norm(&format!("{p}.ffn_norm"), d)?,
                ffn_in: init.linear(&format!("{p}.ffn.in"), d, config.d_ff, false)?,
                ffn_out: init.linear(&format!("{p}.ffn.out"), config.d_ff, d, zero_residual)?,
            });
        }
        let final_norm = init.norm("final_norm", d)?;
        let k = config.levels();
        let mut heads = Vec::with_capacity(k);
        for (level, &width) in config.level_vocab_sizes.iter().enumerate() {
            heads.push(init.linear(&format!("heads.{}", level + 1), d, width, false)?);
        }
        let mut conditioning = Vec::new();
        let mut adapters = Vec::new();
        match config.layout {
            HeadLayout::Tapped if config.conditioning => {
                for level in 0..config.intermediate_taps().len() {
                    let width = config.level_vocab_sizes[level];
                    conditioning.push(init.linear(&format!("conditioning.{}", level + 1), width, d, true)?);
                }
            }
            HeadLayout::Tapped => {}
            HeadLayout::Parallel => {
                for level in 0..k - 1 {
                    let name = format!("adapters.{}", level + 1);
                    let weight = init.store.insert(format!("{name}.weight"), Tensor::identity(d))?;
                    let bias = init.fill(&format!("{name}.bias"), &[d], 0.0)?;
                    adapters.push(Linear { weight, bias });
                }
            }
        }
        Ok(Encoder {
            config,
            params: init.store,
            slots: Slots {
                input,
                layers,
                final_norm,
                heads,
                conditioning,
                adapters,
            },
        })
    }

    /// Rebuilds a model around loaded parameters, checking every name and shape.
    pub fn from_params(config: EncoderConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.names() != model.params.names() {
            let expected: std::collections::BTreeSet<_> = model.params.names().iter().collect();
            let offender = params
                .names()
                .iter()
                .find(|n| !expected.contains(n))
                .cloned()
                .or_else(|| {
                    model
                        .params
                        .names()
                        .iter()
                        .find(|n| params.index_of(n).is_none())
                        .cloned()
                })
                .unwrap_or_else(|| "parameter order".into());
            return Err(Error::Checkpoint(format!(
                "parameters do not match the model configuration: {offender}"
            )));
        }
        for slot in 0..params.len() {
            if params.get(slot).shape() != model.params.get(slot).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, configuration expects {:?}",
                    params.name(slot),
                    params.get(slot).shape(),
                    model.params.get(slot).shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Sets the conditioning projections of every tap to zero.
    pub fn zero_conditioning(&mut self) -> Result<()> {
        for lin in self.slots.conditioning.clone() {
            for slot in [lin.weight, lin.bias] {
                let shape = self.params.get(slot).shape().to_vec();
                self.params.set(slot, Tensor::zeros(&shape))?;
            }
        }
        Ok(())
    }

    fn dropout(&self, g: &mut Graph, x: Var, opts: &mut ForwardOptions<'_>) -> Result<Var> {
        let rate = self.config.dropout;
        let Some(rng) = opts.dropout_rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = g.value(x).shape().to_vec();
        let n = g.value(x).numel();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }

    /// One pre-norm layer: residual self-attention, then residual feed-forward.
    /// Returns the layer output and the attention weights of each head.
    pub fn layer_forward(
        &self,
        g: &mut Graph,
        layer: usize,
        x: Var,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<(Var, Vec<Var>)> {
        let s = self
            .slots
            .layers
            .get(layer.wrapping_sub(1))
            .ok_or_else(|| Error::Contract(format!("layer {layer} outside 1..={}", self.config.layers)))?
            .clone();
        let store = &self.params;
        let d = self.config.d_model;
        if g.value(x).cols() != d || g.value(x).shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "layer input {:?}, expected T×{d}",
                g.value(x).shape()
            )));
        }
        let h = s.attn_norm.forward(g, store, x)?;
        let q = s.query.forward(g, store, h)?;
        let k = s.key.forward(g, store, h)?;
        let v = s.value.forward(g, store, h)?;
        let dk = d / self.config.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.config.heads);
        let mut maps = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let qh = g.slice_cols(q, head * dk, dk)?;
            let kh = g.slice_cols(k, head * dk, dk)?;
            let vh = g.slice_cols(v, head * dk, dk)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax(scores);
            maps.push(weights);
            let dropped = self.dropout(g, weights, opts)?;
            outs.push(g.matmul(dropped, vh)?);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        let attn = s.attn_out.forward(g, store, joined)?;
        let attn = self.dropout(g, attn, opts)?;
        let x = g.add(x, attn)?;

        let h = s.ffn_norm.forward(g, store, x)?;
        let f = s.ffn_in.forward(g, store, h)?;
        let f = g.gelu(f);
        let f = self.dropout(g, f, opts)?;
        let f = s.ffn_out.forward(g, store, f)?;
        let f = self.dropout(g, f, opts)?;
        Ok((g.add(x, f)?, maps))
    }

    /// Level head at an intermediate tap: posteriors `A = softmax(head(x))`, and
    /// with conditioning enabled the next-layer input `x + Linear(A)`.
    /// Returns `(x_next, posteriors, log_posteriors)`.
    pub fn condition_inject(&self, g: &mut Graph, layer: usize, x: Var) -> Result<(Var, Var, Var)> {
        let level = self
            .config
            .intermediate_taps()
            .iter()
            .position(|&t| t == layer)
            .ok_or_else(|| Error::Contract(format!("layer {layer} is not an intermediate loss tap")))?;
        let store = &self.params;
        let logits = self.slots.heads[level].forward(g, store, x)?;
        let posteriors = g.softmax(logits);
        let log_posteriors = g.log_softmax(logits);
        let next = if self.config.conditioning {
            let injected = self.slots.conditioning[level].forward(g, store, posteriors)?;
            g.add(x, injected)?
        } else {
            x
        };
        Ok((next, posteriors, log_posteriors))
    }

    /// Projects `T×D` features through the stack and every level head.
    pub fn encode(&self, g: &mut Graph, features: &Tensor, opts: &mut ForwardOptions<'_>) -> Result<EncoderOutput> {
        let (frames, dim) = features.dims2();
        if features.numel() == 0 || frames == 0 {
            return Err(Error::Contract("cannot encode an empty feature sequence".into()));
        }
        if dim != self.config.input_dim || features.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "features {:?}, expected T×{}",
                features.shape(),
                self.config.input_dim
            )));
        }
        let store = &self.params;
        let stacked = stack_frames(&splice_frames(features, self.config.context)?, self.config.frame_stack)?;
        let out_frames = stacked.rows();
        let input = g.constant(stacked);
        let x = self.slots.input.forward(g, store, input)?;
        let pe = g.constant(positional_encoding(out_frames, self.config.d_model));
        let x = g.add(x, pe)?;
        let mut x = self.dropout(g, x, opts)?;

        let taps = self.config.intermediate_taps();
        let k = self.config.levels();
        let mut level_log_probs = Vec::with_capacity(k);
        let mut level_posteriors = Vec::with_capacity(k);
        let mut level_layers = Vec::with_capacity(k);
        let mut attention = Vec::with_capacity(self.config.layers);
        for layer in 1..=self.config.layers {
            let (y, maps) = self.layer_forward(g, layer, x, opts)?;
            attention.push(maps);
            x = y;
            if taps.contains(&layer) {
                let (next, post, logp) = self.condition_inject(g, layer, x)?;
                level_posteriors.push(post);
                level_log_probs.push(logp);
                level_layers.push(layer);
                x = next;
            }
        }
        let final_states = self.slots.final_norm.forward(g, store, x)?;
        let remaining = k - level_log_probs.len();
        for i in 0..remaining {
            let level = k - remaining + i;
            let feats = match self.slots.adapters.get(level) {
                Some(adapter) if level + 1 < k => adapter.forward(g, store, final_states)?,
                _ => final_states,
            };
            let logits = self.slots.heads[level].forward(g, store, feats)?;
            level_posteriors.push(g.softmax(logits));
            level_log_probs.push(g.log_softmax(logits));
            level_layers.push(self.config.layers);
        }
        Ok(EncoderOutput {
            final_states,
            level_log_probs,
            level_posteriors,
            level_layers,
            attention,
            frames: out_frames,
        })
    }

    /// Sums per-slot gradients of the bound parameters into `acc`.
    pub fn accumulate_grads(&self, g: &Graph, grads: &mut crate::numerics::Gradients, acc: &mut [Tensor]) {
        for (slot, var) in g.bound_params().iter().enumerate() {
            if let Some(v) = var {
                if let Some(t) = grads.take(*v) {
                    acc[slot].add_assign(&t);
                }
            }
        }
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params.tensors().map(|t| Tensor::zeros(t.shape())).collect()
    }

    pub fn shared_param(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.params.by_name(name)
    }
}
