//! The four-stage dual-attention backbone.
//!
//! Each stage starts with a strided-convolution patch embedding followed by
//! a layernorm, then stacks dual blocks. A dual block is a spatial
//! sub-block (window attention) and a channel sub-block (channel group
//! attention); each sub-block is
//!
//! ```text
//! x = x + dwconv3x3(x)
//! x = x + drop_path(attn(norm1(x)))
//! x = x + dwconv3x3(x)
//! x = x + drop_path(ffn(norm2(x)))
//! ```
//!
//! The classifier head is global average pooling, layernorm, and a linear map.

mod checkpoint;
mod config;

use std::collections::HashMap;

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{
    BlockLayout, ModelConfig, StageGeometry, WindowSize, LAYER_NORM_EPS, NUM_STAGES, PRESETS,
};

use crate::attention::{self, AttentionVars, Linear};
use crate::autodiff::{Tape, Var};
use crate::error::{config_err, shape_err, Result};
use crate::rng::Rng;
use crate::tensor::{sc, Scalar, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubBlockKind {
    Spatial,
    Channel,
}

impl SubBlockKind {
    pub fn label(self) -> &'static str {
        match self {
            SubBlockKind::Spatial => "spatial",
            SubBlockKind::Channel => "channel",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Weight,
    Zero,
    One,
}

/// Name, shape and initializer of every parameter, in build order.
fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init| out.push((name, shape, init));
    let mut in_dim = cfg.in_chans;
    for s in 0..NUM_STAGES {
        let d = cfg.stage_dim(s);
        let k = cfg.patch_kernels[s];
        push(
            format!("stage{s}.embed.conv.weight"),
            vec![d, in_dim, k, k],
            Init::Weight,
        );
        push(format!("stage{s}.embed.conv.bias"), vec![d], Init::Zero);
        push(format!("stage{s}.embed.norm.weight"), vec![d], Init::One);
        push(format!("stage{s}.embed.norm.bias"), vec![d], Init::Zero);
        for b in 0..cfg.depths[s] {
            for kind in [SubBlockKind::Spatial, SubBlockKind::Channel] {
                let p = format!("stage{s}.block{b}.{}", kind.label());
                if cfg.cpe_enabled {
                    push(format!("{p}.cpe1.weight"), vec![d, 1, 3, 3], Init::Weight);
                    push(format!("{p}.cpe1.bias"), vec![d], Init::Zero);
                }
                push(format!("{p}.norm1.weight"), vec![d], Init::One);
                push(format!("{p}.norm1.bias"), vec![d], Init::Zero);
                for proj in ["q", "k", "v", "o"] {
                    push(format!("{p}.attn.{proj}.weight"), vec![d, d], Init::Weight);
                    push(format!("{p}.attn.{proj}.bias"), vec![d], Init::Zero);
                }
                if cfg.ffn_enabled {
                    let hidden = d * cfg.ffn_ratio;
                    if cfg.cpe_enabled {
                        push(format!("{p}.cpe2.weight"), vec![d, 1, 3, 3], Init::Weight);
                        push(format!("{p}.cpe2.bias"), vec![d], Init::Zero);
                    }
                    push(format!("{p}.norm2.weight"), vec![d], Init::One);
                    push(format!("{p}.norm2.bias"), vec![d], Init::Zero);
                    push(format!("{p}.ffn.fc1.weight"), vec![d, hidden], Init::Weight);
                    push(format!("{p}.ffn.fc1.bias"), vec![hidden], Init::Zero);
                    push(format!("{p}.ffn.fc2.weight"), vec![hidden, d], Init::Weight);
                    push(format!("{p}.ffn.fc2.bias"), vec![d], Init::Zero);
                }
            }
        }
        in_dim = d;
    }
    let d = cfg.stage_dim(NUM_STAGES - 1);
    push("head.norm.weight".into(), vec![d], Init::One);
    push("head.norm.bias".into(), vec![d], Init::Zero);
    push(
        "head.fc.weight".into(),
        vec![d, cfg.num_classes],
        Init::Weight,
    );
    push("head.fc.bias".into(), vec![cfg.num_classes], Init::Zero);
    out
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        let (names, tensors) = entries.into_iter().unzip();
        Self {
            names,
            tensors,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Parameters recorded on a tape, addressable by name.
pub struct ParamVars<'a> {
    vars: Vec<Var>,
    index: &'a HashMap<String, usize>,
}

impl ParamVars<'_> {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| shape_err!("missing parameter {name}"))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn linear(&self, prefix: &str) -> Result<Linear> {
        Ok(Linear {
            w: self.get(&format!("{prefix}.weight"))?,
            b: self.get(&format!("{prefix}.bias"))?,
        })
    }
}

/// Everything a forward pass produced, still on the tape.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Stage outputs, `[N, h, w, C]`.
    pub stages: Vec<Var>,
    /// Softmax weights of the last channel sub-block per stage, `[N, N_g, C_g, C_g]`.
    pub channel_weights: Vec<Option<Var>>,
}

/// A built backbone with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    seed: u64,
    params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes a model: truncated-normal (std 0.02) weights,
    /// zero biases, identity norm affine. Each tensor draws from its own
    /// stream forked off `seed`, in layout order.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let entries = param_layout(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let mut stream = rng.fork();
                let t = match init {
                    Init::Weight => {
                        let n = crate::tensor::numel(&shape);
                        let data = (0..n)
                            .map(|_| sc::<T>(stream.truncated_normal(INIT_STD)))
                            .collect();
                        Tensor::from_parts(shape, data)
                    }
                    Init::Zero => Tensor::zeros(&shape),
                    Init::One => Tensor::ones(&shape),
                };
                (name, t)
            })
            .collect();
        Ok(Self {
            config,
            seed,
            params: ParamStore::from_entries(entries),
        })
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        Self::build(ModelConfig::preset(name)?, seed)
    }

    /// Wraps existing tensors, checking names and shapes against the config.
    pub fn from_params(
        config: ModelConfig,
        seed: u64,
        entries: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != entries.len() {
            return Err(shape_err!(
                "config '{}' expects {} parameter tensors, found {}",
                config.name,
                layout.len(),
                entries.len()
            ));
        }
        for ((name, shape, _), (got_name, t)) in layout.iter().zip(&entries) {
            if name != got_name {
                return Err(shape_err!("expected parameter {name}, found {got_name}"));
            }
            if shape.as_slice() != t.shape() {
                return Err(shape_err!(
                    "parameter {name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                ));
            }
        }
        Ok(Self {
            config,
            seed,
            params: ParamStore::from_entries(entries),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let entries = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.cast::<U>()))
            .collect();
        Model {
            config: self.config.clone(),
            seed: self.seed,
            params: ParamStore::from_entries(entries),
        }
    }

    pub fn register<'a>(&'a self, tape: &mut Tape<T>, requires_grad: bool) -> ParamVars<'a> {
        let vars = self
            .params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        ParamVars {
            vars,
            index: &self.params.index,
        }
    }

    /// Records a full forward pass of `[N, C_in, H, W]` images.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        x: Var,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ForwardTrace> {
        let shape = tape.shape(x).to_vec();
        let [n, c, h, w] = match shape[..] {
            [n, c, h, w] => [n, c, h, w],
            _ => return Err(shape_err!("expected [N, C, H, W] images, got {shape:?}")),
        };
        if c != self.config.in_chans {
            return Err(shape_err!(
                "expected {} input channels, got {c}",
                self.config.in_chans
            ));
        }
        let geometry = self.config.stage_geometry(h, w)?;
        let drop_rates = self.config.drop_path_schedule();
        let mut sub_index = 0;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut channel_weights = Vec::with_capacity(NUM_STAGES);
        let mut feat = x; // NCHW at stage entry
        for (s, geom) in geometry.iter().enumerate() {
            let conv = tape.conv2d(
                feat,
                vars.get(&format!("stage{s}.embed.conv.weight"))?,
                vars.get(&format!("stage{s}.embed.conv.bias"))?,
                self.config.patch_strides[s],
                self.config.patch_pads[s],
                1,
            )?;
            let tokens = tape.permute(conv, &[0, 2, 3, 1])?;
            let mut y = layer_norm(tape, vars, &format!("stage{s}.embed.norm"), tokens)?;
            let mut weights = None;
            for b in 0..self.config.depths[s] {
                let rates = [drop_rates[sub_index], drop_rates[sub_index + 1]];
                sub_index += 2;
                let ctx = SubBlockCtx {
                    stage: s,
                    block: b,
                    geom: *geom,
                    mode,
                };
                y = match self.config.layout {
                    BlockLayout::WindowFirst => {
                        let (a, _) = self.sub_block(
                            tape,
                            vars,
                            &ctx,
                            SubBlockKind::Spatial,
                            y,
                            rates[0],
                            rng,
                        )?;
                        let (a, wts) = self.sub_block(
                            tape,
                            vars,
                            &ctx,
                            SubBlockKind::Channel,
                            a,
                            rates[1],
                            rng,
                        )?;
                        weights = wts;
                        a
                    }
                    BlockLayout::ChannelFirst => {
                        let (a, wts) = self.sub_block(
                            tape,
                            vars,
                            &ctx,
                            SubBlockKind::Channel,
                            y,
                            rates[0],
                            rng,
                        )?;
                        weights = wts;
                        self.sub_block(tape, vars, &ctx, SubBlockKind::Spatial, a, rates[1], rng)?
                            .0
                    }
                    BlockLayout::Parallel => {
                        let (sp, _) = self.sub_block(
                            tape,
                            vars,
                            &ctx,
                            SubBlockKind::Spatial,
                            y,
                            rates[0],
                            rng,
                        )?;
                        let (ch, wts) = self.sub_block(
                            tape,
                            vars,
                            &ctx,
                            SubBlockKind::Channel,
                            y,
                            rates[1],
                            rng,
                        )?;
                        weights = wts;
                        let sum = tape.add(sp, ch)?;
                        let neg = tape.scale(y, sc::<T>(-1.0))?;
                        tape.add(sum, neg)?
                    }
                };
            }
            stages.push(y);
            channel_weights.push(weights);
            feat = tape.permute(y, &[0, 3, 1, 2])?;
        }
        let last = *stages.last().unwrap();
        let logits = self.head_on_tape(tape, vars, last)?;
        debug_assert_eq!(tape.shape(logits), [n, self.config.num_classes]);
        Ok(ForwardTrace {
            logits,
            stages,
            channel_weights,
        })
    }

    /// Pool, normalize and classify a `[N, h, w, C]` final-stage map.
    pub fn head_on_tape(&self, tape: &mut Tape<T>, vars: &ParamVars, features: Var) -> Result<Var> {
        let shape = tape.shape(features).to_vec();
        let [n, h, w, c] = match shape[..] {
            [n, h, w, c] => [n, h, w, c],
            _ => return Err(shape_err!("expected [N, h, w, C] features, got {shape:?}")),
        };
        let tokens = tape.reshape(features, &[n, h * w, c])?;
        let pooled = tape.global_avg_pool(tokens)?;
        let normed = layer_norm(tape, vars, "head.norm", pooled)?;
        vars.linear("head.fc")?.apply(tape, normed)
    }

    /// One sub-block on `[N, h, w, C]` features. Returns the output and, for
    /// channel sub-blocks, the attention weights.
    #[allow(clippy::too_many_arguments)]
    pub fn sub_block(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        ctx: &SubBlockCtx,
        kind: SubBlockKind,
        x: Var,
        drop_prob: f64,
        rng: &mut Rng,
    ) -> Result<(Var, Option<Var>)> {
        let prefix = format!("stage{}.block{}.{}", ctx.stage, ctx.block, kind.label());
        let [n, h, w, c] = [tape.shape(x)[0], ctx.geom.h, ctx.geom.w, ctx.geom.dim];
        let mut x = x;
        if self.config.cpe_enabled {
            x = conv_pos_enc(tape, vars, &format!("{prefix}.cpe1"), x)?;
        }
        let normed = layer_norm(tape, vars, &format!("{prefix}.norm1"), x)?;
        let attn = AttentionVars {
            dim: c,
            heads: self.config.heads[ctx.stage],
            q: vars.linear(&format!("{prefix}.attn.q"))?,
            k: vars.linear(&format!("{prefix}.attn.k"))?,
            v: vars.linear(&format!("{prefix}.attn.v"))?,
            o: vars.linear(&format!("{prefix}.attn.o"))?,
        };
        let (branch, weights) = match kind {
            SubBlockKind::Spatial => (
                attention::window_attention(tape, normed, &attn, ctx.geom.window)?,
                None,
            ),
            SubBlockKind::Channel => {
                let tokens = tape.reshape(normed, &[n, h * w, c])?;
                let out = attention::channel_group_attention_traced(
                    tape,
                    tokens,
                    &attn,
                    self.config.scale_mode,
                )?;
                (tape.reshape(out.output, &[n, h, w, c])?, Some(out.weights))
            }
        };
        let branch = drop_path(tape, branch, drop_prob, ctx.mode, rng)?;
        x = tape.add(x, branch)?;
        if self.config.ffn_enabled {
            if self.config.cpe_enabled {
                x = conv_pos_enc(tape, vars, &format!("{prefix}.cpe2"), x)?;
            }
            let normed = layer_norm(tape, vars, &format!("{prefix}.norm2"), x)?;
            let hidden = vars
                .linear(&format!("{prefix}.ffn.fc1"))?
                .apply(tape, normed)?;
            let hidden = tape.gelu(hidden)?;
            let out = vars
                .linear(&format!("{prefix}.ffn.fc2"))?
                .apply(tape, hidden)?;
            let out = drop_path(tape, out, drop_prob, ctx.mode, rng)?;
            x = tape.add(x, out)?;
        }
        Ok((x, weights))
    }

    /// Logits for `[N, C_in, H, W]` images.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let trace = self.forward_on_tape(&mut tape, &vars, xv, mode, rng)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// The four stage outputs `[N, h, w, C]` in eval mode.
    pub fn forward_features(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let trace = self.forward_on_tape(&mut tape, &vars, xv, Mode::Eval, &mut Rng::new(0))?;
        Ok(trace
            .stages
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect())
    }

    /// Applies the classifier head to a final-stage feature map.
    pub fn apply_head(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let f = tape.constant(features.clone());
        let logits = self.head_on_tape(&mut tape, &vars, f)?;
        Ok(tape.value(logits).clone())
    }
}

/// Where a sub-block sits and how it runs.
#[derive(Debug, Clone, Copy)]
pub struct SubBlockCtx {
    pub stage: usize,
    pub block: usize,
    pub geom: StageGeometry,
    pub mode: Mode,
}

fn layer_norm<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let g = vars.get(&format!("{prefix}.weight"))?;
    let b = vars.get(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}

/// `x + dwconv3x3(x)` on `[N, h, w, C]`.
fn conv_pos_enc<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let c = *tape.shape(x).last().unwrap();
    let nchw = tape.permute(x, &[0, 3, 1, 2])?;
    let conv = tape.conv2d(
        nchw,
        vars.get(&format!("{prefix}.weight"))?,
        vars.get(&format!("{prefix}.bias"))?,
        1,
        1,
        c,
    )?;
    let back = tape.permute(conv, &[0, 2, 3, 1])?;
    tape.add(x, back)
}

/// Stochastic depth: drops each sample's branch with probability `p` and
/// scales survivors by `1/(1-p)`. Identity in eval mode or when `p == 0`.
pub fn drop_path<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(config_err!(
            "drop-path probability must lie in [0, 1), got {p}"
        ));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let n = tape.shape(x)[0];
    let keep: Vec<bool> = (0..n).map(|_| rng.uniform() >= p).collect();
    drop_path_with_mask(tape, x, p, &keep)
}

/// [`drop_path`] with an explicit per-sample keep mask.
pub fn drop_path_with_mask<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: f64,
    keep: &[bool],
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(config_err!(
            "drop-path probability must lie in [0, 1), got {p}"
        ));
    }
    let scale = sc::<T>(1.0 / (1.0 - p));
    let factors = keep
        .iter()
        .map(|&k| if k { scale } else { T::zero() })
        .collect();
    tape.scale_leading(x, factors)
}
