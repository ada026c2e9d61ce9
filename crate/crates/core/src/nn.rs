//! Toy promptable segmentation model.
//!
//! Structure follows SAM's mask decoder at desk scale: a frozen patch
//! encoder produces image tokens, a stack of two-way attention blocks mixes
//! them with a learnable prompt embedding, and a mask head upsamples image
//! tokens to per-pixel features that are scored against a vector derived
//! from the final prompt token. LoRA adapters sit on the query and value
//! projections of every attention block.
//!
//! Every parameter lives in one flat list tagged with its [`Partition`].
//! Layers refer to parameters through [`ParamId`], and a forward pass reads
//! them from a [`Bound`] set of tape variables, which is how the training
//! engine evaluates the model at arbitrary `W` / `A` values without cloning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

pub mod checkpoint;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("image of size {height}x{width} is incompatible with patch size {patch} and model grid {grid}x{grid}")]
    ImageShape {
        height: usize,
        width: usize,
        patch: usize,
        grid: usize,
    },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("expected {expected} tensors for the {partition:?} partition, got {got}")]
    GroupSize {
        partition: Partition,
        expected: usize,
        got: usize,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which optimisation level owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    Frozen,
    /// Lower-level weights `W`: LoRA adapters, upsampler and mask MLP head.
    Weights,
    /// Upper-level prompt embedding `A`.
    Prompt,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Frozen => "frozen",
            Partition::Weights => "weights",
            Partition::Prompt => "prompt",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "frozen" => Some(Partition::Frozen),
            "weights" => Some(Partition::Weights),
            "prompt" => Some(Partition::Prompt),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub partition: Partition,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub n_blocks: usize,
    pub n_prompt_tokens: usize,
    pub rank: usize,
    /// Channels of the upsampled per-pixel features.
    pub head_channels: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
    pub lora_init_std: f64,
    pub prompt_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            dim: 16,
            n_blocks: 2,
            n_prompt_tokens: 4,
            rank: 4,
            head_channels: 8,
            mlp_hidden: 32,
            seed: 0,
            lora_init_std: 0.02,
            prompt_init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.patch_size == 0
            || self.image_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return fail("image_size must be a positive multiple of patch_size");
        }
        if self.dim == 0
            || self.n_prompt_tokens == 0
            || self.head_channels == 0
            || self.mlp_hidden == 0
        {
            return fail("dim, n_prompt_tokens, head_channels and mlp_hidden must be positive");
        }
        if self.rank == 0 || self.rank >= self.dim {
            return fail("LoRA rank must satisfy 0 < rank < dim");
        }
        if !(self.lora_init_std >= 0.0 && self.prompt_init_std >= 0.0) {
            return fail("init standard deviations must be non-negative");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_image_tokens(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Fixed patch embedding plus positional table; never trained.
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    pub patch_size: usize,
    pub grid: usize,
    pub seed: u64,
    embed: ParamId,
    positional: ParamId,
}

#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub rank: usize,
    down: ParamId,
    up: ParamId,
}

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    query: ParamId,
    key: ParamId,
    value: ParamId,
    output: ParamId,
    pub lora_q: LoraAdapter,
    pub lora_v: LoraAdapter,
}

#[derive(Clone, Debug)]
pub struct TwoWayDecoderBlock {
    pub self_attn: AttentionBlock,
    pub token_to_image: AttentionBlock,
    pub image_to_token: AttentionBlock,
    mlp_in: ParamId,
    mlp_out: ParamId,
}

#[derive(Clone, Debug)]
pub struct PromptEmbedding {
    tokens: ParamId,
}

#[derive(Clone, Debug)]
pub struct MaskHead {
    upsampler: ParamId,
    hidden_w: ParamId,
    hidden_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    logit_bias: ParamId,
}

/// The three disjoint parameter groups, each in stable creation order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterPartition {
    pub frozen: Vec<ParamId>,
    pub weights: Vec<ParamId>,
    pub prompt: Vec<ParamId>,
}

#[derive(Clone, Debug)]
pub struct SegModel {
    config: ModelConfig,
    params: Vec<Param>,
    pub encoder: FrozenEncoder,
    pub decoder_blocks: Vec<TwoWayDecoderBlock>,
    pub prompt: PromptEmbedding,
    pub head: MaskHead,
    lora_enabled: bool,
    /// Maps image pixel `y * W + x` to its row in the token-major upsampled features.
    pixel_order: Vec<usize>,
}

struct Builder {
    params: Vec<Param>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: String, partition: Partition, value: Tensor) -> ParamId {
        self.params.push(Param {
            name,
            partition,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    fn gaussian(&mut self, shape: &[usize], std: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        if std > 0.0 {
            let normal = Normal::new(0.0, std).expect("finite std");
            for x in t.data_mut() {
                *x = normal.sample(&mut self.rng);
            }
        }
        t
    }

    fn random(&mut self, name: String, partition: Partition, shape: &[usize], std: f64) -> ParamId {
        let value = self.gaussian(shape, std);
        self.add(name, partition, value)
    }

    fn lora(&mut self, prefix: &str, dim: usize, rank: usize, std: f64) -> LoraAdapter {
        let down = self.random(
            format!("{prefix}.down"),
            Partition::Weights,
            &[dim, rank],
            std,
        );
        let up = self.add(
            format!("{prefix}.up"),
            Partition::Weights,
            Tensor::zeros(&[rank, dim]),
        );
        LoraAdapter { rank, down, up }
    }

    fn attention(&mut self, prefix: &str, cfg: &ModelConfig) -> AttentionBlock {
        let d = cfg.dim;
        let std = 1.0 / (d as f64).sqrt();
        let proj = |b: &mut Self, n: &str| {
            b.random(format!("{prefix}.{n}"), Partition::Frozen, &[d, d], std)
        };
        let query = proj(self, "query");
        let key = proj(self, "key");
        let value = proj(self, "value");
        let output = proj(self, "output");
        let lora_q = self.lora(&format!("{prefix}.lora_q"), d, cfg.rank, cfg.lora_init_std);
        let lora_v = self.lora(&format!("{prefix}.lora_v"), d, cfg.rank, cfg.lora_init_std);
        AttentionBlock {
            query,
            key,
            value,
            output,
            lora_q,
            lora_v,
        }
    }
}

/// Tape variables for every model parameter, aligned with [`SegModel::params`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Which trainable groups record gradients when binding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Track {
    pub weights: bool,
    pub prompt: bool,
}

impl Track {
    pub const NONE: Track = Track {
        weights: false,
        prompt: false,
    };
    pub const ALL: Track = Track {
        weights: true,
        prompt: true,
    };
}

/// `frozen_out + x · down · up`, with scaling factor 1.
pub fn lora_forward<'t>(
    down: Var<'t>,
    up: Var<'t>,
    frozen_out: Var<'t>,
    x: Var<'t>,
) -> std::result::Result<Var<'t>, TensorError> {
    let delta = x.matmul(down)?.matmul(up)?;
    frozen_out.add(delta)
}

impl AttentionBlock {
    /// Single-head attention with `queries` attending over `context`.
    pub fn forward<'t>(
        &self,
        b: &Bound<'t>,
        queries: Var<'t>,
        context: Var<'t>,
        lora: bool,
    ) -> Result<Var<'t>> {
        let mut q = queries.matmul(b.var(self.query))?;
        let k = context.matmul(b.var(self.key))?;
        let mut v = context.matmul(b.var(self.value))?;
        if lora {
            q = lora_forward(b.var(self.lora_q.down), b.var(self.lora_q.up), q, queries)?;
            v = lora_forward(b.var(self.lora_v.down), b.var(self.lora_v.up), v, context)?;
        }
        let dim = q.shape()[1] as f64;
        let scores = q.matmul(k.transpose()?)?.scale(1.0 / dim.sqrt());
        let mixed = scores.softmax().matmul(v)?;
        Ok(mixed.matmul(b.var(self.output))?)
    }

    pub fn adapters(&self) -> [&LoraAdapter; 2] {
        [&self.lora_q, &self.lora_v]
    }
}

impl TwoWayDecoderBlock {
    /// Returns updated `(prompt_tokens, image_tokens)`.
    pub fn forward<'t>(
        &self,
        b: &Bound<'t>,
        prompt: Var<'t>,
        image: Var<'t>,
        lora: bool,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let prompt = prompt.add(self.self_attn.forward(b, prompt, prompt, lora)?)?;
        let prompt = prompt.add(self.token_to_image.forward(b, prompt, image, lora)?)?;
        let hidden = prompt.matmul(b.var(self.mlp_in))?.tanh();
        let prompt = prompt.add(hidden.matmul(b.var(self.mlp_out))?)?;
        let image = image.add(self.image_to_token.forward(b, image, prompt, lora)?)?;
        Ok((prompt, image))
    }

    pub fn attention_blocks(&self) -> [&AttentionBlock; 3] {
        [&self.self_attn, &self.token_to_image, &self.image_to_token]
    }
}

impl SegModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let p2 = config.patch_size * config.patch_size;
        let std = 1.0 / (d as f64).sqrt();
        let mut b = Builder {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };

        let embed = b.random("encoder.embed".into(), Partition::Frozen, &[p2, d], std);
        let positional = b.random(
            "encoder.positional".into(),
            Partition::Frozen,
            &[config.n_image_tokens(), d],
            std,
        );
        let encoder = FrozenEncoder {
            patch_size: config.patch_size,
            grid: config.grid(),
            seed: config.seed,
            embed,
            positional,
        };

        let mut decoder_blocks = Vec::with_capacity(config.n_blocks);
        for i in 0..config.n_blocks {
            let self_attn = b.attention(&format!("blocks.{i}.self_attn"), &config);
            let token_to_image = b.attention(&format!("blocks.{i}.token_to_image"), &config);
            let image_to_token = b.attention(&format!("blocks.{i}.image_to_token"), &config);
            let mlp_in = b.random(
                format!("blocks.{i}.mlp.in"),
                Partition::Frozen,
                &[d, 2 * d],
                std,
            );
            let mlp_out = b.random(
                format!("blocks.{i}.mlp.out"),
                Partition::Frozen,
                &[2 * d, d],
                1.0 / ((2 * d) as f64).sqrt(),
            );
            decoder_blocks.push(TwoWayDecoderBlock {
                self_attn,
                token_to_image,
                image_to_token,
                mlp_in,
                mlp_out,
            });
        }

        let c = config.head_channels;
        let h = config.mlp_hidden;
        let upsampler = b.random(
            "head.upsampler".into(),
            Partition::Weights,
            &[d, p2 * c],
            std,
        );
        let hidden_w = b.random("head.mlp.hidden_w".into(), Partition::Weights, &[d, h], std);
        let hidden_b = b.add(
            "head.mlp.hidden_b".into(),
            Partition::Weights,
            Tensor::zeros(&[1, h]),
        );
        let out_w = b.random(
            "head.mlp.out_w".into(),
            Partition::Weights,
            &[h, c],
            1.0 / (h as f64).sqrt(),
        );
        let out_b = b.add(
            "head.mlp.out_b".into(),
            Partition::Weights,
            Tensor::zeros(&[1, c]),
        );
        let logit_bias = b.add(
            "head.logit_bias".into(),
            Partition::Weights,
            Tensor::scalar(0.0),
        );
        let head = MaskHead {
            upsampler,
            hidden_w,
            hidden_b,
            out_w,
            out_b,
            logit_bias,
        };

        let tokens = b.random(
            "prompt.tokens".into(),
            Partition::Prompt,
            &[config.n_prompt_tokens, d],
            config.prompt_init_std,
        );

        let pixel_order = pixel_order(config.image_size, config.patch_size);
        Ok(Self {
            config,
            params: b.params,
            encoder,
            decoder_blocks,
            prompt: PromptEmbedding { tokens },
            head,
            lora_enabled: true,
            pixel_order,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn lora_enabled(&self) -> bool {
        self.lora_enabled
    }

    /// Same weights with every adapter bypassed: the plain frozen decoder.
    pub fn without_lora(&self) -> Self {
        Self {
            lora_enabled: false,
            ..self.clone()
        }
    }

    pub fn prompt_tokens(&self) -> ParamId {
        self.prompt.tokens
    }

    pub fn lora_adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.decoder_blocks
            .iter()
            .flat_map(|blk| blk.attention_blocks())
            .flat_map(|attn| attn.adapters())
    }

    /// Number of scalars held by LoRA adapters.
    pub fn lora_scalars(&self) -> usize {
        self.lora_adapters()
            .map(|a| self.params[a.down.0].value.numel() + self.params[a.up.0].value.numel())
            .sum()
    }

    pub fn parameter_partition(&self) -> ParameterPartition {
        let ids = |part: Partition| {
            self.params
                .iter()
                .enumerate()
                .filter(|(_, p)| p.partition == part)
                .map(|(i, _)| ParamId(i))
                .collect()
        };
        ParameterPartition {
            frozen: ids(Partition::Frozen),
            weights: ids(Partition::Weights),
            prompt: ids(Partition::Prompt),
        }
    }

    pub fn partition_scalars(&self, partition: Partition) -> usize {
        self.params
            .iter()
            .filter(|p| p.partition == partition)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Values of one group in partition order.
    pub fn group(&self, partition: Partition) -> Vec<Tensor> {
        self.params
            .iter()
            .filter(|p| p.partition == partition)
            .map(|p| p.value.clone())
            .collect()
    }

    pub fn set_group(&mut self, partition: Partition, values: &[Tensor]) -> Result<()> {
        let slots: Vec<usize> = (0..self.params.len())
            .filter(|&i| self.params[i].partition == partition)
            .collect();
        if slots.len() != values.len() {
            return Err(ModelError::GroupSize {
                partition,
                expected: slots.len(),
                got: values.len(),
            });
        }
        for (&i, v) in slots.iter().zip(values) {
            if self.params[i].value.shape() != v.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "set_group",
                    lhs: self.params[i].value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                }
                .into());
            }
        }
        for (&i, v) in slots.iter().zip(values) {
            self.params[i].value = v.clone();
        }
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Binds the model's own values; `W` and `A` record gradients.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_values(tape, None, None, Track::ALL)
            .expect("own values always match")
    }

    /// Binds with `W` and `A` replaced by the given values.
    pub fn bind_with<'t>(
        &self,
        tape: &'t Tape,
        weights: &[Tensor],
        prompt: &[Tensor],
        track: Track,
    ) -> Result<Bound<'t>> {
        self.bind_values(tape, Some(weights), Some(prompt), track)
    }

    fn bind_values<'t>(
        &self,
        tape: &'t Tape,
        weights: Option<&[Tensor]>,
        prompt: Option<&[Tensor]>,
        track: Track,
    ) -> Result<Bound<'t>> {
        let check = |part: Partition, given: Option<&[Tensor]>| -> Result<()> {
            if let Some(vals) = given {
                let expected = self.params.iter().filter(|p| p.partition == part).count();
                if vals.len() != expected {
                    return Err(ModelError::GroupSize {
                        partition: part,
                        expected,
                        got: vals.len(),
                    });
                }
            }
            Ok(())
        };
        check(Partition::Weights, weights)?;
        check(Partition::Prompt, prompt)?;

        let (mut wi, mut ai) = (0, 0);
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let var = match p.partition {
                Partition::Frozen => tape.constant(p.value.clone()),
                Partition::Weights => {
                    let v = weights.map_or(&p.value, |w| &w[wi]);
                    wi += 1;
                    if v.shape() != p.value.shape() {
                        return Err(shape_error(p, v));
                    }
                    tape.leaf(v.clone(), track.weights)
                }
                Partition::Prompt => {
                    let v = prompt.map_or(&p.value, |a| &a[ai]);
                    ai += 1;
                    if v.shape() != p.value.shape() {
                        return Err(shape_error(p, v));
                    }
                    tape.leaf(v.clone(), track.prompt)
                }
            };
            vars.push(var);
        }
        Ok(Bound { vars })
    }

    /// Frozen patch embedding of an image, computed outside any tape.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor> {
        let patches = self.patches(image)?;
        let tokens = patches.matmul(&self.params[self.encoder.embed.0].value)?;
        let pos = &self.params[self.encoder.positional.0].value;
        let mut out = tokens;
        out.add_scaled(pos, 1.0);
        Ok(out)
    }

    /// Flattened patches, one row per token in row-major grid order.
    pub fn patches(&self, image: &Tensor) -> Result<Tensor> {
        let p = self.config.patch_size;
        let grid = self.config.grid();
        let (h, w) = match image.shape() {
            [h, w] => (*h, *w),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "patches",
                    lhs: image.shape().to_vec(),
                    rhs: vec![self.config.image_size, self.config.image_size],
                }
                .into())
            }
        };
        if h % p != 0 || w % p != 0 || h / p != grid || w / p != grid {
            return Err(ModelError::ImageShape {
                height: h,
                width: w,
                patch: p,
                grid,
            });
        }
        let px = image.data();
        let mut data = Vec::with_capacity(h * w);
        for gy in 0..grid {
            for gx in 0..grid {
                for py in 0..p {
                    let row = (gy * p + py) * w + gx * p;
                    data.extend_from_slice(&px[row..row + p]);
                }
            }
        }
        Ok(Tensor::new(vec![grid * grid, p * p], data)?)
    }

    /// Full forward pass from an `H×W` image to `H×W` logits.
    pub fn forward<'t>(&self, b: &Bound<'t>, image: &Tensor) -> Result<Var<'t>> {
        let tape = b.var(self.encoder.embed).tape();
        let patches = tape.constant(self.patches(image)?);
        let tokens = patches
            .matmul(b.var(self.encoder.embed))?
            .add(b.var(self.encoder.positional))?;
        self.decode(b, tokens)
    }

    /// Forward pass from precomputed [`SegModel::encode`] output.
    pub fn forward_encoded<'t>(&self, b: &Bound<'t>, tokens: &Tensor) -> Result<Var<'t>> {
        let tape = b.var(self.encoder.embed).tape();
        self.decode(b, tape.constant(tokens.clone()))
    }

    fn decode<'t>(&self, b: &Bound<'t>, tokens: Var<'t>) -> Result<Var<'t>> {
        let mut prompt = b.var(self.prompt.tokens);
        let mut image = tokens;
        for block in &self.decoder_blocks {
            (prompt, image) = block.forward(b, prompt, image, self.lora_enabled)?;
        }
        self.head
            .forward(b, &self.config, &self.pixel_order, prompt, image)
    }

    /// Convenience: logits for one image under the model's own values.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let b = self.bind_values(&tape, None, None, Track::NONE)?;
        let out = self.forward(&b, image)?;
        let v = out.value();
        Ok((*v).clone())
    }
}

impl MaskHead {
    fn forward<'t>(
        &self,
        b: &Bound<'t>,
        cfg: &ModelConfig,
        pixel_order: &[usize],
        prompt: Var<'t>,
        image: Var<'t>,
    ) -> Result<Var<'t>> {
        let last = cfg.n_prompt_tokens - 1;
        let token = prompt.select_rows(&[last])?;
        let hidden = token
            .matmul(b.var(self.hidden_w))?
            .add(b.var(self.hidden_b))?
            .tanh();
        let hyper = hidden.matmul(b.var(self.out_w))?.add(b.var(self.out_b))?;

        let p2 = cfg.patch_size * cfg.patch_size;
        let n_tokens = cfg.n_image_tokens();
        let features = image
            .matmul(b.var(self.upsampler))?
            .reshape(&[n_tokens * p2, cfg.head_channels])?;
        let logits = features
            .matmul(hyper.transpose()?)?
            .add(b.var(self.logit_bias))?
            .select_rows(pixel_order)?;
        Ok(logits.reshape(&[cfg.image_size, cfg.image_size])?)
    }
}

fn shape_error(p: &Param, v: &Tensor) -> ModelError {
    TensorError::ShapeMismatch {
        op: "bind",
        lhs: p.value.shape().to_vec(),
        rhs: v.shape().to_vec(),
    }
    .into()
}

fn pixel_order(size: usize, patch: usize) -> Vec<usize> {
    let grid = size / patch;
    let mut order = vec![0; size * size];
    for y in 0..size {
        for x in 0..size {
            let token = (y / patch) * grid + x / patch;
            let within = (y % patch) * patch + x % patch;
            order[y * size + x] = token * patch * patch + within;
        }
    }
    order
}
