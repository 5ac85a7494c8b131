//! A small ViT-style backbone with adapter placements and fine-tuning modes.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use crate::adapters::{self, AdapterParams, LkaConfig, Recipe, DEFAULT_DILATION};
use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::init;
use crate::nn::{join, LayerNormParams, LinearParams, MlpParams, MsaParams, Parameterized};
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal backbone initialisation.
pub const INIT_STD: f64 = 0.02;

/// Where the two adapters of a block sit relative to its sub-layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placement {
    /// (a) parallel branches next to MSA and MLP, reading the same LayerNorm output.
    Parallel,
    /// (b) after each sub-layer, before its residual addition.
    SeqBefore,
    /// (c) after each residual addition.
    SeqAfter,
}

impl Placement {
    pub const ALL: [Placement; 3] = [
        Placement::Parallel,
        Placement::SeqBefore,
        Placement::SeqAfter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Placement::Parallel => "parallel_a",
            Placement::SeqBefore => "seq_before_b",
            Placement::SeqAfter => "seq_after_c",
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel_a" | "a" | "parallel" => Ok(Placement::Parallel),
            "seq_before_b" | "b" | "seq_before" => Ok(Placement::SeqBefore),
            "seq_after_c" | "c" | "seq_after" => Ok(Placement::SeqAfter),
            _ => Err(Error::Config(format!("unknown placement {s:?}"))),
        }
    }
}

/// Which parameters are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Adapters and the classification head.
    LkaTuning,
    /// The classification head only.
    LinearProbe,
    /// Everything.
    FullFt,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::LkaTuning => "lka_tuning",
            Mode::LinearProbe => "linear_probe",
            Mode::FullFt => "full_ft",
        }
    }

    pub fn trains(self, name: &str) -> bool {
        let head = name.starts_with("head.");
        match self {
            Mode::LkaTuning => head || name.contains("adapter"),
            Mode::LinearProbe => head,
            Mode::FullFt => true,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lka_tuning" => Ok(Mode::LkaTuning),
            "linear_probe" => Ok(Mode::LinearProbe),
            "full_ft" => Ok(Mode::FullFt),
            _ => Err(Error::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    pub cls_token: bool,
    /// `None` builds the adapter-free backbone.
    pub placement: Option<Placement>,
    pub bottleneck: usize,
    pub kernel: Option<usize>,
    pub recipe: Recipe,
    pub dilation: usize,
    pub mode: Mode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            in_channels: 2,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            classes: 4,
            cls_token: false,
            placement: Some(Placement::Parallel),
            bottleneck: 8,
            kernel: Some(7),
            recipe: Recipe::CwSingle,
            dilation: DEFAULT_DILATION,
            mode: Mode::LkaTuning,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn seq_len(&self) -> usize {
        self.grid() * self.grid() + usize::from(self.cls_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn lka_config(&self) -> LkaConfig {
        LkaConfig {
            d: self.embed_dim,
            d_hat: self.bottleneck,
            kernel: self.kernel,
            recipe: self.recipe,
            dilation: self.dilation,
            grid: (self.grid(), self.grid()),
            cls_tokens: usize::from(self.cls_token),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("in_channels", self.in_channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embedding dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.placement.is_some() {
            self.lka_config().validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub msa: MsaParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
    pub adapter_msa: Option<AdapterParams>,
    pub adapter_ffn: Option<AdapterParams>,
}

impl Parameterized for BlockParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.msa.visit(&join(prefix, "msa"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
        if let Some(a) = &self.adapter_msa {
            a.visit(&join(prefix, "adapter_msa"), f);
        }
        if let Some(a) = &self.adapter_ffn {
            a.visit(&join(prefix, "adapter_ffn"), f);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.msa.visit_mut(&join(prefix, "msa"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.mlp.visit_mut(&join(prefix, "mlp"), f);
        if let Some(a) = &mut self.adapter_msa {
            a.visit_mut(&join(prefix, "adapter_msa"), f);
        }
        if let Some(a) = &mut self.adapter_ffn {
            a.visit_mut(&join(prefix, "adapter_ffn"), f);
        }
    }
}

fn adapters_of(bp: &BlockParams, placement: Placement) -> Result<(&AdapterParams, &AdapterParams)> {
    match (&bp.adapter_msa, &bp.adapter_ffn) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::Config(format!(
            "placement {placement} requires both block adapters"
        ))),
    }
}

/// One transformer block. With `placement == None` the adapters are ignored
/// and the plain pre-norm block is computed.
pub fn block_forward(
    tape: &mut Tape,
    x: Var,
    bp: &BlockParams,
    placement: Option<Placement>,
    lka: &LkaConfig,
) -> Result<Var> {
    match placement {
        None => {
            let n1 = bp.ln1.forward(tape, x)?;
            let attn = bp.msa.forward(tape, n1)?;
            let x1 = tape.add(x, attn)?;
            let n2 = bp.ln2.forward(tape, x1)?;
            let ffn = bp.mlp.forward(tape, n2)?;
            tape.add(x1, ffn)
        }
        Some(Placement::Parallel) => {
            let (a_msa, a_ffn) = adapters_of(bp, Placement::Parallel)?;
            let n1 = bp.ln1.forward(tape, x)?;
            let attn = bp.msa.forward(tape, n1)?;
            let side = adapters::adapter_branch(tape, n1, a_msa, lka)?;
            let x1 = tape.add(x, attn)?;
            let x1 = tape.add(x1, side)?;
            let n2 = bp.ln2.forward(tape, x1)?;
            let ffn = bp.mlp.forward(tape, n2)?;
            let side = adapters::adapter_branch(tape, n2, a_ffn, lka)?;
            let out = tape.add(x1, ffn)?;
            tape.add(out, side)
        }
        Some(Placement::SeqBefore) => {
            let (a_msa, a_ffn) = adapters_of(bp, Placement::SeqBefore)?;
            let n1 = bp.ln1.forward(tape, x)?;
            let attn = bp.msa.forward(tape, n1)?;
            let attn = adapters::adapter_forward(tape, attn, a_msa, lka)?;
            let x1 = tape.add(x, attn)?;
            let n2 = bp.ln2.forward(tape, x1)?;
            let ffn = bp.mlp.forward(tape, n2)?;
            let ffn = adapters::adapter_forward(tape, ffn, a_ffn, lka)?;
            tape.add(x1, ffn)
        }
        Some(Placement::SeqAfter) => {
            let (a_msa, a_ffn) = adapters_of(bp, Placement::SeqAfter)?;
            let n1 = bp.ln1.forward(tape, x)?;
            let attn = bp.msa.forward(tape, n1)?;
            let x1 = tape.add(x, attn)?;
            let x1 = adapters::adapter_forward(tape, x1, a_msa, lka)?;
            let n2 = bp.ln2.forward(tape, x1)?;
            let ffn = bp.mlp.forward(tape, n2)?;
            let out = tape.add(x1, ffn)?;
            adapters::adapter_forward(tape, out, a_ffn, lka)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    pub patch_embed: LinearParams,
    pub cls_token: Option<Tensor>,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm: LayerNormParams,
    pub head: LinearParams,
}

impl Parameterized for Model {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        if let Some(cls) = &self.cls_token {
            f(join(prefix, "cls_token"), cls);
        }
        f(join(prefix, "pos_embed"), &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        if let Some(cls) = &mut self.cls_token {
            f(join(prefix, "cls_token"), cls);
        }
        f(join(prefix, "pos_embed"), &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

fn init_linear(seed: u64, name: &str, in_dim: usize, out_dim: usize) -> LinearParams {
    LinearParams {
        weight: init::trunc_normal(
            &[in_dim, out_dim],
            INIT_STD,
            &mut init::rng_for(seed, &format!("{name}.weight")),
        ),
        bias: Tensor::zeros(&[out_dim]),
    }
}

/// Builds a seeded model. Backbone parameters depend only on `(seed, name)`,
/// so models that differ only in their adapters share an identical backbone.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let lka = cfg.lka_config();
    let mut blocks = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let name = format!("blocks.{i}");
        let mut msa = MsaParams::zeros(d, cfg.heads)?;
        msa.q = init_linear(seed, &format!("{name}.msa.q"), d, d);
        msa.k = init_linear(seed, &format!("{name}.msa.k"), d, d);
        msa.v = init_linear(seed, &format!("{name}.msa.v"), d, d);
        msa.out = init_linear(seed, &format!("{name}.msa.out"), d, d);
        let hidden = cfg.mlp_ratio * d;
        let mlp = MlpParams {
            fc1: init_linear(seed, &format!("{name}.mlp.fc1"), d, hidden),
            fc2: init_linear(seed, &format!("{name}.mlp.fc2"), hidden, d),
        };
        let (adapter_msa, adapter_ffn) = match cfg.placement {
            Some(_) => (
                Some(adapters::init_adapter(
                    &lka,
                    init::derive_seed(seed, &format!("{name}.adapter_msa")),
                )?),
                Some(adapters::init_adapter(
                    &lka,
                    init::derive_seed(seed, &format!("{name}.adapter_ffn")),
                )?),
            ),
            None => (None, None),
        };
        blocks.push(BlockParams {
            ln1: LayerNormParams::new(d),
            msa,
            ln2: LayerNormParams::new(d),
            mlp,
            adapter_msa,
            adapter_ffn,
        });
    }
    let mut model = Model {
        patch_embed: init_linear(seed, "patch_embed", cfg.patch_dim(), d),
        cls_token: cfg
            .cls_token
            .then(|| init::trunc_normal(&[1, d], INIT_STD, &mut init::rng_for(seed, "cls_token"))),
        pos_embed: init::trunc_normal(
            &[cfg.seq_len(), d],
            INIT_STD,
            &mut init::rng_for(seed, "pos_embed"),
        ),
        blocks,
        norm: LayerNormParams::new(d),
        head: init_linear(seed, "head", d, cfg.classes),
        cfg: cfg.clone(),
    };
    model.visit_mut("", &mut |_, t| t.round_to_f32());
    model.set_mode(cfg.mode);
    Ok(model)
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn lka_config(&self) -> LkaConfig {
        self.cfg.lka_config()
    }

    /// Sets every parameter's trainable flag from `mode`.
    pub fn set_mode(&mut self, mode: Mode) {
        self.cfg.mode = mode;
        self.visit_mut("", &mut |name, t| t.set_requires_grad(mode.trains(&name)));
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, t| out.push((n, t)));
        out
    }

    /// Registry entries flagged trainable, in registry order.
    pub fn trainable_params(&self) -> Vec<(String, &Tensor)> {
        self.named_params()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }

    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.named_params_mut()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }

    /// Checks that registry names are unique.
    pub fn registry_is_unique(&self) -> bool {
        let mut seen = HashSet::new();
        self.named_params().into_iter().all(|(n, _)| seen.insert(n))
    }

    pub fn apply_gradients(&mut self, grads: &Gradients) -> Result<()> {
        for (_, t) in self.trainable_params_mut() {
            grads.apply_to(t)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, t| t.zero_grad());
    }

    pub fn clear_grads(&mut self) {
        self.visit_mut("", &mut |_, t| t.clear_grad());
    }

    fn embed(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let shape = tape.shape(images).to_vec();
        let expected = [cfg.in_channels, cfg.image_size, cfg.image_size];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::Dimension {
                op: "model input",
                lhs: shape,
                rhs: expected.to_vec(),
            });
        }
        let (b, c, p, g) = (shape[0], cfg.in_channels, cfg.patch_size, cfg.grid());
        let x = tape.reshape(images, &[b, c, g, p, g, p])?;
        let x = tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
        let x = tape.reshape(x, &[b, g * g, c * p * p])?;
        let mut x = self.patch_embed.forward(tape, x)?;
        if let Some(cls) = &self.cls_token {
            let cls = tape.leaf(cls);
            let cls = tape.repeat(cls, b)?;
            x = tape.concat(&[cls, x], 1)?;
        }
        let pos = tape.leaf(&self.pos_embed);
        tape.add(x, pos)
    }

    /// Patch embedding followed by all blocks: the last block's tokens `[B,T,d]`.
    pub fn forward_tokens(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        let lka = self.cfg.lka_config();
        let mut x = self.embed(tape, images)?;
        for bp in &self.blocks {
            x = block_forward(tape, x, bp, self.cfg.placement, &lka)?;
        }
        Ok(x)
    }

    /// Logits `[B, classes]`: blocks, final norm, mean over spatial tokens, head.
    pub fn forward(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        let x = self.forward_tokens(tape, images)?;
        let x = self.norm.forward(tape, x)?;
        let x = if self.cls_token.is_some() {
            let t = tape.shape(x)[1];
            tape.narrow(x, 1, 1, t - 1)?
        } else {
            x
        };
        let pooled = tape.mean_axis(x, 1)?;
        self.head.forward(tape, pooled)
    }

    /// Inference-only logits.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let x = tape.constant(images);
        let y = self.forward(&mut tape, x)?;
        Ok(tape.to_tensor(y))
    }
}

pub fn model_forward(m: &Model, images: &Tensor) -> Result<Tensor> {
    m.logits(images)
}

pub fn trainable_params(m: &Model) -> Vec<(String, &Tensor)> {
    m.trainable_params()
}
