//! Large-kernel adapters.
//!
//! An adapter maps tokens `x: [B,T,d]` to
//! `x + W_up · GeLU(conv(W_down · x))`, where `conv` is a depthwise
//! convolution stack applied to the spatial tokens laid out on their
//! `(H_t, W_t)` grid. With no kernel configured the stack is empty and the
//! adapter reduces to the classic bottleneck adapter.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::init;
use crate::nn::{join, DwConvParams, LinearParams, Parameterized};
use crate::tensor::Tensor;

pub const DEFAULT_DILATION: usize = 3;

/// How the receptive field of the bottleneck convolution is enlarged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Recipe {
    /// One channel-wise `k×k` convolution.
    CwSingle,
    /// One channel-wise `k×k` convolution with dilation (3 by default).
    Dilated,
    /// Three stacked channel-wise `k×k` convolutions.
    CwStacked,
}

impl Recipe {
    pub const ALL: [Recipe; 3] = [Recipe::CwSingle, Recipe::Dilated, Recipe::CwStacked];

    pub fn as_str(self) -> &'static str {
        match self {
            Recipe::CwSingle => "cw_single",
            Recipe::Dilated => "dilated",
            Recipe::CwStacked => "cw_stacked",
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown recipe {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LkaConfig {
    /// Embedding width.
    pub d: usize,
    /// Bottleneck width, strictly below `d`.
    pub d_hat: usize,
    /// Odd kernel size, or `None` for the vanilla adapter.
    pub kernel: Option<usize>,
    pub recipe: Recipe,
    /// Dilation used by [`Recipe::Dilated`].
    pub dilation: usize,
    /// Spatial token grid `(H_t, W_t)`.
    pub grid: (usize, usize),
    /// Leading non-spatial tokens (0 or 1) that bypass the convolution.
    pub cls_tokens: usize,
}

impl LkaConfig {
    pub fn new(d: usize, d_hat: usize, kernel: Option<usize>, grid: (usize, usize)) -> Self {
        LkaConfig {
            d,
            d_hat,
            kernel,
            recipe: Recipe::CwSingle,
            dilation: DEFAULT_DILATION,
            grid,
            cls_tokens: 0,
        }
    }

    pub fn with_recipe(mut self, recipe: Recipe) -> Self {
        self.recipe = recipe;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_hat == 0 || self.d_hat >= self.d {
            return Err(Error::Config(format!(
                "bottleneck width {} must satisfy 0 < d_hat < d = {}",
                self.d_hat, self.d
            )));
        }
        if let Some(k) = self.kernel {
            if k % 2 == 0 {
                return Err(Error::Config(format!("kernel size {k} must be odd")));
            }
        }
        if self.dilation == 0 {
            return Err(Error::Config("dilation must be at least 1".into()));
        }
        if self.cls_tokens > 1 {
            return Err(Error::Config(format!(
                "at most one class token is supported, got {}",
                self.cls_tokens
            )));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::Config(format!("empty token grid {:?}", self.grid)));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.grid.0 * self.grid.1 + self.cls_tokens
    }

    pub fn is_vanilla(&self) -> bool {
        self.kernel.is_none()
    }

    /// `(kernel, dilation)` of each convolution in the stack, in application order.
    pub fn conv_layers(&self) -> Vec<(usize, usize)> {
        match (self.kernel, self.recipe) {
            (None, _) => vec![],
            (Some(k), Recipe::CwSingle) => vec![(k, 1)],
            (Some(k), Recipe::Dilated) => vec![(k, self.dilation)],
            (Some(k), Recipe::CwStacked) => vec![(k, 1); 3],
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub down: LinearParams,
    pub conv: Vec<DwConvParams>,
    pub up: LinearParams,
}

impl Parameterized for AdapterParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.down.visit(&join(prefix, "down"), f);
        for (i, c) in self.conv.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv.{i}")), f);
        }
        self.up.visit(&join(prefix, "up"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.down.visit_mut(&join(prefix, "down"), f);
        for (i, c) in self.conv.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv.{i}")), f);
        }
        self.up.visit_mut(&join(prefix, "up"), f);
    }
}

impl AdapterParams {
    /// All-zero parameters with the shapes `cfg` prescribes.
    pub fn zeros(cfg: &LkaConfig) -> Result<Self> {
        cfg.validate()?;
        Self::layout(cfg)
    }

    /// Allocates the parameter layout without the `d_hat < d` check, for pure
    /// parameter accounting.
    pub fn layout(cfg: &LkaConfig) -> Result<Self> {
        let conv = cfg
            .conv_layers()
            .into_iter()
            .map(|(k, dil)| DwConvParams::zeros(cfg.d_hat, k, dil))
            .collect::<Result<_>>()?;
        Ok(AdapterParams {
            down: LinearParams::zeros(cfg.d, cfg.d_hat),
            conv,
            up: LinearParams::zeros(cfg.d_hat, cfg.d),
        })
    }
}

/// Applies the configured depthwise stack to bottleneck tokens `[B, H_t·W_t, d̂]`.
pub fn lka_conv(tape: &mut Tape, h: Var, conv: &[DwConvParams], cfg: &LkaConfig) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    let (gh, gw) = cfg.grid;
    if shape.len() != 3 || shape[1] != gh * gw {
        return Err(Error::Grid {
            h: gh,
            w: gw,
            tokens: shape.get(1).copied().unwrap_or(0),
        });
    }
    if conv.is_empty() {
        return Ok(h);
    }
    let (b, c) = (shape[0], shape[2]);
    let x = tape.reshape(h, &[b, gh, gw, c])?;
    let mut x = tape.permute(x, &[0, 3, 1, 2])?;
    for layer in conv {
        x = layer.forward(tape, x)?;
    }
    let x = tape.permute(x, &[0, 2, 3, 1])?;
    tape.reshape(x, &[b, gh * gw, c])
}

/// `W_up · GeLU(conv(W_down · x))` without the residual.
pub fn adapter_branch(tape: &mut Tape, x: Var, p: &AdapterParams, cfg: &LkaConfig) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != cfg.d {
        return Err(Error::Dimension {
            op: "adapter",
            lhs: shape,
            rhs: vec![cfg.d],
        });
    }
    let t = shape[1];
    if t != cfg.seq_len() {
        return Err(Error::Grid {
            h: cfg.grid.0,
            w: cfg.grid.1,
            tokens: t - cfg.cls_tokens.min(t),
        });
    }
    let h = p.down.forward(tape, x)?;
    let h = if cfg.cls_tokens > 0 {
        let cls = tape.narrow(h, 1, 0, cfg.cls_tokens)?;
        let spatial = tape.narrow(h, 1, cfg.cls_tokens, t - cfg.cls_tokens)?;
        let spatial = lka_conv(tape, spatial, &p.conv, cfg)?;
        tape.concat(&[cls, spatial], 1)?
    } else {
        lka_conv(tape, h, &p.conv, cfg)?
    };
    let h = tape.gelu(h);
    p.up.forward(tape, h)
}

/// Adapter with its internal residual: `x + adapter_branch(x)`.
pub fn adapter_forward(tape: &mut Tape, x: Var, p: &AdapterParams, cfg: &LkaConfig) -> Result<Var> {
    let branch = adapter_branch(tape, x, p, cfg)?;
    tape.add(x, branch)
}

/// Closed-form trainable parameter count of one adapter:
/// `2·d·d̂ + (n·k² + n + 1)·d̂ + d` for a stack of `n` convolutions, which is
/// `2·d·d̂ + (k²+2)·d̂ + d` for a single kernel and `2·d·d̂ + d̂ + d` for the
/// vanilla adapter.
pub fn adapter_param_count(cfg: &LkaConfig) -> usize {
    let (d, dh) = (cfg.d, cfg.d_hat);
    let per_channel: usize = cfg
        .conv_layers()
        .iter()
        .map(|(k, _)| k * k + 1)
        .sum::<usize>()
        + 1;
    2 * d * dh + per_channel * dh + d
}

/// Seeded initialisation: Kaiming-uniform down-projection and kernels, zero
/// biases and a zero up-projection, so the adapter starts as the identity.
pub fn init_adapter(cfg: &LkaConfig, seed: u64) -> Result<AdapterParams> {
    let mut p = AdapterParams::zeros(cfg)?;
    p.down.weight = init::kaiming_uniform(
        &[cfg.d, cfg.d_hat],
        cfg.d,
        &mut init::rng_for(seed, "down.weight"),
    );
    for (i, conv) in p.conv.iter_mut().enumerate() {
        let k = conv.kernel();
        conv.weight = init::kaiming_uniform(
            &[cfg.d_hat, k, k],
            k * k,
            &mut init::rng_for(seed, &format!("conv.{i}.weight")),
        );
    }
    p.visit_mut("", &mut |_, t| t.round_to_f32());
    Ok(p)
}
