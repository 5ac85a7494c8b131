//! Differentiable layers. Parameter structs own their tensors and bind them
//! onto a [`Tape`] as leaves on every forward call.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Walks named parameters in a fixed order. Names are dotted paths.
pub trait Parameterized {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

macro_rules! parameterized {
    ($ty:ty { $($field:ident),* }) => {
        impl Parameterized for $ty {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
                $( f(join(prefix, stringify!($field)), &self.$field); )*
            }
            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
                $( f(join(prefix, stringify!($field)), &mut self.$field); )*
            }
        }
    };
}

#[derive(Debug, Clone)]
pub struct LinearParams {
    /// `[in_dim, out_dim]`
    pub weight: Tensor,
    pub bias: Tensor,
}

parameterized!(LinearParams { weight, bias });

impl LinearParams {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearParams {
            weight: Tensor::zeros(&[in_dim, out_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[1]] {
            return Err(Error::Dimension {
                op: "linear params",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(LinearParams { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct DwConvParams {
    /// `[channels, k, k]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub dilation: usize,
}

parameterized!(DwConvParams { weight, bias });

impl DwConvParams {
    pub fn zeros(channels: usize, kernel: usize, dilation: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "depthwise kernel size {kernel} must be odd"
            )));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be at least 1".into()));
        }
        Ok(DwConvParams {
            weight: Tensor::zeros(&[channels, kernel, kernel]),
            bias: Tensor::zeros(&[channels]),
            dilation,
        })
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        tape.dwconv2d(x, w, Some(b), self.dilation)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

parameterized!(LayerNormParams { gamma, beta });

impl LayerNormParams {
    pub fn new(d: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::ones(&[d]),
            beta: Tensor::zeros(&[d]),
            eps: LAYERNORM_EPS,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.leaf(&self.gamma);
        let b = tape.leaf(&self.beta);
        tape.layernorm(x, g, b, self.eps)
    }
}

/// Multi-head self-attention. Head `h` owns columns `h·head_dim..(h+1)·head_dim`
/// of the query, key and value projections.
#[derive(Debug, Clone)]
pub struct MsaParams {
    pub heads: usize,
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub out: LinearParams,
}

impl Parameterized for MsaParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

impl MsaParams {
    pub fn zeros(d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "embedding dim {d} is not divisible by {heads} heads"
            )));
        }
        Ok(MsaParams {
            heads,
            q: LinearParams::zeros(d, d),
            k: LinearParams::zeros(d, d),
            v: LinearParams::zeros(d, d),
            out: LinearParams::zeros(d, d),
        })
    }

    pub fn dim(&self) -> usize {
        self.q.in_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    /// `[B,T,d]` → `[B·heads, T, head_dim]`
    fn split_heads(&self, tape: &mut Tape, x: Var, b: usize, t: usize) -> Result<Var> {
        let hd = self.head_dim();
        let x = tape.reshape(x, &[b, t, self.heads, hd])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * self.heads, t, hd])
    }

    /// Returns `(attention weights [B·heads, T, T], output [B,T,d])`.
    pub fn attention(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.dim() {
            return Err(Error::Dimension {
                op: "msa",
                lhs: shape,
                rhs: vec![self.dim()],
            });
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let q = self.q.forward(tape, x)?;
        let k = self.k.forward(tape, x)?;
        let v = self.v.forward(tape, x)?;
        let q = self.split_heads(tape, q, b, t)?;
        let k = self.split_heads(tape, k, b, t)?;
        let v = self.split_heads(tape, v, b, t)?;
        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (self.head_dim() as f64).sqrt());
        let attn = tape.softmax(scores);
        let ctx = tape.bmm(attn, v, false)?;
        let ctx = tape.reshape(ctx, &[b, self.heads, t, self.head_dim()])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, t, d])?;
        let out = self.out.forward(tape, ctx)?;
        Ok((attn, out))
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.attention(tape, x)?.1)
    }
}

#[derive(Debug, Clone)]
pub struct MlpParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl Parameterized for MlpParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

impl MlpParams {
    pub fn zeros(d: usize, ratio: usize) -> Self {
        MlpParams {
            fc1: LinearParams::zeros(d, ratio * d),
            fc2: LinearParams::zeros(ratio * d, d),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }
}

pub fn linear(tape: &mut Tape, x: Var, p: &LinearParams) -> Result<Var> {
    p.forward(tape, x)
}

pub fn dwconv2d(tape: &mut Tape, x: Var, p: &DwConvParams) -> Result<Var> {
    p.forward(tape, x)
}

pub fn gelu(tape: &mut Tape, x: Var) -> Var {
    tape.gelu(x)
}

pub fn layernorm(tape: &mut Tape, x: Var, p: &LayerNormParams) -> Result<Var> {
    p.forward(tape, x)
}

pub fn msa(tape: &mut Tape, x: Var, p: &MsaParams) -> Result<Var> {
    p.forward(tape, x)
}

pub fn mlp(tape: &mut Tape, x: Var, p: &MlpParams) -> Result<Var> {
    p.forward(tape, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run<F: FnOnce(&mut Tape) -> Result<Var>>(f: F) -> (Vec<usize>, Vec<f64>) {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        (tape.shape(v).to_vec(), tape.value(v).to_vec())
    }

    #[test]
    fn linear_identity_and_bias() {
        let eye = Tensor::new(&[2, 2], vec![1., 0., 0., 1.]).unwrap();
        let p = LinearParams::new(eye.clone(), Tensor::zeros(&[2])).unwrap();
        let x = Tensor::new(&[1, 2], vec![0.25, -3.0]).unwrap();
        let (_, y) = run(|t| {
            let xv = t.constant(&x);
            linear(t, xv, &p)
        });
        assert_eq!(y, x.data());

        let p = LinearParams::new(eye, Tensor::new(&[2], vec![2., 3.]).unwrap()).unwrap();
        let ones = Tensor::ones(&[1, 2]);
        let (_, y) = run(|t| {
            let xv = t.constant(&ones);
            linear(t, xv, &p)
        });
        assert_eq!(y, vec![3., 4.]);
    }

    #[test]
    fn linear_rejects_wrong_extent() {
        let p = LinearParams::zeros(4, 2);
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[3, 5]));
        assert!(matches!(
            linear(&mut tape, x, &p),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn dwconv_zero_padding_arithmetic() {
        let mut p = DwConvParams::zeros(1, 3, 1).unwrap();
        p.weight = Tensor::ones(&[1, 3, 3]);
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let (shape, y) = run(|t| {
            let xv = t.constant(&x);
            dwconv2d(t, xv, &p)
        });
        assert_eq!(shape, vec![1, 1, 3, 3]);
        assert_eq!(y[4], 9.0);
        assert_eq!(y[0], 4.0);
        assert_eq!(y[1], 6.0);
    }

    #[test]
    fn dwconv_even_kernel_is_config_error() {
        assert!(matches!(
            DwConvParams::zeros(2, 4, 1),
            Err(Error::Config(_))
        ));
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[1, 1, 4, 4]));
        let w = tape.constant(&Tensor::zeros(&[1, 2, 2]));
        assert!(matches!(
            tape.dwconv2d(x, w, None, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dilated_tap_footprint() {
        // gradient of one output pixel of a 3x3, dilation-3 conv on a 9x9 plane
        let mut p = DwConvParams::zeros(1, 3, 3).unwrap();
        p.weight = Tensor::ones(&[1, 3, 3]);
        let x = Tensor::zeros(&[1, 1, 9, 9]).tracked();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = dwconv2d(&mut tape, xv, &p).unwrap();
        let y = tape.reshape(y, &[81]).unwrap();
        let centre = tape.narrow(y, 0, 4 * 9 + 4, 1).unwrap();
        let loss = tape.sum(centre);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(&x).unwrap();
        let taps: Vec<(usize, usize)> = (0..81)
            .filter(|&i| g[i] != 0.0)
            .map(|i| (i / 9, i % 9))
            .collect();
        let expected: Vec<(usize, usize)> = [1, 4, 7]
            .iter()
            .flat_map(|&r| [1, 4, 7].iter().map(move |&c| (r, c)))
            .collect();
        assert_eq!(taps, expected);
    }

    #[test]
    fn gelu_reference_points() {
        let x = Tensor::new(&[3], vec![0.0, 1.0, -1.0]).unwrap();
        let (_, y) = run(|t| {
            let xv = t.constant(&x);
            Ok(gelu(t, xv))
        });
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 0.841345).abs() < 1e-6, "{}", y[1]);
        assert!((y[2] + 0.158655).abs() < 1e-6, "{}", y[2]);
    }

    #[test]
    fn layernorm_normalises_and_handles_constant_token() {
        let p = LayerNormParams::new(3);
        let x = Tensor::new(&[2, 3], vec![1., 2., 3., 5., 5., 5.]).unwrap();
        let (_, y) = run(|t| {
            let xv = t.constant(&x);
            layernorm(t, xv, &p)
        });
        let mean: f64 = y[..3].iter().sum::<f64>() / 3.0;
        let var: f64 = y[..3].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
        assert_eq!(&y[3..], &[0.0, 0.0, 0.0]);
    }

    fn seeded_msa(d: usize, heads: usize) -> MsaParams {
        let mut p = MsaParams::zeros(d, heads).unwrap();
        let mut i = 0;
        p.visit_mut("", &mut |_, t| {
            for v in t.data_mut() {
                i += 1;
                *v = ((i * 7919) % 200) as f64 / 100.0 - 1.0;
            }
        });
        p
    }

    #[test]
    fn msa_attention_rows_are_distributions() {
        let p = seeded_msa(4, 2);
        let x = Tensor::from_fn(&[2, 5, 4], |i| (i as f64 * 0.3).sin());
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let (attn, out) = p.attention(&mut tape, xv).unwrap();
        assert_eq!(tape.shape(out), &[2, 5, 4]);
        assert_eq!(tape.shape(attn), &[4, 5, 5]);
        for row in tape.value(attn).chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn msa_single_token_is_value_then_output_projection() {
        let p = seeded_msa(4, 2);
        let x = Tensor::from_fn(&[1, 1, 4], |i| i as f64 - 1.5);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let (attn, out) = p.attention(&mut tape, xv).unwrap();
        assert_eq!(tape.value(attn), &[1.0, 1.0]);
        let v = p.v.forward(&mut tape, xv).unwrap();
        let expected = p.out.forward(&mut tape, v).unwrap();
        assert_eq!(tape.value(out), tape.value(expected));
    }

    #[test]
    fn msa_indivisible_heads_is_config_error() {
        assert!(matches!(MsaParams::zeros(6, 4), Err(Error::Config(_))));
    }

    #[test]
    fn mlp_parameter_count_and_bias_chain() {
        let mut p = MlpParams::zeros(4, 4);
        assert_eq!(p.param_count(), 148);
        p.fc1.bias = Tensor::full(&[16], 0.5);
        p.fc2.bias = Tensor::from_fn(&[4], |i| i as f64);
        let x = Tensor::from_fn(&[1, 2, 4], |i| i as f64);
        let (_, y) = run(|t| {
            let xv = t.constant(&x);
            mlp(t, xv, &p)
        });
        // zero weights: output is fc2.bias regardless of input
        assert_eq!(y, vec![0., 1., 2., 3., 0., 1., 2., 3.]);
    }
}
