//! Randomized central-difference cases over every layer, the adapter and a
//! full LKA-tuned block.

use lka_core::adapters::{adapter_forward, init_adapter, LkaConfig, Recipe};
use lka_core::backbone::{block_forward, build_model, ModelConfig, Placement};
use lka_core::finite_diff_check;
use lka_core::nn::{self, DwConvParams, LayerNormParams, LinearParams, MlpParams, MsaParams};
use rand::Rng;

use super::{param_fd, probe_loss, random_tensor, randomize, rng};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
pub const SEEDS: u64 = 7;

pub struct Case {
    pub name: String,
    pub rel_err: f64,
}

fn block_model(seed: u64) -> (lka_core::backbone::Model, ModelConfig) {
    let placements = [
        Placement::Parallel,
        Placement::SeqBefore,
        Placement::SeqAfter,
    ];
    let cfg = ModelConfig {
        image_size: 12,
        patch_size: 4,
        in_channels: 2,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        classes: 3,
        cls_token: seed % 2 == 1,
        placement: Some(placements[seed as usize % 3]),
        bottleneck: 3,
        kernel: [None, Some(1), Some(3), Some(5)][seed as usize % 4],
        recipe: Recipe::ALL[(seed as usize / 3) % 3],
        ..ModelConfig::default()
    };
    let mut model = build_model(&cfg, seed).unwrap();
    randomize(&mut model, 0.4, &mut rng(seed + 100));
    (model, cfg)
}

pub fn run_suite() -> Vec<Case> {
    let mut cases = Vec::new();
    let mut push = |name: String, rel_err: f64| cases.push(Case { name, rel_err });
    for s in 0..SEEDS {
        let mut r = rng(s);

        let mut lin = LinearParams::zeros(5, 4);
        randomize(&mut lin, 1.0, &mut r);
        let x = random_tensor(&[2, 3, 5], 1.0, &mut r);
        push(
            format!("linear/input/{s}"),
            finite_diff_check(
                |t, v| {
                    let y = nn::linear(t, v, &lin)?;
                    probe_loss(t, y, s)
                },
                &x,
                STEP,
            ),
        );
        push(
            format!("linear/weight/{s}"),
            finite_diff_check(
                |t, w| {
                    let xv = t.constant(&x);
                    let b = t.constant(&lin.bias);
                    let y = t.linear(xv, w, Some(b))?;
                    probe_loss(t, y, s)
                },
                &lin.weight,
                STEP,
            ),
        );

        let k = [1, 3, 5, 7][r.gen_range(0..4)];
        let dil = r.gen_range(1..=3);
        let mut conv = DwConvParams::zeros(3, k, dil).unwrap();
        randomize(&mut conv, 1.0, &mut r);
        let x = random_tensor(&[2, 3, 6, 5], 1.0, &mut r);
        push(
            format!("dwconv/input/k{k}d{dil}/{s}"),
            finite_diff_check(
                |t, v| {
                    let y = nn::dwconv2d(t, v, &conv)?;
                    probe_loss(t, y, s)
                },
                &x,
                STEP,
            ),
        );
        push(
            format!("dwconv/weight/k{k}d{dil}/{s}"),
            finite_diff_check(
                |t, w| {
                    let xv = t.constant(&x);
                    let b = t.constant(&conv.bias);
                    let y = t.dwconv2d(xv, w, Some(b), dil)?;
                    probe_loss(t, y, s)
                },
                &conv.weight,
                STEP,
            ),
        );

        let x = random_tensor(&[3, 7], 3.0, &mut r);
        push(
            format!("gelu/input/{s}"),
            finite_diff_check(
                |t, v| {
                    let y = nn::gelu(t, v);
                    probe_loss(t, y, s)
                },
                &x,
                STEP,
            ),
        );

        let mut ln = LayerNormParams::new(8);
        randomize(&mut ln, 1.0, &mut r);
        let x = random_tensor(&[2, 3, 8], 2.0, &mut r);
        push(
            format!("layernorm/input/{s}"),
            finite_diff_check(
                |t, v| {
                    let y = nn::layernorm(t, v, &ln)?;
                    probe_loss(t, y, s)
                },
                &x,
                STEP,
            ),
        );
        push(
            format!("layernorm/params/{s}"),
            param_fd(
                &ln,
                |t, p| {
                    let xv = t.constant(&x);
                    let y = nn::layernorm(t, xv, p)?;
                    probe_loss(t, y, s)
                },
                STEP,
                8,
                s,
            ),
        );

        let heads = [1, 2, 4][s as usize % 3];
        let mut msa = MsaParams::zeros(8, heads).unwrap();
        randomize(&mut msa, 0.6, &mut r);
        let x = random_tensor(&[2, 5, 8], 1.0, &mut r);
        push(
            format!("msa/input/h{heads}/{s}"),
            finite_diff_check(
                |t, v| {
                    let y = nn::msa(t, v, &msa)?;
                    probe_loss(t, y, s)
                },
                &x,
                STEP,
            ),
        );
        push(
            format!("msa/params/h{heads}/{s}"),
            param_fd(
                &msa,
                |t, p| {
                    let xv = t.constant(&x);
                    let y = nn::msa(t, xv, p)?;
                    probe_loss(t, y, s)
                },
                STEP,
                4,
                s,
            ),
        );

        let mut mlp = MlpParams::zeros(6, 2);
        randomize(&mut mlp, 0.8, &mut r);
        let x = random_tensor(&[2, 4, 6], 1.0, &mut r);
        push(
            format!("mlp/input/{s}"),
            finite_diff_check(
                |t, v| {
                    let y = nn::mlp(t, v, &mlp)?;
                    probe_loss(t, y, s)
                },
                &x,
                STEP,
            ),
        );

        let logits = random_tensor(&[4, 5], 3.0, &mut r);
        let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
        push(
            format!("softmax_xent/logits/{s}"),
            finite_diff_check(
                |t, v| {
                    let p = t.softmax(v);
                    let w = probe_loss(t, p, s)?;
                    let ce = t.cross_entropy(v, &labels)?;
                    t.add(w, ce)
                },
                &logits,
                STEP,
            ),
        );

        let recipe = Recipe::ALL[s as usize % 3];
        let kernel = [None, Some(1), Some(3), Some(5), Some(7)][s as usize % 5];
        let mut cfg = LkaConfig::new(6, 3, kernel, (3, 3)).with_recipe(recipe);
        cfg.cls_tokens = (s % 2) as usize;
        let mut ad = init_adapter(&cfg, s).unwrap();
        randomize(&mut ad, 0.7, &mut r);
        let x = random_tensor(&[2, cfg.seq_len(), 6], 1.0, &mut r);
        let tag = format!(
            "{recipe}/{}",
            kernel.map_or("vanilla".into(), |k| format!("k{k}"))
        );
        push(
            format!("adapter/input/{tag}/{s}"),
            finite_diff_check(
                |t, v| {
                    let y = adapter_forward(t, v, &ad, &cfg)?;
                    probe_loss(t, y, s)
                },
                &x,
                STEP,
            ),
        );
        push(
            format!("adapter/params/{tag}/{s}"),
            param_fd(
                &ad,
                |t, p| {
                    let xv = t.constant(&x);
                    let y = adapter_forward(t, xv, p, &cfg)?;
                    probe_loss(t, y, s)
                },
                STEP,
                4,
                s,
            ),
        );

        let (model, mcfg) = block_model(s);
        let lka = model.lka_config();
        let placement = mcfg.placement;
        let x = random_tensor(&[2, mcfg.seq_len(), mcfg.embed_dim], 1.0, &mut r);
        let tag = format!("{}/{}", placement.unwrap().as_str(), lka.recipe);
        push(
            format!("lka_block/input/{tag}/{s}"),
            finite_diff_check(
                |t, v| {
                    let y = block_forward(t, v, &model.blocks[0], placement, &lka)?;
                    probe_loss(t, y, s)
                },
                &x,
                STEP,
            ),
        );
        push(
            format!("lka_block/params/{tag}/{s}"),
            param_fd(
                &model.blocks[0],
                |t, bp| {
                    let xv = t.constant(&x);
                    let y = block_forward(t, xv, bp, placement, &lka)?;
                    probe_loss(t, y, s)
                },
                STEP,
                2,
                s,
            ),
        );

        let images = random_tensor(&[2, 2, 12, 12], 1.0, &mut r);
        let labels = vec![0, 2];
        push(
            format!("model/images/{s}"),
            finite_diff_check(
                |t, v| {
                    let y = model.forward(t, v)?;
                    t.cross_entropy(y, &labels)
                },
                &images,
                STEP,
            ),
        );
    }
    cases
}
