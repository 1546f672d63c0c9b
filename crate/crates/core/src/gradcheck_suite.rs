//! Finite-difference checks of every differentiable operation, every network
//! module and the full training loss, all in double precision.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig};
use crate::data::{collate, generate_scene, SceneSpec};
use crate::decoder::{self, DecoderConfig};
use crate::error::Result;
use crate::fusion::{self, FusionMode};
use crate::head::{self, HeadConfig};
use crate::model::{self, ModelConfig};
use crate::numerics::{
    grad_check, grad_check_against, Activation, GradCheckReport, AttentionOptions, AttentionVars, Graph, ParamGrads, ParamSet, Tensor, Var,
};
use crate::objective::{total_loss, LabelMask, LossConfig};
use crate::rng::{hash_str, SplitMix64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    pub batch: usize,
    pub resolution: usize,
    /// Network used for the module and full-pipeline checks. Narrower than
    /// the training default so the whole suite finishes in minutes.
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tolerance: 1e-4,
            batch: 2,
            resolution: 64,
            model: ModelConfig {
                embed_dim: 16,
                backbone: BackboneConfig {
                    channels: [4, 8, 8, 16],
                    blocks_per_stage: 1,
                    seed: 0,
                },
                decoder: DecoderConfig {
                    layers: 2,
                    heads: 2,
                    ffn_hidden: 32,
                },
                head: HeadConfig { upscale_channels: 8 },
                ..ModelConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
    /// Parameter holding the largest error.
    pub worst: String,
    pub seconds: f64,
    pub passed: bool,
}

fn random(shape: &[usize], seed: u64, name: &str, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = SplitMix64::new(hash_str(seed, name));
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect()).expect("shape")
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>>;

/// A scalar test function `⟨f(params), R⟩` with a fixed random `R`.
struct ProjectedCheck {
    name: String,
    params: ParamSet<f64>,
    build: Builder,
}

impl ProjectedCheck {
    fn run(&self, cfg: &GradcheckConfig) -> Result<GradCheckReport> {
        let seed = cfg.seed;
        let name = self.name.clone();
        let f = |p: &ParamSet<f64>| -> Result<(f64, ParamGrads<f64>)> {
            let mut g = Graph::new();
            let out = (self.build)(&mut g, p)?;
            let r = random(g.shape(out), seed, &format!("{name}/projection"), -1.0, 1.0);
            let value = g.value(out).dot(&r);
            Ok((value, g.backward(out, r)?))
        };
        grad_check(f, &self.params, cfg.eps)
    }
}

struct Inputs {
    seed: u64,
    prefix: String,
    params: ParamSet<f64>,
}

impl Inputs {
    fn new(seed: u64, prefix: &str) -> Self {
        Self {
            seed,
            prefix: prefix.to_string(),
            params: ParamSet::new(),
        }
    }

    fn add(self, name: &str, shape: &[usize]) -> Self {
        self.add_range(name, shape, -1.0, 1.0)
    }

    fn add_range(mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> Self {
        let t = random(shape, self.seed, &format!("{}/{name}", self.prefix), lo, hi);
        self.params.insert(name, t).expect("unique input names");
        self
    }

    fn check(self, build: impl Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var> + 'static) -> ProjectedCheck {
        ProjectedCheck {
            name: self.prefix,
            params: self.params,
            build: Box::new(build),
        }
    }
}

fn p(g: &mut Graph<f64>, params: &ParamSet<f64>, name: &str) -> Result<Var> {
    g.param(params, name)
}

fn attention_inputs(seed: u64, name: &str) -> Inputs {
    let mut inp = Inputs::new(seed, name).add("q", &[2, 3, 8]).add("kv", &[2, 5, 8]);
    for w in ["wq", "wk", "wv", "wo"] {
        inp = inp.add(w, &[8, 8]);
    }
    for b in ["bq", "bv", "bo"] {
        inp = inp.add(b, &[8]);
    }
    inp
}

fn attention_vars(g: &mut Graph<f64>, params: &ParamSet<f64>) -> Result<AttentionVars> {
    Ok(AttentionVars {
        wq: p(g, params, "wq")?,
        bq: p(g, params, "bq")?,
        wk: p(g, params, "wk")?,
        wv: p(g, params, "wv")?,
        bv: p(g, params, "bv")?,
        wo: p(g, params, "wo")?,
        bo: p(g, params, "bo")?,
    })
}

fn op_checks(seed: u64) -> Vec<ProjectedCheck> {
    let mut checks = vec![
        Inputs::new(seed, "op/matmul").add("a", &[3, 4]).add("b", &[4, 5]).check(|g, ps| {
            let (a, b) = (p(g, ps, "a")?, p(g, ps, "b")?);
            g.matmul(a, b)
        }),
        Inputs::new(seed, "op/linear").add("x", &[2, 3, 4]).add("w", &[4, 5]).add("b", &[5]).check(|g, ps| {
            let (x, w, b) = (p(g, ps, "x")?, p(g, ps, "w")?, p(g, ps, "b")?);
            g.linear(x, w, b)
        }),
        Inputs::new(seed, "op/add_scale").add("a", &[2, 3]).add("b", &[2, 3]).check(|g, ps| {
            let (a, b) = (p(g, ps, "a")?, p(g, ps, "b")?);
            let s = g.add(a, b)?;
            g.scale(s, 0.7)
        }),
        Inputs::new(seed, "op/add_broadcast_tile").add("x", &[2, 3, 4]).add("y", &[3, 4]).check(|g, ps| {
            let (x, y) = (p(g, ps, "x")?, p(g, ps, "y")?);
            let t = g.tile(y, 2)?;
            let s = g.add(x, t)?;
            g.add_broadcast(s, y)
        }),
        Inputs::new(seed, "op/conv2d").add("x", &[2, 3, 7, 7]).add("w", &[4, 3, 3, 3]).add("b", &[4]).check(|g, ps| {
            let (x, w, b) = (p(g, ps, "x")?, p(g, ps, "w")?, p(g, ps, "b")?);
            g.conv2d(x, w, b, 2, 1)
        }),
        Inputs::new(seed, "op/conv2d_pointwise").add("x", &[1, 3, 5, 5]).add("w", &[2, 3, 1, 1]).add("b", &[2]).check(|g, ps| {
            let (x, w, b) = (p(g, ps, "x")?, p(g, ps, "w")?, p(g, ps, "b")?);
            g.conv2d(x, w, b, 1, 0)
        }),
        Inputs::new(seed, "op/conv_transpose2d").add("x", &[2, 3, 4, 4]).add("w", &[3, 2, 2, 2]).add("b", &[2]).check(|g, ps| {
            let (x, w, b) = (p(g, ps, "x")?, p(g, ps, "w")?, p(g, ps, "b")?);
            g.conv_transpose2d(x, w, b, 2)
        }),
        Inputs::new(seed, "op/conv_transpose2d_k3").add("x", &[1, 2, 3, 3]).add("w", &[2, 3, 3, 3]).add("b", &[3]).check(|g, ps| {
            let (x, w, b) = (p(g, ps, "x")?, p(g, ps, "w")?, p(g, ps, "b")?);
            g.conv_transpose2d(x, w, b, 2)
        }),
        Inputs::new(seed, "op/bilinear_resize").add("x", &[1, 2, 3, 5]).add("y", &[1, 2, 8, 8]).check(|g, ps| {
            let (x, y) = (p(g, ps, "x")?, p(g, ps, "y")?);
            let up = g.bilinear_resize(x, 7, 4)?;
            let down = g.bilinear_resize(y, 7, 4)?;
            g.add(up, down)
        }),
        Inputs::new(seed, "op/softmax").add_range("x", &[2, 3, 4], -2.0, 2.0).check(|g, ps| {
            let x = p(g, ps, "x")?;
            let a = g.softmax(x, 2)?;
            let b = g.softmax(x, 1)?;
            g.add(a, b)
        }),
        Inputs::new(seed, "op/layer_norm").add("x", &[2, 3, 6]).add("gamma", &[6]).add("beta", &[6]).check(|g, ps| {
            let (x, ga, be) = (p(g, ps, "x")?, p(g, ps, "gamma")?, p(g, ps, "beta")?);
            g.layer_norm(x, ga, be, 1e-5)
        }),
        Inputs::new(seed, "op/gelu").add_range("x", &[3, 5], -3.0, 3.0).check(|g, ps| {
            let x = p(g, ps, "x")?;
            g.activation(x, Activation::Gelu)
        }),
        // Inputs kept away from the kink at zero.
        Inputs::new(seed, "op/relu").add_range("x", &[3, 5], 0.1, 1.0).add_range("y", &[3, 5], -1.0, -0.1).check(|g, ps| {
            let (x, y) = (p(g, ps, "x")?, p(g, ps, "y")?);
            let s = g.add(x, y)?;
            let s = g.add(s, y)?;
            let a = g.activation(x, Activation::Relu)?;
            let b = g.activation(y, Activation::Relu)?;
            let c = g.add(a, b)?;
            g.add(c, s)
        }),
        Inputs::new(seed, "op/sequence_reshape_concat").add("x", &[2, 3, 2, 3]).add("y", &[2, 2, 2, 3]).check(|g, ps| {
            let (x, y) = (p(g, ps, "x")?, p(g, ps, "y")?);
            let s = g.map_to_sequence(x)?;
            let sq = g.activation(s, Activation::Gelu)?;
            let m = g.sequence_to_map(sq, 2, 3)?;
            let cat = g.concat_channels(&[m, y])?;
            g.reshape(cat, &[2, 30])
        }),
        Inputs::new(seed, "op/channel_inner_product").add("u", &[2, 3, 4, 4]).add("m", &[2, 5, 3]).check(|g, ps| {
            let (u, m) = (p(g, ps, "u")?, p(g, ps, "m")?);
            g.channel_inner_product(u, m)
        }),
    ];
    for (name, canonical) in [("op/attention", false), ("op/attention_canonical", true)] {
        checks.push(attention_inputs(seed, name).check(move |g, ps| {
            let (q, kv) = (p(g, ps, "q")?, p(g, ps, "kv")?);
            let w = attention_vars(g, ps)?;
            let opts = AttentionOptions {
                canonical_keys: canonical,
                ..AttentionOptions::heads(2)
            };
            Ok(g.multi_head_attention(q, kv, kv, &w, &opts)?.0)
        }));
    }
    checks
}

fn module_checks(cfg: &GradcheckConfig, n: usize) -> Result<Vec<ProjectedCheck>> {
    let m = cfg.model.clone();
    let (b, res, d) = (cfg.batch, cfg.resolution, m.embed_dim);
    let ch = m.backbone.channels;
    let seed = cfg.seed;
    let mut out = Vec::new();

    let mut params = backbone::init_backbone::<f64>(&m.backbone)?;
    params.insert("input", random(&[b, 3, res, res], seed, "backbone/input", 0.0, 1.0))?;
    let bcfg = m.backbone.clone();
    out.push(ProjectedCheck {
        name: "module/backbone".into(),
        params,
        build: Box::new(move |g, ps| {
            let x = p(g, ps, "input")?;
            let pyr = backbone::forward_pyramid(g, ps, &bcfg, x)?;
            Ok(pyr.levels[3])
        }),
    });

    for mode in [FusionMode::MultiScale, FusionMode::Bypass] {
        let mut params = fusion::init_fusion::<f64>(&ch, d, mode, seed)?;
        let h1 = res / 4;
        for (i, &c) in ch.iter().enumerate() {
            params.insert(format!("level{i}"), random(&[b, c, h1 >> i, h1 >> i], seed, &format!("fusion/level{i}"), -1.0, 1.0))?;
        }
        out.push(ProjectedCheck {
            name: format!("module/fusion_{}", if mode == FusionMode::Bypass { "bypass" } else { "multiscale" }),
            params,
            build: Box::new(move |g, ps| {
                let levels = (0..4).map(|i| p(g, ps, &format!("level{i}"))).collect::<Result<Vec<_>>>()?;
                let pyr = backbone::FeaturePyramid {
                    levels: levels.try_into().expect("four levels"),
                };
                fusion::run_fusion(g, ps, &pyr, mode)
            }),
        });
    }

    let mut params = decoder::init_decoder::<f64>(&m.decoder, n, d, seed)?;
    let h1 = res / 4;
    params.insert("fused", random(&[b, d, h1 / 2, h1 / 2], seed, "decoder/fused", -1.0, 1.0))?;
    let dcfg = m.decoder.clone();
    out.push(ProjectedCheck {
        name: "module/decoder".into(),
        params,
        build: Box::new(move |g, ps| {
            let f = p(g, ps, "fused")?;
            let o = decoder::run_decoder(g, ps, &dcfg, f, None)?;
            // Both outputs enter the projection: face rows then token rows.
            let seq = g.map_to_sequence(o.face)?;
            let hw = g.shape(seq)[1];
            let seq = g.reshape(seq, &[b, hw, d, 1])?;
            let tokens = g.reshape(o.tokens, &[b, n, d, 1])?;
            g.concat_channels(&[seq, tokens])
        }),
    });

    let mut params = head::init_head::<f64>(&m.head, d, seed)?;
    params.insert("face", random(&[b, d, 4, 4], seed, "head/face", -1.0, 1.0))?;
    params.insert("tokens", random(&[b, n, d], seed, "head/tokens", -1.0, 1.0))?;
    out.push(ProjectedCheck {
        name: "module/head".into(),
        params,
        build: Box::new(|g, ps| {
            let f = p(g, ps, "face")?;
            let t = p(g, ps, "tokens")?;
            let u = head::upscale(g, ps, f)?;
            head::predict_masks(g, ps, u, t)
        }),
    });
    Ok(out)
}

/// Scene batch used by the loss and pipeline checks.
fn scene_batch(cfg: &GradcheckConfig) -> Result<(Tensor<f64>, LabelMask, usize)> {
    let spec = SceneSpec {
        resolution: cfg.resolution,
        seed: cfg.seed,
        ..SceneSpec::default()
    }
    .with_tail_probabilities(&[1.0, 1.0, 1.0])?;
    let samples = (0..cfg.batch as u64).map(|i| generate_scene(&spec, i)).collect::<Result<Vec<_>>>()?;
    let (images, masks) = collate(&samples.iter().collect::<Vec<_>>())?;
    Ok((images.cast(), masks, spec.classes.len()))
}

fn timed(name: &str, tol: f64, f: impl FnOnce() -> Result<GradCheckReport>) -> Result<CheckRow> {
    let t = Instant::now();
    let r = f()?;
    let err = r.max_rel_error;
    let worst = r
        .params
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .map_or_else(String::new, |p| p.name.clone());
    Ok(CheckRow {
        name: name.to_string(),
        max_rel_error: err,
        coords: r.params.iter().map(|p| p.checked).sum(),
        worst,
        seconds: t.elapsed().as_secs_f64(),
        passed: err < tol,
    })
}

/// Runs every check, reporting each row to `progress` as it completes.
pub fn run_gradcheck_suite(cfg: &GradcheckConfig, mut progress: impl FnMut(&CheckRow)) -> Result<Vec<CheckRow>> {
    cfg.model.validate()?;
    let mut rows = Vec::new();
    let mut push = |row: CheckRow, rows: &mut Vec<CheckRow>| {
        progress(&row);
        rows.push(row);
    };
    let (images, labels, n) = scene_batch(cfg)?;

    for check in op_checks(cfg.seed).into_iter().chain(module_checks(cfg, n)?) {
        let row = timed(&check.name, cfg.tolerance, || check.run(cfg))?;
        push(row, &mut rows);
    }

    let loss_cfg = LossConfig::default();
    let mut logits = ParamSet::new();
    logits.insert("logits", random(&[cfg.batch, n, 8, 8], cfg.seed, "loss/logits", -3.0, 3.0))?;
    let small_labels = LabelMask::new(
        cfg.batch,
        8,
        8,
        (0..cfg.batch * 64).map(|i| ((i * 7 + i / 5) % n) as u8).collect(),
    )?;
    let row = timed("module/objective", cfg.tolerance, || {
        let f = |ps: &ParamSet<f64>| {
            let out = total_loss(ps.value("logits")?, &small_labels, &loss_cfg)?;
            Ok((out.total, [("logits".to_string(), out.grad)].into_iter().collect()))
        };
        grad_check(f, &logits, cfg.eps)
    })?;
    push(row, &mut rows);

    let params = model::init_model::<f64>(&cfg.model, n)?;
    let row = timed("pipeline/total_loss", cfg.tolerance, || {
        let logits = |g: &mut Graph<f64>, ps: &ParamSet<f64>| -> Result<Var> {
            let x = g.constant(images.clone());
            Ok(model::forward(g, ps, &cfg.model, x, None)?.logits)
        };
        let mut g = Graph::new();
        let out = logits(&mut g, &params)?;
        let loss = total_loss(g.value(out), &labels, &loss_cfg)?;
        let analytic = g.backward(out, loss.grad)?;
        let value = |ps: &ParamSet<f64>| {
            let mut g = Graph::new();
            let out = logits(&mut g, ps)?;
            Ok(total_loss(g.value(out), &labels, &loss_cfg)?.total)
        };
        grad_check_against(value, &analytic, &params, cfg.eps)
    })?;
    push(row, &mut rows);
    Ok(rows)
}
