//! Class-token transformer decoder.
//!
//! Each layer refines the class tokens with self-attention and
//! token→face cross-attention, then lets the face tokens attend back to the
//! refined class tokens. Every sublayer is followed by a residual add and a
//! layer norm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    Activation, AttentionOptions, AttentionVars, Graph, Initializer, ParamSet, Real, Tensor, Var,
};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 8,
            ffn_hidden: 1024,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embedding dim {dim} is not divisible by {} heads",
                self.heads
            )));
        }
        if !dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "embedding dim {dim} must be divisible by 4 for 2-D positional encodings"
            )));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::Config("ffn_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// The three attention components of a decoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    TokenSelf,
    TokenToFace,
    FaceToToken,
}

impl AttentionKind {
    fn prefix(self) -> &'static str {
        match self {
            AttentionKind::TokenSelf => "self_attn",
            AttentionKind::TokenToFace => "token_to_face",
            AttentionKind::FaceToToken => "face_to_token",
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionRecord<T> {
    pub layer: usize,
    pub kind: AttentionKind,
    /// `B×heads×Lq×Lk`.
    pub probs: Tensor<T>,
}

/// Caller-owned recorder for attention maps and interventions.
#[derive(Clone, Debug, Default)]
pub struct Inspector<T> {
    pub attention: Vec<AttentionRecord<T>>,
    /// Raw token→face attention output (`B×N×D`) per layer, before the
    /// residual add.
    pub token_to_face_outputs: Vec<Tensor<T>>,
    /// Class tokens whose token→face attention output is zeroed.
    pub zero_token_to_face: Vec<usize>,
}

impl<T> Inspector<T> {
    pub fn new() -> Self {
        Self {
            attention: Vec::new(),
            token_to_face_outputs: Vec::new(),
            zero_token_to_face: Vec::new(),
        }
    }
}

/// 2-D sinusoidal encoding, `h·w × d`. The first `d/2` channels encode the
/// row and the rest the column; within each half channel `2j` is
/// `sin(pos·ω_j)` and `2j+1` is `cos(pos·ω_j)` with `ω_j = 10000^(−2j/(d/2))`.
pub fn make_face_positional_encoding<T: Real>(h: usize, w: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "positional encoding dim {d} must be a positive multiple of 4"
        )));
    }
    let half = d / 2;
    let mut data = Vec::with_capacity(h * w * d);
    for r in 0..h {
        for c in 0..w {
            for (pos, _) in [(r, 0), (c, 1)] {
                for j in 0..half / 2 {
                    let omega = 10000f64.powf(-((2 * j) as f64) / half as f64);
                    let a = pos as f64 * omega;
                    data.push(T::of(a.sin()));
                    data.push(T::of(a.cos()));
                }
            }
        }
    }
    Tensor::from_vec(&[h * w, d], data)
}

fn layer_prefix(l: usize) -> String {
    format!("decoder.layer{l}")
}

fn init_attention<T: Real>(init: &mut Initializer<'_, T>, prefix: &str, d: usize) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        init.glorot_uniform(&format!("{prefix}.{p}.weight"), d, d)?;
        // A key bias shifts all scores of a query equally and cancels in
        // the softmax, so the key projection has none.
        if p != "k" {
            init.zeros(&format!("{prefix}.{p}.bias"), &[d])?;
        }
    }
    Ok(())
}

fn init_ffn<T: Real>(init: &mut Initializer<'_, T>, prefix: &str, d: usize, hidden: usize) -> Result<()> {
    init.glorot_uniform(&format!("{prefix}.fc1.weight"), d, hidden)?;
    init.zeros(&format!("{prefix}.fc1.bias"), &[hidden])?;
    init.glorot_uniform(&format!("{prefix}.fc2.weight"), hidden, d)?;
    init.zeros(&format!("{prefix}.fc2.bias"), &[d])
}

pub fn init_decoder<T: Real>(
    cfg: &DecoderConfig,
    num_classes: usize,
    dim: usize,
    seed: u64,
) -> Result<ParamSet<T>> {
    cfg.validate(dim)?;
    if num_classes == 0 {
        return Err(Error::Config("need at least one class".into()));
    }
    let mut params = ParamSet::new();
    let mut init = Initializer::new(seed, &mut params);
    init.uniform("decoder.tokens", &[num_classes, dim], 1.0)?;
    init.uniform("decoder.token_pe", &[num_classes, dim], 0.1)?;
    for l in 0..cfg.layers {
        let p = layer_prefix(l);
        for kind in [
            AttentionKind::TokenSelf,
            AttentionKind::TokenToFace,
            AttentionKind::FaceToToken,
        ] {
            init_attention(&mut init, &format!("{p}.{}", kind.prefix()), dim)?;
        }
        init_ffn(&mut init, &format!("{p}.token_ffn"), dim, cfg.ffn_hidden)?;
        init_ffn(&mut init, &format!("{p}.face_ffn"), dim, cfg.ffn_hidden)?;
        for n in 1..=5 {
            init.constant(&format!("{p}.norm{n}.gamma"), &[dim], 1.0)?;
            init.zeros(&format!("{p}.norm{n}.beta"), &[dim])?;
        }
    }
    Ok(params)
}

fn attention_vars<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, prefix: &str) -> Result<AttentionVars> {
    let mut v = |s: &str| g.param(params, &format!("{prefix}.{s}"));
    Ok(AttentionVars {
        wq: v("q.weight")?,
        bq: v("q.bias")?,
        wk: v("k.weight")?,
        wv: v("v.weight")?,
        bv: v("v.bias")?,
        wo: v("o.weight")?,
        bo: v("o.bias")?,
    })
}

fn ffn<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, prefix: &str, x: Var) -> Result<Var> {
    let w1 = g.param(params, &format!("{prefix}.fc1.weight"))?;
    let b1 = g.param(params, &format!("{prefix}.fc1.bias"))?;
    let w2 = g.param(params, &format!("{prefix}.fc2.weight"))?;
    let b2 = g.param(params, &format!("{prefix}.fc2.bias"))?;
    let h = g.linear(x, w1, b1)?;
    let h = g.activation(h, Activation::Gelu)?;
    g.linear(h, w2, b2)
}

fn add_norm<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    prefix: &str,
    x: Var,
    update: Var,
) -> Result<Var> {
    let s = g.add(x, update)?;
    let gamma = g.param(params, &format!("{prefix}.gamma"))?;
    let beta = g.param(params, &format!("{prefix}.beta"))?;
    g.layer_norm(s, gamma, beta, LN_EPS)
}

/// One decoder layer over `face: B×L×D` and `tokens: B×N×D`.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    layer: usize,
    heads: usize,
    face: Var,
    tokens: Var,
    mut inspector: Option<&mut Inspector<T>>,
) -> Result<(Var, Var)> {
    let (fs, ts) = (g.shape(face).to_vec(), g.shape(tokens).to_vec());
    if fs.len() != 3 || ts.len() != 3 || fs[0] != ts[0] || fs[2] != ts[2] {
        return Err(Error::shape(
            "decoder_layer",
            format!("face {fs:?} vs tokens {ts:?}"),
        ));
    }
    let p = layer_prefix(layer);
    let record = |kind: AttentionKind, probs: Tensor<T>, insp: &mut Option<&mut Inspector<T>>| {
        if let Some(i) = insp.as_deref_mut() {
            i.attention.push(AttentionRecord { layer, kind, probs });
        }
    };

    // Keys are class tokens: reduce over them order-independently so the
    // layer is exactly equivariant to class permutations.
    let over_tokens = AttentionOptions {
        heads,
        canonical_keys: true,
        zeroed_queries: Vec::new(),
    };

    let w = attention_vars(g, params, &format!("{p}.self_attn"))?;
    let (sa, probs) = g.multi_head_attention(tokens, tokens, tokens, &w, &over_tokens)?;
    record(AttentionKind::TokenSelf, probs, &mut inspector);
    let tokens = add_norm(g, params, &format!("{p}.norm1"), tokens, sa)?;

    let w = attention_vars(g, params, &format!("{p}.token_to_face"))?;
    let t2f_opts = AttentionOptions {
        heads,
        canonical_keys: false,
        zeroed_queries: inspector
            .as_deref()
            .map(|i| i.zero_token_to_face.clone())
            .unwrap_or_default(),
    };
    let (ca, probs) = g.multi_head_attention(tokens, face, face, &w, &t2f_opts)?;
    record(AttentionKind::TokenToFace, probs, &mut inspector);
    if let Some(i) = inspector.as_deref_mut() {
        i.token_to_face_outputs.push(g.value(ca).clone());
    }
    let tokens = add_norm(g, params, &format!("{p}.norm2"), tokens, ca)?;

    let tf = ffn(g, params, &format!("{p}.token_ffn"), tokens)?;
    let tokens = add_norm(g, params, &format!("{p}.norm3"), tokens, tf)?;

    let w = attention_vars(g, params, &format!("{p}.face_to_token"))?;
    let (fa, probs) = g.multi_head_attention(face, tokens, tokens, &w, &over_tokens)?;
    record(AttentionKind::FaceToToken, probs, &mut inspector);
    let face = add_norm(g, params, &format!("{p}.norm4"), face, fa)?;

    let ff = ffn(g, params, &format!("{p}.face_ffn"), face)?;
    let face = add_norm(g, params, &format!("{p}.norm5"), face, ff)?;
    Ok((face, tokens))
}

/// Decoder output: refined class tokens `B×N×D` and face map `B×D×H₁×W₁`.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    pub tokens: Var,
    pub face: Var,
}

/// Runs the full decoder on a fused map `B×D×H₁×W₁`.
pub fn run_decoder<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    cfg: &DecoderConfig,
    fused: Var,
    mut inspector: Option<&mut Inspector<T>>,
) -> Result<DecoderOutput> {
    let shape = g.shape(fused).to_vec();
    let [b, d, h, w] = shape[..] else {
        return Err(Error::shape("run_decoder", format!("fused map {shape:?}")));
    };
    cfg.validate(d)?;
    let token_shape = params.value("decoder.tokens")?.shape().to_vec();
    if token_shape[1] != d {
        return Err(Error::shape(
            "run_decoder",
            format!("fused dim {d} vs class tokens {token_shape:?}"),
        ));
    }
    let seq = g.map_to_sequence(fused)?;
    let pe = g.constant(make_face_positional_encoding(h, w, d)?);
    let mut face = g.add_broadcast(seq, pe)?;

    let tokens = g.param(params, "decoder.tokens")?;
    let token_pe = g.param(params, "decoder.token_pe")?;
    let tokens = g.add(tokens, token_pe)?;
    let mut tokens = g.tile(tokens, b)?;

    for l in 0..cfg.layers {
        (face, tokens) = decoder_layer(g, params, l, cfg.heads, face, tokens, inspector.as_deref_mut())?;
    }
    let face = g.sequence_to_map(face, h, w)?;
    Ok(DecoderOutput { tokens, face })
}
