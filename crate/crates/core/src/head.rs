//! Output head: transposed-convolution upscaler and token-conditioned
//! per-class mask prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::scalar::{gemm, MatView};
use crate::numerics::tensor::dims;
use crate::numerics::{Activation, Graph, Initializer, ParamSet, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Channel width of the upscaled map and of each class embedding.
    pub upscale_channels: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            upscale_channels: 32,
        }
    }
}

const TOKEN_MLP_LAYERS: usize = 3;

pub fn init_head<T: Real>(cfg: &HeadConfig, dim: usize, seed: u64) -> Result<ParamSet<T>> {
    if cfg.upscale_channels == 0 || dim < 2 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "head needs even dim and positive upscale channels, got dim {dim}, channels {}",
            cfg.upscale_channels
        )));
    }
    let c = cfg.upscale_channels;
    let mut params = ParamSet::new();
    let mut init = Initializer::new(seed, &mut params);
    init.he_uniform("head.up0.weight", &[dim, dim / 2, 2, 2], dim)?;
    init.zeros("head.up0.bias", &[dim / 2])?;
    init.he_uniform("head.up1.weight", &[dim / 2, c, 2, 2], dim / 2)?;
    init.zeros("head.up1.bias", &[c])?;
    for l in 0..TOKEN_MLP_LAYERS {
        let out = if l + 1 == TOKEN_MLP_LAYERS { c } else { dim };
        init.glorot_uniform(&format!("head.token_mlp.fc{l}.weight"), dim, out)?;
        init.zeros(&format!("head.token_mlp.fc{l}.bias"), &[out])?;
    }
    Ok(params)
}

/// Upscales `B×D×H₁×W₁` by 4 to `B×C″×4H₁×4W₁` with two stride-2
/// transposed convolutions.
pub fn upscale<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, fprime: Var) -> Result<Var> {
    let w0 = g.param(params, "head.up0.weight")?;
    let b0 = g.param(params, "head.up0.bias")?;
    let w1 = g.param(params, "head.up1.weight")?;
    let b1 = g.param(params, "head.up1.bias")?;
    if g.shape(fprime).len() != 4 || g.shape(fprime)[1] != g.shape(w0)[0] {
        return Err(Error::shape(
            "upscale",
            format!("input {:?} vs weight {:?}", g.shape(fprime), g.shape(w0)),
        ));
    }
    let x = g.conv_transpose2d(fprime, w0, b0, 2)?;
    let x = g.activation(x, Activation::Gelu)?;
    g.conv_transpose2d(x, w1, b1, 2)
}

/// Per-class embeddings `B×N×C″` from refined tokens `B×N×D`.
pub fn token_mlp<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, tokens: Var) -> Result<Var> {
    let mut x = tokens;
    for l in 0..TOKEN_MLP_LAYERS {
        let w = g.param(params, &format!("head.token_mlp.fc{l}.weight"))?;
        let b = g.param(params, &format!("head.token_mlp.fc{l}.bias"))?;
        x = g.linear(x, w, b)?;
        if l + 1 < TOKEN_MLP_LAYERS {
            x = g.activation(x, Activation::Gelu)?;
        }
    }
    Ok(x)
}

/// `S[b,i,h,w] = Σ_c u[b,c,h,w] · m[b,i,c]` for `u: B×C×H×W`, `m: B×N×C`.
/// Class `i` reads only row `i` of `m`.
pub fn channel_inner_product<T: Real>(u: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims(u, "predict_masks")?;
    let [bm, n, cm] = dims(m, "predict_masks")?;
    if b != bm || c != cm {
        return Err(Error::shape(
            "predict_masks",
            format!("upscaled map {:?} vs class embeddings {:?}", u.shape(), m.shape()),
        ));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(&[b, n, h, w]);
    for bi in 0..b {
        gemm(
            T::one(),
            m.data(),
            MatView::rm(bi * n * c, n, c),
            u.data(),
            MatView::rm(bi * c * hw, c, hw),
            T::zero(),
            out.data_mut(),
            MatView::rm(bi * n * hw, n, hw),
        );
    }
    Ok(out)
}

fn channel_inner_product_vjp<T: Real>(
    u: &Tensor<T>,
    m: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (b, c) = (u.shape()[0], u.shape()[1]);
    let hw = u.shape()[2] * u.shape()[3];
    let n = m.shape()[1];
    let mut du = Tensor::zeros(u.shape());
    let mut dm = Tensor::zeros(m.shape());
    for bi in 0..b {
        let gv = MatView::rm(bi * n * hw, n, hw);
        gemm(
            T::one(),
            m.data(),
            MatView::rm(bi * n * c, n, c).t(),
            grad.data(),
            gv,
            T::zero(),
            du.data_mut(),
            MatView::rm(bi * c * hw, c, hw),
        );
        gemm(
            T::one(),
            grad.data(),
            gv,
            u.data(),
            MatView::rm(bi * c * hw, c, hw).t(),
            T::zero(),
            dm.data_mut(),
            MatView::rm(bi * n * c, n, c),
        );
    }
    (du, dm)
}

impl<T: Real> Graph<T> {
    pub fn channel_inner_product(&mut self, u: Var, m: Var) -> Result<Var> {
        let out = channel_inner_product(self.value(u), self.value(m))?;
        self.push(
            "channel_inner_product",
            out,
            &[u, m],
            Box::new(|ctx| {
                let (du, dm) = channel_inner_product_vjp(ctx.inputs[0], ctx.inputs[1], ctx.grad);
                Ok(vec![Some(du), Some(dm)])
            }),
        )
    }
}

/// Segmentation logits `B×N×H×W` from the upscaled map and refined tokens.
pub fn predict_masks<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet<T>,
    u: Var,
    tokens: Var,
) -> Result<Var> {
    let m = token_mlp(g, params, tokens)?;
    g.channel_inner_product(u, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upscale_quadruples_resolution() {
        let params = init_head::<f32>(&HeadConfig::default(), 16, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 16, 16, 16], 0.1));
        let u = upscale(&mut g, &params, x).unwrap();
        assert_eq!(g.shape(u), &[1, 32, 64, 64]);

        let z = g.constant(Tensor::zeros(&[1, 16, 4, 4]));
        let u = upscale(&mut g, &params, z).unwrap();
        assert!(g.value(u).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn basis_vector_selects_channel() {
        let u = Tensor::<f64>::from_vec(&[1, 3, 2, 2], (0..12).map(|i| i as f64 * 0.5 - 1.0).collect()).unwrap();
        let m = Tensor::<f64>::from_f64(&[1, 2, 3], &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let s = channel_inner_product(&u, &m).unwrap();
        assert_eq!(&s.data()[0..4], &u.data()[4..8]);
        assert_eq!(&s.data()[4..8], &u.data()[8..12]);
        let s0 = channel_inner_product(&Tensor::zeros(&[1, 3, 2, 2]), &m).unwrap();
        assert!(s0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_logits() {
        // u channels: [[1,2],[3,4]] and [[0,1],[-1,2]]; m = [[2,-1],[0.5,3]].
        let u = Tensor::<f64>::from_f64(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 0.0, 1.0, -1.0, 2.0]).unwrap();
        let m = Tensor::<f64>::from_f64(&[1, 2, 2], &[2.0, -1.0, 0.5, 3.0]).unwrap();
        let s = channel_inner_product(&u, &m).unwrap();
        assert_eq!(s.data(), &[2.0, 3.0, 7.0, 6.0, 0.5, 4.0, -1.5, 8.0]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let u = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let m = Tensor::<f64>::zeros(&[1, 2, 4]);
        assert!(matches!(channel_inner_product(&u, &m), Err(Error::Shape { .. })));
    }
}
