use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::scalar::Real;
use crate::numerics::tensor::{dims, Tensor};

/// `B×C×H×W` → `B×(H·W)×C`.
pub fn map_to_sequence<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims(x, "map_to_sequence")?;
    Ok(transpose_last2(x.data(), b, c, h * w, &[b, h * w, c]))
}

/// `B×L×C` → `B×C×H×W` with `L = H·W`.
pub fn sequence_to_map<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [b, l, c] = dims(x, "sequence_to_map")?;
    if l != h * w {
        return Err(Error::shape(
            "sequence_to_map",
            format!("length {l} is not {h}x{w}"),
        ));
    }
    Ok(transpose_last2(x.data(), b, l, c, &[b, c, h, w]))
}

/// Transposes each `rows×cols` matrix in a batch.
fn transpose_last2<T: Real>(src: &[T], b: usize, rows: usize, cols: usize, shape: &[usize]) -> Tensor<T> {
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        let s = &src[bi * rows * cols..][..rows * cols];
        let d = &mut out[bi * rows * cols..][..rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    Tensor::from_vec(shape, out).expect("transpose preserves length")
}

impl<T: Real> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(
            "reshape",
            out,
            &[x],
            Box::new(|ctx| Ok(vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape())?)])),
        )
    }

    pub fn map_to_sequence(&mut self, x: Var) -> Result<Var> {
        let out = map_to_sequence(self.value(x))?;
        self.push(
            "map_to_sequence",
            out,
            &[x],
            Box::new(|ctx| {
                let s = ctx.inputs[0].shape();
                Ok(vec![Some(sequence_to_map(ctx.grad, s[2], s[3])?)])
            }),
        )
    }

    pub fn sequence_to_map(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let out = sequence_to_map(self.value(x), h, w)?;
        self.push(
            "sequence_to_map",
            out,
            &[x],
            Box::new(|ctx| Ok(vec![Some(map_to_sequence(ctx.grad)?)])),
        )
    }

    /// Concatenates `B×Cᵢ×H×W` maps along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let [b, _, h, w] = first[..] else {
            return Err(Error::shape("concat_channels", format!("{first:?}")));
        };
        let mut chans = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 4 || s[0] != b || s[2] != h || s[3] != w {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{s:?} vs {first:?}"),
                ));
            }
            chans.push(s[1]);
        }
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for (&x, &c) in xs.iter().zip(&chans) {
                data.extend_from_slice(&self.value(x).data()[bi * c * plane..][..c * plane]);
            }
        }
        let out = Tensor::from_vec(&[b, total, h, w], data)?;
        self.push(
            "concat_channels",
            out,
            xs,
            Box::new(move |ctx| {
                let mut grads: Vec<Vec<T>> = chans.iter().map(|&c| Vec::with_capacity(b * c * plane)).collect();
                let g = ctx.grad.data();
                let mut off = 0;
                for _ in 0..b {
                    for (gi, &c) in grads.iter_mut().zip(&chans) {
                        gi.extend_from_slice(&g[off..off + c * plane]);
                        off += c * plane;
                    }
                }
                grads
                    .into_iter()
                    .zip(&chans)
                    .map(|(d, &c)| Ok(Some(Tensor::from_vec(&[b, c, h, w], d)?)))
                    .collect()
            }),
        )
    }
}
