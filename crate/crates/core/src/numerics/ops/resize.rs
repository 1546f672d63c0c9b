use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::scalar::Real;
use crate::numerics::tensor::{dims, Tensor};

/// Interpolation taps along one axis: `(lo, hi, frac)` per output index.
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn resize_dims<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<[usize; 4]> {
    let d = dims::<4, T>(x, "bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape(
            "bilinear_resize",
            format!("target {out_h}x{out_w}"),
        ));
    }
    Ok(d)
}

/// Bilinear resize of `B×C×H×W` with half-pixel centers (align-corners off)
/// and edge clamping.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = resize_dims(x, out_h, out_w)?;
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let mut out = Tensor::zeros(&[b, c, out_h, out_w]);
    for (src, dst) in x
        .data()
        .chunks_exact(h * w)
        .zip(out.data_mut().chunks_exact_mut(out_h * out_w))
    {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let (a, bb) = (src[y0 * w + x0], src[y0 * w + x1]);
                let (cc, d) = (src[y1 * w + x0], src[y1 * w + x1]);
                // Lerp form keeps constant fields exactly constant.
                let top = a + fx * (bb - a);
                let bottom = cc + fx * (d - cc);
                dst[oy * out_w + ox] = top + fy * (bottom - top);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_resize`]: scatters `grad` back with the same weights.
pub fn bilinear_resize_vjp<T: Real>(
    in_shape: &[usize],
    grad: &Tensor<T>,
) -> Result<Tensor<T>> {
    let &[b, c, h, w] = in_shape else {
        return Err(Error::shape("bilinear_resize", format!("{in_shape:?}")));
    };
    let [_, _, out_h, out_w] = dims::<4, T>(grad, "bilinear_resize")?;
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let mut dx = Tensor::zeros(&[b, c, h, w]);
    for (g, d) in grad
        .data()
        .chunks_exact(out_h * out_w)
        .zip(dx.data_mut().chunks_exact_mut(h * w))
    {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (wy1, wy0) = (T::of(fy), T::of(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (wx1, wx0) = (T::of(fx), T::of(1.0 - fx));
                let gv = g[oy * out_w + ox];
                d[y0 * w + x0] += gv * wy0 * wx0;
                d[y0 * w + x1] += gv * wy0 * wx1;
                d[y1 * w + x0] += gv * wy1 * wx0;
                d[y1 * w + x1] += gv * wy1 * wx1;
            }
        }
    }
    Ok(dx)
}

impl<T: Real> Graph<T> {
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = bilinear_resize(self.value(x), out_h, out_w)?;
        self.push(
            "bilinear_resize",
            out,
            &[x],
            Box::new(|ctx| {
                Ok(vec![Some(bilinear_resize_vjp(
                    ctx.inputs[0].shape(),
                    ctx.grad,
                )?)])
            }),
        )
    }
}
