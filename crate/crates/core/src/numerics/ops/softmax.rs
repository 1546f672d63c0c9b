use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::scalar::Real;
use crate::numerics::tensor::Tensor;

/// (outer, axis length, inner) strides for reducing along `axis`.
fn split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} for shape {shape:?}"),
        ));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = split(x.shape(), axis)?;
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let m = (0..len).map(|j| d[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for j in 0..len {
                let e = (d[idx(j)] - m).exp();
                d[idx(j)] = e;
                s += e;
            }
            for j in 0..len {
                d[idx(j)] /= s;
            }
        }
    }
    Ok(out)
}

/// `dx = p ⊙ (g − Σ g⊙p)` along `axis`, given the softmax output `p`.
pub fn softmax_vjp<T: Real>(p: &Tensor<T>, g: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = split(p.shape(), axis)?;
    let mut dx = Tensor::zeros(p.shape());
    let (pd, gd) = (p.data(), g.data());
    let dd = dx.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: T = (0..len).map(|j| pd[base + j * inner] * gd[base + j * inner]).sum();
            for j in 0..len {
                let k = base + j * inner;
                dd[k] = pd[k] * (gd[k] - dot);
            }
        }
    }
    Ok(dx)
}

impl<T: Real> Graph<T> {
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax(self.value(x), axis)?;
        self.push(
            "softmax",
            out,
            &[x],
            Box::new(move |ctx| Ok(vec![Some(softmax_vjp(ctx.out, ctx.grad, axis)?)])),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let u = softmax(&Tensor::<f64>::zeros(&[4]), 0).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let p = softmax(&Tensor::<f64>::from_f64(&[2], &[0.0, 2f64.ln()]).unwrap(), 0).unwrap();
        assert!((p.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 2.0 / 3.0).abs() < 1e-15);

        let big = softmax(&Tensor::<f32>::from_f64(&[2], &[1000.0, 1000.0]).unwrap(), 0).unwrap();
        assert_eq!(big.data(), &[0.5, 0.5]);
    }

    #[test]
    fn middle_axis() {
        let x = Tensor::<f64>::from_f64(&[2, 3, 2], &(0..12).map(|i| (i * 7 % 5) as f64).collect::<Vec<_>>())
            .unwrap();
        let p = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|j| p.data()[o * 6 + j * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(softmax(&x, 3).is_err());
    }
}
