use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::scalar::Real;
use crate::numerics::tensor::{dims, Tensor};

fn check<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<usize> {
    let [d] = dims(gamma, "layer_norm")?;
    let [d2] = dims(beta, "layer_norm")?;
    if x.shape().last() != Some(&d) || d2 != d {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "input {:?}, gamma {:?}, beta {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    Ok(d)
}

/// Normalizes each last-axis row to zero mean and unit population variance,
/// then applies `gamma`, `beta`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let d = check(x, gamma, beta, eps)?;
    let eps = T::of(eps);
    let n = T::of(d as f64);
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_vjp<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = gamma.numel();
    let eps = T::of(eps);
    let n = T::of(d as f64);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for ((row, g), out) in x
        .data()
        .chunks_exact(d)
        .zip(grad.data().chunks_exact(d))
        .zip(dx.data_mut().chunks_exact_mut(d))
    {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        for j in 0..d {
            xhat[j] = (row[j] - mean) * inv;
            dxhat[j] = g[j] * gamma.data()[j];
            dgamma.data_mut()[j] += g[j] * xhat[j];
            dbeta.data_mut()[j] += g[j];
        }
        let m1 = dxhat.iter().copied().sum::<T>() / n;
        let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
        for j in 0..d {
            out[j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
        }
    }
    (dx, dgamma, dbeta)
}

impl<T: Real> Graph<T> {
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let out = layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push(
            "layer_norm",
            out,
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let (dx, dg, db) = layer_norm_vjp(ctx.inputs[0], ctx.inputs[1], ctx.grad, eps);
                Ok(vec![Some(dx), Some(dg), Some(db)])
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    #[test]
    fn constant_row_is_zero() {
        let y = layer_norm(&t(&[3.0; 5]), &t(&[1.0; 5]), &t(&[0.0; 5]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_standardization() {
        let y = layer_norm(&t(&[1.0, 3.0]), &t(&[1.0; 2]), &t(&[0.0; 2]), 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn affine_case_matches_direct_formula() {
        // Direct formula in double precision: mean 2.5, population var 1.25.
        let eps = 1e-5;
        let y = layer_norm(&t(&[1.0, 2.0, 3.0, 4.0]), &t(&[2.0; 4]), &t(&[1.0; 4]), eps).unwrap();
        let sd = (1.25f64 + eps).sqrt();
        for (i, x) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            let expected = 2.0 * (x - 2.5) / sd + 1.0;
            assert!((y.data()[i] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_eps_and_shapes() {
        assert!(layer_norm(&t(&[1.0, 2.0]), &t(&[1.0; 2]), &t(&[0.0; 2]), 0.0).is_err());
        assert!(layer_norm(&t(&[1.0, 2.0]), &t(&[1.0; 3]), &t(&[0.0; 3]), 1e-5).is_err());
    }
}
