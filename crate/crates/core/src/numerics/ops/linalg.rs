use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::scalar::{gemm, MatView, Real};
use crate::numerics::tensor::{dims, Tensor};

/// `c = a · b` for `a: M×K`, `b: K×P`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, k] = dims(a, "matmul")?;
    let [k2, p] = dims(b, "matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut c = Tensor::zeros(&[m, p]);
    gemm(
        T::one(),
        a.data(),
        MatView::rm(0, m, k),
        b.data(),
        MatView::rm(0, k, p),
        T::zero(),
        c.data_mut(),
        MatView::rm(0, m, p),
    );
    Ok(c)
}

/// Vector-Jacobian products of [`matmul`]: `(g·bᵀ, aᵀ·g)`.
pub fn matmul_vjp<T: Real>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (m, k, p) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut da = Tensor::zeros(&[m, k]);
    gemm(
        T::one(),
        g.data(),
        MatView::rm(0, m, p),
        b.data(),
        MatView::rm(0, k, p).t(),
        T::zero(),
        da.data_mut(),
        MatView::rm(0, m, k),
    );
    let mut db = Tensor::zeros(&[k, p]);
    gemm(
        T::one(),
        a.data(),
        MatView::rm(0, m, k).t(),
        g.data(),
        MatView::rm(0, m, p),
        T::zero(),
        db.data_mut(),
        MatView::rm(0, k, p),
    );
    (da, db)
}

/// Row-wise affine map `x·w + b` over the last axis of `x`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, fin, fout) = linear_dims(x, w, b)?;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = fout;
    let mut data = Vec::with_capacity(rows * fout);
    for _ in 0..rows {
        data.extend_from_slice(b.data());
    }
    let mut y = Tensor::from_vec(&shape, data)?;
    gemm(
        T::one(),
        x.data(),
        MatView::rm(0, rows, fin),
        w.data(),
        MatView::rm(0, fin, fout),
        T::one(),
        y.data_mut(),
        MatView::rm(0, rows, fout),
    );
    Ok(y)
}

fn linear_dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let [fin, fout] = dims(w, "linear")?;
    let [bl] = dims(b, "linear")?;
    let xl = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("linear", "scalar input"))?;
    if xl != fin || bl != fout {
        return Err(Error::shape(
            "linear",
            format!(
                "input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            ),
        ));
    }
    Ok((x.numel() / fin, fin, fout))
}

impl<T: Real> Graph<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        self.push(
            "matmul",
            out,
            &[a, b],
            Box::new(|ctx| {
                let (da, db) = matmul_vjp(ctx.inputs[0], ctx.inputs[1], ctx.grad);
                Ok(vec![Some(da), Some(db)])
            }),
        )
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = linear(self.value(x), self.value(w), self.value(b))?;
        self.push(
            "linear",
            out,
            &[x, w, b],
            Box::new(|ctx| {
                let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
                let (rows, fin, fout) = (x.numel() / w.shape()[0], w.shape()[0], w.shape()[1]);
                let g = ctx.grad;
                let dx = if ctx.needs[0] {
                    let mut dx = Tensor::zeros(x.shape());
                    gemm(
                        T::one(),
                        g.data(),
                        MatView::rm(0, rows, fout),
                        w.data(),
                        MatView::rm(0, fin, fout).t(),
                        T::zero(),
                        dx.data_mut(),
                        MatView::rm(0, rows, fin),
                    );
                    Some(dx)
                } else {
                    None
                };
                let mut dw = Tensor::zeros(w.shape());
                gemm(
                    T::one(),
                    x.data(),
                    MatView::rm(0, rows, fin).t(),
                    g.data(),
                    MatView::rm(0, rows, fout),
                    T::zero(),
                    dw.data_mut(),
                    MatView::rm(0, fin, fout),
                );
                let mut db = Tensor::zeros(&[fout]);
                for row in g.data().chunks_exact(fout) {
                    for (d, &v) in db.data_mut().iter_mut().zip(row) {
                        *d += v;
                    }
                }
                Ok(vec![dx, Some(dw), Some(db)])
            }),
        )
    }

    /// Elementwise sum of equally shaped values.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        self.push(
            "add",
            out,
            &[a, b],
            Box::new(|ctx| Ok(vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())])),
        )
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let out = self.value(x).scale(s);
        self.push(
            "scale",
            out,
            &[x],
            Box::new(move |ctx| Ok(vec![Some(ctx.grad.scale(s))])),
        )
    }

    /// `x + y` where `y` is broadcast over the leading axes of `x`
    /// (`y.shape` must equal a suffix of `x.shape`).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xs, ys) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != ys[..] {
            return Err(Error::shape("add_broadcast", format!("{xs:?} + {ys:?}")));
        }
        let inner = self.value(y).numel();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_exact_mut(inner) {
            for (o, &v) in chunk.iter_mut().zip(self.value(y).data()) {
                *o += v;
            }
        }
        self.push(
            "add_broadcast",
            out,
            &[x, y],
            Box::new(move |ctx| {
                let dy = ctx.needs[1].then(|| {
                    let mut dy = Tensor::zeros(ctx.inputs[1].shape());
                    for chunk in ctx.grad.data().chunks_exact(inner) {
                        for (d, &v) in dy.data_mut().iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    dy
                });
                Ok(vec![Some(ctx.grad.clone()), dy])
            }),
        )
    }

    /// Repeats `x` along a new leading axis of length `n`.
    pub fn tile(&mut self, x: Var, n: usize) -> Result<Var> {
        let v = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(v.shape());
        let inner = v.numel();
        let mut data = Vec::with_capacity(n * inner);
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(&shape, data)?;
        self.push(
            "tile",
            out,
            &[x],
            Box::new(move |ctx| {
                let mut d = Tensor::zeros(ctx.inputs[0].shape());
                for chunk in ctx.grad.data().chunks_exact(inner) {
                    for (a, &b) in d.data_mut().iter_mut().zip(chunk) {
                        *a += b;
                    }
                }
                Ok(vec![Some(d)])
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&id, &b).unwrap(), b);
        let z = t(&[2, 2], &[0.0; 4]);
        assert_eq!(matmul(&z, &b).unwrap(), z);
        // Hand arithmetic: [[1,2],[3,4]]·[[5,6],[7,8]].
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(
            matmul(&a, &b).unwrap(),
            t(&[2, 2], &[19.0, 22.0, 43.0, 50.0])
        );
    }

    #[test]
    fn matmul_dimension_mismatch_names_shapes() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn linear_rows_are_position_independent() {
        // Permuting input rows permutes output rows bitwise.
        let rows = 7;
        let x: Vec<f32> = (0..rows * 33).map(|i| ((i * 37 % 101) as f32 - 50.0) / 17.0).collect();
        let w: Vec<f32> = (0..33 * 19).map(|i| ((i * 53 % 89) as f32 - 44.0) / 31.0).collect();
        let b: Vec<f32> = (0..19).map(|i| i as f32 / 7.0).collect();
        let x = Tensor::from_vec(&[rows, 33], x).unwrap();
        let w = Tensor::from_vec(&[33, 19], w).unwrap();
        let b = Tensor::from_vec(&[19], b).unwrap();
        let y = linear(&x, &w, &b).unwrap();
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let xp: Vec<f32> = perm
            .iter()
            .flat_map(|&r| x.data()[r * 33..(r + 1) * 33].to_vec())
            .collect();
        let yp = linear(&Tensor::from_vec(&[rows, 33], xp).unwrap(), &w, &b).unwrap();
        for (i, &r) in perm.iter().enumerate() {
            assert_eq!(&yp.data()[i * 19..(i + 1) * 19], &y.data()[r * 19..(r + 1) * 19]);
        }
    }
}
