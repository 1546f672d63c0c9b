//! 2-D convolution (cross-correlation, zero padding) and its transpose,
//! both lowered to GEMM through im2col / col2im.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::scalar::{gemm, MatView, Real};
use crate::numerics::tensor::{dims, Tensor};

/// Geometry of a forward convolution from a `cin × h × w` map to a
/// `cout × ho × wo` map.
#[derive(Clone, Copy, Debug)]
struct Geom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(
        op: &'static str,
        batch: usize,
        (cin, h, w): (usize, usize, usize),
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if k == 0 || stride == 0 {
            return Err(Error::shape(op, format!("kernel {k}, stride {stride}")));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                op,
                format!("kernel {k} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.cout * self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &Geom, cols: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + ih as usize) * g.w..][..g.w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back onto the input map.
fn col2im<T: Real>(cols: &[T], g: &Geom, x: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + ih as usize) * g.w..][..g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Geom> {
    let [batch, cin, h, wd] = dims(x, "conv2d")?;
    let [cout, wcin, k, k2] = dims(w, "conv2d")?;
    let [bl] = dims(b, "conv2d")?;
    if wcin != cin || k != k2 || bl != cout {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            ),
        ));
    }
    Geom::new("conv2d", batch, (cin, h, wd), cout, k, stride, pad)
}

/// Cross-correlation of `x: B×Cin×H×W` with `w: Cout×Cin×k×k` plus `bias`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(x, w, bias, stride, pad)?;
    let mut out = Tensor::zeros(&[g.batch, g.cout, g.ho, g.wo]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { g.col_rows() * g.col_cols() }];
    for bi in 0..g.batch {
        let xb = &x.data()[bi * g.in_len()..(bi + 1) * g.in_len()];
        let ob = &mut out.data_mut()[bi * g.out_len()..(bi + 1) * g.out_len()];
        for (co, plane) in ob.chunks_exact_mut(g.col_cols()).enumerate() {
            plane.iter_mut().for_each(|v| *v = bias.data()[co]);
        }
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut cols);
            &cols
        };
        gemm(
            T::one(),
            w.data(),
            MatView::rm(0, g.cout, g.col_rows()),
            src,
            MatView::rm(0, g.col_rows(), g.col_cols()),
            T::one(),
            ob,
            MatView::rm(0, g.cout, g.col_cols()),
        );
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_vjp<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_x: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = conv_geom(x, w, bias, stride, pad)?;
    let mut dx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(bias.shape());
    let (cr, cc) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { cr * cc }];
    let mut dcols = vec![T::zero(); cr * cc];
    for bi in 0..g.batch {
        let xb = &x.data()[bi * g.in_len()..(bi + 1) * g.in_len()];
        let gb = &grad.data()[bi * g.out_len()..(bi + 1) * g.out_len()];
        for (co, plane) in gb.chunks_exact(cc).enumerate() {
            db.data_mut()[co] += plane.iter().copied().sum::<T>();
        }
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut cols);
            &cols
        };
        // dW += g_b · colsᵀ
        gemm(
            T::one(),
            gb,
            MatView::rm(0, g.cout, cc),
            src,
            MatView::rm(0, cr, cc).t(),
            T::one(),
            dw.data_mut(),
            MatView::rm(0, g.cout, cr),
        );
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[bi * g.in_len()..(bi + 1) * g.in_len()];
            if g.is_pointwise() {
                gemm(
                    T::one(),
                    w.data(),
                    MatView::rm(0, g.cout, cr).t(),
                    gb,
                    MatView::rm(0, g.cout, cc),
                    T::zero(),
                    dxb,
                    MatView::rm(0, cr, cc),
                );
            } else {
                gemm(
                    T::one(),
                    w.data(),
                    MatView::rm(0, g.cout, cr).t(),
                    gb,
                    MatView::rm(0, g.cout, cc),
                    T::zero(),
                    &mut dcols,
                    MatView::rm(0, cr, cc),
                );
                col2im(&dcols, &g, dxb);
            }
        }
    }
    Ok((dx, dw, db))
}

fn convt_geom<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
) -> Result<Geom> {
    let [batch, cin, h, wd] = dims(x, "conv_transpose2d")?;
    let [wcin, cout, k, k2] = dims(w, "conv_transpose2d")?;
    let [bl] = dims(b, "conv_transpose2d")?;
    if wcin != cin || k != k2 || bl != cout || k == 0 || stride == 0 || h == 0 || wd == 0 {
        return Err(Error::shape(
            "conv_transpose2d",
            format!(
                "input {:?}, weight {:?}, bias {:?}, stride {stride}",
                x.shape(),
                w.shape(),
                b.shape()
            ),
        ));
    }
    // The transpose runs the forward geometry of a conv from the output
    // (cout × H″ × W″) back to the input (cin × H × W).
    let (ho, wo) = ((h - 1) * stride + k, (wd - 1) * stride + k);
    let g = Geom::new("conv_transpose2d", batch, (cout, ho, wo), cin, k, stride, 0)?;
    debug_assert_eq!((g.ho, g.wo), (h, wd));
    Ok(g)
}

/// Transposed convolution of `x: B×Cin×H×W` with `w: Cin×Cout×k×k`, no padding.
/// Output is `B×Cout×((H−1)·stride+k)×((W−1)·stride+k)`.
pub fn conv_transpose2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = convt_geom(x, w, bias, stride)?;
    let (cr, cc) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros(&[g.batch, g.cin, g.h, g.w]);
    let mut cols = vec![T::zero(); cr * cc];
    for bi in 0..g.batch {
        let xb = &x.data()[bi * g.out_len()..(bi + 1) * g.out_len()];
        let ob = &mut out.data_mut()[bi * g.in_len()..(bi + 1) * g.in_len()];
        gemm(
            T::one(),
            w.data(),
            MatView::rm(0, g.cout, cr).t(),
            xb,
            MatView::rm(0, g.cout, cc),
            T::zero(),
            &mut cols,
            MatView::rm(0, cr, cc),
        );
        col2im(&cols, &g, ob);
        for (co, plane) in ob.chunks_exact_mut(g.h * g.w).enumerate() {
            let b = bias.data()[co];
            plane.iter_mut().for_each(|v| *v += b);
        }
    }
    Ok(out)
}

/// Gradients of [`conv_transpose2d`] with respect to input, weight and bias.
pub fn conv_transpose2d_vjp<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    need_x: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = convt_geom(x, w, bias, stride)?;
    let (cr, cc) = (g.col_rows(), g.col_cols());
    let mut dx = need_x.then(|| Tensor::zeros(x.shape()));
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(bias.shape());
    let mut cols = vec![T::zero(); cr * cc];
    for bi in 0..g.batch {
        let xb = &x.data()[bi * g.out_len()..(bi + 1) * g.out_len()];
        let gb = &grad.data()[bi * g.in_len()..(bi + 1) * g.in_len()];
        for (co, plane) in gb.chunks_exact(g.h * g.w).enumerate() {
            db.data_mut()[co] += plane.iter().copied().sum::<T>();
        }
        im2col(gb, &g, &mut cols);
        // dW (Cin × Cout·k·k) += x_b · colsᵀ
        gemm(
            T::one(),
            xb,
            MatView::rm(0, g.cout, cc),
            &cols,
            MatView::rm(0, cr, cc).t(),
            T::one(),
            dw.data_mut(),
            MatView::rm(0, g.cout, cr),
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                T::one(),
                w.data(),
                MatView::rm(0, g.cout, cr),
                &cols,
                MatView::rm(0, cr, cc),
                T::zero(),
                &mut dx.data_mut()[bi * g.out_len()..(bi + 1) * g.out_len()],
                MatView::rm(0, g.cout, cc),
            );
        }
    }
    Ok((dx, dw, db))
}

impl<T: Real> Graph<T> {
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        self.push(
            "conv2d",
            out,
            &[x, w, b],
            Box::new(move |ctx| {
                let (dx, dw, db) = conv2d_vjp(
                    ctx.inputs[0],
                    ctx.inputs[1],
                    ctx.inputs[2],
                    ctx.grad,
                    stride,
                    pad,
                    ctx.needs[0],
                )?;
                Ok(vec![dx, Some(dw), Some(db)])
            }),
        )
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let out = conv_transpose2d(self.value(x), self.value(w), self.value(b), stride)?;
        self.push(
            "conv_transpose2d",
            out,
            &[x, w, b],
            Box::new(move |ctx| {
                let (dx, dw, db) = conv_transpose2d_vjp(
                    ctx.inputs[0],
                    ctx.inputs[1],
                    ctx.inputs[2],
                    ctx.grad,
                    stride,
                    ctx.needs[0],
                )?;
                Ok(vec![dx, Some(dw), Some(db)])
            }),
        )
    }
}
