//! Training objective: softmax cross-entropy plus soft Dice, with analytic
//! gradients with respect to the logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::scalar::CompensatedSum;
use crate::numerics::{Real, Tensor};

/// Integer class ids, `B×H×W`, row-major. Class 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    shape: [usize; 3],
    ids: Vec<u8>,
}

impl LabelMask {
    pub fn new(batch: usize, height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != batch * height * width {
            return Err(Error::shape(
                "label_mask",
                format!("{batch}x{height}x{width} needs {} ids, got {}", batch * height * width, ids.len()),
            ));
        }
        Ok(Self {
            shape: [batch, height, width],
            ids,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [u8] {
        &mut self.ids
    }

    pub fn stack(masks: &[LabelMask]) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::shape("label_mask", "empty stack"))?;
        let [_, h, w] = first.shape;
        let mut ids = Vec::with_capacity(masks.len() * h * w);
        let mut b = 0;
        for m in masks {
            if m.shape[1..] != first.shape[1..] {
                return Err(Error::shape(
                    "label_mask",
                    format!("{:?} vs {:?}", m.shape, first.shape),
                ));
            }
            b += m.shape[0];
            ids.extend_from_slice(&m.ids);
        }
        Self::new(b, h, w, ids)
    }

    /// Checks every id is below `n`, reporting the first offending pixel.
    pub fn validate(&self, n: usize) -> Result<()> {
        let [_, h, w] = self.shape;
        if let Some(pos) = self.ids.iter().position(|&id| id as usize >= n) {
            let (b, r, c) = (pos / (h * w), (pos / w) % h, pos % w);
            return Err(Error::Validation(format!(
                "label {} at (batch {b}, row {r}, col {c}) is not below {n} classes",
                self.ids[pos]
            )));
        }
        Ok(())
    }

    /// Argmax over the class axis of `B×N×H×W` logits; ties go to the
    /// lowest class id.
    pub fn argmax<T: Real>(logits: &Tensor<T>) -> Result<Self> {
        let &[b, n, h, w] = logits.shape() else {
            return Err(Error::shape("argmax", format!("{:?}", logits.shape())));
        };
        let hw = h * w;
        let d = logits.data();
        let mut ids = Vec::with_capacity(b * hw);
        for bi in 0..b {
            for p in 0..hw {
                let mut best = 0;
                let mut best_v = d[bi * n * hw + p];
                for k in 1..n {
                    let v = d[(bi * n + k) * hw + p];
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                ids.push(best as u8);
            }
        }
        Self::new(b, h, w, ids)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_dice: f64,
    pub lambda_ce: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_dice: 0.5,
            lambda_ce: 0.5,
            dice_smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_dice < 0.0 || self.lambda_ce < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.lambda_dice == 0.0 && self.lambda_ce == 0.0 {
            return Err(Error::Config("loss weights cannot both be zero".into()));
        }
        if self.dice_smooth <= 0.0 {
            return Err(Error::Config("dice_smooth must be positive".into()));
        }
        Ok(())
    }
}

struct Layout {
    b: usize,
    n: usize,
    hw: usize,
}

fn layout<T: Real>(logits: &Tensor<T>, labels: &LabelMask) -> Result<Layout> {
    let &[b, n, h, w] = logits.shape() else {
        return Err(Error::shape("loss", format!("logits {:?}", logits.shape())));
    };
    if labels.shape() != [b, h, w] {
        return Err(Error::shape(
            "loss",
            format!("logits {:?} vs labels {:?}", logits.shape(), labels.shape()),
        ));
    }
    labels.validate(n)?;
    Ok(Layout { b, n, hw: h * w })
}

/// Per-pixel class probabilities in double precision, same layout as logits.
fn probabilities<T: Real>(logits: &Tensor<T>, l: &Layout) -> Vec<f64> {
    let d = logits.data();
    let mut p = vec![0.0; d.len()];
    let mut z = vec![0.0; l.n];
    for bi in 0..l.b {
        let base = bi * l.n * l.hw;
        for px in 0..l.hw {
            let mut m = f64::NEG_INFINITY;
            for (k, zk) in z.iter_mut().enumerate() {
                *zk = d[base + k * l.hw + px].f64();
                m = m.max(*zk);
            }
            let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
            for (k, zk) in z.iter().enumerate() {
                p[base + k * l.hw + px] = (zk - m).exp() / s;
            }
        }
    }
    p
}

fn to_tensor<T: Real>(shape: &[usize], data: Vec<f64>) -> Result<Tensor<T>> {
    Tensor::from_vec(shape, data.into_iter().map(T::of).collect())
}

/// Mean over pixels of `−log softmax(logits)[label]`.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &LabelMask,
) -> Result<(f64, Tensor<T>)> {
    let l = layout(logits, labels)?;
    let d = logits.data();
    let count = (l.b * l.hw) as f64;
    let mut loss = CompensatedSum::default();
    let mut grad = probabilities(logits, &l);
    for bi in 0..l.b {
        let base = bi * l.n * l.hw;
        for px in 0..l.hw {
            let y = labels.ids()[bi * l.hw + px] as usize;
            let m = (0..l.n).map(|k| d[base + k * l.hw + px].f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..l.n).map(|k| (d[base + k * l.hw + px].f64() - m).exp()).sum::<f64>().ln();
            loss.add(lse - d[base + y * l.hw + px].f64());
            grad[base + y * l.hw + px] -= 1.0;
        }
    }
    grad.iter_mut().for_each(|g| *g /= count);
    Ok((loss.value() / count, to_tensor(logits.shape(), grad)?))
}

/// `1 − mean_i (2Σp_i y_i + s) / (Σp_i + Σy_i + s)` over all classes, with
/// sums over the whole batch.
pub fn soft_dice_loss<T: Real>(
    logits: &Tensor<T>,
    labels: &LabelMask,
    smooth: f64,
) -> Result<(f64, Tensor<T>)> {
    let l = layout(logits, labels)?;
    let p = probabilities(logits, &l);
    let mut inter = vec![CompensatedSum::default(); l.n];
    let mut psum = vec![CompensatedSum::default(); l.n];
    let mut ysum = vec![0.0; l.n];
    for bi in 0..l.b {
        for px in 0..l.hw {
            let y = labels.ids()[bi * l.hw + px] as usize;
            for k in 0..l.n {
                psum[k].add(p[(bi * l.n + k) * l.hw + px]);
            }
            inter[y].add(p[(bi * l.n + y) * l.hw + px]);
            ysum[y] += 1.0;
        }
    }
    let nf = l.n as f64;
    let mut dice_mean = 0.0;
    // ∂loss/∂p_k(x) = −(1/N)·(2y_k(x)/den_k − num_k/den_k²)
    let mut dp_y = vec![0.0; l.n];
    let mut dp_0 = vec![0.0; l.n];
    for k in 0..l.n {
        let num = 2.0 * inter[k].value() + smooth;
        let den = psum[k].value() + ysum[k] + smooth;
        dice_mean += num / den / nf;
        dp_0[k] = num / (den * den) / nf;
        dp_y[k] = dp_0[k] - 2.0 / den / nf;
    }
    let mut grad = vec![0.0; p.len()];
    let mut gk = vec![0.0; l.n];
    for bi in 0..l.b {
        for px in 0..l.hw {
            let y = labels.ids()[bi * l.hw + px] as usize;
            let idx = |k: usize| (bi * l.n + k) * l.hw + px;
            let mut dot = 0.0;
            for k in 0..l.n {
                gk[k] = if k == y { dp_y[k] } else { dp_0[k] };
                dot += gk[k] * p[idx(k)];
            }
            for k in 0..l.n {
                grad[idx(k)] = p[idx(k)] * (gk[k] - dot);
            }
        }
    }
    Ok((1.0 - dice_mean, to_tensor(logits.shape(), grad)?))
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
    pub grad: Tensor<T>,
}

/// `λ_dice·dice + λ_ce·ce`; a term whose weight is zero is skipped entirely.
pub fn total_loss<T: Real>(
    logits: &Tensor<T>,
    labels: &LabelMask,
    cfg: &LossConfig,
) -> Result<LossOutput<T>> {
    cfg.validate()?;
    let mut out = LossOutput {
        total: 0.0,
        ce: 0.0,
        dice: 0.0,
        grad: Tensor::zeros(logits.shape()),
    };
    let mut first = true;
    let mut add = |value: f64, grad: Tensor<T>, weight: f64, out: &mut LossOutput<T>| -> Result<()> {
        if first {
            out.total = weight * value;
            out.grad = grad.scale(T::of(weight));
            first = false;
        } else {
            out.total += weight * value;
            out.grad.add_assign(&grad.scale(T::of(weight)))?;
        }
        Ok(())
    };
    if cfg.lambda_ce > 0.0 {
        let (ce, g) = softmax_cross_entropy(logits, labels)?;
        out.ce = ce;
        add(ce, g, cfg.lambda_ce, &mut out)?;
    }
    if cfg.lambda_dice > 0.0 {
        let (dice, g) = soft_dice_loss(logits, labels, cfg.dice_smooth)?;
        out.dice = dice;
        add(dice, g, cfg.lambda_dice, &mut out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(b: usize, h: usize, w: usize, ids: &[u8]) -> LabelMask {
        LabelMask::new(b, h, w, ids.to_vec()).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_n() {
        let logits = Tensor::<f64>::zeros(&[1, 4, 2, 2]);
        let (ce, _) = softmax_cross_entropy(&logits, &mask(1, 2, 2, &[0, 1, 2, 3])).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_correct_prediction_has_near_zero_ce() {
        let logits = Tensor::<f64>::from_f64(&[1, 2, 1, 1], &[0.0, 100.0]).unwrap();
        let (ce, _) = softmax_cross_entropy(&logits, &mask(1, 1, 1, &[1])).unwrap();
        assert!(ce < 1e-6);
    }

    #[test]
    fn two_class_single_pixel_ce() {
        // Direct formula: −log(e^0 / (e^1 + e^0)) = ln(1 + e).
        let logits = Tensor::<f64>::from_f64(&[1, 2, 1, 1], &[1.0, 0.0]).unwrap();
        let (ce, g) = softmax_cross_entropy(&logits, &mask(1, 1, 1, &[1])).unwrap();
        assert!((ce - (1.0 + 1f64.exp()).ln()).abs() < 1e-15);
        let p1 = 1.0 / (1.0 + 1f64.exp());
        assert!((g.data()[1] - (p1 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn absent_class_has_unit_dice() {
        // Class 2 is neither labeled nor predicted (logit −100).
        let logits = Tensor::<f64>::from_f64(&[1, 3, 1, 2], &[50.0, -50.0, -50.0, 50.0, -100.0, -100.0]).unwrap();
        let (loss, _) = soft_dice_loss(&logits, &mask(1, 1, 2, &[0, 1]), 1.0).unwrap();
        // Classes 0 and 1: (2·1 + 1)/(1 + 1 + 1) = 1; class 2: 1/1.
        assert!(loss.abs() < 1e-12, "{loss}");
    }

    #[test]
    fn perfect_overlap_limit() {
        let (h, w) = (40, 40);
        let ids: Vec<u8> = (0..h * w).map(|i| ((i / 7) % 3) as u8).collect();
        let mut z = vec![0.0; 3 * h * w];
        for (p, &y) in ids.iter().enumerate() {
            z[y as usize * h * w + p] = 60.0;
        }
        let logits = Tensor::<f64>::from_f64(&[1, 3, h, w], &z).unwrap();
        let (loss, _) = soft_dice_loss(&logits, &mask(1, h, w, &ids), 1.0).unwrap();
        assert!(loss < 1e-3);
    }

    #[test]
    fn label_out_of_range_reports_pixel() {
        let logits = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        let err = softmax_cross_entropy(&logits, &mask(1, 2, 2, &[0, 0, 0, 5])).unwrap_err();
        assert!(err.to_string().contains("row 1, col 1"), "{err}");
    }

    #[test]
    fn projections_are_exact() {
        let logits = Tensor::<f64>::from_f64(&[1, 3, 1, 2], &[0.3, -1.0, 2.0, 0.1, 0.5, 0.7]).unwrap();
        let labels = mask(1, 1, 2, &[2, 0]);
        let (ce, gce) = softmax_cross_entropy(&logits, &labels).unwrap();
        let (dice, gd) = soft_dice_loss(&logits, &labels, 1.0).unwrap();
        let only_ce = LossConfig { lambda_dice: 0.0, lambda_ce: 1.0, dice_smooth: 1.0 };
        let out = total_loss(&logits, &labels, &only_ce).unwrap();
        assert_eq!(out.total, ce);
        assert_eq!(out.grad, gce);
        let only_dice = LossConfig { lambda_dice: 1.0, lambda_ce: 0.0, dice_smooth: 1.0 };
        let out = total_loss(&logits, &labels, &only_dice).unwrap();
        assert_eq!(out.total, dice);
        assert_eq!(out.grad, gd);
    }

    #[test]
    fn argmax_ties_prefer_lowest_id() {
        let logits = Tensor::<f32>::from_f64(&[1, 3, 1, 2], &[1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(LabelMask::argmax(&logits).unwrap().ids(), &[0, 1]);
    }
}
