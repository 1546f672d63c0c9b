//! Multi-head scaled dot-product attention.
//!
//! The projections are ordinary [`Graph::linear`] nodes; the softmax core is
//! a single fused node so its backward pass can reuse the saved attention
//! probabilities.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::scalar::{gemm, MatView, Real};
use crate::numerics::tensor::Tensor;

/// Per-call options of the attention core.
#[derive(Clone, Debug, Default)]
pub struct AttentionOptions {
    pub heads: usize,
    /// Reduce over keys in a content-defined order, making the result
    /// exactly equivariant to key permutations.
    pub canonical_keys: bool,
    /// Query rows whose attention output is forced to zero (inspection-mode
    /// intervention).
    pub zeroed_queries: Vec<usize>,
}

impl AttentionOptions {
    pub fn heads(heads: usize) -> Self {
        Self {
            heads,
            ..Self::default()
        }
    }
}

/// Projection weights of one attention block; matrices are `D×D` laid out
/// input-major so that a projection is `x·W + b`. The key projection has no
/// bias: it would add the same amount to every score of a query.
#[derive(Clone, Debug)]
pub struct AttentionWeights<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

/// Graph handles of [`AttentionWeights`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Clone, Copy)]
struct Dims {
    batch: usize,
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
    dh: usize,
}

impl Dims {
    fn new(q: &[usize], k: &[usize], v: &[usize], heads: usize) -> Result<Self> {
        let (&[b, lq, d], &[bk, lk, dk], &[bv, lv, dv]) = (q, k, v) else {
            return Err(Error::shape(
                "attention",
                format!("expected rank-3 inputs, got {q:?}, {k:?}, {v:?}"),
            ));
        };
        if b != bk || b != bv || lk != lv || d != dk || d != dv || lk == 0 {
            return Err(Error::shape(
                "attention",
                format!("q {q:?}, k {k:?}, v {v:?}"),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {d} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            batch: b,
            lq,
            lk,
            d,
            heads,
            dh: d / heads,
        })
    }

    fn q_view(&self, b: usize, h: usize) -> MatView {
        MatView {
            offset: b * self.lq * self.d + h * self.dh,
            rows: self.lq,
            cols: self.dh,
            row_stride: self.d,
            col_stride: 1,
        }
    }

    fn k_view(&self, b: usize, h: usize) -> MatView {
        MatView {
            offset: b * self.lk * self.d + h * self.dh,
            rows: self.lk,
            cols: self.dh,
            row_stride: self.d,
            col_stride: 1,
        }
    }

    fn p_view(&self, b: usize, h: usize) -> MatView {
        MatView::rm(((b * self.heads) + h) * self.lq * self.lk, self.lq, self.lk)
    }
}

/// Order of key rows sorted by content (key row, then value row). Summing
/// over keys in this order makes the result independent of how the keys were
/// arranged on input.
fn canonical_key_order<T: Real>(k: &[T], v: &[T], lk: usize, d: usize) -> Vec<usize> {
    let cmp_rows = |x: &[T], a: usize, b: usize| {
        x[a * d..(a + 1) * d]
            .iter()
            .zip(&x[b * d..(b + 1) * d])
            .map(|(p, q)| p.f64().total_cmp(&q.f64()))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    let mut order: Vec<usize> = (0..lk).collect();
    order.sort_by(|&a, &b| cmp_rows(k, a, b).then_with(|| cmp_rows(v, a, b)));
    order
}

fn gather_rows<T: Real>(x: &Tensor<T>, orders: &[Vec<usize>], d: usize) -> Tensor<T> {
    let lk = orders[0].len();
    let mut out = Vec::with_capacity(x.numel());
    for (b, order) in orders.iter().enumerate() {
        for &j in order {
            out.extend_from_slice(&x.data()[(b * lk + j) * d..][..d]);
        }
    }
    Tensor::from_vec(x.shape(), out).expect("gather keeps the shape")
}

/// Softmax attention over already-projected `q`, `k`, `v` (each `B×L×D`).
/// Returns the merged head outputs `B×Lq×D` and the probabilities
/// `B×heads×Lq×Lk`.
pub fn attention_core<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    opts: &AttentionOptions,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let dm = Dims::new(q.shape(), k.shape(), v.shape(), opts.heads)?;
    if opts.canonical_keys {
        let orders: Vec<Vec<usize>> = (0..dm.batch)
            .map(|b| {
                let r = b * dm.lk * dm.d..(b + 1) * dm.lk * dm.d;
                canonical_key_order(&k.data()[r.clone()], &v.data()[r], dm.lk, dm.d)
            })
            .collect();
        let (kc, vc) = (gather_rows(k, &orders, dm.d), gather_rows(v, &orders, dm.d));
        let plain = AttentionOptions {
            canonical_keys: false,
            ..opts.clone()
        };
        let (out, pc) = attention_core(q, &kc, &vc, &plain)?;
        // Scatter probability columns back to the caller's key order.
        let mut probs = Tensor::zeros(pc.shape());
        let rows_per_batch = dm.heads * dm.lq;
        for (b, order) in orders.iter().enumerate() {
            for r in 0..rows_per_batch {
                let base = (b * rows_per_batch + r) * dm.lk;
                for (pos, &j) in order.iter().enumerate() {
                    probs.data_mut()[base + j] = pc.data()[base + pos];
                }
            }
        }
        return Ok((out, probs));
    }
    let scale = T::of(1.0 / (dm.dh as f64).sqrt());
    let mut probs = Tensor::zeros(&[dm.batch, dm.heads, dm.lq, dm.lk]);
    let mut out = Tensor::zeros(&[dm.batch, dm.lq, dm.d]);
    for b in 0..dm.batch {
        for h in 0..dm.heads {
            let (qv, kv, pv) = (dm.q_view(b, h), dm.k_view(b, h), dm.p_view(b, h));
            let p = &mut probs.data_mut()[pv.offset..pv.offset + dm.lq * dm.lk];
            gemm(
                scale,
                q.data(),
                qv,
                k.data(),
                kv.t(),
                T::zero(),
                p,
                MatView::rm(0, dm.lq, dm.lk),
            );
            for row in p.chunks_exact_mut(dm.lk) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    s += *x;
                }
                row.iter_mut().for_each(|x| *x /= s);
            }
            // The value view has the same layout as the key view.
            gemm(
                T::one(),
                p,
                MatView::rm(0, dm.lq, dm.lk),
                v.data(),
                kv,
                T::zero(),
                out.data_mut(),
                qv,
            );
        }
        for &i in &opts.zeroed_queries {
            if i < dm.lq {
                let row = &mut out.data_mut()[(b * dm.lq + i) * dm.d..][..dm.d];
                row.iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }
    Ok((out, probs))
}

/// Gradients of [`attention_core`] with respect to `q`, `k`, `v`.
pub fn attention_core_vjp<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &Tensor<T>,
    grad: &Tensor<T>,
    opts: &AttentionOptions,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let dm = Dims::new(q.shape(), k.shape(), v.shape(), opts.heads)?;
    let scale = T::of(1.0 / (dm.dh as f64).sqrt());
    let mut g = grad.clone();
    for b in 0..dm.batch {
        for &i in &opts.zeroed_queries {
            if i < dm.lq {
                g.data_mut()[(b * dm.lq + i) * dm.d..][..dm.d]
                    .iter_mut()
                    .for_each(|x| *x = T::zero());
            }
        }
    }
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut ds = vec![T::zero(); dm.lq * dm.lk];
    let sv = MatView::rm(0, dm.lq, dm.lk);
    for b in 0..dm.batch {
        for h in 0..dm.heads {
            let (qv, kv, pv) = (dm.q_view(b, h), dm.k_view(b, h), dm.p_view(b, h));
            let p = &probs.data()[pv.offset..pv.offset + dm.lq * dm.lk];
            // dP = dO · Vᵀ
            gemm(T::one(), g.data(), qv, v.data(), kv.t(), T::zero(), &mut ds, sv);
            // dV = Pᵀ · dO
            gemm(T::one(), p, sv.t(), g.data(), qv, T::zero(), dv.data_mut(), kv);
            for (drow, prow) in ds.chunks_exact_mut(dm.lk).zip(p.chunks_exact(dm.lk)) {
                let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (d, &pp) in drow.iter_mut().zip(prow) {
                    *d = pp * (*d - dot);
                }
            }
            gemm(scale, &ds, sv, k.data(), kv, T::zero(), dq.data_mut(), qv);
            gemm(scale, &ds, sv.t(), q.data(), qv, T::zero(), dk.data_mut(), kv);
        }
    }
    Ok((dq, dk, dv))
}

/// Full multi-head attention on plain tensors (`L×D` or `B×L×D`).
pub fn multi_head_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    w: &AttentionWeights<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let lift = |g: &mut Graph<T>, t: &Tensor<T>| -> Result<Var> {
        let t = if t.ndim() == 2 {
            t.clone().reshape(&[1, t.shape()[0], t.shape()[1]])?
        } else {
            t.clone()
        };
        Ok(g.constant(t))
    };
    let (qv, kv, vv) = (lift(&mut g, q)?, lift(&mut g, k)?, lift(&mut g, v)?);
    let vars = AttentionVars {
        wq: g.constant(w.wq.clone()),
        bq: g.constant(w.bq.clone()),
        wk: g.constant(w.wk.clone()),
        wv: g.constant(w.wv.clone()),
        bv: g.constant(w.bv.clone()),
        wo: g.constant(w.wo.clone()),
        bo: g.constant(w.bo.clone()),
    };
    let (out, _) = g.multi_head_attention(qv, kv, vv, &vars, &AttentionOptions::heads(heads))?;
    let out = g.value(out).clone();
    out.reshape(q.shape())
}

impl<T: Real> Graph<T> {
    pub fn attention_core(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        opts: &AttentionOptions,
    ) -> Result<(Var, Tensor<T>)> {
        let (out, probs) = attention_core(self.value(q), self.value(k), self.value(v), opts)?;
        let saved = probs.clone();
        let opts = opts.clone();
        let var = self.push(
            "attention",
            out,
            &[q, k, v],
            Box::new(move |ctx| {
                let (dq, dk, dv) = attention_core_vjp(
                    ctx.inputs[0],
                    ctx.inputs[1],
                    ctx.inputs[2],
                    &saved,
                    ctx.grad,
                    &opts,
                )?;
                Ok(vec![Some(dq), Some(dk), Some(dv)])
            }),
        )?;
        Ok((var, probs))
    }

    /// Projects, attends and re-projects. Returns the output and the
    /// attention probabilities.
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        w: &AttentionVars,
        opts: &AttentionOptions,
    ) -> Result<(Var, Tensor<T>)> {
        let qp = self.linear(q, w.wq, w.bq)?;
        let d = self.shape(w.wk)[1];
        let no_bias = self.constant(Tensor::zeros(&[d]));
        let kp = self.linear(k, w.wk, no_bias)?;
        let vp = self.linear(v, w.wv, w.bv)?;
        let (o, probs) = self.attention_core(qp, kp, vp, opts)?;
        Ok((self.linear(o, w.wo, w.bo)?, probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn rand(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn weights(d: usize, rng: &mut SplitMix64) -> AttentionWeights<f64> {
        AttentionWeights {
            wq: rand(&[d, d], rng),
            bq: rand(&[d], rng),
            wk: rand(&[d, d], rng),
            wv: rand(&[d, d], rng),
            bv: rand(&[d], rng),
            wo: rand(&[d, d], rng),
            bo: rand(&[d], rng),
        }
    }

    /// Literal single-threaded transcription of the attention formula.
    fn oracle(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], w: &AttentionWeights<f64>, heads: usize) -> Vec<Vec<f64>> {
        let d = q[0].len();
        let dh = d / heads;
        let proj = |x: &[f64], m: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
            (0..d)
                .map(|o| b.data()[o] + (0..d).map(|i| x[i] * m.data()[i * d + o]).sum::<f64>())
                .collect()
        };
        let qp: Vec<_> = q.iter().map(|x| proj(x, &w.wq, &w.bq)).collect();
        let kp: Vec<_> = k.iter().map(|x| proj(x, &w.wk, &Tensor::zeros(&[d]))).collect();
        let vp: Vec<_> = v.iter().map(|x| proj(x, &w.wv, &w.bv)).collect();
        qp.iter()
            .map(|qi| {
                let mut concat = vec![0.0; d];
                for h in 0..heads {
                    let r = h * dh..(h + 1) * dh;
                    let scores: Vec<f64> = kp
                        .iter()
                        .map(|kj| qi[r.clone()].iter().zip(&kj[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in r.clone() {
                        concat[c] = e.iter().zip(&vp).map(|(p, vj)| p / z * vj[c]).sum();
                    }
                }
                proj(&concat, &w.wo, &w.bo)
            })
            .collect()
    }

    fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
        let d = *t.shape().last().unwrap();
        t.data().chunks(d).map(|r| r.to_vec()).collect()
    }

    #[test]
    fn matches_literal_oracle() {
        let mut rng = SplitMix64::new(11);
        let (q, k, v) = (rand(&[2, 4], &mut rng), rand(&[3, 4], &mut rng), rand(&[3, 4], &mut rng));
        let w = weights(4, &mut rng);
        let got = multi_head_attention(&q, &k, &v, &w, 2).unwrap();
        let want = oracle(&rows(&q), &rows(&k), &rows(&v), &w, 2);
        for (g, w) in rows(&got).iter().zip(&want) {
            for (a, b) in g.iter().zip(w) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn single_key_ignores_query() {
        let mut rng = SplitMix64::new(5);
        let (k, v) = (rand(&[1, 8], &mut rng), rand(&[1, 8], &mut rng));
        let w = weights(8, &mut rng);
        let a = multi_head_attention(&rand(&[3, 8], &mut rng), &k, &v, &w, 4).unwrap();
        let b = multi_head_attention(&rand(&[3, 8], &mut rng), &k, &v, &w, 4).unwrap();
        assert_eq!(a, b);
        // Forced output: (v·Wv + bv)·Wo + bo.
        let want = oracle(&rows(&rand(&[1, 8], &mut rng)), &rows(&k), &rows(&v), &w, 4);
        for (x, y) in a.data()[..8].iter().zip(&want[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut rng = SplitMix64::new(9);
        let key = rand(&[1, 1, 4], &mut rng);
        let k = Tensor::concat_first(&[key.clone(), key.clone(), key.clone()])
            .unwrap()
            .reshape(&[1, 3, 4])
            .unwrap();
        let q = rand(&[1, 2, 4], &mut rng);
        let (_, p) = attention_core(&q, &k, &k, &AttentionOptions::heads(2)).unwrap();
        assert!(p.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn heads_must_divide_dim() {
        let q = Tensor::<f64>::zeros(&[1, 2, 6]);
        let err = attention_core(&q, &q, &q, &AttentionOptions::heads(4)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn canonical_reduction_is_permutation_exact() {
        let mut rng = SplitMix64::new(21);
        let q = rand(&[1, 5, 8], &mut rng).cast::<f32>();
        let k = rand(&[1, 7, 8], &mut rng).cast::<f32>();
        let v = rand(&[1, 7, 8], &mut rng).cast::<f32>();
        let perm = [4, 0, 6, 2, 1, 5, 3];
        let permute = |t: &Tensor<f32>| {
            let data: Vec<f32> = perm.iter().flat_map(|&r| t.data()[r * 8..(r + 1) * 8].to_vec()).collect();
            Tensor::from_vec(&[1, 7, 8], data).unwrap()
        };
        let opts = AttentionOptions {
            heads: 2,
            canonical_keys: true,
            zeroed_queries: vec![],
        };
        let (a, _) = attention_core(&q, &k, &v, &opts).unwrap();
        let (b, _) = attention_core(&q, &permute(&k), &permute(&v), &opts).unwrap();
        assert_eq!(a, b);
    }
}
