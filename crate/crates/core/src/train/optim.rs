//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{ParamGrads, ParamSet, Real, Tensor};

use super::TrainConfig;

/// Name suffixes of parameters that are never weight-decayed.
pub const NO_DECAY_SUFFIXES: [&str; 3] = [".bias", ".gamma", ".beta"];

pub fn decays(name: &str) -> bool {
    !NO_DECAY_SUFFIXES.iter().any(|s| name.ends_with(s))
}

/// First and second moments per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub t: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| (p.name.clone(), Tensor::zeros(p.value.shape())))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One AdamW update. Parameters without a gradient are treated as having a
/// zero gradient. A non-finite gradient aborts before anything is modified.
pub fn adamw_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &ParamGrads<T>,
    state: &mut OptimState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !params.contains(name) {
            return Err(Error::MissingParam(name.clone()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    state.t += 1;
    let [b1, b2] = cfg.betas;
    let t = state.t as i32;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for p in params.iter_mut() {
        let m = state
            .m
            .get_mut(&p.name)
            .ok_or_else(|| Error::MissingParam(format!("optimizer moment for {}", p.name)))?;
        let v = state
            .v
            .get_mut(&p.name)
            .ok_or_else(|| Error::MissingParam(format!("optimizer moment for {}", p.name)))?;
        let g = grads.get(&p.name);
        let wd = if decays(&p.name) { cfg.weight_decay } else { 0.0 };
        for i in 0..p.value.numel() {
            let gi = g.map_or(0.0, |g| g.data()[i].f64());
            let mi = b1 * m.data()[i].f64() + (1.0 - b1) * gi;
            let vi = b2 * v.data()[i].f64() + (1.0 - b2) * gi * gi;
            m.data_mut()[i] = T::of(mi);
            v.data_mut()[i] = T::of(vi);
            let theta = p.value.data()[i].f64();
            let update = (mi / c1) / ((vi / c2).sqrt() + cfg.eps) + wd * theta;
            p.value.data_mut()[i] = T::of(theta - lr * update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w.weight", Tensor::scalar(v)).unwrap();
        p
    }

    fn grads(g: f64) -> ParamGrads<f64> {
        [("w.weight".to_string(), Tensor::scalar(g))].into_iter().collect()
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut p = scalar_params(0.7);
        let mut s = OptimState::new(&p);
        for _ in 0..5 {
            adamw_step(&mut p, &grads(0.0), &mut s, 0.1, &cfg).unwrap();
        }
        assert_eq!(p.value("w.weight").unwrap().data()[0], 0.7);
    }

    #[test]
    fn single_step_matches_direct_formula() {
        let cfg = TrainConfig::default();
        let mut p = scalar_params(1.0);
        let mut s = OptimState::new(&p);
        adamw_step(&mut p, &grads(1.0), &mut s, 0.1, &cfg).unwrap();
        // m̂ = v̂ = 1 after bias correction.
        let m_hat = (0.1 * 1.0) / (1.0 - 0.9);
        let v_hat = (0.001 * 1.0) / (1.0 - 0.999);
        let expected = 1.0 - 0.1 * (m_hat / (f64::sqrt(v_hat) + 1e-8) + 1e-5 * 1.0);
        assert!((p.value("w.weight").unwrap().data()[0] - expected).abs() < 1e-15);
        assert!((expected - 0.899_999_001).abs() < 1e-12);
    }

    #[test]
    fn decoupled_decay_alone() {
        let cfg = TrainConfig { weight_decay: 0.1, ..TrainConfig::default() };
        let mut p = scalar_params(2.0);
        let mut s = OptimState::new(&p);
        adamw_step(&mut p, &grads(0.0), &mut s, 1.0, &cfg).unwrap();
        assert!((p.value("w.weight").unwrap().data()[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn biases_and_norms_skip_decay() {
        assert!(decays("decoder.tokens"));
        assert!(decays("head.up0.weight"));
        assert!(!decays("head.up0.bias"));
        assert!(!decays("decoder.layer0.norm1.gamma"));
        assert!(!decays("decoder.layer0.norm1.beta"));
        let cfg = TrainConfig { weight_decay: 0.1, ..TrainConfig::default() };
        let mut p = ParamSet::<f64>::new();
        p.insert("x.bias", Tensor::scalar(2.0)).unwrap();
        let mut s = OptimState::new(&p);
        adamw_step(&mut p, &ParamGrads::new(), &mut s, 1.0, &cfg).unwrap();
        assert_eq!(p.value("x.bias").unwrap().data()[0], 2.0);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_params(1.0);
        let mut s = OptimState::new(&p);
        let err = adamw_step(&mut p, &grads(f64::NAN), &mut s, 0.1, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("w.weight"));
        assert_eq!(s.t, 0);
    }
}
