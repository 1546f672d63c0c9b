use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::scalar::Real;
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => {
                // ½x(1 + tanh u) = x·σ(2u), which avoids the slower tanh.
                let inner = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_CUBIC) * x * x * x);
                x / (T::one() + (-(inner + inner)).exp())
            }
        }
    }

    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let half = T::of(0.5);
                let c = T::of(GELU_CUBIC);
                let k = T::of(SQRT_2_OVER_PI);
                let u = k * (x + c * x * x * x);
                let t = T::one() - T::of(2.0) / (T::one() + (u + u).exp());
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
            }
        }
    }
}

pub fn activation<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

impl<T: Real> Graph<T> {
    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = activation(self.value(x), kind);
        self.push(
            "activation",
            out,
            &[x],
            Box::new(move |ctx| {
                let mut dx = ctx.grad.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(ctx.inputs[0].data()) {
                    *d *= kind.derivative(v);
                }
                Ok(vec![Some(dx)])
            }),
        )
    }
}
