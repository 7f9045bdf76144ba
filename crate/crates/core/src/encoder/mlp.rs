use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::INIT_STD;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamId, ParamStore, ParamVars, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Identity,
}

/// Two-layer perceptron `act(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub activation: Activation,
}

impl Mlp {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dims: (usize, usize, usize),
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (d_in, hidden, d_out) = dims;
        Self {
            w1: store.add(format!("{prefix}.w1"), Matrix::random_normal(d_in, hidden, INIT_STD, rng)),
            b1: store.add(format!("{prefix}.b1"), Matrix::zeros(1, hidden)),
            w2: store.add(format!("{prefix}.w2"), Matrix::random_normal(hidden, d_out, INIT_STD, rng)),
            b2: store.add(format!("{prefix}.b2"), Matrix::zeros(1, d_out)),
            activation,
        }
    }

    /// Identity-initialized square MLP (both weight matrices are `I`).
    pub fn init_identity(store: &mut ParamStore, prefix: &str, d: usize, activation: Activation) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), Matrix::identity(d)),
            b1: store.add(format!("{prefix}.b1"), Matrix::zeros(1, d)),
            w2: store.add(format!("{prefix}.w2"), Matrix::identity(d)),
            b2: store.add(format!("{prefix}.b2"), Matrix::zeros(1, d)),
            activation,
        }
    }

    pub fn bind(store: &ParamStore, prefix: &str, d_in: usize, d_out: usize, activation: Activation) -> Result<Self> {
        let get = |s: &str| {
            let name = format!("{prefix}.{s}");
            store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let mlp = Self { w1: get("w1")?, b1: get("b1")?, w2: get("w2")?, b2: get("b2")?, activation };
        let hidden = store.get(mlp.w1).cols();
        let ok = store.get(mlp.w1).rows() == d_in
            && store.get(mlp.b1).shape() == (1, hidden)
            && store.get(mlp.w2).shape() == (hidden, d_out)
            && store.get(mlp.b2).shape() == (1, d_out);
        if !ok {
            return Err(Error::Checkpoint(format!("tensors under {prefix} have inconsistent shapes")));
        }
        Ok(mlp)
    }

    pub fn forward(&self, tape: &Tape<'_>, vars: &ParamVars, x: Var) -> Var {
        let h = tape.add_row(tape.matmul(x, vars.var(self.w1)), vars.var(self.b1));
        let h = match self.activation {
            Activation::Gelu => tape.gelu(h),
            Activation::Identity => h,
        };
        tape.add_row(tape.matmul(h, vars.var(self.w2)), vars.var(self.b2))
    }
}
