//! Linear/MLP building blocks over the parameter store.

use rand_chacha::ChaCha8Rng;

use crate::numerics::{Graph, Scalar, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// N(0, 2/fan_in): default for layers feeding a nonlinearity.
    He,
    /// N(0, 0.02): transformer-style.
    Small,
    /// All zeros (residual output projections).
    Zero,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
    ) -> Self {
        let w = match init {
            Init::He => store.he(&format!("{name}.weight"), &[d_in, d_out], d_in, rng),
            Init::Small => store.randn(&format!("{name}.weight"), &[d_in, d_out], 0.02, rng),
            Init::Zero => store.zeros(&format!("{name}.weight"), &[d_in, d_out]),
        };
        let b = store.zeros(&format!("{name}.bias"), &[d_out]);
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let w = store.var(g, self.w);
        let b = store.var(g, self.b);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Gelu,
    Softplus,
}

/// Two-layer perceptron.
#[derive(Debug, Clone, Copy)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
    pub act: Act,
}

impl Mlp2 {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        act: Act,
        out_init: Init,
    ) -> Self {
        Mlp2 {
            l1: Linear::new(store, rng, &format!("{name}.fc1"), d_in, d_hidden, Init::He),
            l2: Linear::new(store, rng, &format!("{name}.fc2"), d_hidden, d_out, out_init),
            act,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let h = self.l1.forward(g, store, x);
        let h = match self.act {
            Act::Gelu => g.gelu(h),
            Act::Softplus => g.softplus(h),
        };
        self.l2.forward(g, store, h)
    }
}

/// LayerNorm parameters (gamma initialized to ones).
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize) -> Self {
        let gamma = store.register(&format!("{name}.gamma"), crate::numerics::Tensor::full(&[d], S::one()), false);
        let beta = store.zeros(&format!("{name}.beta"), &[d]);
        Norm { gamma, beta }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let gamma = store.var(g, self.gamma);
        let beta = store.var(g, self.beta);
        g.layer_norm(x, gamma, beta, S::of(1e-5))
    }
}
