// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => {
                // tanh approximation
                let k = T::c((2.0 / std::f64::consts::PI).sqrt());
                let inner = k * (x + T::c(0.044_715) * x * x * x);
                T::c(0.5) * x * (T::one() + inner.tanh())
            }
        }
    }
}

/// Shape and hyper-parameters of the toy MoE transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    /// Size of the learned absolute position table.
    pub max_positions: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub has_shared_expert: bool,
    pub expert_hidden: usize,
    pub shared_hidden: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 {
            return fail("d_model must be positive".into());
        }
        if self.num_heads == 0 || self.head_dim == 0 {
            return fail("num_heads and head_dim must be positive".into());
        }
        if self.num_heads * self.head_dim != self.d_model {
            return fail(format!(
                "num_heads * head_dim = {} * {} != d_model = {}",
                self.num_heads, self.head_dim, self.d_model
            ));
        }
        if self.num_layers == 0 || self.vocab_size == 0 || self.expert_hidden == 0 {
            return fail("num_layers, vocab_size and expert_hidden must be positive".into());
        }
        if self.max_positions == 0 {
            return fail("max_positions must be positive".into());
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return fail(format!(
                "top_k = {} must lie in 1..={}",
                self.top_k, self.num_experts
            ));
        }
        if self.has_shared_expert && self.shared_hidden == 0 {
            return fail("shared_hidden must be positive when a shared expert is present".into());
        }
        Ok(())
    }

    /// Rows of the gating matrix: routed experts plus the shared row.
    pub fn gate_rows(&self) -> usize {
        self.num_experts + usize::from(self.has_shared_expert)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            d_model: 8,
            num_heads: 2,
            head_dim: 4,
            vocab_size: 5,
            max_positions: 4,
            num_experts: 4,
            top_k: 2,
            has_shared_expert: true,
            expert_hidden: 3,
            shared_hidden: 2,
            activation: Activation::Relu,
            seed: 1,
        }
    }

    #[test]
    fn validation() {
        assert!(tiny().validate().is_ok());
        let mut c = tiny();
        c.d_model = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny();
        c.top_k = 5;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.shared_hidden = 0;
        assert!(c.validate().is_err());
        c.has_shared_expert = false;
        assert!(c.validate().is_ok());
        assert_eq!(c.gate_rows(), 4);
    }

    #[test]
    fn activations_fix_zero() {
        assert_eq!(Activation::Relu.apply(0.0f64), 0.0);
        assert_eq!(Activation::Gelu.apply(0.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(-2.0f64), 0.0);
        assert!((Activation::Gelu.apply(3.0f64) - 2.996_362_7).abs() < 1e-6);
    }
}
