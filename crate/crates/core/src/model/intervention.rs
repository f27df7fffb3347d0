// SPDX-License-Identifier: MIT OR Apache-2.0

//! Declarative description of an intervened forward pass.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;

/// An expert slot within a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertRef {
    Routed(usize),
    Shared,
}

impl fmt::Display for ExpertRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpertRef::Routed(j) => write!(f, "{j}"),
            ExpertRef::Shared => write!(f, "s"),
        }
    }
}

/// Routing configurations used for the shared/top-m ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "m", rename_all = "snake_case")]
pub enum RoutingMode {
    #[default]
    Default,
    /// Every routed expert blocked; the shared expert alone.
    OnlyShared,
    /// Shared expert plus the top `m` routed experts.
    SharedPlusTop(usize),
    /// Top `m` routed experts, shared expert blocked.
    TopOnly(usize),
    /// No experts at all.
    TopZero,
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoutingMode::Default => write!(f, "default"),
            RoutingMode::OnlyShared => write!(f, "only_shared"),
            RoutingMode::SharedPlusTop(m) => write!(f, "shared_plus_top{m}"),
            RoutingMode::TopOnly(m) => write!(f, "top_only{m}"),
            RoutingMode::TopZero => write!(f, "top_zero"),
        }
    }
}

impl FromStr for RoutingMode {
    type Err = Error;

    /// Accepts `default`, `only_shared`, `top_zero`, `shared_plus_top<m>`
    /// and `top_only<m>` (an optional `:` or `_` before `m` is allowed).
    fn from_str(s: &str) -> Result<Self> {
        let num = |rest: &str| -> Result<usize> {
            rest.trim_start_matches([':', '_', '('])
                .trim_end_matches(')')
                .parse()
                .map_err(|_| Error::Spec(format!("bad routing mode {s:?}")))
        };
        match s {
            "default" => Ok(RoutingMode::Default),
            "only_shared" => Ok(RoutingMode::OnlyShared),
            "top_zero" => Ok(RoutingMode::TopZero),
            _ => {
                if let Some(rest) = s.strip_prefix("shared_plus_top") {
                    Ok(RoutingMode::SharedPlusTop(num(rest)?))
                } else if let Some(rest) = s.strip_prefix("top_only") {
                    Ok(RoutingMode::TopOnly(num(rest)?))
                } else {
                    Err(Error::Spec(format!("unknown routing mode {s:?}")))
                }
            }
        }
    }
}

impl RoutingMode {
    /// Number of routed experts selected by top-k under this mode.
    pub fn routed_k(self, config: &ModelConfig) -> usize {
        match self {
            RoutingMode::Default => config.top_k,
            RoutingMode::SharedPlusTop(m) | RoutingMode::TopOnly(m) => m,
            RoutingMode::OnlyShared | RoutingMode::TopZero => 0,
        }
    }

    pub fn shared_enabled(self) -> bool {
        !matches!(self, RoutingMode::TopOnly(_) | RoutingMode::TopZero)
    }
}

/// Blocked experts, forced experts, suppressed heads and routing mode.
/// The default value is the null intervention.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub blocked_experts: BTreeSet<(usize, ExpertRef)>,
    pub forced_experts: BTreeSet<(usize, ExpertRef)>,
    pub suppressed_heads: BTreeSet<(usize, usize)>,
    pub routing_mode: RoutingMode,
}

impl InterventionSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn block(mut self, layer: usize, expert: ExpertRef) -> Self {
        self.blocked_experts.insert((layer, expert));
        self
    }

    pub fn force(mut self, layer: usize, expert: ExpertRef) -> Self {
        self.forced_experts.insert((layer, expert));
        self
    }

    pub fn suppress(mut self, layer: usize, head: usize) -> Self {
        self.suppressed_heads.insert((layer, head));
        self
    }

    pub fn with_mode(mut self, mode: RoutingMode) -> Self {
        self.routing_mode = mode;
        self
    }

    pub fn is_blocked(&self, layer: usize, expert: ExpertRef) -> bool {
        self.blocked_experts.contains(&(layer, expert))
    }

    pub fn is_forced(&self, layer: usize, expert: ExpertRef) -> bool {
        self.forced_experts.contains(&(layer, expert))
    }

    pub fn is_suppressed(&self, layer: usize, head: usize) -> bool {
        self.suppressed_heads.contains(&(layer, head))
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if let Some(x) = self.forced_experts.intersection(&self.blocked_experts).next() {
            return Err(Error::Spec(format!(
                "expert {}:{} is both forced and blocked",
                x.0, x.1
            )));
        }
        for &(l, e) in self.blocked_experts.iter().chain(&self.forced_experts) {
            if l >= config.num_layers {
                return Err(Error::Spec(format!("layer {l} out of range (model has {})", config.num_layers)));
            }
            match e {
                ExpertRef::Routed(j) if j >= config.num_experts => {
                    return Err(Error::Spec(format!(
                        "expert {l}:{j} out of range (model has {} experts per layer)",
                        config.num_experts
                    )))
                }
                ExpertRef::Shared if !config.has_shared_expert => {
                    return Err(Error::Spec(format!("expert {l}:s named but the model has no shared expert")))
                }
                _ => {}
            }
        }
        for &(l, h) in &self.suppressed_heads {
            if l >= config.num_layers || h >= config.num_heads {
                return Err(Error::Spec(format!("head {l}:{h} out of range")));
            }
        }
        match self.routing_mode {
            RoutingMode::SharedPlusTop(m) | RoutingMode::TopOnly(m) if m > config.num_experts => Err(
                Error::Spec(format!("routing mode asks for {m} experts, model has {}", config.num_experts)),
            ),
            RoutingMode::OnlyShared if !config.has_shared_expert => Err(Error::Config(
                "only_shared routing requires a shared expert".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Activation;

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            d_model: 4,
            num_heads: 1,
            head_dim: 4,
            vocab_size: 3,
            max_positions: 3,
            num_experts: 4,
            top_k: 2,
            has_shared_expert: false,
            expert_hidden: 2,
            shared_hidden: 0,
            activation: Activation::Relu,
            seed: 0,
        }
    }

    #[test]
    fn validation_rules() {
        let c = cfg();
        assert!(InterventionSpec::new().validate(&c).is_ok());
        let clash = InterventionSpec::new()
            .block(0, ExpertRef::Routed(1))
            .force(0, ExpertRef::Routed(1));
        assert!(matches!(clash.validate(&c), Err(Error::Spec(_))));
        let err = InterventionSpec::new().block(0, ExpertRef::Routed(9)).validate(&c).unwrap_err();
        assert!(err.to_string().contains("0:9"));
        let shared = InterventionSpec::new().with_mode(RoutingMode::OnlyShared);
        assert!(matches!(shared.validate(&c), Err(Error::Config(_))));
        assert!(InterventionSpec::new().suppress(2, 0).validate(&c).is_err());
    }

    #[test]
    fn mode_parsing() {
        for m in [
            RoutingMode::Default,
            RoutingMode::OnlyShared,
            RoutingMode::SharedPlusTop(4),
            RoutingMode::TopOnly(2),
            RoutingMode::TopZero,
        ] {
            assert_eq!(m.to_string().parse::<RoutingMode>().unwrap(), m);
        }
        assert_eq!("top_only:3".parse::<RoutingMode>().unwrap(), RoutingMode::TopOnly(3));
        assert!("nope".parse::<RoutingMode>().is_err());
    }
}
