// SPDX-License-Identifier: MIT OR Apache-2.0

//! Instrumented forward pass.
//!
//! Every intermediate needed downstream is recorded in a [`ForwardTrace`]:
//! the per-head attention summands, the pre-MoE residual `u = h + A`, the
//! gate logits and probabilities, the selected experts with their ungated
//! outputs, the MoE output `F` and the post-layer residual `h + A + F`.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::math::{self, axpy, dot, Matrix};
use crate::model::config::{Activation, ModelConfig};
use crate::model::intervention::{ExpertRef, InterventionSpec, RoutingMode};
use crate::model::weights::{Expert, ModelWeights};
use crate::scalar::Scalar;

/// Attention results for one layer, indexed `[position][head]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionOutput<T> {
    pub heads: Vec<Vec<Vec<T>>>,
    pub weights: Vec<Vec<Vec<T>>>,
    pub total: Vec<Vec<T>>,
}

/// One routed expert chosen by the gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selected<T> {
    pub expert: usize,
    /// Raw gate probability `g_{i,j}` (no renormalisation over the selection).
    pub weight: T,
    pub forced: bool,
}

/// Gate decision at one position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Routing<T> {
    /// `W_g u + b_g`, routed experts first, shared row last.
    pub logits: Vec<T>,
    /// Softmax over unmasked logits; masked entries are zero.
    pub probs: Vec<T>,
    pub active: Vec<Selected<T>>,
    /// Gate weight of the shared expert when it participates.
    pub shared_weight: Option<T>,
    pub num_routed: usize,
}

impl<T: Scalar> Routing<T> {
    /// Weight with which a routed expert entered `F` (zero if inactive).
    pub fn weight_of(&self, expert: usize) -> T {
        self.active
            .iter()
            .find(|s| s.expert == expert)
            .map_or(T::zero(), |s| s.weight)
    }

    pub fn is_active(&self, expert: usize) -> bool {
        self.active.iter().any(|s| s.expert == expert)
    }

    /// Gate probability of a slot; zero for a shared slot the model lacks.
    pub fn prob(&self, expert: ExpertRef) -> T {
        match expert {
            ExpertRef::Routed(j) if j < self.num_routed => self.probs[j],
            ExpertRef::Shared if self.probs.len() > self.num_routed => self.probs[self.num_routed],
            _ => T::zero(),
        }
    }
}

/// MoE block result at one position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeRecord<T> {
    pub routing: Routing<T>,
    /// Ungated `E_j(u)`, aligned with `routing.active`.
    pub expert_outputs: Vec<Vec<T>>,
    /// Ungated `E_s(u)` when the shared expert participates.
    pub shared_output: Option<Vec<T>>,
    /// `F = Σ g_j E_j(u) [+ g_s E_s(u)]`
    pub output: Vec<T>,
}

/// Everything recorded for one layer, each field indexed by position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace<T> {
    /// `h^{l-1}`
    pub input: Vec<Vec<T>>,
    pub attention: AttentionOutput<T>,
    /// `u^l = h^{l-1} + A^l`
    pub moe_input: Vec<Vec<T>>,
    pub moe: Vec<MoeRecord<T>>,
    /// `h^l = u^l + F^l`
    pub output: Vec<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace<T> {
    pub tokens: Vec<usize>,
    /// `h^0`: token plus position embedding.
    pub embedded: Vec<Vec<T>>,
    pub layers: Vec<LayerTrace<T>>,
    /// Final-layer log-probabilities per position.
    pub log_probs: Vec<Vec<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn last_position(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Residual entering layer `l` (`h^{l-1}`).
    pub fn layer_input(&self, l: usize, pos: usize) -> Result<&[T]> {
        self.layers
            .get(l)
            .and_then(|t| t.input.get(pos))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Trace(format!("no residual for layer {l} position {pos}")))
    }

    pub fn layer(&self, l: usize) -> Result<&LayerTrace<T>> {
        self.layers
            .get(l)
            .ok_or_else(|| Error::Trace(format!("trace has no layer {l}")))
    }

    /// Rank of `target` in the final distribution at `pos`.
    pub fn rank(&self, pos: usize, target: usize) -> Result<usize> {
        let lp = self
            .log_probs
            .get(pos)
            .ok_or_else(|| Error::Trace(format!("no log-probs at position {pos}")))?;
        rank_of(lp, target)
    }
}

/// 1-based rank of `target` in a descending sort that breaks ties by
/// ascending token id.
pub fn rank_of<T: Scalar>(scores: &[T], target: usize) -> Result<usize> {
    let s = *scores
        .get(target)
        .ok_or_else(|| domain(format!("target {target} outside vocabulary of {}", scores.len())))?;
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(t, &v)| v > s || (v == s && t < target))
        .count();
    Ok(ahead + 1)
}

fn check_dim<T>(v: &[T], d: usize, what: &str) -> Result<()> {
    if v.len() != d {
        return Err(Error::Shape(format!("{what}: expected dimension {d}, got {}", v.len())));
    }
    Ok(())
}

fn layer_ref<T>(w: &ModelWeights<T>, l: usize) -> Result<&crate::model::weights::Layer<T>> {
    w.layers
        .get(l)
        .ok_or_else(|| domain(format!("layer {l} out of range")))
}

/// Causal multi-head attention; suppressed heads contribute zero.
pub fn attention_layer<T: Scalar>(
    w: &ModelWeights<T>,
    l: usize,
    residuals: &[Vec<T>],
    spec: &InterventionSpec,
) -> Result<AttentionOutput<T>> {
    let cfg = &w.config;
    let layer = layer_ref(w, l)?;
    for r in residuals {
        check_dim(r, cfg.d_model, "attention input")?;
    }
    let t_len = residuals.len();
    let inv_sqrt = T::one() / T::c(cfg.head_dim as f64).sqrt();
    let mut heads = vec![Vec::with_capacity(cfg.num_heads); t_len];
    let mut weights = vec![Vec::with_capacity(cfg.num_heads); t_len];
    for (h, head) in layer.heads.iter().enumerate() {
        let suppressed = spec.is_suppressed(l, h);
        let keys: Vec<Vec<T>> = residuals.iter().map(|r| head.key.matvec(r)).collect::<Result<_>>()?;
        let values: Vec<Vec<T>> = residuals.iter().map(|r| head.value.matvec(r)).collect::<Result<_>>()?;
        for (i, r) in residuals.iter().enumerate() {
            let q = head.query.matvec(r)?;
            let scores: Vec<T> = keys[..=i].iter().map(|k| dot(&q, k) * inv_sqrt).collect();
            let attn = math::softmax(&scores)?;
            let out = if suppressed {
                vec![T::zero(); cfg.d_model]
            } else {
                let mut mixed = vec![T::zero(); cfg.head_dim];
                for (a, v) in attn.iter().zip(&values) {
                    axpy(*a, v, &mut mixed);
                }
                head.output.matvec(&mixed)?
            };
            heads[i].push(out);
            weights[i].push(attn);
        }
    }
    let total = heads
        .iter()
        .map(|per_head| {
            let mut acc = vec![T::zero(); cfg.d_model];
            for v in per_head {
                axpy(T::one(), v, &mut acc);
            }
            acc
        })
        .collect();
    Ok(AttentionOutput { heads, weights, total })
}

/// Routing decision for one residual vector.
///
/// Blocked slots are removed before the softmax so the surviving mass
/// renormalises. Forced experts join the selection with their probability
/// under the unmasked softmax.
pub fn gate<T: Scalar>(
    w: &ModelWeights<T>,
    l: usize,
    u: &[T],
    spec: &InterventionSpec,
) -> Result<Routing<T>> {
    let cfg = &w.config;
    let layer = layer_ref(w, l)?;
    check_dim(u, cfg.d_model, "gate input")?;
    let n = cfg.num_experts;
    let mode = spec.routing_mode;
    if mode == RoutingMode::OnlyShared && !cfg.has_shared_expert {
        return Err(Error::Config("only_shared routing requires a shared expert".into()));
    }
    let logits: Vec<T> = layer
        .gate
        .matvec(u)?
        .into_iter()
        .zip(&layer.gate_bias)
        .map(|(z, &b)| z + b)
        .collect();

    let shared_on = cfg.has_shared_expert && mode.shared_enabled() && !spec.is_blocked(l, ExpertRef::Shared);
    let mut open = vec![true; logits.len()];
    for (j, slot) in open.iter_mut().enumerate().take(n) {
        *slot = mode != RoutingMode::OnlyShared && !spec.is_blocked(l, ExpertRef::Routed(j));
    }
    if cfg.has_shared_expert {
        open[n] = shared_on;
    }

    let open_idx: Vec<usize> = (0..logits.len()).filter(|&i| open[i]).collect();
    let mut probs = vec![T::zero(); logits.len()];
    if !open_idx.is_empty() {
        let sub: Vec<T> = open_idx.iter().map(|&i| logits[i]).collect();
        for (&i, p) in open_idx.iter().zip(math::softmax(&sub)?) {
            probs[i] = p;
        }
    } else if mode != RoutingMode::TopZero {
        return Err(Error::EmptyRouting { layer: l });
    }

    let k = mode.routed_k(cfg);
    let candidates: Vec<usize> = (0..n).filter(|&j| open[j]).collect();
    if k > 0 && candidates.is_empty() {
        return Err(Error::EmptyRouting { layer: l });
    }
    let cand_probs: Vec<T> = candidates.iter().map(|&j| probs[j]).collect();
    let mut active: Vec<Selected<T>> = math::top_k_indices(&cand_probs, k.min(candidates.len()))?
        .into_iter()
        .map(|c| Selected {
            expert: candidates[c],
            weight: probs[candidates[c]],
            forced: false,
        })
        .collect();

    let forced: Vec<(usize, ExpertRef)> = spec
        .forced_experts
        .iter()
        .filter(|(fl, _)| *fl == l)
        .copied()
        .collect();
    let mut shared_weight = shared_on.then(|| probs[n]);
    if !forced.is_empty() {
        let raw = math::softmax(&logits)?;
        for (_, e) in forced {
            match e {
                ExpertRef::Routed(j) => {
                    if j >= n {
                        return Err(domain(format!("forced expert {l}:{j} out of range")));
                    }
                    if !active.iter().any(|s| s.expert == j) {
                        active.push(Selected {
                            expert: j,
                            weight: raw[j],
                            forced: true,
                        });
                    }
                }
                ExpertRef::Shared => {
                    if !cfg.has_shared_expert {
                        return Err(domain("forced shared expert on a model without one"));
                    }
                    if shared_weight.is_none() {
                        shared_weight = Some(raw[n]);
                    }
                }
            }
        }
    }
    Ok(Routing {
        logits,
        probs,
        active,
        shared_weight,
        num_routed: n,
    })
}

impl<T: Scalar> Expert<T> {
    /// Hidden activations `φ(W1 u + b)`.
    pub fn activations(&self, u: &[T], act: Activation) -> Result<Vec<T>> {
        Ok(self
            .w_in
            .matvec(u)?
            .into_iter()
            .zip(&self.b_in)
            .map(|(z, &b)| act.apply(z + b))
            .collect())
    }

    pub fn forward(&self, u: &[T], act: Activation) -> Result<Vec<T>> {
        let a = self.activations(u, act)?;
        self.w_out.matvec(&a)
    }
}

pub fn expert_ref<'a, T>(w: &'a ModelWeights<T>, l: usize, e: ExpertRef) -> Result<&'a Expert<T>> {
    let layer = layer_ref(w, l)?;
    match e {
        ExpertRef::Routed(j) => layer
            .experts
            .get(j)
            .ok_or_else(|| domain(format!("unknown expert {l}:{j}"))),
        ExpertRef::Shared => layer
            .shared
            .as_ref()
            .ok_or_else(|| domain(format!("layer {l} has no shared expert"))),
    }
}

/// `W2 φ(W1 u + b)` for one expert.
pub fn expert_forward<T: Scalar>(w: &ModelWeights<T>, l: usize, e: ExpertRef, u: &[T]) -> Result<Vec<T>> {
    check_dim(u, w.config.d_model, "expert input")?;
    expert_ref(w, l, e)?.forward(u, w.config.activation)
}

/// Gate then weighted expert sum at one position.
pub fn moe_layer<T: Scalar>(
    w: &ModelWeights<T>,
    l: usize,
    u: &[T],
    spec: &InterventionSpec,
) -> Result<MoeRecord<T>> {
    let routing = gate(w, l, u, spec)?;
    let mut output = vec![T::zero(); w.config.d_model];
    let mut expert_outputs = Vec::with_capacity(routing.active.len());
    for sel in &routing.active {
        let out = expert_forward(w, l, ExpertRef::Routed(sel.expert), u)?;
        axpy(sel.weight, &out, &mut output);
        expert_outputs.push(out);
    }
    let shared_output = match routing.shared_weight {
        Some(g) => {
            let out = expert_forward(w, l, ExpertRef::Shared, u)?;
            axpy(g, &out, &mut output);
            Some(out)
        }
        None => None,
    };
    Ok(MoeRecord {
        routing,
        expert_outputs,
        shared_output,
        output,
    })
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(domain("empty token sequence"));
    }
    if tokens.len() > cfg.max_positions {
        return Err(domain(format!(
            "sequence of {} tokens exceeds max_positions {}",
            tokens.len(),
            cfg.max_positions
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(domain(format!("token id {t} outside vocabulary of {}", cfg.vocab_size)));
    }
    Ok(())
}

/// Full instrumented forward pass.
pub fn forward<T: Scalar>(
    w: &ModelWeights<T>,
    tokens: &[usize],
    spec: &InterventionSpec,
) -> Result<ForwardTrace<T>> {
    let cfg = &w.config;
    check_tokens(cfg, tokens)?;
    spec.validate(cfg)?;
    let embedded: Vec<Vec<T>> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| math::add(w.token_embedding.row(t), w.position_embedding.row(i)))
        .collect();
    let mut h = embedded.clone();
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let attention = attention_layer(w, l, &h, spec)?;
        let moe_input: Vec<Vec<T>> = h.iter().zip(&attention.total).map(|(a, b)| math::add(a, b)).collect();
        let moe: Vec<MoeRecord<T>> = moe_input
            .iter()
            .map(|u| moe_layer(w, l, u, spec))
            .collect::<Result<_>>()?;
        let output: Vec<Vec<T>> = moe_input.iter().zip(&moe).map(|(u, m)| math::add(u, &m.output)).collect();
        let input = std::mem::replace(&mut h, output.clone());
        layers.push(LayerTrace {
            input,
            attention,
            moe_input,
            moe,
            output,
        });
    }
    let log_probs = h
        .iter()
        .map(|hid| logit_lens_log_probs(w, hid))
        .collect::<Result<_>>()?;
    Ok(ForwardTrace {
        tokens: tokens.to_vec(),
        embedded,
        layers,
        log_probs,
    })
}

/// `hidden · W_unembed`
pub fn unembed<T: Scalar>(w: &ModelWeights<T>, hidden: &[T]) -> Result<Vec<T>> {
    check_dim(hidden, w.config.d_model, "unembedding input")?;
    w.unembedding.vecmat(hidden)
}

pub fn logit_lens_log_probs<T: Scalar>(w: &ModelWeights<T>, hidden: &[T]) -> Result<Vec<T>> {
    math::log_softmax(&unembed(w, hidden)?)
}

/// `log_softmax(hidden · W_unembed)[target]`, applied to any residual vector.
pub fn logit_lens_logprob<T: Scalar>(w: &ModelWeights<T>, hidden: &[T], target: usize) -> Result<T> {
    if target >= w.config.vocab_size {
        return Err(domain(format!(
            "target {target} outside vocabulary of {}",
            w.config.vocab_size
        )));
    }
    let logits = unembed(w, hidden)?;
    Ok(logits[target] - math::log_sum_exp(&logits)?)
}

/// Unembedding columns as a `vocab x d_model` matrix (for cached projections).
pub fn unembedding_rows<T: Scalar>(w: &ModelWeights<T>) -> Matrix<T> {
    let u = &w.unembedding;
    Matrix::from_fn(u.cols(), u.rows(), |r, c| u.get(c, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::weights::init_model;
    use proptest::prelude::*;

    fn cfg(n: usize, k: usize, shared: bool) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            d_model: 6,
            num_heads: 2,
            head_dim: 3,
            vocab_size: 7,
            max_positions: 5,
            num_experts: n,
            top_k: k,
            has_shared_expert: shared,
            expert_hidden: 4,
            shared_hidden: 3,
            activation: Activation::Gelu,
            seed: 5,
        }
    }

    fn random(seed: u64, shared: bool) -> ModelWeights<f64> {
        let mut c = cfg(4, 2, shared);
        c.seed = seed;
        init_model(&c).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn single_token_attends_to_itself() {
        let w = random(1, true);
        let out = attention_layer(&w, 0, &[w.token_embedding.row(2).to_vec()], &InterventionSpec::default()).unwrap();
        for h in 0..2 {
            assert_eq!(out.weights[0][h], vec![1.0]);
        }
    }

    #[test]
    fn suppressing_every_head_zeroes_attention() {
        let w = random(2, true);
        let spec = InterventionSpec::new().suppress(1, 0).suppress(1, 1);
        let t = forward(&w, &[1, 4, 2], &spec).unwrap();
        for v in &t.layers[1].attention.total {
            assert!(v.iter().all(|&x| x == 0.0));
        }
        assert!(t.layers[0].attention.total.iter().any(|v| v.iter().any(|&x| x != 0.0)));
    }

    #[test]
    fn attention_total_is_sum_of_heads() {
        let w = random(3, false);
        let t = forward(&w, &[0, 5, 3, 3], &InterventionSpec::default()).unwrap();
        for layer in &t.layers {
            for (i, heads) in layer.attention.heads.iter().enumerate() {
                let sum = math::add(&heads[0], &heads[1]);
                assert!(close(&sum, &layer.attention.total[i], 1e-12));
            }
        }
    }

    fn gate_model(probs: &[f64]) -> ModelWeights<f64> {
        let mut w: ModelWeights<f64> = ModelWeights::zeros(&cfg(probs.len(), 2, false)).unwrap();
        w.layers[0].gate_bias = probs.iter().map(|p| p.ln()).collect();
        w
    }

    #[test]
    fn uniform_gate() {
        let w = gate_model(&[1.0; 4]);
        let r = gate(&w, 0, &[0.3; 6], &InterventionSpec::default()).unwrap();
        assert!(close(&r.probs, &[0.25; 4], 1e-15));
        let ids: Vec<usize> = r.active.iter().map(|s| s.expert).collect();
        assert_eq!(ids, vec![0, 1]);
    }

    #[test]
    fn blocking_renormalises_over_survivors() {
        let w = gate_model(&[0.5, 0.3, 0.15, 0.05]);
        let spec = InterventionSpec::new().block(0, ExpertRef::Routed(0));
        let r = gate(&w, 0, &[0.0; 6], &spec).unwrap();
        let ids: Vec<usize> = r.active.iter().map(|s| s.expert).collect();
        assert_eq!(ids, vec![1, 2]);
        assert!((r.active[0].weight - 0.6).abs() < 1e-12);
        assert!((r.active[1].weight - 0.3).abs() < 1e-12);
        assert_eq!(r.probs[0], 0.0);
    }

    #[test]
    fn blocking_everything_is_empty_routing() {
        let w = gate_model(&[0.5, 0.5]);
        let spec = InterventionSpec::new()
            .block(0, ExpertRef::Routed(0))
            .block(0, ExpertRef::Routed(1));
        assert!(matches!(gate(&w, 0, &[0.0; 6], &spec), Err(Error::EmptyRouting { layer: 0 })));
    }

    #[test]
    fn forced_expert_uses_unmasked_probability() {
        let w = gate_model(&[0.5, 0.3, 0.15, 0.05]);
        let spec = InterventionSpec::new().force(0, ExpertRef::Routed(3));
        let r = gate(&w, 0, &[0.0; 6], &spec).unwrap();
        assert_eq!(r.active.len(), 3);
        let forced = r.active.iter().find(|s| s.expert == 3).unwrap();
        assert!(forced.forced && (forced.weight - 0.05).abs() < 1e-12);
        // forcing an already selected expert is a no-op
        let again = gate(&w, 0, &[0.0; 6], &InterventionSpec::new().force(0, ExpertRef::Routed(0))).unwrap();
        assert_eq!(again, gate(&w, 0, &[0.0; 6], &InterventionSpec::default()).unwrap());
    }

    #[test]
    fn expert_zero_cases() {
        let w = random(4, true);
        let mut zero = w.clone();
        for e in &mut zero.layers[0].experts {
            e.b_in.iter_mut().for_each(|b| *b = 0.0);
        }
        assert!(expert_forward(&zero, 0, ExpertRef::Routed(1), &[0.0; 6])
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        let mut relu = zero;
        relu.config.activation = Activation::Relu;
        relu.layers[0].experts[0].b_in = vec![-100.0; 4];
        assert!(expert_forward(&relu, 0, ExpertRef::Routed(0), &[0.1; 6])
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
        assert!(matches!(expert_forward(&w, 0, ExpertRef::Routed(9), &[0.0; 6]), Err(Error::Domain(_))));
    }

    #[test]
    fn expert_matches_explicit_arithmetic() {
        let w = random(6, false);
        let e = &w.layers[1].experts[2];
        let u = [0.3, -0.1, 0.7, 0.2, -0.5, 0.05];
        let mut hidden = [0.0; 4];
        for (n, h) in hidden.iter_mut().enumerate() {
            let mut z = e.b_in[n];
            for c in 0..6 {
                z += e.w_in.get(n, c) * u[c];
            }
            *h = Activation::Gelu.apply(z);
        }
        let mut want = [0.0; 6];
        for (r, o) in want.iter_mut().enumerate() {
            for n in 0..4 {
                *o += e.w_out.get(r, n) * hidden[n];
            }
        }
        assert!(close(&expert_forward(&w, 1, ExpertRef::Routed(2), &u).unwrap(), &want, 1e-12));
    }

    #[test]
    fn top_zero_without_shared_gives_zero_moe() {
        let w = random(7, true);
        let spec = InterventionSpec::new().with_mode(RoutingMode::TopZero).block(0, ExpertRef::Shared);
        let m = moe_layer(&w, 0, &[0.2; 6], &spec).unwrap();
        assert!(m.output.iter().all(|&x| x == 0.0));
        assert!(m.routing.active.is_empty() && m.shared_output.is_none());
    }

    #[test]
    fn saturated_single_expert() {
        let mut c = cfg(3, 1, false);
        c.seed = 8;
        let mut w: ModelWeights<f64> = init_model(&c).unwrap();
        w.layers[0].gate = Matrix::zeros(3, 6);
        w.layers[0].gate_bias = vec![-1e4, 0.0, -1e4];
        let u = [0.4, 0.1, -0.2, 0.3, 0.0, 0.9];
        let m = moe_layer(&w, 0, &u, &InterventionSpec::default()).unwrap();
        assert!(close(&m.output, &expert_forward(&w, 0, ExpertRef::Routed(1), &u).unwrap(), 0.0));
    }

    #[test]
    fn hand_computed_forward() {
        let c = ModelConfig {
            num_layers: 1,
            d_model: 2,
            num_heads: 1,
            head_dim: 2,
            vocab_size: 3,
            max_positions: 1,
            num_experts: 1,
            top_k: 1,
            has_shared_expert: false,
            expert_hidden: 1,
            shared_hidden: 0,
            activation: Activation::Relu,
            seed: 0,
        };
        let mut w: ModelWeights<f64> = ModelWeights::zeros(&c).unwrap();
        w.token_embedding.set(0, 0, 1.0);
        w.position_embedding.set(0, 1, 0.5);
        let eye = Matrix::from_fn(2, 2, |r, c| if r == c { 1.0 } else { 0.0 });
        w.layers[0].heads[0].value = eye.clone();
        w.layers[0].heads[0].output = eye;
        w.layers[0].experts[0].w_in = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        w.layers[0].experts[0].b_in = vec![-1.0];
        w.layers[0].experts[0].w_out = Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        w.unembedding = Matrix::from_vec(2, 3, vec![1.0, 0.0, -1.0, 0.0, 1.0, 1.0]).unwrap();
        let t = forward(&w, &[0], &InterventionSpec::default()).unwrap();
        // h0 = [1, .5], A = [1, .5], u = [2, 1], F = [2, 0], h = [4, 1]
        assert_eq!(t.layers[0].output[0], vec![4.0, 1.0]);
        let want = [-0.049455609695646, -3.049455609695646, -7.049455609695646];
        assert!(close(&t.log_probs[0], &want, 1e-9));
    }

    #[test]
    fn logit_lens_basics() {
        let mut w = random(9, false);
        let h = [0.3, 0.1, -0.4, 0.8, 0.2, -0.6];
        let lp = logit_lens_logprob(&w, &h, 3).unwrap();
        let logits: Vec<f64> = (0..7).map(|t| (0..6).map(|c| h[c] * w.unembedding.get(c, t)).sum()).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        assert!((lp - (logits[3].exp() / z).ln()).abs() < 1e-12);
        assert!(matches!(logit_lens_logprob(&w, &h, 7), Err(Error::Domain(_))));
        w.unembedding = Matrix::zeros(6, 7);
        assert!((logit_lens_logprob(&w, &h, 0).unwrap() + 7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logit_lens_saturates_along_target_column() {
        let w = random(10, false);
        let col = w.unembedding.col(4);
        let big: Vec<f64> = col.iter().map(|x| x * 200.0).collect();
        let lp = logit_lens_logprob(&w, &big, 4).unwrap();
        assert!(lp <= 0.0 && lp > -1e-6, "{lp}");
    }

    #[test]
    fn bad_tokens_rejected() {
        let w = random(11, false);
        let spec = InterventionSpec::default();
        assert!(forward(&w, &[], &spec).is_err());
        assert!(forward(&w, &[7], &spec).is_err());
        assert!(forward(&w, &[0; 6], &spec).is_err());
    }

    #[test]
    fn rank_ties_by_token_id() {
        assert_eq!(rank_of(&[0.1, 0.5, 0.5, 0.2], 1).unwrap(), 1);
        assert_eq!(rank_of(&[0.1, 0.5, 0.5, 0.2], 2).unwrap(), 2);
        assert_eq!(rank_of(&[0.1, 0.5, 0.5, 0.2], 0).unwrap(), 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn trace_invariants(seed in 0u64..10_000, shared in any::<bool>(),
                            tokens in prop::collection::vec(0usize..7, 1..=5)) {
            let w = random(seed, shared);
            let t = forward(&w, &tokens, &InterventionSpec::default()).unwrap();
            prop_assert_eq!(&t, &forward(&w, &tokens, &InterventionSpec::default()).unwrap());
            for (l, layer) in t.layers.iter().enumerate() {
                for i in 0..tokens.len() {
                    let recomposed = math::add(&math::add(&layer.input[i], &layer.attention.total[i]), &layer.moe[i].output);
                    prop_assert!(close(&recomposed, &layer.output[i], 1e-9));
                    for row in &layer.attention.weights[i] {
                        prop_assert_eq!(row.len(), i + 1);
                        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    }
                    let m = &layer.moe[i];
                    prop_assert!((m.routing.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    prop_assert_eq!(m.routing.active.len(), 2);
                    prop_assert_eq!(m.shared_output.is_some(), shared);
                    // F recombined from recorded pieces
                    let mut f = vec![0.0; 6];
                    for (s, out) in m.routing.active.iter().zip(&m.expert_outputs) {
                        axpy(s.weight, out, &mut f);
                    }
                    if let (Some(g), Some(out)) = (m.routing.shared_weight, &m.shared_output) {
                        axpy(g, out, &mut f);
                    }
                    prop_assert!(close(&f, &m.output, 1e-12));
                    if l + 1 < t.layers.len() {
                        prop_assert_eq!(&layer.output[i], &t.layers[l + 1].input[i]);
                    }
                }
            }
        }

        #[test]
        fn blocking_removes_exactly_one_term(seed in 0u64..10_000, e in 0usize..4) {
            let w = random(seed, true);
            let u: Vec<f64> = w.token_embedding.row((seed % 7) as usize).to_vec();
            let spec = InterventionSpec::new().block(1, ExpertRef::Routed(e));
            let m = moe_layer(&w, 1, &u, &spec).unwrap();
            prop_assert!(!m.routing.is_active(e));
            prop_assert_eq!(m.routing.probs[e], 0.0);
            prop_assert!((m.routing.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let mut f = vec![0.0; 6];
            for s in &m.routing.active {
                axpy(s.weight, &expert_forward(&w, 1, ExpertRef::Routed(s.expert), &u).unwrap(), &mut f);
            }
            axpy(m.routing.shared_weight.unwrap(), &expert_forward(&w, 1, ExpertRef::Shared, &u).unwrap(), &mut f);
            prop_assert!(close(&f, &m.output, 1e-12));
        }
    }
}
