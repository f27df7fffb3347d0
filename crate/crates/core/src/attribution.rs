// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit-lens importance of heads and expert neurons.
//!
//! A component's score is the change in the target's log-probability when
//! its contribution vector is added to the residual it reads from, with the
//! final unembedding applied directly to the intermediate vector.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::knowledge::Dataset;
use crate::math::{self, Matrix};
use crate::model::forward::{expert_ref, unembed};
use crate::model::{forward, logit_lens_logprob, ExpertRef, ForwardTrace, InterventionSpec, ModelWeights};
use crate::scalar::Scalar;

/// Where a scored unit lives inside a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Site {
    AttnHead { head: usize },
    RoutedExpertNeuron { expert: usize, neuron: usize },
    SharedExpertNeuron { neuron: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub site: Site,
}

impl NeuronId {
    pub fn head(layer: usize, head: usize) -> Self {
        Self { layer, site: Site::AttnHead { head } }
    }

    pub fn routed(layer: usize, expert: usize, neuron: usize) -> Self {
        Self {
            layer,
            site: Site::RoutedExpertNeuron { expert, neuron },
        }
    }

    pub fn shared(layer: usize, neuron: usize) -> Self {
        Self {
            layer,
            site: Site::SharedExpertNeuron { neuron },
        }
    }

    /// The expert this neuron belongs to, if any.
    pub fn expert(&self) -> Option<ExpertRef> {
        match self.site {
            Site::AttnHead { .. } => None,
            Site::RoutedExpertNeuron { expert, .. } => Some(ExpertRef::Routed(expert)),
            Site::SharedExpertNeuron { .. } => Some(ExpertRef::Shared),
        }
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.site {
            Site::AttnHead { head } => write!(f, "H{}:{}", self.layer, head),
            Site::RoutedExpertNeuron { expert, neuron } => write!(f, "E{}:{}/N{}", self.layer, expert, neuron),
            Site::SharedExpertNeuron { neuron } => write!(f, "E{}:s/N{}", self.layer, neuron),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRecord {
    pub neuron: NeuronId,
    /// Nats.
    pub score: f64,
    pub prompt: usize,
    pub target: usize,
}

/// Whole-module gain selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Module {
    Ffn,
    Attn,
}

fn missing(what: String) -> Error {
    Error::Trace(what)
}

/// `log p(target | base + v) - log p(target | base)`
pub fn vector_importance<T: Scalar>(w: &ModelWeights<T>, base: &[T], v: &[T], target: usize) -> Result<T> {
    let with = math::add(base, v);
    Ok(logit_lens_logprob(w, &with, target)? - logit_lens_logprob(w, base, target)?)
}

fn layer_at<T: Scalar>(trace: &ForwardTrace<T>, l: usize) -> Result<&crate::model::LayerTrace<T>> {
    trace.layers.get(l).ok_or_else(|| missing(format!("trace has no layer {l}")))
}

/// Head score at the last position: head output against `h^{l-1}`.
pub fn head_importance<T: Scalar>(
    w: &ModelWeights<T>,
    trace: &ForwardTrace<T>,
    l: usize,
    head: usize,
    target: usize,
) -> Result<T> {
    let pos = trace.last_position();
    let layer = layer_at(trace, l)?;
    let v = layer
        .attention
        .heads
        .get(pos)
        .and_then(|h| h.get(head))
        .ok_or_else(|| missing(format!("trace has no output for head {l}:{head}")))?;
    vector_importance(w, &layer.input[pos], v, target)
}

/// `a_n * W2[:, n]` for one neuron of one expert at the last position.
pub fn neuron_contribution<T: Scalar>(
    w: &ModelWeights<T>,
    trace: &ForwardTrace<T>,
    l: usize,
    expert: ExpertRef,
    neuron: usize,
) -> Result<Vec<T>> {
    let pos = trace.last_position();
    let u = &layer_at(trace, l)?.moe_input[pos];
    let e = expert_ref(w, l, expert)?;
    if neuron >= e.hidden() {
        return Err(domain(format!(
            "neuron {neuron} outside expert {l}:{expert} of width {}",
            e.hidden()
        )));
    }
    let z = math::dot(e.w_in.row(neuron), u) + e.b_in[neuron];
    let a = w.config.activation.apply(z);
    Ok(e.w_out.col(neuron).into_iter().map(|c| a * c).collect())
}

/// Ungated neuron score against `u^l`; shared-expert neurons carry the
/// shared gate weight.
pub fn ffn_neuron_importance<T: Scalar>(
    w: &ModelWeights<T>,
    trace: &ForwardTrace<T>,
    l: usize,
    site: ExpertRef,
    neuron: usize,
    target: usize,
) -> Result<T> {
    let pos = trace.last_position();
    let mut v = neuron_contribution(w, trace, l, site, neuron)?;
    if site == ExpertRef::Shared {
        let g = layer_at(trace, l)?.moe[pos].routing.shared_weight.unwrap_or(T::zero());
        v = math::scale(g, &v);
    }
    vector_importance(w, &layer_at(trace, l)?.moe_input[pos], &v, target)
}

/// Gated routed-expert neuron score: the contribution scaled by the
/// expert's gate weight (zero when not selected).
pub fn expert_neuron_importance<T: Scalar>(
    w: &ModelWeights<T>,
    trace: &ForwardTrace<T>,
    l: usize,
    expert: usize,
    neuron: usize,
    target: usize,
) -> Result<T> {
    let pos = trace.last_position();
    let layer = layer_at(trace, l)?;
    let g = layer.moe[pos].routing.weight_of(expert);
    let v = math::scale(g, &neuron_contribution(w, trace, l, ExpertRef::Routed(expert), neuron)?);
    vector_importance(w, &layer.moe_input[pos], &v, target)
}

/// Whole-module gain at the last position.
pub fn layer_gain<T: Scalar>(
    w: &ModelWeights<T>,
    trace: &ForwardTrace<T>,
    l: usize,
    module: Module,
    target: usize,
) -> Result<T> {
    let pos = trace.last_position();
    let layer = layer_at(trace, l)?;
    match module {
        Module::Ffn => vector_importance(w, &layer.moe_input[pos], &layer.moe[pos].output, target),
        Module::Attn => vector_importance(w, &layer.input[pos], &layer.attention.total[pos], target),
    }
}

/// Per-expert `W2^T W_unembed` projections, so one neuron's logit shift is a
/// scaled row lookup.
#[derive(Clone, Debug)]
pub struct ScoringCache<T> {
    routed: Vec<Vec<Matrix<T>>>,
    shared: Vec<Option<Matrix<T>>>,
}

fn project<T: Scalar>(w: &ModelWeights<T>, w_out: &Matrix<T>) -> Result<Matrix<T>> {
    let hidden = w_out.cols();
    let v = w.config.vocab_size;
    let mut p = Matrix::zeros(hidden, v);
    for n in 0..hidden {
        let col = w_out.col(n);
        if col.iter().all(|x| *x == T::zero()) {
            continue;
        }
        p.row_mut(n).copy_from_slice(&w.unembedding.vecmat(&col)?);
    }
    Ok(p)
}

impl<T: Scalar> ScoringCache<T> {
    pub fn new(w: &ModelWeights<T>) -> Result<Self> {
        let mut routed = Vec::with_capacity(w.layers.len());
        let mut shared = Vec::with_capacity(w.layers.len());
        for layer in &w.layers {
            routed.push(layer.experts.iter().map(|e| project(w, &e.w_out)).collect::<Result<_>>()?);
            shared.push(layer.shared.as_ref().map(|e| project(w, &e.w_out)).transpose()?);
        }
        Ok(Self { routed, shared })
    }

    fn projection(&self, l: usize, e: ExpertRef) -> &Matrix<T> {
        match e {
            ExpertRef::Routed(j) => &self.routed[l][j],
            ExpertRef::Shared => self.shared[l].as_ref().expect("shared projection"),
        }
    }
}

fn score_shift<T: Scalar>(base_logits: &[T], base_lse: T, shift: T, row: &[T], target: usize) -> Result<T> {
    if shift == T::zero() {
        return Ok(T::zero());
    }
    let logits: Vec<T> = base_logits.iter().zip(row).map(|(&z, &p)| z + shift * p).collect();
    let lse = math::log_sum_exp(&logits)?;
    Ok((logits[target] - lse) - (base_logits[target] - base_lse))
}

/// Scores every head and every neuron of every participating expert at the
/// last position of one prompt.
pub fn score_prompt<T: Scalar>(
    w: &ModelWeights<T>,
    cache: &ScoringCache<T>,
    trace: &ForwardTrace<T>,
    prompt: usize,
    target: usize,
) -> Result<Vec<ImportanceRecord>> {
    if target >= w.config.vocab_size {
        return Err(domain(format!("target {target} outside vocabulary")));
    }
    let pos = trace.last_position();
    let act = w.config.activation;
    let mut out = Vec::new();
    let mut push = |neuron: NeuronId, score: T| {
        out.push(ImportanceRecord {
            neuron,
            score: score.to_f64_lossy(),
            prompt,
            target,
        })
    };
    for (l, layer) in trace.layers.iter().enumerate() {
        let h = &layer.input[pos];
        let hz = unembed(w, h)?;
        let h_lse = math::log_sum_exp(&hz)?;
        for (j, v) in layer.attention.heads[pos].iter().enumerate() {
            let score = if v.iter().all(|x| *x == T::zero()) {
                T::zero()
            } else {
                let z = unembed(w, &math::add(h, v))?;
                (z[target] - math::log_sum_exp(&z)?) - (hz[target] - h_lse)
            };
            push(NeuronId::head(l, j), score);
        }
        let u = &layer.moe_input[pos];
        let uz = unembed(w, u)?;
        let u_lse = math::log_sum_exp(&uz)?;
        let routing = &layer.moe[pos].routing;
        let mut experts: Vec<(ExpertRef, T)> = routing
            .active
            .iter()
            .map(|s| (ExpertRef::Routed(s.expert), s.weight))
            .collect();
        if let Some(g) = routing.shared_weight {
            experts.push((ExpertRef::Shared, g));
        }
        for (e, g) in experts {
            let ex = expert_ref(w, l, e)?;
            let acts = ex.activations(u, act)?;
            let proj = cache.projection(l, e);
            for (n, &a) in acts.iter().enumerate() {
                let score = score_shift(&uz, u_lse, g * a, proj.row(n), target)?;
                let id = match e {
                    ExpertRef::Routed(j) => NeuronId::routed(l, j, n),
                    ExpertRef::Shared => NeuronId::shared(l, n),
                };
                push(id, score);
            }
        }
    }
    Ok(out)
}

/// Mean score per neuron over the prompts present in `records`, absent
/// neurons counting as zero, sorted descending with ties by neuron id.
pub fn mean_scores(records: &[ImportanceRecord]) -> Vec<(NeuronId, f64)> {
    let prompts: BTreeSet<usize> = records.iter().map(|r| r.prompt).collect();
    let mut sums: BTreeMap<NeuronId, f64> = BTreeMap::new();
    // fixed reduction order: by prompt, then record order
    let mut ordered: Vec<&ImportanceRecord> = records.iter().collect();
    ordered.sort_by_key(|r| r.prompt);
    for r in ordered {
        *sums.entry(r.neuron).or_insert(0.0) += r.score;
    }
    let n = prompts.len().max(1) as f64;
    let mut means: Vec<(NeuronId, f64)> = sums.into_iter().map(|(id, s)| (id, s / n)).collect();
    means.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    means
}

/// Top `k` neurons by mean score.
pub fn rank_neurons(records: &[ImportanceRecord], k: usize) -> Result<Vec<(NeuronId, f64)>> {
    let means = mean_scores(records);
    if k > means.len() {
        return Err(domain(format!("k = {k} exceeds the {} distinct neurons", means.len())));
    }
    Ok(means.into_iter().take(k).collect())
}

/// Membership bucket: an expert at a layer, or the attention heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Owner {
    Expert { layer: usize, expert: ExpertRef },
    Attention,
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Owner::Expert { layer, expert } => write!(f, "E{layer}:{expert}"),
            Owner::Attention => f.write_str("attention"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    /// Count per owner, descending, ties by layer then expert id.
    pub counts: Vec<(Owner, usize)>,
    /// Up to five experts (attention excluded).
    pub top_experts: Vec<(Owner, usize)>,
    pub total: usize,
    pub routed: usize,
    pub shared: usize,
    pub attention: usize,
    pub routed_fraction: f64,
    pub shared_fraction: f64,
}

fn owner_order(a: &(Owner, usize), b: &(Owner, usize)) -> std::cmp::Ordering {
    let key = |o: &Owner| match *o {
        Owner::Expert { layer, expert } => {
            let id = match expert {
                ExpertRef::Routed(j) => j,
                ExpertRef::Shared => usize::MAX,
            };
            (0, layer, id)
        }
        Owner::Attention => (1, 0, 0),
    };
    b.1.cmp(&a.1).then(key(&a.0).cmp(&key(&b.0)))
}

pub fn expert_membership(neurons: &[NeuronId]) -> Membership {
    let mut counts: BTreeMap<Owner, usize> = BTreeMap::new();
    let (mut routed, mut shared, mut attention) = (0, 0, 0);
    for n in neurons {
        let owner = match n.expert() {
            Some(e) => {
                if e == ExpertRef::Shared {
                    shared += 1;
                } else {
                    routed += 1;
                }
                Owner::Expert { layer: n.layer, expert: e }
            }
            None => {
                attention += 1;
                Owner::Attention
            }
        };
        *counts.entry(owner).or_insert(0) += 1;
    }
    let mut counts: Vec<(Owner, usize)> = counts.into_iter().collect();
    counts.sort_by(owner_order);
    let top_experts = counts
        .iter()
        .filter(|(o, _)| *o != Owner::Attention)
        .take(5)
        .copied()
        .collect();
    let total = neurons.len();
    let frac = |c: usize| if total == 0 { 0.0 } else { c as f64 / total as f64 };
    Membership {
        counts,
        top_experts,
        total,
        routed,
        shared,
        attention,
        routed_fraction: frac(routed),
        shared_fraction: frac(shared),
    }
}

/// `|A ∩ B| / k` for two neuron sets of equal size `k`.
pub fn neuron_overlap(a: &[NeuronId], b: &[NeuronId]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(domain(format!("neuron sets differ in size ({} vs {})", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(domain("neuron sets are empty"));
    }
    let sa: BTreeSet<&NeuronId> = a.iter().collect();
    let common = b.iter().filter(|n| sa.contains(n)).count();
    Ok(common as f64 / a.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedNeuron {
    pub rank: usize,
    pub neuron: NeuronId,
    pub mean_score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGain {
    pub layer: usize,
    pub ffn: f64,
    pub attn: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub relation: String,
    pub topk: usize,
    pub prompts: usize,
    pub ranked: Vec<RankedNeuron>,
    pub membership: Membership,
    /// Mean per-layer module gains over the relation's prompts.
    pub layer_gains: Vec<LayerGain>,
}

/// All importance records of one relation's prompts under `spec`.
pub fn relation_records<T: Scalar>(
    w: &ModelWeights<T>,
    cache: &ScoringCache<T>,
    dataset: &Dataset,
    relation: &str,
    spec: &InterventionSpec,
) -> Result<Vec<ImportanceRecord>> {
    dataset.relation_index(relation)?;
    let mut records = Vec::new();
    for i in dataset.prompt_indices(relation) {
        let p = &dataset.prompts[i];
        let trace = forward(w, &p.tokens, spec)?;
        records.extend(score_prompt(w, cache, &trace, p.id, p.answer_id)?);
    }
    Ok(records)
}

/// Per-prompt layer gain profiles, one `Vec<LayerGain>` per prompt.
pub fn gain_profiles<T: Scalar>(
    w: &ModelWeights<T>,
    dataset: &Dataset,
    prompts: &[usize],
    spec: &InterventionSpec,
) -> Result<Vec<Vec<LayerGain>>> {
    prompts
        .iter()
        .map(|&i| {
            let p = &dataset.prompts[i];
            let trace = forward(w, &p.tokens, spec)?;
            (0..w.config.num_layers)
                .map(|l| {
                    Ok(LayerGain {
                        layer: l,
                        ffn: layer_gain(w, &trace, l, Module::Ffn, p.answer_id)?.to_f64_lossy(),
                        attn: layer_gain(w, &trace, l, Module::Attn, p.answer_id)?.to_f64_lossy(),
                    })
                })
                .collect()
        })
        .collect()
}

/// Mean of per-prompt profiles in prompt order.
pub fn mean_profile(profiles: &[Vec<LayerGain>], num_layers: usize) -> Vec<LayerGain> {
    let n = profiles.len().max(1) as f64;
    (0..num_layers)
        .map(|l| {
            let (mut f, mut a) = (0.0, 0.0);
            for p in profiles {
                f += p[l].ffn;
                a += p[l].attn;
            }
            LayerGain {
                layer: l,
                ffn: f / n,
                attn: a / n,
            }
        })
        .collect()
}

/// Ranks neurons for one relation and summarises expert membership.
pub fn attribute_relation<T: Scalar>(
    w: &ModelWeights<T>,
    dataset: &Dataset,
    relation: &str,
    topk: usize,
) -> Result<AttributionReport> {
    let cache = ScoringCache::new(w)?;
    let spec = InterventionSpec::default();
    let records = relation_records(w, &cache, dataset, relation, &spec)?;
    let prompts = dataset.prompt_indices(relation);
    let ranked: Vec<RankedNeuron> = if topk == 0 {
        Vec::new()
    } else {
        rank_neurons(&records, topk)?
            .into_iter()
            .enumerate()
            .map(|(i, (neuron, mean_score))| RankedNeuron {
                rank: i + 1,
                neuron,
                mean_score,
            })
            .collect()
    };
    let ids: Vec<NeuronId> = ranked.iter().map(|r| r.neuron).collect();
    let profiles = gain_profiles(w, dataset, &prompts, &spec)?;
    Ok(AttributionReport {
        relation: relation.to_string(),
        topk,
        prompts: prompts.len(),
        membership: expert_membership(&ids),
        ranked,
        layer_gains: mean_profile(&profiles, w.config.num_layers),
    })
}

impl AttributionReport {
    pub fn neuron_ids(&self) -> Vec<NeuronId> {
        self.ranked.iter().map(|r| r.neuron).collect()
    }

    /// Experts with at least one ranked neuron, by count (ties by layer, id).
    pub fn ranked_experts(&self) -> Vec<(usize, ExpertRef)> {
        self.membership
            .counts
            .iter()
            .filter_map(|(o, _)| match *o {
                Owner::Expert { layer, expert } => Some((layer, expert)),
                Owner::Attention => None,
            })
            .collect()
    }

    /// CSV with columns relation, layer, site, expert, neuron, mean_score, rank.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["relation", "layer", "site", "expert", "neuron", "mean_score", "rank"])?;
        for r in &self.ranked {
            let (site, expert, neuron) = match r.neuron.site {
                Site::AttnHead { head } => ("attn".to_string(), String::new(), head.to_string()),
                Site::RoutedExpertNeuron { expert, neuron } => ("routed".into(), expert.to_string(), neuron.to_string()),
                Site::SharedExpertNeuron { neuron } => ("shared".into(), "s".into(), neuron.to_string()),
            };
            wtr.write_record([
                self.relation.clone(),
                r.neuron.layer.to_string(),
                site,
                expert,
                neuron,
                r.mean_score.to_string(),
                r.rank.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save(&self, json_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(json_path, serde_json::to_string_pretty(self)? + "\n")?;
        self.write_csv(std::fs::File::create(csv_path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Activation, ModelConfig};
    use proptest::prelude::*;

    fn model(seed: u64, shared: bool) -> ModelWeights<f64> {
        init_model(&ModelConfig {
            num_layers: 2,
            d_model: 8,
            num_heads: 2,
            head_dim: 4,
            vocab_size: 9,
            max_positions: 4,
            num_experts: 4,
            top_k: 2,
            has_shared_expert: shared,
            expert_hidden: 5,
            shared_hidden: 3,
            activation: Activation::Gelu,
            seed,
        })
        .unwrap()
    }

    fn two_pass(w: &ModelWeights<f64>, base: &[f64], v: &[f64], t: usize) -> f64 {
        // independent recomputation: explicit logits and log-sum-exp
        let lp = |h: &[f64]| {
            let z: Vec<f64> = (0..w.config.vocab_size)
                .map(|c| (0..h.len()).map(|r| h[r] * w.unembedding.get(r, c)).sum())
                .collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            z[t] - m - z.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        };
        let with: Vec<f64> = base.iter().zip(v).map(|(a, b)| a + b).collect();
        lp(&with) - lp(base)
    }

    #[test]
    fn zero_head_output_scores_zero() {
        let mut w = model(1, true);
        w.layers[1].heads[0].output = Matrix::zeros(8, 4);
        let t = forward(&w, &[1, 2, 3], &InterventionSpec::default()).unwrap();
        assert_eq!(head_importance(&w, &t, 1, 0, 4).unwrap(), 0.0);
        let t = forward(&w, &[1, 2, 3], &InterventionSpec::new().suppress(0, 1)).unwrap();
        assert_eq!(head_importance(&w, &t, 0, 1, 4).unwrap(), 0.0);
    }

    #[test]
    fn inactive_neuron_and_unselected_expert_score_zero() {
        let mut w = model(2, false);
        w.config.activation = Activation::Relu;
        w.layers[0].experts[1].b_in[3] = -1e3;
        let t = forward(&w, &[0, 5], &InterventionSpec::default()).unwrap();
        assert_eq!(ffn_neuron_importance(&w, &t, 0, ExpertRef::Routed(1), 3, 2).unwrap(), 0.0);
        let off = (0..4).find(|&j| !t.layers[1].moe[1].routing.is_active(j)).unwrap();
        assert_eq!(expert_neuron_importance(&w, &t, 1, off, 0, 2).unwrap(), 0.0);
    }

    #[test]
    fn decomposition_reconstructs_expert_output() {
        let w = model(3, true);
        let t = forward(&w, &[3, 1, 4], &InterventionSpec::default()).unwrap();
        for e in [ExpertRef::Routed(2), ExpertRef::Shared] {
            let mut sum = vec![0.0; 8];
            for n in 0..expert_ref(&w, 1, e).unwrap().hidden() {
                math::axpy(1.0, &neuron_contribution(&w, &t, 1, e, n).unwrap(), &mut sum);
            }
            let direct = crate::model::expert_forward(&w, 1, e, &t.layers[1].moe_input[2]).unwrap();
            assert!(sum.iter().zip(&direct).all(|(a, b)| (a - b).abs() < 1e-9));
        }
        assert!(neuron_contribution(&w, &t, 1, ExpertRef::Routed(0), 5).is_err());
    }

    #[test]
    fn gate_scaling_identity() {
        let w = model(4, false);
        let t = forward(&w, &[2, 2, 7], &InterventionSpec::default()).unwrap();
        let s = &t.layers[0].moe[2].routing.active[0];
        let v = math::scale(s.weight, &neuron_contribution(&w, &t, 0, ExpertRef::Routed(s.expert), 1).unwrap());
        let direct = vector_importance(&w, &t.layers[0].moe_input[2], &v, 6).unwrap();
        assert_eq!(expert_neuron_importance(&w, &t, 0, s.expert, 1, 6).unwrap(), direct);
    }

    #[test]
    fn unit_gate_matches_ffn_score() {
        let mut w = model(5, false);
        w.layers[1].gate = Matrix::zeros(4, 8);
        w.layers[1].gate_bias = vec![0.0, 1e4, 0.0, 0.0];
        let t = forward(&w, &[1, 1], &InterventionSpec::default()).unwrap();
        assert_eq!(t.layers[1].moe[1].routing.weight_of(1), 1.0);
        for n in 0..5 {
            assert_eq!(
                expert_neuron_importance(&w, &t, 1, 1, n, 3).unwrap(),
                ffn_neuron_importance(&w, &t, 1, ExpertRef::Routed(1), n, 3).unwrap()
            );
        }
    }

    #[test]
    fn layer_gain_zero_when_module_silent() {
        let w = model(6, false);
        let spec = InterventionSpec::new().suppress(0, 0).suppress(0, 1);
        let t = forward(&w, &[4, 2], &spec).unwrap();
        assert_eq!(layer_gain(&w, &t, 0, Module::Attn, 1).unwrap(), 0.0);
    }

    #[test]
    fn cached_scores_match_direct_functions() {
        let w = model(7, true);
        let cache = ScoringCache::new(&w).unwrap();
        let t = forward(&w, &[5, 0, 8], &InterventionSpec::default()).unwrap();
        for r in score_prompt(&w, &cache, &t, 0, 8).unwrap() {
            let direct = match r.neuron.site {
                Site::AttnHead { head } => head_importance(&w, &t, r.neuron.layer, head, 8),
                Site::RoutedExpertNeuron { expert, neuron } => {
                    expert_neuron_importance(&w, &t, r.neuron.layer, expert, neuron, 8)
                }
                Site::SharedExpertNeuron { neuron } => {
                    ffn_neuron_importance(&w, &t, r.neuron.layer, ExpertRef::Shared, neuron, 8)
                }
            }
            .unwrap();
            assert!((direct - r.score).abs() < 1e-10, "{} {direct} {}", r.neuron, r.score);
        }
    }

    fn rec(neuron: NeuronId, score: f64, prompt: usize) -> ImportanceRecord {
        ImportanceRecord {
            neuron,
            score,
            prompt,
            target: 0,
        }
    }

    #[test]
    fn ranking_rules() {
        let a = NeuronId::routed(1, 0, 3);
        let b = NeuronId::head(0, 1);
        let c = NeuronId::shared(2, 0);
        let recs = vec![rec(a, 2.0, 0), rec(b, 1.0, 0), rec(b, 1.0, 1), rec(c, 2.0, 1)];
        // means: a = 1, b = 1, c = 1 -> ties by (layer, site)
        let r = rank_neurons(&recs, 3).unwrap();
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![b, a, c]);
        assert!(rank_neurons(&recs, 0).unwrap().is_empty());
        assert!(rank_neurons(&recs, 4).is_err());
    }

    #[test]
    fn membership_counts() {
        let mut ids = Vec::new();
        for n in 0..40 {
            ids.push(NeuronId::routed(3, 7, n));
        }
        for n in 0..35 {
            ids.push(NeuronId::routed(1, 2, n));
        }
        for n in 0..25 {
            ids.push(NeuronId::shared(2, n));
        }
        let m = expert_membership(&ids);
        let counts: Vec<usize> = m.top_experts.iter().map(|c| c.1).collect();
        assert_eq!(counts, vec![40, 35, 25]);
        assert_eq!(m.top_experts[0].0, Owner::Expert { layer: 3, expert: ExpertRef::Routed(7) });
        assert_eq!(m.routed_fraction, 0.75);
        let only_shared = expert_membership(&ids[75..]);
        assert_eq!(only_shared.routed_fraction, 0.0);
        let quarter: Vec<NeuronId> = ids[..25].iter().chain(&ids[75..]).chain(&ids[75..]).chain(&ids[75..]).copied().collect();
        assert_eq!(expert_membership(&quarter).routed_fraction, 0.25);
    }

    #[test]
    fn overlap_cases() {
        let a: Vec<NeuronId> = (0..10).map(|n| NeuronId::routed(0, 0, n)).collect();
        let b: Vec<NeuronId> = (5..15).map(|n| NeuronId::routed(0, 0, n)).collect();
        let c: Vec<NeuronId> = (0..10).map(|n| NeuronId::shared(0, n)).collect();
        assert_eq!(neuron_overlap(&a, &a).unwrap(), 1.0);
        assert_eq!(neuron_overlap(&a, &b).unwrap(), 0.5);
        assert_eq!(neuron_overlap(&a, &c).unwrap(), 0.0);
        assert!(neuron_overlap(&a, &b[..3]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn scores_equal_two_pass_oracle(seed in 0u64..5000, tokens in prop::collection::vec(0usize..9, 1..=4),
                                        target in 0usize..9, l in 0usize..2, n in 0usize..5) {
            let w = model(seed, true);
            let t = forward(&w, &tokens, &InterventionSpec::default()).unwrap();
            let pos = tokens.len() - 1;
            let lt = &t.layers[l];
            for h in 0..2 {
                let s = head_importance(&w, &t, l, h, target).unwrap();
                prop_assert!((s - two_pass(&w, &lt.input[pos], &lt.attention.heads[pos][h], target)).abs() < 1e-12);
            }
            let sel = lt.moe[pos].routing.active[0].clone();
            let v = neuron_contribution(&w, &t, l, ExpertRef::Routed(sel.expert), n).unwrap();
            let s = expert_neuron_importance(&w, &t, l, sel.expert, n, target).unwrap();
            prop_assert!((s - two_pass(&w, &lt.moe_input[pos], &math::scale(sel.weight, &v), target)).abs() < 1e-12);
            let s = ffn_neuron_importance(&w, &t, l, ExpertRef::Routed(sel.expert), n, target).unwrap();
            prop_assert!((s - two_pass(&w, &lt.moe_input[pos], &v, target)).abs() < 1e-12);
        }
    }
}
