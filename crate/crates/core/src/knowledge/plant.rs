// SPDX-License-Identifier: MIT OR Apache-2.0

//! Constructive knowledge planting.
//!
//! The residual stream is split into orthogonal blocks:
//!
//! ```text
//! [ identity (dA) | position axes | class c_R | marker m_R | type t_R | default d0 | random ]
//! ```
//!
//! A copy head moves the subject's class coordinate (and a small answer-type
//! boost) to the query position; an identity head moves the subject's
//! identity vector. Refinement experts are routed on the class axis and
//! store each fact as key-value neurons keyed on the identity block. In the
//! deep preset a shared expert writes a relation marker that routes a
//! duplicate expert holding a second copy of every fact.

use std::collections::BTreeSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::dataset::{Dataset, PROMPT_LEN, QUERY_POS};
use crate::math::{dot, norm};
use crate::model::{forward, Activation, ExpertRef, ForwardTrace, InterventionSpec, ModelConfig, ModelWeights};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadAddr {
    pub layer: usize,
    pub head: usize,
}

impl fmt::Display for HeadAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.layer, self.head)
    }
}

/// A routed expert and the neurons it dedicates to one relation's facts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertSlot {
    pub layer: usize,
    pub expert: usize,
    pub first_neuron: usize,
    pub neurons_per_fact: usize,
}

impl ExpertSlot {
    /// Neuron indices used by fact number `k` of the relation.
    pub fn neurons(&self, k: usize) -> std::ops::Range<usize> {
        let s = self.first_neuron + k * self.neurons_per_fact;
        s..s + self.neurons_per_fact
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronRange {
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationPlan {
    pub relation: String,
    pub refinement: ExpertSlot,
    /// Shared-expert neurons: two marker neurons, then answer-type neurons.
    pub shared_neurons: Option<NeuronRange>,
    pub redundancy: Option<ExpertSlot>,
}

/// Construction constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantParams {
    /// Width of the token-identity block.
    pub identity_dim: usize,
    pub position_axes: usize,
    /// Largest allowed |cos| between identity vectors.
    pub max_identity_cos: f64,
    /// Query-cue weight on the default axis.
    pub query_default: f64,
    /// Filler unembedding weight on the default axis.
    pub filler_default: f64,
    /// Object unembedding weight on its relation's type axis.
    pub type_gain: f64,
    /// Type boost the copy head writes per unit of class.
    pub copy_type: f64,
    /// Attention score gap (after the 1/sqrt(head_dim) scale) for the previous position.
    pub score_gap: f64,
    pub subject_class_min: f64,
    pub subject_class_max: f64,
    pub gate_class_weight: f64,
    pub gate_bias: f64,
    pub gate_marker_weight: f64,
    pub marker_low: f64,
    pub marker_high: f64,
    pub type_neurons: usize,
    pub type_weight: f64,
    /// Activation of a fact neuron on its own prompt.
    pub key_activation: f64,
    /// Required log-prob lead of the answer over the runner-up.
    pub margin: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            identity_dim: 128,
            position_axes: 8,
            max_identity_cos: 0.2,
            query_default: 8.0,
            filler_default: 1.0,
            type_gain: 1.0,
            copy_type: 1.0,
            score_gap: 50.0,
            subject_class_min: 0.5,
            subject_class_max: 1.0,
            gate_class_weight: 4.4,
            gate_bias: -0.2,
            gate_marker_weight: 1.2,
            marker_low: 0.1,
            marker_high: 0.3,
            type_neurons: 22,
            type_weight: 0.15,
            key_activation: 5.0,
            margin: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantPlan {
    pub preset: String,
    pub copy_head: HeadAddr,
    pub identity_head: HeadAddr,
    pub shared_layer: Option<usize>,
    pub relations: Vec<RelationPlan>,
    pub params: PlantParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Deep,
    Shallow,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deep" => Ok(Preset::Deep),
            "shallow" => Ok(Preset::Shallow),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected deep or shallow)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Deep => "deep",
            Preset::Shallow => "shallow",
        })
    }
}

/// Identity-block width for a vocabulary: wide enough for rejection
/// sampling at `|cos| <= 0.2` to finish quickly.
pub fn identity_dim_for(vocab: usize) -> usize {
    if vocab <= 240 {
        128
    } else {
        128.max(32 * (vocab * 3).div_ceil(5 * 32))
    }
}

/// Model shape and plan sized for `dataset`.
pub fn preset(kind: Preset, dataset: &Dataset, seed: u64) -> Result<(ModelConfig, PlantPlan)> {
    let populated = dataset.populated_relations();
    let r = populated.len();
    let max_facts = populated
        .iter()
        .map(|&i| dataset.facts.iter().filter(|f| f.relation == i).count())
        .max()
        .unwrap_or(0);
    let per_fact = if max_facts == 0 { 3 } else { 3.max(24usize.div_ceil(max_facts)) };
    let expert_hidden = 64.max((max_facts * per_fact).div_ceil(8) * 8);
    let params = PlantParams {
        identity_dim: identity_dim_for(dataset.vocab_size()),
        ..PlantParams::default()
    };
    let da = params.identity_dim;
    let deep = kind == Preset::Deep;
    let shared_width = 2 + params.type_neurons;
    let config = ModelConfig {
        num_layers: if deep { 8 } else { 4 },
        d_model: 2 * da,
        num_heads: 2,
        head_dim: da,
        vocab_size: dataset.vocab_size(),
        max_positions: params.position_axes,
        num_experts: if deep { 16.max(2 * r) } else { 16.max(r) },
        top_k: if deep { 4 } else { 2 },
        has_shared_expert: deep,
        expert_hidden,
        shared_hidden: if deep { (shared_width * r.max(1)).div_ceil(8) * 8 } else { 0 },
        activation: Activation::Relu,
        seed: seed::derive(seed, "plant"),
    };
    let refine_layer = if deep { 5 } else { 2 };
    let relations = populated
        .iter()
        .enumerate()
        .map(|(i, &rel)| RelationPlan {
            relation: dataset.relations[rel].name.clone(),
            refinement: ExpertSlot {
                layer: refine_layer,
                expert: i,
                first_neuron: 0,
                neurons_per_fact: per_fact,
            },
            shared_neurons: deep.then_some(NeuronRange {
                start: i * shared_width,
                len: shared_width,
            }),
            redundancy: deep.then_some(ExpertSlot {
                layer: refine_layer,
                expert: r + i,
                first_neuron: 0,
                neurons_per_fact: 1,
            }),
        })
        .collect();
    let plan = PlantPlan {
        preset: kind.to_string(),
        copy_head: HeadAddr { layer: 0, head: 0 },
        identity_head: HeadAddr { layer: 0, head: 1 },
        shared_layer: deep.then_some(3),
        relations,
        params,
    };
    Ok((config, plan))
}

/// Offsets of the residual blocks.
#[derive(Clone, Copy, Debug)]
struct Layout {
    identity: usize,
    position: usize,
    class: usize,
    marker: usize,
    kind: usize,
    default: usize,
    random: usize,
    random_len: usize,
}

impl Layout {
    fn new(config: &ModelConfig, params: &PlantParams, relations: usize) -> Result<Self> {
        let da = params.identity_dim;
        let position = da;
        let class = position + params.position_axes;
        let marker = class + relations;
        let kind = marker + relations;
        let default = kind + relations;
        let random = default + 1;
        if random + 16 > config.d_model {
            return Err(Error::Capacity(format!(
                "d_model {} leaves fewer than 16 free output dimensions (layout needs {random} + 16)",
                config.d_model
            )));
        }
        Ok(Self {
            identity: 0,
            position,
            class,
            marker,
            kind,
            default,
            random,
            random_len: config.d_model - random,
        })
    }
}

/// Summary numbers from a planting run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantReport {
    pub alpha_primary: f64,
    pub alpha_duplicate: Option<f64>,
    pub shared_gate: Option<f64>,
    /// Smallest gap between a key's own pre-activation and its best rival.
    pub min_key_gap: f64,
    /// Smallest baseline lead of the answer over the runner-up (nats).
    pub worst_margin: f64,
}

fn cap(msg: String) -> Error {
    Error::Capacity(msg)
}

impl PlantPlan {
    /// Checks the plan against a config and dataset.
    pub fn validate(&self, config: &ModelConfig, dataset: &Dataset) -> Result<()> {
        config.validate()?;
        let p = &self.params;
        if config.vocab_size != dataset.vocab_size() {
            return Err(Error::Config(format!(
                "config vocab_size {} differs from dataset vocabulary {}",
                config.vocab_size,
                dataset.vocab_size()
            )));
        }
        if config.max_positions < PROMPT_LEN {
            return Err(cap(format!("max_positions {} below prompt length {PROMPT_LEN}", config.max_positions)));
        }
        for h in [self.copy_head, self.identity_head] {
            if h.layer >= config.num_layers || h.head >= config.num_heads {
                return Err(cap(format!("head {h} outside the model")));
            }
        }
        if self.copy_head == self.identity_head {
            return Err(Error::Config("copy head and identity head must differ".into()));
        }
        let r = self.relations.len();
        if p.identity_dim > config.head_dim
            || p.position_axes > config.head_dim
            || r > config.head_dim
            || p.position_axes < PROMPT_LEN
        {
            return Err(cap(format!(
                "head_dim {} too small for identity block {}, {} position axes and {r} relations",
                config.head_dim, p.identity_dim, p.position_axes
            )));
        }
        if p.marker_high > p.subject_class_min || p.marker_low >= p.marker_high {
            return Err(Error::Config("marker thresholds must satisfy low < high <= subject_class_min".into()));
        }
        Layout::new(config, p, r)?;
        let heads_layer = self.copy_head.layer.max(self.identity_head.layer);
        if let Some(ls) = self.shared_layer {
            if !config.has_shared_expert {
                return Err(Error::Config("plan uses a shared expert the config does not have".into()));
            }
            if ls >= config.num_layers || ls <= self.copy_head.layer {
                return Err(cap(format!("shared layer {ls} must follow the copy head and exist")));
            }
        }
        let mut names = BTreeSet::new();
        let mut slots = BTreeSet::new();
        let mut shared_used = vec![false; config.shared_hidden];
        for rp in &self.relations {
            if !names.insert(rp.relation.as_str()) {
                return Err(Error::Config(format!("relation {} planned twice", rp.relation)));
            }
            let ri = dataset.relation_index(&rp.relation)?;
            let facts = dataset.facts.iter().filter(|f| f.relation == ri).count();
            let mut check_slot = |s: &ExpertSlot, what: &str| -> Result<()> {
                if s.layer >= config.num_layers || s.expert >= config.num_experts {
                    return Err(cap(format!("{what} expert {}:{} outside the model", s.layer, s.expert)));
                }
                if s.layer <= heads_layer {
                    return Err(cap(format!("{what} layer {} must follow the planted heads", s.layer)));
                }
                if Some(s.layer) == self.shared_layer {
                    return Err(cap(format!("{what} layer {} coincides with the shared layer", s.layer)));
                }
                if s.neurons_per_fact == 0 || s.first_neuron + facts * s.neurons_per_fact > config.expert_hidden {
                    return Err(cap(format!(
                        "{what} expert {}:{} needs {} neurons for {facts} facts, has {}",
                        s.layer,
                        s.expert,
                        s.first_neuron + facts * s.neurons_per_fact,
                        config.expert_hidden
                    )));
                }
                if !slots.insert((s.layer, s.expert)) {
                    return Err(cap(format!("expert {}:{} assigned twice", s.layer, s.expert)));
                }
                Ok(())
            };
            check_slot(&rp.refinement, "refinement")?;
            if let Some(d) = &rp.redundancy {
                check_slot(d, "duplicate")?;
                if d.layer != rp.refinement.layer {
                    return Err(Error::Config("duplicate expert must share the refinement layer".into()));
                }
                match (self.shared_layer, rp.shared_neurons) {
                    (Some(ls), Some(_)) if ls < d.layer => {}
                    _ => {
                        return Err(Error::Config(
                            "a duplicate expert needs shared marker neurons in an earlier layer".into(),
                        ))
                    }
                }
            }
            if let Some(range) = rp.shared_neurons {
                if self.shared_layer.is_none() {
                    return Err(Error::Config("shared neurons planned without a shared layer".into()));
                }
                if range.len != 2 + p.type_neurons || range.start + range.len > config.shared_hidden {
                    return Err(cap(format!(
                        "shared neurons {}..{} do not fit (need {} of {})",
                        range.start,
                        range.start + range.len,
                        2 + p.type_neurons,
                        config.shared_hidden
                    )));
                }
                for n in range.start..range.start + range.len {
                    if std::mem::replace(&mut shared_used[n], true) {
                        return Err(cap(format!("shared neuron {n} assigned twice")));
                    }
                }
            }
        }
        Ok(())
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Near-orthogonal unit vectors by rejection sampling.
fn identity_vectors(rng: &mut ChaCha8Rng, count: usize, dim: usize, max_cos: f64) -> Result<Vec<Vec<f64>>> {
    const TRIES: usize = 200_000;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for i in 0..count {
        let mut accepted = None;
        for _ in 0..TRIES {
            let v = random_unit(rng, dim);
            if out.iter().all(|u| dot(u, &v).abs() <= max_cos) {
                accepted = Some(v);
                break;
            }
        }
        out.push(accepted.ok_or_else(|| {
            cap(format!(
                "could not place identity vector {i} of {count} in {dim} dimensions at |cos| <= {max_cos}"
            ))
        })?);
    }
    Ok(out)
}

struct FactRef {
    prompt: usize,
    plan: usize,
    ordinal: usize,
    subject: usize,
    object: usize,
}

/// Plants `dataset` into a fresh model following `plan`.
pub fn plant_model(config: &ModelConfig, dataset: &Dataset, plan: &PlantPlan) -> Result<ModelWeights<f64>> {
    plant_model_with_report(config, dataset, plan).map(|(w, _)| w)
}

pub fn plant_model_with_report(
    config: &ModelConfig,
    dataset: &Dataset,
    plan: &PlantPlan,
) -> Result<(ModelWeights<f64>, PlantReport)> {
    plan.validate(config, dataset)?;
    let p = &plan.params;
    let r = plan.relations.len();
    let lay = Layout::new(config, p, r)?;
    let v = config.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut w = ModelWeights::<f64>::zeros(config)?;

    let plan_of: Vec<Option<usize>> = (0..dataset.relations.len())
        .map(|ri| plan.relations.iter().position(|rp| rp.relation == dataset.relations[ri].name))
        .collect();

    // embeddings
    let ident = identity_vectors(&mut rng, v, p.identity_dim, p.max_identity_cos)?;
    for (t, e) in ident.iter().enumerate() {
        w.token_embedding.row_mut(t)[lay.identity..lay.identity + p.identity_dim].copy_from_slice(e);
    }
    for (ri, rel) in dataset.relations.iter().enumerate() {
        w.token_embedding.set(rel.query_cue, lay.default, p.query_default);
        if let Some(pi) = plan_of[ri] {
            for &s in &rel.subjects {
                let beta = rng.gen_range(p.subject_class_min..=p.subject_class_max);
                w.token_embedding.set(s, lay.class + pi, beta);
            }
        }
    }
    for i in 0..config.max_positions.min(p.position_axes) {
        w.position_embedding.set(i, lay.position + i, 1.0);
    }

    // unembedding
    for t in 0..v {
        let u = random_unit(&mut rng, lay.random_len);
        for (k, x) in u.into_iter().enumerate() {
            w.unembedding.set(lay.random + k, t, x);
        }
    }
    for t in dataset.fillers() {
        w.unembedding.set(lay.default, t, p.filler_default);
    }
    for (ri, rel) in dataset.relations.iter().enumerate() {
        if let Some(pi) = plan_of[ri] {
            for &o in &rel.answer_space {
                w.unembedding.set(lay.kind + pi, o, p.type_gain);
            }
        }
    }

    // previous-token heads
    let a = (p.score_gap * (config.head_dim as f64).sqrt()).sqrt();
    for addr in [plan.copy_head, plan.identity_head] {
        let head = &mut w.layers[addr.layer].heads[addr.head];
        for i in 0..p.position_axes.min(config.max_positions) {
            head.key.set(i, lay.position + i, a);
            if i >= 1 {
                head.query.set(i - 1, lay.position + i, a);
            }
        }
    }
    {
        let head = &mut w.layers[plan.copy_head.layer].heads[plan.copy_head.head];
        for pi in 0..r {
            head.value.set(pi, lay.class + pi, 1.0);
            head.output.set(lay.class + pi, pi, 1.0);
            head.output.set(lay.kind + pi, pi, p.copy_type);
        }
        let head = &mut w.layers[plan.identity_head.layer].heads[plan.identity_head.head];
        for k in 0..p.identity_dim {
            head.value.set(k, lay.identity + k, 1.0);
            head.output.set(lay.identity + k, k, 1.0);
        }
    }

    // shared expert: relation marker and answer-type neurons
    let shared_gate = plan.shared_layer.map(|_| 1.0 / config.gate_rows() as f64);
    if let (Some(ls), Some(gs)) = (plan.shared_layer, shared_gate) {
        let shared = w.layers[ls].shared.as_mut().expect("validated");
        let marker_scale = 1.0 / (gs * (p.marker_high - p.marker_low));
        for (pi, rp) in plan.relations.iter().enumerate() {
            let Some(range) = rp.shared_neurons else { continue };
            let n0 = range.start;
            shared.w_in.set(n0, lay.class + pi, 1.0);
            shared.b_in[n0] = -p.marker_low;
            shared.w_out.set(lay.marker + pi, n0, marker_scale);
            shared.w_in.set(n0 + 1, lay.class + pi, 1.0);
            shared.b_in[n0 + 1] = -p.marker_high;
            shared.w_out.set(lay.marker + pi, n0 + 1, -marker_scale);
            for n in n0 + 2..n0 + range.len {
                shared.w_in.set(n, lay.class + pi, 1.0);
                shared.b_in[n] = -p.marker_low;
                shared.w_out.set(lay.kind + pi, n, p.type_weight);
            }
        }
    }

    // router rows
    for (pi, rp) in plan.relations.iter().enumerate() {
        let s = rp.refinement;
        w.layers[s.layer].gate.set(s.expert, lay.class + pi, p.gate_class_weight);
        w.layers[s.layer].gate_bias[s.expert] = p.gate_bias;
        if let Some(d) = rp.redundancy {
            w.layers[d.layer].gate.set(d.expert, lay.marker + pi, p.gate_marker_weight);
            w.layers[d.layer].gate_bias[d.expert] = p.gate_bias;
        }
    }
    w.round_to_f32();

    let mut facts = Vec::new();
    for (pi, rp) in plan.relations.iter().enumerate() {
        let ri = dataset.relation_index(&rp.relation)?;
        for (ordinal, (idx, f)) in dataset
            .facts
            .iter()
            .enumerate()
            .filter(|(_, f)| f.relation == ri)
            .enumerate()
        {
            facts.push(FactRef {
                prompt: idx,
                plan: pi,
                ordinal,
                subject: f.subject,
                object: f.object,
            });
        }
    }
    if facts.is_empty() {
        return Ok((
            w,
            PlantReport {
                alpha_primary: 0.0,
                alpha_duplicate: None,
                shared_gate,
                min_key_gap: f64::INFINITY,
                worst_margin: f64::INFINITY,
            },
        ));
    }

    let run = |w: &ModelWeights<f64>, spec: &InterventionSpec| -> Result<Vec<ForwardTrace<f64>>> {
        facts
            .iter()
            .map(|f| forward(w, &dataset.prompts[f.prompt].tokens, spec))
            .collect()
    };

    // keys: each fact neuron fires on its own prompt and nowhere else
    let base = run(&w, &InterventionSpec::default())?;
    let mut min_gap = f64::INFINITY;
    let mut key_layers: Vec<(usize, Vec<ExpertSlot>)> = Vec::new();
    for rp in &plan.relations {
        let mut slots = vec![rp.refinement];
        slots.extend(rp.redundancy);
        key_layers.push((rp.refinement.layer, slots));
    }
    for (fi, f) in facts.iter().enumerate() {
        let rs = &ident[f.subject];
        let layer = plan.relations[f.plan].refinement.layer;
        let pre = |t: &ForwardTrace<f64>| {
            let u = &t.layers[layer].moe_input[QUERY_POS];
            dot(rs, &u[lay.identity..lay.identity + p.identity_dim])
        };
        let own = pre(&base[fi]);
        let rival = facts
            .iter()
            .zip(&base)
            .filter(|(g, _)| g.prompt != f.prompt)
            .map(|(_, t)| pre(t))
            .fold(f64::NEG_INFINITY, f64::max);
        let rival = if rival.is_finite() { rival } else { own - 2.0 };
        let gap = own - rival;
        min_gap = min_gap.min(gap);
        if gap <= 1e-3 {
            return Err(Error::Planting {
                reason: format!("key for prompt {} cannot separate its subject from the others", f.prompt),
                worst_margin: gap,
            });
        }
        let theta = 0.5 * (own + rival);
        let kappa = p.key_activation / (own - theta);
        for slot in &key_layers[f.plan].1 {
            let e = &mut w.layers[slot.layer].experts[slot.expert];
            for n in slot.neurons(f.ordinal) {
                for (k, x) in rs.iter().enumerate() {
                    e.w_in.set(n, lay.identity + k, kappa * x);
                }
                e.b_in[n] = -kappa * theta;
            }
        }
    }
    w.round_to_f32();

    let unembedding = w.unembedding.clone();
    let unit_value = |o: usize| -> Vec<f64> {
        let col = unembedding.col(o);
        let n = norm(&col);
        col.into_iter().map(|x| x / n).collect()
    };

    // value scale: answer must lead by `margin` under the given spec and gate weight
    let solve = |w: &ModelWeights<f64>,
                 slot_of: &dyn Fn(usize) -> ExpertSlot,
                 spec_of: &dyn Fn(usize) -> InterventionSpec,
                 weight_of: &dyn Fn(usize, &ForwardTrace<f64>) -> f64|
     -> Result<f64> {
        let mut alpha: f64 = 1.0;
        for (fi, f) in facts.iter().enumerate() {
            let slot = slot_of(f.plan);
            if slot.neurons_per_fact == 0 {
                continue;
            }
            let t = forward(w, &dataset.prompts[f.prompt].tokens, &spec_of(f.plan))?;
            let e = &w.layers[slot.layer].experts[slot.expert];
            let acts = e.activations(&t.layers[slot.layer].moe_input[QUERY_POS], config.activation)?;
            let act: f64 = slot.neurons(f.ordinal).map(|n| acts[n]).sum();
            let g = weight_of(fi, &t);
            let dir = unit_value(f.object);
            let lp = &t.log_probs[QUERY_POS];
            let proj = w.unembedding.vecmat(&dir)?;
            for tok in 0..v {
                if tok == f.object {
                    continue;
                }
                let need = p.margin * 1.02 - (lp[f.object] - lp[tok]);
                if need <= 0.0 {
                    continue;
                }
                let gain = g * act * (proj[f.object] - proj[tok]);
                if gain <= 1e-12 {
                    return Err(Error::Planting {
                        reason: format!("answer of prompt {} cannot overtake token {tok}", f.prompt),
                        worst_margin: lp[f.object] - lp[tok],
                    });
                }
                alpha = alpha.max(need / gain);
            }
        }
        Ok(alpha)
    };

    let set_values = |w: &mut ModelWeights<f64>, pick: &dyn Fn(&RelationPlan) -> Option<ExpertSlot>, alpha: f64| {
        for f in &facts {
            let Some(slot) = pick(&plan.relations[f.plan]) else { continue };
            let dir = unit_value(f.object);
            let e = &mut w.layers[slot.layer].experts[slot.expert];
            for n in slot.neurons(f.ordinal) {
                for (row, x) in dir.iter().enumerate() {
                    e.w_out.set(row, n, alpha * x);
                }
            }
        }
    };

    // primary copy: forced in with its raw gate probability after the copy head is silenced
    let alpha_primary = solve(
        &w,
        &|pi| plan.relations[pi].refinement,
        &|pi| {
            let s = plan.relations[pi].refinement;
            InterventionSpec::new()
                .suppress(plan.copy_head.layer, plan.copy_head.head)
                .force(s.layer, ExpertRef::Routed(s.expert))
        },
        &|fi, t| {
            let s = plan.relations[facts[fi].plan].refinement;
            t.layers[s.layer].moe[QUERY_POS].routing.prob(ExpertRef::Routed(s.expert))
        },
    )?;

    // duplicate copy: alone (primary blocked) at its smallest baseline gate weight
    let mut min_dup_weight = vec![f64::INFINITY; r];
    for (f, t) in facts.iter().zip(&base) {
        if let Some(d) = plan.relations[f.plan].redundancy {
            let g = t.layers[d.layer].moe[QUERY_POS].routing.prob(ExpertRef::Routed(d.expert));
            min_dup_weight[f.plan] = min_dup_weight[f.plan].min(g);
        }
    }
    let alpha_duplicate = if plan.relations.iter().any(|rp| rp.redundancy.is_some()) {
        let a = solve(
            &w,
            &|pi| {
                plan.relations[pi].redundancy.unwrap_or(ExpertSlot {
                    neurons_per_fact: 0,
                    ..plan.relations[pi].refinement
                })
            },
            &|pi| {
                let s = plan.relations[pi].refinement;
                InterventionSpec::new().block(s.layer, ExpertRef::Routed(s.expert))
            },
            &|fi, _| min_dup_weight[facts[fi].plan],
        );
        Some(a?)
    } else {
        None
    };

    set_values(&mut w, &|rp| Some(rp.refinement), alpha_primary);
    if let Some(ad) = alpha_duplicate {
        set_values(&mut w, &|rp| rp.redundancy, ad);
    }
    w.round_to_f32();

    // verification
    let mut worst = f64::INFINITY;
    let mut worst_prompt = 0;
    for (f, t) in facts.iter().zip(run(&w, &InterventionSpec::default())?) {
        let lp = &t.log_probs[QUERY_POS];
        let rival = lp
            .iter()
            .enumerate()
            .filter(|&(tok, _)| tok != f.object)
            .map(|(_, &x)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        let m = lp[f.object] - rival;
        if m < worst {
            worst = m;
            worst_prompt = f.prompt;
        }
    }
    if worst < p.margin {
        return Err(Error::Planting {
            reason: format!("prompt {worst_prompt} misses the required margin of {}", p.margin),
            worst_margin: worst,
        });
    }
    Ok((
        w,
        PlantReport {
            alpha_primary,
            alpha_duplicate,
            shared_gate,
            min_key_gap: min_gap,
            worst_margin: worst,
        },
    ))
}
