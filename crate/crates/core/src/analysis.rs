// SPDX-License-Identifier: MIT OR Apache-2.0

//! Retrieval metrics, layer-gain summaries and head/expert correlation.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::attribution::{gain_profiles, head_importance, mean_profile, score_prompt, LayerGain, ScoringCache, Site};
use crate::error::{domain, Error, Result};
use crate::knowledge::{Dataset, HeadAddr};
use crate::model::{forward, ForwardTrace, InterventionSpec, ModelWeights};
use crate::scalar::Scalar;
use crate::stats::{pearson, CorrelationResult};

/// Fraction of answers ranked within the top 10.
pub fn hit_at_10(ranks: &[usize]) -> Result<f64> {
    check_ranks(ranks)?;
    Ok(ranks.iter().filter(|&&r| r <= 10).count() as f64 / ranks.len() as f64)
}

/// Mean reciprocal rank.
pub fn mrr(ranks: &[usize]) -> Result<f64> {
    check_ranks(ranks)?;
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

fn check_ranks(ranks: &[usize]) -> Result<()> {
    if ranks.is_empty() {
        return Err(domain("no ranks"));
    }
    if ranks.contains(&0) {
        return Err(domain("ranks are 1-based"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Answer rank per prompt, in evaluation order.
    pub ranks: Vec<usize>,
    pub hit_at_10: f64,
    pub mrr: f64,
}

impl EvalResult {
    pub fn from_ranks(ranks: Vec<usize>) -> Result<Self> {
        Ok(Self {
            hit_at_10: hit_at_10(&ranks)?,
            mrr: mrr(&ranks)?,
            ranks,
        })
    }
}

fn answer_rank<T: Scalar>(trace: &ForwardTrace<T>, pos: usize, answer: usize) -> Result<usize> {
    trace.rank(pos, answer)
}

/// Evaluates the listed prompts.
pub fn evaluate_prompts<T: Scalar>(
    w: &ModelWeights<T>,
    dataset: &Dataset,
    prompts: &[usize],
    spec: &InterventionSpec,
) -> Result<EvalResult> {
    dataset.check_vocab(w.config.vocab_size)?;
    let ranks = prompts
        .iter()
        .map(|&i| {
            let p = dataset
                .prompts
                .get(i)
                .ok_or_else(|| Error::Dataset(format!("no prompt at index {i}")))?;
            let trace = forward(w, &p.tokens, spec)?;
            answer_rank(&trace, p.query_pos, p.answer_id)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_ranks(ranks)
}

/// Evaluates every prompt of the dataset.
pub fn evaluate<T: Scalar>(w: &ModelWeights<T>, dataset: &Dataset, spec: &InterventionSpec) -> Result<EvalResult> {
    let all: Vec<usize> = (0..dataset.prompts.len()).collect();
    evaluate_prompts(w, dataset, &all, spec)
}

/// Total FFN gain per layer.
pub fn layer_efficiency(total_ffn_gain: f64, num_layers: usize) -> Result<f64> {
    if num_layers == 0 {
        return Err(domain("layer count must be positive"));
    }
    Ok(total_ffn_gain / num_layers as f64)
}

/// `mean / L * 100`.
pub fn relative_position(mean_peak: f64, num_layers: usize) -> Result<f64> {
    if num_layers == 0 {
        return Err(domain("layer count must be positive"));
    }
    Ok(mean_peak / num_layers as f64 * 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakPosition {
    /// Mean 1-based argmax layer.
    pub mean_layer: f64,
    pub relative_pct: f64,
}

/// Per-prompt argmax of FFN gain (ties to the lowest layer), averaged.
pub fn peak_gain_position(profiles: &[Vec<LayerGain>]) -> Result<PeakPosition> {
    if profiles.is_empty() {
        return Err(domain("no gain profiles"));
    }
    let num_layers = profiles[0].len();
    let mut sum = 0.0;
    for p in profiles {
        if p.len() != num_layers || p.is_empty() {
            return Err(domain("gain profiles must share a positive length"));
        }
        let mut best = 0;
        for (l, g) in p.iter().enumerate() {
            if g.ffn > p[best].ffn {
                best = l;
            }
        }
        sum += (best + 1) as f64;
    }
    let mean_layer = sum / profiles.len() as f64;
    Ok(PeakPosition {
        mean_layer,
        relative_pct: relative_position(mean_layer, num_layers)?,
    })
}

/// Prefix sums.
pub fn cumulative_curve(gains: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    gains
        .iter()
        .map(|g| {
            acc += g;
            acc
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    /// 1-based inclusive layer range.
    pub first: usize,
    pub last: usize,
    pub gain: f64,
    /// Percent of the total, present only when the total is positive.
    pub share_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageBreakdown {
    pub total: f64,
    pub stages: Vec<Stage>,
}

fn stages_from_ends(ends: &[usize], num_layers: usize) -> Vec<RangeInclusive<usize>> {
    let mut out = Vec::new();
    let mut start = 1;
    for &e in ends.iter().chain([&num_layers]) {
        if e >= start {
            out.push(start..=e);
            start = e + 1;
        }
    }
    out
}

/// Thirds of `1..=L`; empty stages are dropped for very shallow models.
pub fn thirds(num_layers: usize) -> Vec<RangeInclusive<usize>> {
    let end = |i: usize| ((i * num_layers) as f64 / 3.0).round() as usize;
    stages_from_ends(&[end(1), end(2)], num_layers)
}

/// The 1-13 / 14-19 / 20-24 split of a 24-layer model scaled to `L`.
pub fn proportional_stages(num_layers: usize) -> Vec<RangeInclusive<usize>> {
    let end = |k: usize| ((k * num_layers) as f64 / 24.0).round() as usize;
    stages_from_ends(&[end(13), end(19)], num_layers)
}

pub fn stage_contributions(gains: &[f64], stages: &[RangeInclusive<usize>]) -> Result<StageBreakdown> {
    let mut next = 1;
    for s in stages {
        if *s.start() != next || s.end() < s.start() {
            return Err(domain(format!("stage {s:?} does not continue the partition at layer {next}")));
        }
        next = s.end() + 1;
    }
    if next != gains.len() + 1 {
        return Err(domain(format!(
            "stages cover layers 1..{} but the profile has {} layers",
            next - 1,
            gains.len()
        )));
    }
    let total: f64 = gains.iter().sum();
    let stages = stages
        .iter()
        .map(|s| {
            let gain: f64 = gains[s.start() - 1..*s.end()].iter().sum();
            Stage {
                first: *s.start(),
                last: *s.end(),
                gain,
                share_pct: (total > 0.0).then(|| gain / total * 100.0),
            }
        })
        .collect();
    Ok(StageBreakdown { total, stages })
}

/// Which per-prompt quantity stands for an expert in the correlation scan.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertSeries {
    #[default]
    GateProb,
    /// Summed gated neuron importance.
    Importance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExpertAddr {
    pub layer: usize,
    pub expert: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelation {
    pub head: HeadAddr,
    pub expert: ExpertAddr,
    /// `None` when either series is constant.
    pub result: Option<CorrelationResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadStat {
    pub head: HeadAddr,
    pub mean_importance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertStat {
    pub expert: ExpertAddr,
    /// Fraction of prompts with the expert selected at the answer position.
    pub frequency: f64,
    pub mean_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub series: ExpertSeries,
    pub prompts: usize,
    pub pairs: Vec<PairCorrelation>,
    pub top_heads: Vec<HeadStat>,
    pub top_experts: Vec<ExpertStat>,
    /// Up to three non-degenerate pairs with the largest r.
    pub top_pairs: Vec<PairCorrelation>,
}

impl CorrelationReport {
    pub fn degenerate_pairs(&self) -> impl Iterator<Item = &PairCorrelation> {
        self.pairs.iter().filter(|p| p.result.is_none())
    }

    pub fn best_pair(&self) -> Option<&PairCorrelation> {
        self.top_pairs.first()
    }

    /// CSV with columns head_layer, head, expert_layer, expert, r, p, n;
    /// degenerate pairs have empty r and p.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["head_layer", "head", "expert_layer", "expert", "r", "p", "n"])?;
        for p in &self.pairs {
            let (r, pv) = match &p.result {
                Some(c) => (c.r.to_string(), c.p.to_string()),
                None => (String::new(), String::new()),
            };
            wtr.write_record([
                p.head.layer.to_string(),
                p.head.head.to_string(),
                p.expert.layer.to_string(),
                p.expert.expert.to_string(),
                r,
                pv,
                self.prompts.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Spread at float-noise level counts as constant.
fn is_constant(x: &[f64]) -> bool {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    sd <= 1e-12 * (1.0 + mean.abs())
}

/// Every head of the model.
pub fn all_heads<T>(w: &ModelWeights<T>) -> Vec<HeadAddr> {
    let c = &w.config;
    (0..c.num_layers)
        .flat_map(|layer| (0..c.num_heads).map(move |head| HeadAddr { layer, head }))
        .collect()
}

/// Every routed expert of the model.
pub fn all_experts<T>(w: &ModelWeights<T>) -> Vec<ExpertAddr> {
    let c = &w.config;
    (0..c.num_layers)
        .flat_map(|layer| (0..c.num_experts).map(move |expert| ExpertAddr { layer, expert }))
        .collect()
}

/// Pearson correlation across prompts between head importance and the
/// expert series at the answer position.
pub fn head_expert_correlation<T: Scalar>(
    w: &ModelWeights<T>,
    dataset: &Dataset,
    prompts: &[usize],
    heads: &[HeadAddr],
    experts: &[ExpertAddr],
    series: ExpertSeries,
) -> Result<CorrelationReport> {
    if prompts.len() < 3 {
        return Err(domain(format!("correlation needs at least 3 prompts, got {}", prompts.len())));
    }
    dataset.check_vocab(w.config.vocab_size)?;
    let cache = match series {
        ExpertSeries::Importance => Some(ScoringCache::new(w)?),
        ExpertSeries::GateProb => None,
    };
    let spec = InterventionSpec::default();
    let mut head_series = vec![Vec::with_capacity(prompts.len()); heads.len()];
    let mut expert_series = vec![Vec::with_capacity(prompts.len()); experts.len()];
    let mut selected = vec![0usize; experts.len()];
    for &i in prompts {
        let p = &dataset.prompts[i];
        let trace = forward(w, &p.tokens, &spec)?;
        let pos = trace.last_position();
        for (k, h) in heads.iter().enumerate() {
            head_series[k].push(head_importance(w, &trace, h.layer, h.head, p.answer_id)?.to_f64_lossy());
        }
        let summed: BTreeMap<ExpertAddr, f64> = match &cache {
            Some(cache) => {
                let mut m = BTreeMap::new();
                for r in score_prompt(w, cache, &trace, p.id, p.answer_id)? {
                    if let Site::RoutedExpertNeuron { expert, .. } = r.neuron.site {
                        *m.entry(ExpertAddr { layer: r.neuron.layer, expert }).or_insert(0.0) += r.score;
                    }
                }
                m
            }
            None => BTreeMap::new(),
        };
        for (k, e) in experts.iter().enumerate() {
            let routing = &trace
                .layers
                .get(e.layer)
                .ok_or_else(|| domain(format!("expert {}:{} outside the model", e.layer, e.expert)))?
                .moe[pos]
                .routing;
            if e.expert >= routing.num_routed {
                return Err(domain(format!("expert {}:{} outside the model", e.layer, e.expert)));
            }
            if routing.is_active(e.expert) {
                selected[k] += 1;
            }
            expert_series[k].push(match series {
                ExpertSeries::GateProb => routing.probs[e.expert].to_f64_lossy(),
                ExpertSeries::Importance => summed.get(e).copied().unwrap_or(0.0),
            });
        }
    }
    let mut pairs = Vec::with_capacity(heads.len() * experts.len());
    for (hk, h) in heads.iter().enumerate() {
        for (ek, e) in experts.iter().enumerate() {
            let result = if is_constant(&head_series[hk]) || is_constant(&expert_series[ek]) {
                None
            } else {
                match pearson(&head_series[hk], &expert_series[ek]) {
                    Ok(c) => Some(c),
                    Err(Error::Degenerate(_)) => None,
                    Err(e) => return Err(e),
                }
            };
            pairs.push(PairCorrelation {
                head: *h,
                expert: *e,
                result,
            });
        }
    }
    let n = prompts.len() as f64;
    let mut top_heads: Vec<HeadStat> = heads
        .iter()
        .zip(&head_series)
        .map(|(h, s)| HeadStat {
            head: *h,
            mean_importance: s.iter().sum::<f64>() / n,
        })
        .collect();
    top_heads.sort_by(|a, b| {
        b.mean_importance
            .total_cmp(&a.mean_importance)
            .then((a.head.layer, a.head.head).cmp(&(b.head.layer, b.head.head)))
    });
    top_heads.truncate(3);
    let mut top_experts: Vec<ExpertStat> = experts
        .iter()
        .zip(&selected)
        .zip(&expert_series)
        .map(|((e, &c), s)| ExpertStat {
            expert: *e,
            frequency: c as f64 / n,
            mean_prob: s.iter().sum::<f64>() / n,
        })
        .collect();
    top_experts.sort_by(|a, b| {
        b.frequency
            .total_cmp(&a.frequency)
            .then(b.mean_prob.total_cmp(&a.mean_prob))
            .then(a.expert.cmp(&b.expert))
    });
    top_experts.truncate(3);
    let mut top_pairs: Vec<PairCorrelation> = pairs.iter().filter(|p| p.result.is_some()).cloned().collect();
    top_pairs.sort_by(|a, b| {
        let (ra, rb) = (a.result.as_ref().unwrap().r, b.result.as_ref().unwrap().r);
        rb.total_cmp(&ra)
            .then((a.head.layer, a.head.head).cmp(&(b.head.layer, b.head.head)))
            .then(a.expert.cmp(&b.expert))
    });
    top_pairs.truncate(3);
    Ok(CorrelationReport {
        series,
        prompts: prompts.len(),
        pairs,
        top_heads,
        top_experts,
        top_pairs,
    })
}

/// One row of the model summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub model: String,
    pub hit_at_10: f64,
    pub mrr: f64,
    pub total_ffn_gain: f64,
    pub total_attn_gain: f64,
    pub peak_layer: f64,
    pub peak_relative_pct: f64,
    pub layer_efficiency: f64,
}

/// Everything the report files need for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainSummary {
    pub row: Table1Row,
    pub profile: Vec<LayerGain>,
    pub stages: StageBreakdown,
}

pub fn summarize<T: Scalar>(
    name: &str,
    w: &ModelWeights<T>,
    dataset: &Dataset,
    stages: &[RangeInclusive<usize>],
) -> Result<GainSummary> {
    let prompts: Vec<usize> = (0..dataset.prompts.len()).collect();
    let spec = InterventionSpec::default();
    let eval = evaluate_prompts(w, dataset, &prompts, &spec)?;
    let profiles = gain_profiles(w, dataset, &prompts, &spec)?;
    let profile = mean_profile(&profiles, w.config.num_layers);
    let ffn: Vec<f64> = profile.iter().map(|g| g.ffn).collect();
    let total_ffn_gain: f64 = ffn.iter().sum();
    let total_attn_gain: f64 = profile.iter().map(|g| g.attn).sum();
    let peak = peak_gain_position(&profiles)?;
    Ok(GainSummary {
        row: Table1Row {
            model: name.to_string(),
            hit_at_10: eval.hit_at_10,
            mrr: eval.mrr,
            total_ffn_gain,
            total_attn_gain,
            peak_layer: peak.mean_layer,
            peak_relative_pct: peak.relative_pct,
            layer_efficiency: layer_efficiency(total_ffn_gain, w.config.num_layers)?,
        },
        stages: stage_contributions(&ffn, stages)?,
        profile,
    })
}

pub const TABLE1_HEADER: [&str; 8] = [
    "model",
    "hit_at_10",
    "mrr",
    "total_ffn_gain",
    "total_attn_gain",
    "peak_layer",
    "peak_relative_pct",
    "layer_efficiency",
];

pub fn write_table1(rows: &[Table1Row], out: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(TABLE1_HEADER)?;
    for r in rows {
        wtr.write_record([
            r.model.clone(),
            r.hit_at_10.to_string(),
            r.mrr.to_string(),
            r.total_ffn_gain.to_string(),
            r.total_attn_gain.to_string(),
            r.peak_layer.to_string(),
            r.peak_relative_pct.to_string(),
            r.layer_efficiency.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// `curve.csv`: layer (1-based), ffn_gain, attn_gain, cumulative FFN gain.
pub fn write_curve(profile: &[LayerGain], out: impl Write) -> Result<()> {
    let ffn: Vec<f64> = profile.iter().map(|g| g.ffn).collect();
    let cum = cumulative_curve(&ffn);
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["layer", "ffn_gain", "attn_gain", "cumulative"])?;
    for (g, c) in profile.iter().zip(cum) {
        wtr.write_record([
            (g.layer + 1).to_string(),
            g.ffn.to_string(),
            g.attn.to_string(),
            c.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_stages(stages: &StageBreakdown, mut out: impl Write) -> Result<()> {
    out.write_all((serde_json::to_string_pretty(stages)? + "\n").as_bytes())?;
    Ok(())
}
