// SPDX-License-Identifier: MIT OR Apache-2.0

//! Routing ablations, expert blocking, head suppression, expert forcing and
//! integrated-gradients paths from head outputs to gate probabilities.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::analysis::{evaluate_prompts, EvalResult};
use crate::error::{domain, Error, Result};
use crate::knowledge::{Dataset, HeadAddr};
use crate::math::{self, Matrix};
use crate::model::{forward, ExpertRef, ForwardTrace, InterventionSpec, ModelWeights, RoutingMode};
use crate::scalar::Scalar;

/// Evaluates `prompts` under a routing configuration.
pub fn run_config<T: Scalar>(
    w: &ModelWeights<T>,
    dataset: &Dataset,
    prompts: &[usize],
    mode: RoutingMode,
) -> Result<EvalResult> {
    evaluate_prompts(w, dataset, prompts, &InterventionSpec::new().with_mode(mode))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Requested number of experts to block.
    pub n_blocked: usize,
    /// The experts actually blocked (fewer than `n_blocked` when the ranking is shorter).
    pub blocked: Vec<(usize, ExpertRef)>,
    pub eval: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSweepResult {
    pub relation: String,
    /// The `n = 0` baseline first, then one row per requested size.
    pub rows: Vec<SweepRow>,
}

impl BlockSweepResult {
    pub fn baseline(&self) -> &EvalResult {
        &self.rows[0].eval
    }

    /// `1 - mrr / baseline mrr` per row.
    pub fn relative_drops(&self) -> Vec<(usize, f64)> {
        let base = self.baseline().mrr;
        self.rows.iter().map(|r| (r.n_blocked, 1.0 - r.eval.mrr / base)).collect()
    }

    /// CSV with columns relation, n_blocked, hit_at_10, mrr.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["relation", "n_blocked", "hit_at_10", "mrr"])?;
        for r in &self.rows {
            wtr.write_record([
                self.relation.clone(),
                r.n_blocked.to_string(),
                r.eval.hit_at_10.to_string(),
                r.eval.mrr.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Blocks the top-`n` ranked experts for each `n` in `sizes` and
/// re-evaluates the relation's prompts.
pub fn block_sweep<T: Scalar>(
    w: &ModelWeights<T>,
    dataset: &Dataset,
    relation: &str,
    ranked: &[(usize, ExpertRef)],
    sizes: &[usize],
) -> Result<BlockSweepResult> {
    dataset.relation_index(relation)?;
    let prompts = dataset.prompt_indices(relation);
    let mut rows = vec![SweepRow {
        n_blocked: 0,
        blocked: Vec::new(),
        eval: evaluate_prompts(w, dataset, &prompts, &InterventionSpec::default())?,
    }];
    for &n in sizes {
        let blocked: Vec<(usize, ExpertRef)> = ranked.iter().take(n).copied().collect();
        let spec = blocked.iter().fold(InterventionSpec::new(), |s, &(l, e)| s.block(l, e));
        rows.push(SweepRow {
            n_blocked: n,
            eval: evaluate_prompts(w, dataset, &prompts, &spec)?,
            blocked,
        });
    }
    Ok(BlockSweepResult {
        relation: relation.to_string(),
        rows,
    })
}

/// Mean gate probability of a set of experts before and after an intervention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateShift {
    pub layer: usize,
    /// Set when a single expert is tracked; otherwise each prompt's baseline top-k.
    pub expert: Option<ExpertRef>,
    pub baseline: f64,
    pub intervened: f64,
    /// `(intervened - baseline) / baseline`, zero when the baseline is zero.
    pub relative_change: f64,
}

impl GateShift {
    fn new(layer: usize, expert: Option<ExpertRef>, baseline: f64, intervened: f64) -> Self {
        let relative_change = if baseline == 0.0 {
            0.0
        } else {
            (intervened - baseline) / baseline
        };
        Self {
            layer,
            expert,
            baseline,
            intervened,
            relative_change,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuppressionReport {
    pub head: HeadAddr,
    pub baseline: EvalResult,
    pub suppressed: EvalResult,
    pub mrr_delta: f64,
    /// `1 - suppressed / baseline` MRR.
    pub relative_mrr_drop: f64,
    /// Per layer: mean probability of each prompt's baseline top-k experts.
    pub layers: Vec<GateShift>,
    pub watched: Option<GateShift>,
}

fn answer_traces<T: Scalar>(
    w: &ModelWeights<T>,
    dataset: &Dataset,
    prompts: &[usize],
    spec: &InterventionSpec,
) -> Result<Vec<ForwardTrace<T>>> {
    dataset.check_vocab(w.config.vocab_size)?;
    prompts.iter().map(|&i| forward(w, &dataset.prompts[i].tokens, spec)).collect()
}

fn ranks_of<T: Scalar>(dataset: &Dataset, prompts: &[usize], traces: &[ForwardTrace<T>]) -> Result<EvalResult> {
    let ranks = prompts
        .iter()
        .zip(traces)
        .map(|(&i, t)| {
            let p = &dataset.prompts[i];
            t.rank(p.query_pos, p.answer_id)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_ranks(ranks)
}

/// Zero-ablates one head everywhere and reports metric and gate shifts.
pub fn suppress_head<T: Scalar>(
    w: &ModelWeights<T>,
    dataset: &Dataset,
    prompts: &[usize],
    head: HeadAddr,
    watch: Option<(usize, ExpertRef)>,
) -> Result<SuppressionReport> {
    let spec = InterventionSpec::new().suppress(head.layer, head.head);
    spec.validate(&w.config)?;
    if let Some((l, e)) = watch {
        InterventionSpec::new().force(l, e).validate(&w.config)?;
    }
    let base = answer_traces(w, dataset, prompts, &InterventionSpec::default())?;
    let supp = answer_traces(w, dataset, prompts, &spec)?;
    let baseline = ranks_of(dataset, prompts, &base)?;
    let suppressed = ranks_of(dataset, prompts, &supp)?;
    let n = prompts.len() as f64;
    let mut layers = Vec::with_capacity(w.config.num_layers);
    for l in 0..w.config.num_layers {
        let (mut b, mut s) = (0.0, 0.0);
        for (tb, ts) in base.iter().zip(&supp) {
            let pos = tb.last_position();
            let rb = &tb.layers[l].moe[pos].routing;
            let rs = &ts.layers[l].moe[pos].routing;
            let k = rb.active.len().max(1) as f64;
            b += rb.active.iter().map(|x| rb.probs[x.expert].to_f64_lossy()).sum::<f64>() / k;
            s += rb.active.iter().map(|x| rs.probs[x.expert].to_f64_lossy()).sum::<f64>() / k;
        }
        layers.push(GateShift::new(l, None, b / n, s / n));
    }
    let watched = watch.map(|(l, e)| {
        let mean = |ts: &[ForwardTrace<T>]| {
            ts.iter()
                .map(|t| t.layers[l].moe[t.last_position()].routing.prob(e).to_f64_lossy())
                .sum::<f64>()
                / n
        };
        GateShift::new(l, Some(e), mean(&base), mean(&supp))
    });
    Ok(SuppressionReport {
        head,
        mrr_delta: suppressed.mrr - baseline.mrr,
        relative_mrr_drop: 1.0 - suppressed.mrr / baseline.mrr,
        baseline,
        suppressed,
        layers,
        watched,
    })
}

/// Adds `(layer, expert)` to the active set on top of `alongside`.
pub fn force_expert<T: Scalar>(
    w: &ModelWeights<T>,
    dataset: &Dataset,
    prompts: &[usize],
    expert: (usize, ExpertRef),
    alongside: &InterventionSpec,
) -> Result<EvalResult> {
    let spec = alongside.clone().force(expert.0, expert.1);
    spec.validate(&w.config)?;
    evaluate_prompts(w, dataset, prompts, &spec)
}

/// A scalar read-out of the source vector along the direct path.
pub trait Sink<T: Scalar> {
    fn value(&self, z: &[T]) -> T;
    fn gradient(&self, z: &[T]) -> Vec<T>;
    fn describe(&self) -> SinkDesc;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SinkDesc {
    GateProb { layer: usize, expert: ExpertRef },
    Linear,
}

/// `softmax(W_g (u_rest + z) + b)[e]` with everything but `z` frozen.
#[derive(Clone, Debug)]
pub struct GateSink<T> {
    layer: usize,
    expert: ExpertRef,
    index: usize,
    rest: Vec<T>,
    gate: Matrix<T>,
    bias: Vec<T>,
    /// False when the source lies after the sink layer.
    connected: bool,
}

impl<T: Scalar> GateSink<T> {
    /// Builds the sink for `source`'s output at the trace's last position.
    pub fn new(
        w: &ModelWeights<T>,
        trace: &ForwardTrace<T>,
        source: HeadAddr,
        layer: usize,
        expert: ExpertRef,
    ) -> Result<Self> {
        let cfg = &w.config;
        InterventionSpec::new().force(layer, expert).validate(cfg)?;
        let pos = trace.last_position();
        let x = source_vector(trace, source)?;
        let u = &trace.layer(layer)?.moe_input[pos];
        let connected = source.layer <= layer;
        let rest = if connected { math::sub(u, x) } else { u.clone() };
        let index = match expert {
            ExpertRef::Routed(j) => j,
            ExpertRef::Shared => cfg.num_experts,
        };
        Ok(Self {
            layer,
            expert,
            index,
            rest,
            gate: w.layers[layer].gate.clone(),
            bias: w.layers[layer].gate_bias.clone(),
            connected,
        })
    }

    fn probs(&self, z: &[T]) -> Vec<T> {
        let u = if self.connected { math::add(&self.rest, z) } else { self.rest.clone() };
        let logits: Vec<T> = (0..self.gate.rows())
            .map(|r| math::dot(self.gate.row(r), &u) + self.bias[r])
            .collect();
        let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        e.into_iter().map(|x| x / s).collect()
    }
}

impl<T: Scalar> Sink<T> for GateSink<T> {
    fn value(&self, z: &[T]) -> T {
        self.probs(z)[self.index]
    }

    fn gradient(&self, z: &[T]) -> Vec<T> {
        if !self.connected {
            return vec![T::zero(); z.len()];
        }
        let p = self.probs(z);
        let mut mean_row = vec![T::zero(); z.len()];
        for (r, &pr) in p.iter().enumerate() {
            math::axpy(pr, self.gate.row(r), &mut mean_row);
        }
        let pe = p[self.index];
        self.gate
            .row(self.index)
            .iter()
            .zip(&mean_row)
            .map(|(&a, &b)| pe * (a - b))
            .collect()
    }

    fn describe(&self) -> SinkDesc {
        SinkDesc::GateProb {
            layer: self.layer,
            expert: self.expert,
        }
    }
}

/// `w · z`.
#[derive(Clone, Debug)]
pub struct LinearProbe<T>(pub Vec<T>);

impl<T: Scalar> Sink<T> for LinearProbe<T> {
    fn value(&self, z: &[T]) -> T {
        math::dot(&self.0, z)
    }

    fn gradient(&self, _z: &[T]) -> Vec<T> {
        self.0.clone()
    }

    fn describe(&self) -> SinkDesc {
        SinkDesc::Linear
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Analytic,
    FiniteDifference {
        step: f64,
    },
}

impl GradientMode {
    pub fn central() -> Self {
        GradientMode::FiniteDifference { step: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IGAttribution {
    pub source: HeadAddr,
    pub sink: SinkDesc,
    pub steps: usize,
    /// One entry per coordinate of the head output.
    pub attributions: Vec<f64>,
    pub total: f64,
    pub f_input: f64,
    pub f_baseline: f64,
    /// `|total - (f_input - f_baseline)|`.
    pub completeness_gap: f64,
}

impl IGAttribution {
    /// Gap relative to `|F(x) - F(baseline)|`; zero when both vanish.
    pub fn relative_gap(&self) -> f64 {
        let d = (self.f_input - self.f_baseline).abs();
        if d == 0.0 {
            if self.completeness_gap == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.completeness_gap / d
        }
    }

    pub fn abs_sum(&self) -> f64 {
        self.attributions.iter().map(|a| a.abs()).sum()
    }
}

/// Midpoint-rule integrated gradients of `sink` from `baseline` to `x`.
pub fn integrated_gradients<T: Scalar, S: Sink<T> + ?Sized>(
    sink: &S,
    x: &[T],
    baseline: &[T],
    steps: usize,
    mode: GradientMode,
) -> Result<(Vec<T>, T, T)> {
    if steps == 0 {
        return Err(domain("integrated gradients needs at least one step"));
    }
    if x.len() != baseline.len() {
        return Err(Error::Shape(format!(
            "baseline has {} entries, source vector has {}",
            baseline.len(),
            x.len()
        )));
    }
    let delta = math::sub(x, baseline);
    let mut acc = vec![T::zero(); x.len()];
    let m = T::c(steps as f64);
    for k in 0..steps {
        let alpha = (T::c(k as f64) + T::c(0.5)) / m;
        let z: Vec<T> = baseline.iter().zip(&delta).map(|(&b, &d)| b + alpha * d).collect();
        let g = match mode {
            GradientMode::Analytic => sink.gradient(&z),
            GradientMode::FiniteDifference { step } => math::finite_diff_gradient(|v| sink.value(v), &z, T::c(step))?,
        };
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at step {k}")));
        }
        math::axpy(T::one(), &g, &mut acc);
    }
    let attr = acc.iter().zip(&delta).map(|(&a, &d)| a / m * d).collect();
    Ok((attr, sink.value(x), sink.value(baseline)))
}

fn source_vector<T: Scalar>(trace: &ForwardTrace<T>, source: HeadAddr) -> Result<&Vec<T>> {
    let pos = trace.last_position();
    trace
        .layer(source.layer)?
        .attention
        .heads
        .get(pos)
        .and_then(|h| h.get(source.head))
        .ok_or_else(|| Error::Trace(format!("trace has no output for head {source}")))
}

/// IG from a head's output at the last position to `sink`.
pub fn ig_path_on_trace<T: Scalar, S: Sink<T> + ?Sized>(
    trace: &ForwardTrace<T>,
    source: HeadAddr,
    sink: &S,
    steps: usize,
    baseline: Option<&[T]>,
    mode: GradientMode,
) -> Result<IGAttribution> {
    let x = source_vector(trace, source)?;
    let zeros = vec![T::zero(); x.len()];
    let b = baseline.unwrap_or(&zeros);
    let (attr, fx, fb) = integrated_gradients(sink, x, b, steps, mode)?;
    let attributions: Vec<f64> = attr.iter().map(|a| a.to_f64_lossy()).collect();
    let total: f64 = attributions.iter().sum();
    let (f_input, f_baseline) = (fx.to_f64_lossy(), fb.to_f64_lossy());
    if !total.is_finite() || !f_input.is_finite() || !f_baseline.is_finite() {
        return Err(Error::Numeric(format!("non-finite IG result for head {source}")));
    }
    Ok(IGAttribution {
        source,
        sink: sink.describe(),
        steps,
        attributions,
        total,
        f_input,
        f_baseline,
        completeness_gap: (total - (f_input - f_baseline)).abs(),
    })
}

/// IG from `source` to the gate probability of `(layer, expert)` on one prompt.
#[allow(clippy::too_many_arguments)]
pub fn ig_path<T: Scalar>(
    w: &ModelWeights<T>,
    tokens: &[usize],
    source: HeadAddr,
    sink: (usize, ExpertRef),
    steps: usize,
    baseline: Option<&[T]>,
    mode: GradientMode,
) -> Result<IGAttribution> {
    let trace = forward(w, tokens, &InterventionSpec::default())?;
    let s = GateSink::new(w, &trace, source, sink.0, sink.1)?;
    ig_path_on_trace(&trace, source, &s, steps, baseline, mode)
}

/// IG from every head to every sink expert, per prompt.
pub fn ig_all_heads<T: Scalar>(
    w: &ModelWeights<T>,
    dataset: &Dataset,
    prompts: &[usize],
    sinks: &[(usize, ExpertRef)],
    steps: usize,
) -> Result<Vec<Vec<IGAttribution>>> {
    dataset.check_vocab(w.config.vocab_size)?;
    prompts
        .iter()
        .map(|&i| {
            let trace = forward(w, &dataset.prompts[i].tokens, &InterventionSpec::default())?;
            let mut out = Vec::new();
            for &(l, e) in sinks {
                for layer in 0..w.config.num_layers {
                    for head in 0..w.config.num_heads {
                        let src = HeadAddr { layer, head };
                        let s = GateSink::new(w, &trace, src, l, e)?;
                        out.push(ig_path_on_trace(&trace, src, &s, steps, None, GradientMode::Analytic)?);
                    }
                }
            }
            Ok(out)
        })
        .collect()
}

/// Share of absolute IG mass from `heads`, averaged over prompts whose
/// total mass is nonzero.
pub fn attribution_fraction(per_prompt: &[Vec<IGAttribution>], heads: &[HeadAddr]) -> Result<f64> {
    let named: BTreeSet<&HeadAddr> = heads.iter().collect();
    let mut sum = 0.0;
    let mut used = 0usize;
    for runs in per_prompt {
        let all: f64 = runs.iter().map(IGAttribution::abs_sum).sum();
        if all == 0.0 {
            continue;
        }
        let part: f64 = runs.iter().filter(|r| named.contains(&r.source)).map(IGAttribution::abs_sum).sum();
        sum += part / all;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Degenerate("no attribution mass on any prompt".into()));
    }
    Ok(sum / used as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Activation, ModelConfig};
    use proptest::prelude::*;

    fn model(seed: u64) -> ModelWeights<f64> {
        init_model(&ModelConfig {
            num_layers: 2,
            d_model: 6,
            num_heads: 2,
            head_dim: 3,
            vocab_size: 7,
            max_positions: 4,
            num_experts: 4,
            top_k: 2,
            has_shared_expert: true,
            expert_hidden: 4,
            shared_hidden: 3,
            activation: Activation::Gelu,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn linear_probe_is_exact_at_one_step() {
        let probe = LinearProbe(vec![0.5f64, -2.0, 3.0]);
        let x = [1.0, 0.25, -0.5];
        let (attr, fx, fb) = integrated_gradients(&probe, &x, &[0.0; 3], 1, GradientMode::Analytic).unwrap();
        assert_eq!(attr, vec![0.5, -0.5, -1.5]);
        assert_eq!((fx, fb), (-1.5, 0.0));
        let (fd, _, _) = integrated_gradients(&probe, &x, &[0.0; 3], 1, GradientMode::central()).unwrap();
        assert!(fd.iter().zip(&attr).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn baseline_equal_to_input_gives_zero() {
        let w = model(1);
        let t = forward(&w, &[1, 2, 3], &InterventionSpec::default()).unwrap();
        let src = HeadAddr { layer: 0, head: 1 };
        let s = GateSink::new(&w, &t, src, 1, ExpertRef::Routed(2)).unwrap();
        let x = t.layers[0].attention.heads[2][1].clone();
        let r = ig_path_on_trace(&t, src, &s, 8, Some(&x), GradientMode::Analytic).unwrap();
        assert!(r.attributions.iter().all(|&a| a == 0.0));
        assert!(integrated_gradients(&s, &x, &x, 0, GradientMode::Analytic).is_err());
        assert!(integrated_gradients(&s, &x, &x[..2], 1, GradientMode::Analytic).is_err());
    }

    #[test]
    fn gate_sink_reproduces_trace_probability() {
        let w = model(2);
        let t = forward(&w, &[4, 0], &InterventionSpec::default()).unwrap();
        for e in [ExpertRef::Routed(0), ExpertRef::Routed(3), ExpertRef::Shared] {
            let src = HeadAddr { layer: 0, head: 0 };
            let s = GateSink::new(&w, &t, src, 1, e).unwrap();
            let x = &t.layers[0].attention.heads[1][0];
            let want = t.layers[1].moe[1].routing.prob(e);
            assert!((s.value(x) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn later_heads_have_no_path() {
        let w = model(3);
        let t = forward(&w, &[4, 0, 1], &InterventionSpec::default()).unwrap();
        let src = HeadAddr { layer: 1, head: 0 };
        let s = GateSink::new(&w, &t, src, 0, ExpertRef::Routed(1)).unwrap();
        let r = ig_path_on_trace(&t, src, &s, 4, None, GradientMode::Analytic).unwrap();
        assert_eq!(r.total, 0.0);
        assert_eq!(r.completeness_gap, 0.0);
    }

    #[test]
    fn fraction_edges() {
        let run = |layer, a: f64| IGAttribution {
            source: HeadAddr { layer, head: 0 },
            sink: SinkDesc::Linear,
            steps: 1,
            attributions: vec![a, -a],
            total: 0.0,
            f_input: 0.0,
            f_baseline: 0.0,
            completeness_gap: 0.0,
        };
        let runs = vec![vec![run(0, 1.0), run(1, 3.0)], vec![run(0, 0.0), run(1, 0.0)]];
        let all = [HeadAddr { layer: 0, head: 0 }, HeadAddr { layer: 1, head: 0 }];
        assert_eq!(attribution_fraction(&runs, &all).unwrap(), 1.0);
        assert_eq!(attribution_fraction(&runs, &[]).unwrap(), 0.0);
        assert_eq!(attribution_fraction(&runs, &all[..1]).unwrap(), 0.25);
        assert!(attribution_fraction(&runs[1..], &all).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn analytic_matches_finite_differences(seed in 0u64..1000, tok in prop::collection::vec(0usize..7, 1..=4),
                                               e in 0usize..5) {
            let w = model(seed);
            let t = forward(&w, &tok, &InterventionSpec::default()).unwrap();
            let src = HeadAddr { layer: 0, head: (seed % 2) as usize };
            let expert = if e == 4 { ExpertRef::Shared } else { ExpertRef::Routed(e) };
            let s = GateSink::new(&w, &t, src, 1, expert).unwrap();
            let x = t.layers[0].attention.heads[tok.len() - 1][src.head].clone();
            let a = s.gradient(&x);
            let f = math::finite_diff_gradient(|v| s.value(v), &x, 1e-4).unwrap();
            let scale = a.iter().map(|v: &f64| v.abs()).fold(1e-12, f64::max);
            for (ga, gf) in a.iter().zip(&f) {
                prop_assert!((ga - gf).abs() <= 1e-6 * scale.max(1e-3), "{ga} vs {gf}");
            }
        }

        #[test]
        fn completeness_gap_shrinks_with_steps(seed in 0u64..1000, tok in prop::collection::vec(0usize..7, 2..=4)) {
            let mut w = model(seed);
            // sharpen the router so the path is visibly curved
            for l in &mut w.layers {
                l.gate = l.gate.map(|v| 6.0 * v);
            }
            let t = forward(&w, &tok, &InterventionSpec::default()).unwrap();
            let src = HeadAddr { layer: 0, head: 0 };
            let s = GateSink::new(&w, &t, src, 0, ExpertRef::Routed(0)).unwrap();
            let mut prev = f64::INFINITY;
            for m in [16, 32, 64, 128, 256] {
                let r = ig_path_on_trace(&t, src, &s, m, None, GradientMode::Analytic).unwrap();
                prop_assert!(r.completeness_gap <= prev * 1.1 + 1e-15);
                if m == 256 {
                    prop_assert!(r.completeness_gap <= 0.01 * (r.f_input - r.f_baseline).abs() + 1e-12);
                }
                prev = r.completeness_gap;
            }
        }
    }

    #[test]
    fn null_and_idempotent_interventions() {
        let w = model(9);
        let base = forward(&w, &[1, 2], &InterventionSpec::default()).unwrap();
        let again = forward(&w, &[1, 2], &InterventionSpec::new()).unwrap();
        assert_eq!(base, again);
        let active = base.layers[1].moe[1].routing.active[0].expert;
        let forced = forward(&w, &[1, 2], &InterventionSpec::new().force(1, ExpertRef::Routed(active))).unwrap();
        assert_eq!(base.log_probs[1], forced.log_probs[1]);
    }
}
