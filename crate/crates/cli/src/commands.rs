// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;

use moelab::analysis::{
    all_experts, all_heads, evaluate_prompts, head_expert_correlation, proportional_stages, summarize, thirds,
    write_curve, write_stages, write_table1, EvalResult, ExpertSeries,
};
use moelab::attribution::attribute_relation;
use moelab::interventions::{
    attribution_fraction, block_sweep, force_expert, ig_all_heads, ig_path_on_trace, suppress_head,
    GradientMode, IGAttribution, LinearProbe, SuppressionReport,
};
use moelab::knowledge::{generate_dataset, plant_model_with_report, preset, Dataset, GenerateOptions, PlantPlan, Preset};
use moelab::model::{forward, load_model, InterventionSpec, ModelConfig, RoutingMode};
use moelab::Weights;

use crate::addr::{ExpertArg, HeadArg};
use crate::manifest::Run;

/// Bad arguments or missing inputs (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(usage(format!("input not found: {}", path.display())));
    }
    Ok(())
}

fn load_weights(path: &Path) -> Result<Weights> {
    require(path)?;
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_data(dir: &Path) -> Result<Dataset> {
    require(dir)?;
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn load_pair(model: &Path, data: &Path, run: &mut Run) -> Result<(Weights, Dataset)> {
    let w = load_weights(model)?;
    let ds = load_data(data)?;
    ds.check_vocab(w.config.vocab_size)?;
    run.input(model)?;
    run.input(data)?;
    Ok((w, ds))
}

fn relation_prompts(ds: &Dataset, relation: Option<&str>) -> Result<Vec<usize>> {
    match relation {
        Some(r) => {
            check_relation(ds, r)?;
            Ok(ds.prompt_indices(r))
        }
        None => Ok((0..ds.prompts.len()).collect()),
    }
}

fn check_relation(ds: &Dataset, r: &str) -> Result<()> {
    if ds.relation_index(r).is_err() {
        let known: Vec<&str> = ds.relations.iter().map(|x| x.name.as_str()).collect();
        return Err(usage(format!("unknown relation {r:?} (dataset has {})", known.join(", "))));
    }
    Ok(())
}

pub struct GenData {
    pub seed: u64,
    pub relations: usize,
    pub subjects: usize,
    pub vocab_budget: usize,
    pub out: PathBuf,
}

pub fn gen_data(a: &GenData) -> Result<Run> {
    let opts = GenerateOptions {
        seed: a.seed,
        num_relations: a.relations,
        subjects_per_relation: a.subjects,
        vocab_budget: a.vocab_budget,
    };
    let ds = generate_dataset(&opts)?;
    let mut run = Run::new(
        "gen-data",
        &a.out,
        json!({"relations": a.relations, "subjects": a.subjects, "vocab_budget": a.vocab_budget}),
    );
    run.seed("seed", a.seed);
    let mut prompts = Vec::new();
    for p in &ds.prompts {
        prompts.extend(serde_json::to_vec(p)?);
        prompts.push(b'\n');
    }
    run.output("prompts.jsonl", &prompts)?;
    run.output_json("tokenizer.json", &ds.tokenizer)?;
    run.output_json("relations.json", &ds.relations)?;
    Ok(run)
}

pub struct Plant {
    pub data: PathBuf,
    pub plan: String,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn plant(a: &Plant) -> Result<Run> {
    let ds = load_data(&a.data)?;
    let (config, plan): (ModelConfig, PlantPlan) = match a.plan.parse::<Preset>() {
        Ok(kind) => {
            let (mut cfg, plan) = preset(kind, &ds, a.seed)?;
            if let Some(path) = &a.config {
                require(path)?;
                cfg = serde_json::from_slice(&std::fs::read(path)?)
                    .with_context(|| format!("parsing config {}", path.display()))?;
            }
            (cfg, plan)
        }
        Err(_) => {
            let path = Path::new(&a.plan);
            require(path)?;
            let plan: PlantPlan = serde_json::from_slice(&std::fs::read(path)?)
                .with_context(|| format!("parsing plan {}", path.display()))?;
            let cfg_path = a
                .config
                .as_ref()
                .ok_or_else(|| usage("--config is required with a plan file"))?;
            require(cfg_path)?;
            let cfg: ModelConfig = serde_json::from_slice(&std::fs::read(cfg_path)?)
                .with_context(|| format!("parsing config {}", cfg_path.display()))?;
            (cfg, plan)
        }
    };
    let (w, report) = plant_model_with_report(&config, &ds, &plan)?;
    let mut run = Run::new("plant", &a.out, json!({"plan": a.plan, "model": config}));
    run.seed("seed", a.seed);
    run.seed("plant", config.seed);
    run.input(&a.data)?;
    if Path::new(&a.plan).is_file() {
        run.input(Path::new(&a.plan))?;
    }
    if let Some(c) = &a.config {
        run.input(c)?;
    }
    run.output("model.moem", &moelab::model::encode_model(&w)?)?;
    run.output_json("plan.json", &plan)?;
    run.output_json("plant_report.json", &report)?;
    Ok(run)
}

pub struct Eval {
    pub model: PathBuf,
    pub data: PathBuf,
    pub block: Vec<ExpertArg>,
    pub suppress: Vec<HeadArg>,
    pub force: Vec<ExpertArg>,
    pub mode: String,
    pub relation: Option<String>,
    pub out: PathBuf,
}

fn build_spec(a: &Eval) -> Result<InterventionSpec> {
    let mode: RoutingMode = a.mode.parse().map_err(|e: moelab::Error| usage(e.to_string()))?;
    let mut spec = InterventionSpec::new().with_mode(mode);
    for b in &a.block {
        spec = spec.block(b.layer, b.expert);
    }
    for f in &a.force {
        spec = spec.force(f.layer, f.expert);
    }
    for h in &a.suppress {
        spec = spec.suppress(h.0.layer, h.0.head);
    }
    Ok(spec)
}

pub fn eval(a: &Eval) -> Result<Run> {
    let spec = build_spec(a)?;
    let mut run = Run::new("eval", &a.out, json!({"spec": spec, "relation": a.relation}));
    let (w, ds) = load_pair(&a.model, &a.data, &mut run)?;
    spec.validate(&w.config).map_err(|e| usage(e.to_string()))?;
    let prompts = relation_prompts(&ds, a.relation.as_deref())?;
    if prompts.is_empty() {
        return Err(usage("no prompts to evaluate"));
    }
    let result = evaluate_prompts(&w, &ds, &prompts, &spec)?;
    run.output_json("eval.json", &result)?;
    Ok(run)
}

pub struct Attribute {
    pub model: PathBuf,
    pub data: PathBuf,
    pub relation: String,
    pub topk: usize,
    pub out: PathBuf,
}

pub fn attribute(a: &Attribute) -> Result<Run> {
    let mut run = Run::new("attribute", &a.out, json!({"relation": a.relation, "topk": a.topk}));
    let (w, ds) = load_pair(&a.model, &a.data, &mut run)?;
    check_relation(&ds, &a.relation)?;
    let report = attribute_relation(&w, &ds, &a.relation, a.topk)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    run.output_json("attribution.json", &report)?;
    run.output("attribution.csv", &csv)?;
    Ok(run)
}

pub struct Ablate {
    pub model: PathBuf,
    pub data: PathBuf,
    pub relation: String,
    pub sizes: String,
    pub topk: usize,
    pub out: PathBuf,
}

pub fn parse_sizes(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| usage(format!("bad size {x:?} in --sizes"))))
        .collect()
}

pub fn ablate(a: &Ablate) -> Result<Run> {
    let sizes = parse_sizes(&a.sizes)?;
    let mut run = Run::new(
        "ablate",
        &a.out,
        json!({"relation": a.relation, "sizes": sizes, "topk": a.topk}),
    );
    let (w, ds) = load_pair(&a.model, &a.data, &mut run)?;
    check_relation(&ds, &a.relation)?;
    let report = attribute_relation(&w, &ds, &a.relation, a.topk)?;
    let sweep = block_sweep(&w, &ds, &a.relation, &report.ranked_experts(), &sizes)?;
    let mut csv = Vec::new();
    sweep.write_csv(&mut csv)?;
    run.output("sweep.csv", &csv)?;
    run.output_json("sweep.json", &sweep)?;
    Ok(run)
}

pub struct Causal {
    pub model: PathBuf,
    pub data: PathBuf,
    pub head: HeadArg,
    pub expert: ExpertArg,
    pub ig_steps: usize,
    pub relation: Option<String>,
    pub linear_probe: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Serialize)]
struct Forcing {
    baseline_mrr: f64,
    suppressed_mrr: f64,
    forced: EvalResult,
    /// Forced MRR over baseline MRR.
    recovery_ratio: f64,
}

#[derive(Serialize)]
struct IgSummary {
    steps: usize,
    mean_total: f64,
    max_completeness_gap: f64,
    max_relative_gap: f64,
    /// Share of absolute IG mass from the named head among all heads.
    attribution_fraction: f64,
    per_prompt: Vec<IGAttribution>,
}

#[derive(Serialize)]
struct ProbeSummary {
    max_abs_error: f64,
    per_prompt: Vec<IGAttribution>,
}

#[derive(Serialize)]
struct CausalBundle {
    head: String,
    expert: String,
    prompts: usize,
    suppression: SuppressionReport,
    forcing: Forcing,
    integrated_gradients: IgSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    linear_probe: Option<ProbeSummary>,
}

pub fn causal(a: &Causal) -> Result<Run> {
    if a.ig_steps == 0 {
        return Err(usage("--ig-steps must be at least 1"));
    }
    let mut run = Run::new(
        "causal",
        &a.out,
        json!({"head": a.head.to_string(), "expert": a.expert.to_string(), "ig_steps": a.ig_steps, "relation": a.relation}),
    );
    let (w, ds) = load_pair(&a.model, &a.data, &mut run)?;
    let head = a.head.0;
    let target = (a.expert.layer, a.expert.expert);
    InterventionSpec::new()
        .suppress(head.layer, head.head)
        .force(target.0, target.1)
        .validate(&w.config)
        .map_err(|e| usage(e.to_string()))?;
    let prompts = relation_prompts(&ds, a.relation.as_deref())?;
    if prompts.is_empty() {
        return Err(usage("no prompts to analyse"));
    }
    let suppression = suppress_head(&w, &ds, &prompts, head, Some(target))?;
    let forced = force_expert(&w, &ds, &prompts, target, &InterventionSpec::new().suppress(head.layer, head.head))?;
    let forcing = Forcing {
        baseline_mrr: suppression.baseline.mrr,
        suppressed_mrr: suppression.suppressed.mrr,
        recovery_ratio: forced.mrr / suppression.baseline.mrr,
        forced,
    };
    let all = ig_all_heads(&w, &ds, &prompts, &[target], a.ig_steps)?;
    let fraction = attribution_fraction(&all, &[head]).unwrap_or(0.0);
    let per_prompt: Vec<IGAttribution> = all
        .into_iter()
        .map(|runs| runs.into_iter().find(|r| r.source == head).expect("named head present"))
        .collect();
    let n = per_prompt.len() as f64;
    let ig = IgSummary {
        steps: a.ig_steps,
        mean_total: per_prompt.iter().map(|r| r.total).sum::<f64>() / n,
        max_completeness_gap: per_prompt.iter().map(|r| r.completeness_gap).fold(0.0, f64::max),
        max_relative_gap: per_prompt.iter().map(IGAttribution::relative_gap).fold(0.0, f64::max),
        attribution_fraction: fraction,
        per_prompt,
    };
    let linear_probe = match &a.linear_probe {
        Some(path) => {
            require(path)?;
            run.input(path)?;
            let weights: Vec<f64> = serde_json::from_slice(&std::fs::read(path)?)
                .with_context(|| format!("parsing probe {}", path.display()))?;
            let d = w.config.d_model;
            if weights.len() != d {
                return Err(usage(format!("linear probe has {} weights, head outputs have {d}", weights.len())));
            }
            let probe = LinearProbe(weights);
            let mut runs = Vec::new();
            let mut err: f64 = 0.0;
            for &i in &prompts {
                let t = forward(&w, &ds.prompts[i].tokens, &InterventionSpec::default())?;
                let r = ig_path_on_trace(&t, head, &probe, a.ig_steps, None, GradientMode::Analytic)?;
                let x = &t.layers[head.layer].attention.heads[t.last_position()][head.head];
                for ((ai, wi), xi) in r.attributions.iter().zip(&probe.0).zip(x) {
                    err = err.max((ai - wi * xi).abs());
                }
                runs.push(r);
            }
            Some(ProbeSummary {
                max_abs_error: err,
                per_prompt: runs,
            })
        }
        None => None,
    };
    let bundle = CausalBundle {
        head: a.head.to_string(),
        expert: a.expert.to_string(),
        prompts: prompts.len(),
        suppression,
        forcing,
        integrated_gradients: ig,
        linear_probe,
    };
    run.output_json("causal.json", &bundle)?;
    Ok(run)
}

pub struct Report {
    pub inputs: Vec<PathBuf>,
    pub data: PathBuf,
    pub relation: Option<String>,
    pub stages: String,
    pub out: PathBuf,
}

/// File stems, or `parent-stem` for every input when stems collide.
fn model_names(inputs: &[PathBuf]) -> Result<Vec<String>> {
    let stem = |p: &PathBuf| {
        p.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| usage(format!("cannot name model {}", p.display())))
    };
    let mut names: Vec<String> = inputs.iter().map(stem).collect::<Result<_>>()?;
    let distinct = |n: &[String]| n.iter().collect::<BTreeSet<_>>().len() == n.len();
    if !distinct(&names) {
        names = inputs
            .iter()
            .zip(&names)
            .map(|(p, s)| match p.parent().and_then(|d| d.file_name()) {
                Some(d) => format!("{}-{s}", d.to_string_lossy()),
                None => s.clone(),
            })
            .collect();
    }
    if !distinct(&names) {
        return Err(usage("report inputs must have distinct names"));
    }
    Ok(names)
}

pub fn report(a: &Report) -> Result<Run> {
    if a.inputs.is_empty() {
        return Err(usage("report needs at least one --inputs model"));
    }
    for p in a.inputs.iter().chain([&a.data]) {
        require(p)?;
    }
    let mut run = Run::new(
        "report",
        &a.out,
        json!({"relation": a.relation, "stages": a.stages, "models": a.inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>()}),
    );
    let ds = load_data(&a.data)?;
    run.input(&a.data)?;
    let relation = match &a.relation {
        Some(r) => {
            check_relation(&ds, r)?;
            Some(r.clone())
        }
        None => ds.populated_relations().first().map(|&i| ds.relations[i].name.clone()),
    };
    let names = model_names(&a.inputs)?;
    let mut rows = Vec::new();
    for (path, name) in a.inputs.iter().zip(names) {
        let w = load_weights(path)?;
        ds.check_vocab(w.config.vocab_size)?;
        run.input(path)?;
        let stages = match a.stages.as_str() {
            "thirds" => thirds(w.config.num_layers),
            "proportional" => proportional_stages(w.config.num_layers),
            other => return Err(usage(format!("unknown stage preset {other:?} (thirds or proportional)"))),
        };
        let summary = summarize(&name, &w, &ds, &stages)?;
        let mut curve = Vec::new();
        write_curve(&summary.profile, &mut curve)?;
        run.output(&format!("{name}/curve.csv"), &curve)?;
        let mut st = Vec::new();
        write_stages(&summary.stages, &mut st)?;
        run.output(&format!("{name}/stages.json"), &st)?;
        let mut corr = Vec::new();
        if let Some(rel) = &relation {
            let prompts = ds.prompt_indices(rel);
            if prompts.len() >= 3 {
                let rep = head_expert_correlation(
                    &w,
                    &ds,
                    &prompts,
                    &all_heads(&w),
                    &all_experts(&w),
                    ExpertSeries::GateProb,
                )?;
                rep.write_csv(&mut corr)?;
                run.output_json(&format!("{name}/correlation.json"), &rep)?;
            }
        }
        if corr.is_empty() {
            corr.extend_from_slice(b"head_layer,head,expert_layer,expert,r,p,n\n");
        }
        run.output(&format!("{name}/correlation.csv"), &corr)?;
        rows.push(summary.row);
    }
    let mut table = Vec::new();
    write_table1(&rows, &mut table)?;
    run.output("table1.csv", &table)?;
    Ok(run)
}
