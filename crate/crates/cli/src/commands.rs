//! Subcommand bodies. Each returns the number of invariant violations found.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use stagelora_core::costmodel::CostModel;
use stagelora_core::optimizer::{optimize as run_optimizer, OptDocument};
use stagelora_core::plan::{BlockLayout, ColRange, Delta, TrainingPlan};
use stagelora_core::schedule::{
    build_schedule, group_completion, micro_batch_count, simulate as run_simulation,
    write_gantt_json, write_summary_csv, Grouping, Partition, PipelineSchedule, Trace, Workload,
};
use stagelora_core::taskgraph::{GraphDocument, TaskGraph, TaskId};
use stagelora_core::trainer::{
    run_plan, write_checkpoint, write_stage_csv, write_stage_jsonl, DatasetConfig, StageResult,
    TaskDataset, ToyModel,
};

use crate::{
    DeltaArgs, GraphArgs, LayoutArgs, OptimizeArgs, PlanArgs, ReportArgs, ScheduleArgs, TrainArgs,
    WorkloadArgs,
};

fn load_graph(args: &GraphArgs) -> Result<TaskGraph> {
    let path = &args.graph;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: GraphDocument =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(doc.into_graph()?)
}

fn load_costs(path: &Path) -> Result<CostModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    CostModel::from_json(&text).with_context(|| format!("loading {}", path.display()))
}

fn delta(args: &DeltaArgs) -> Result<Delta> {
    Ok(match (args.delta, args.frozen_ratio) {
        (Some(d), None) => Delta::new(d)?,
        (None, Some(r)) => Delta::from_frozen_ratio(r)?,
        _ => bail!("exactly one of --delta and --frozen-ratio is required"),
    })
}

fn layout(args: &LayoutArgs, graph: &TaskGraph) -> Result<BlockLayout> {
    let d_in = args.d_in.unwrap_or(4 * graph.len());
    Ok(BlockLayout::partition(
        args.d_out, d_in, args.rank, graph, None,
    )?)
}

fn build_plan(graph: &GraphArgs, d: &DeltaArgs, l: &LayoutArgs) -> Result<TrainingPlan> {
    let g = load_graph(graph)?;
    let layout = layout(l, &g)?;
    Ok(TrainingPlan::build(&g, &layout, delta(d)?)?)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn validate(args: &GraphArgs) -> Result<usize> {
    let g = load_graph(args)?;
    let layers = g.extract_layers().to_document(&g);
    println!("{}", serde_json::to_string(&layers.layers)?);
    Ok(0)
}

pub fn plan(args: &PlanArgs) -> Result<usize> {
    let plan = build_plan(&args.graph, &args.delta, &args.layout)?;
    let doc = plan.to_document();
    if args.json {
        println!("{}", serde_json::to_string_pretty(&doc)?);
    } else {
        print!("{}", plan.render());
    }
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        write_json(out, "plan.json", &doc)?;
    }
    Ok(plan.validate().len())
}

#[derive(Debug, Serialize, Deserialize)]
struct StageAuditDocument {
    stage: usize,
    trainee: String,
    masked_changed: Vec<String>,
    frozen_changed: Vec<String>,
    base_changed: bool,
    pass: bool,
}

/// Contents of `audit.json`.
#[derive(Debug, Serialize, Deserialize)]
struct AuditDocument {
    plan_violations: Vec<String>,
    stages: Vec<StageAuditDocument>,
    violations: usize,
}

impl AuditDocument {
    fn from_results(results: &[StageResult], g: &TaskGraph) -> Self {
        let names = |ts: &[TaskId]| ts.iter().map(|&t| g.name(t).to_string()).collect();
        let stages: Vec<_> = results
            .iter()
            .map(|r| StageAuditDocument {
                stage: r.stage_index,
                trainee: g.name(r.trainee).to_string(),
                masked_changed: names(&r.audit.masked_changed),
                frozen_changed: names(&r.audit.frozen_changed),
                base_changed: r.audit.base_changed,
                pass: r.audit.violations() == 0,
            })
            .collect();
        let violations = results.iter().map(|r| r.audit.violations()).sum();
        AuditDocument {
            plan_violations: Vec::new(),
            stages,
            violations,
        }
    }
}

/// Gives the last stage a masked block as an extra trainable block.
fn corrupt(plan: &mut TrainingPlan) -> Result<()> {
    let stage = plan
        .stages
        .last_mut()
        .ok_or_else(|| anyhow!("plan has no stages"))?;
    let victim = *stage
        .mask
        .iter()
        .next()
        .ok_or_else(|| anyhow!("the last stage masks no block"))?;
    stage.mask.remove(&victim);
    let width = plan.layout.width(victim);
    stage.train.insert(victim, ColRange::new(0, width));
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<usize> {
    let mut plan = build_plan(&args.graph, &args.delta, &args.layout)?;
    if args.corrupt_plan {
        corrupt(&mut plan)?;
    }
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let report = plan.validate();
    if !report.is_valid() {
        let audit = AuditDocument {
            plan_violations: report.violations.iter().map(ToString::to_string).collect(),
            stages: Vec::new(),
            violations: report.len(),
        };
        write_json(&args.out, "audit.json", &audit)?;
        for v in &report.violations {
            eprintln!("plan violation: {v}");
        }
        return Ok(report.len());
    }

    let g = &plan.graph;
    let mut model = ToyModel::init(&plan.layout, args.seed)?;
    let config = DatasetConfig {
        samples_per_task: args.samples,
        noise: args.noise,
        ..DatasetConfig::default()
    };
    let data = TaskDataset::synthetic(&model, g, &config, args.seed.wrapping_add(1))?;
    let results = run_plan(&mut model, &plan, &data, args.steps, args.lr)?;

    let mut csv = create(&args.out, "stages.csv")?;
    write_stage_csv(&results, g, &mut csv)?;
    csv.flush()?;
    let mut jsonl = create(&args.out, "stages.jsonl")?;
    write_stage_jsonl(&results, g, &mut jsonl)?;
    jsonl.flush()?;
    let mut ckpt = create(&args.out, "checkpoint.json")?;
    write_checkpoint(&model, g, &mut ckpt)?;
    ckpt.flush()?;
    let audit = AuditDocument::from_results(&results, g);
    write_json(&args.out, "audit.json", &audit)?;

    for r in &results {
        println!(
            "stage {} {}: loss {:.6} -> {:.6}, audit {}",
            r.stage_index,
            g.name(r.trainee),
            r.initial_loss,
            r.final_loss,
            if r.audit.violations() == 0 {
                "ok"
            } else {
                "FAILED"
            }
        );
    }
    Ok(audit.violations)
}

fn workload(args: &WorkloadArgs) -> Result<(CostModel, Workload, String)> {
    let plan = build_plan(&args.graph, &args.delta, &args.layout)?;
    let cm = load_costs(&args.costs)?;
    let g = &plan.graph;
    let stage = match &args.stage {
        Some(name) => {
            let t = g
                .id(name)
                .ok_or_else(|| anyhow!("unknown stage trainee `{name}`"))?;
            plan.stage_for(t)
                .ok_or_else(|| anyhow!("no stage trains `{name}`"))?
        }
        None => plan
            .stages
            .last()
            .ok_or_else(|| anyhow!("plan has no stages"))?,
    };
    Ok((
        cm,
        Workload::from_stage(stage, g),
        g.name(stage.trainee).to_string(),
    ))
}

fn fixed_schedule(args: &ScheduleArgs) -> Result<(CostModel, PipelineSchedule)> {
    let (cm, workload, _) = workload(&args.workload)?;
    let train: BTreeSet<&String> = args.train_devices.iter().collect();
    for d in &train {
        cm.device(d)?;
    }
    let frozen: Vec<String> = cm
        .device_ids()
        .into_iter()
        .filter(|d| !train.contains(d))
        .collect();
    let grouping = Grouping {
        train_devices: args.train_devices.clone(),
        frozen_devices: frozen,
        offloaded: args.offload.iter().cloned().collect(),
    };
    let nt = grouping.train_devices.len();
    if args.split.len() != nt + grouping.frozen_devices.len() {
        bail!(
            "--split needs {} counts ({} training and {} frozen devices)",
            nt + grouping.frozen_devices.len(),
            nt,
            grouping.frozen_devices.len()
        );
    }
    let partition = Partition::from_counts(
        &grouping.train_devices,
        &args.split[..nt],
        &grouping.frozen_devices,
        &args.split[nt..],
    )?;
    let n = micro_batch_count(args.workload.dataset_size, args.k);
    let schedule = build_schedule(&workload, &grouping, &partition, args.k, n)?;
    Ok((cm, schedule))
}

pub fn schedule(args: &ScheduleArgs) -> Result<usize> {
    let (_, schedule) = fixed_schedule(args)?;
    for (c, events) in schedule.cycles().iter().enumerate() {
        let list: Vec<String> = events
            .iter()
            .map(|e| format!("{}^{}@{}", e.kind, e.micro_batch, e.device))
            .collect();
        println!("cycle {c}: {}", list.join(" "));
    }
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        write_json(out, "schedule.json", &schedule)?;
    }
    Ok(0)
}

fn write_trace(out: &Path, trace: &Trace) -> Result<()> {
    let mut gantt = create(out, "gantt.json")?;
    write_gantt_json(trace, &mut gantt)?;
    writeln!(gantt)?;
    gantt.flush()?;
    let mut summary = create(out, "summary.csv")?;
    write_summary_csv(trace, &mut summary)?;
    summary.flush()?;
    Ok(())
}

fn print_trace(trace: &Trace) {
    let (c_t, c_f) = group_completion(trace);
    println!("makespan {}", trace.makespan);
    println!("C_T {c_t}");
    println!("C_F {c_f}");
    for (id, s) in &trace.devices {
        println!("util {id} {:.4}", s.utilization());
    }
}

pub fn simulate(args: &ScheduleArgs) -> Result<usize> {
    let (cm, schedule) = fixed_schedule(args)?;
    let trace = run_simulation(&schedule, &cm)?;
    print_trace(&trace);
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        write_trace(out, &trace)?;
    }
    Ok(0)
}

pub fn optimize(args: &OptimizeArgs) -> Result<usize> {
    let (cm, workload, _) = workload(&args.workload)?;
    let result = run_optimizer(&cm, &workload, args.k_max, args.workload.dataset_size)?;
    let doc = result.to_document(&workload);
    println!("{}", serde_json::to_string_pretty(&doc)?);
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        write_json(out, "opt.json", &doc)?;
        write_trace(out, &result.trace)?;
    }
    Ok(0)
}

#[derive(Deserialize)]
struct StageLine {
    stage: usize,
    trainee: String,
    initial_loss: f64,
    loss: f64,
}

pub fn report(args: &ReportArgs) -> Result<usize> {
    let dir = &args.out;
    let mut found = false;
    let mut violations = 0;
    let stages = dir.join("stages.jsonl");
    if stages.exists() {
        found = true;
        println!("stage  trainee  initial_loss  final_loss");
        for line in fs::read_to_string(&stages)?
            .lines()
            .filter(|l| !l.trim().is_empty())
        {
            let s: StageLine = serde_json::from_str(line).context("parsing stages.jsonl")?;
            println!(
                "{:>5}  {:<7}  {:>12.6}  {:>10.6}",
                s.stage, s.trainee, s.initial_loss, s.loss
            );
        }
    }
    let audit_path = dir.join("audit.json");
    if audit_path.exists() {
        found = true;
        let audit: AuditDocument = read_json(&audit_path)?;
        violations += audit.violations;
        for v in &audit.plan_violations {
            println!("plan violation: {v}");
        }
        for s in audit.stages.iter().filter(|s| !s.pass) {
            println!(
                "stage {} {}: masked changed {:?}, frozen changed {:?}, base changed {}",
                s.stage, s.trainee, s.masked_changed, s.frozen_changed, s.base_changed
            );
        }
        println!("audit violations: {}", audit.violations);
    }
    let opt_path = dir.join("opt.json");
    if opt_path.exists() {
        found = true;
        let opt: OptDocument = read_json(&opt_path)?;
        println!(
            "optimum: D_t {:?}, D_f {:?}, k {}, C_min {}, {} candidates",
            opt.d_t, opt.d_f, opt.k, opt.c_min, opt.evaluated
        );
    }
    if !found {
        bail!("no run outputs in {}", dir.display());
    }
    Ok(violations)
}
