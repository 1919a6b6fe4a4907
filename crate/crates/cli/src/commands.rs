use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use fpnas_core::controller_search::{
    run_evolution, run_random_search, run_rnn_ppo, ControllerConfig, EvolutionConfig, PlantedReward, PpoConfig, ProxyReward,
    RewardFn, Sampler, SearchOutcome,
};
use fpnas_core::cost_model::{compare, estimate, CostComparison, CostReport};
use fpnas_core::graph_compiler::{export_dot, stack, FeatureGraph, PyramidInputSpec};
use fpnas_core::micro_tensor::{instrumented_counts, restore_checkpoint, save_checkpoint};
use fpnas_core::proxy_task::{evaluate_early_exit, generate_dataset, train_model, EarlyExit, ProxyModel, TaskConfig};
use fpnas_core::rng::derive_seed;
use fpnas_core::search_space::{self, from_json, from_json_unchecked, sample_random, to_json, to_json_pretty, Genome, SpaceConfig};

use crate::failure::Failure;
use crate::manifest::{read_json, read_text, to_pretty, write_manifest, write_text, RunManifest, SUMMARY_FILE};
use crate::{Driver, EvalArgs, GraphArgs, SamplerArg, SearchArgs, Task, TaskArgs, TrainArgs};

fn load_genome(path: &Path) -> Result<Genome, Failure> {
    Ok(from_json(&read_text(path)?)?)
}

fn genome_value(g: &Genome) -> serde_json::Value {
    serde_json::from_str(&to_json(g)).expect("own output")
}

fn genome_from_value(v: &serde_json::Value) -> Result<Genome, Failure> {
    Ok(from_json(&v.to_string())?)
}

pub fn validate(path: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let genome = from_json_unchecked(&read_text(path)?)?;
    let report = genome.validate();
    if report.is_ok() {
        println!("valid: {} cells, outputs {:?}", genome.cells.len(), genome.output_order.iter().map(|l| l.to_string()).collect::<Vec<_>>());
    } else {
        println!("invalid: {} violation(s)", report.violations.len());
        for v in &report.violations {
            println!("  {v}");
        }
    }
    if let Some(out) = out {
        let json = serde_json::json!({ "valid": report.is_ok(), "violations": report.violations });
        write_text(out, &to_pretty(&json))?;
    }
    if report.is_ok() {
        Ok(())
    } else {
        Err(Failure::domain("invalid-genome"))
    }
}

pub fn preset(name: &str, out: Option<&Path>) -> Result<(), Failure> {
    let g = search_space::preset(name).map_err(|e| Failure::usage(format!("{e}; known: {}", search_space::PRESETS.join(", "))))?;
    let text = to_json_pretty(&g) + "\n";
    match out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn build_graph(genome: &Genome, args: &GraphArgs) -> Result<FeatureGraph, Failure> {
    let genome = match args.dim {
        Some(d) => genome.with_feature_dim(d).map_err(Failure::usage)?,
        None => genome.clone(),
    };
    let spec = PyramidInputSpec::uniform(&genome, args.image_side);
    Ok(stack(&genome, args.stack, &spec)?)
}

pub fn compile(path: &Path, args: &GraphArgs, dot: Option<&Path>, json: Option<&Path>) -> Result<(), Failure> {
    let genome = load_genome(path)?;
    let graph = build_graph(&genome, args)?;
    println!("nodes {}  edges {}  stages {}", graph.nodes.len(), graph.edge_count(), graph.stack_count);
    for k in 1..=graph.stack_count {
        println!("  stage {k}: {} nodes", graph.stage_node_count(k));
    }
    if let Some(p) = dot {
        write_text(p, &export_dot(&graph))?;
    }
    if let Some(p) = json {
        write_text(p, &(graph.to_json() + "\n"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CostOutput {
    report: CostReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    compared_to: Option<CostReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    comparison: Option<CostComparison>,
    #[serde(skip_serializing_if = "Option::is_none")]
    verified: Option<bool>,
}

pub fn cost(path: &Path, args: &GraphArgs, other: Option<(PathBuf, GraphArgs)>, verify: bool, out: Option<&Path>) -> Result<(), Failure> {
    let genome = load_genome(path)?;
    let graph = build_graph(&genome, args)?;
    let report = estimate(&graph).map_err(Failure::domain)?;
    print!("{}", report.to_table());
    let mut output = CostOutput { report, compared_to: None, comparison: None, verified: None };
    if let Some((other_path, other_args)) = other {
        let other_genome = load_genome(&other_path)?;
        let b = estimate(&build_graph(&other_genome, &other_args)?).map_err(Failure::domain)?;
        let c = compare(&output.report, &b);
        println!();
        print!("{}", c.to_table());
        output.compared_to = Some(b);
        output.comparison = Some(c);
    }
    if verify {
        let (macs, other_ops) = instrumented_counts(&graph, 0).map_err(Failure::domain)?;
        let ok = output.report.total_flops == 2 * macs && output.report.total_other_ops == other_ops;
        println!();
        println!("verify: flops {} vs 2 x macs {}; other ops {} vs {}: {}", output.report.total_flops, 2 * macs, output.report.total_other_ops, other_ops, if ok { "ok" } else { "MISMATCH" });
        output.verified = Some(ok);
        if let Some(p) = out {
            write_text(p, &to_pretty(&output))?;
        }
        return if ok { Ok(()) } else { Err(Failure::domain("cost-mismatch: analytic totals disagree with counters")) };
    }
    if let Some(p) = out {
        write_text(p, &to_pretty(&output))?;
    }
    Ok(())
}

fn resolve_task_config(levels: &[search_space::Level], args: &TaskArgs) -> Result<TaskConfig, Failure> {
    let mut cfg = match &args.task_config {
        Some(p) => read_json::<TaskConfig>(p)?,
        None => TaskConfig::for_levels(levels),
    };
    if let Some(s) = args.steps {
        cfg.steps = s;
        cfg.warmup_steps = cfg.warmup_steps.min(s / 10);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Resolved search configuration, as stored in the run manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchRun {
    driver: Driver,
    task: Task,
    space: SpaceConfig,
    target: Option<serde_json::Value>,
    task_config: Option<TaskConfig>,
    stack_n: usize,
    budget: usize,
    seed: u64,
    workers: usize,
    sampler: Sampler,
    evolution: EvolutionConfig,
    ppo: PpoConfig,
    controller: ControllerConfig,
    batch_per_iter: usize,
}

#[derive(Debug, Serialize)]
struct UniquenessPoint {
    samples: usize,
    unique: usize,
    window_novelty: f64,
}

#[derive(Debug, Serialize)]
struct SearchSummary {
    driver: Driver,
    task: Task,
    seed: u64,
    budget: usize,
    total: usize,
    unique: usize,
    failures: usize,
    best_reward: f64,
    best_genome_hash: String,
    initial_window_mean: f64,
    final_window_mean: f64,
    uniqueness: Vec<UniquenessPoint>,
}

fn load_space(arg: &str) -> Result<SpaceConfig, Failure> {
    if arg == "nasfpn" {
        return Ok(SpaceConfig::nasfpn());
    }
    read_json(Path::new(arg))
}

pub fn search(args: &SearchArgs) -> Result<(), Failure> {
    let space = load_space(&args.space)?;
    let target = match (args.task, &args.target) {
        (Task::Planted, Some(p)) => Some(load_genome(p)?),
        (Task::Planted, None) if space == SpaceConfig::nasfpn() => Some(search_space::preset("nasfpn-7cell").expect("known preset")),
        (Task::Planted, None) => Some(sample_random(&space, derive_seed(args.seed, "planted-target", 0)).map_err(Failure::usage)?),
        (Task::Proxy, _) => None,
    };
    if let Some(t) = &target {
        if t.space != space {
            return Err(Failure::usage("target genome is not in the search space"));
        }
    }
    let task_config = match args.task {
        Task::Proxy => Some(resolve_task_config(&space.output_levels, &args.task_args)?),
        Task::Planted => None,
    };
    let mut ppo = PpoConfig::default();
    if let Some(lr) = args.ppo_lr {
        ppo.lr = lr;
    }
    let run = SearchRun {
        driver: args.driver,
        task: args.task,
        space,
        target: target.as_ref().map(genome_value),
        task_config,
        stack_n: args.stack,
        budget: args.budget,
        seed: args.seed,
        workers: args.workers,
        sampler: match args.sampler {
            SamplerArg::Iid => Sampler::Iid,
            SamplerArg::Permutation => Sampler::Permutation,
        },
        evolution: EvolutionConfig {
            population: args.population,
            cycles: args.budget.saturating_sub(args.population),
            tournament_k: args.tournament,
        },
        ppo,
        controller: ControllerConfig::default(),
        batch_per_iter: args.batch,
    };
    execute_search(&run, &args.out)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn execute_search(run: &SearchRun, out: &Path) -> Result<(), Failure> {
    let start = Instant::now();
    let reward: Box<dyn RewardFn> = match run.task {
        Task::Planted => {
            let t = run.target.as_ref().ok_or_else(|| Failure::usage("planted task needs a target"))?;
            Box::new(PlantedReward::new(genome_from_value(t)?))
        }
        Task::Proxy => {
            let cfg = run.task_config.clone().ok_or_else(|| Failure::usage("proxy task needs a task config"))?;
            cfg.validate()?;
            Box::new(ProxyReward::new(cfg, run.stack_n, run.seed))
        }
    };
    if run.budget == 0 {
        return Err(Failure::usage("budget must be at least 1"));
    }
    let outcome: SearchOutcome = match run.driver {
        Driver::Random => run_random_search(&run.space, reward.as_ref(), run.budget, run.sampler, run.seed, run.workers)?,
        Driver::Evolution => {
            if run.budget < run.evolution.population {
                return Err(Failure::usage(format!("budget {} is smaller than the population {}", run.budget, run.evolution.population)));
            }
            run_evolution(&run.space, reward.as_ref(), &run.evolution, run.seed, run.workers)?
        }
        Driver::Ppo => {
            let iterations = run.budget / run.batch_per_iter.max(1);
            if iterations == 0 {
                return Err(Failure::usage(format!("budget {} is smaller than one batch of {}", run.budget, run.batch_per_iter)));
            }
            run_rnn_ppo(&run.space, reward.as_ref(), run.controller, &run.ppo, iterations, run.batch_per_iter, run.seed, run.workers)?
        }
    };
    let log = &outcome.log;
    let rewards = log.rewards();
    let total = log.total();
    let window = (total / 10).max(1);
    let ok: Vec<_> = log.records.iter().filter(|r| r.reward.is_some()).collect();
    let uniqueness = (1..=10)
        .map(|k| k * total / 10)
        .filter(|&n| n > 0)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .map(|n| UniquenessPoint { samples: n, unique: ok[n - 1].unique_so_far, window_novelty: log.novelty_ratio(n.saturating_sub(window), n) })
        .collect();
    let summary = SearchSummary {
        driver: run.driver,
        task: run.task,
        seed: run.seed,
        budget: run.budget,
        total,
        unique: log.unique(),
        failures: log.failures(),
        best_reward: outcome.best_reward,
        best_genome_hash: outcome.best.key().0,
        initial_window_mean: mean(&rewards[..window.min(rewards.len())]),
        final_window_mean: mean(&rewards[rewards.len().saturating_sub(window)..]),
        uniqueness,
    };

    let best = out.join("best_genome.json");
    let log_path = out.join("search_log.jsonl");
    let summary_path = out.join(SUMMARY_FILE);
    write_text(&best, &(to_json_pretty(&outcome.best) + "\n"))?;
    write_text(&log_path, &log.to_jsonl())?;
    write_text(&summary_path, &to_pretty(&summary))?;
    if !log.controller_loss.is_empty() {
        write_text(&out.join("controller_loss.json"), &to_pretty(&log.controller_loss))?;
    }
    write_manifest(out, "search", run, run.seed, vec![best, log_path, summary_path], start.elapsed().as_secs_f64())?;

    println!("best reward {:.4}  ({} samples, {} unique, {} failed)", summary.best_reward, total, summary.unique, summary.failures);
    println!("mean reward: first {} samples {:.4}, last {} samples {:.4}", window, summary.initial_window_mean, window, summary.final_window_mean);
    println!("{:>8} {:>8} {:>8}", "samples", "unique", "novelty");
    for p in &summary.uniqueness {
        println!("{:>8} {:>8} {:>8.3}", p.samples, p.unique, p.window_novelty);
    }
    Ok(())
}

/// Resolved training configuration, as stored in the run manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainRun {
    genome: serde_json::Value,
    task_config: TaskConfig,
    stack_n: usize,
    deep_supervision: bool,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    genome_hash: String,
    stack_n: usize,
    deep_supervision: bool,
    seed: u64,
    steps: usize,
    initial_loss: f64,
    final_loss: f64,
    exits: Vec<EarlyExit>,
}

pub fn train(args: &TrainArgs) -> Result<(), Failure> {
    let genome = load_genome(&args.genome)?;
    let task_config = resolve_task_config(&genome.space.output_levels, &args.task_args)?;
    let run = TrainRun {
        genome: genome_value(&genome),
        task_config,
        stack_n: args.stack,
        deep_supervision: args.deep_supervision,
        seed: args.seed,
    };
    execute_train(&run, &args.out)
}

fn supervised_stages(model: &ProxyModel) -> Vec<usize> {
    if model.deep {
        (1..=model.stack_n).collect()
    } else {
        vec![model.stack_n]
    }
}

fn print_exits(exits: &[EarlyExit]) {
    println!("{:>6} {:>8} {:>14}", "exit", "AP", "MACs/image");
    for e in exits {
        println!("{:>6} {:>8.4} {:>14}", e.stage, e.ap, e.macs_per_image);
    }
}

fn execute_train(run: &TrainRun, out: &Path) -> Result<(), Failure> {
    let start = Instant::now();
    let genome = genome_from_value(&run.genome)?;
    run.task_config.validate()?;
    let data = generate_dataset(&run.task_config);
    let (mut model, log) = train_model(&genome, &run.task_config, run.stack_n, run.deep_supervision, run.seed, &data)?;
    let exits = supervised_stages(&model)
        .into_iter()
        .map(|k| evaluate_early_exit(&mut model, k, &data.val))
        .collect::<Result<Vec<_>, _>>()?;
    let k = log.losses.len().min(10);
    let summary = TrainSummary {
        genome_hash: genome.key().0,
        stack_n: run.stack_n,
        deep_supervision: run.deep_supervision,
        seed: run.seed,
        steps: run.task_config.steps,
        initial_loss: mean(&log.losses[..k]),
        final_loss: mean(&log.losses[log.losses.len() - k..]),
        exits,
    };

    let ckpt = out.join("checkpoint");
    save_checkpoint(&model.state.params, &ckpt).map_err(|e| Failure::io(&ckpt, e))?;
    let log_path = out.join("train_log.json");
    let summary_path = out.join(SUMMARY_FILE);
    write_text(&log_path, &to_pretty(&log))?;
    write_text(&summary_path, &to_pretty(&summary))?;
    write_manifest(out, "train", run, run.seed, vec![ckpt, log_path, summary_path], start.elapsed().as_secs_f64())?;
    println!("loss {:.5} -> {:.5} over {} steps", summary.initial_loss, summary.final_loss, summary.steps);
    print_exits(&summary.exits);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalRun {
    run: PathBuf,
    early_exit: Option<usize>,
}

pub fn eval(args: &EvalArgs) -> Result<(), Failure> {
    let run = EvalRun { run: args.run.clone(), early_exit: args.early_exit };
    execute_eval(&run, args.out.as_deref())
}

fn execute_eval(run: &EvalRun, out: Option<&Path>) -> Result<(), Failure> {
    let start = Instant::now();
    let manifest: RunManifest = read_json(&run.run.join(crate::manifest::MANIFEST_FILE))?;
    if manifest.command != "train" {
        return Err(Failure::usage(format!("{} is not a train run", run.run.display())));
    }
    let train: TrainRun = serde_json::from_value(manifest.config).map_err(|e| Failure::usage(format!("parse-error: manifest config: {e}")))?;
    let genome = genome_from_value(&train.genome)?;
    let mut model = ProxyModel::new(&genome, &train.task_config, train.stack_n, train.deep_supervision, train.seed)?;
    let ckpt = run.run.join("checkpoint");
    restore_checkpoint(&mut model.state.params, &ckpt).map_err(|e| Failure::io(&ckpt, e))?;
    let data = generate_dataset(&train.task_config);
    let stages = match run.early_exit {
        Some(k) => vec![k],
        None => supervised_stages(&model),
    };
    let exits = stages.into_iter().map(|k| evaluate_early_exit(&mut model, k, &data.val)).collect::<Result<Vec<_>, _>>()?;
    print_exits(&exits);
    if let Some(out) = out {
        let summary_path = out.join(SUMMARY_FILE);
        let by_stage: BTreeMap<String, &EarlyExit> = exits.iter().map(|e| (e.stage.to_string(), e)).collect();
        write_text(&summary_path, &to_pretty(&serde_json::json!({ "exits": by_stage })))?;
        write_manifest(out, "eval", run, train.seed, vec![summary_path], start.elapsed().as_secs_f64())?;
    }
    Ok(())
}

pub fn rerun(manifest_path: &Path, out: &Path) -> Result<(), Failure> {
    let m: RunManifest = read_json(manifest_path)?;
    let bad = |e: serde_json::Error| Failure::usage(format!("parse-error: manifest config: {e}"));
    match m.command.as_str() {
        "search" => execute_search(&serde_json::from_value(m.config).map_err(bad)?, out),
        "train" => execute_train(&serde_json::from_value(m.config).map_err(bad)?, out),
        "eval" => execute_eval(&serde_json::from_value(m.config).map_err(bad)?, Some(out)),
        other => Err(Failure::usage(format!("cannot rerun command {other:?}"))),
    }
}
