//! Command-line entry points: `reward-check`, `synth`, `train`, `eval`,
//! `gen-tables`, and the end-to-end `demo`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{load_eval_config, load_synth_config, load_trainer_config, KvConfig};
use crate::error::{Error, Result};
use crate::eval::{
    compare_methods, run_eval, write_cells_csv, ConstantPredictor, EvalConfig, EvalReport,
    ExternalPredictor, OraclePredictor, Predictor, ToyMode, ToyPredictor,
};
use crate::grpo::{measure_policy, train, write_trace_csv, TrainerConfig};
use crate::pipeline::{ContextSpec, CorpusSpec, FilterConfig};
use crate::policy::{ToyParams, ToyPolicy};
use crate::rewards::{score_rollout, RewardConfig, RewardTriple};
use crate::synthesis::{
    filter_rl_instances, synthesize_corpus, ExternalTeacher, HeuristicJudge, Judge, MockTeacher,
    PassAllJudge, Teacher,
};
use crate::synthetic::{bundled_ablation_tables, bundled_training_tables};
use crate::table::{load_tables_dir, read_instances_jsonl, write_instances_jsonl, Table, TrainingInstance};

#[derive(Parser)]
#[command(name = "tabrl", version, about = "Select-then-predict tabular ICL toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Score JSONL {output_text, instance} pairs into reward triples.
    RewardCheck {
        /// Input JSON Lines file.
        #[arg(long)]
        input: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize a cold-start trajectory corpus from a directory of tables.
    Synth {
        #[arg(long)]
        tables: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `mock`, `mock-oracle`, or `external:<url>`.
        #[arg(long, default_value = "mock")]
        teacher: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `pass` or `heuristic`.
        #[arg(long, default_value = "heuristic")]
        judge: String,
        /// Key-value config file (pipeline + gates).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the toy policy on a JSONL instance corpus.
    Train {
        #[arg(long)]
        instances: PathBuf,
        /// Key-value config file (trainer).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a predictor over a directory of tables.
    Eval {
        #[arg(long)]
        tables: PathBuf,
        /// `toy:<params.json>`, `oracle`, `constant:<value>`, or `external:<url>`.
        #[arg(long)]
        predictor: String,
        /// Key-value config file (protocol).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a bundled synthetic table corpus to a directory.
    GenTables {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `training` or `ablation`.
        #[arg(long, default_value = "training")]
        corpus: String,
        /// Evidence pool size the cluster geometry is matched to.
        #[arg(long, default_value_t = 16)]
        pool_size: usize,
    },
    /// End-to-end demo on bundled tables: synth, train, eval, rank.
    Demo {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::RewardCheck { input, out } => reward_check(&input, out.as_deref()),
        Command::Synth { tables, out, teacher, seed, judge, config } => {
            synth(&tables, &out, &teacher, seed, &judge, config.as_deref())
        }
        Command::Train { instances, config, out } => train_cmd(&instances, config.as_deref(), &out),
        Command::Eval { tables, predictor, config, out } => {
            eval_cmd(&tables, &predictor, config.as_deref(), &out)
        }
        Command::GenTables { out, seed, corpus, pool_size } => gen_tables(&out, seed, &corpus, pool_size),
        Command::Demo { out, seed } => demo(&out, seed),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RewardCheckLine {
    output_text: String,
    instance: TrainingInstance,
}

fn reward_check(input: &Path, out: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(input)?;
    let cfg = RewardConfig::default();
    let mut lines: Vec<RewardTriple> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let pair: RewardCheckLine = serde_json::from_str(line)?;
        pair.instance.validate()?;
        lines.push(score_rollout(&pair.output_text, &pair.instance, &cfg));
    }
    let mut rendered = String::new();
    for triple in &lines {
        rendered.push_str(&serde_json::to_string(triple)?);
        rendered.push('\n');
    }
    match out {
        Some(path) => std::fs::write(path, rendered)?,
        None => print!("{rendered}"),
    }
    eprintln!("scored {} rollouts", lines.len());
    Ok(())
}

fn make_teacher(spec: &str, seed: u64) -> Result<Box<dyn Teacher>> {
    if spec == "mock" {
        Ok(Box::new(MockTeacher::new(seed)))
    } else if spec == "mock-oracle" {
        Ok(Box::new(MockTeacher::oracle(seed)))
    } else if let Some(url) = spec.strip_prefix("external:") {
        Ok(Box::new(ExternalTeacher::new(url)))
    } else {
        Err(Error::Config(format!("unknown teacher '{spec}'")))
    }
}

fn make_judge(spec: &str) -> Result<Box<dyn Judge>> {
    match spec {
        "pass" => Ok(Box::new(PassAllJudge)),
        "heuristic" => Ok(Box::new(HeuristicJudge::default())),
        other => Err(Error::Config(format!("unknown judge '{other}'"))),
    }
}

fn synth(tables_dir: &Path, out: &Path, teacher_spec: &str, seed: u64, judge_spec: &str, config: Option<&Path>) -> Result<()> {
    let tables = load_tables_dir(tables_dir)?;
    if tables.is_empty() {
        return Err(Error::Config(format!("no tables found in {}", tables_dir.display())));
    }
    let mut kv = match config {
        Some(path) => KvConfig::from_file(path)?,
        None => KvConfig::empty(),
    };
    let (corpus_spec, synth_cfg) = load_synth_config(&mut kv, seed)?;
    kv.finish()?;
    let mut teacher = make_teacher(teacher_spec, seed)?;
    let judge = make_judge(judge_spec)?;
    let records = synthesize_corpus(&tables, teacher.as_mut(), &corpus_spec, &synth_cfg, judge.as_ref())?;
    crate::synthesis::write_records_jsonl(out, &records)?;
    let accepted = records.iter().filter(|r| r.accepted).count();
    println!(
        "synthesized {} trajectories from {} tables ({} accepted, {} rejected) -> {}",
        records.len(),
        tables.len(),
        accepted,
        records.len() - accepted,
        out.display()
    );
    Ok(())
}

fn train_cmd(instances_path: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let instances = read_instances_jsonl(instances_path)?;
    let mut kv = match config {
        Some(path) => KvConfig::from_file(path)?,
        None => KvConfig::empty(),
    };
    let checkpoint_every = kv.usize("checkpoint_every", 100)?;
    let cfg = load_trainer_config(&mut kv)?;
    kv.finish()?;
    std::fs::create_dir_all(out)?;
    let init = ToyParams::init().to_vec();
    let result = train(&ToyPolicy, &init, &instances, &cfg)?;

    write_trace_csv(out.join("trace.csv"), &result.trace)?;
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    for row in &result.trace {
        if checkpoint_every > 0 && (row.step + 1) % checkpoint_every == 0 {
            std::fs::write(
                ckpt_dir.join(format!("params_{:06}.json", row.step + 1)),
                serde_json::to_string_pretty(&ToyParams::from_slice(&row.params))?,
            )?;
        }
    }
    std::fs::write(
        out.join("params.json"),
        serde_json::to_string_pretty(&ToyParams::from_slice(&result.params))?,
    )?;
    std::fs::write(
        out.join("balancer.json"),
        serde_json::to_string_pretty(&result.balancer)?,
    )?;

    let before = measure_policy(&ToyPolicy, &init, &instances, cfg.group_size, cfg.seed ^ 0xa5a5, &cfg.reward);
    let after = measure_policy(&ToyPolicy, &result.params, &instances, cfg.group_size, cfg.seed ^ 0xa5a5, &cfg.reward);
    let metrics = serde_json::json!({
        "steps": result.trace.len(),
        "diverged_at": result.diverged_at,
        "initial": before,
        "final": after,
        "balancer": result.balancer,
        "params": ToyParams::from_slice(&result.params),
    });
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;

    if let Some(step) = result.diverged_at {
        return Err(Error::NonFinite(format!(
            "training diverged at step {step}; trace dumped to {}",
            out.join("trace.csv").display()
        )));
    }
    println!(
        "trained {} steps on {} instances: evidence F1 {:.3} -> {:.3}, correctness {:.3} -> {:.3} -> {}",
        result.trace.len(),
        instances.len(),
        before.reward_evidence,
        after.reward_evidence,
        before.reward_correctness,
        after.reward_correctness,
        out.display()
    );
    Ok(())
}

fn make_predictor(spec: &str) -> Result<Box<dyn Predictor>> {
    if spec == "oracle" {
        Ok(Box::new(OraclePredictor))
    } else if let Some(value) = spec.strip_prefix("constant:") {
        Ok(Box::new(ConstantPredictor(value.to_string())))
    } else if let Some(path) = spec.strip_prefix("toy:") {
        let text = std::fs::read_to_string(path)?;
        let params: ToyParams = serde_json::from_str(&text)?;
        Ok(Box::new(ToyPredictor {
            params: params.to_vec(),
            mode: ToyMode::Greedy,
        }))
    } else if let Some(url) = spec.strip_prefix("external:") {
        Ok(Box::new(ExternalPredictor::new(url)))
    } else {
        Err(Error::Config(format!("unknown predictor '{spec}'")))
    }
}

fn eval_cmd(tables_dir: &Path, predictor_spec: &str, config: Option<&Path>, out: &Path) -> Result<()> {
    let tables = load_tables_dir(tables_dir)?;
    if tables.is_empty() {
        return Err(Error::Config(format!("no tables found in {}", tables_dir.display())));
    }
    let mut kv = match config {
        Some(path) => KvConfig::from_file(path)?,
        None => KvConfig::empty(),
    };
    let (cfg, context, filter) = load_eval_config(&mut kv)?;
    kv.finish()?;
    let mut predictor = make_predictor(predictor_spec)?;
    let report = run_eval(predictor.as_mut(), &tables, &cfg, &context, &filter)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    write_cells_csv(out.join("cells.csv"), &report)?;
    print_report(predictor_spec, &report);
    Ok(())
}

fn print_report(name: &str, report: &EvalReport) {
    println!("== {name} ==");
    if !report.shot_means_cls.is_empty() {
        let parts: Vec<String> = report
            .shot_means_cls
            .iter()
            .map(|(k, v)| format!("{k}-shot {v:.3}"))
            .collect();
        println!("  accuracy: {}", parts.join("  "));
    }
    if !report.shot_means_reg.is_empty() {
        let parts: Vec<String> = report
            .shot_means_reg
            .iter()
            .map(|(k, v)| format!("{k}-shot {v:.3}"))
            .collect();
        println!("  nmae:     {}", parts.join("  "));
    }
    if report.failures > 0 {
        println!("  predictor failures: {}", report.failures);
    }
}

fn gen_tables(out: &Path, seed: u64, corpus: &str, pool_size: usize) -> Result<()> {
    let tables = match corpus {
        "training" => bundled_training_tables(pool_size, seed),
        "ablation" => bundled_ablation_tables(pool_size, seed),
        other => return Err(Error::Config(format!("unknown corpus '{other}'"))),
    };
    std::fs::create_dir_all(out)?;
    for (id, table) in &tables {
        std::fs::write(out.join(format!("{id}.json")), table.to_json_string()?)?;
    }
    println!("wrote {} tables to {}", tables.len(), out.display());
    Ok(())
}

/// The full desk-scale workflow on bundled synthetic tables.
fn demo(out: &Path, seed: u64) -> Result<()> {
    let pool_size = 16;
    std::fs::create_dir_all(out)?;

    // 1. tables
    let tables = bundled_training_tables(pool_size, seed);
    let tables_dir = out.join("tables");
    std::fs::create_dir_all(&tables_dir)?;
    for (id, table) in &tables {
        std::fs::write(tables_dir.join(format!("{id}.json")), table.to_json_string()?)?;
    }
    println!("[1/5] wrote {} bundled tables", tables.len());

    // 2. cold-start synthesis
    let corpus_spec = CorpusSpec {
        filter: FilterConfig::default(),
        context: ContextSpec {
            shots: vec![4, 8, 16],
            pool_size,
            ratio_lo: 0.2,
            ratio_hi: 0.5,
            seed,
        },
        queries_per_table: 4,
    };
    let mut teacher = MockTeacher::new(seed);
    let records = synthesize_corpus(
        &tables,
        &mut teacher,
        &corpus_spec,
        &crate::synthesis::SynthesisConfig::default(),
        &HeuristicJudge::default(),
    )?;
    crate::synthesis::write_records_jsonl(out.join("corpus.jsonl"), &records)?;
    let accepted = records.iter().filter(|r| r.accepted).count();
    println!(
        "[2/5] synthesized {} trajectories ({} accepted, {} rejected)",
        records.len(),
        accepted,
        records.len() - accepted
    );

    // 3. RL difficulty filter with the initial toy policy as the probe
    let init = ToyParams::init().to_vec();
    let mut probe = ToyPredictor::greedy(init.clone());
    let mut rl_instances = filter_rl_instances(&records, &mut probe);
    if rl_instances.is_empty() {
        log::warn!("difficulty filter kept nothing; training on all non-exhausted instances");
        rl_instances = records
            .iter()
            .filter(|r| r.reject_reason != Some(crate::synthesis::RejectReason::RetriesExhausted))
            .map(|r| r.instance.clone())
            .collect();
    }
    write_instances_jsonl(out.join("rl_instances.jsonl"), &rl_instances)?;
    println!("[3/5] RL set: {} of {} instances kept", rl_instances.len(), records.len());

    // 4. training
    let trainer_cfg = TrainerConfig { seed, steps: 500, ..TrainerConfig::default() };
    let train_dir = out.join("train");
    std::fs::create_dir_all(&train_dir)?;
    let result = train(&ToyPolicy, &init, &rl_instances, &trainer_cfg)?;
    write_trace_csv(train_dir.join("trace.csv"), &result.trace)?;
    std::fs::write(
        train_dir.join("params.json"),
        serde_json::to_string_pretty(&ToyParams::from_slice(&result.params))?,
    )?;
    std::fs::write(
        train_dir.join("balancer.json"),
        serde_json::to_string_pretty(&result.balancer)?,
    )?;
    if let Some(step) = result.diverged_at {
        return Err(Error::NonFinite(format!("demo training diverged at step {step}")));
    }
    let before = measure_policy(&ToyPolicy, &init, &rl_instances, 8, seed ^ 0xa5a5, &trainer_cfg.reward);
    let after = measure_policy(&ToyPolicy, &result.params, &rl_instances, 8, seed ^ 0xa5a5, &trainer_cfg.reward);
    println!(
        "[4/5] trained {} steps: evidence F1 {:.3} -> {:.3}, correctness {:.3} -> {:.3}",
        result.trace.len(),
        before.reward_evidence,
        after.reward_evidence,
        before.reward_correctness,
        after.reward_correctness
    );

    // 5. held-out evaluation and rank table (fresh tables, both task types)
    let held_out = bundled_training_tables(pool_size, seed + 1000);
    let eval_tables: Vec<(String, Table)> = held_out
        .iter()
        .filter(|(id, _)| id.starts_with("cls"))
        .take(4)
        .chain(held_out.iter().filter(|(id, _)| id.starts_with("reg")).take(4))
        .cloned()
        .collect();
    let eval_cfg = EvalConfig {
        shot_budgets: vec![0, 4, 8],
        seeds: vec![0, 1, 2],
        nmae_clip: 1.0,
        sample_cap: 4,
    };
    let eval_context = ContextSpec {
        shots: eval_cfg.shot_budgets.clone(),
        pool_size,
        ratio_lo: 0.2,
        ratio_hi: 0.5,
        seed,
    };
    let filter = FilterConfig::default();
    let eval_dir = out.join("eval");
    std::fs::create_dir_all(&eval_dir)?;
    let mut methods: Vec<(String, Box<dyn Predictor>)> = vec![
        ("toy_trained".into(), Box::new(ToyPredictor::greedy(result.params.clone()))),
        ("toy_initial".into(), Box::new(ToyPredictor::greedy(init.clone()))),
        ("oracle".into(), Box::new(OraclePredictor)),
        ("constant".into(), Box::new(ConstantPredictor("class_0".into()))),
    ];
    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    for (name, predictor) in methods.iter_mut() {
        let report = run_eval(predictor.as_mut(), &eval_tables, &eval_cfg, &eval_context, &filter)?;
        std::fs::write(
            eval_dir.join(format!("report_{name}.json")),
            serde_json::to_string_pretty(&report)?,
        )?;
        write_cells_csv(eval_dir.join(format!("cells_{name}.csv")), &report)?;
        print_report(name, &report);
        reports.push((name.clone(), report));
    }
    let summary = compare_methods(&reports)?;
    std::fs::write(eval_dir.join("ranks.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("[5/5] rank summary:");
    print_ranks("cls Rank_z", &summary.cls_rank_z);
    print_ranks("cls Rank_i", &summary.cls_rank_i);
    print_ranks("reg Rank_z", &summary.reg_rank_z);
    print_ranks("reg Rank_i", &summary.reg_rank_i);
    let mut done = std::fs::File::create(out.join("DONE"))?;
    writeln!(done, "ok")?;
    Ok(())
}

fn print_ranks(label: &str, ranks: &Option<BTreeMap<String, f64>>) {
    if let Some(ranks) = ranks {
        let mut ordered: Vec<(&String, &f64)> = ranks.iter().collect();
        ordered.sort_by(|a, b| a.1.total_cmp(b.1));
        let parts: Vec<String> = ordered.iter().map(|(m, r)| format!("{m} {r:.2}")).collect();
        println!("  {label}: {}", parts.join("  "));
    }
}
