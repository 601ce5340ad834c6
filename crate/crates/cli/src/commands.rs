use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use tarmac::agents::ModelConfig;
use tarmac::analysis::{self, AttentionRecord, SpatialKind};
use tarmac::checkpoint;
use tarmac::comm::CommMode;
use tarmac::config::{RunConfig, CONFIG_FILE};
use tarmac::envs::{EnvSpec, BRAKE};
use tarmac::trainer::{
    self, mean_se, Advantage, EvalOptions, EvalSummary, MetricsRow, Observers, RewardMode, TraceRecord,
    TrainHooks, TrainOutcome,
};

use crate::{
    AdvantageArg, CommArg, CorrelationArgs, EvalArgs, KindArg, RewardArg, RunFlags, SpatialArgs, SweepArgs,
    TrainArgs,
};

pub const METRICS_FILE: &str = "metrics.csv";
pub const ATTENTION_FILE: &str = "attention.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";
pub const EVAL_FILE: &str = "eval.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const SWEEP_FILE: &str = "sweep.csv";

/// 2 for a non-finite abort, 1 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    let nan = e
        .chain()
        .any(|c| matches!(c.downcast_ref::<tarmac::Error>(), Some(tarmac::Error::NonFinite { .. })));
    if nan {
        2
    } else {
        1
    }
}

fn build_config(flags: &RunFlags, rounds: Option<usize>, msg_dim: Option<usize>) -> Result<RunConfig> {
    let mut cfg = match (&flags.config, &flags.env) {
        (Some(path), env) => {
            let mut cfg = RunConfig::load(path)?;
            if let Some(env) = env {
                cfg.env.name = env.clone();
            }
            cfg
        }
        (None, Some(env)) => RunConfig::new(EnvSpec::new(env.clone())),
        (None, None) => bail!(tarmac::Error::Config("either --env or --config is required".into())),
    };
    let (t, c, o) = (&mut cfg.train, &mut cfg.comm, &mut cfg.env.overrides);
    if let Some(m) = flags.comm {
        c.mode = match m {
            CommArg::Targeted => CommMode::Targeted,
            CommArg::Mean => CommMode::MeanPool,
            CommArg::None => CommMode::None,
        };
    }
    if flags.gating {
        c.gating = true;
    }
    if let Some(r) = rounds {
        c.rounds = r;
    }
    if let Some(d) = msg_dim {
        c.value_dim = d;
    }
    if let Some(k) = flags.key_dim {
        c.key_dim = k;
    }
    if let Some(s) = flags.seed {
        t.seed = s;
    }
    if let Some(e) = flags.episodes {
        t.episodes = e;
    }
    if let Some(h) = flags.hidden {
        t.hidden = h;
        t.critic_hidden = h;
    }
    if let Some(lr) = flags.lr {
        t.lr = lr;
    }
    if let Some(b) = flags.batch {
        t.batch = b;
    }
    if let Some(r) = flags.rollout_len {
        t.rollout_len = r;
    }
    if let Some(a) = flags.advantage {
        t.advantage = match a {
            AdvantageArg::Q => Advantage::Q,
            AdvantageArg::QMinusValue => Advantage::QMinusValue,
            AdvantageArg::TdError => Advantage::TdError,
            AdvantageArg::Return => Advantage::Return,
        };
    }
    if let Some(r) = flags.reward_mode {
        t.reward_mode = match r {
            RewardArg::Team => RewardMode::Team,
            RewardArg::PerAgent => RewardMode::PerAgent,
        };
    }
    if flags.grad_clip.is_some() {
        t.grad_clip = flags.grad_clip;
    }
    if let Some(k) = flags.attention_every {
        t.attention_every = k;
    }
    o.grid = flags.grid.or(o.grid);
    o.agents = flags.agents.or(o.agents);
    o.horizon = flags.horizon.or(o.horizon);
    o.vision = flags.vision.or(o.vision);
    o.arrival_rate = flags.arrival_rate.or(o.arrival_rate);
    if flags.run_to_horizon {
        o.stop_when_solved = Some(false);
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub config_hash: String,
    pub episodes: u64,
    pub iterations: usize,
}

/// Trains `cfg` into `dir`: config, metrics CSV, sampled attention log and
/// checkpoint. On a non-finite abort a dump is written before returning.
fn train_into(cfg: &RunConfig, dir: &Path, verbose: bool) -> Result<TrainOutcome<f32>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut cfg = cfg.clone();
    cfg.out_dir = Some(dir.to_path_buf());
    cfg.save(&dir.join(CONFIG_FILE))?;

    let mut metrics_out = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
    writeln!(metrics_out, "{}", MetricsRow::CSV_HEADER)?;
    let mut attention_out = BufWriter::new(File::create(dir.join(ATTENTION_FILE))?);
    let mut io_error: Option<std::io::Error> = None;
    let mut last_rows: Vec<MetricsRow> = Vec::new();

    let result = {
        let mut on_metrics = |row: &MetricsRow| {
            if let Err(e) = writeln!(metrics_out, "{}", row.csv()).and_then(|_| metrics_out.flush()) {
                io_error.get_or_insert(e);
            }
            if verbose {
                eprintln!(
                    "iter {:>6}  episodes {:>8}  success {:.3}  steps {:.2}  reward {:.3}  entropy {:.3}",
                    row.iteration, row.episodes, row.success_rate, row.mean_steps, row.mean_reward, row.entropy
                );
            }
            last_rows.push(row.clone());
            if last_rows.len() > 10 {
                last_rows.remove(0);
            }
        };
        let mut attention_error: Option<tarmac::Error> = None;
        let mut on_attention = |rec: &AttentionRecord| {
            if attention_error.is_none() {
                if let Err(e) = analysis::write_jsonl(&mut attention_out, rec) {
                    attention_error = Some(e);
                }
            }
        };
        let mut hooks = TrainHooks {
            metrics: Some(&mut on_metrics),
            observers: Observers {
                attention: Some(&mut on_attention),
                trace: None,
            },
        };
        let r = trainer::train::<f32>(&cfg.env, &cfg.comm, &cfg.train, &mut hooks);
        drop(hooks);
        if let Some(e) = attention_error {
            return Err(e).context("writing the attention log");
        }
        r
    };
    if let Some(e) = io_error {
        return Err(e).context("writing metrics");
    }
    attention_out.flush()?;

    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            if matches!(e, tarmac::Error::NonFinite { .. }) {
                let dump = serde_json::json!({
                    "error": e.to_string(),
                    "config": cfg,
                    "recent_metrics": last_rows,
                });
                fs::write(dir.join(NAN_DUMP_FILE), serde_json::to_string_pretty(&dump)?)?;
            }
            return Err(e.into());
        }
    };
    let meta = CheckpointMeta {
        model: outcome.model.clone(),
        config_hash: cfg.hash(),
        episodes: outcome.episodes,
        iterations: outcome.iterations,
    };
    checkpoint::save(&outcome.params, &dir.join(CHECKPOINT_DIR), serde_json::to_value(&meta)?)?;
    Ok(outcome)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = build_config(&args.run, args.rounds, args.msg_dim)?;
    let outcome = train_into(&cfg, &args.out, args.verbose)?;
    let last = outcome.metrics.last();
    println!(
        "trained {} ({}): {} episodes in {} iterations; last success {:.3}, mean steps {:.2}",
        cfg.env.name,
        cfg.hash(),
        outcome.episodes,
        outcome.iterations,
        last.map_or(f64::NAN, |m| m.success_rate),
        last.map_or(f64::NAN, |m| m.mean_steps),
    );
    println!("run directory: {}", args.out.display());
    Ok(())
}

/// A run directory's config, model shape and parameters.
pub struct LoadedRun {
    pub config: RunConfig,
    pub meta: CheckpointMeta,
    pub params: tarmac::nn::ParamStore<f32>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let ckpt = dir.join(CHECKPOINT_DIR);
    let (params, meta) =
        checkpoint::load::<f32>(&ckpt).with_context(|| format!("loading checkpoint from {}", ckpt.display()))?;
    let meta: CheckpointMeta = serde_json::from_value(meta).context("checkpoint metadata")?;
    Ok(LoadedRun { config, meta, params })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: PathBuf,
    pub config_hash: String,
    pub config: RunConfig,
    pub summary: EvalSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub success_rate: MeanSe,
    pub mean_steps: MeanSe,
    pub mean_reward: MeanSe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub seed: u64,
    pub greedy: bool,
    pub runs: Vec<RunResult>,
    /// Mean and standard error of the per-run means.
    pub aggregate: Aggregate,
}

fn aggregate(runs: &[RunResult]) -> Aggregate {
    let stat = |f: &dyn Fn(&EvalSummary) -> f64| {
        let xs: Vec<f64> = runs.iter().map(|r| f(&r.summary)).collect();
        let (mean, se) = mean_se(&xs);
        MeanSe { mean, se }
    };
    Aggregate {
        runs: runs.len(),
        success_rate: stat(&|s| s.success_rate),
        mean_steps: stat(&|s| s.mean_steps),
        mean_reward: stat(&|s| s.mean_reward),
    }
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    ensure!(args.episodes > 0, tarmac::Error::Config("--episodes must be positive".into()));
    if args.runs.len() > 1 && (args.trace.is_some() || args.attention.is_some()) {
        bail!(tarmac::Error::Config("--trace and --attention need a single --run".into()));
    }
    let opts = EvalOptions {
        episodes: args.episodes,
        seed: args.seed,
        greedy: args.greedy,
        ..Default::default()
    };
    let mut results = Vec::new();
    for dir in &args.runs {
        let run = load_run(dir)?;
        let trace_path = args
            .trace
            .clone()
            .or_else(|| (args.episodes == 1).then(|| dir.join(TRACE_FILE)));
        let mut trace_out = trace_path.as_ref().map(File::create).transpose()?.map(BufWriter::new);
        let mut attention_out = args.attention.as_ref().map(File::create).transpose()?.map(BufWriter::new);
        let mut sink_error: Option<tarmac::Error> = None;
        let (summary, _) = {
            let mut on_trace = |r: &TraceRecord| {
                if let Some(w) = trace_out.as_mut() {
                    if let Err(e) = analysis::write_jsonl(w, r) {
                        sink_error.get_or_insert(e);
                    }
                }
            };
            let mut att_error: Option<tarmac::Error> = None;
            let mut on_attention = |r: &AttentionRecord| {
                if let Some(w) = attention_out.as_mut() {
                    if let Err(e) = analysis::write_jsonl(w, r) {
                        att_error.get_or_insert(e);
                    }
                }
            };
            let mut observers = Observers {
                attention: args.attention.is_some().then_some(&mut on_attention as &mut dyn FnMut(&AttentionRecord)),
                trace: trace_path.is_some().then_some(&mut on_trace as &mut dyn FnMut(&TraceRecord)),
            };
            let r = trainer::evaluate(&run.params, &run.meta.model, &run.config.env, &opts, &mut observers)?;
            drop(observers);
            if let Some(e) = att_error {
                return Err(e.into());
            }
            r
        };
        if let Some(e) = sink_error {
            return Err(e.into());
        }
        if let Some(mut w) = trace_out {
            w.flush()?;
        }
        if let Some(mut w) = attention_out {
            w.flush()?;
        }
        println!(
            "{}  success {:.3} ± {:.3}  steps {:.2} ± {:.2}  reward {:.3} ± {:.3}",
            dir.display(),
            summary.success_rate,
            summary.success_se,
            summary.mean_steps,
            summary.steps_se,
            summary.mean_reward,
            summary.reward_se
        );
        if let Some(p) = &trace_path {
            println!("trace: {}", p.display());
        }
        results.push(RunResult {
            run: dir.clone(),
            config_hash: run.config.hash(),
            config: run.config,
            summary,
        });
    }
    let agg = aggregate(&results);
    if results.len() > 1 {
        println!(
            "{} runs  success {:.3} ± {:.3}  steps {:.2} ± {:.2}  reward {:.3} ± {:.3}",
            agg.runs,
            agg.success_rate.mean,
            agg.success_rate.se,
            agg.mean_steps.mean,
            agg.mean_steps.se,
            agg.mean_reward.mean,
            agg.mean_reward.se
        );
    }
    let report = EvalReport {
        episodes: args.episodes,
        seed: args.seed,
        greedy: args.greedy,
        runs: results,
        aggregate: agg,
    };
    let out = args.out.clone().unwrap_or_else(|| args.runs[0].join(EVAL_FILE));
    fs::write(&out, serde_json::to_string_pretty(&report)?)?;
    println!("summary: {}", out.display());
    Ok(())
}

pub fn spatial(args: &SpatialArgs) -> Result<()> {
    let records = analysis::read_attention_jsonl(&args.log)?;
    let (width, height, brake) = match &args.run {
        Some(dir) => {
            let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
            let env = cfg.env.build()?;
            let (w, h) = env.grid();
            let brake = env.action_names().iter().position(|&n| n == "brake").unwrap_or(BRAKE);
            (w, h, brake)
        }
        None => match (args.width, args.height) {
            (Some(w), Some(h)) => (w, h, BRAKE),
            _ => bail!(tarmac::Error::Config("give --run or both --width and --height".into())),
        },
    };
    let kind = match args.kind {
        KindArg::Brake => SpatialKind::Brake,
        KindArg::Attention => SpatialKind::Attention,
    };
    let grid = analysis::spatial_grid(&records, kind, width, height, brake, args.round)?;
    let csv = grid.to_csv();
    match &args.out {
        Some(p) => {
            fs::write(p, csv)?;
            println!("wrote {}×{} grid to {}", width, height, p.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn correlation(args: &CorrelationArgs) -> Result<()> {
    let records = analysis::read_attention_jsonl(&args.log)?;
    let report = analysis::attended_correlation(&records, args.threshold, args.shift)?;
    match report.rho {
        Some(rho) => println!(
            "spearman rho {rho:.4} over {} pairs (threshold {}, shift {})",
            report.pairs, report.threshold, report.shift
        ),
        None => println!(
            "spearman rho undefined: a series is constant over {} pairs (threshold {}, shift {})",
            report.pairs, report.threshold, report.shift
        ),
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub msg_dim: usize,
    pub rounds: usize,
    pub config_hash: String,
    pub success_rate: f64,
    pub success_se: f64,
    pub mean_steps: f64,
    pub mean_reward: f64,
    pub run_dir: PathBuf,
}

pub const SWEEP_HEADER: &str = "msg_dim,rounds,config_hash,success_rate,success_se,mean_steps,mean_reward,run_dir";

impl SweepRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.msg_dim,
            self.rounds,
            self.config_hash,
            self.success_rate,
            self.success_se,
            self.mean_steps,
            self.mean_reward,
            self.run_dir.display()
        )
    }
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    ensure!(
        !args.msg_dims.is_empty() && !args.rounds.is_empty() && args.workers > 0 && args.eval_episodes > 0,
        tarmac::Error::Config("sweep needs message sizes, round counts, workers and eval episodes".into())
    );
    let mut cells = Vec::new();
    for &m in &args.msg_dims {
        for &r in &args.rounds {
            let cfg = build_config(&args.run, Some(r), Some(m))?;
            ensure!(
                cfg.comm.mode != CommMode::None,
                tarmac::Error::Config("a message-size sweep needs communication".into())
            );
            cells.push((m, r, cfg));
        }
    }
    fs::create_dir_all(&args.out)?;
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<Result<SweepRow>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let opts = EvalOptions {
        episodes: args.eval_episodes,
        ..Default::default()
    };
    let run_cell = |k: usize| -> Result<SweepRow> {
        let (m, r, cfg) = &cells[k];
        let hash = cfg.hash();
        let dir = args.out.join(&hash);
        let outcome = train_into(cfg, &dir, false)?;
        let (s, _) = trainer::evaluate(&outcome.params, &outcome.model, &cfg.env, &opts, &mut Observers::default())?;
        eprintln!("msg {m:>3} rounds {r}: success {:.3}", s.success_rate);
        Ok(SweepRow {
            msg_dim: *m,
            rounds: *r,
            config_hash: hash,
            success_rate: s.success_rate,
            success_se: s.success_se,
            mean_steps: s.mean_steps,
            mean_reward: s.mean_reward,
            run_dir: dir,
        })
    };
    std::thread::scope(|scope| {
        for _ in 0..args.workers.min(cells.len()) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= cells.len() {
                    break;
                }
                let row = run_cell(k);
                rows.lock().expect("sweep results lock")[k] = Some(row);
            });
        }
    });
    let mut table = Vec::new();
    for row in rows.into_inner().expect("sweep results lock") {
        table.push(row.expect("every cell runs")?);
    }
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    println!("{:>7} {:>6} {:>12} {:>9} {:>9}", "msg_dim", "rounds", "config", "success", "steps");
    for row in &table {
        println!(
            "{:>7} {:>6} {:>12} {:>9.3} {:>9.2}",
            row.msg_dim, row.rounds, row.config_hash, row.success_rate, row.mean_steps
        );
        csv.push_str(&row.csv());
        csv.push('\n');
    }
    let path = args.out.join(SWEEP_FILE);
    fs::write(&path, csv)?;
    println!("table: {}", path.display());
    Ok(())
}
