//! `proxynet` command-line front end: train, eval, ablate, audit and synth.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use toml::Value;

use proxynet::backbone::BackboneKind;
use proxynet::checkpoint::Checkpoint;
use proxynet::config::{flat_pairs, parse_value, RunConfig};
use proxynet::data::{generate_synthetic, materialize, Dataset};
use proxynet::episode::{Episode, Split};
use proxynet::error::Error;
use proxynet::eval::{evaluate_model, sample_tasks, ParamAudit};
use proxynet::model::ProxyNet;
use proxynet::proxy::ProxyKind;
use proxynet::relation::MetricKind;
use proxynet::train::{history_csv, training_episode, validation_seed, Trainer};

#[derive(Parser)]
#[command(name = "proxynet", version, about = "Few-shot classification with learned class proxies and a 3D relation metric")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a model and write checkpoints, history and a config snapshot.
    Train(Common),
    /// Evaluate a checkpoint on meta-test tasks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate every variant along one axis.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        #[command(flatten)]
        common: Common,
    },
    /// Count trainable parameters per submodule.
    Audit {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write the configured synthetic dataset to disk as PNGs plus a manifest.
    Synth(Common),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Axis {
    Proxy,
    Metric,
    Backbone,
    Augmentation,
}

#[derive(Args)]
struct Common {
    /// TOML file of dotted configuration keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_tasks: Option<usize>,
    #[arg(long)]
    proxy: Option<String>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    backbone: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    /// File keys, then `--set`, then dedicated flags.
    fn pairs(&self) -> Result<Vec<(String, Value)>> {
        let mut pairs = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                flat_pairs(&text)?
            }
            None => Vec::new(),
        };
        for item in &self.set {
            let Some((k, v)) = item.split_once('=') else {
                bail!(Error::Config {
                    key: item.clone(),
                    message: "overrides take the form key=value".into(),
                });
            };
            pairs.push((k.trim().to_string(), parse_value(v.trim())));
        }
        let string = |s: &String| Value::String(s.clone());
        let flags = [
            ("seed", self.seed.map(|s| Value::Integer(s as i64))),
            ("eval.n_tasks", self.n_tasks.map(|n| Value::Integer(n as i64))),
            ("model.proxy", self.proxy.as_ref().map(string)),
            ("model.metric", self.metric.as_ref().map(string)),
            ("model.backbone", self.backbone.as_ref().map(string)),
            ("out", self.out.as_ref().map(|p| Value::String(p.display().to_string()))),
        ];
        pairs.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        Ok(pairs)
    }

    fn resolve(&self) -> Result<RunConfig> {
        Ok(RunConfig::from_pairs(&self.pairs()?)?)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(cfg.out.clone())
}

fn train(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let out = prepare_out(&cfg)?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    let dataset = cfg.open_dataset()?;
    let model = ProxyNet::<f32>::build(cfg.model.clone(), cfg.seed)?;
    eprintln!("{} trainable parameters", model.params.trainable_count(""));
    let trainer = Trainer::new(model, &dataset, cfg.task, cfg.train_config())?;
    let history_path = out.join("history.csv");
    let outcome = trainer.run(|row, t| {
        eprintln!("epoch {:>4}  loss {:.4}  val {:.4}  lr {:.2e}", row.epoch, row.train_loss, row.val_acc, row.lr);
        fs::write(&history_path, history_csv(&t.state().history)).map_err(|e| Error::io(&history_path, e))
    })?;
    write(&history_path, history_csv(&outcome.history))?;
    outcome.best.save(&out.join("checkpoint.json"))?;
    outcome.last.save(&out.join("last.json"))?;
    if let (Some(epoch), Some(acc)) = (outcome.best.state.as_ref().and_then(|s| s.best_epoch), outcome.best.best_val_acc()) {
        eprintln!("best validation accuracy {:.2}% at epoch {epoch}", 100.0 * acc);
    }
    println!("{}", out.join("checkpoint.json").display());
    Ok(())
}

fn eval(checkpoint: &Path, common: &Common) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let pairs = common.pairs()?;
    let mut cfg = RunConfig::from_pairs(&pairs)?;
    if !pairs.iter().any(|(k, _)| k.starts_with("model.")) {
        cfg.model = ckpt.model.clone();
        if cfg.policy.crop_to != cfg.model.image_size {
            bail!(Error::Config {
                key: "augment.crop_to".into(),
                message: format!(
                    "checkpoint expects {} px inputs but crops are {} px; pass the training run's config.toml",
                    cfg.model.image_size, cfg.policy.crop_to
                ),
            });
        }
    }
    ckpt.check_config(&cfg.model)?;
    let model = ckpt.restore()?;
    let dataset = cfg.open_dataset()?;
    let split = dataset.validated()?;
    let report = evaluate_model(&model, &dataset, split.index(Split::Test), cfg.eval_spec(), cfg.eval.n_tasks, cfg.eval.seed)?;
    let out = prepare_out(&cfg)?;
    write(&out.join("eval_config.toml"), cfg.to_toml())?;
    write(&out.join("eval_report.json"), serde_json::to_string_pretty(&report)?)?;
    eprintln!("{} tasks of {} on the test split", report.n_tasks, report.spec);
    println!("{}", report.percent());
    Ok(())
}

fn hash_episode(h: &mut Sha256, ep: &Episode) {
    for (id, label) in ep.support.iter().chain(&ep.query) {
        h.update(id.0.to_le_bytes());
        h.update((*label as u32).to_le_bytes());
    }
    for name in &ep.class_map {
        h.update(name.as_bytes());
        h.update([0]);
    }
}

/// Digest of every episode a run draws: training steps, validation tasks and test tasks.
fn episode_trace(cfg: &RunConfig, dataset: &Dataset) -> Result<String> {
    let split = dataset.validated()?;
    let train_cfg = cfg.train_config();
    let val_spec = proxynet::episode::TaskSpec {
        t_query: train_cfg.val_query,
        ..cfg.task
    };
    let mut h = Sha256::new();
    for epoch in 0..train_cfg.epochs {
        for step in 0..train_cfg.episodes_per_epoch {
            hash_episode(&mut h, &training_episode(split.index(Split::Train), cfg.task, train_cfg.seed, epoch, step)?);
        }
        for ep in sample_tasks(split.index(Split::Val), val_spec, train_cfg.val_tasks, validation_seed(&train_cfg, epoch))? {
            hash_episode(&mut h, &ep);
        }
    }
    for ep in sample_tasks(split.index(Split::Test), cfg.eval_spec(), cfg.eval.n_tasks, cfg.eval.seed)? {
        hash_episode(&mut h, &ep);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn ablate(axis: Axis, common: &Common) -> Result<()> {
    let base = common.resolve()?;
    let out = prepare_out(&base)?;
    write(&out.join("ablate_config.toml"), base.to_toml())?;
    let variant = |name: &str, edit: &dyn Fn(&mut RunConfig)| {
        let mut cfg = base.clone();
        edit(&mut cfg);
        (name.to_string(), cfg)
    };
    let variants: Vec<(String, RunConfig)> = match axis {
        Axis::Proxy => ProxyKind::ALL.iter().map(|&k| variant(k.name(), &|c| c.model.proxy = k)).collect(),
        Axis::Metric => MetricKind::ALL.iter().map(|&k| variant(k.name(), &|c| c.model.metric = k)).collect(),
        Axis::Backbone => BackboneKind::ALL.iter().map(|&k| variant(k.name(), &|c| c.model.backbone.kind = k)).collect(),
        Axis::Augmentation => vec![variant("on", &|c| c.augment = true), variant("off", &|c| c.augment = false)],
    };
    let axis_name = format!("{axis:?}").to_lowercase();
    let mut dataset = base.open_dataset()?;
    let mut csv = String::from("axis,variant,mean,ci95,accuracy,trainable_parameters,best_epoch,episode_trace\n");
    let mut traces = Vec::new();
    for (name, cfg) in &variants {
        dataset.augment = cfg.augment;
        let trace = episode_trace(cfg, &dataset)?;
        let model = ProxyNet::<f32>::build(cfg.model.clone(), cfg.seed)?;
        let params = model.params.trainable_count("");
        eprintln!("[{axis_name}={name}] training, {params} trainable parameters");
        let outcome = Trainer::new(model, &dataset, cfg.task, cfg.train_config())?.run(|row, _| {
            eprintln!("[{axis_name}={name}] epoch {:>4}  loss {:.4}  val {:.4}", row.epoch, row.train_loss, row.val_acc);
            Ok(())
        })?;
        let best = outcome.best.restore()?;
        let split = dataset.validated()?;
        let report = evaluate_model(&best, &dataset, split.index(Split::Test), cfg.eval_spec(), cfg.eval.n_tasks, cfg.eval.seed)?;
        let best_epoch = outcome.best.state.as_ref().and_then(|s| s.best_epoch).map_or(String::new(), |e| e.to_string());
        println!("{axis_name:<13} {name:<12} {}", report.percent());
        csv.push_str(&format!("{axis_name},{name},{:.6},{:.6},{},{params},{best_epoch},{trace}\n", report.mean, report.ci95, report.percent()));
        traces.push(trace);
    }
    let path = out.join(format!("ablation_{axis_name}.csv"));
    write(&path, csv)?;
    if traces.windows(2).any(|w| w[0] != w[1]) {
        bail!("variants drew different episode sequences; see {}", path.display());
    }
    eprintln!("episode trace {} shared by all {} variants", traces[0], traces.len());
    Ok(())
}

fn audit(checkpoint: Option<&Path>, common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let model = match checkpoint {
        Some(path) => Checkpoint::load(path)?.restore()?,
        None => ProxyNet::<f32>::build(cfg.model.clone(), cfg.seed)?,
    };
    let audit = ParamAudit::of(&model.params);
    let out = prepare_out(&cfg)?;
    write(&out.join("audit.csv"), audit.to_csv())?;
    println!("{audit}");
    Ok(())
}

fn synth(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let ds = generate_synthetic(&cfg.dataset.synthetic, cfg.seed)?;
    let manifest = materialize(&ds, &cfg.out)?;
    write(&cfg.out.join("synth_config.toml"), cfg.to_toml())?;
    println!("{}", manifest.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train(common) => train(common),
        Command::Eval { checkpoint, common } => eval(checkpoint, common),
        Command::Ablate { axis, common } => ablate(*axis, common),
        Command::Audit { checkpoint, common } => audit(checkpoint.as_deref(), common),
        Command::Synth(common) => synth(common),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config { .. })));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
