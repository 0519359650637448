use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dgquant_core::checkpoint::{dump_codebook, load_checkpoint};
use dgquant_core::config::ModelConfig;
use dgquant_core::data::{
    default_specs, generate_synthetic, load_root, make_lodo_splits, write_domain, DomainDataset,
    SampleRef,
};
use dgquant_core::model::MethodRegistry;
use dgquant_core::report::{
    overlay, plot_iou_bars, plot_loss_curves, summarize, summary_text, write_table, EvalReport,
};
use dgquant_core::training::{evaluate, predict_refs, read_log, train, TrainOptions};

#[derive(Parser)]
#[command(name = "dgquant", version, about = "Domain-generalizing segmentation with grouped stochastic quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic vessel domains in the standard layout.
    Synth(SynthArgs),
    /// Train one leave-one-domain-out split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one domain.
    Eval(EvalArgs),
    /// Aggregate eval reports into a table and plots.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    domains: usize,
    #[arg(long, default_value_t = 40)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, env = "DGQUANT_SEED", default_value_t = 0)]
    seed: u64,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Domain held out for testing.
    #[arg(long)]
    holdout: String,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "DGQUANT_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Train the plain encoder with a pixel classifier instead.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Extra `key=value` overrides, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    domain: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write one prediction overlay PNG per image.
    #[arg(long)]
    overlays: bool,
    /// Config the checkpoint must agree with on categories.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Score every image of the domain, not just the checkpoint's test fold.
    #[arg(long)]
    whole_domain: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Glob patterns matching report.json files.
    #[arg(long = "inputs", required = true, num_args = 1..)]
    inputs: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.domains < 2 {
        bail!("domain generalization needs at least 2 domains, got {}", a.domains);
    }
    if a.out.is_dir() && fs::read_dir(&a.out)?.next().is_some() && !a.force {
        bail!("{} is not empty; pass --force to write into it", a.out.display());
    }
    let specs = default_specs(a.domains)?;
    let domains = generate_synthetic(&specs, a.count, a.size, a.seed)?;
    for d in &domains {
        write_domain(d, &a.out)?;
    }
    println!(
        "wrote {} domains x {} images ({}x{}) to {}",
        domains.len(),
        a.count,
        a.size,
        a.size,
        a.out.display()
    );
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    Ok(match path {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    })
}

fn domain_index(domains: &[DomainDataset], name: &str) -> Result<usize> {
    domains.iter().position(|d| d.name == name).ok_or_else(|| {
        let names: Vec<&str> = domains.iter().map(|d| d.name.as_str()).collect();
        anyhow!("unknown domain `{name}` (available: {})", names.join(", "))
    })
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if a.baseline {
        cfg.method = "baseline".into();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    let cfg = cfg.validate()?;
    if a.fold >= cfg.folds {
        bail!("fold {} is out of range for {} folds", a.fold, cfg.folds);
    }
    let domains = load_root(&a.data, cfg.categories, cfg.image_size)?;
    let held = domain_index(&domains, &a.holdout)?;
    let split = make_lodo_splits(&domains, cfg.folds, cfg.cap, cfg.seed)?.swap_remove(held * cfg.folds + a.fold);
    split.check_disjoint(&domains)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.txt"), cfg.to_text())?;
    let opts = TrainOptions {
        checkpoint: Some(a.out.join("best.dgq")),
        log: Some(a.out.join("log.ndjson")),
        augment: None,
    };
    let outcome = train(&cfg, &MethodRegistry::default(), &domains, &split, &opts)?;
    if cfg.method != "baseline" {
        let (model, meta) = load_checkpoint(&a.out.join("best.dgq"), &MethodRegistry::default())?;
        dump_codebook(&a.out.join("codebook.dgq"), model.as_ref(), &meta)?;
    }
    let last = outcome.log.last().map(|r| r.losses.total).unwrap_or(f64::NAN);
    println!(
        "trained {} on {} ({} images), held out {} fold {}: best epoch {}, val mIoU {}, final loss {last:.4}",
        cfg.method,
        split.train_domains.join(","),
        split.train.len(),
        split.holdout,
        split.fold,
        outcome.best_epoch,
        outcome.best_val_miou.map_or("n/a".into(), |v| format!("{:.2}", 100.0 * v)),
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let registry = MethodRegistry::default();
    let (model, meta) = load_checkpoint(&a.ckpt, &registry)
        .with_context(|| format!("loading {}", a.ckpt.display()))?;
    let cfg = model.config().clone();
    if let Some(p) = &a.config {
        let want = ModelConfig::load(p)?;
        if want.categories != cfg.categories {
            bail!(
                "checkpoint has {} categories but {} asks for {}",
                cfg.categories,
                p.display(),
                want.categories
            );
        }
    }
    let domains = load_root(&a.data, cfg.categories, cfg.image_size)?;
    let d = domain_index(&domains, &a.domain)?;
    let refs: Vec<SampleRef> = match (&meta.holdout, meta.fold) {
        (Some(h), Some(fold)) if *h == a.domain && !a.whole_domain => {
            let splits = make_lodo_splits(&domains, cfg.folds, cfg.cap, meta.seed)?;
            splits
                .into_iter()
                .find(|s| s.holdout == *h && s.fold == fold)
                .ok_or_else(|| anyhow!("no split for held-out {h} fold {fold}"))?
                .test
        }
        _ => (0..domains[d].len()).map(|index| SampleRef { domain: d, index }).collect(),
    };
    let result = evaluate(model.as_ref(), &domains, &refs, cfg.batch_size)?;
    let report = EvalReport {
        method: meta.method.clone(),
        dataset: a.domain.clone(),
        holdout: meta.holdout.clone(),
        fold: meta.fold,
        seed: meta.seed,
        checkpoint: a.ckpt.display().to_string(),
        images: result.images,
        iou: result.iou,
        miou: result.miou,
    };
    report.write(&a.out)?;
    if a.overlays {
        let dir = a.out.join("overlays");
        fs::create_dir_all(&dir)?;
        let preds = predict_refs(model.as_ref(), &domains, &refs, cfg.batch_size)?;
        let labels = preds.iter().flat_map(|b| (0..b.dims().0).map(move |i| b.image(i)));
        for (r, lab) in refs.iter().zip(labels) {
            let sample = &domains[r.domain].samples[r.index];
            let lab: Vec<usize> = lab.into_iter().map(usize::from).collect();
            let img = overlay(&sample.image, &lab, cfg.categories)?;
            let path = dir.join(format!("{}.png", sample.stem));
            img.save(&path).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    print!("{}", report.to_text());
    Ok(())
}

fn expand(patterns: &[String]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for pat in patterns {
        let literal = !pat.contains(['*', '?', '[']);
        if literal && !Path::new(pat).exists() {
            bail!("input {pat} does not exist");
        }
        for entry in glob::glob(pat).with_context(|| format!("bad pattern {pat}"))? {
            paths.push(entry?);
        }
    }
    paths.sort();
    paths.dedup();
    if paths.is_empty() {
        bail!("no files match {}", patterns.join(" "));
    }
    Ok(paths)
}

fn report(a: ReportArgs) -> Result<()> {
    let paths = expand(&a.inputs)?;
    let reports = paths
        .iter()
        .map(|p| EvalReport::read(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let summaries = summarize(&reports)?;
    fs::create_dir_all(&a.out)?;
    write_table(&a.out.join("table.csv"), &summaries)?;
    let text = summary_text(&summaries);
    fs::write(a.out.join("summary.txt"), &text)?;
    fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summaries)? + "\n")?;
    plot_iou_bars(&a.out.join("iou.svg"), &summaries)?;
    // a training log next to the checkpoint becomes one loss curve
    let mut curves = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for r in &reports {
        let log = Path::new(&r.checkpoint).with_file_name("log.ndjson");
        if log.is_file() && seen.insert(log.clone()) {
            let label = format!("{} {} s{} f{}", r.method, r.holdout.as_deref().unwrap_or("-"), r.seed, r.fold.unwrap_or(0));
            curves.push((label, read_log(&log)?));
        }
    }
    if !curves.is_empty() {
        plot_loss_curves(&a.out.join("loss.svg"), &curves)?;
    }
    print!("{text}");
    Ok(())
}
