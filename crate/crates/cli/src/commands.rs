use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use contravirt::config::RunConfig;
use contravirt::datakit::{generate_synthetic, write_station_csv_file, SyntheticConfig};
use contravirt::diffusion::{influence_stats, write_influence_csv};
use contravirt::metrics::{write_rows_csv, Dimension, EvalReport};
use contravirt::objectives::Strategy;
use contravirt::pipeline::{
    build_graph, load_data, method_name, method_slug, order_methods, resolve_split, Baseline, GraphSettings, Prepared,
};
use contravirt::trainer::{evaluate_model, train_with, write_diagnostics_csv, Checkpoint, CheckpointMeta};

use crate::{Cli, Command, EvaluateArgs, TrainArgs, OUTPUT_ROOT_ENV};

/// Bad flag combinations and similar user errors.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<RunConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(csv) = &cli.data {
        cfg.data.csv = Some(csv.clone());
        cfg.data.synthetic = None;
    }
    if cli.synthetic {
        let syn = SyntheticConfig::acceptance();
        cfg.grid = syn.grid;
        cfg.data.csv = None;
        cfg.data.synthetic = Some(syn);
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if matches!(cli.command, Command::Synth) && cfg.data.csv.is_none() && cfg.data.synthetic.is_none() {
        cfg.data.synthetic = Some(SyntheticConfig::acceptance());
    }
    let out = resolve_output(cli.output.as_deref().unwrap_or(&cfg.output_dir));
    cfg.output_dir = out.clone();

    if let Command::Report { dir } = &cli.command {
        return report(dir.as_deref().unwrap_or(&out));
    }
    cfg.validate()?;
    let ctx = Ctx { cfg, out };
    fs::create_dir_all(&ctx.out).with_context(|| format!("creating {}", ctx.out.display()))?;
    match cli.command {
        Command::Synth => synth(&ctx),
        Command::BuildGraph => build_graph_cmd(&ctx),
        Command::Train(args) => train_cmd(ctx, args),
        Command::Evaluate(args) => evaluate_cmd(&ctx, args),
        Command::Baseline { names } => evaluate_cmd(&ctx, EvaluateArgs { checkpoint: None, baseline: names }),
        Command::Report { .. } => unreachable!(),
    }
}

fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

fn snapshot(ctx: &Ctx, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = toml::to_string_pretty(&ctx.cfg).context("serializing config snapshot")?;
    fs::write(dir.join("config.toml"), text)?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

fn synth(ctx: &Ctx) -> Result<()> {
    let syn = ctx
        .cfg
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| usage("synth needs a synthetic data section, not a CSV source"))?;
    let data = generate_synthetic(syn)?;
    snapshot(ctx, &ctx.out)?;
    write_station_csv_file(&data.dataset, ctx.out.join("stations.csv"))?;
    write_json(&ctx.out.join("manifest.json"), &data.manifest)?;
    println!(
        "{} stations, {} steps, withheld {}",
        data.dataset.stations.len(),
        data.dataset.n_steps,
        data.withheld.join(",")
    );
    println!("sha256 {}", data.manifest.sha256);
    Ok(())
}

fn build_graph_cmd(ctx: &Ctx) -> Result<()> {
    let loaded = load_data(&ctx.cfg)?;
    let split = resolve_split(&ctx.cfg, &loaded)?;
    let g = build_graph(&loaded.dataset, &split, &GraphSettings::from_config(&ctx.cfg))?;
    let dir = ctx.out.join("graph");
    snapshot(ctx, &dir)?;
    g.nodes.write_csv(create(&dir.join("nodes.csv"))?)?;
    let kinds = g.nodes.kinds();
    g.operator.write_csv(create(&dir.join("diffusion.csv"))?, &kinds)?;
    let influence = influence_stats(&g.operator, &kinds);
    write_influence_csv(&influence, create(&dir.join("influence.csv"))?)?;
    let mean_rf = if influence.is_empty() {
        0.0
    } else {
        influence.iter().map(|r| r.real_fraction).sum::<f64>() / influence.len() as f64
    };
    println!(
        "{} nodes ({} real, {} virtual), max {} entries per row, mean real fraction {:.3}",
        g.nodes.len(),
        g.nodes.real_ids().len(),
        g.nodes.virtual_ids().len(),
        g.operator.max_row_entries(),
        mean_rf
    );
    Ok(())
}

fn train_cmd(mut ctx: Ctx, args: TrainArgs) -> Result<()> {
    let strategy: Strategy = match &args.strategy {
        Some(s) => s.parse()?,
        None => ctx.cfg.contrastive.strategy,
    };
    let no_diffusion = args.no_diffusion || ctx.cfg.graph.no_diffusion;
    if no_diffusion && strategy != Strategy::None {
        return Err(usage("--no-diffusion is only defined together with --strategy none"));
    }
    if let Some(e) = args.epochs {
        ctx.cfg.train.max_epochs = e;
    }
    ctx.cfg.contrastive.strategy = strategy;
    ctx.cfg.contrastive.use_moco = ctx.cfg.contrastive.use_moco && !args.no_moco;
    ctx.cfg.graph.no_diffusion = no_diffusion;
    ctx.cfg.validate()?;
    let cfg = &ctx.cfg;
    let name = method_name(strategy, cfg.contrastive.use_moco, no_diffusion);
    let dir = ctx.out.join(method_slug(&name));
    snapshot(&ctx, &dir)?;

    let loaded = load_data(cfg)?;
    let split = resolve_split(cfg, &loaded)?;
    let prepared = Prepared::new(loaded.dataset, split, &GraphSettings::from_config(cfg), cfg.features)?;
    println!("training {name}: {} windows per epoch at stride {}", prepared.data.store.n_steps() / cfg.train.stride, cfg.train.stride);
    let start = Instant::now();
    let outcome = train_with(&prepared.data, &cfg.train, &cfg.contrastive, &cfg.lambda, |d| {
        println!(
            "epoch {:>3} sup {:.4} contrast {:.4} lambda {:.3} lr {:.2e} val {:.4} ({:.0}s)",
            d.epoch,
            d.train_sup_loss,
            d.train_contrast_loss,
            d.lambda,
            d.lr,
            d.val_loss,
            start.elapsed().as_secs_f64()
        );
    })?;
    write_diagnostics_csv(&outcome.diagnostics, create(&dir.join("diagnostics.csv"))?)?;
    let ckpt = Checkpoint::new(
        &outcome.model,
        &prepared.data,
        CheckpointMeta {
            method: &name,
            seed: cfg.train.seed,
            diffusion: cfg.diffusion,
            no_diffusion,
            contrastive: &cfg.contrastive,
        },
    );
    let path = dir.join("checkpoint.json");
    ckpt.save(&path)?;
    println!(
        "best epoch {} val {:.4}; checkpoint {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        path.display()
    );
    Ok(())
}

fn write_report(dir: &Path, slug: &str, report: &EvalReport) -> Result<()> {
    fs::write(dir.join(format!("{slug}.json")), report.to_json()?)?;
    report.write_csv(create(&dir.join(format!("{slug}.csv")))?)?;
    let methods = report.methods();
    write_rows_csv(&report.breakdown(&methods, Dimension::Lead), create(&dir.join(format!("{slug}_by_lead.csv")))?)?;
    write_rows_csv(
        &report.breakdown(&methods, Dimension::Station),
        create(&dir.join(format!("{slug}_by_station.csv")))?,
    )?;
    Ok(())
}

fn print_summary(report: &EvalReport) {
    for row in report.method_table(&order_methods(report.methods())) {
        println!(
            "{:<30} dd {:>7.3} ff {:>6.3} gff {:>6.3}",
            row.method, row.dd_mae, row.ff_mae, row.gff_mae
        );
    }
}

fn evaluate_cmd(ctx: &Ctx, args: EvaluateArgs) -> Result<()> {
    let cfg = &ctx.cfg;
    let eval_dir = ctx.out.join("eval");
    let loaded = load_data(cfg)?;
    let split = resolve_split(cfg, &loaded)?;
    match args.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            let settings = GraphSettings {
                grid: cfg.grid,
                k: cfg.graph.k,
                diffusion: ckpt.diffusion,
                no_diffusion: ckpt.no_diffusion,
            };
            let p = Prepared::new(loaded.dataset, split, &settings, ckpt.layout)?;
            ckpt.check_compatible(&p.data)?;
            let anchors = p.eval_anchors(cfg.eval.stride);
            let report = evaluate_model(&ckpt.model(), &p.data, &p.dataset, &anchors, &ckpt.method)?;
            snapshot(ctx, &eval_dir)?;
            write_report(&eval_dir, &method_slug(&ckpt.method), &report)?;
            print_summary(&report);
        }
        None => {
            let which: Vec<Baseline> = if args.baseline.is_empty() {
                Baseline::ALL.to_vec()
            } else {
                args.baseline.iter().map(|b| b.parse()).collect::<contravirt::Result<_>>()?
            };
            let p = Prepared::new(loaded.dataset, split, &GraphSettings::from_config(cfg), cfg.features)?;
            let anchors = p.eval_anchors(cfg.eval.stride);
            let bc = p.baselines(cfg.eval.baseline_k, cfg.eval.ridge, cfg.eval.baseline_stride);
            let (report, fits) = bc.evaluate(&which, &anchors)?;
            snapshot(ctx, &eval_dir)?;
            for b in &which {
                write_report(&eval_dir, &method_slug(b.name()), &report.only(b.name()))?;
            }
            if let Some(fits) = fits {
                write_json(&eval_dir.join("baseline_fits.json"), &fits)?;
            }
            print_summary(&report);
        }
    }
    Ok(())
}

fn report(dir: &Path) -> Result<()> {
    let eval_dir = dir.join("eval");
    let mut paths: Vec<PathBuf> = match fs::read_dir(&eval_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json") && p.file_name().is_some_and(|n| n != "baseline_fits.json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    paths.sort();
    if paths.is_empty() {
        return Err(contravirt::Error::Data(format!("no evaluations under {}", eval_dir.display())).into());
    }
    let mut merged = EvalReport::new();
    for p in &paths {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        merged.merge(&EvalReport::from_json(&text).with_context(|| format!("parsing {}", p.display()))?);
    }
    let methods = order_methods(merged.methods());
    let out = dir.join("report");
    fs::create_dir_all(&out)?;
    let table = merged.method_table(&methods);
    write_rows_csv(&table, create(&out.join("table.csv"))?)?;
    write_json(&out.join("table.json"), &table)?;
    for (dim, name) in [(Dimension::Lead, "by_lead"), (Dimension::Station, "by_station"), (Dimension::Season, "by_season")] {
        write_rows_csv(&merged.breakdown(&methods, dim), create(&out.join(format!("{name}.csv")))?)?;
    }
    println!("{:<30} {:>8} {:>8} {:>7} {:>7} {:>7} {:>7}", "method", "dd_mae", "dd_rmse", "ff_mae", "ff_rmse", "gff_mae", "gff_rmse");
    for r in &table {
        println!(
            "{:<30} {:>8.3} {:>8.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3}",
            r.method, r.dd_mae, r.dd_rmse, r.ff_mae, r.ff_rmse, r.gff_mae, r.gff_rmse
        );
    }
    Ok(())
}
