//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use tassel_core::components::{cache_path, extract_all, save_components, KmeansConfig};
use tassel_core::data::{apply_normalizer, fit_normalizer, save_ndjson};
use tassel_core::eval::{confusion, metrics, MetricReport};
use tassel_core::explain::{build_map, export_csv, render_pgm};
use tassel_core::model::{load_checkpoint, predict_all, save_checkpoint};
use tassel_core::pipeline::{labels_of, run_mlp_baseline, run_tassel};
use tassel_core::synth::{generate, save_truth, SynthConfig};
use tassel_core::train::TrainConfig;

use crate::manifest::{ensure_out_dir, RunManifest};
use crate::pipeline::{load_dataset, prepare_for_model};

#[derive(Parser)]
#[command(
    name = "tassel",
    version,
    about = "Attentive weakly supervised classification of object-based satellite image time series"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic dataset with pixel-level ground truth.
    Synth(SynthArgs),
    /// Extract per-object components and write them to a cache file.
    Cluster(ClusterArgs),
    /// Train a model: split, normalize, cluster, fit, evaluate on test.
    Train(TrainArgs),
    /// Evaluate a checkpoint, or run the multi-seed protocol.
    Eval(EvalArgs),
    /// Predict labels, class scores and attention weights for every object.
    Predict(PredictArgs),
    /// Export per-object attention maps (PGM raster + CSV).
    Explain(ExplainArgs),
    /// Sensitivity sweep over the number of components.
    SweepNc(SweepArgs),
}

/// Training flags; every flag overrides the matching field of `--config`.
#[derive(Args, Clone)]
pub struct TrainFlags {
    /// JSON file with a training configuration (missing fields take
    /// defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    /// Weight of the auxiliary classifier loss (0 disables it).
    #[arg(long)]
    pub lambda: Option<f32>,
    /// Number of components per object (nc).
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Validation cadence in epochs.
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f32>,
    /// Divide all layer widths by this factor (1 = full architecture).
    #[arg(long)]
    pub width_div: Option<usize>,
}

impl TrainFlags {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.components {
            cfg.n_components = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = self.width_div {
            cfg.width_div = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Base name of the emitted dataset files.
    #[arg(long, default_value = "synthetic")]
    pub name: String,
    #[arg(long, default_value_t = 24)]
    pub t: usize,
    #[arg(long, default_value_t = 4)]
    pub b: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 60)]
    pub objects_per_class: usize,
    #[arg(long, default_value_t = 16)]
    pub pixels_min: usize,
    #[arg(long, default_value_t = 48)]
    pub pixels_max: usize,
    #[arg(long, default_value_t = 0.5)]
    pub distractor_fraction: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Number of components per object.
    #[arg(long)]
    pub components: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Normalize with this checkpoint's statistics (otherwise statistics are
    /// fitted on the whole input file).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluate this checkpoint on all labeled objects of the dataset.
    #[arg(long, conflicts_with = "seeds")]
    pub model: Option<PathBuf>,
    /// Optional component cache for `--model` evaluation.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Run the full protocol once per seed and report mean and standard
    /// deviation (e.g. `--seeds 0,1,2,3,4`).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Model trained by the protocol: the component-attention model or the
    /// mean-representation MLP baseline.
    #[arg(long, default_value = "tassel", value_parser = ["tassel", "mlp-mean"])]
    pub model_kind: String,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Quantile bins of the rendered attention scale.
    #[arg(long, default_value_t = 5)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Component counts to evaluate.
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4, 6, 8, 10])]
    pub values: Vec<usize>,
    /// Split seeds to average over.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Cluster(args) => cmd_cluster(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Explain(args) => cmd_explain(args),
        Command::SweepNc(args) => cmd_sweep_nc(args),
    }
}

fn write_metrics(out_dir: &Path, stem: &str, report: &MetricReport) -> Result<Vec<PathBuf>> {
    let json_path = out_dir.join(format!("{stem}.json"));
    std::fs::write(&json_path, serde_json::to_string_pretty(report)?)?;
    let csv_path = out_dir.join(format!("{stem}.csv"));
    std::fs::write(
        &csv_path,
        format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row()),
    )?;
    Ok(vec![json_path, csv_path])
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    ensure_out_dir(&args.out)?;
    let config = SynthConfig {
        t: args.t,
        b: args.b,
        classes: args.classes,
        objects_per_class: args.objects_per_class,
        pixels_min: args.pixels_min,
        pixels_max: args.pixels_max,
        distractor_fraction: args.distractor_fraction,
        noise_sigma: args.noise_sigma,
        seed: args.seed,
    };
    let (ds, truth) = generate(&config)?;
    let data_path = args.out.join(format!("{}.ndjson", args.name));
    let truth_path = args.out.join(format!("{}.truth.json", args.name));
    save_ndjson(&ds, &data_path)?;
    save_truth(&truth, &truth_path)?;

    let mut manifest = RunManifest::new("synth", serde_json::to_value(&config)?, vec![args.seed]);
    manifest.add_output(&data_path);
    manifest.add_output(&truth_path);
    manifest.write(&args.out)?;

    println!(
        "generated {} objects ({} classes, T={}, B={}) -> {}",
        ds.objects.len(),
        ds.class_names.len(),
        ds.t,
        ds.b,
        data_path.display()
    );
    Ok(())
}

fn cmd_cluster(args: ClusterArgs) -> Result<()> {
    ensure_out_dir(&args.out)?;
    let ds = load_dataset(&args.data)?;
    let normalized = match &args.model {
        Some(ckpt) => {
            let model = load_checkpoint(ckpt)?;
            apply_normalizer(&ds, &model.norm)?
        }
        None => {
            let stats = fit_normalizer(&ds)?;
            apply_normalizer(&ds, &stats)?
        }
    };
    let sets = extract_all(
        &normalized,
        args.components,
        args.seed,
        &KmeansConfig::default(),
    )?;
    let cache = cache_path(&args.data, args.components);
    save_components(&sets, &cache)?;

    let mut manifest = RunManifest::new(
        "cluster",
        serde_json::json!({
            "data": args.data.display().to_string(),
            "components": args.components,
            "seed": args.seed,
            "model": args.model.as_ref().map(|p| p.display().to_string()),
        }),
        vec![args.seed],
    );
    manifest.add_input(&args.data)?;
    manifest.add_output(&cache);
    manifest.write(&args.out)?;

    let mean_inertia: f64 =
        sets.iter().map(|s| s.inertia).sum::<f64>() / sets.len().max(1) as f64;
    println!(
        "clustered {} objects into {} components each (mean inertia {mean_inertia:.4}) -> {}",
        sets.len(),
        args.components,
        cache.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    ensure_out_dir(&args.out)?;
    let config = args.train.resolve()?;
    log::info!(
        "resolved training config: {}",
        serde_json::to_string(&config)?
    );
    let ds = load_dataset(&args.data)?;
    let outcome = run_tassel(&ds, &config)?;

    let ckpt_path = args.out.join("checkpoint.ckpt");
    save_checkpoint(&outcome.model, &ckpt_path)?;
    let report_path = args.out.join("fit_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&outcome.report)?)?;

    // Plot-ready trace: one row per epoch, validation column only at
    // validation points.
    let mut trace = String::from("epoch,train_loss,val_weighted_f1\n");
    for (epoch, loss) in outcome.report.train_loss.iter().enumerate() {
        let val = outcome
            .report
            .val_trace
            .iter()
            .find(|(e, _)| *e == epoch)
            .map(|(_, f1)| format!("{f1:.6}"))
            .unwrap_or_default();
        trace.push_str(&format!("{epoch},{loss:.6},{val}\n"));
    }
    let trace_path = args.out.join("fit_trace.csv");
    std::fs::write(&trace_path, &trace)?;

    let mut outputs = vec![ckpt_path.clone(), report_path, trace_path];
    outputs.extend(write_metrics(&args.out, "metrics_test", &outcome.test_metrics)?);

    let mut manifest = RunManifest::new("train", serde_json::to_value(&config)?, vec![config.seed]);
    manifest.add_input(&args.data)?;
    for p in &outputs {
        manifest.add_output(p);
    }
    manifest.write(&args.out)?;

    println!(
        "trained on {} objects; selected epoch {}; test weighted F1 {:.4}, accuracy {:.4}, kappa {:.4}",
        outcome.bundle.train.objects.len(),
        outcome.report.selected_epoch,
        outcome.test_metrics.weighted_f1,
        outcome.test_metrics.accuracy,
        outcome.test_metrics.kappa
    );
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    ensure_out_dir(&args.out)?;
    match (&args.model, &args.seeds) {
        (Some(ckpt), None) => eval_checkpoint(&args, ckpt),
        (None, Some(seeds)) => eval_protocol(&args, seeds.clone()),
        (None, None) => bail!("eval needs either --model or --seeds"),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    }
}

fn eval_checkpoint(args: &EvalArgs, ckpt: &Path) -> Result<()> {
    let config = args.train.resolve()?;
    let model = load_checkpoint(ckpt)?;
    let ds = load_dataset(&args.data)?;
    let labeled: Vec<usize> = ds
        .objects
        .iter()
        .filter_map(|o| o.label)
        .collect();
    if labeled.len() != ds.objects.len() {
        bail!(tassel_core::Error::Contract(
            "eval needs every object labeled".into()
        ));
    }
    let (normalized, comps) =
        prepare_for_model(&ds, &model, config.seed, args.cache.as_deref())?;
    let preds = predict_all(&model, &comps, normalized.t)?;
    let pred_labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
    let cm = confusion(&pred_labels, &labels_of(&normalized), normalized.n_classes())?;
    let report = metrics(&cm)?;
    let outputs = write_metrics(&args.out, "metrics", &report)?;

    let mut manifest = RunManifest::new(
        "eval",
        serde_json::json!({
            "model": ckpt.display().to_string(),
            "data": args.data.display().to_string(),
            "seed": config.seed,
        }),
        vec![config.seed],
    );
    manifest.add_input(&args.data)?;
    manifest.add_input(ckpt)?;
    for p in &outputs {
        manifest.add_output(p);
    }
    manifest.write(&args.out)?;

    println!(
        "evaluated {} objects: weighted F1 {:.4}, accuracy {:.4}, kappa {:.4}",
        preds.len(),
        report.weighted_f1,
        report.accuracy,
        report.kappa
    );
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn eval_protocol(args: &EvalArgs, seeds: Vec<u64>) -> Result<()> {
    let base = args.train.resolve()?;
    let ds = load_dataset(&args.data)?;
    log::info!(
        "protocol over seeds {seeds:?} with config {}",
        serde_json::to_string(&base)?
    );

    let results: Vec<(u64, MetricReport)> = seeds
        .par_iter()
        .map(|&seed| {
            let config = TrainConfig { seed, ..base.clone() };
            let report = match args.model_kind.as_str() {
                "mlp-mean" => run_mlp_baseline(&ds, &config)?.0,
                _ => run_tassel(&ds, &config)?.test_metrics,
            };
            Ok((seed, report))
        })
        .collect::<Result<_>>()?;

    let mut outputs = Vec::new();
    let mut csv = String::from("seed,accuracy,kappa,weighted_f1,macro_f1\n");
    for (seed, report) in &results {
        csv.push_str(&format!("{seed},{}\n", report.csv_row()));
        outputs.extend(write_metrics(&args.out, &format!("metrics_seed{seed}"), report)?);
    }
    let f1s: Vec<f64> = results.iter().map(|(_, r)| r.weighted_f1).collect();
    let accs: Vec<f64> = results.iter().map(|(_, r)| r.accuracy).collect();
    let kappas: Vec<f64> = results.iter().map(|(_, r)| r.kappa).collect();
    let (f1_mean, f1_std) = mean_std(&f1s);
    let (acc_mean, _) = mean_std(&accs);
    let (kappa_mean, _) = mean_std(&kappas);
    csv.push_str(&format!(
        "mean,{acc_mean:.6},{kappa_mean:.6},{f1_mean:.6},\nstd,,,{f1_std:.6},\n"
    ));
    let csv_path = args.out.join("protocol_results.csv");
    std::fs::write(&csv_path, &csv)?;
    outputs.push(csv_path);

    let mut manifest = RunManifest::new(
        "eval-protocol",
        serde_json::json!({
            "config": serde_json::to_value(&base)?,
            "model_kind": args.model_kind,
            "data": args.data.display().to_string(),
        }),
        seeds,
    );
    manifest.add_input(&args.data)?;
    for p in &outputs {
        manifest.add_output(p);
    }
    manifest.write(&args.out)?;

    println!(
        "{} over {} seeds: weighted F1 {:.2} +/- {:.2}",
        args.model_kind,
        results.len(),
        100.0 * f1_mean,
        100.0 * f1_std
    );
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    ensure_out_dir(&args.out)?;
    let model = load_checkpoint(&args.model)?;
    let ds = load_dataset(&args.data)?;
    let (normalized, comps) =
        prepare_for_model(&ds, &model, args.seed, args.cache.as_deref())?;
    let preds = predict_all(&model, &comps, normalized.t)?;

    let path = args.out.join("predictions.ndjson");
    let mut text = String::new();
    for p in &preds {
        text.push_str(&serde_json::to_string(p)?);
        text.push('\n');
    }
    std::fs::write(&path, text)?;

    let mut manifest = RunManifest::new(
        "predict",
        serde_json::json!({
            "model": args.model.display().to_string(),
            "data": args.data.display().to_string(),
            "seed": args.seed,
        }),
        vec![args.seed],
    );
    manifest.add_input(&args.data)?;
    manifest.add_input(&args.model)?;
    manifest.add_output(&path);
    manifest.write(&args.out)?;

    println!("predicted {} objects -> {}", preds.len(), path.display());
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> Result<()> {
    ensure_out_dir(&args.out)?;
    let model = load_checkpoint(&args.model)?;
    let ds = load_dataset(&args.data)?;
    let (normalized, comps) =
        prepare_for_model(&ds, &model, args.seed, args.cache.as_deref())?;
    let preds = predict_all(&model, &comps, normalized.t)?;

    let maps_dir = args.out.join("maps");
    ensure_out_dir(&maps_dir)?;
    let mut index = Vec::new();
    let mut outputs = Vec::new();
    for ((pred, set), obj) in preds.iter().zip(&comps).zip(&normalized.objects) {
        let map = build_map(pred, set, obj)?;
        let csv_path = maps_dir.join(format!("{}.csv", obj.id));
        std::fs::write(&csv_path, export_csv(&map, args.bins))?;
        outputs.push(csv_path.clone());
        let mut entry = serde_json::json!({
            "object_id": obj.id,
            "label": pred.label,
            "csv": csv_path.display().to_string(),
        });
        if map.coords.is_some() {
            let (pgm, info) = render_pgm(&map, args.bins)?;
            let pgm_path = maps_dir.join(format!("{}.pgm", obj.id));
            std::fs::write(&pgm_path, pgm)?;
            entry["pgm"] = serde_json::json!(pgm_path.display().to_string());
            entry["render"] = serde_json::to_value(&info)?;
            outputs.push(pgm_path);
        }
        index.push(entry);
    }
    let index_path = args.out.join("index.json");
    std::fs::write(&index_path, serde_json::to_string_pretty(&index)?)?;
    outputs.push(index_path);

    let mut manifest = RunManifest::new(
        "explain",
        serde_json::json!({
            "model": args.model.display().to_string(),
            "data": args.data.display().to_string(),
            "bins": args.bins,
            "seed": args.seed,
        }),
        vec![args.seed],
    );
    manifest.add_input(&args.data)?;
    manifest.add_input(&args.model)?;
    for p in &outputs {
        manifest.add_output(p);
    }
    manifest.write(&args.out)?;

    println!(
        "wrote attention maps for {} objects under {}",
        preds.len(),
        maps_dir.display()
    );
    Ok(())
}

fn cmd_sweep_nc(args: SweepArgs) -> Result<()> {
    ensure_out_dir(&args.out)?;
    let base = args.train.resolve()?;
    let ds = load_dataset(&args.data)?;
    if args.values.is_empty() {
        bail!("sweep needs at least one component count");
    }

    let runs: Vec<(usize, u64)> = args
        .values
        .iter()
        .flat_map(|&nc| args.seeds.iter().map(move |&s| (nc, s)))
        .collect();
    let results: Vec<(usize, u64, f64)> = runs
        .par_iter()
        .map(|&(nc, seed)| {
            let config = TrainConfig {
                n_components: nc,
                seed,
                ..base.clone()
            };
            let outcome = run_tassel(&ds, &config)?;
            Ok((nc, seed, outcome.test_metrics.weighted_f1))
        })
        .collect::<Result<_>>()?;

    let mut detail = String::from("nc,seed,weighted_f1\n");
    for (nc, seed, f1) in &results {
        detail.push_str(&format!("{nc},{seed},{f1:.6}\n"));
    }
    let detail_path = args.out.join("sweep_runs.csv");
    std::fs::write(&detail_path, &detail)?;

    let mut summary = String::from("nc,mean_weighted_f1,std_weighted_f1\n");
    println!("nc   weighted F1 (mean +/- std over {} seeds)", args.seeds.len());
    for &nc in &args.values {
        let f1s: Vec<f64> = results
            .iter()
            .filter(|(v, _, _)| *v == nc)
            .map(|(_, _, f1)| *f1)
            .collect();
        let (mean, std) = mean_std(&f1s);
        summary.push_str(&format!("{nc},{mean:.6},{std:.6}\n"));
        println!("{nc:<4} {:.2} +/- {:.2}", 100.0 * mean, 100.0 * std);
    }
    let summary_path = args.out.join("sweep.csv");
    std::fs::write(&summary_path, &summary)?;

    let mut manifest = RunManifest::new(
        "sweep-nc",
        serde_json::json!({
            "config": serde_json::to_value(&base)?,
            "values": args.values,
            "data": args.data.display().to_string(),
        }),
        args.seeds.clone(),
    );
    manifest.add_input(&args.data)?;
    manifest.add_output(&detail_path);
    manifest.add_output(&summary_path);
    manifest.write(&args.out)?;
    Ok(())
}
