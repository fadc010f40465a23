//! Command-line front end. Subcommands cover capacity accounting, MAC
//! counts, training, checkpoint evaluation, gradient verification,
//! forward benchmarking, curve merging, and run comparison.
//!
//! Conventions: exit 0 on success, 2 on configuration or usage errors,
//! 3 on runtime failures. stdout carries machine-readable output only;
//! everything meant for humans goes to stderr.
//!
//! Configuration is one JSON document (see `RunSpec`) plus `--key value`
//! overrides, where key is a dot path into the document (`model.depth`,
//! `train.base_lr`) or one of the shorthands `--variant`, `--group-size`,
//! `--width-ratio`, `--depth`, `--seed`. `VITSLM_OUTPUT_ROOT` prefixes
//! relative output directories.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use vitslm::data::{
    apply_norm, compute_norm_stats, load_cifar_binary, split_per_class, synth_dataset, Dataset,
};
use vitslm::gradcheck::{
    model_grad_report, op_gradcheck_suite, shared_grad_decomposition, GRAD_TOL,
};
use vitslm::model::checkpoint::load_checkpoint;
use vitslm::model::vit::build_model;
use vitslm::model::{MLPVariant, ModelConfig};
use vitslm::stats::{
    count_macs, count_params, format_count_csv, format_count_table, measure_throughput,
    Convention, ModelStats,
};
use vitslm::train::{aggregate_seeds, evaluate, paired_t_test, train, RunMetrics, TrainConfig};
use vitslm::{Error, Result};

/// Dataset description. `synthetic` draws the template dataset and splits
/// it per class; `cifar` reads binary record files from `train_paths` /
/// `val_paths`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DataConfig {
    source: String,
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    noise_std: f64,
    data_seed: u64,
    train_per_class: usize,
    train_paths: Vec<String>,
    val_paths: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: "synthetic".into(),
            num_classes: 10,
            per_class: 200,
            image_size: 32,
            noise_std: 0.05,
            data_seed: 0,
            train_per_class: 160,
            train_paths: Vec::new(),
            val_paths: Vec::new(),
        }
    }
}

/// The full configuration document. Only `model` is required; `train` and
/// `data` fall back to their documented defaults. Unknown keys anywhere
/// are rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSpec {
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    data: DataConfig,
    #[serde(default)]
    output_dir: Option<String>,
}

#[derive(Parser)]
#[command(name = "vitslm", version, about = "ViT MLP capacity experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parameter accounting for the three capacity variants side by side.
    Count(ConfigArgs),
    /// Per-image multiply-accumulate counts for the three variants.
    Flops(ConfigArgs),
    /// Train the configured variant over the configured seeds.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the configured dataset.
    Eval(EvalArgs),
    /// Finite-difference verification of every parameter group.
    Gradcheck(GradcheckArgs),
    /// Forward-throughput comparison of the three variants.
    Bench(BenchArgs),
    /// Merge per-seed training curves into mean/min/max columns.
    Curves(CurvesArgs),
    /// Paired t-test between two finished runs.
    Stats(StatsArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Output directory; overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Finished run directory to compare against (paired t-test on
    /// per-seed best EMA top-1).
    #[arg(long)]
    compare: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Checkpoint file to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset split: val or train.
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Sampled coordinates per tensor above the exhaustive limit.
    #[arg(long, default_value_t = 16)]
    sample_limit: usize,
    /// Corrupt the named storage's analytic gradient (negative control).
    #[arg(long, hide = true)]
    inject_grad_error: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Timed iterations; at least 3 for a mean/std estimate.
    #[arg(long, default_value_t = 5)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
}

#[derive(Args)]
struct CurvesArgs {
    /// Run directory holding seed_*/metrics.csv (or metrics.csv directly).
    #[arg(long)]
    run_dir: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    /// First run directory (summary.json inside).
    #[arg(long)]
    run_a: PathBuf,
    /// Second run directory.
    #[arg(long)]
    run_b: PathBuf,
}

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let (rest, overrides) = extract_overrides(argv);
    let cli = Cli::parse_from(rest);
    if let Err(e) = run(&cli, &overrides) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: &Cli, overrides: &[(String, String)]) -> Result<()> {
    match &cli.cmd {
        Cmd::Count(a) => cmd_count(a, overrides),
        Cmd::Flops(a) => cmd_flops(a, overrides),
        Cmd::Train(a) => cmd_train(a, overrides),
        Cmd::Eval(a) => cmd_eval(a, overrides),
        Cmd::Gradcheck(a) => cmd_gradcheck(a, overrides),
        Cmd::Bench(a) => cmd_bench(a, overrides),
        Cmd::Curves(a) => cmd_curves(a),
        Cmd::Stats(a) => cmd_stats(a),
    }
}

/// Splits argv into clap-visible arguments and config overrides. An
/// override is `--name value` or `--name=value` where name contains a dot
/// or is one of the shorthands. A trailing override flag with no value is
/// left for clap to reject.
fn extract_overrides(argv: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let shorthand = ["variant", "group-size", "width-ratio", "depth", "seed"];
    let mut rest = Vec::with_capacity(argv.len());
    let mut overrides = Vec::new();
    let mut i = 0;
    while i < argv.len() {
        let captured = argv[i].strip_prefix("--").and_then(|body| {
            let (name, inline) = match body.split_once('=') {
                Some((n, v)) => (n, Some(v.to_string())),
                None => (body, None),
            };
            if name.contains('.') || shorthand.contains(&name) {
                Some((name.to_string(), inline))
            } else {
                None
            }
        });
        match captured {
            Some((name, Some(value))) => {
                overrides.push((name, value));
                i += 1;
            }
            Some((name, None)) if i + 1 < argv.len() => {
                overrides.push((name, argv[i + 1].clone()));
                i += 2;
            }
            _ => {
                rest.push(argv[i].clone());
                i += 1;
            }
        }
    }
    (rest, overrides)
}

/// Raw override values parse as JSON where possible (numbers, booleans,
/// arrays) and fall back to strings.
fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_dot_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override path '{path}' has an empty segment")));
    }
    let (last, walk) = parts.split_last().expect("non-empty split");
    let mut cur = doc;
    for part in walk {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override path '{path}' crosses a non-object at '{part}'"))
        })?;
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(serde_json::Map::new()));
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override path '{path}' targets a non-object")))?;
    obj.insert(last.to_string(), value);
    Ok(())
}

fn apply_overrides(doc: &mut Value, overrides: &[(String, String)]) -> Result<()> {
    for (name, raw) in overrides {
        let value = parse_override_value(raw);
        match name.as_str() {
            "variant" => {
                let kind = raw.as_str();
                let mut variant = serde_json::Map::new();
                variant.insert("kind".into(), Value::String(kind.to_string()));
                match kind {
                    "baseline" => {}
                    "grouped" => {
                        variant.insert("group_size".into(), json!(2));
                    }
                    "shallow" => {
                        variant.insert("width_ratio".into(), json!(0.5));
                    }
                    other => {
                        return Err(Error::Config(format!(
                            "unknown variant '{other}' (baseline | grouped | shallow)"
                        )))
                    }
                }
                // Keep explicit sub-fields when the kind is unchanged.
                if let Some(old) = doc.pointer("/model/variant").and_then(|v| v.as_object()) {
                    if old.get("kind").and_then(|k| k.as_str()) == Some(kind) {
                        for (k, v) in old {
                            variant.entry(k.clone()).or_insert_with(|| v.clone());
                        }
                    }
                }
                set_dot_path(doc, "model.variant", Value::Object(variant))?;
            }
            "group-size" => {
                set_dot_path(doc, "model.variant", json!({"kind": "grouped", "group_size": value}))?
            }
            "width-ratio" => set_dot_path(
                doc,
                "model.variant",
                json!({"kind": "shallow", "width_ratio": value}),
            )?,
            "depth" => set_dot_path(doc, "model.depth", value)?,
            "seed" => set_dot_path(doc, "train.seeds", Value::Array(vec![value]))?,
            dotted => set_dot_path(doc, dotted, value)?,
        }
    }
    Ok(())
}

/// Reads the config file, applies overrides, and validates. File and
/// parse problems are configuration errors (exit 2), not I/O failures.
fn load_spec(config: &Path, overrides: &[(String, String)]) -> Result<RunSpec> {
    let text = fs::read_to_string(config)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", config.display())))?;
    let mut doc: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("config {}: {e}", config.display())))?;
    apply_overrides(&mut doc, overrides)?;
    let spec: RunSpec = serde_json::from_value(doc)
        .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    spec.model.validate()?;
    Ok(spec)
}

/// The comparison rows: Baseline, Grouped, Shallow at the config's
/// dimensions, keeping the config's own group size / width ratio. Rows
/// whose variant is invalid at these dimensions are skipped.
fn variant_rows(model: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    let grouped = match model.variant {
        MLPVariant::Grouped { group_size } => MLPVariant::Grouped { group_size },
        _ => MLPVariant::Grouped { group_size: 2 },
    };
    let shallow = match model.variant {
        MLPVariant::Shallow { width_ratio } => MLPVariant::Shallow { width_ratio },
        _ => MLPVariant::Shallow { width_ratio: 0.5 },
    };
    [MLPVariant::Baseline, grouped, shallow]
        .into_iter()
        .map(|v| model.with_variant(v))
        .filter(|c| c.validate().is_ok())
        .map(|c| (c.variant.name(), c))
        .collect()
}

fn cmd_count(args: &ConfigArgs, overrides: &[(String, String)]) -> Result<()> {
    let spec = load_spec(&args.config, overrides)?;
    let rows = variant_rows(&spec.model);
    let mut stats: Vec<(&str, ModelStats)> = Vec::new();
    for (name, cfg) in &rows {
        stats.push((name, count_params(cfg)?));
    }
    let refs: Vec<(&str, &ModelStats)> = stats.iter().map(|(n, s)| (*n, s)).collect();
    eprint!("{}", format_count_table(&refs));
    print!("{}", format_count_csv(&refs));
    Ok(())
}

fn cmd_flops(args: &ConfigArgs, overrides: &[(String, String)]) -> Result<()> {
    let spec = load_spec(&args.config, overrides)?;
    let mut per_variant = Vec::new();
    for (name, cfg) in variant_rows(&spec.model) {
        let dense = count_macs(&cfg, Convention::DenseOnly)?;
        let full = count_macs(&cfg, Convention::Full)?;
        per_variant.push(json!({
            "variant": name,
            "dense_macs": dense,
            "dense_gmacs": dense as f64 / 1e9,
            "full_macs": full,
            "full_gmacs": full as f64 / 1e9,
        }));
    }
    println!("{}", serde_json::to_string(&json!({ "per_variant": per_variant }))?);
    Ok(())
}

fn build_dataset(data: &DataConfig) -> Result<(Dataset, Dataset)> {
    match data.source.as_str() {
        "synthetic" => {
            let full = synth_dataset(
                data.num_classes,
                data.per_class,
                data.image_size,
                data.noise_std,
                data.data_seed,
            )?;
            split_per_class(&full, data.train_per_class)
        }
        "cifar" => {
            if data.train_paths.is_empty() || data.val_paths.is_empty() {
                return Err(Error::Config(
                    "cifar source needs non-empty train_paths and val_paths".into(),
                ));
            }
            Ok((load_cifar_binary(&data.train_paths)?, load_cifar_binary(&data.val_paths)?))
        }
        other => Err(Error::Config(format!("unknown data source '{other}' (synthetic | cifar)"))),
    }
}

fn resolve_out_dir(cli_out: Option<&Path>, spec_out: Option<&str>) -> PathBuf {
    let base = match (cli_out, spec_out) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(s)) => PathBuf::from(s),
        (None, None) => PathBuf::from("runs/run"),
    };
    match std::env::var_os("VITSLM_OUTPUT_ROOT") {
        Some(root) if base.is_relative() => PathBuf::from(root).join(base),
        _ => base,
    }
}

fn summary_text(spec: &RunSpec, runs: &[RunMetrics]) -> Result<String> {
    let agg = aggregate_seeds(runs)?;
    let seeds: Vec<String> = runs.iter().map(|r| r.seed.to_string()).collect();
    Ok(format!(
        "{} over seeds [{}]\n\
         best EMA top-1: {}\n\
         final top-1: {}\n\
         peak epoch: {}\n\
         peak-to-final gap: {}\n\
         train throughput (img/s): {}\n",
        spec.model.variant.name(),
        seeds.join(", "),
        agg.best_ema_top1.display(2),
        agg.final_top1.display(2),
        agg.peak_epoch.display(1),
        agg.peak_to_final_gap.display(2),
        agg.throughput.display(1),
    ))
}

fn read_summary(dir: &Path) -> Result<Value> {
    let path = dir.join("summary.json");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Per-seed best EMA top-1 from a run's summary.json, in file order.
fn summary_best_per_seed(doc: &Value, path: &Path) -> Result<Vec<(u64, f64)>> {
    let rows = doc
        .get("per_seed")
        .and_then(|v| v.as_array())
        .ok_or_else(|| {
            Error::Format(format!("{} has no per_seed array", path.display()))
        })?;
    rows.iter()
        .map(|r| {
            let seed = r.get("seed").and_then(|v| v.as_u64());
            let best = r.get("best_ema_top1").and_then(|v| v.as_f64());
            match (seed, best) {
                (Some(s), Some(b)) => Ok((s, b)),
                _ => Err(Error::Format(format!(
                    "{} per_seed rows need seed and best_ema_top1",
                    path.display()
                ))),
            }
        })
        .collect()
}

fn cmd_train(args: &TrainArgs, overrides: &[(String, String)]) -> Result<()> {
    let spec = load_spec(&args.common.config, overrides)?;
    spec.train.validate()?;
    let (train_ds, val_ds) = build_dataset(&spec.data)?;
    let out_root = resolve_out_dir(args.out.as_deref(), spec.output_dir.as_deref());
    fs::create_dir_all(&out_root)?;

    let mut runs: Vec<RunMetrics> = Vec::new();
    for &seed in &spec.train.seeds {
        let dir = out_root.join(format!("seed_{seed}"));
        eprintln!(
            "seed {seed}: {} for {} epochs, {} train / {} val images",
            spec.model.variant.name(),
            spec.train.epochs,
            train_ds.num_samples(),
            val_ds.num_samples()
        );
        let m = train(&spec.model, &spec.train, seed, &train_ds, &val_ds, Some(&dir))?;
        eprintln!(
            "seed {seed}: best EMA top-1 {:.2} (epoch {}), final {:.2}, gap {:.2}, {:.1} img/s",
            m.best_ema_top1, m.best_epoch, m.final_top1, m.peak_to_final_gap, m.throughput
        );
        runs.push(m);
    }

    let text = summary_text(&spec, &runs)?;
    let agg = aggregate_seeds(&runs)?;
    let mut summary = json!({
        "variant": spec.model.variant.name(),
        "model": spec.model,
        "train": spec.train,
        "per_seed": runs,
        "aggregate": agg,
    });
    fs::write(out_root.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    fs::write(out_root.join("summary.txt"), &text)?;
    eprint!("{text}");

    if let Some(cmp_dir) = &args.compare {
        let theirs_doc = read_summary(cmp_dir)?;
        let theirs = summary_best_per_seed(&theirs_doc, cmp_dir)?;
        let ours: Vec<f64> = runs.iter().map(|r| r.best_ema_top1).collect();
        let them: Vec<f64> = theirs.iter().map(|&(_, b)| b).collect();
        let t = paired_t_test(&ours, &them)?;
        eprintln!("paired t-test vs {}: {:?}", cmp_dir.display(), t);
        summary["compare"] = json!({
            "against": cmp_dir.display().to_string(),
            "metric": "best_ema_top1",
            "result": t,
        });
    }
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn cmd_eval(args: &EvalArgs, overrides: &[(String, String)]) -> Result<()> {
    let spec = load_spec(&args.common.config, overrides)?;
    let (cfg, params) = load_checkpoint::<f32>(&args.checkpoint)?;
    let (mut train_ds, mut val_ds) = build_dataset(&spec.data)?;
    // Normalization is recomputed from the train split, matching how the
    // harness normalized before training.
    let stats = compute_norm_stats(&train_ds);
    apply_norm(&mut train_ds, &stats)?;
    apply_norm(&mut val_ds, &stats)?;
    let ds = match args.split.as_str() {
        "val" => &val_ds,
        "train" => &train_ds,
        other => return Err(Error::Config(format!("unknown split '{other}' (train | val)"))),
    };
    let (top1, top5) = evaluate(&params, &cfg, ds)?;
    println!(
        "{}",
        json!({
            "checkpoint": args.checkpoint.display().to_string(),
            "variant": cfg.variant.name(),
            "split": args.split,
            "n": ds.num_samples(),
            "top1": top1,
            "top5": top5,
        })
    );
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs, overrides: &[(String, String)]) -> Result<()> {
    let spec = load_spec(&args.common.config, overrides)?;
    let seed = spec.train.seeds.first().copied().unwrap_or(0);
    let stats = count_params(&spec.model)?;
    if stats.unique_params > 1_000_000 {
        return Err(Error::Config(format!(
            "gradient checking is for small models; {} parameters exceed the 1M limit",
            stats.unique_params
        )));
    }

    let ops = op_gradcheck_suite(seed)?;
    eprintln!("{:<22} {:>8} {:>12}", "op", "coords", "max rel err");
    for op in &ops {
        eprintln!("{:<22} {:>8} {:>12.3e}", op.name, op.checked, op.max_rel_err);
    }
    let ops_pass = ops.iter().all(|o| o.max_rel_err <= GRAD_TOL);

    let report =
        model_grad_report(&spec.model, seed, args.sample_limit, args.inject_grad_error.as_deref())?;
    eprintln!("{:<28} {:>8} {:>12}  pass", "parameter group", "coords", "max rel err");
    for g in &report.groups {
        eprintln!(
            "{:<28} {:>8} {:>12.3e}  {}",
            g.name,
            g.checked,
            g.max_rel_err,
            if g.pass { "yes" } else { "NO" }
        );
    }

    let mut decomposition = None;
    if matches!(spec.model.variant, MLPVariant::Grouped { .. }) {
        let dev = shared_grad_decomposition(&spec.model, seed)?;
        eprintln!("shared-gradient decomposition: max abs deviation {dev:.3e}");
        decomposition = Some(dev);
    }

    let decomp_pass = decomposition.map_or(true, |d| d <= 1e-10);
    let pass = ops_pass && report.pass && decomp_pass;
    println!(
        "{}",
        json!({
            "seed": seed,
            "ops_max_rel_err": ops.iter().fold(0.0f64, |m, o| m.max(o.max_rel_err)),
            "model_max_rel_err": report.max_rel_err,
            "tolerance": report.tolerance,
            "decomposition_max_abs_dev": decomposition,
            "pass": pass,
        })
    );
    if !pass {
        let mut failing: Vec<String> = report
            .groups
            .iter()
            .filter(|g| !g.pass)
            .map(|g| g.name.clone())
            .collect();
        if !ops_pass {
            failing.extend(
                ops.iter().filter(|o| o.max_rel_err > GRAD_TOL).map(|o| o.name.clone()),
            );
        }
        if !decomp_pass {
            failing.push("shared-gradient decomposition".into());
        }
        return Err(Error::Numeric(format!("gradient check failed: {}", failing.join(", "))));
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs, overrides: &[(String, String)]) -> Result<()> {
    let spec = load_spec(&args.common.config, overrides)?;
    let mut reports = Vec::new();
    for (name, cfg) in variant_rows(&spec.model) {
        let (params, _) = build_model::<f32>(&cfg, 0)?;
        let rep = measure_throughput(&params, &cfg, args.batch, args.warmup, args.iters)?;
        eprintln!(
            "{:<12} {:>10.1} ± {:.1} img/s  (batch {}, {} timed iters)",
            name, rep.images_per_sec, rep.std_images_per_sec, rep.batch_size, rep.timed_iters
        );
        reports.push((name, rep));
    }
    eprintln!("note: rates are machine-specific; only same-host ratios are comparable");

    let rate = |label: &str| {
        reports
            .iter()
            .find(|(n, _)| *n == label)
            .map(|(_, r)| r.images_per_sec)
    };
    let base = rate("Baseline");
    let ratio = |label: &str| match (rate(label), base) {
        (Some(v), Some(b)) if b > 0.0 => Some(v / b),
        _ => None,
    };
    println!(
        "{}",
        json!({
            "batch": args.batch,
            "timed_iters": args.iters,
            "variants": reports.iter().map(|(n, r)| json!({
                "variant": n,
                "images_per_sec": r.images_per_sec,
                "std_images_per_sec": r.std_images_per_sec,
            })).collect::<Vec<_>>(),
            "shallow_over_baseline": ratio("ShallowMLP"),
            "grouped_over_baseline": ratio("GroupedMLP"),
        })
    );
    Ok(())
}

/// One parsed metrics.csv: (top1, ema_top1, loss) per epoch.
fn read_metrics_csv(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let expected = "epoch,train_loss,val_top1,val_top5,ema_val_top1,lr,epoch_seconds";
    if header != expected {
        return Err(Error::Format(format!(
            "{} header is '{header}', expected '{expected}'",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(Error::Format(format!(
                "{} row {} has {} columns, expected 7",
                path.display(),
                i + 2,
                cols.len()
            )));
        }
        let f = |j: usize| -> Result<f64> {
            cols[j].parse::<f64>().map_err(|e| {
                Error::Format(format!("{} row {}: {e}", path.display(), i + 2))
            })
        };
        rows.push((f(2)?, f(4)?, f(1)?));
    }
    Ok(rows)
}

fn cmd_curves(args: &CurvesArgs) -> Result<()> {
    let dir = &args.run_dir;
    let mut files: Vec<PathBuf> = Vec::new();
    if dir.is_dir() {
        let mut seed_dirs: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.is_dir()
                    && p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("seed_"))
                    && p.join("metrics.csv").is_file()
            })
            .collect();
        seed_dirs.sort();
        files.extend(seed_dirs.into_iter().map(|p| p.join("metrics.csv")));
    }
    if files.is_empty() && dir.join("metrics.csv").is_file() {
        files.push(dir.join("metrics.csv"));
    }
    if files.is_empty() {
        return Err(Error::Config(format!("no metrics.csv under {}", dir.display())));
    }

    let mut curves = Vec::new();
    for f in &files {
        curves.push(read_metrics_csv(f)?);
    }
    let n = curves[0].len();
    if curves.iter().any(|c| c.len() != n) {
        let listing: Vec<String> = files
            .iter()
            .zip(&curves)
            .map(|(f, c)| format!("{} has {} epochs", f.display(), c.len()))
            .collect();
        return Err(Error::Format(format!("epoch counts differ: {}", listing.join(", "))));
    }
    if n == 0 {
        return Err(Error::Format(format!("{} has no epochs", files[0].display())));
    }

    println!(
        "epoch,mean_top1,min_top1,max_top1,mean_ema_top1,min_ema_top1,max_ema_top1,mean_loss,min_loss,max_loss"
    );
    let k = curves.len() as f64;
    for e in 0..n {
        let col = |pick: fn(&(f64, f64, f64)) -> f64| -> (f64, f64, f64) {
            let vals: Vec<f64> = curves.iter().map(|c| pick(&c[e])).collect();
            let mean = vals.iter().sum::<f64>() / k;
            let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (mean, min, max)
        };
        let t = col(|r| r.0);
        let m = col(|r| r.1);
        let l = col(|r| r.2);
        println!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.6},{:.6},{:.6}",
            e + 1,
            t.0,
            t.1,
            t.2,
            m.0,
            m.1,
            m.2,
            l.0,
            l.1,
            l.2
        );
    }
    Ok(())
}

fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let doc_a = read_summary(&args.run_a)?;
    let doc_b = read_summary(&args.run_b)?;
    let a = summary_best_per_seed(&doc_a, &args.run_a)?;
    let b = summary_best_per_seed(&doc_b, &args.run_b)?;
    let av: Vec<f64> = a.iter().map(|&(_, v)| v).collect();
    let bv: Vec<f64> = b.iter().map(|&(_, v)| v).collect();
    let result = paired_t_test(&av, &bv)?;
    eprintln!(
        "paired t-test on best EMA top-1, {} vs {}: {:?}",
        args.run_a.display(),
        args.run_b.display(),
        result
    );
    println!(
        "{}",
        json!({
            "run_a": args.run_a.display().to_string(),
            "run_b": args.run_b.display().to_string(),
            "metric": "best_ema_top1",
            "seeds_a": a.iter().map(|&(s, _)| s).collect::<Vec<_>>(),
            "seeds_b": b.iter().map(|&(s, _)| s).collect::<Vec<_>>(),
            "a": av,
            "b": bv,
            "result": result,
        })
    );
    Ok(())
}
