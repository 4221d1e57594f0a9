//! `sketchgen` command-line tool.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sketchgen::autodiff::OpKind;
use sketchgen::data::{load_any, make_zero_shot_split, save_features, synth_generate, Dataset, Manifest, Modality, SyntheticSpec};
use sketchgen::gradsuite::{run_suite, SuiteOptions, DEFAULT_TOLERANCE};
use sketchgen::model::{ModelBundle, ModelConfig, Variant};
use sketchgen::pipeline::{self, Comparison, VariantRun, VariantSummary};
use sketchgen::retrieval::{write_rankings_csv, RetrievalConfig};
use sketchgen::trainer::{write_log_line, Checkpoint, Trainer};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "sketchgen", version, about = "Zero-shot sketch-based image retrieval by feature generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-modality dataset and its manifest.
    SynthData(SynthArgs),
    /// Train a model and write a checkpoint plus a JSON-lines metrics log.
    Train(RunArgs),
    /// Evaluate a checkpoint on the unseen classes; prints a JSON report.
    Eval(RunArgs),
    /// Dump per-query rankings as CSV.
    Retrieve(RunArgs),
    /// Check every backward rule against central differences.
    Gradcheck(GradcheckArgs),
    /// Run two variants on identical seeds and compare them.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long, default_value_t = 15)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    images_per_class: usize,
    #[arg(long, default_value_t = 200)]
    sketches_per_class: usize,
    #[arg(long, default_value_t = 0.3)]
    image_noise_std: f64,
    #[arg(long, default_value_t = 0.3)]
    sketch_noise_std: f64,
    #[arg(long, default_value_t = 1.0)]
    map_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// `--config FILE` plus any number of `--key value` settings.
#[derive(Args)]
struct RunArgs {
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        num_args = 0..,
        value_name = "--KEY VALUE"
    )]
    settings: Vec<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt one backward rule.
    #[arg(long, hide = true)]
    fault: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    /// `paper-table3` (with and without flow steps) or `paper-fig5`
    /// (VAE against autoencoder).
    preset: String,
    #[command(flatten)]
    run: RunArgs,
}

enum Failure {
    /// Bad input detected before any compute.
    Invalid(Vec<String>),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn invalid<T>(msg: impl Into<String>) -> Outcome<T> {
    Err(Failure::Invalid(vec![msg.into()]))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(problems)) => {
            eprintln!("error: invalid configuration ({} problem(s)):", problems.len());
            for p in problems {
                eprintln!("  - {p}");
            }
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Pulls `--config FILE` out of the settings and loads everything else.
fn load_config(settings: &[String], needs_data: bool, needs_checkpoint: bool) -> Outcome<RunConfig> {
    let mut rest = Vec::new();
    let mut file = None;
    let mut problems = Vec::new();
    let mut it = settings.iter();
    while let Some(s) = it.next() {
        if s == "--config" {
            match it.next() {
                Some(p) => file = Some(PathBuf::from(p)),
                None => problems.push("--config needs a value".to_string()),
            }
        } else if let Some(p) = s.strip_prefix("--config=") {
            file = Some(PathBuf::from(p));
        } else {
            rest.push(s.clone());
        }
    }
    let (cfg, more) = RunConfig::load(file.as_deref(), &rest);
    problems.extend(more);
    if needs_data && cfg.data.is_none() && cfg.images.is_none() {
        problems.push("no data: set data = <manifest> or images + sketches".into());
    }
    if needs_checkpoint && cfg.checkpoint.is_none() {
        problems.push("no checkpoint: set checkpoint = <file>".into());
    }
    for path in [&cfg.data, &cfg.images, &cfg.sketches, &cfg.resume].into_iter().flatten() {
        if !path.exists() {
            problems.push(format!("{} does not exist", path.display()));
        }
    }
    if needs_checkpoint {
        if let Some(p) = cfg.checkpoint.as_ref().filter(|p| !p.exists()) {
            problems.push(format!("{} does not exist", p.display()));
        }
    }
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Failure::Invalid(problems))
    }
}

fn load_data(cfg: &RunConfig) -> Outcome<Dataset> {
    let ds = match (&cfg.data, &cfg.images, &cfg.sketches) {
        (Some(manifest), _, _) => Dataset::from_manifest(manifest)?,
        (None, Some(images), Some(sketches)) => Dataset {
            images: load_any(images, Modality::Image)?,
            sketches: load_any(sketches, Modality::Sketch)?,
            classes: BTreeMap::new(),
        },
        _ => return invalid("no data: set data = <manifest> or images + sketches"),
    };
    if ds.images.is_empty() || ds.sketches.is_empty() {
        return Err(anyhow!("the dataset needs both image and sketch records").into());
    }
    Ok(ds)
}

/// Model config sized for the data; constraint violations are reported
/// as validation failures.
fn sized_model(cfg: &RunConfig, ds: &Dataset) -> Outcome<ModelConfig> {
    let model = cfg.model_for(ds.image_dim().unwrap_or(0), ds.sketch_dim().unwrap_or(0));
    let problems = model.problems();
    if !problems.is_empty() {
        return Err(Failure::Invalid(problems));
    }
    Ok(model)
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join("checkpoint.bin"))
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth_data(a: SynthArgs) -> Outcome {
    let spec = SyntheticSpec {
        n_classes: a.classes,
        dim: a.dim,
        images_per_class: a.images_per_class,
        sketches_per_class: a.sketches_per_class,
        image_noise_std: a.image_noise_std,
        sketch_noise_std: a.sketch_noise_std,
        cross_modal_map_scale: a.map_scale,
        seed: a.seed,
    };
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(Failure::Invalid(problems));
    }
    let data = synth_generate(&spec)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_features(&a.out.join("images.zsfb"), Modality::Image, &data.images)?;
    save_features(&a.out.join("sketches.zsfb"), Modality::Sketch, &data.sketches)?;
    let manifest = Manifest {
        files: vec![
            (Modality::Image, PathBuf::from("images.zsfb")),
            (Modality::Sketch, PathBuf::from("sketches.zsfb")),
        ],
        classes: (0..spec.n_classes as u32).map(|c| (c, format!("class_{c:03}"))).collect(),
    };
    let manifest_path = a.out.join("manifest.tsv");
    manifest.save(&manifest_path)?;
    println!(
        "{}",
        json!({
            "manifest": manifest_path,
            "images": data.images.len(),
            "sketches": data.sketches.len(),
            "spec": spec,
        })
    );
    Ok(())
}

fn train(a: RunArgs) -> Outcome {
    let cfg = load_config(&a.settings, true, false)?;
    let ds = load_data(&cfg)?;
    let model = sized_model(&cfg, &ds)?;
    let fingerprint = model.fingerprint();
    let resumed = match &cfg.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if let Err(e) = ckpt.check_fingerprint(&model) {
                return invalid(format!("cannot resume from {}: {e}", p.display()));
            }
            Some(ckpt)
        }
        None => None,
    };
    let prepared = pipeline::prepare(
        &ds.images,
        &ds.sketches,
        &cfg.split,
        cfg.split_seed,
        cfg.train.pairs_per_class,
        cfg.seed,
    )?;
    let mut trainer = match resumed {
        Some(ckpt) => {
            if ckpt.scaling.as_ref() != Some(&prepared.scaling) {
                return invalid("the checkpoint was trained on differently scaled data");
            }
            let mut t = ckpt.restore()?;
            t.config.epochs = cfg.train.epochs;
            t
        }
        None => {
            let bundle = ModelBundle::new(model, cfg.seed)?;
            let mut t = Trainer::new(bundle, cfg.train_config())?;
            t.scaling = Some(prepared.scaling.clone());
            t
        }
    };

    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let ckpt_path = checkpoint_path(&cfg);
    let log_path = cfg.out.join("metrics.jsonl");
    let fresh_log = cfg.resume.is_none() || !log_path.exists();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh_log)
        .truncate(fresh_log)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    if fresh_log {
        writeln!(log, "{}", json!({ "fingerprint": fingerprint }))?;
    }
    fs::write(
        cfg.out.join("config.txt"),
        format!("# fingerprint {fingerprint}\n{}", cfg.render()),
    )?;
    trainer.to_checkpoint().save(&ckpt_path)?;

    let retrieval = cfg.retrieval.clone();
    let history = trainer.fit_with(
        &prepared.pairs,
        |bundle, _| {
            let report = pipeline::evaluate_prepared(bundle, &prepared, &retrieval)?;
            Ok(Some(json!({
                "map_at_all": report.map_at_all,
                "precision_at_k": report.precision_at_k,
            })))
        },
        |entry, t| {
            write_log_line(&mut log, entry)?;
            t.to_checkpoint().save(&ckpt_path)
        },
    )?;
    let last = history.last();
    println!(
        "{}",
        json!({
            "fingerprint": fingerprint,
            "checkpoint": ckpt_path,
            "metrics_log": log_path,
            "epochs_run": history.len(),
            "epoch": trainer.epoch(),
            "final_losses": last.map(|e| &e.losses),
        })
    );
    Ok(())
}

/// Checkpoint, data and raw split for evaluation commands, with
/// compatibility checks.
fn load_for_eval(cfg: &RunConfig) -> Outcome<(ModelBundle, sketchgen::data::Scaling, sketchgen::data::DatasetSplit)> {
    let path = checkpoint_path(cfg);
    let ckpt = Checkpoint::load(&path)?;
    let ds = load_data(cfg)?;
    let (fd, ad) = (ds.image_dim().unwrap_or(0), ds.sketch_dim().unwrap_or(0));
    if (ckpt.model.feature_dim, ckpt.model.attr_dim) != (fd, ad) {
        return invalid(format!(
            "dimension mismatch: checkpoint expects image/sketch widths {}/{}, data has {fd}/{ad}",
            ckpt.model.feature_dim, ckpt.model.attr_dim
        ));
    }
    let model = sized_model(cfg, &ds)?;
    if let Err(e) = ckpt.check_fingerprint(&model) {
        return invalid(format!("{}: {e}", path.display()));
    }
    let Some(scaling) = ckpt.scaling.clone() else {
        return Err(anyhow!("{} carries no feature scaling", path.display()).into());
    };
    let raw = make_zero_shot_split(&ds.images, &ds.sketches, &cfg.split, cfg.split_seed)?;
    Ok((ckpt.bundle()?, scaling, raw))
}

fn eval(a: RunArgs) -> Outcome {
    let cfg = load_config(&a.settings, true, true)?;
    let (bundle, scaling, raw) = load_for_eval(&cfg)?;
    let (report, _) = pipeline::evaluate_split(&bundle, &raw, &scaling, &cfg.retrieval, false)?;
    let value = serde_json::to_value(&report)?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write_json(&cfg.out.join("eval.json"), &value)?;
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

fn retrieve(a: RunArgs) -> Outcome {
    let cfg = load_config(&a.settings, true, true)?;
    let (bundle, scaling, raw) = load_for_eval(&cfg)?;
    let (_, rankings) = pipeline::evaluate_split(&bundle, &raw, &scaling, &cfg.retrieval, true)?;
    let mut out = std::io::BufWriter::new(std::io::stdout().lock());
    writeln!(out, "# fingerprint {}", bundle.config.fingerprint())?;
    write_rankings_csv(&mut out, &rankings, (cfg.top > 0).then_some(cfg.top))?;
    out.flush()?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    let fault = match a.fault.as_deref() {
        Some(name) => match name.parse::<OpKind>() {
            Ok(op) => Some(op),
            Err(e) => return invalid(e.to_string()),
        },
        None => None,
    };
    if !(a.tolerance.is_finite() && a.tolerance > 0.0) {
        return invalid(format!("tolerance must be > 0, got {}", a.tolerance));
    }
    let opts = SuiteOptions {
        tolerance: a.tolerance,
        fault,
        seed: a.seed,
        ..SuiteOptions::default()
    };
    let start = std::time::Instant::now();
    let results = run_suite(&opts)?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    println!("{:<width$}  {:>6}  {:>12}  {:>8}  status", "check", "coords", "max_rel_err", "seconds");
    for r in &results {
        println!(
            "{:<width$}  {:>6}  {:>12.3e}  {:>8.3}  {}",
            r.name,
            r.coords,
            r.max_rel_error,
            r.seconds,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "{} checks, {failed} failed, tolerance {:e}, {:.1}s",
        results.len(),
        a.tolerance,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(anyhow!("{failed} gradient check(s) failed").into());
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Outcome {
    let pair = match a.preset.as_str() {
        "paper-table3" => [Variant::FeedbackVae, Variant::NoIaf],
        "paper-fig5" => [Variant::FeedbackVae, Variant::FeedbackAuto],
        other => {
            let mut problems = vec![format!("unknown ablation preset '{other}' (expected paper-table3 or paper-fig5)")];
            if let Err(Failure::Invalid(p)) = load_config(&a.run.settings, false, false) {
                problems.extend(p);
            }
            return Err(Failure::Invalid(problems));
        }
    };
    let cfg = load_config(&a.run.settings, false, false)?;
    let shared = match (&cfg.data, &cfg.images) {
        (None, None) => None,
        _ => Some(load_data(&cfg)?),
    };
    let mut runs: Vec<Vec<VariantRun>> = vec![Vec::new(); pair.len()];
    let mut fingerprints = BTreeMap::new();
    for &seed in &cfg.seeds {
        // Without a dataset each seed gets its own synthetic one.
        let (ds, split_seed) = match &shared {
            Some(ds) => (ds.clone(), cfg.split_seed),
            None => {
                let data = synth_generate(&SyntheticSpec {
                    seed,
                    ..SyntheticSpec::default()
                })?;
                let ds = Dataset {
                    images: data.images,
                    sketches: data.sketches,
                    classes: BTreeMap::new(),
                };
                (ds, seed)
            }
        };
        let prepared = pipeline::prepare(
            &ds.images,
            &ds.sketches,
            &cfg.split,
            split_seed,
            cfg.train.pairs_per_class,
            seed,
        )?;
        for (vi, &variant) in pair.iter().enumerate() {
            let mut vcfg = cfg.clone();
            vcfg.model.variant = variant;
            vcfg.seed = seed;
            let model = sized_model(&vcfg, &ds)?;
            fingerprints.insert(variant.to_string(), model.fingerprint());
            log::info!("seed {seed} variant {variant}");
            let (trainer, _) = pipeline::train(&prepared, model, vcfg.train_config(), seed)?;
            let rcfg = RetrievalConfig {
                seed,
                ..cfg.retrieval.clone()
            };
            let report = pipeline::evaluate_prepared(&trainer.bundle, &prepared, &rcfg)?;
            runs[vi].push(VariantRun {
                variant,
                seed,
                map_at_all: report.map_at_all,
                precision_at_k: report.precision_at_k,
            });
        }
    }
    let summaries = pair
        .iter()
        .zip(runs)
        .map(|(&v, r)| VariantSummary::from_runs(v, r))
        .collect();
    let comparison = Comparison::new(&a.preset, cfg.seeds.clone(), summaries)?;
    let value = json!({ "fingerprints": fingerprints, "comparison": comparison });
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write_json(&cfg.out.join(format!("ablate-{}.json", a.preset)), &value)?;
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}
