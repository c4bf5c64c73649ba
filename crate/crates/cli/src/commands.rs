use std::path::{Path, PathBuf};

use amaa_core::config::RunConfig;
use amaa_core::dataset::{Dataset, MANIFEST_NAME};
use amaa_core::experiment::{ablation_csv, median_miou, run_ablation, sweep_alpha, sweep_csv, AblationRow, SweepMeta, SweepRow};
use amaa_core::gradcheck::{module_suite, SUITE_MODULES};
use amaa_core::metrics::{fmt_f64, MetricsReport};
use amaa_core::model::build_model;
use amaa_core::train::{evaluate, train, EpochLog};
use amaa_core::volfile::write_atomic;
use amaa_core::{AmaaError, ParamStore};
use clap::ValueEnum;
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::{CliError, Command};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
}

pub fn dispatch(command: &Command, cfg: &RunConfig, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    match command {
        Command::GenScenes => gen_scenes(cfg, seed, out),
        Command::Train { data } => train_cmd(cfg, seed, data.as_deref(), out),
        Command::Eval { params, data, split } => eval_cmd(cfg, params, data.as_deref(), *split, out),
        Command::Ablate { data } => ablate(cfg, seed, data.as_deref(), out),
        Command::SweepAlpha { data } => sweep(cfg, seed, data.as_deref(), out),
        Command::Gradcheck { seeds } => gradcheck(cfg, seed.unwrap_or(0), *seeds, out),
        Command::ExportPlots { run } => export_plots(run.as_deref().unwrap_or(out), &out.join("plots")),
    }
}

fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(AmaaError::from)?;
    s.push('\n');
    Ok(s)
}

/// Writes `<out>/<rel>` and records it in the manifest.
fn emit(out: &Path, rel: &str, text: &str, manifest: &mut RunManifest) -> Result<(), CliError> {
    write_atomic(&out.join(rel), text.as_bytes())?;
    manifest.add(rel, rel);
    Ok(())
}

fn input_error(e: AmaaError) -> CliError {
    match e {
        AmaaError::Io { path, source } => CliError::Validation(format!("cannot read {}: {source}", path.display())),
        other => CliError::Validation(other.to_string()),
    }
}

fn dataset(cfg: &RunConfig, data: Option<&Path>, manifest: &mut RunManifest) -> Result<Dataset, CliError> {
    match data {
        Some(path) => {
            manifest.add("input_dataset", &path.display().to_string());
            Dataset::load(path).map_err(input_error)
        }
        None => {
            let d = &cfg.dataset;
            eprintln!("generating {} train + {} val scenes (seed {})", d.n_train, d.n_val, d.seed);
            Ok(Dataset::generate(&cfg.scene, &cfg.camera, d.n_train, d.n_val, d.seed)?)
        }
    }
}

fn gen_scenes(cfg: &RunConfig, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut cfg = cfg.clone();
    if let Some(s) = seed {
        cfg.dataset.seed = s;
    }
    let mut manifest = RunManifest::begin("gen-scenes", Some(cfg.dataset.seed), &cfg);
    let d = &cfg.dataset;
    let data = Dataset::generate(&cfg.scene, &cfg.camera, d.n_train, d.n_val, d.seed)?;
    let path = data.save(&out.join("data"))?;
    manifest.add(&format!("data/{MANIFEST_NAME}"), &format!("data/{MANIFEST_NAME}"));
    manifest.finish(out)?;
    println!(
        "gen-scenes: {} train + {} val scenes -> {}",
        data.train.len(),
        data.val.len(),
        path.display()
    );
    Ok(())
}

fn log_csv(log: &[EpochLog], classes: usize) -> String {
    let mut s = format!("epoch,lr,ce,affinity,consistency,total,{}\n", MetricsReport::csv_header(classes));
    for e in log {
        let t = &e.train;
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.epoch,
            fmt_f64(e.lr),
            fmt_f64(t.ce),
            fmt_f64(t.affinity),
            fmt_f64(t.consistency),
            fmt_f64(t.total),
            e.val.csv_row()
        ));
    }
    s
}

fn metrics_csv(report: &MetricsReport, classes: usize) -> String {
    format!("{}\n{}\n", MetricsReport::csv_header(classes), report.csv_row())
}

fn train_cmd(cfg: &RunConfig, seed: Option<u64>, data: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let mut cfg = cfg.clone();
    if let Some(s) = seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    let mut manifest = RunManifest::begin("train", Some(cfg.model.seed), &cfg);
    let data = dataset(&cfg, data, &mut manifest)?;
    let (model, init) = build_model(cfg.model.clone(), cfg.camera.clone())?;
    eprintln!(
        "training {} parameters for {} epochs on {} scenes",
        init.num_scalars(),
        cfg.train.epochs,
        data.train.len()
    );
    let result = train(&model, init, &data, &cfg.train)?;
    let classes = cfg.model.classes;
    let report = &result.log.last().expect("epochs >= 1").val;

    result.params.save(&out.join("params.json"))?;
    manifest.add("params.json", "params.json");
    emit(out, "config.toml", &cfg.to_toml(), &mut manifest)?;
    emit(out, "log.json", &to_json(&result.log)?, &mut manifest)?;
    emit(out, "log.csv", &log_csv(&result.log, classes), &mut manifest)?;
    emit(out, "metrics.json", &to_json(report)?, &mut manifest)?;
    emit(out, "metrics.csv", &metrics_csv(report, classes), &mut manifest)?;
    manifest.finish(out)?;
    println!(
        "train: val miou={} sc_iou={} -> {}",
        fmt_f64(report.miou),
        fmt_f64(report.sc_iou),
        out.join("params.json").display()
    );
    Ok(())
}

fn eval_cmd(cfg: &RunConfig, params: &Path, data: Option<&Path>, split: Split, out: &Path) -> Result<(), CliError> {
    let mut manifest = RunManifest::begin("eval", None, cfg);
    manifest.add("input_params", &params.display().to_string());
    let store = ParamStore::load(params).map_err(input_error)?;
    let (model, _) = build_model(cfg.model.clone(), cfg.camera.clone())?;
    model.check_params(&store)?;
    let data = dataset(cfg, data, &mut manifest)?;
    let examples = match split {
        Split::Train => &data.train,
        Split::Val => &data.val,
    };
    let report = evaluate(&model, &store, examples)?;
    emit(out, "metrics.json", &to_json(&report)?, &mut manifest)?;
    emit(out, "metrics.csv", &metrics_csv(&report, cfg.model.classes), &mut manifest)?;
    manifest.finish(out)?;
    println!(
        "eval: {} scenes, miou={} sc_iou={}",
        examples.len(),
        fmt_f64(report.miou),
        fmt_f64(report.sc_iou)
    );
    Ok(())
}

#[derive(Serialize)]
struct AblationSummary {
    seeds: Vec<u64>,
    median_miou: Vec<(String, f64)>,
    /// Whether the medians are non-decreasing from A to D.
    ordered: bool,
}

fn ablate(cfg: &RunConfig, seed: Option<u64>, data: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let seeds = seed.map_or_else(|| cfg.experiment.seeds.clone(), |s| vec![s]);
    let mut manifest = RunManifest::begin("ablate", seed, cfg);
    let data = dataset(cfg, data, &mut manifest)?;
    let rows = run_ablation(&cfg.model, &cfg.camera, &data, &cfg.train, &seeds, |r: &AblationRow| {
        eprintln!(
            "variant {} seed {}: miou={} sc_iou={}",
            r.variant,
            r.seed,
            fmt_f64(r.report.miou),
            fmt_f64(r.report.sc_iou)
        )
    })?;
    let medians = median_miou(&rows);
    let summary = AblationSummary {
        seeds,
        median_miou: medians.iter().map(|(v, m)| (v.to_string(), *m)).collect(),
        ordered: medians.windows(2).all(|w| w[0].1 <= w[1].1),
    };
    emit(out, "ablation.csv", &ablation_csv(&rows), &mut manifest)?;
    emit(out, "ablation.json", &to_json(&rows)?, &mut manifest)?;
    emit(out, "ablation_summary.json", &to_json(&summary)?, &mut manifest)?;
    manifest.finish(out)?;
    let line: Vec<String> = medians.iter().map(|(v, m)| format!("{v}={}", fmt_f64(*m))).collect();
    println!("ablate: median miou {}", line.join(" "));
    Ok(())
}

fn sweep(cfg: &RunConfig, seed: Option<u64>, data: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let seed = seed.unwrap_or(cfg.model.seed);
    let alphas = &cfg.experiment.alphas;
    let mut manifest = RunManifest::begin("sweep-alpha", Some(seed), cfg);
    if !cfg.model.use_afg {
        return Err(CliError::Validation("sweep-alpha needs model.use_afg = true".into()));
    }
    let data = dataset(cfg, data, &mut manifest)?;
    let rows = sweep_alpha(&cfg.model, &cfg.camera, &data, &cfg.train, alphas, seed, |r: &SweepRow| {
        eprintln!("alpha {:.2}: miou={} sc_iou={}", r.alpha, fmt_f64(r.report.miou), fmt_f64(r.report.sc_iou))
    })?;
    emit(out, "sweep.csv", &sweep_csv(&rows), &mut manifest)?;
    emit(out, "sweep.json", &to_json(&rows)?, &mut manifest)?;
    emit(out, "sweep_meta.json", &to_json(&SweepMeta::new(alphas, seed))?, &mut manifest)?;
    manifest.finish(out)?;
    let best = rows.iter().max_by(|a, b| a.report.miou.total_cmp(&b.report.miou)).expect("alphas validated");
    println!(
        "sweep-alpha: {} runs, best alpha={:.2} miou={}",
        rows.len(),
        best.alpha,
        fmt_f64(best.report.miou)
    );
    Ok(())
}

#[derive(Serialize)]
struct GradcheckSummary {
    h: f64,
    tol: f64,
    seeds: Vec<u64>,
    /// Worst relative error per module over all seeds.
    modules: Vec<(String, f64)>,
}

fn gradcheck(cfg: &RunConfig, start: u64, n: u64, out: &Path) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Validation("--seeds must be >= 1".into()));
    }
    let (h, tol) = (cfg.experiment.gradcheck_h, cfg.experiment.gradcheck_tol);
    let mut manifest = RunManifest::begin("gradcheck", Some(start), cfg);
    let mut worst = vec![0.0f64; SUITE_MODULES.len()];
    let seeds: Vec<u64> = (start..start + n).collect();
    for &seed in &seeds {
        for (w, check) in worst.iter_mut().zip(module_suite(seed, h, tol)?) {
            *w = w.max(check.max_rel_error());
        }
    }
    for (m, w) in SUITE_MODULES.iter().zip(&worst) {
        println!("{m:<24} {w:.3e}");
    }
    let summary = GradcheckSummary {
        h,
        tol,
        seeds,
        modules: SUITE_MODULES.iter().map(|m| m.to_string()).zip(worst.iter().copied()).collect(),
    };
    emit(out, "gradcheck.json", &to_json(&summary)?, &mut manifest)?;
    manifest.finish(out)?;
    let failed: Vec<&str> = SUITE_MODULES
        .iter()
        .zip(&worst)
        .filter(|(_, w)| !(**w <= tol))
        .map(|(m, _)| *m)
        .collect();
    if !failed.is_empty() {
        return Err(CliError::Runtime(format!(
            "gradient check above tolerance {tol:e} for: {}",
            failed.join(", ")
        )));
    }
    println!(
        "gradcheck: {} modules x {n} seeds, max relative error {:.3e} <= {tol:e}",
        worst.len(),
        worst.iter().copied().fold(0.0, f64::max)
    );
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn loss_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,ce,affinity,consistency,total\n");
    for e in log {
        let t = &e.train;
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch,
            fmt_f64(t.ce),
            fmt_f64(t.affinity),
            fmt_f64(t.consistency),
            fmt_f64(t.total)
        ));
    }
    s
}

fn push_categories(s: &mut String, method: &str, seed: u64, report: &MetricsReport) {
    for (i, iou) in report.per_class_iou.iter().enumerate() {
        s.push_str(&format!("{method},{},{seed},{}\n", i + 1, fmt_f64(*iou)));
    }
}

fn export_plots(run: &Path, out: &Path) -> Result<(), CliError> {
    let source = RunManifest::load(run)?;
    let mut manifest = RunManifest::begin("export-plots", source.seed, &source.config);
    manifest.add("input_run", &run.display().to_string());
    let mut categories = String::from("method,category,seed,iou\n");
    let mut written: Vec<PathBuf> = Vec::new();
    let ablation = run.join("ablation.json");
    let log = run.join("log.json");
    if ablation.exists() {
        let rows: Vec<AblationRow> = read_json(&ablation)?;
        for r in &rows {
            push_categories(&mut categories, r.variant.name(), r.seed, &r.report);
            let rel = format!("loss_{}_seed{}.csv", r.variant, r.seed);
            emit(out, &rel, &loss_csv(&r.log), &mut manifest)?;
            written.push(rel.into());
        }
    } else if log.exists() {
        let log: Vec<EpochLog> = read_json(&log)?;
        let last = log
            .last()
            .ok_or_else(|| CliError::Validation(format!("{} holds no epochs", run.join("log.json").display())))?;
        let method = source.config.model.variant().map_or("custom", |v| v.name());
        push_categories(&mut categories, method, source.config.model.seed, &last.val);
        emit(out, "loss.csv", &loss_csv(&log), &mut manifest)?;
        written.push("loss.csv".into());
    } else {
        return Err(CliError::Validation(format!(
            "{} holds neither log.json nor ablation.json",
            run.display()
        )));
    }
    emit(out, "categories.csv", &categories, &mut manifest)?;
    written.push("categories.csv".into());
    manifest.finish(out)?;
    println!("export-plots: {} files -> {}", written.len(), out.display());
    Ok(())
}
