//! Command-line entry point: generate, biomarkers, train, evaluate,
//! baselines, traverse, mispredict. Every run writes a manifest with input
//! digests; all numeric artifacts are byte-identical for identical inputs,
//! config, and seed.

use clap::{Parser, Subcommand};
use rvae::analysis::{find_mispredicted, misprediction_decomposition, traverse};
use rvae::baselines::{forest_fit, lasso_fit, ComparisonRow, ComparisonTable, ForestParams};
use rvae::biomarkers::{
    extract_biomarkers, Chamber, Gender, SubjectAnthropometrics, VolumeCurve, BIOMARKER_NAMES,
};
use rvae::cohort::{
    generate_synthetic, load_cohort, save_cohort, CohortSpec, Subject,
};
use rvae::error::{Error, Result};
use rvae::rvae::{load_model, save_model, RVaeModel};
use rvae::training::{
    cell_fold_seed, default_rvae_grid, evaluate_predictions, fit_rvae, grid_search, make_splits,
    predict_subjects, EvalMetrics, TrainConfig,
};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "rvae", version, about = "Cardiac biomarker R-VAE pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with planted SBP/gender trends.
    Generate {
        /// TOML cohort spec; defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute biomarkers from a directory of volume-curve files.
    Biomarkers {
        /// Directory of <id>.csv curves with <id>.anthro.csv sidecars.
        #[arg(long)]
        curves: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-stage R-VAE training on a cohort CSV.
    Train {
        #[arg(long)]
        cohort: PathBuf,
        /// TOML training config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run 5-fold grid search before the final fit.
        #[arg(long)]
        grid: bool,
    },
    /// Test-split metrics for a trained model.
    Evaluate {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lasso and random-forest baselines on the same splits.
    Baselines {
        #[arg(long)]
        cohort: PathBuf,
        /// Include the R-VAE in the comparison table when given.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Decode biomarker tendencies along the latent regression line.
    Traverse {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Decompose mispredicted prehypertensive subjects by biomarker.
    Mispredict {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    version: String,
    seed: Option<u64>,
    config: serde_json::Value,
    input_digests: BTreeMap<String, String>,
    artifacts: Vec<String>,
    wall_clock_secs: f64,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_manifest(out_dir: &Path, manifest: &RunManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(())
}

fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn digest_inputs(paths: &[(&str, &Path)]) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (name, p) in paths {
        map.insert(name.to_string(), sha256_file(p)?);
    }
    Ok(map)
}

fn load_subjects(path: &Path) -> Result<Vec<Subject>> {
    let report = load_cohort(path)?;
    for e in &report.rejected {
        eprintln!("warning: row {} rejected: {}", e.row, e.message);
    }
    if report.subjects.is_empty() {
        return Err(Error::Validation(format!("no valid rows in {path:?}")));
    }
    Ok(report.subjects)
}

fn cmd_generate(spec_path: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let start = Instant::now();
    let mut spec: CohortSpec = match spec_path {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
        None => CohortSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    ensure_out_dir(out)?;
    let (subjects, truth) = generate_synthetic(&spec)?;
    let cohort_path = out.join("cohort.csv");
    save_cohort(&cohort_path, &subjects)?;
    std::fs::write(
        out.join("truth.json"),
        serde_json::to_string_pretty(&truth)?,
    )?;
    let mut digests = BTreeMap::new();
    if let Some(p) = spec_path {
        digests.insert("spec".to_string(), sha256_file(p)?);
    }
    write_manifest(
        out,
        &RunManifest {
            command: "generate".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: Some(spec.seed),
            config: serde_json::to_value(&spec)?,
            input_digests: digests,
            artifacts: vec!["cohort.csv".into(), "truth.json".into()],
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    )?;
    println!("wrote {} subjects to {}", subjects.len(), cohort_path.display());
    Ok(())
}

/// Curve file: header time_ms,lv_ml,rv_ml. Sidecar <id>.anthro.csv: header
/// weight_kg,height_cm,gender,lv_mass_g with a single data row.
fn read_curve_pair(curve: &Path) -> Result<(VolumeCurve, VolumeCurve, SubjectAnthropometrics)> {
    let sidecar = curve.with_extension("anthro.csv");
    let mut reader = csv::Reader::from_path(curve)?;
    let (mut t, mut lv, mut rv) = (Vec::new(), Vec::new(), Vec::new());
    for record in reader.records() {
        let rec = record?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::Validation(format!("short row in {curve:?}")))?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Validation(format!("bad number in {curve:?}: {e}")))
        };
        t.push(parse(0)?);
        lv.push(parse(1)?);
        rv.push(parse(2)?);
    }
    let mut side = csv::Reader::from_path(&sidecar)?;
    let rec = side
        .records()
        .next()
        .ok_or_else(|| Error::Validation(format!("empty sidecar {sidecar:?}")))??;
    let field = |i: usize| -> Result<&str> {
        rec.get(i)
            .ok_or_else(|| Error::Validation(format!("short sidecar row in {sidecar:?}")))
    };
    let weight: f64 = field(0)?
        .trim()
        .parse()
        .map_err(|e| Error::Validation(format!("bad weight in {sidecar:?}: {e}")))?;
    let height: f64 = field(1)?
        .trim()
        .parse()
        .map_err(|e| Error::Validation(format!("bad height in {sidecar:?}: {e}")))?;
    let gender = Gender::parse(field(2)?.trim())?;
    let mass: f64 = field(3)?
        .trim()
        .parse()
        .map_err(|e| Error::Validation(format!("bad LV mass in {sidecar:?}: {e}")))?;
    let lv_curve = VolumeCurve::new(t.clone(), lv, Chamber::Lv, Some(mass))?;
    let rv_curve = VolumeCurve::new(t, rv, Chamber::Rv, None)?;
    Ok((
        lv_curve,
        rv_curve,
        SubjectAnthropometrics {
            weight_kg: weight,
            height_cm: height,
            gender,
        },
    ))
}

fn cmd_biomarkers(curves: &Path, out: &Path) -> Result<()> {
    let start = Instant::now();
    let mut files: Vec<PathBuf> = std::fs::read_dir(curves)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "csv")
                && !p
                    .to_string_lossy()
                    .ends_with(".anthro.csv")
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Validation(format!("no input curves in {curves:?}")));
    }
    let mut rows = Vec::new();
    let mut rejected = 0usize;
    let mut errored = 0usize;
    let mut digests = BTreeMap::new();
    for f in &files {
        let id = f.file_stem().unwrap().to_string_lossy().to_string();
        digests.insert(id.clone(), sha256_file(f)?);
        let result = read_curve_pair(f)
            .and_then(|(lv, rv, anthro)| extract_biomarkers(&lv, &rv, &anthro));
        match result {
            Ok(biomarkers) => rows.push((id, biomarkers)),
            Err(Error::QcRejected(verdict)) => {
                rejected += 1;
                eprintln!("qc-rejected {id}: {}", verdict.reasons.join(", "));
            }
            Err(e) => {
                errored += 1;
                eprintln!("error {id}: {e}");
            }
        }
    }
    let out_dir = out.parent().unwrap_or(Path::new("."));
    if !out_dir.as_os_str().is_empty() {
        ensure_out_dir(out_dir)?;
    }
    let mut text = String::from("id,");
    text.push_str(&BIOMARKER_NAMES.join(","));
    text.push('\n');
    for (id, b) in &rows {
        text.push_str(id);
        for v in b.as_slice() {
            text.push(',');
            text.push_str(&v.to_string());
        }
        text.push('\n');
    }
    std::fs::write(out, text)?;
    write_manifest(
        out_dir,
        &RunManifest {
            command: "biomarkers".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: None,
            config: serde_json::json!({"curves": curves}),
            input_digests: digests,
            artifacts: vec![out.display().to_string()],
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    )?;
    println!(
        "{} subjects accepted, {} rejected by QC, {} unreadable",
        rows.len(),
        rejected,
        errored
    );
    Ok(())
}

fn cmd_train(
    cohort_path: &Path,
    config_path: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    grid: bool,
) -> Result<()> {
    let start = Instant::now();
    let mut cfg: TrainConfig = match config_path {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let cohort = load_subjects(cohort_path)?;
    let plan = make_splits(&cohort, cfg.seed, cfg.folds)?;
    if grid {
        let cells: Vec<(String, (usize, TrainConfig))> = default_rvae_grid(&cfg)
            .into_iter()
            .enumerate()
            .map(|(i, (label, c))| (label, (i, c)))
            .collect();
        let result = grid_search(&cells, &plan.folds, |(ci, cell), train_idx, val_idx, fold| {
            let fold_seed = cell_fold_seed(cfg.seed, *ci, fold);
            let (model, stats, _) = fit_rvae(&cohort, train_idx, val_idx, cell, fold_seed)?;
            let val: Vec<&Subject> = val_idx.iter().map(|&i| &cohort[i]).collect();
            Ok(rvae::training::evaluate_model(&model, &stats, cell.dummy_encoding, &val)?.rmsd)
        })?;
        let best = &cells[result.best_index];
        eprintln!("grid search selected {}", best.0);
        cfg = best.1 .1.clone();
    }
    let (model, stats, history) = fit_rvae(&cohort, &plan.train, &plan.validation, &cfg, cfg.seed)?;
    ensure_out_dir(out)?;
    let file = model.to_file(
        Some(stats),
        cfg.dummy_encoding,
        Some(cfg.seed),
        Some(cfg.clone()),
    );
    save_model(&out.join("model.json"), &file)?;
    std::fs::write(
        out.join("history.json"),
        serde_json::to_string_pretty(&history)?,
    )?;
    write_manifest(
        out,
        &RunManifest {
            command: "train".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: Some(cfg.seed),
            config: serde_json::to_value(&cfg)?,
            input_digests: digest_inputs(&[("cohort", cohort_path)])?,
            artifacts: vec!["model.json".into(), "history.json".into()],
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    )?;
    println!("trained model written to {}", out.join("model.json").display());
    Ok(())
}

struct LoadedModel {
    model: RVaeModel,
    stats: rvae::training::Standardization,
    encoding: rvae::cohort::DummyEncoding,
    train_seed: u64,
    folds: usize,
}

fn load_trained(path: &Path) -> Result<LoadedModel> {
    let file = load_model(path)?;
    let model = RVaeModel::from_file(&file)?;
    let stats = file.standardization.clone().ok_or_else(|| {
        Error::Validation("model file lacks standardization statistics".into())
    })?;
    let folds = file.training_config.as_ref().map_or(5, |c| c.folds);
    let train_seed = file.train_seed.ok_or_else(|| {
        Error::Validation("model file lacks its training seed; cannot recover splits".into())
    })?;
    Ok(LoadedModel {
        model,
        stats,
        encoding: file.dummy_encoding,
        train_seed,
        folds,
    })
}

fn cmd_evaluate(cohort_path: &Path, model_path: &Path, out: &Path) -> Result<()> {
    let start = Instant::now();
    let loaded = load_trained(model_path)?;
    let cohort = load_subjects(cohort_path)?;
    let plan = make_splits(&cohort, loaded.train_seed, loaded.folds)?;
    let test: Vec<&Subject> = plan.test.iter().map(|&i| &cohort[i]).collect();
    let metrics =
        rvae::training::evaluate_model(&loaded.model, &loaded.stats, loaded.encoding, &test)?;
    ensure_out_dir(out)?;
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)?,
    )?;
    write_manifest(
        out,
        &RunManifest {
            command: "evaluate".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: Some(loaded.train_seed),
            config: serde_json::json!({}),
            input_digests: digest_inputs(&[("cohort", cohort_path), ("model", model_path)])?,
            artifacts: vec!["metrics.json".into()],
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    )?;
    let table = ComparisonTable {
        rows: vec![row("r-vae", &metrics)],
    };
    print!("{}", table.to_text());
    Ok(())
}

fn row(name: &str, m: &EvalMetrics) -> ComparisonRow {
    ComparisonRow {
        model: name.into(),
        rmsd: m.rmsd,
        nrmsd: m.nrmsd,
        r2: m.r2,
    }
}

fn design(cohort: &[Subject], idx: &[usize], encoding: rvae::cohort::DummyEncoding) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut x = Vec::with_capacity(idx.len());
    let mut y = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = &cohort[i];
        let mut r = s.biomarkers.as_slice().to_vec();
        r.push(encoding.value(s.gender));
        x.push(r);
        y.push(s.sbp);
    }
    (x, y)
}

fn cmd_baselines(cohort_path: &Path, model_path: Option<&Path>, out: &Path, seed: u64) -> Result<()> {
    let start = Instant::now();
    let cohort = load_subjects(cohort_path)?;
    let encoding = rvae::cohort::DummyEncoding::default();
    let plan = make_splits(&cohort, seed, 5)?;
    let (x_train, y_train) = design(&cohort, &plan.train, encoding);
    let (x_test, y_test) = design(&cohort, &plan.test, encoding);

    // Lasso works on standardized biomarker columns, lambda chosen by
    // 5-fold CV; the 0/1 dummy column passes through unscaled.
    let std13 = rvae::training::Standardization::fit(
        x_train.iter().map(|r| &r[..13]).collect::<Vec<_>>(),
    )?;
    let apply = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                let mut v = std13.apply(&r[..13]);
                v.push(r[13]);
                v
            })
            .collect()
    };
    let xs_train = apply(&x_train);
    let xs_test = apply(&x_test);

    let lambdas = [0.01, 0.05, 0.1, 0.5, 1.0, 2.0];
    let cells: Vec<(String, f64)> = lambdas
        .iter()
        .map(|l| (format!("lambda={l}"), *l))
        .collect();
    // CV over the training rows only
    let fold_count = 5;
    let folds: Vec<Vec<usize>> = (0..fold_count)
        .map(|f| (f..xs_train.len()).step_by(fold_count).collect())
        .collect();
    let grid = grid_search(&cells, &folds, |&lambda, tr, va, _| {
        let xt: Vec<Vec<f64>> = tr.iter().map(|&i| xs_train[i].clone()).collect();
        let yt: Vec<f64> = tr.iter().map(|&i| y_train[i]).collect();
        let model = lasso_fit(&xt, &yt, lambda, 2000, 1e-7)?;
        let preds: Vec<f64> = va.iter().map(|&i| model.predict(&xs_train[i])).collect();
        let truth: Vec<f64> = va.iter().map(|&i| y_train[i]).collect();
        Ok(evaluate_predictions(&truth, &preds)?.rmsd)
    })?;
    let best_lambda = cells[grid.best_index].1;
    let lasso = lasso_fit(&xs_train, &y_train, best_lambda, 5000, 1e-8)?;
    let lasso_pred: Vec<f64> = xs_test.iter().map(|r| lasso.predict(r)).collect();
    let lasso_metrics = evaluate_predictions(&y_test, &lasso_pred)?;

    let forest = forest_fit(
        &x_train,
        &y_train,
        &ForestParams {
            seed,
            ..ForestParams::default()
        },
    )?;
    let forest_pred: Vec<f64> = x_test.iter().map(|r| forest.predict(r)).collect();
    let forest_metrics = evaluate_predictions(&y_test, &forest_pred)?;

    let mut rows = vec![
        row("lasso", &lasso_metrics),
        row("forest", &forest_metrics),
    ];
    let mut digests = digest_inputs(&[("cohort", cohort_path)])?;
    if let Some(mp) = model_path {
        let loaded = load_trained(mp)?;
        let plan_m = make_splits(&cohort, loaded.train_seed, loaded.folds)?;
        let test: Vec<&Subject> = plan_m.test.iter().map(|&i| &cohort[i]).collect();
        let m = rvae::training::evaluate_model(&loaded.model, &loaded.stats, loaded.encoding, &test)?;
        rows.insert(0, row("r-vae", &m));
        digests.insert("model".to_string(), sha256_file(mp)?);
    }
    let table = ComparisonTable { rows };
    ensure_out_dir(out)?;
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&table)?,
    )?;
    write_manifest(
        out,
        &RunManifest {
            command: "baselines".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: Some(seed),
            config: serde_json::json!({"best_lambda": best_lambda}),
            input_digests: digests,
            artifacts: vec!["metrics.json".into()],
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    )?;
    print!("{}", table.to_text());
    Ok(())
}

fn cmd_traverse(model_path: &Path, out: &Path, seed: u64) -> Result<()> {
    let start = Instant::now();
    let loaded = load_trained(model_path)?;
    let report = traverse(&loaded.model, &loaded.stats, loaded.encoding, seed)?;
    ensure_out_dir(out)?;
    std::fs::write(out.join("traversal.csv"), report.to_csv())?;
    std::fs::write(
        out.join("traversal.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    write_manifest(
        out,
        &RunManifest {
            command: "traverse".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: Some(seed),
            config: serde_json::json!({}),
            input_digests: digest_inputs(&[("model", model_path)])?,
            artifacts: vec!["traversal.csv".into(), "traversal.json".into()],
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    )?;
    println!("traversal written to {}", out.join("traversal.csv").display());
    Ok(())
}

fn cmd_mispredict(cohort_path: &Path, model_path: &Path, out: &Path) -> Result<()> {
    let start = Instant::now();
    let loaded = load_trained(model_path)?;
    let cohort = load_subjects(cohort_path)?;
    let plan = make_splits(&cohort, loaded.train_seed, loaded.folds)?;
    let test: Vec<&Subject> = plan.test.iter().map(|&i| &cohort[i]).collect();
    let preds = predict_subjects(&loaded.model, &loaded.stats, loaded.encoding, &test)?;
    let lists = find_mispredicted(&test, &preds)?;
    let report =
        misprediction_decomposition(&loaded.model, &loaded.stats, loaded.encoding, &lists)?;
    ensure_out_dir(out)?;
    std::fs::write(out.join("mispredict.csv"), report.to_csv())?;
    std::fs::write(
        out.join("mispredict.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    write_manifest(
        out,
        &RunManifest {
            command: "mispredict".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: Some(loaded.train_seed),
            config: serde_json::json!({}),
            input_digests: digest_inputs(&[("cohort", cohort_path), ("model", model_path)])?,
            artifacts: vec!["mispredict.csv".into(), "mispredict.json".into()],
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    )?;
    println!(
        "mispredicted prehypertensive subjects: {} predicted normotensive, {} predicted hypertensive",
        report.predicted_normo.len(),
        report.predicted_hyper.len()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { spec, out, seed } => cmd_generate(spec.as_deref(), &out, seed),
        Command::Biomarkers { curves, out } => cmd_biomarkers(&curves, &out),
        Command::Train {
            cohort,
            config,
            out,
            seed,
            grid,
        } => cmd_train(&cohort, config.as_deref(), &out, seed, grid),
        Command::Evaluate { cohort, model, out } => cmd_evaluate(&cohort, &model, &out),
        Command::Baselines {
            cohort,
            model,
            out,
            seed,
        } => cmd_baselines(&cohort, model.as_deref(), &out, seed),
        Command::Traverse { model, out, seed } => cmd_traverse(&model, &out, seed),
        Command::Mispredict { cohort, model, out } => cmd_mispredict(&cohort, &model, &out),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
