//! The three operator commands. Each reads a `RunConfig` (file, then
//! `--set` overrides, then dedicated flags), works relative to `--out`,
//! and embeds the config echo in everything it writes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use evsev_core::labeling::{label_patch, LabelingConfig, Severity, SeverityLabel};
use evsev_core::metrics::{
    self, accuracy_metric, BootstrapInterval, EvalRecord, EvalReport,
};
use evsev_core::model::{self, ModelParams};
use evsev_core::synth::{scene_split, synthesize_dataset, Example, Patch, Split};

use crate::artifacts;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::AppError;
use crate::ppm;

/// Shared config resolution: file, `--set key=value` pairs, then the
/// `EVSEV_SEED` environment variable, then an explicit `--seed` flag.
pub fn resolve_config(
    config_path: Option<&Path>,
    sets: &[(String, String)],
    seed_flag: Option<u64>,
) -> Result<RunConfig, AppError> {
    let mut cfg = match config_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for (k, v) in sets {
        cfg.set(k, v)?;
    }
    if let Ok(env_seed) = std::env::var("EVSEV_SEED") {
        cfg.seed = env_seed
            .parse()
            .map_err(|_| AppError::usage(format!("EVSEV_SEED {env_seed:?} is not a u64")))?;
    }
    if let Some(s) = seed_flag {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn ensure_dir(path: &Path) -> Result<(), AppError> {
    std::fs::create_dir_all(path)
        .map_err(|e| AppError::usage(format!("cannot create {}: {e}", path.display())))
}

pub struct DatasetArgs {
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub sets: Vec<(String, String)>,
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub synth: bool,
    pub ingest: Option<PathBuf>,
}

pub fn cmd_dataset(args: &DatasetArgs) -> Result<(), AppError> {
    let mut cfg = resolve_config(args.config.as_deref(), &args.sets, args.seed)?;
    if let Some(n) = args.n {
        cfg.n_patches = n;
    }
    if args.synth && args.ingest.is_some() {
        return Err(AppError::usage("--synth and --ingest are mutually exclusive"));
    }
    ensure_dir(&args.out)?;
    let patches_dir = args.out.join("patches");
    ensure_dir(&patches_dir)?;
    let echo = cfg.echo();
    let comments = artifacts::echo_comment_lines(&echo);

    // (relative path, scene, class, pseudo_aod) before split assignment
    let mut rows: Vec<(String, String, usize, f64)> = Vec::new();
    if let Some(ingest_dir) = &args.ingest {
        let mut files: Vec<PathBuf> = std::fs::read_dir(ingest_dir)
            .map_err(|e| AppError::usage(format!("{}: {e}", ingest_dir.display())))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(AppError::usage(format!("no .ppm files in {}", ingest_dir.display())));
        }
        let label_cfg = LabelingConfig::default();
        for file in files {
            let rgb = ppm::read_ppm(&file)?;
            let label = label_patch(&rgb, &label_cfg);
            let stem = file
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| AppError::usage(format!("bad file name {}", file.display())))?
                .to_string();
            let rel = format!("patches/{stem}.ppm");
            ppm::write_ppm(&args.out.join(&rel), &rgb, &comments)?;
            rows.push((rel, stem, label.class.index(), label.pseudo_aod));
        }
    } else {
        let examples = synthesize_dataset(&cfg.dataset_spec())?;
        for (i, e) in examples.iter().enumerate() {
            let rel = format!("patches/{}_{i:05}.ppm", e.scene_id);
            ppm::write_ppm(&args.out.join(&rel), &e.patch.rgb(), &comments)?;
            rows.push((rel, e.scene_id.clone(), e.label.class.index(), e.label.pseudo_aod));
        }
    }

    let pairs: Vec<(String, String)> =
        rows.iter().map(|(p, s, _, _)| (p.clone(), s.clone())).collect();
    let assignment = scene_split(&pairs, cfg.split_fractions, cfg.seed)?;
    for w in &assignment.warnings {
        eprintln!("warning: {w}");
    }
    let manifest_rows: Vec<(String, String, String, usize, f64)> = rows
        .into_iter()
        .map(|(p, s, c, a)| {
            let split = assignment.split_of(&s).expect("every scene assigned");
            (p, s, split.name().to_string(), c, a)
        })
        .collect();
    artifacts::write_manifest(&args.out.join("manifest.csv"), &echo, &manifest_rows)?;
    Ok(())
}

struct ManifestRow {
    path: String,
    scene_id: String,
    split: Split,
    label: SeverityLabel,
}

fn read_manifest(data_dir: &Path) -> Result<Vec<ManifestRow>, AppError> {
    let path = data_dir.join("manifest.csv");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| AppError::usage(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("path,") {
            continue;
        }
        let err = |msg: &str| AppError::usage(format!("{}:{}: {msg}", path.display(), lineno + 1));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(err("expected 5 fields"));
        }
        let split = match fields[2] {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(err(&format!("unknown split {other:?}"))),
        };
        let class_idx: usize = fields[3].parse().map_err(|_| err("bad class index"))?;
        let class = Severity::from_index(class_idx)
            .ok_or_else(|| err(&format!("class index {class_idx} out of range")))?;
        let pseudo_aod: f64 = fields[4].parse().map_err(|_| err("bad pseudo_aod"))?;
        rows.push(ManifestRow {
            path: fields[0].to_string(),
            scene_id: fields[1].to_string(),
            split,
            label: SeverityLabel { pseudo_aod, class },
        });
    }
    if rows.is_empty() {
        return Err(AppError::usage(format!("{}: no data rows", path.display())));
    }
    Ok(rows)
}

fn load_examples(
    data_dir: &Path,
    rows: &[ManifestRow],
    split: Split,
    patch_size: usize,
) -> Result<Vec<Example>, AppError> {
    let mut out = Vec::new();
    for row in rows.iter().filter(|r| r.split == split) {
        let rgb = ppm::read_ppm(&data_dir.join(&row.path))?;
        let patch = Patch::from_rgb(&rgb)?;
        if patch.size != patch_size {
            return Err(AppError::usage(format!(
                "{}: patch size {} does not match configured {patch_size}",
                row.path, patch.size
            )));
        }
        out.push(Example { patch, label: row.label.clone(), scene_id: row.scene_id.clone() });
    }
    if out.is_empty() {
        return Err(AppError::usage(format!("no patches in the {} split", split.name())));
    }
    Ok(out)
}

pub struct TrainArgs {
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub sets: Vec<(String, String)>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub data: Option<PathBuf>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), AppError> {
    let mut cfg = resolve_config(args.config.as_deref(), &args.sets, args.seed)?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    ensure_dir(&args.out)?;
    let data_dir = args.data.clone().unwrap_or_else(|| args.out.clone());
    let rows = read_manifest(&data_dir)?;
    let examples = load_examples(&data_dir, &rows, Split::Train, cfg.patch_size)?;
    let echo = cfg.echo();
    let (model, history) = if cfg.epochs == 0 {
        (ModelParams::init(cfg.model_config(), cfg.seed)?, Vec::new())
    } else {
        model::train(&examples, cfg.model_config())?
    };
    checkpoint::save(&args.out.join("checkpoint.bin"), &model, &echo)?;
    artifacts::write_history(&args.out.join("history.csv"), &echo, &history)?;
    Ok(())
}

pub struct EvalArgs {
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub sets: Vec<(String, String)>,
    pub seed: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: Split,
    pub selective: Option<Vec<f64>>,
    pub degrade: bool,
    pub map: bool,
    pub window: Option<usize>,
    pub stride: Option<usize>,
    pub bootstrap: Option<usize>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), AppError> {
    ensure_dir(&args.out)?;
    let ckpt_path =
        args.checkpoint.clone().unwrap_or_else(|| args.out.join("checkpoint.bin"));
    let (model, ckpt_cfg, _) = checkpoint::load(&ckpt_path)?;
    // checkpoint carries the run config; flags and --set refine eval knobs
    let mut cfg = ckpt_cfg;
    if let Some(p) = &args.config {
        cfg = RunConfig::load(p)?;
    }
    for (k, v) in &args.sets {
        cfg.set(k, v)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if cfg.model_config() != model.config {
        return Err(AppError::usage(
            "eval config is incompatible with the checkpoint's model",
        ));
    }
    let data_dir = args.data.clone().unwrap_or_else(|| args.out.clone());
    let rows = read_manifest(&data_dir)?;
    let examples = load_examples(&data_dir, &rows, args.split, cfg.patch_size)?;
    let echo = cfg.echo();

    // main scoring pass, instrumented for the single-pass guarantee
    let passes_before = model::forward_pass_count();
    let patches: Vec<Patch> = examples.iter().map(|e| e.patch.clone()).collect();
    let outputs = model::predict_batch(&patches, &model).map_err(|e| match e {
        evsev_core::NnError::NonFinite(m) => AppError::Numeric(m),
        other => AppError::from(other),
    })?;
    let forward_passes = model::forward_pass_count() - passes_before;
    let records: Vec<EvalRecord> = outputs
        .iter()
        .zip(&examples)
        .map(|(o, e)| EvalRecord::new(e.label.class, o))
        .collect();

    let summary = metrics::confusion_and_per_class(&records)?;
    let (ece, ece_bins) = metrics::expected_calibration_error(&records, cfg.n_bins)?;
    let vacuity_bins = metrics::vacuity_binned_accuracy(&records, cfg.n_bins);
    let errors = metrics::error_indicator(&records);
    let vacuities: Vec<f64> = records.iter().map(|r| r.vacuity).collect();
    let dissonances: Vec<f64> = records.iter().map(|r| r.dissonance).collect();
    let spearman_vacuity_error = metrics::spearman_rho(&vacuities, &errors).ok();
    let spearman_dissonance_error = metrics::spearman_rho(&dissonances, &errors).ok();

    let selective = match &args.selective {
        Some(fractions) => Some(metrics::selective_prediction_curve(&records, fractions)?),
        None => None,
    };
    let mut bootstrap = Vec::new();
    if let Some(iters) = args.bootstrap {
        let (low, high) = metrics::bootstrap_ci(
            &records,
            &accuracy_metric,
            iters,
            cfg.bootstrap_confidence,
            cfg.seed,
        )?;
        bootstrap.push(BootstrapInterval {
            metric: "accuracy".into(),
            low,
            high,
            iterations: iters,
            confidence: cfg.bootstrap_confidence,
        });
    }
    let degradation = if args.degrade {
        Some(metrics::degradation_report(&examples, &model, cfg.seed)?)
    } else {
        None
    };

    let mut tier_counts: BTreeMap<String, usize> = BTreeMap::new();
    for t in ["automatic", "review", "expert"] {
        tier_counts.insert(t.to_string(), 0);
    }
    for r in &records {
        *tier_counts.get_mut(r.tier()).expect("known tier") += 1;
    }

    let report = EvalReport {
        n_records: records.len(),
        summary,
        ece,
        ece_bins,
        vacuity_bins,
        spearman_vacuity_error,
        spearman_dissonance_error,
        selective,
        bootstrap,
        degradation,
        tier_counts,
        forward_passes,
        config_echo: echo.clone(),
    };

    artifacts::write_report_json(&args.out.join("report.json"), &report)?;
    artifacts::write_records(&args.out.join("records.csv"), &echo, &records)?;
    artifacts::write_csv(
        &args.out.join("ece_bins.csv"),
        &echo,
        "bin_lo,bin_hi,count,accuracy,confidence",
        report.ece_bins.iter().map(|b| {
            format!("{},{},{},{},{}", b.lo, b.hi, b.count, b.accuracy, b.confidence)
        }),
    )?;
    artifacts::write_csv(
        &args.out.join("vacuity_bins.csv"),
        &echo,
        "bin_lo,bin_hi,count,accuracy,mean_vacuity",
        report.vacuity_bins.iter().map(|b| {
            format!("{},{},{},{},{}", b.lo, b.hi, b.count, b.accuracy, b.confidence)
        }),
    )?;
    if let Some(curve) = &report.selective {
        artifacts::write_csv(
            &args.out.join("selective.csv"),
            &echo,
            "fraction,accuracy,mean_vacuity",
            curve.iter().map(|p| format!("{},{},{}", p.fraction, p.accuracy, p.mean_vacuity)),
        )?;
    }
    if let Some(rows) = &report.degradation {
        artifacts::write_csv(
            &args.out.join("degradation.csv"),
            &echo,
            "condition,accuracy,mean_vacuity",
            rows.iter().map(|r| format!("{},{},{}", r.condition, r.accuracy, r.mean_vacuity)),
        )?;
    }
    if args.map {
        let window = args.window.unwrap_or(cfg.patch_size);
        let stride = args.stride.unwrap_or_else(|| (window / 2).max(1));
        let map = metrics::uncertainty_map(&examples[0].patch, &model, window, stride)?;
        artifacts::write_uncertainty_map(&args.out, &echo, &map)?;
        let (_, _, spatial) = model::forward_with_attention(&examples[0].patch, &model)?;
        let side = spatial.shape()[1];
        artifacts::write_attention_map(
            &args.out.join("attention_spatial.pgm"),
            &echo,
            side,
            spatial.data(),
        )?;
    }
    Ok(())
}
