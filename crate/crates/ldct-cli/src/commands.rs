//! Implementations of the five workflows: dataset synthesis, training,
//! evaluation, the component ablation lattice, and diagnostic reports.

use crate::args::{
    AblateArgs, DomainArg, EvalArgs, GenDataArgs, Profile, ReportArgs, SplitArg, TrainArgs,
};
use crate::plot::{line_chart, scatter_chart, Series};
use anyhow::{bail, Context};
use ldct::data::{
    build_dataset, flat_region_mask, flat_region_residuals, Dataset, DatasetConfig, DomainKind,
    Manifest, SlicePair, Split, SplitCounts,
};
use ldct::metrics::{write_metric_report, MetricAggregate, MetricScores};
use ldct::model::ReconModel;
use ldct::report::{
    loss_curves_csv, parse_train_log, residual_histogram, scatter_csv, scatter_rows, Histogram,
    ScatterRow,
};
use ldct::rng::{derive, fnv1a64};
use ldct::training::{
    evaluate_slices, fit, load_checkpoint, predict_mean, restore_model, resume, Checkpoint,
    ExperimentConfig, BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG_NAME,
};
use std::path::{Path, PathBuf};

/// Tolerance for "flat" neighborhoods when collecting residual statistics:
/// phantom plateaus are exactly constant after windowing, so a tight bound
/// keeps edges out without losing area.
const FLAT_TOL: f32 = 1e-4;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn dataset_config_base(
    config: Option<&Path>,
    profile: Option<Profile>,
) -> anyhow::Result<DatasetConfig> {
    Ok(match (config, profile) {
        (Some(path), _) => read_json(path)?,
        (None, _) => DatasetConfig::smoke(),
    })
}

fn experiment_base(
    config: Option<&Path>,
    profile: Option<Profile>,
) -> anyhow::Result<ExperimentConfig> {
    Ok(match (config, profile) {
        (Some(path), _) => read_json(path)?,
        (None, Some(Profile::Smoke)) => ExperimentConfig::smoke(),
        (None, Some(Profile::Paper)) | (None, None) => ExperimentConfig::default(),
    })
}

fn dataset_config_from_manifest(m: &Manifest) -> DatasetConfig {
    DatasetConfig {
        slice_size: m.slice_size,
        seed: m.seed,
        source: m.source.spec.clone(),
        target: m.target.spec.clone(),
        source_counts: SplitCounts {
            train: m.source.train.len(),
            val: m.source.val.len(),
            test: m.source.test.len(),
        },
        target_counts: SplitCounts {
            train: m.target.train.len(),
            val: m.target.val.len(),
            test: m.target.test.len(),
        },
    }
}

/// Creates `root/<name>-<timestamp>`, suffixing a counter on collision.
fn claim_run_dir(root: &Path, name: &str) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(root)
        .with_context(|| format!("creating run root {}", root.display()))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    for attempt in 0..100u32 {
        let dir = if attempt == 0 {
            root.join(format!("{name}-{stamp}"))
        } else {
            root.join(format!("{name}-{stamp}-{attempt}"))
        };
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
        }
    }
    bail!("could not find a free run directory under {}", root.display());
}

pub fn gen_data(args: &GenDataArgs) -> anyhow::Result<()> {
    let mut config = dataset_config_base(args.config.as_deref(), args.profile)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(size) = args.slice_size {
        config.slice_size = size;
    }
    let manifest = build_dataset(&config, &args.out)
        .with_context(|| format!("building dataset under {}", args.out.display()))?;
    let manifest_bytes = std::fs::read(args.out.join("manifest.json"))
        .with_context(|| "reading back manifest for fingerprint")?;
    println!("dataset written to {}", args.out.display());
    for (role, dm) in [("source", &manifest.source), ("target", &manifest.target)] {
        println!(
            "  {role} `{}` ({:?}): train {} / val {} / test {}",
            dm.spec.name,
            dm.spec.phantom_style,
            dm.train.len(),
            dm.val.len(),
            dm.test.len()
        );
    }
    println!("  slice size {}  seed {}", manifest.slice_size, manifest.seed);
    println!("manifest hash: {:016x}", fnv1a64(&manifest_bytes));
    Ok(())
}

fn apply_train_overrides(cfg: &mut ExperimentConfig, args: &TrainArgs) {
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.channels {
        cfg.channels = v;
    }
    if let Some(v) = args.mc_samples {
        cfg.mc_samples = v;
    }
    if let Some(v) = args.eval_mc_samples {
        cfg.eval_mc_samples = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.patch_size {
        cfg.patch_size = v;
    }
    if let Some(v) = args.patches_per_slice {
        cfg.patches_per_slice = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.beta1 {
        cfg.beta1_bnua = v;
    }
    if let Some(v) = args.beta2 {
        cfg.beta2_rda = v;
    }
    if let Some(v) = args.kl_scale {
        cfg.kl_scale = Some(v);
    }
    if args.freeze_sigma {
        cfg.freeze_sigma = true;
    }
    if let Some(v) = args.moped_pretrain_epochs {
        cfg.moped_pretrain_epochs = v;
    }
    if let Some(v) = args.early_stop_patience {
        cfg.early_stop_patience = v;
    }
    if let Some(v) = args.disc_base_channels {
        cfg.disc_base_channels = v;
    }
}

pub fn train(args: &TrainArgs) -> anyhow::Result<()> {
    // Load the dataset before touching the filesystem so a missing dataset
    // leaves no partial run directory or checkpoint behind.
    let dataset = Dataset::load(&args.data)
        .with_context(|| format!("loading dataset from {}", args.data.display()))?;

    let run_dir = match &args.run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("creating run directory {}", dir.display()))?;
            dir.clone()
        }
        None => claim_run_dir(&args.out, args.run_name.as_deref().unwrap_or("run"))?,
    };
    println!("run dir: {}", run_dir.display());

    let outcome = if let Some(ckpt) = &args.resume {
        println!("resuming from {}", ckpt.display());
        resume(ckpt, &dataset, &run_dir, args.epochs)
            .with_context(|| format!("resuming training from {}", ckpt.display()))?
    } else {
        let mut config = experiment_base(args.config.as_deref(), args.profile)?;
        apply_train_overrides(&mut config, args);
        config.data = dataset_config_from_manifest(dataset.manifest());
        println!(
            "merged config:\n{}",
            serde_json::to_string_pretty(&config).context("serializing merged config")?
        );
        fit(&config, &dataset, &run_dir).context("training run failed")?
    };

    println!(
        "trained {} epoch(s){}; best epoch {} (val loss {:.6})",
        outcome.epochs_run,
        if outcome.stopped_early {
            " — stopped early"
        } else {
            ""
        },
        outcome.best_epoch,
        outcome.best_val_loss
    );
    println!("log: {}", run_dir.join(TRAIN_LOG_NAME).display());
    println!("last checkpoint: {}", outcome.last_checkpoint.display());
    if outcome.best_checkpoint.exists() {
        println!("best checkpoint: {}", outcome.best_checkpoint.display());
    }
    Ok(())
}

fn load_model(ckpt: &Checkpoint) -> anyhow::Result<ReconModel<f32>> {
    let cfg = &ckpt.config;
    let mut model = ReconModel::<f32>::new(cfg.channels, cfg.moped_delta as f32, cfg.seed)
        .context("rebuilding model architecture")?;
    model.freeze_sigma = cfg.freeze_sigma;
    restore_model(&mut model, &ckpt.model).context("restoring model weights")?;
    Ok(model)
}

fn eval_pairs(
    model: &ReconModel<f32>,
    pairs: &[SlicePair],
    mc: usize,
    seed: u64,
) -> anyhow::Result<Vec<MetricScores>> {
    let mut rng = derive(seed, "cli-eval", 0);
    let evals = evaluate_slices(model, pairs, mc, &mut rng).context("evaluating slices")?;
    Ok(evals.into_iter().map(|e| e.scores).collect())
}

fn print_aggregate(agg: &MetricAggregate) {
    println!(
        "  n {}  psnr {:.3} ± {:.3}  ssim {:.4} ± {:.4}  gmsd {:.4} ± {:.4}  dss {:.4} ± {:.4}",
        agg.n,
        agg.psnr.mean,
        agg.psnr.std,
        agg.ssim.mean,
        agg.ssim.std,
        agg.gmsd.mean,
        agg.gmsd.std,
        agg.dss.mean,
        agg.dss.std
    );
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let dataset = Dataset::load(&args.data)
        .with_context(|| format!("loading dataset from {}", args.data.display()))?;
    let model = load_model(&ckpt)?;
    let kind = args.domain.kind();
    let split = args.split.split();
    let pairs = dataset
        .load_pairs(kind, split)
        .with_context(|| format!("loading {:?}/{:?} pairs", kind, split))?;
    let mc = args.mc.unwrap_or(ckpt.config.eval_mc_samples);
    let seed = args.seed.unwrap_or(ckpt.config.seed);
    let scores = eval_pairs(&model, &pairs, mc, seed)?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;
    let label = format!("{}_{}", args.domain.name(), args.split.name());
    let csv_path = args.out.join(format!("metrics_{label}.csv"));
    let json_path = args.out.join(format!("metrics_{label}.json"));
    let agg = write_metric_report(&csv_path, &json_path, &scores)
        .context("writing metric report")?;
    println!(
        "evaluated {} slices of {}/{} with M={mc} (checkpoint epoch {})",
        scores.len(),
        args.domain.name(),
        args.split.name(),
        ckpt.epoch
    );
    print_aggregate(&agg);
    println!("per-image CSV: {}", csv_path.display());
    println!("aggregate JSON: {}", json_path.display());
    Ok(())
}

/// The five-setting component lattice: which pieces of the objective are
/// active in each ablation run.
pub const ABLATION_LATTICE: [(&str, bool, bool, bool); 5] = [
    // (label, freeze_sigma, use_bnua, use_rda)
    ("deterministic", true, false, false),
    ("bayesian", false, false, false),
    ("bnua", false, true, false),
    ("rda", false, false, true),
    ("full", false, true, true),
];

pub fn ablation_config(
    base: &ExperimentConfig,
    freeze_sigma: bool,
    use_bnua: bool,
    use_rda: bool,
) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.freeze_sigma = freeze_sigma;
    cfg.beta1_bnua = if use_bnua { base.beta1_bnua } else { 0.0 };
    cfg.beta2_rda = if use_rda { base.beta2_rda } else { 0.0 };
    cfg
}

pub fn ablate(args: &AblateArgs) -> anyhow::Result<()> {
    let dataset = Dataset::load(&args.data)
        .with_context(|| format!("loading dataset from {}", args.data.display()))?;
    let mut base = experiment_base(
        args.config.as_deref(),
        Some(args.profile.unwrap_or(Profile::Smoke)),
    )?;
    if let Some(seed) = args.seed {
        base.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        base.epochs = epochs;
    }
    base.data = dataset_config_from_manifest(dataset.manifest());
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;

    let mut table = String::from(
        "label,freeze_sigma,beta1,beta2,psnr_mean,psnr_std,ssim_mean,ssim_std,gmsd_mean,gmsd_std,dss_mean,dss_std\n",
    );
    let test_pairs = dataset.load_pairs(DomainKind::Target, Split::Test)?;
    println!("running {} ablation settings (seed {})", ABLATION_LATTICE.len(), base.seed);
    for (label, freeze, use_bnua, use_rda) in ABLATION_LATTICE {
        let cfg = ablation_config(&base, freeze, use_bnua, use_rda);
        let run_dir = args.out.join(label);
        std::fs::create_dir_all(&run_dir)
            .with_context(|| format!("creating {}", run_dir.display()))?;
        println!(
            "[{label}] freeze_sigma={} beta1={} beta2={}",
            cfg.freeze_sigma, cfg.beta1_bnua, cfg.beta2_rda
        );
        let outcome = fit(&cfg, &dataset, &run_dir)
            .with_context(|| format!("ablation run `{label}` failed"))?;
        let ckpt_path = if outcome.best_checkpoint.exists() {
            outcome.best_checkpoint.clone()
        } else {
            outcome.last_checkpoint.clone()
        };
        let ckpt = load_checkpoint(&ckpt_path)?;
        let model = load_model(&ckpt)?;
        let scores = eval_pairs(&model, &test_pairs, cfg.eval_mc_samples, cfg.seed)?;
        let agg = ldct::metrics::aggregate(&scores);
        print_aggregate(&agg);
        table.push_str(&format!(
            "{label},{},{},{},{},{},{},{},{},{},{},{}\n",
            cfg.freeze_sigma,
            cfg.beta1_bnua,
            cfg.beta2_rda,
            agg.psnr.mean,
            agg.psnr.std,
            agg.ssim.mean,
            agg.ssim.std,
            agg.gmsd.mean,
            agg.gmsd.std,
            agg.dss.mean,
            agg.dss.std
        ));
    }
    let table_path = args.out.join("ablation_table.csv");
    std::fs::write(&table_path, &table)
        .with_context(|| format!("writing {}", table_path.display()))?;
    println!("comparison table: {}", table_path.display());
    Ok(())
}

fn run_label(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn pick_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    let best = run_dir.join(BEST_CHECKPOINT);
    if best.exists() {
        return Some(best);
    }
    let last = run_dir.join(LAST_CHECKPOINT);
    last.exists().then_some(last)
}

/// Model residuals (input minus prediction) over flat reference regions, and
/// the injected noise (input minus reference) over the same regions.
fn residual_samples(
    model: &ReconModel<f32>,
    pairs: &[SlicePair],
    mc: usize,
    seed: u64,
    salt: u64,
) -> anyhow::Result<(Vec<f32>, Vec<f32>)> {
    let mut rng = derive(seed, "report-residual", salt);
    let mut model_res = Vec::new();
    let mut noise_res = Vec::new();
    for pair in pairs {
        let (pred, _) = predict_mean(model, &pair.ldct, mc, &mut rng)?;
        let mask = flat_region_mask(&pair.ndct, FLAT_TOL);
        for ((idx, &keep), &p) in mask.indexed_iter().zip(pred.iter()) {
            if keep {
                model_res.push(pair.ldct[idx] - p);
            }
        }
        noise_res.extend(flat_region_residuals(pair, FLAT_TOL));
    }
    Ok((model_res, noise_res))
}

fn histogram_pair_csv(model: &Histogram, noise: &Histogram) -> anyhow::Result<String> {
    let mut out = String::from("bin_center,model_density,noise_density\n");
    for ((c, m), n) in model
        .centers()
        .into_iter()
        .zip(model.densities()?)
        .zip(noise.densities()?)
    {
        out.push_str(&format!("{c},{m},{n}\n"));
    }
    Ok(out)
}

pub fn report(args: &ReportArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output directory {}", args.out.display()))?;

    let mut all_scatter: Vec<ScatterRow> = Vec::new();
    for run in &args.run {
        let label = run_label(run);
        let log_path = run.join(TRAIN_LOG_NAME);
        let rows = parse_train_log(&log_path)
            .with_context(|| format!("parsing training log {}", log_path.display()))?;

        let csv_path = args.out.join(format!("loss_curves_{label}.csv"));
        std::fs::write(&csv_path, loss_curves_csv(&rows))
            .with_context(|| format!("writing {}", csv_path.display()))?;
        let series: Vec<Series> = [
            ("l1", rows.iter().map(|r| (r.epoch as f64, r.l1)).collect()),
            ("pl", rows.iter().map(|r| (r.epoch as f64, r.pl)).collect()),
            ("kl_enc", rows.iter().map(|r| (r.epoch as f64, r.kl_enc)).collect()),
            ("kl_dec", rows.iter().map(|r| (r.epoch as f64, r.kl_dec)).collect()),
            ("bnua", rows.iter().map(|r| (r.epoch as f64, r.bnua)).collect()),
            ("rda", rows.iter().map(|r| (r.epoch as f64, r.rda)).collect()),
        ]
        .into_iter()
        .map(|(label, points)| Series {
            label: label.to_string(),
            points,
        })
        .collect();
        let png_path = args.out.join(format!("loss_curves_{label}.png"));
        line_chart(&png_path, &format!("loss components — {label}"), &series)?;
        println!("loss curves for `{label}`: {} / {}", csv_path.display(), png_path.display());

        all_scatter.extend(scatter_rows(&label, &rows));
    }

    let scatter_path = args.out.join("scatter.csv");
    std::fs::write(&scatter_path, scatter_csv(&all_scatter))
        .with_context(|| format!("writing {}", scatter_path.display()))?;
    let by_run: Vec<Series> = args
        .run
        .iter()
        .map(|run| {
            let label = run_label(run);
            Series {
                points: all_scatter
                    .iter()
                    .filter(|r| r.run == label)
                    .map(|r| (r.discrepancy, r.psnr))
                    .collect(),
                label,
            }
        })
        .collect();
    let scatter_png = args.out.join("scatter.png");
    scatter_chart(
        &scatter_png,
        "uncertainty discrepancy vs validation PSNR",
        &by_run,
    )?;
    println!(
        "scatter ({} checkpoints): {} / {}",
        all_scatter.len(),
        scatter_path.display(),
        scatter_png.display()
    );

    if let Some(data_dir) = &args.data {
        let checkpoint = match &args.checkpoint {
            Some(p) => p.clone(),
            None => args
                .run
                .iter()
                .find_map(|run| pick_checkpoint(run))
                .context("no checkpoint found in any run directory for residual PDFs")?,
        };
        let ckpt = load_checkpoint(&checkpoint)
            .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
        let model = load_model(&ckpt)?;
        let dataset = Dataset::load(data_dir)
            .with_context(|| format!("loading dataset from {}", data_dir.display()))?;
        for (salt, kind, name) in [(0, DomainKind::Source, "source"), (1, DomainKind::Target, "target")] {
            let pairs = dataset.load_pairs(kind, Split::Test)?;
            let (model_res, noise_res) = residual_samples(
                &model,
                &pairs,
                ckpt.config.eval_mc_samples,
                ckpt.config.seed,
                salt,
            )?;
            let hm = residual_histogram(&model_res)?;
            let hn = residual_histogram(&noise_res)?;
            let csv_path = args.out.join(format!("residual_pdf_{name}.csv"));
            std::fs::write(&csv_path, histogram_pair_csv(&hm, &hn)?)
                .with_context(|| format!("writing {}", csv_path.display()))?;
            let series = [
                Series {
                    label: "model residual".into(),
                    points: hm.centers().into_iter().zip(hm.densities()?).collect(),
                },
                Series {
                    label: "injected noise".into(),
                    points: hn.centers().into_iter().zip(hn.densities()?).collect(),
                },
            ];
            let png_path = args.out.join(format!("residual_pdf_{name}.png"));
            line_chart(
                &png_path,
                &format!("residual PDF — {name} domain"),
                &series,
            )?;
            println!(
                "residual PDF for {name}: {} / {}",
                csv_path.display(),
                png_path.display()
            );
        }
    }
    Ok(())
}

impl DomainArg {
    pub fn kind(self) -> DomainKind {
        match self {
            DomainArg::Source => DomainKind::Source,
            DomainArg::Target => DomainKind::Target,
        }
    }
    pub fn name(self) -> &'static str {
        match self {
            DomainArg::Source => "source",
            DomainArg::Target => "target",
        }
    }
}

impl SplitArg {
    pub fn split(self) -> Split {
        match self {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
    pub fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
        }
    }
}
