//! `seisaug` — command-line front end for the seismic-augmentation pipeline.
//!
//! Stage commands (`gen-data`, `simulate`, `train-gen`, `augment`,
//! `train-inv`, `test-inv`, `eval`) operate on directories of artifacts and
//! chain through provenance sidecars, so each command needs only its direct
//! inputs. Umbrella commands (`run`, `sweep-size`, `grid-search`) drive the
//! cached end-to-end experiment from a profile plus an optional config file.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use seisaug_core::config::ExperimentConfig;
use seisaug_core::datagen::{
    generate_baseline, generate_dataset, load_dataset, mass_histogram, save_dataset,
    DatagenConfig, LeakageScenario,
};
use seisaug_core::evaluate::{
    boxplot_stats, kz_spectrum, metrics_per_sample, per_year_loss_curve, project_2d,
    write_boxplot_csv, write_kz_csv, write_metrics_csv, write_per_year_csv,
    write_projection_csv, ProjectionMethod, SsimConfig,
};
use seisaug_core::featureext::{FeatureExtractor, LayerSelection};
use seisaug_core::genmodels::{
    generate_augmentation, load_augmentation, load_generator, save_augmentation,
    save_generator, train_generative, AlphaMode, AugmentConfig, GenHyper,
    GeneratorCheckpoint, ModelKind, Normalization, TrainedGenerator,
};
use seisaug_core::inversion::{
    load_inversion, load_pairs, make_synthetic_pairs, save_inversion, test_inversion,
    train_inversion, AugTag, InvHyper, TestSubset, TrainingPair,
};
use seisaug_core::io::{fmt_f64, write_csv, Meta};
use seisaug_core::pipeline::{grid_search, run_experiment, sweep_size, GridSpec};
use seisaug_core::plot;
use seisaug_core::wavesim::{forward_dataset, SimConfig};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "seisaug",
    version,
    about = "Synthetic CO2-leak velocity models, wave simulation, generative \
             augmentation and seismic inversion"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset of time-lapse leakage scenarios.
    GenData(GenDataArgs),
    /// Run forward acoustic modeling over a dataset.
    Simulate(SimulateArgs),
    /// Train a generative model on a dataset.
    TrainGen(TrainGenArgs),
    /// Sample synthetic velocity maps from a generator checkpoint.
    Augment(AugmentArgs),
    /// Train an inversion network on simulated gathers.
    TrainInv(TrainInvArgs),
    /// Evaluate an inversion checkpoint on a test set.
    TestInv(TestInvArgs),
    /// Produce the full diagnostic report for one or two checkpoints.
    Eval(EvalArgs),
    /// Run the end-to-end baseline-vs-augmented experiment.
    Run(RunArgs),
    /// Sweep the augmentation budget over a list of sizes.
    SweepSize(SweepSizeArgs),
    /// Grid-search a generator hyper-parameter.
    GridSearch(GridSearchArgs),
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Simulate(a) => simulate(a),
        Cmd::TrainGen(a) => train_gen(a),
        Cmd::Augment(a) => augment(a),
        Cmd::TrainInv(a) => train_inv(a),
        Cmd::TestInv(a) => test_inv(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Run(a) => run(a),
        Cmd::SweepSize(a) => sweep(a),
        Cmd::GridSearch(a) => grid(a),
    }
}

// ---------------------------------------------------------------------------
// helpers
// ---------------------------------------------------------------------------

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| anyhow!("bad integer {t:?} in list: {e}"))
        })
        .collect()
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| anyhow!("bad number {t:?} in list: {e}"))
        })
        .collect()
}

/// Absolute form of a path for provenance sidecars, best effort.
fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn load_profile(profile: &str, config: Option<&Path>) -> Result<ExperimentConfig> {
    let base = ExperimentConfig::profile(profile)?;
    match config {
        Some(path) => Ok(ExperimentConfig::from_file(path, base)?),
        None => Ok(base),
    }
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GenDataArgs {
    /// Number of leakage scenarios.
    #[arg(long)]
    scenarios: usize,
    /// Grid size as H W.
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
    grid: Vec<usize>,
    /// Base RNG seed.
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Peak fractional velocity reduction inside the plume.
    #[arg(long)]
    max_reduction: Option<f64>,
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = DatagenConfig {
        rows: a.grid[0],
        cols: a.grid[1],
        ..DatagenConfig::default()
    };
    if let Some(r) = a.max_reduction {
        cfg.max_reduction = r;
    }
    let scenarios = generate_dataset(a.seed, a.scenarios, &cfg)?;
    save_dataset(&a.out, &scenarios)?;

    // The no-leak baseline map is the reference for time-lapse analyses.
    let baseline = generate_baseline(&cfg)?;
    let flat: Vec<f32> = baseline.grid.iter().map(|&v| v as f32).collect();
    seisaug_core::io::write_f32(&a.out.join("baseline.f32"), &flat)?;
    let mut meta = Meta::new();
    meta.push("rows", cfg.rows);
    meta.push("cols", cfg.cols);
    meta.save(&a.out.join("baseline.meta"))?;

    let hist = mass_histogram(&scenarios, 24)?;
    hist.write_csv(&a.out.join("mass_hist.csv"))?;
    let maps: usize = scenarios.iter().map(|s| s.maps.len()).sum();
    println!(
        "wrote {} scenarios ({maps} maps, {}x{} cells) to {}",
        scenarios.len(),
        cfg.rows,
        cfg.cols,
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct SimulateArgs {
    /// Dataset directory from gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for gathers.
    #[arg(long)]
    out: PathBuf,
    /// Cell size in meters.
    #[arg(long, default_value_t = 10.0)]
    dx: f64,
    /// Time step in seconds.
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// Number of time samples.
    #[arg(long, default_value_t = 512)]
    nt: usize,
    /// Ricker wavelet peak frequency in Hz.
    #[arg(long, default_value_t = 15.0)]
    freq: f64,
    /// Number of shots spread along the surface.
    #[arg(long, default_value_t = 3)]
    shots: usize,
    /// Absorbing boundary width in cells.
    #[arg(long, default_value_t = 20)]
    boundary: usize,
}

/// Build the simulation config a gather directory was (or will be) produced
/// with.
fn sim_config_for(cols: usize, a: &SimulateArgs) -> SimConfig {
    let mut cfg = SimConfig::surface_acquisition(cols, a.shots);
    cfg.dx = a.dx;
    cfg.dt = a.dt;
    cfg.nt = a.nt;
    cfg.peak_frequency = a.freq;
    cfg.boundary_width = a.boundary;
    cfg
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let scenarios = load_dataset(&a.data)
        .with_context(|| format!("loading dataset from {}", a.data.display()))?;
    let cols = scenarios[0].maps[0].grid.ncols();
    let cfg = sim_config_for(cols, &a);
    let n = forward_dataset(&scenarios, &cfg, &a.out)?;

    // Provenance sidecar: lets downstream commands find the dataset and
    // reproduce the acquisition for synthetic samples.
    let mut meta = Meta::new();
    meta.push("data", absolute(&a.data).display());
    meta.push("shots", a.shots);
    meta.push("nt", a.nt);
    meta.push_f64("dt", a.dt);
    meta.push_f64("dx", a.dx);
    meta.push_f64("freq", a.freq);
    meta.push("boundary", a.boundary);
    meta.save(&a.out.join("source.meta"))?;
    println!("wrote {n} gathers to {}", a.out.display());
    Ok(())
}

/// Read a gather directory's provenance sidecar back into a `SimConfig`
/// plus the dataset directory it was simulated from.
fn read_source_meta(gather_dir: &Path, cols: usize) -> Result<(PathBuf, SimConfig)> {
    let path = gather_dir.join("source.meta");
    let meta = Meta::load(&path).with_context(|| {
        format!(
            "{} has no source.meta; was it produced by `seisaug simulate`?",
            gather_dir.display()
        )
    })?;
    let data = PathBuf::from(meta.get_str("data", &path)?);
    let mut cfg = SimConfig::surface_acquisition(cols, meta.get_usize("shots", &path)?);
    cfg.nt = meta.get_usize("nt", &path)?;
    cfg.dt = meta.get_f64("dt", &path)?;
    cfg.dx = meta.get_f64("dx", &path)?;
    cfg.peak_frequency = meta.get_f64("freq", &path)?;
    cfg.boundary_width = meta.get_usize("boundary", &path)?;
    Ok((data, cfg))
}

// ---------------------------------------------------------------------------
// train-gen
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainGenArgs {
    /// Model family: ae, vae, vae-percep, vae-reg or linear.
    #[arg(long)]
    model: String,
    /// Dataset directory from gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Temporal-regularization weight (vae-reg).
    #[arg(long, default_value_t = 1e2)]
    gamma: f64,
    /// Perception-loss layer selection: A, B, C or D (vae-percep).
    #[arg(long, default_value = "D")]
    layers: String,
    #[arg(long, default_value_t = 64)]
    latent: usize,
    /// Encoder channel widths, comma separated.
    #[arg(long, default_value = "16,32,64,128")]
    widths: String,
    #[arg(long)]
    seed: u64,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
}

fn train_gen(a: TrainGenArgs) -> Result<()> {
    let kind = ModelKind::parse(&a.model)?;
    let scenarios = load_dataset(&a.data)
        .with_context(|| format!("loading dataset from {}", a.data.display()))?;
    let data_echo = absolute(&a.data).display().to_string();
    let rows = scenarios[0].maps[0].grid.nrows();
    let cols = scenarios[0].maps[0].grid.ncols();

    let (mut gen, ckpt) = if kind == ModelKind::Linear {
        // The linear baseline interpolates in map space; its checkpoint
        // carries only the normalization bounds.
        let norm = Normalization::fit(&scenarios)?;
        let gen = TrainedGenerator {
            kind,
            net: None,
            norm,
            rows,
            cols,
        };
        let ckpt = GeneratorCheckpoint {
            kind,
            rows,
            cols,
            latent: 0,
            widths: Vec::new(),
            bounds: (norm.lo, norm.hi),
            epochs_trained: 0,
            history: Vec::new(),
            echo: vec![("data_dir".into(), data_echo.clone())],
        };
        (gen, ckpt)
    } else {
        let hyper = GenHyper {
            epochs: a.epochs,
            batch: a.batch,
            lr: a.lr,
            gamma: a.gamma,
            layers: LayerSelection::parse(&a.layers)?,
            latent: a.latent,
            widths: parse_usize_list(&a.widths)?,
            seed: a.seed,
        };
        let mut extractor = (kind == ModelKind::VaePercep).then(FeatureExtractor::<f32>::fixed);
        train_generative(kind, &scenarios, &hyper, extractor.as_mut(), Some(&data_echo))?
    };
    save_generator(&a.out, &mut gen, &ckpt)?;
    match ckpt.history.last() {
        Some(last) => println!(
            "trained {} for {} epochs (final loss {:.6}); checkpoint at {}",
            kind.as_str(),
            ckpt.epochs_trained,
            last.total,
            a.out.display()
        ),
        None => println!(
            "prepared {} checkpoint at {}",
            kind.as_str(),
            a.out.display()
        ),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// augment
// ---------------------------------------------------------------------------

#[derive(Args)]
struct AugmentArgs {
    /// Generator checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of synthetic maps to sample.
    #[arg(long)]
    count: usize,
    /// Interpolation mode: endpoints or adjacent.
    #[arg(long, default_value = "adjacent")]
    alpha_mode: String,
    /// Output directory for synthetic samples.
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory (defaults to the one recorded in the checkpoint).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Points on the alpha grid.
    #[arg(long, default_value_t = 21)]
    grid_points: usize,
    /// Alpha range lower bound (endpoints mode).
    #[arg(long, default_value_t = 0.6)]
    alpha_lo: f64,
    /// Alpha range upper bound (endpoints mode).
    #[arg(long, default_value_t = 1.0)]
    alpha_hi: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn augment(a: AugmentArgs) -> Result<()> {
    let (mut gen, ckpt) = load_generator(&a.ckpt)?;
    let data = match &a.data {
        Some(d) => d.clone(),
        None => ckpt
            .echo
            .iter()
            .find(|(k, _)| k == "data_dir")
            .map(|(_, v)| PathBuf::from(v))
            .ok_or_else(|| {
                anyhow!(
                    "checkpoint {} records no dataset directory; pass --data",
                    a.ckpt.display()
                )
            })?,
    };
    let scenarios = load_dataset(&data)
        .with_context(|| format!("loading dataset from {}", data.display()))?;
    let cfg = AugmentConfig {
        count: a.count,
        alpha_mode: AlphaMode::parse(&a.alpha_mode)?,
        grid_points: a.grid_points,
        endpoint_alpha: (a.alpha_lo, a.alpha_hi),
        seed: a.seed,
    };
    let samples = generate_augmentation(&mut gen, &scenarios, &cfg)?;
    save_augmentation(&a.out, &samples)?;
    let mut meta = Meta::new();
    meta.push("model", gen.kind.as_str());
    meta.push("ckpt", absolute(&a.ckpt).display());
    meta.push("data", absolute(&data).display());
    meta.save(&a.out.join("source.meta"))?;
    println!(
        "sampled {} synthetic maps ({}) to {}",
        samples.len(),
        a.alpha_mode,
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-inv
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainInvArgs {
    /// Gather directory from simulate.
    #[arg(long)]
    train: PathBuf,
    /// Synthetic-sample directory from augment (optional).
    #[arg(long)]
    aug: Option<PathBuf>,
    #[arg(long, default_value_t = 80)]
    epochs: usize,
    #[arg(long, default_value_t = 24)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Weight decay.
    #[arg(long, default_value_t = 1e-4)]
    wd: f64,
    #[arg(long)]
    seed: u64,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Override the dataset directory recorded in the gather sidecar.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Encoder channel widths, comma separated.
    #[arg(long, default_value = "8,16,32,64,64")]
    enc_widths: String,
    /// Decoder channel widths, comma separated.
    #[arg(long, default_value = "64,32,16,8")]
    dec_widths: String,
    #[arg(long, default_value_t = 128)]
    bottleneck: usize,
    /// Temporal decimation factor applied to traces.
    #[arg(long, default_value_t = 8)]
    time_downsample: usize,
    /// Provenance tag when the augmentation directory has no sidecar.
    #[arg(long)]
    aug_tag: Option<String>,
}

/// Load the (dataset, pairs, sim config) triple behind a gather directory.
fn pairs_from_gathers(
    gather_dir: &Path,
    data_override: Option<&Path>,
) -> Result<(Vec<LeakageScenario>, Vec<TrainingPair>, SimConfig)> {
    // Column count feeds the acquisition geometry; probe the dataset first.
    let probe_meta = gather_dir.join("source.meta");
    let meta = Meta::load(&probe_meta).with_context(|| {
        format!(
            "{} has no source.meta; was it produced by `seisaug simulate`?",
            gather_dir.display()
        )
    })?;
    let data = match data_override {
        Some(d) => d.to_path_buf(),
        None => PathBuf::from(meta.get_str("data", &probe_meta)?),
    };
    let scenarios = load_dataset(&data)
        .with_context(|| format!("loading dataset from {}", data.display()))?;
    let cols = scenarios[0].maps[0].grid.ncols();
    let (_, cfg) = read_source_meta(gather_dir, cols)?;
    let pairs = load_pairs(&scenarios, gather_dir, cfg.sources.len())?;
    Ok((scenarios, pairs, cfg))
}

fn train_inv(a: TrainInvArgs) -> Result<()> {
    let (_, real, simcfg) = pairs_from_gathers(&a.train, a.data.as_deref())?;
    let synthetic = match &a.aug {
        Some(aug_dir) => {
            let samples = load_augmentation(aug_dir)?;
            let tag = match &a.aug_tag {
                Some(t) => AugTag::parse(t)?,
                None => {
                    let path = aug_dir.join("source.meta");
                    let meta = Meta::load(&path).with_context(|| {
                        format!(
                            "{} has no source.meta; pass --aug-tag to label the samples",
                            aug_dir.display()
                        )
                    })?;
                    AugTag::parse(&meta.get_str("model", &path)?)?
                }
            };
            println!(
                "simulating gathers for {} synthetic samples ({})",
                samples.len(),
                tag.as_str()
            );
            make_synthetic_pairs(&samples, &simcfg, tag)?
        }
        None => Vec::new(),
    };
    let hyper = InvHyper {
        epochs: a.epochs,
        batch: a.batch,
        lr: a.lr,
        weight_decay: a.wd,
        enc_widths: parse_usize_list(&a.enc_widths)?,
        bottleneck: a.bottleneck,
        dec_widths: parse_usize_list(&a.dec_widths)?,
        time_downsample: a.time_downsample,
        seed: a.seed,
    };
    let (mut model, ckpt) = train_inversion(&real, &synthetic, &hyper)?;
    save_inversion(&a.out, &mut model, &ckpt)?;
    let final_loss = ckpt.history.last().map(|h| h.loss).unwrap_or(f64::NAN);
    println!(
        "trained inversion net on {} real + {} synthetic pairs for {} epochs \
         (final loss {final_loss:.6}); checkpoint at {}",
        real.len(),
        synthetic.len(),
        ckpt.epochs_trained,
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// test-inv
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TestInvArgs {
    /// Inversion checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Gather directory of the test set.
    #[arg(long)]
    test: PathBuf,
    /// Evaluation subset: general or small.
    #[arg(long, default_value = "general")]
    subset: String,
    /// Per-sample CSV report to write.
    #[arg(long)]
    report: PathBuf,
    /// Override the dataset directory recorded in the gather sidecar.
    #[arg(long)]
    data: Option<PathBuf>,
}

fn test_inv(a: TestInvArgs) -> Result<()> {
    let (mut model, _) = load_inversion(&a.ckpt)?;
    let (_, pairs, _) = pairs_from_gathers(&a.test, a.data.as_deref())?;
    let subset = TestSubset::parse(&a.subset)?;
    let report = test_inversion(&mut model, &pairs, subset)?;
    let rows: Vec<Vec<String>> = report
        .per_sample
        .iter()
        .zip(report.classes.iter())
        .enumerate()
        .map(|(i, (&mae, class))| vec![i.to_string(), class.name().to_string(), fmt_f64(mae)])
        .collect();
    write_csv(&a.report, "sample,class,mae", &rows)?;
    println!(
        "{} subset: {} samples, mean MAE {:.4} m/s; report at {}",
        subset.as_str(),
        report.per_sample.len(),
        report.mean_mae,
        a.report.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory; generator and inversion checkpoints are
    /// detected automatically. Repeat to report on both at once.
    #[arg(long, required = true)]
    ckpt: Vec<PathBuf>,
    /// Test set: a dataset directory, or a gather directory whose sidecar
    /// points at one (required for inversion checkpoints).
    #[arg(long)]
    test: PathBuf,
    /// No-leak baseline map (`baseline.f32` from gen-data).
    #[arg(long)]
    baseline: PathBuf,
    /// Report directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Projection method for the distribution plot: pca or nmf.
    #[arg(long, default_value = "pca")]
    projection: String,
}

fn load_baseline_map(path: &Path) -> Result<Array2<f64>> {
    let meta_path = path.with_extension("meta");
    let meta = Meta::load(&meta_path)
        .with_context(|| format!("baseline map needs a sidecar at {}", meta_path.display()))?;
    let rows = meta.get_usize("rows", &meta_path)?;
    let cols = meta.get_usize("cols", &meta_path)?;
    let flat = seisaug_core::io::read_f32(path, rows * cols)?;
    Ok(Array2::from_shape_vec((rows, cols), flat.iter().map(|&v| v as f64).collect())
        .expect("length checked by read_f32"))
}

/// RMS-averaged depth spectrum over a set of maps.
fn mean_spectrum(maps: &[Array2<f64>], baseline: &Array2<f64>) -> Result<Vec<f64>> {
    if maps.is_empty() {
        bail!("no maps to transform");
    }
    let mut acc: Vec<f64> = Vec::new();
    for m in maps {
        let s = kz_spectrum(m, baseline)?;
        if acc.is_empty() {
            acc = vec![0.0; s.len()];
        }
        for (a, v) in acc.iter_mut().zip(s.iter()) {
            *a += v * v;
        }
    }
    let n = maps.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n).sqrt()).collect())
}

fn eval(a: EvalArgs) -> Result<()> {
    if a.ckpt.len() > 2 {
        bail!("pass at most two checkpoints (one generator, one inversion)");
    }
    let method = ProjectionMethod::parse(&a.projection)?;
    std::fs::create_dir_all(&a.out)?;
    let baseline_map = load_baseline_map(&a.baseline)?;

    // Resolve the test set: gather dir (with sidecar) or plain dataset dir.
    let is_gather_dir = a.test.join("source.meta").is_file();
    let (scenarios, pairs) = if is_gather_dir {
        let (scenarios, pairs, _) = pairs_from_gathers(&a.test, None)?;
        (scenarios, Some(pairs))
    } else {
        let scenarios = load_dataset(&a.test)
            .with_context(|| format!("loading dataset from {}", a.test.display()))?;
        (scenarios, None)
    };
    let true_maps: Vec<Array2<f64>> = scenarios
        .iter()
        .flat_map(|s| s.maps.iter().map(|m| m.grid.clone()))
        .collect();
    let mut kz_curves: Vec<(String, Vec<f64>)> =
        vec![("true".into(), mean_spectrum(&true_maps, &baseline_map)?)];
    let mut written: Vec<String> = Vec::new();

    for ckpt_dir in &a.ckpt {
        let header = ckpt_dir.join("header.meta");
        let format = Meta::load(&header)?.get_str("format", &header)?;
        if format.starts_with("generator-checkpoint") {
            eval_generator(
                &a,
                ckpt_dir,
                &scenarios,
                &true_maps,
                &baseline_map,
                method,
                &mut kz_curves,
                &mut written,
            )?;
        } else if format.starts_with("inversion-checkpoint") {
            let pairs = pairs.as_ref().ok_or_else(|| {
                anyhow!(
                    "inversion checkpoint {} needs a gather directory as --test",
                    ckpt_dir.display()
                )
            })?;
            eval_inversion(&a, ckpt_dir, pairs, &baseline_map, &mut kz_curves, &mut written)?;
        } else {
            bail!("{} is not a recognized checkpoint", ckpt_dir.display());
        }
    }

    write_kz_csv(&a.out.join("kz.csv"), &kz_curves)?;
    written.push("kz.csv".into());
    let half = kz_curves[0].1.len() / 2;
    let series: Vec<(String, Vec<(f64, f64)>)> = kz_curves
        .iter()
        .map(|(name, s)| {
            (
                name.clone(),
                s.iter().take(half).enumerate().map(|(i, &v)| (i as f64, v)).collect(),
            )
        })
        .collect();
    plot::line_chart(
        &a.out.join("kz.png"),
        "depth-wavenumber spectra",
        "wavenumber bin",
        "rms magnitude",
        &series,
    )?;
    written.push("kz.png".into());
    written.sort();
    println!("report in {}: {}", a.out.display(), written.join(", "));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_generator(
    a: &EvalArgs,
    ckpt_dir: &Path,
    scenarios: &[LeakageScenario],
    true_maps: &[Array2<f64>],
    baseline_map: &Array2<f64>,
    method: ProjectionMethod,
    kz_curves: &mut Vec<(String, Vec<f64>)>,
    written: &mut Vec<String>,
) -> Result<()> {
    let (mut gen, _) = load_generator(ckpt_dir)?;
    if gen.kind == ModelKind::Linear {
        bail!("the linear baseline has no generator diagnostics to report");
    }
    let curve = per_year_loss_curve(&mut gen, scenarios)?;
    write_per_year_csv(&a.out.join("per_year.csv"), &curve)?;
    written.push("per_year.csv".into());
    let pts: Vec<(f64, f64)> = curve
        .rows
        .iter()
        .filter_map(|r| r.mean.map(|m| (r.year as f64, m)))
        .collect();
    plot::line_chart(
        &a.out.join("per_year.png"),
        "generator test loss by snapshot year",
        "year",
        "mean squared error",
        &[(gen.kind.as_str().to_string(), pts)],
    )?;
    written.push("per_year.png".into());

    // Reconstruct the test maps to get a same-size generated set.
    let mut recon: Vec<Array2<f64>> = Vec::with_capacity(true_maps.len());
    for s in scenarios {
        let first = &s.maps[0].grid;
        let last = &s.maps[s.maps.len() - 1].grid;
        for m in &s.maps {
            let r = if gen.kind == ModelKind::Ae {
                gen.ae_forward(first, last, m.year as f64)?
            } else {
                gen.reconstruct(&m.grid)?
            };
            recon.push(r);
        }
    }
    let proj = project_2d(true_maps, &recon, method)?;
    write_projection_csv(&a.out.join("projections.csv"), &proj)?;
    written.push("projections.csv".into());
    plot::scatter_chart(
        &a.out.join("projections.png"),
        &format!("{} projection (overlap {:.3})", method.as_str(), proj.overlap),
        "component 1",
        "component 2",
        &[
            (
                "true".to_string(),
                proj.true_points.iter().map(|p| (p[0], p[1])).collect(),
            ),
            (
                "generated".to_string(),
                proj.gen_points.iter().map(|p| (p[0], p[1])).collect(),
            ),
        ],
    )?;
    written.push("projections.png".into());
    kz_curves.push(("generated".into(), mean_spectrum(&recon, baseline_map)?));
    Ok(())
}

fn eval_inversion(
    a: &EvalArgs,
    ckpt_dir: &Path,
    pairs: &[TrainingPair],
    baseline_map: &Array2<f64>,
    kz_curves: &mut Vec<(String, Vec<f64>)>,
    written: &mut Vec<String>,
) -> Result<()> {
    let (mut model, _) = load_inversion(ckpt_dir)?;
    let metrics = metrics_per_sample(&mut model, pairs, &SsimConfig::default())?;
    write_metrics_csv(&a.out.join("metrics.csv"), &metrics)?;
    written.push("metrics.csv".into());

    let small: Vec<f64> = metrics
        .iter()
        .filter(|m| m.class.is_small_leak())
        .map(|m| m.mae)
        .collect();
    if small.is_empty() {
        println!("note: no small-leak samples in the test set; boxplot skipped");
    } else {
        let stats = boxplot_stats(&small)?;
        write_boxplot_csv(&a.out.join("boxplot.csv"), &stats)?;
        written.push("boxplot.csv".into());
        plot::boxplot_chart(
            &a.out.join("boxplot.png"),
            "small-leak test MAE",
            "MAE (m/s)",
            &[("model".into(), stats)],
        )?;
        written.push("boxplot.png".into());
    }

    // Predicted maps: kz curve plus a truth-vs-prediction montage.
    let mut predicted: Vec<Array2<f64>> = Vec::with_capacity(pairs.len());
    for p in pairs {
        predicted.push(model.invnet_forward(&p.gathers)?);
    }
    kz_curves.push(("predicted".into(), mean_spectrum(&predicted, baseline_map)?));
    let picks = [0, pairs.len() / 2, pairs.len() - 1];
    let mut tiles: Vec<Array2<f64>> = picks.iter().map(|&i| pairs[i].target.clone()).collect();
    tiles.extend(picks.iter().map(|&i| predicted[i].clone()));
    plot::map_montage(&a.out.join("montage.png"), &tiles, 3)?;
    written.push("montage.png".into());
    Ok(())
}

// ---------------------------------------------------------------------------
// run / sweep-size / grid-search
// ---------------------------------------------------------------------------

#[derive(Args)]
struct RunArgs {
    /// Config file overriding the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base profile: desk or paper.
    #[arg(long, default_value = "desk")]
    profile: String,
}

fn run(a: RunArgs) -> Result<()> {
    let cfg = load_profile(&a.profile, a.config.as_deref())?;
    let summary = run_experiment(&cfg)?;
    println!("run dir       {}", summary.dir.display());
    println!("manifest hash {}", summary.manifest_hash);
    if !summary.comparison.is_empty() {
        println!("{:<12} {:<8} {:>12} {:>12} {:>4}", "method", "subset", "mean MAE", "std", "n");
        for r in &summary.comparison {
            println!(
                "{:<12} {:<8} {:>12.4} {:>12.4} {:>4}",
                r.method, r.subset, r.mean_mae, r.std_mae, r.n_seeds
            );
        }
    }
    if let Some(f) = summary.failure {
        bail!("pipeline stage failed: {f}");
    }
    Ok(())
}

#[derive(Args)]
struct SweepSizeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Augmentation sizes, comma separated (e.g. 350,800,1500).
    #[arg(long)]
    sizes: String,
}

fn sweep(a: SweepSizeArgs) -> Result<()> {
    let cfg = load_profile(&a.profile, a.config.as_deref())?;
    let sizes = parse_usize_list(&a.sizes)?;
    let result = sweep_size(&cfg, &sizes)?;
    println!("sweep dir     {}", result.dir.display());
    println!("manifest hash {}", result.manifest_hash);
    println!("{:>8} {:>14} {:>14} {:>4}", "size", "mean small MAE", "std", "n");
    for r in &result.rows {
        println!(
            "{:>8} {:>14.4} {:>14.4} {:>4}",
            r.size, r.mean_small, r.std_small, r.n_seeds
        );
    }
    if let Some(f) = result.failure {
        bail!("pipeline stage failed: {f}");
    }
    Ok(())
}

#[derive(Args)]
struct GridSearchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Hyper-parameter to walk: layers or gamma.
    #[arg(long)]
    param: String,
    /// Grid values, comma separated (defaults to the full grid).
    #[arg(long)]
    values: Option<String>,
}

fn grid(a: GridSearchArgs) -> Result<()> {
    let cfg = load_profile(&a.profile, a.config.as_deref())?;
    let spec = match a.param.as_str() {
        "layers" => match &a.values {
            Some(v) => GridSpec::Layers(
                v.split(',')
                    .map(|t| LayerSelection::parse(t.trim()).map_err(anyhow::Error::from))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => GridSpec::default_layers(),
        },
        "gamma" => match &a.values {
            Some(v) => GridSpec::Gammas(parse_f64_list(v)?),
            None => GridSpec::default_gammas(),
        },
        other => bail!("unknown grid parameter {other:?}; expected layers or gamma"),
    };
    let result = grid_search(&cfg, &spec)?;
    println!("grid dir      {}", result.dir.display());
    println!("manifest hash {}", result.manifest_hash);
    println!("{:<8} {:<10} {:>14}", "param", "value", "test loss");
    for r in &result.rows {
        println!("{:<8} {:<10} {:>14.6}", r.param, r.label, r.test_loss);
    }
    if let Some(f) = result.failure {
        bail!("pipeline stage failed: {f}");
    }
    Ok(())
}
