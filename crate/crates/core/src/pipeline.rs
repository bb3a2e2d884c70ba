//! Experiment orchestration: content-addressed stage caching, run manifests
//! with artifact checksums, the end-to-end baseline-vs-augmented comparison,
//! the augmentation-size sweep, and the hyper-parameter grid search.
//!
//! Every stage writes its artifacts into a cache directory named by a
//! SHA-256 key over exactly the configuration it reads (plus its parents'
//! keys), so reruns and sweeps reuse whatever already exists. A run
//! manifest records the keys, statuses, wall times and artifact checksums;
//! the manifest hash covers only the deterministic fields, so a rerun —
//! cached or not — reproduces it bit for bit.

use crate::config::{sha256_hex, ExperimentConfig};
use crate::datagen::{
    generate_baseline, generate_dataset, load_dataset, mass_histogram, save_dataset,
    split_dataset, LeakageScenario,
};
use crate::evaluate::{
    boxplot_stats, kz_spectrum, metrics_per_sample, per_year_loss_curve, project_2d,
    write_boxplot_csv, write_kz_csv, write_metrics_csv, write_per_year_csv,
    write_projection_csv, ProjectionMethod, SsimConfig,
};
use crate::featureext::{FeatureExtractor, LayerSelection};
use crate::genmodels::{
    generate_augmentation, load_augmentation, load_generator, loss_and_grads,
    save_augmentation, save_generator, train_generative, GeneratorCheckpoint, ModelKind,
    Normalization, SyntheticSample, TrainBatch, TrainedGenerator,
};
use crate::inversion::{
    load_inversion, load_pairs, make_synthetic_pairs, save_inversion, test_inversion,
    train_inversion, AugTag, TestSubset, TrainedInversion, TrainingPair,
};
use crate::io::{fmt_f64, write_csv, Meta};
use crate::plot;
use crate::rng::derive_seed;
use crate::{Error, Result};
use ndarray::{Array2, Array4};
use std::path::{Path, PathBuf};
use std::time::Instant;

// ---------------------------------------------------------------------------
// Stage driver
// ---------------------------------------------------------------------------

/// Outcome of one pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    /// Computed in this run.
    Ok,
    /// Reloaded from the stage cache.
    Cached,
    /// The stage's computation returned an error.
    Failed,
    /// Not attempted because an earlier stage failed.
    Skipped,
}

impl StageStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            StageStatus::Ok => "ok",
            StageStatus::Cached => "cached",
            StageStatus::Failed => "failed",
            StageStatus::Skipped => "skipped",
        }
    }
}

/// One manifest row.
#[derive(Debug, Clone)]
pub struct StageRecord {
    pub name: String,
    /// Cache key (12-hex prefix of the stage's input digest), `-` for
    /// uncached stages.
    pub key: String,
    pub status: StageStatus,
    pub wall_ms: u128,
    /// Digest over the stage's artifact files; empty when failed/skipped.
    pub checksum: String,
    /// Error message when failed.
    pub detail: String,
}

/// Sequencing state for one pipeline invocation: cache root, the manifest
/// rows accumulated so far, and the first failure (which converts every
/// later stage into a skip).
pub struct StageCtx {
    cache: PathBuf,
    records: Vec<StageRecord>,
    failure: Option<String>,
}

impl StageCtx {
    pub fn new(cache: PathBuf) -> Self {
        StageCtx {
            cache,
            records: Vec::new(),
            failure: None,
        }
    }

    /// First failure as "stage: error", if any stage failed.
    pub fn failure(&self) -> Option<&str> {
        self.failure.as_deref()
    }

    pub fn records(&self) -> &[StageRecord] {
        &self.records
    }

    /// After a failure, record every planned stage that never ran as
    /// skipped, so the manifest shows the whole pipeline shape.
    pub fn mark_skipped(&mut self, planned: &[String]) {
        if self.failure.is_none() {
            return;
        }
        for name in planned {
            if self.records.iter().all(|r| &r.name != name) {
                self.records.push(StageRecord {
                    name: name.clone(),
                    key: "-".into(),
                    status: StageStatus::Skipped,
                    wall_ms: 0,
                    checksum: String::new(),
                    detail: String::new(),
                });
            }
        }
    }

    /// Record an out-of-band failure (errors raised between stages).
    pub fn fail(&mut self, name: &str, err: &Error) {
        self.records.push(StageRecord {
            name: name.to_string(),
            key: "-".into(),
            status: StageStatus::Failed,
            wall_ms: 0,
            checksum: String::new(),
            detail: err.to_string(),
        });
        if self.failure.is_none() {
            self.failure = Some(format!("{name}: {err}"));
        }
    }

    /// Run a cached stage. `key_material` must cover everything the stage
    /// reads; `compute` fills a fresh directory; `reload` restores the value
    /// from a previously completed directory. Returns `None` after any
    /// failure (this stage's or an earlier one's).
    ///
    /// Even a freshly computed stage returns the *reloaded* artifact, so a
    /// run that computes a stage and a later run that reuses it consume
    /// bit-identical values regardless of any precision the on-disk format
    /// drops (velocity maps persist as f32).
    pub fn run<T>(
        &mut self,
        name: &str,
        key_material: &str,
        compute: impl FnOnce(&Path) -> Result<T>,
        reload: impl Fn(&Path) -> Result<T>,
    ) -> Option<T> {
        let key = sha256_hex(key_material.as_bytes());
        let short = key[..12].to_string();
        if self.failure.is_some() {
            self.records.push(StageRecord {
                name: name.to_string(),
                key: short,
                status: StageStatus::Skipped,
                wall_ms: 0,
                checksum: String::new(),
                detail: String::new(),
            });
            return None;
        }
        let dir = self.cache.join(format!("{name}-{short}"));
        let marker = dir.join(".complete");
        let t0 = Instant::now();
        if marker.is_file() {
            if let Ok(value) = reload(&dir) {
                let checksum = dir_checksum(&dir).unwrap_or_default();
                self.records.push(StageRecord {
                    name: name.to_string(),
                    key: short,
                    status: StageStatus::Cached,
                    wall_ms: t0.elapsed().as_millis(),
                    checksum,
                    detail: String::new(),
                });
                return Some(value);
            }
            // A stale or corrupt cache entry is recomputed, not fatal.
            let _ = std::fs::remove_dir_all(&dir);
        } else if dir.exists() {
            let _ = std::fs::remove_dir_all(&dir);
        }
        let outcome = std::fs::create_dir_all(&dir)
            .map_err(Error::from)
            .and_then(|()| compute(&dir));
        match outcome {
            Ok(_) => {
                // Hand back the persisted artifact, not the in-memory one.
                let finish = std::fs::write(&marker, b"")
                    .map_err(Error::from)
                    .and_then(|()| reload(&dir))
                    .and_then(|value| dir_checksum(&dir).map(|c| (value, c)));
                match finish {
                    Ok((value, checksum)) => {
                        self.records.push(StageRecord {
                            name: name.to_string(),
                            key: short,
                            status: StageStatus::Ok,
                            wall_ms: t0.elapsed().as_millis(),
                            checksum,
                            detail: String::new(),
                        });
                        Some(value)
                    }
                    Err(e) => {
                        let _ = std::fs::remove_dir_all(&dir);
                        self.fail_with_key(name, &short, t0, &e);
                        None
                    }
                }
            }
            Err(e) => {
                let _ = std::fs::remove_dir_all(&dir);
                self.fail_with_key(name, &short, t0, &e);
                None
            }
        }
    }

    fn fail_with_key(&mut self, name: &str, key: &str, t0: Instant, err: &Error) {
        self.records.push(StageRecord {
            name: name.to_string(),
            key: key.to_string(),
            status: StageStatus::Failed,
            wall_ms: t0.elapsed().as_millis(),
            checksum: String::new(),
            detail: err.to_string(),
        });
        if self.failure.is_none() {
            self.failure = Some(format!("{name}: {err}"));
        }
    }

    /// Run an uncached stage writing directly into `dir` (reports and
    /// figures). Records like any other stage with key `-`.
    pub fn uncached(
        &mut self,
        name: &str,
        dir: &Path,
        f: impl FnOnce(&Path) -> Result<()>,
    ) -> bool {
        if self.failure.is_some() {
            self.records.push(StageRecord {
                name: name.to_string(),
                key: "-".into(),
                status: StageStatus::Skipped,
                wall_ms: 0,
                checksum: String::new(),
                detail: String::new(),
            });
            return false;
        }
        let t0 = Instant::now();
        let outcome = std::fs::create_dir_all(dir)
            .map_err(Error::from)
            .and_then(|()| f(dir));
        match outcome {
            Ok(()) => {
                let checksum = dir_checksum(dir).unwrap_or_default();
                self.records.push(StageRecord {
                    name: name.to_string(),
                    key: "-".into(),
                    status: StageStatus::Ok,
                    wall_ms: t0.elapsed().as_millis(),
                    checksum,
                    detail: String::new(),
                });
                true
            }
            Err(e) => {
                self.fail_with_key(name, "-", t0, &e);
                false
            }
        }
    }

    /// Write the manifest and return its deterministic hash (over config
    /// hash, seeds, stage keys and artifact checksums — not wall times or
    /// cached-vs-computed status, which legitimately differ between reruns).
    pub fn write_manifest(
        &self,
        path: &Path,
        config_hash: &str,
        seeds: &[u64],
    ) -> Result<String> {
        let seeds_txt = seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut material = format!("{config_hash}\n{seeds_txt}\n");
        for r in &self.records {
            material.push_str(&format!("{}\x1f{}\x1f{}\n", r.name, r.key, r.checksum));
        }
        let manifest_hash = sha256_hex(material.as_bytes());
        let mut meta = Meta::new();
        meta.push("format", "run-manifest 1");
        meta.push("config_hash", config_hash);
        meta.push("seeds", &seeds_txt);
        meta.push("manifest_hash", &manifest_hash);
        for r in &self.records {
            let base = format!("stage.{}", r.name);
            meta.push(&format!("{base}.key"), &r.key);
            meta.push(&format!("{base}.status"), r.status.as_str());
            meta.push(&format!("{base}.wall_ms"), r.wall_ms);
            meta.push(&format!("{base}.checksum"), &r.checksum);
            if !r.detail.is_empty() {
                meta.push(&format!("{base}.detail"), r.detail.replace('\n', "; "));
            }
        }
        meta.save(path)?;
        Ok(manifest_hash)
    }
}

/// Digest over a directory's files: sorted relative paths and raw bytes
/// (the `.complete` marker excluded).
pub fn dir_checksum(dir: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut files: Vec<PathBuf> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().and_then(|n| n.to_str()) != Some(".complete") {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut hasher = Sha256::new();
    for f in &files {
        let rel = f.strip_prefix(dir).unwrap_or(f);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0u8]);
        hasher.update(&std::fs::read(f)?);
        hasher.update([0xffu8]);
    }
    let mut s = String::with_capacity(64);
    use std::fmt::Write as _;
    for b in hasher.finalize() {
        let _ = write!(s, "{b:02x}");
    }
    Ok(s)
}

/// Cache root: `SEISMO_CACHE` when set, else `<output>/cache`.
pub fn cache_root(cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var("SEISMO_CACHE") {
        Ok(p) if !p.is_empty() => PathBuf::from(p),
        _ => cfg.run.output.join("cache"),
    }
}

// ---------------------------------------------------------------------------
// Shared stages
// ---------------------------------------------------------------------------

fn data_stage(ctx: &mut StageCtx, cfg: &ExperimentConfig) -> Option<Vec<LeakageScenario>> {
    let mat = format!("data\n{}", cfg.data_text());
    ctx.run(
        "data",
        &mat,
        |dir| {
            let s = generate_dataset(cfg.data.seed, cfg.data.scenarios, &cfg.datagen_config())?;
            save_dataset(dir, &s)?;
            Ok(s)
        },
        load_dataset,
    )
}

fn sim_stage(
    ctx: &mut StageCtx,
    cfg: &ExperimentConfig,
    scenarios: &[LeakageScenario],
) -> Option<PathBuf> {
    let mat = format!("sim\n{}{}", cfg.data_text(), cfg.sim_text());
    ctx.run(
        "sim",
        &mat,
        |dir| {
            forward_all(scenarios, cfg, dir)?;
            Ok(dir.to_path_buf())
        },
        |dir| Ok(dir.to_path_buf()),
    )
}

fn forward_all(scenarios: &[LeakageScenario], cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let n = crate::wavesim::forward_dataset(scenarios, &cfg.sim_config(), dir)?;
    let expected = scenarios.iter().map(|s| s.maps.len()).sum::<usize>() * cfg.sim.n_shots;
    if n != expected {
        return Err(Error::Data(format!(
            "forward modeling wrote {n} gathers, expected {expected}"
        )));
    }
    Ok(())
}

/// Train (or reload) the configured generator on the train split. The model
/// family, grid, widths and the training seed are all part of the cache key.
fn generator_stage(
    ctx: &mut StageCtx,
    cfg: &ExperimentConfig,
    train: &[LeakageScenario],
    gen_seed: u64,
) -> Option<TrainedGenerator> {
    let mat = format!(
        "generator\n{}{}seed = {gen_seed}\n",
        cfg.data_text(),
        cfg.generator_text()
    );
    ctx.run(
        "generator",
        &mat,
        |dir| {
            let kind = cfg.generator.model;
            if kind == ModelKind::Linear {
                // The linear baseline has no trainable weights: persist a
                // checkpoint holding only the normalization bounds.
                let norm = Normalization::fit(train)?;
                let mut gen = TrainedGenerator {
                    kind,
                    net: None,
                    norm,
                    rows: cfg.data.rows,
                    cols: cfg.data.cols,
                };
                let ckpt = GeneratorCheckpoint {
                    kind,
                    rows: cfg.data.rows,
                    cols: cfg.data.cols,
                    latent: cfg.generator.latent,
                    widths: cfg.generator.widths.clone(),
                    bounds: (norm.lo, norm.hi),
                    epochs_trained: 0,
                    history: Vec::new(),
                    echo: vec![("seed".into(), gen_seed.to_string())],
                };
                save_generator(dir, &mut gen, &ckpt)?;
                return Ok(gen);
            }
            let hyper = cfg.gen_hyper(gen_seed);
            let mut extractor =
                (kind == ModelKind::VaePercep).then(FeatureExtractor::<f32>::fixed);
            let (mut gen, ckpt) =
                train_generative(kind, train, &hyper, extractor.as_mut(), None)?;
            save_generator(dir, &mut gen, &ckpt)?;
            Ok(gen)
        },
        |dir| load_generator(dir).map(|(g, _)| g),
    )
}

/// Sample (or reload) `count` synthetic maps from the generator. A zero
/// count is the documented degenerate case: an empty sample set, making the
/// "augmented" training run identical to the baseline.
fn augment_stage(
    ctx: &mut StageCtx,
    cfg: &ExperimentConfig,
    gen: &mut TrainedGenerator,
    train: &[LeakageScenario],
    count: usize,
    aug_seed: u64,
    label: &str,
) -> Option<Vec<SyntheticSample>> {
    let mat = format!(
        "augment\n{}{}{}count = {count}\nseed = {aug_seed}\n",
        cfg.data_text(),
        cfg.generator_text(),
        cfg.augment_text()
    );
    ctx.run(
        label,
        &mat,
        |dir| {
            if count == 0 {
                return Ok(Vec::new());
            }
            let aug_cfg = cfg.augment_config(count, aug_seed);
            let samples = generate_augmentation(gen, train, &aug_cfg)?;
            save_augmentation(dir, &samples)?;
            Ok(samples)
        },
        load_augmentation,
    )
}

/// Train (or reload) an inversion net on real plus synthetic pairs.
#[allow(clippy::too_many_arguments)]
fn inversion_stage(
    ctx: &mut StageCtx,
    cfg: &ExperimentConfig,
    real: &[TrainingPair],
    synthetic: &[TrainingPair],
    inv_seed: u64,
    parent_key_material: &str,
    label: &str,
) -> Option<TrainedInversion> {
    let mat = format!(
        "inversion\n{}{}{}seed = {inv_seed}\n{parent_key_material}",
        cfg.data_text(),
        cfg.sim_text(),
        cfg.inversion_text()
    );
    ctx.run(
        label,
        &mat,
        |dir| {
            let hyper = cfg.inv_hyper(inv_seed);
            let (mut model, ckpt) = train_inversion(real, synthetic, &hyper)?;
            save_inversion(dir, &mut model, &ckpt)?;
            Ok(model)
        },
        |dir| load_inversion(dir).map(|(m, _)| m),
    )
}

// ---------------------------------------------------------------------------
// run_experiment
// ---------------------------------------------------------------------------

/// One row of the baseline-vs-augmented comparison table.
#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub method: String,
    /// `general` or `small`.
    pub subset: String,
    pub mean_mae: f64,
    pub std_mae: f64,
    pub n_seeds: usize,
}

/// What a pipeline invocation produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub manifest_hash: String,
    /// First stage failure as "stage: error", if any.
    pub failure: Option<String>,
    pub comparison: Vec<ComparisonRow>,
}

/// Population mean and standard deviation (ddof = 0, so one sample yields a
/// zero spread rather than an undefined one).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-seed evaluation quads collected during a run.
struct EvalRun {
    method: String,
    seed: u64,
    general: f64,
    small: f64,
}

/// End-to-end comparison: data → gathers → generator → augmentation →
/// baseline and augmented inversion nets per seed group → general and
/// small-leak test losses → comparison table plus diagnostic figures.
///
/// Stage failures are recorded in the manifest and downstream stages are
/// skipped; the function itself only errors on an invalid config or an
/// unwritable output root.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let content_hash = cfg.content_hash();
    let run_dir = cfg.run.output.join(format!("run-{}", &content_hash[..12]));
    std::fs::create_dir_all(&run_dir)?;
    std::fs::write(run_dir.join("config.txt"), cfg.to_text())?;
    let mut ctx = StageCtx::new(cache_root(cfg));
    let comparison = drive_run(cfg, &mut ctx, &run_dir);
    let mut plan = vec![
        "data".to_string(),
        "split".to_string(),
        "sim".to_string(),
        "generator".to_string(),
    ];
    for s in &cfg.run.seeds {
        plan.push(format!("augment-s{s}"));
        plan.push(format!("inv-baseline-s{s}"));
        plan.push(format!("inv-augmented-s{s}"));
    }
    plan.push("report".to_string());
    ctx.mark_skipped(&plan);
    let manifest_hash =
        ctx.write_manifest(&run_dir.join("manifest.txt"), &content_hash, &cfg.run.seeds)?;
    Ok(RunSummary {
        dir: run_dir,
        manifest_hash,
        failure: ctx.failure().map(str::to_string),
        comparison,
    })
}

fn drive_run(cfg: &ExperimentConfig, ctx: &mut StageCtx, run_dir: &Path) -> Vec<ComparisonRow> {
    let Some(scenarios) = data_stage(ctx, cfg) else {
        return Vec::new();
    };
    let (train, test) = match split_dataset(&scenarios, cfg.data.train_fraction) {
        Ok(x) => x,
        Err(e) => {
            ctx.fail("split", &e);
            return Vec::new();
        }
    };
    let Some(gather_dir) = sim_stage(ctx, cfg, &scenarios) else {
        return Vec::new();
    };
    let gen_seed = derive_seed(cfg.run.seeds[0], "generator", 0);
    let Some(mut gen) = generator_stage(ctx, cfg, &train, gen_seed) else {
        return Vec::new();
    };
    let real = match load_pairs(&train, &gather_dir, cfg.sim.n_shots) {
        Ok(p) => p,
        Err(e) => {
            ctx.fail("load-train-pairs", &e);
            return Vec::new();
        }
    };
    let test_pairs = match load_pairs(&test, &gather_dir, cfg.sim.n_shots) {
        Ok(p) => p,
        Err(e) => {
            ctx.fail("load-test-pairs", &e);
            return Vec::new();
        }
    };
    let method = cfg.generator.model.as_str().to_string();
    let tag = AugTag::from_kind(cfg.generator.model);
    let mut runs: Vec<EvalRun> = Vec::new();
    // Models and synthetic samples of the first seed group, kept for the
    // diagnostic report.
    let mut report_models: Option<(TrainedInversion, TrainedInversion)> = None;
    let mut report_samples: Vec<SyntheticSample> = Vec::new();

    for (gi, &group_seed) in cfg.run.seeds.iter().enumerate() {
        let aug_seed = derive_seed(group_seed, "augment", 0);
        let inv_seed = derive_seed(group_seed, "inversion", 0);
        let aug_label = format!("augment-s{group_seed}");
        let Some(samples) = augment_stage(
            ctx,
            cfg,
            &mut gen,
            &train,
            cfg.augment.count,
            aug_seed,
            &aug_label,
        ) else {
            break;
        };
        let synthetic = match make_synthetic_pairs(&samples, &cfg.sim_config(), tag) {
            Ok(p) => p,
            Err(e) => {
                ctx.fail(&format!("synthetic-gathers-s{group_seed}"), &e);
                break;
            }
        };
        let Some(mut baseline) = inversion_stage(
            ctx,
            cfg,
            &real,
            &[],
            inv_seed,
            "augmentation = none\n",
            &format!("inv-baseline-s{group_seed}"),
        ) else {
            break;
        };
        let aug_parent = format!(
            "augmentation = {}\n{}count = {}\nseed = {aug_seed}\n",
            tag.as_str(),
            cfg.augment_text(),
            cfg.augment.count
        );
        let Some(mut augmented) = inversion_stage(
            ctx,
            cfg,
            &real,
            &synthetic,
            inv_seed,
            &aug_parent,
            &format!("inv-augmented-s{group_seed}"),
        ) else {
            break;
        };
        let reports = (|| -> Result<[f64; 4]> {
            let bg = test_inversion(&mut baseline, &test_pairs, TestSubset::General)?;
            let bs = test_inversion(&mut baseline, &test_pairs, TestSubset::Small)?;
            let ag = test_inversion(&mut augmented, &test_pairs, TestSubset::General)?;
            let asml = test_inversion(&mut augmented, &test_pairs, TestSubset::Small)?;
            Ok([bg.mean_mae, bs.mean_mae, ag.mean_mae, asml.mean_mae])
        })();
        let [bg, bs, ag, asml] = match reports {
            Ok(v) => v,
            Err(e) => {
                ctx.fail(&format!("evaluate-s{group_seed}"), &e);
                break;
            }
        };
        runs.push(EvalRun {
            method: "baseline".into(),
            seed: group_seed,
            general: bg,
            small: bs,
        });
        runs.push(EvalRun {
            method: method.clone(),
            seed: group_seed,
            general: ag,
            small: asml,
        });
        if gi == 0 {
            report_models = Some((baseline, augmented));
            report_samples = samples;
        }
    }

    // Persist per-seed rows and the aggregated Table-III-style comparison.
    let comparison = if runs.is_empty() {
        Vec::new()
    } else {
        let rows: Vec<Vec<String>> = runs
            .iter()
            .flat_map(|r| {
                [
                    vec![
                        r.method.clone(),
                        r.seed.to_string(),
                        "general".into(),
                        fmt_f64(r.general),
                    ],
                    vec![
                        r.method.clone(),
                        r.seed.to_string(),
                        "small".into(),
                        fmt_f64(r.small),
                    ],
                ]
            })
            .collect();
        if let Err(e) = write_csv(
            &run_dir.join("comparison_runs.csv"),
            "method,seed,subset,mae",
            &rows,
        ) {
            ctx.fail("comparison-runs", &e);
        }
        let mut table: Vec<ComparisonRow> = Vec::new();
        for m in ["baseline", method.as_str()] {
            for subset in ["general", "small"] {
                let vals: Vec<f64> = runs
                    .iter()
                    .filter(|r| r.method == m)
                    .map(|r| if subset == "general" { r.general } else { r.small })
                    .collect();
                let (mean, std) = mean_std(&vals);
                table.push(ComparisonRow {
                    method: m.to_string(),
                    subset: subset.to_string(),
                    mean_mae: mean,
                    std_mae: std,
                    n_seeds: vals.len(),
                });
            }
        }
        let rows: Vec<Vec<String>> = table
            .iter()
            .map(|r| {
                vec![
                    r.method.clone(),
                    r.subset.clone(),
                    fmt_f64(r.mean_mae),
                    fmt_f64(r.std_mae),
                    r.n_seeds.to_string(),
                ]
            })
            .collect();
        if let Err(e) = write_csv(
            &run_dir.join("comparison.csv"),
            "method,subset,mean_mae,std_mae,n_seeds",
            &rows,
        ) {
            ctx.fail("comparison-table", &e);
        }
        table
    };

    // Diagnostic report for the first seed group.
    if let Some((mut baseline, mut augmented)) = report_models {
        let figures = run_dir.join("figures");
        ctx.uncached("report", &figures, |dir| {
            write_report(
                cfg,
                dir,
                &scenarios,
                &test,
                &mut gen,
                &report_samples,
                &mut baseline,
                &mut augmented,
                &test_pairs,
            )
        });
    }
    comparison
}

// ---------------------------------------------------------------------------
// Diagnostic report
// ---------------------------------------------------------------------------

/// RMS-average spectra over a set of maps against a common baseline.
fn mean_spectrum(maps: &[&Array2<f64>], baseline: &Array2<f64>) -> Result<Vec<f64>> {
    if maps.is_empty() {
        return Err(Error::Data("no maps for spectrum".into()));
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

#[allow(clippy::too_many_arguments)]
fn write_report(
    cfg: &ExperimentConfig,
    dir: &Path,
    scenarios: &[LeakageScenario],
    test: &[LeakageScenario],
    gen: &mut TrainedGenerator,
    samples: &[SyntheticSample],
    baseline: &mut TrainedInversion,
    augmented: &mut TrainedInversion,
    test_pairs: &[TrainingPair],
) -> Result<()> {
    let method = cfg.generator.model.as_str();

    // Leak-mass distribution over the whole dataset.
    let hist = mass_histogram(scenarios, 24)?;
    hist.write_csv(&dir.join("mass_histogram.csv"))?;
    plot::histogram_chart(
        &dir.join("mass_histogram.png"),
        "leak-mass distribution",
        "leak mass",
        &hist.bins,
    )?;

    // Generator reconstruction quality by year (linear baseline has none).
    if gen.kind != ModelKind::Linear {
        let curve = per_year_loss_curve(gen, test)?;
        write_per_year_csv(&dir.join("per_year.csv"), &curve)?;
        let pts: Vec<(f64, f64)> = curve
            .rows
            .iter()
            .filter_map(|r| r.mean.map(|m| (r.year as f64, m)))
            .collect();
        plot::line_chart(
            &dir.join("per_year.png"),
            "generator test loss by snapshot year",
            "year",
            "mean squared error",
            &[(method.to_string(), pts)],
        )?;
    }

    // True-vs-synthetic distribution projections and depth spectra need
    // synthetic maps; with a zero augmentation budget there are none.
    let true_maps: Vec<Array2<f64>> = test
        .iter()
        .flat_map(|s| s.maps.iter().map(|m| m.grid.clone()))
        .collect();
    if !samples.is_empty() {
        let syn_maps: Vec<Array2<f64>> = samples.iter().map(|s| s.map.clone()).collect();
        for (m, name) in [(ProjectionMethod::Pca, "pca"), (ProjectionMethod::Nmf, "nmf")] {
            let proj = project_2d(&true_maps, &syn_maps, m)?;
            write_projection_csv(&dir.join(format!("projection_{name}.csv")), &proj)?;
            plot::scatter_chart(
                &dir.join(format!("projection_{name}.png")),
                &format!("{name} projection (overlap {:.3})", proj.overlap),
                "component 1",
                "component 2",
                &[
                    ("true".to_string(), proj.true_points.iter().map(|p| (p[0], p[1])).collect()),
                    (
                        "generated".to_string(),
                        proj.gen_points.iter().map(|p| (p[0], p[1])).collect(),
                    ),
                ],
            )?;
        }
        let base_grid = generate_baseline(&cfg.datagen_config())?.grid;
        let true_spec = mean_spectrum(&test.iter().flat_map(|s| s.maps.iter().map(|m| &m.grid)).collect::<Vec<_>>(), &base_grid)?;
        let syn_spec = mean_spectrum(&samples.iter().map(|s| &s.map).collect::<Vec<_>>(), &base_grid)?;
        write_kz_csv(
            &dir.join("kz.csv"),
            &[("true".into(), true_spec.clone()), ("generated".into(), syn_spec.clone())],
        )?;
        let half = true_spec.len() / 2;
        plot::line_chart(
            &dir.join("kz.png"),
            "depth-wavenumber spectra of leak perturbations",
            "wavenumber bin",
            "rms magnitude",
            &[
                ("true".to_string(), true_spec.iter().take(half).enumerate().map(|(i, &v)| (i as f64, v)).collect()),
                ("generated".to_string(), syn_spec.iter().take(half).enumerate().map(|(i, &v)| (i as f64, v)).collect()),
            ],
        )?;
    }

    // Per-sample metrics and small-leak MAE box plots for both models.
    let ssim_cfg = SsimConfig::default();
    let base_metrics = metrics_per_sample(baseline, test_pairs, &ssim_cfg)?;
    let aug_metrics = metrics_per_sample(augmented, test_pairs, &ssim_cfg)?;
    write_metrics_csv(&dir.join("baseline_metrics.csv"), &base_metrics)?;
    write_metrics_csv(&dir.join("augmented_metrics.csv"), &aug_metrics)?;
    let small = |ms: &[crate::evaluate::SampleMetrics]| -> Vec<f64> {
        ms.iter()
            .filter(|m| m.class.is_small_leak())
            .map(|m| m.mae)
            .collect()
    };
    let b_small = small(&base_metrics);
    let a_small = small(&aug_metrics);
    if !b_small.is_empty() && !a_small.is_empty() {
        let b_stats = boxplot_stats(&b_small)?;
        let a_stats = boxplot_stats(&a_small)?;
        write_boxplot_csv(&dir.join("boxplot_baseline.csv"), &b_stats)?;
        write_boxplot_csv(&dir.join("boxplot_augmented.csv"), &a_stats)?;
        plot::boxplot_chart(
            &dir.join("boxplot.png"),
            "small-leak test MAE",
            "MAE (m/s)",
            &[("baseline".into(), b_stats), (method.into(), a_stats)],
        )?;
    }

    // Map montage: truth row, generator reconstruction row (when available),
    // inversion prediction rows for the first test scenario.
    let probe = &test[0];
    let years = [0usize, probe.maps.len() / 2, probe.maps.len() - 1];
    let mut tiles: Vec<Array2<f64>> = years.iter().map(|&k| probe.maps[k].grid.clone()).collect();
    if gen.kind.is_vae_family() {
        for &k in &years {
            tiles.push(gen.reconstruct(&probe.maps[k].grid)?);
        }
    }
    for &k in &years {
        let idx = test_pairs
            .iter()
            .position(|p| p.target == probe.maps[k].grid)
            .ok_or_else(|| Error::Data("probe scenario missing from test pairs".into()))?;
        tiles.push(baseline.invnet_forward(&test_pairs[idx].gathers)?);
    }
    plot::map_montage(&dir.join("montage.png"), &tiles, 3)?;

    // Loss-history curves for the first seed group's two inversion nets are
    // already on disk in their checkpoint dirs; re-plot generator history.
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep_size
// ---------------------------------------------------------------------------

/// One aggregated sweep row.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub size: usize,
    pub mean_small: f64,
    pub std_small: f64,
    pub n_seeds: usize,
}

/// Result of the augmentation-size sweep.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub dir: PathBuf,
    pub manifest_hash: String,
    pub failure: Option<String>,
    /// Sorted ascending by size.
    pub rows: Vec<SweepRow>,
}

/// Vary the synthetic-sample budget, retraining the augmented inversion net
/// per (size, seed group) on top of cached data/sim/generator stages, and
/// aggregate the small-leak test loss per size.
pub fn sweep_size(cfg: &ExperimentConfig, sizes: &[usize]) -> Result<SweepResult> {
    cfg.validate()?;
    if sizes.is_empty() {
        return Err(Error::Config("sweep needs at least one size".into()));
    }
    let content_hash = cfg.content_hash();
    let dir = cfg.run.output.join(format!("sweep-{}", &content_hash[..12]));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    let mut ctx = StageCtx::new(cache_root(cfg));
    let mut per_run: Vec<(usize, u64, f64, f64)> = Vec::new(); // size, seed, small, general

    'outer: {
        let Some(scenarios) = data_stage(&mut ctx, cfg) else {
            break 'outer;
        };
        let (train, test) = match split_dataset(&scenarios, cfg.data.train_fraction) {
            Ok(x) => x,
            Err(e) => {
                ctx.fail("split", &e);
                break 'outer;
            }
        };
        let Some(gather_dir) = sim_stage(&mut ctx, cfg, &scenarios) else {
            break 'outer;
        };
        let gen_seed = derive_seed(cfg.run.seeds[0], "generator", 0);
        let Some(mut gen) = generator_stage(&mut ctx, cfg, &train, gen_seed) else {
            break 'outer;
        };
        let real = match load_pairs(&train, &gather_dir, cfg.sim.n_shots) {
            Ok(p) => p,
            Err(e) => {
                ctx.fail("load-train-pairs", &e);
                break 'outer;
            }
        };
        let test_pairs = match load_pairs(&test, &gather_dir, cfg.sim.n_shots) {
            Ok(p) => p,
            Err(e) => {
                ctx.fail("load-test-pairs", &e);
                break 'outer;
            }
        };
        let tag = AugTag::from_kind(cfg.generator.model);
        for &size in sizes {
            for &group_seed in &cfg.run.seeds {
                let aug_seed = derive_seed(group_seed, "augment", 0);
                let inv_seed = derive_seed(group_seed, "inversion", 0);
                let Some(samples) = augment_stage(
                    &mut ctx,
                    cfg,
                    &mut gen,
                    &train,
                    size,
                    aug_seed,
                    &format!("augment-n{size}-s{group_seed}"),
                ) else {
                    break 'outer;
                };
                let synthetic = match make_synthetic_pairs(&samples, &cfg.sim_config(), tag) {
                    Ok(p) => p,
                    Err(e) => {
                        ctx.fail(&format!("synthetic-gathers-n{size}-s{group_seed}"), &e);
                        break 'outer;
                    }
                };
                let aug_parent = format!(
                    "augmentation = {}\n{}count = {size}\nseed = {aug_seed}\n",
                    tag.as_str(),
                    cfg.augment_text()
                );
                let Some(mut model) = inversion_stage(
                    &mut ctx,
                    cfg,
                    &real,
                    &synthetic,
                    inv_seed,
                    &aug_parent,
                    &format!("inv-n{size}-s{group_seed}"),
                ) else {
                    break 'outer;
                };
                let result = test_inversion(&mut model, &test_pairs, TestSubset::Small)
                    .and_then(|s| {
                        test_inversion(&mut model, &test_pairs, TestSubset::General)
                            .map(|g| (s.mean_mae, g.mean_mae))
                    });
                match result {
                    Ok((s, g)) => per_run.push((size, group_seed, s, g)),
                    Err(e) => {
                        ctx.fail(&format!("evaluate-n{size}-s{group_seed}"), &e);
                        break 'outer;
                    }
                }
            }
        }
    }

    // Persist per-run losses, then the aggregate (recomputable from them).
    let run_rows: Vec<Vec<String>> = per_run
        .iter()
        .map(|&(size, seed, s, g)| {
            vec![size.to_string(), seed.to_string(), fmt_f64(s), fmt_f64(g)]
        })
        .collect();
    write_csv(
        &dir.join("sweep_runs.csv"),
        "size,seed,small_mae,general_mae",
        &run_rows,
    )?;
    let mut sizes_seen: Vec<usize> = per_run.iter().map(|r| r.0).collect();
    sizes_seen.sort_unstable();
    sizes_seen.dedup();
    let rows: Vec<SweepRow> = sizes_seen
        .into_iter()
        .map(|size| {
            let vals: Vec<f64> = per_run
                .iter()
                .filter(|r| r.0 == size)
                .map(|r| r.2)
                .collect();
            let (mean, std) = mean_std(&vals);
            SweepRow {
                size,
                mean_small: mean,
                std_small: std,
                n_seeds: vals.len(),
            }
        })
        .collect();
    let agg_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.size.to_string(),
                fmt_f64(r.mean_small),
                fmt_f64(r.std_small),
                r.n_seeds.to_string(),
            ]
        })
        .collect();
    write_csv(
        &dir.join("sweep.csv"),
        "size,mean_small_mae,std_small_mae,n_seeds",
        &agg_rows,
    )?;
    if !rows.is_empty() {
        let pts: Vec<(f64, f64, f64)> = rows
            .iter()
            .map(|r| (r.size as f64, r.mean_small, r.std_small))
            .collect();
        if let Err(e) = plot::errorbar_chart(
            &dir.join("sweep.png"),
            "small-leak test MAE vs augmentation size",
            "synthetic samples",
            "MAE (m/s)",
            &pts,
        ) {
            ctx.fail("sweep-plot", &e);
        }
    }
    let manifest_hash =
        ctx.write_manifest(&dir.join("manifest.txt"), &content_hash, &cfg.run.seeds)?;
    Ok(SweepResult {
        dir,
        manifest_hash,
        failure: ctx.failure().map(str::to_string),
        rows,
    })
}

// ---------------------------------------------------------------------------
// grid_search
// ---------------------------------------------------------------------------

/// Which hyper-parameter the grid walks, with the grid itself.
#[derive(Debug, Clone)]
pub enum GridSpec {
    /// Perception-loss layer selections (trains `vae_percep` generators).
    Layers(Vec<LayerSelection>),
    /// Temporal-regularization weights (trains `vae_reg` generators).
    Gammas(Vec<f64>),
}

impl GridSpec {
    /// The full default grids: all four layer selections, γ over the seven
    /// decades 1e-3..1e3.
    pub fn default_layers() -> Self {
        GridSpec::Layers(vec![
            LayerSelection::A,
            LayerSelection::B,
            LayerSelection::C,
            LayerSelection::D,
        ])
    }

    pub fn default_gammas() -> Self {
        GridSpec::Gammas((-3..=3).map(|e| 10f64.powi(e)).collect())
    }

    pub fn param_name(&self) -> &'static str {
        match self {
            GridSpec::Layers(_) => "layers",
            GridSpec::Gammas(_) => "gamma",
        }
    }

    fn len(&self) -> usize {
        match self {
            GridSpec::Layers(v) => v.len(),
            GridSpec::Gammas(v) => v.len(),
        }
    }
}

/// One grid point's outcome.
#[derive(Debug, Clone)]
pub struct GridRow {
    pub param: String,
    pub label: String,
    pub test_loss: f64,
}

/// Result of a hyper-parameter grid search.
#[derive(Debug, Clone)]
pub struct GridResult {
    pub dir: PathBuf,
    pub manifest_hash: String,
    pub failure: Option<String>,
    pub rows: Vec<GridRow>,
}

/// Mean per-map generator loss (reconstruction + KL, in normalized units)
/// on the test maps — a common scale for comparing grid points whose
/// training objectives differ.
fn generator_test_loss(gen: &mut TrainedGenerator, test: &[LeakageScenario]) -> Result<f64> {
    let norm = gen.norm;
    let rows = gen.rows;
    let cols = gen.cols;
    let net = gen
        .net
        .as_mut()
        .ok_or_else(|| Error::Config("generator has no network to evaluate".into()))?;
    let maps: Vec<&Array2<f64>> = test
        .iter()
        .flat_map(|s| s.maps.iter().map(|m| &m.grid))
        .collect();
    if maps.is_empty() {
        return Err(Error::Data("no test maps".into()));
    }
    let mut x = Array4::<f32>::zeros((maps.len(), 1, rows, cols));
    for (i, m) in maps.iter().enumerate() {
        let u: Array2<f32> = norm.to_unit(m);
        x.index_axis_mut(ndarray::Axis(0), i)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(&u);
    }
    crate::nn::zero_grads(net);
    // Zero noise makes the reparameterized code collapse to the mean, so
    // the metric is deterministic.
    let eps = Array2::<f32>::zeros((maps.len(), net.latent));
    let losses = loss_and_grads(
        net,
        ModelKind::Vae,
        &TrainBatch::Singles { x },
        0.0,
        LayerSelection::A,
        Some(&eps),
        None,
    )?;
    crate::nn::zero_grads(net);
    Ok(losses[0] / maps.len() as f64)
}

/// Train one generator per grid point (shared data and seed) and report a
/// common test-set loss per point.
pub fn grid_search(cfg: &ExperimentConfig, spec: &GridSpec) -> Result<GridResult> {
    cfg.validate()?;
    if spec.len() == 0 {
        return Err(Error::Config("grid search needs at least one point".into()));
    }
    let content_hash = cfg.content_hash();
    let dir = cfg
        .run
        .output
        .join(format!("grid-{}-{}", spec.param_name(), &content_hash[..12]));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.txt"), cfg.to_text())?;
    let mut ctx = StageCtx::new(cache_root(cfg));
    let mut rows: Vec<GridRow> = Vec::new();

    'outer: {
        let Some(scenarios) = data_stage(&mut ctx, cfg) else {
            break 'outer;
        };
        let (train, test) = match split_dataset(&scenarios, cfg.data.train_fraction) {
            Ok(x) => x,
            Err(e) => {
                ctx.fail("split", &e);
                break 'outer;
            }
        };
        let gen_seed = derive_seed(cfg.run.seeds[0], "generator", 0);
        let labels: Vec<String> = match spec {
            GridSpec::Layers(v) => v.iter().map(|l| l.name().to_string()).collect(),
            GridSpec::Gammas(v) => v.iter().map(|g| format!("{g}")).collect(),
        };
        for (i, label) in labels.iter().enumerate() {
            // Each point trains the model family the parameter belongs to.
            let mut point_cfg = cfg.clone();
            match spec {
                GridSpec::Layers(v) => {
                    point_cfg.generator.model = ModelKind::VaePercep;
                    point_cfg.generator.layers = v[i];
                }
                GridSpec::Gammas(v) => {
                    point_cfg.generator.model = ModelKind::VaeReg;
                    point_cfg.generator.gamma = v[i];
                }
            }
            let Some(mut gen) = generator_stage(&mut ctx, &point_cfg, &train, gen_seed) else {
                break 'outer;
            };
            match generator_test_loss(&mut gen, &test) {
                Ok(loss) => rows.push(GridRow {
                    param: spec.param_name().to_string(),
                    label: label.clone(),
                    test_loss: loss,
                }),
                Err(e) => {
                    ctx.fail(&format!("grid-eval-{label}"), &e);
                    break 'outer;
                }
            }
        }
    }

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.param.clone(), r.label.clone(), fmt_f64(r.test_loss)])
        .collect();
    write_csv(&dir.join("grid.csv"), "param,value,test_loss", &csv_rows)?;
    if !rows.is_empty() {
        let bars: Vec<(String, f64)> = rows
            .iter()
            .map(|r| (r.label.clone(), r.test_loss))
            .collect();
        if let Err(e) = plot::bar_chart(
            &dir.join("grid.png"),
            &format!("generator test loss vs {}", spec.param_name()),
            "test loss",
            &bars,
        ) {
            ctx.fail("grid-plot", &e);
        }
    }
    let manifest_hash =
        ctx.write_manifest(&dir.join("manifest.txt"), &content_hash, &cfg.run.seeds)?;
    Ok(GridResult {
        dir,
        manifest_hash,
        failure: ctx.failure().map(str::to_string),
        rows,
    })
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataSection, RunSection};
    use crate::io::read_csv;

    /// A micro profile that drives every pipeline stage in seconds: tiny
    /// grids, one shot, short simulations, two-epoch trainings.
    fn micro(output: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk();
        cfg.data = DataSection {
            scenarios: 5,
            rows: 16,
            cols: 16,
            train_fraction: 0.7,
            seed: 5150,
        };
        cfg.sim.n_shots = 1;
        cfg.sim.nt = 128;
        cfg.generator.epochs = 2;
        cfg.generator.widths = vec![4, 8];
        cfg.generator.latent = 8;
        cfg.inversion.epochs = 2;
        cfg.inversion.batch = 8;
        cfg.inversion.enc_widths = vec![4, 8];
        cfg.inversion.dec_widths = vec![8, 4];
        cfg.inversion.bottleneck = 16;
        cfg.inversion.time_downsample = 8;
        cfg.augment.count = 6;
        cfg.run = RunSection {
            seeds: vec![3],
            output: output.to_path_buf(),
        };
        cfg.validate().unwrap();
        cfg
    }

    fn read_manifest(dir: &Path) -> Meta {
        Meta::load(&dir.join("manifest.txt")).unwrap()
    }

    #[test]
    fn micro_run_produces_comparison_and_deterministic_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = micro(&tmp.path().join("out"));
        let summary = run_experiment(&cfg).unwrap();
        assert!(summary.failure.is_none(), "failure: {:?}", summary.failure);
        assert_eq!(summary.comparison.len(), 4);
        for row in &summary.comparison {
            assert!(row.mean_mae.is_finite() && row.mean_mae > 0.0);
            assert_eq!(row.n_seeds, 1);
            assert_eq!(row.std_mae, 0.0, "single seed has zero spread");
        }
        // Artifacts exist.
        for f in ["comparison.csv", "comparison_runs.csv", "manifest.txt", "config.txt"] {
            assert!(summary.dir.join(f).is_file(), "missing {f}");
        }
        for f in [
            "mass_histogram.csv",
            "per_year.csv",
            "projection_pca.csv",
            "projection_nmf.csv",
            "kz.csv",
            "baseline_metrics.csv",
            "montage.png",
        ] {
            assert!(summary.dir.join("figures").join(f).is_file(), "missing figures/{f}");
        }
        // Rerun: everything cached, same manifest hash, same comparison.
        let manifest1 = read_manifest(&summary.dir);
        let summary2 = run_experiment(&cfg).unwrap();
        assert_eq!(summary.manifest_hash, summary2.manifest_hash);
        let manifest2 = read_manifest(&summary2.dir);
        assert_eq!(
            manifest1.get("manifest_hash").unwrap(),
            manifest2.get("manifest_hash").unwrap()
        );
        assert_eq!(manifest2.get("stage.data.status").unwrap(), "cached");
        assert_eq!(manifest2.get("stage.generator.status").unwrap(), "cached");
        assert_eq!(
            manifest1.get("stage.data.checksum").unwrap(),
            manifest2.get("stage.data.checksum").unwrap()
        );
        for (a, b) in summary.comparison.iter().zip(summary2.comparison.iter()) {
            assert_eq!(a.mean_mae, b.mean_mae);
        }
        // The comparison table is recomputable from the per-seed rows.
        let (_, runs) = read_csv(&summary.dir.join("comparison_runs.csv")).unwrap();
        for row in &summary.comparison {
            let vals: Vec<f64> = runs
                .iter()
                .filter(|r| r[0] == row.method && r[2] == row.subset)
                .map(|r| r[3].parse::<f64>().unwrap())
                .collect();
            let (mean, std) = mean_std(&vals);
            assert!((mean - row.mean_mae).abs() <= 1e-12 * mean.abs().max(1.0));
            assert!((std - row.std_mae).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_augmentation_budget_reproduces_the_baseline_net() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = micro(&tmp.path().join("out"));
        cfg.augment.count = 0;
        let summary = run_experiment(&cfg).unwrap();
        assert!(summary.failure.is_none(), "failure: {:?}", summary.failure);
        // With zero synthetic samples the augmented net trains on exactly
        // the baseline's data with the baseline's seed: identical weights.
        let cache = cache_root(&cfg);
        let find = |prefix: &str| -> PathBuf {
            let mut hits: Vec<PathBuf> = std::fs::read_dir(&cache)
                .unwrap()
                .map(|e| e.unwrap().path())
                .filter(|p| {
                    p.file_name()
                        .unwrap()
                        .to_str()
                        .unwrap()
                        .starts_with(prefix)
                })
                .collect();
            assert_eq!(hits.len(), 1, "expected one {prefix}* cache dir");
            hits.pop().unwrap()
        };
        let base = find("inv-baseline-s3");
        let aug = find("inv-augmented-s3");
        let wb = std::fs::read(base.join("weights.w32")).unwrap();
        let wa = std::fs::read(aug.join("weights.w32")).unwrap();
        assert_eq!(wb, wa, "zero-count augmentation must not change training");
        // And the comparison rows agree exactly.
        let by_subset = |method: &str, subset: &str| -> f64 {
            summary
                .comparison
                .iter()
                .find(|r| r.method == method && r.subset == subset)
                .unwrap()
                .mean_mae
        };
        assert_eq!(by_subset("baseline", "general"), by_subset("vae_reg", "general"));
        assert_eq!(by_subset("baseline", "small"), by_subset("vae_reg", "small"));
    }

    #[test]
    fn stage_failure_is_recorded_and_downstream_skipped() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = micro(&tmp.path().join("out"));
        // An unsatisfiable split: 2 scenarios at 0.9 rounds to 2/0.
        cfg.data.scenarios = 2;
        cfg.data.train_fraction = 0.9;
        let summary = run_experiment(&cfg).unwrap();
        let failure = summary.failure.expect("split must fail");
        assert!(failure.starts_with("split:"), "got {failure}");
        assert!(summary.comparison.is_empty());
        let manifest = read_manifest(&summary.dir);
        assert_eq!(manifest.get("stage.data.status").unwrap(), "ok");
        assert_eq!(manifest.get("stage.split.status").unwrap(), "failed");
        // Downstream stages are present in the manifest but skipped.
        assert_eq!(manifest.get("stage.sim.status").unwrap(), "skipped");
        assert_eq!(manifest.get("stage.generator.status").unwrap(), "skipped");
        assert_eq!(manifest.get("stage.report.status").unwrap(), "skipped");
    }

    #[test]
    fn sweep_rows_are_sorted_and_recomputable() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = micro(&tmp.path().join("out"));
        cfg.run.seeds = vec![3, 4];
        let result = sweep_size(&cfg, &[8, 4]).unwrap();
        assert!(result.failure.is_none(), "failure: {:?}", result.failure);
        assert_eq!(result.rows.len(), 2);
        assert_eq!(result.rows[0].size, 4);
        assert_eq!(result.rows[1].size, 8);
        for r in &result.rows {
            assert_eq!(r.n_seeds, 2);
            assert!(r.mean_small.is_finite() && r.mean_small > 0.0);
            assert!(r.std_small >= 0.0);
        }
        // Aggregates match a recomputation from the persisted per-run rows.
        let (_, runs) = read_csv(&result.dir.join("sweep_runs.csv")).unwrap();
        assert_eq!(runs.len(), 4);
        for row in &result.rows {
            let vals: Vec<f64> = runs
                .iter()
                .filter(|r| r[0].parse::<usize>().unwrap() == row.size)
                .map(|r| r[2].parse::<f64>().unwrap())
                .collect();
            let (mean, std) = mean_std(&vals);
            assert!((mean - row.mean_small).abs() <= 1e-12 * mean.abs().max(1.0));
            assert!((std - row.std_small).abs() <= 1e-12 * std.abs().max(1.0));
        }
        // The sweep reused the run-level stages: rerunning the sweep is
        // fully cached and hash-stable.
        let again = sweep_size(&cfg, &[8, 4]).unwrap();
        assert_eq!(result.manifest_hash, again.manifest_hash);
        // Same-seed, same-size points share augmentation prefixes by
        // construction; distinct sizes still yield distinct loss rows.
        assert!(result.dir.join("sweep.png").is_file());
    }

    #[test]
    fn gamma_grid_trains_one_generator_per_point() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = micro(&tmp.path().join("out"));
        let result = grid_search(&cfg, &GridSpec::Gammas(vec![1.0, 100.0])).unwrap();
        assert!(result.failure.is_none(), "failure: {:?}", result.failure);
        assert_eq!(result.rows.len(), 2);
        for r in &result.rows {
            assert_eq!(r.param, "gamma");
            assert!(r.test_loss.is_finite() && r.test_loss > 0.0);
        }
        assert_eq!(result.rows[0].label, "1");
        assert_eq!(result.rows[1].label, "100");
        // Distinct gammas are distinct generators (distinct cache keys) and
        // generally distinct losses.
        assert_ne!(result.rows[0].test_loss, result.rows[1].test_loss);
        let (header, rows) = read_csv(&result.dir.join("grid.csv")).unwrap();
        assert_eq!(header, vec!["param", "value", "test_loss"]);
        assert_eq!(rows.len(), 2);
        // Recorded CSV losses parse back to the returned values exactly.
        for (csv_row, r) in rows.iter().zip(result.rows.iter()) {
            assert_eq!(csv_row[2].parse::<f64>().unwrap(), r.test_loss);
        }
        // A single-point grid equals a direct train+test at that value.
        let single = grid_search(&cfg, &GridSpec::Gammas(vec![100.0])).unwrap();
        assert_eq!(single.rows.len(), 1);
        assert_eq!(single.rows[0].test_loss, result.rows[1].test_loss);
    }

    #[test]
    fn layers_grid_runs_on_a_tiny_extractor_budget() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = micro(&tmp.path().join("out"));
        // The fixed feature extractor needs at least 32×32 inputs.
        cfg.data.rows = 32;
        cfg.data.cols = 32;
        cfg.data.scenarios = 3;
        cfg.generator.epochs = 1;
        let result = grid_search(&cfg, &GridSpec::Layers(vec![LayerSelection::A])).unwrap();
        assert!(result.failure.is_none(), "failure: {:?}", result.failure);
        assert_eq!(result.rows.len(), 1);
        assert_eq!(result.rows[0].param, "layers");
        assert_eq!(result.rows[0].label, "A");
        assert!(result.rows[0].test_loss.is_finite());
    }

    #[test]
    fn seismo_cache_env_overrides_cache_root() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = micro(&tmp.path().join("out"));
        assert_eq!(cache_root(&cfg), tmp.path().join("out").join("cache"));
        // The env override is read at call time. Serialize access via a
        // fresh variable value and restore afterwards.
        std::env::set_var("SEISMO_CACHE", tmp.path().join("elsewhere"));
        assert_eq!(cache_root(&cfg), tmp.path().join("elsewhere"));
        std::env::remove_var("SEISMO_CACHE");
        assert_eq!(cache_root(&cfg), tmp.path().join("out").join("cache"));
    }

    #[test]
    fn dir_checksum_tracks_content_and_ignores_marker() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(tmp.path().join("a.txt"), b"alpha").unwrap();
        std::fs::create_dir(tmp.path().join("sub")).unwrap();
        std::fs::write(tmp.path().join("sub/b.bin"), [1u8, 2, 3]).unwrap();
        let c1 = dir_checksum(tmp.path()).unwrap();
        std::fs::write(tmp.path().join(".complete"), b"").unwrap();
        assert_eq!(c1, dir_checksum(tmp.path()).unwrap());
        std::fs::write(tmp.path().join("sub/b.bin"), [1u8, 2, 4]).unwrap();
        assert_ne!(c1, dir_checksum(tmp.path()).unwrap());
    }
}
