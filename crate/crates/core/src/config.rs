//! Experiment configuration: a flat `key = value` text format with
//! `[section]` headers, two built-in profiles (`desk`, `paper`), strict
//! rejection of unknown keys, and a canonical serialization whose SHA-256
//! digest keys the pipeline's stage cache.

use crate::datagen::DatagenConfig;
use crate::featureext::LayerSelection;
use crate::genmodels::{AlphaMode, AugmentConfig, GenHyper, ModelKind};
use crate::inversion::InvHyper;
use crate::wavesim::SimConfig;
use crate::{Error, Result};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Sections
// ---------------------------------------------------------------------------

/// `[data]` — scenario generation and the train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub scenarios: usize,
    pub rows: usize,
    pub cols: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

/// `[sim]` — forward-modeling discretization and acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSection {
    pub n_shots: usize,
    pub nt: usize,
    pub dt: f64,
    pub dx: f64,
    pub peak_frequency: f64,
    pub boundary_width: usize,
}

/// `[generator]` — generative-model family and its training hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSection {
    pub model: ModelKind,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub gamma: f64,
    pub layers: LayerSelection,
    pub latent: usize,
    pub widths: Vec<usize>,
}

/// `[inversion]` — inversion-network training hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub bottleneck: usize,
    pub time_downsample: usize,
    pub enc_widths: Vec<usize>,
    pub dec_widths: Vec<usize>,
}

/// `[augment]` — synthetic-sample budget and interpolation policy.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSection {
    pub count: usize,
    pub alpha_mode: AlphaMode,
    pub grid_points: usize,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
}

/// `[run]` — seed groups and the output root.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub output: PathBuf,
}

/// Complete experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub sim: SimSection,
    pub generator: GeneratorSection,
    pub inversion: InversionSection,
    pub augment: AugmentSection,
    pub run: RunSection,
}

// ---------------------------------------------------------------------------
// Profiles
// ---------------------------------------------------------------------------

impl ExperimentConfig {
    /// Desk profile: sized so the full end-to-end comparison finishes in
    /// well under half an hour on one commodity CPU core.
    pub fn desk() -> Self {
        ExperimentConfig {
            data: DataSection {
                scenarios: 60,
                rows: 64,
                cols: 64,
                train_fraction: 0.8,
                seed: 9001,
            },
            sim: SimSection {
                n_shots: 2,
                nt: 512,
                dt: 1e-3,
                dx: 10.0,
                peak_frequency: 15.0,
                boundary_width: 20,
            },
            generator: GeneratorSection {
                model: ModelKind::VaeReg,
                epochs: 15,
                batch: 32,
                lr: 1e-4,
                gamma: 1e2,
                layers: LayerSelection::D,
                latent: 64,
                widths: vec![16, 32, 64, 128],
            },
            inversion: InversionSection {
                epochs: 20,
                batch: 24,
                lr: 0.01,
                weight_decay: 1e-4,
                bottleneck: 128,
                time_downsample: 8,
                enc_widths: vec![8, 16, 32, 64, 64],
                dec_widths: vec![64, 32, 16, 8],
            },
            augment: AugmentSection {
                count: 300,
                alpha_mode: AlphaMode::Adjacent,
                grid_points: 21,
                alpha_lo: 0.6,
                alpha_hi: 1.0,
            },
            run: RunSection {
                seeds: vec![11, 22],
                output: PathBuf::from("runs"),
            },
        }
    }

    /// Paper-scale profile: 991 scenarios split 800/191, generator trained
    /// 100 epochs at batch 32 / lr 1e-4, inversion 80 epochs at batch 24 /
    /// lr 0.01 / weight decay 1e-4, 3000 synthetic maps, five seed groups.
    pub fn paper() -> Self {
        let mut cfg = Self::desk();
        cfg.data.scenarios = 991;
        cfg.data.train_fraction = 0.8073; // rounds to an 800/191 split
        cfg.sim.n_shots = 4;
        cfg.generator.epochs = 100;
        cfg.inversion.epochs = 80;
        cfg.augment.count = 3000;
        cfg.run.seeds = vec![11, 22, 33, 44, 55];
        cfg
    }

    /// Look a named profile up.
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown profile {other:?}; expected desk or paper"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| {
        Error::Config(format!(
            "[{section}] {key} = {raw:?} is not a valid {}",
            std::any::type_name::<T>()
        ))
    })
}

fn parse_list<T: std::str::FromStr>(section: &str, key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(section, key, s))
        .collect()
}

impl ExperimentConfig {
    /// Apply one `key = value` assignment to the named section. Unknown
    /// sections and keys are errors so config typos cannot pass silently.
    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match (section, key) {
            ("data", "scenarios") => self.data.scenarios = parse_num(section, key, value)?,
            ("data", "rows") => self.data.rows = parse_num(section, key, value)?,
            ("data", "cols") => self.data.cols = parse_num(section, key, value)?,
            ("data", "train_fraction") => {
                self.data.train_fraction = parse_num(section, key, value)?
            }
            ("data", "seed") => self.data.seed = parse_num(section, key, value)?,
            ("sim", "n_shots") => self.sim.n_shots = parse_num(section, key, value)?,
            ("sim", "nt") => self.sim.nt = parse_num(section, key, value)?,
            ("sim", "dt") => self.sim.dt = parse_num(section, key, value)?,
            ("sim", "dx") => self.sim.dx = parse_num(section, key, value)?,
            ("sim", "peak_frequency") => {
                self.sim.peak_frequency = parse_num(section, key, value)?
            }
            ("sim", "boundary_width") => {
                self.sim.boundary_width = parse_num(section, key, value)?
            }
            ("generator", "model") => self.generator.model = ModelKind::parse(value)?,
            ("generator", "epochs") => self.generator.epochs = parse_num(section, key, value)?,
            ("generator", "batch") => self.generator.batch = parse_num(section, key, value)?,
            ("generator", "lr") => self.generator.lr = parse_num(section, key, value)?,
            ("generator", "gamma") => self.generator.gamma = parse_num(section, key, value)?,
            ("generator", "layers") => self.generator.layers = LayerSelection::parse(value)?,
            ("generator", "latent") => self.generator.latent = parse_num(section, key, value)?,
            ("generator", "widths") => self.generator.widths = parse_list(section, key, value)?,
            ("inversion", "epochs") => self.inversion.epochs = parse_num(section, key, value)?,
            ("inversion", "batch") => self.inversion.batch = parse_num(section, key, value)?,
            ("inversion", "lr") => self.inversion.lr = parse_num(section, key, value)?,
            ("inversion", "weight_decay") => {
                self.inversion.weight_decay = parse_num(section, key, value)?
            }
            ("inversion", "bottleneck") => {
                self.inversion.bottleneck = parse_num(section, key, value)?
            }
            ("inversion", "time_downsample") => {
                self.inversion.time_downsample = parse_num(section, key, value)?
            }
            ("inversion", "enc_widths") => {
                self.inversion.enc_widths = parse_list(section, key, value)?
            }
            ("inversion", "dec_widths") => {
                self.inversion.dec_widths = parse_list(section, key, value)?
            }
            ("augment", "count") => self.augment.count = parse_num(section, key, value)?,
            ("augment", "alpha_mode") => self.augment.alpha_mode = AlphaMode::parse(value)?,
            ("augment", "grid_points") => {
                self.augment.grid_points = parse_num(section, key, value)?
            }
            ("augment", "alpha_lo") => self.augment.alpha_lo = parse_num(section, key, value)?,
            ("augment", "alpha_hi") => self.augment.alpha_hi = parse_num(section, key, value)?,
            ("run", "seeds") => self.run.seeds = parse_list(section, key, value)?,
            ("run", "output") => self.run.output = PathBuf::from(value),
            ("data" | "sim" | "generator" | "inversion" | "augment" | "run", _) => {
                return Err(Error::Config(format!("unknown key {key:?} in [{section}]")))
            }
            _ => return Err(Error::Config(format!("unknown section [{section}]"))),
        }
        Ok(())
    }

    /// Parse config text on top of a base profile. Lines are `key = value`
    /// under `[section]` headers; `#` starts a comment; blank lines are
    /// ignored.
    pub fn parse(text: &str, base: ExperimentConfig) -> Result<Self> {
        let mut cfg = base;
        let mut section: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {}: malformed section header {line:?}", lineno + 1))
                })?;
                section = Some(name.trim().to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {line:?}", lineno + 1))
            })?;
            let section = section.as_deref().ok_or_else(|| {
                Error::Config(format!("line {}: key before any [section]", lineno + 1))
            })?;
            cfg.apply(section, key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file on top of a base profile.
    pub fn from_file(path: &Path, base: ExperimentConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text, base)
    }

    /// Structural validation beyond what the per-module constructors check.
    pub fn validate(&self) -> Result<()> {
        if self.data.scenarios < 2 {
            return Err(Error::Config(format!(
                "need at least 2 scenarios to split train/test, got {}",
                self.data.scenarios
            )));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} must lie strictly between 0 and 1",
                self.data.train_fraction
            )));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::Config("seed list must not be empty".into()));
        }
        let gen_factor = 1usize << self.generator.widths.len();
        if self.data.rows % gen_factor != 0 || self.data.cols % gen_factor != 0 {
            return Err(Error::Config(format!(
                "grid {}×{} is not divisible by the generator's downsampling factor {}",
                self.data.rows, self.data.cols, gen_factor
            )));
        }
        if self.sim.nt % self.inversion.time_downsample != 0 {
            return Err(Error::Config(format!(
                "nt {} is not divisible by time_downsample {}",
                self.sim.nt, self.inversion.time_downsample
            )));
        }
        if self.augment.grid_points < 1 {
            return Err(Error::Config("grid_points must be at least 1".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Canonical text + hash
// ---------------------------------------------------------------------------

fn join_usize(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Canonical `[data]` block. The per-section texts key the pipeline's
    /// stage cache, so a change in one section only invalidates the stages
    /// that actually read it.
    pub fn data_text(&self) -> String {
        format!(
            "[data]\nscenarios = {}\nrows = {}\ncols = {}\ntrain_fraction = {}\nseed = {}\n",
            self.data.scenarios, self.data.rows, self.data.cols, self.data.train_fraction,
            self.data.seed
        )
    }

    /// Canonical `[sim]` block.
    pub fn sim_text(&self) -> String {
        format!(
            "[sim]\nn_shots = {}\nnt = {}\ndt = {}\ndx = {}\npeak_frequency = {}\nboundary_width = {}\n",
            self.sim.n_shots, self.sim.nt, self.sim.dt, self.sim.dx, self.sim.peak_frequency,
            self.sim.boundary_width
        )
    }

    /// Canonical `[generator]` block.
    pub fn generator_text(&self) -> String {
        format!(
            "[generator]\nmodel = {}\nepochs = {}\nbatch = {}\nlr = {}\ngamma = {}\nlayers = {}\nlatent = {}\nwidths = {}\n",
            self.generator.model.as_str(), self.generator.epochs, self.generator.batch,
            self.generator.lr, self.generator.gamma, self.generator.layers.name(),
            self.generator.latent, join_usize(&self.generator.widths)
        )
    }

    /// Canonical `[inversion]` block.
    pub fn inversion_text(&self) -> String {
        format!(
            "[inversion]\nepochs = {}\nbatch = {}\nlr = {}\nweight_decay = {}\nbottleneck = {}\ntime_downsample = {}\nenc_widths = {}\ndec_widths = {}\n",
            self.inversion.epochs, self.inversion.batch, self.inversion.lr,
            self.inversion.weight_decay, self.inversion.bottleneck,
            self.inversion.time_downsample, join_usize(&self.inversion.enc_widths),
            join_usize(&self.inversion.dec_widths)
        )
    }

    /// Canonical `[augment]` block.
    pub fn augment_text(&self) -> String {
        format!(
            "[augment]\ncount = {}\nalpha_mode = {}\ngrid_points = {}\nalpha_lo = {}\nalpha_hi = {}\n",
            self.augment.count, self.augment.alpha_mode.as_str(), self.augment.grid_points,
            self.augment.alpha_lo, self.augment.alpha_hi
        )
    }

    /// Canonical serialization: every key in a fixed order. Parsing this
    /// text on top of any base profile reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{}\n{}\n{}\n{}\n{}\n",
            self.data_text(),
            self.sim_text(),
            self.generator_text(),
            self.inversion_text(),
            self.augment_text()
        );
        let _ = write!(
            s,
            "[run]\nseeds = {}\noutput = {}\n",
            self.run
                .seeds
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(","),
            self.run.output.display()
        );
        s
    }

    /// SHA-256 of the canonical text, hex-encoded.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    /// Like [`hash`](Self::hash) but with the output path normalized away,
    /// so moving the result tree does not invalidate cached stages or
    /// rename run directories.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.run.output = PathBuf::from("-");
        c.hash()
    }
}

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

// ---------------------------------------------------------------------------
// Bridges into the module config types
// ---------------------------------------------------------------------------

impl ExperimentConfig {
    /// Scenario-generation config for the `[data]` section.
    pub fn datagen_config(&self) -> DatagenConfig {
        DatagenConfig {
            rows: self.data.rows,
            cols: self.data.cols,
            ..DatagenConfig::default()
        }
    }

    /// Acquisition + discretization for the `[sim]` section.
    pub fn sim_config(&self) -> SimConfig {
        let mut cfg = SimConfig::surface_acquisition(self.data.cols, self.sim.n_shots);
        cfg.nt = self.sim.nt;
        cfg.dt = self.sim.dt;
        cfg.dx = self.sim.dx;
        cfg.peak_frequency = self.sim.peak_frequency;
        cfg.boundary_width = self.sim.boundary_width;
        cfg
    }

    /// Generator hyper-parameters for a given training seed.
    pub fn gen_hyper(&self, seed: u64) -> GenHyper {
        GenHyper {
            epochs: self.generator.epochs,
            batch: self.generator.batch,
            lr: self.generator.lr,
            gamma: self.generator.gamma,
            layers: self.generator.layers,
            latent: self.generator.latent,
            widths: self.generator.widths.clone(),
            seed,
        }
    }

    /// Inversion hyper-parameters for a given training seed.
    pub fn inv_hyper(&self, seed: u64) -> InvHyper {
        InvHyper {
            epochs: self.inversion.epochs,
            batch: self.inversion.batch,
            lr: self.inversion.lr,
            weight_decay: self.inversion.weight_decay,
            enc_widths: self.inversion.enc_widths.clone(),
            bottleneck: self.inversion.bottleneck,
            dec_widths: self.inversion.dec_widths.clone(),
            time_downsample: self.inversion.time_downsample,
            seed,
        }
    }

    /// Augmentation config for a given sampling seed, with the count
    /// overridable (the size sweep varies it per point).
    pub fn augment_config(&self, count: usize, seed: u64) -> AugmentConfig {
        AugmentConfig {
            count,
            alpha_mode: self.augment.alpha_mode,
            grid_points: self.augment.grid_points,
            endpoint_alpha: (self.augment.alpha_lo, self.augment.alpha_hi),
            seed,
        }
    }
}

// ---------------------------------------------------------------------------
