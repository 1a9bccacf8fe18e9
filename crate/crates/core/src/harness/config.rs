//! Flat `key = value` experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::models::NoiseNorm;
use crate::processes::{BesovSpec, ProcessPrior};

macro_rules! keyword_enum {
    ($(#[$m:meta])* $name:ident { $($var:ident => $kw:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq)]
        pub enum $name { $($var),+ }

        impl $name {
            pub fn as_str(&self) -> &'static str {
                match self { $(Self::$var => $kw),+ }
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($kw => Ok(Self::$var),)+
                    other => Err(Error::Parse(format!(
                        concat!("unknown ", stringify!($name), " '{}' (expected one of: {})"),
                        other,
                        [$($kw),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

keyword_enum!(Experiment {
    TsStep => "ts_step",
    TsTurning => "ts_turning",
    TsPredict => "ts_predict",
    ImageDeblur => "image_deblur",
});

keyword_enum!(PriorKind {
    Gp => "gp",
    Qep => "qep",
    Besov => "besov",
});

keyword_enum!(
    /// Trajectory used by `ts_predict`.
    Series { Step => "step", Turning => "turning" }
);

keyword_enum!(
    /// Latent parameterization for GP/Q-EP priors.
    RepresentationKind { Direct => "direct", Joint => "joint", Independent => "independent" }
);

keyword_enum!(
    /// Starting point of the posterior sampler.
    ChainStart { Prior => "prior", Map => "map" }
);

impl Experiment {
    pub fn is_image(&self) -> bool {
        matches!(self, Experiment::ImageDeblur)
    }
}

/// All knobs of an experiment run. Optional fields fall back to
/// experiment-dependent defaults through the `effective_*` accessors.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub series: Series,
    pub prior: PriorKind,
    pub q: f64,
    pub kernel: KernelFamily,
    pub nu: f64,
    pub sigma2: f64,
    pub lengthscale: f64,
    pub exponent: f64,
    pub besov_kappa: f64,
    pub besov_s: f64,
    pub truncation: Option<usize>,
    pub representation: Option<RepresentationKind>,
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub blur_length: usize,
    pub blur_angle: f64,
    pub noise_ratio: Option<f64>,
    pub noise_norm: NoiseNorm,
    pub samples: usize,
    pub burnin: usize,
    pub mcmc_init: Option<ChainStart>,
    pub map_iter: usize,
    pub map_tol: f64,
    pub map_init_scale: f64,
    pub seed: u64,
    pub repeats: usize,
    pub band_level: f64,
    pub band_draws: usize,
    pub draws: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::TsStep,
            series: Series::Step,
            prior: PriorKind::Qep,
            q: 1.0,
            kernel: KernelFamily::Matern,
            nu: 0.5,
            sigma2: 1.0,
            lengthscale: 0.5,
            exponent: 1.0,
            besov_kappa: 1.0,
            besov_s: 1.0,
            truncation: None,
            representation: None,
            n: 200,
            rows: 32,
            cols: 32,
            blur_length: 5,
            blur_angle: 0.0,
            noise_ratio: None,
            noise_norm: NoiseNorm::Rms,
            samples: 10_000,
            burnin: 5_000,
            mcmc_init: None,
            map_iter: 5_000,
            map_tol: 1e-6,
            map_init_scale: 0.01,
            seed: 0,
            repeats: 1,
            band_level: 0.95,
            band_draws: 2_000,
            draws: 5,
            output_dir: None,
        }
    }
}

/// Keys accepted by [`ExperimentConfig::set`], in canonical order.
pub const KEYS: &[&str] = &[
    "experiment",
    "series",
    "prior",
    "q",
    "kernel",
    "nu",
    "sigma2",
    "lengthscale",
    "exponent",
    "besov_kappa",
    "besov_s",
    "truncation",
    "representation",
    "n",
    "rows",
    "cols",
    "blur_length",
    "blur_angle",
    "noise_ratio",
    "noise_norm",
    "samples",
    "burnin",
    "mcmc_init",
    "map_iter",
    "map_tol",
    "map_init_scale",
    "seed",
    "repeats",
    "band_level",
    "band_draws",
    "draws",
    "output_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("invalid value '{value}' for '{key}'")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "" | "auto" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

impl ExperimentConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "experiment" => self.experiment = v.parse()?,
            "series" => self.series = v.parse()?,
            "prior" => self.prior = v.parse()?,
            "q" => self.q = parse(key, v)?,
            "kernel" => {
                self.kernel = match v {
                    "matern" => KernelFamily::Matern,
                    "powexp" | "powered_exponential" => KernelFamily::PoweredExponential,
                    _ => return Err(Error::Parse(format!("unknown kernel '{v}' (expected matern or powexp)"))),
                }
            }
            "nu" => self.nu = parse(key, v)?,
            "sigma2" => self.sigma2 = parse(key, v)?,
            "lengthscale" => self.lengthscale = parse(key, v)?,
            "exponent" => self.exponent = parse(key, v)?,
            "besov_kappa" => self.besov_kappa = parse(key, v)?,
            "besov_s" => self.besov_s = parse(key, v)?,
            "truncation" => self.truncation = parse_opt(key, v)?,
            "representation" => self.representation = parse_opt(key, v)?,
            "n" => self.n = parse(key, v)?,
            "rows" => self.rows = parse(key, v)?,
            "cols" => self.cols = parse(key, v)?,
            "blur_length" => self.blur_length = parse(key, v)?,
            "blur_angle" => self.blur_angle = parse(key, v)?,
            "noise_ratio" => self.noise_ratio = parse_opt(key, v)?,
            "noise_norm" => self.noise_norm = v.parse()?,
            "samples" => self.samples = parse(key, v)?,
            "burnin" => self.burnin = parse(key, v)?,
            "mcmc_init" => self.mcmc_init = parse_opt(key, v)?,
            "map_iter" => self.map_iter = parse(key, v)?,
            "map_tol" => self.map_tol = parse(key, v)?,
            "map_init_scale" => self.map_init_scale = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "repeats" => self.repeats = parse(key, v)?,
            "band_level" => self.band_level = parse(key, v)?,
            "band_draws" => self.band_draws = parse(key, v)?,
            "draws" => self.draws = parse(key, v)?,
            "output_dir" => self.output_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            other => return Err(Error::Parse(format!("unknown configuration key '{other}'"))),
        }
        Ok(())
    }

    /// Text form of one key, as accepted by [`set`](Self::set).
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "experiment" => self.experiment.to_string(),
            "series" => self.series.to_string(),
            "prior" => self.prior.to_string(),
            "q" => self.q.to_string(),
            "kernel" => match self.kernel {
                KernelFamily::Matern => "matern".into(),
                KernelFamily::PoweredExponential => "powexp".into(),
            },
            "nu" => self.nu.to_string(),
            "sigma2" => self.sigma2.to_string(),
            "lengthscale" => self.lengthscale.to_string(),
            "exponent" => self.exponent.to_string(),
            "besov_kappa" => self.besov_kappa.to_string(),
            "besov_s" => self.besov_s.to_string(),
            "truncation" => opt_str(&self.truncation),
            "representation" => opt_str(&self.representation),
            "n" => self.n.to_string(),
            "rows" => self.rows.to_string(),
            "cols" => self.cols.to_string(),
            "blur_length" => self.blur_length.to_string(),
            "blur_angle" => self.blur_angle.to_string(),
            "noise_ratio" => opt_str(&self.noise_ratio),
            "noise_norm" => self.noise_norm.to_string(),
            "samples" => self.samples.to_string(),
            "burnin" => self.burnin.to_string(),
            "mcmc_init" => opt_str(&self.mcmc_init),
            "map_iter" => self.map_iter.to_string(),
            "map_tol" => self.map_tol.to_string(),
            "map_init_scale" => self.map_init_scale.to_string(),
            "seed" => self.seed.to_string(),
            "repeats" => self.repeats.to_string(),
            "band_level" => self.band_level.to_string(),
            "band_draws" => self.band_draws.to_string(),
            "draws" => self.draws.to_string(),
            "output_dir" => self
                .output_dir
                .as_ref()
                .map_or_else(String::new, |p| p.display().to_string()),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Canonical `key = value` listing; the output directory is omitted so
    /// the same experiment hashes identically wherever it is written.
    pub fn canonical(&self) -> String {
        KEYS.iter()
            .filter(|k| **k != "output_dir")
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    /// 64-bit FNV-1a hash of [`canonical`](Self::canonical), as hex.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.canonical().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    /// `q` actually used by the prior (2 for the GP).
    pub fn effective_q(&self) -> f64 {
        match self.prior {
            PriorKind::Gp => 2.0,
            _ => self.q,
        }
    }

    /// Truncation level: 2000 series terms for time series, 128 for images.
    pub fn effective_truncation(&self) -> usize {
        self.truncation
            .unwrap_or(if self.experiment.is_image() { 128 } else { 2000 })
    }

    pub fn effective_representation(&self) -> RepresentationKind {
        self.representation.unwrap_or(if self.experiment.is_image() {
            RepresentationKind::Joint
        } else {
            RepresentationKind::Direct
        })
    }

    /// Sampler start: the MAP estimate for images, a prior draw otherwise.
    pub fn effective_mcmc_init(&self) -> ChainStart {
        self.mcmc_init.unwrap_or(if self.experiment.is_image() {
            ChainStart::Map
        } else {
            ChainStart::Prior
        })
    }

    /// Series used by the time-series experiments.
    pub fn effective_series(&self) -> Series {
        match self.experiment {
            Experiment::TsTurning => Series::Turning,
            Experiment::TsStep => Series::Step,
            _ => self.series,
        }
    }

    /// Number of field values.
    pub fn field_len(&self) -> usize {
        if self.experiment.is_image() {
            self.rows * self.cols
        } else {
            self.n
        }
    }

    /// `<experiment>_<prior>_<q>_<seed>` for the given seed.
    pub fn stem(&self, seed: u64) -> String {
        format!("{}_{}_{}_{}", self.experiment, self.prior, self.effective_q(), seed)
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        match self.kernel {
            KernelFamily::Matern => KernelSpec::matern(self.nu, self.sigma2, self.lengthscale, self.exponent),
            KernelFamily::PoweredExponential => {
                KernelSpec::powered_exponential(self.sigma2, self.lengthscale, self.exponent)
            }
        }
    }

    pub fn process_prior(&self) -> Result<ProcessPrior> {
        Ok(match self.prior {
            PriorKind::Gp => ProcessPrior::Gp {
                kernel: self.kernel_spec()?,
            },
            PriorKind::Qep => ProcessPrior::Qep {
                kernel: self.kernel_spec()?,
                q: self.q,
            },
            PriorKind::Besov => ProcessPrior::Besov(BesovSpec::new(
                self.q,
                self.besov_kappa,
                self.besov_s,
                if self.experiment.is_image() { 2 } else { 1 },
                self.effective_truncation(),
            )?),
        })
    }

    /// Checks ranges that the individual modules would otherwise reject late.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        if !(self.q > 0.0) {
            return bad(format!("q must be positive, got {}", self.q));
        }
        if self.experiment.is_image() {
            if self.rows < 4 || self.cols < 4 {
                return bad("image needs at least 4x4 pixels".into());
            }
        } else if self.n < 2 {
            return bad("n must be at least 2".into());
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if !(self.band_level > 0.0 && self.band_level < 1.0) {
            return bad("band_level must lie in (0, 1)".into());
        }
        if !(self.map_init_scale > 0.0) {
            return bad("map_init_scale must be positive".into());
        }
        self.process_prior().map(|_| ())
    }
}

impl fmt::Display for ExperimentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}
