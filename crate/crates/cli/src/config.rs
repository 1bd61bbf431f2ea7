use std::fs;
use std::path::{Path, PathBuf};

use cpd_core::data::SyntheticSpec;
use cpd_core::evaluation::{MultiView, ProbeConfig, DEFAULT_K};
use cpd_core::trainer::TrainingConfig;
use cpd_core::{Error, Result};

/// Every knob a command can read, in one flat key namespace.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub training: TrainingConfig,
    pub spec: SyntheticSpec,
    pub split_fractions: [f64; 3],
    pub split_seed: u64,
    pub probe: ProbeConfig,
    pub knn_k: usize,
    pub multi_view: MultiView,
    /// Paired dataset file; when unset, the synthetic benchmark is generated in memory.
    pub data: Option<PathBuf>,
    pub prototypes: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub metrics: Vec<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            training: TrainingConfig::default(),
            spec: SyntheticSpec::default(),
            split_fractions: [0.6, 0.2, 0.2],
            split_seed: 0,
            probe: ProbeConfig::default(),
            knn_k: DEFAULT_K,
            multi_view: MultiView::default(),
            data: None,
            prototypes: None,
            checkpoint: None,
            checkpoint_every: 0,
            metrics: Vec::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("cannot parse '{value}' for key '{key}'")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        match key {
            "classes" => self.spec.classes = parse(key, value)?,
            "per_class" => self.spec.per_class = parse(key, value)?,
            "d_v" => self.spec.d_v = parse(key, value)?,
            "d_t" => self.spec.d_t = parse(key, value)?,
            "sigma" => self.spec.sigma = parse(key, value)?,
            "rho" => self.spec.rho = parse(key, value)?,
            "latent_dim" => {
                self.spec.latent_dim = match value.trim() {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "data_seed" => self.spec.seed = parse(key, value)?,
            "split_train" => self.split_fractions[0] = parse(key, value)?,
            "split_val" => self.split_fractions[1] = parse(key, value)?,
            "split_test" => self.split_fractions[2] = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            "probe_lr" => self.probe.lr = parse(key, value)?,
            "probe_epochs" => self.probe.epochs = parse(key, value)?,
            "probe_decay_every" => self.probe.decay_every = parse(key, value)?,
            "probe_decay_factor" => self.probe.decay_factor = parse(key, value)?,
            "probe_batch_size" => self.probe.batch_size = parse(key, value)?,
            "probe_standardize" => self.probe.standardize = parse(key, value)?,
            "probe_beta1" => self.probe.beta1 = parse(key, value)?,
            "probe_beta2" => self.probe.beta2 = parse(key, value)?,
            "probe_eps" => self.probe.eps = parse(key, value)?,
            "probe_seed" => self.probe.seed = parse(key, value)?,
            "knn_k" => self.knn_k = parse(key, value)?,
            "mv_views" => self.multi_view.views = parse(key, value)?,
            "mv_noise" => self.multi_view.noise = parse(key, value)?,
            "mv_seed" => self.multi_view.seed = parse(key, value)?,
            "data" => self.data = opt_path(value),
            "prototypes" => self.prototypes = opt_path(value),
            "checkpoint" => self.checkpoint = opt_path(value),
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "metrics" => {
                self.metrics = value.split(',').filter_map(opt_path).collect();
            }
            _ if self.training.entries().iter().any(|(k, _)| *k == key) => self.training.set(key, value)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.spec.validate()?;
        self.probe.validate()?;
        if self.knn_k == 0 {
            return Err(Error::InvalidConfig("knn_k must be >= 1".into()));
        }
        if self.multi_view.views == 0 || !(self.multi_view.noise >= 0.0) {
            return Err(Error::InvalidConfig("mv_views must be >= 1 and mv_noise >= 0".into()));
        }
        let f = self.split_fractions;
        if f.iter().any(|x| !(*x >= 0.0)) || ((f[0] + f[1] + f[2]) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "split fractions must be >= 0 and sum to 1, got {f:?}"
            )));
        }
        Ok(())
    }

    /// Every key with its current value, in an order `set` accepts back.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .training
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let s = &self.spec;
        let p = &self.probe;
        let rest = [
            ("classes", s.classes.to_string()),
            ("per_class", s.per_class.to_string()),
            ("d_v", s.d_v.to_string()),
            ("d_t", s.d_t.to_string()),
            ("sigma", s.sigma.to_string()),
            ("rho", s.rho.to_string()),
            ("latent_dim", s.latent_dim.map_or("auto".to_string(), |d| d.to_string())),
            ("data_seed", s.seed.to_string()),
            ("split_train", self.split_fractions[0].to_string()),
            ("split_val", self.split_fractions[1].to_string()),
            ("split_test", self.split_fractions[2].to_string()),
            ("split_seed", self.split_seed.to_string()),
            ("probe_lr", p.lr.to_string()),
            ("probe_epochs", p.epochs.to_string()),
            ("probe_decay_every", p.decay_every.to_string()),
            ("probe_decay_factor", p.decay_factor.to_string()),
            ("probe_batch_size", p.batch_size.to_string()),
            ("probe_standardize", p.standardize.to_string()),
            ("probe_beta1", p.beta1.to_string()),
            ("probe_beta2", p.beta2.to_string()),
            ("probe_eps", p.eps.to_string()),
            ("probe_seed", p.seed.to_string()),
            ("knn_k", self.knn_k.to_string()),
            ("mv_views", self.multi_view.views.to_string()),
            ("mv_noise", self.multi_view.noise.to_string()),
            ("mv_seed", self.multi_view.seed.to_string()),
            ("data", show_path(&self.data)),
            ("prototypes", show_path(&self.prototypes)),
            ("checkpoint", show_path(&self.checkpoint)),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            (
                "metrics",
                self.metrics
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
        ];
        out.extend(rest.into_iter().map(|(k, v)| (k.to_string(), v)));
        out
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override '{o}' is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }
}
