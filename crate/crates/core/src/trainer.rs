//! Training loop: batch assembly, objective dispatch, memory-bank upkeep,
//! partition calibration and the two-stage curriculum.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::PairedDataset;
use crate::encoders::{embed_rows, sgd_step, EncoderGrads, EncoderParams, ForwardCache, Linear, OptimizerState};
use crate::error::{invalid, Error, Result};
use crate::evaluation::retrieval_recall;
use crate::memory_bank::{MemoryBank, Modality};
use crate::objectives::{cpd_loss_exact, mmid_loss_exact, nce_loss, ranking_loss, NceConfig, Temperature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    CpdNce,
    CpdExact,
    Mmid,
    Ranking,
}

impl Objective {
    pub const ALL: [Objective; 4] = [
        Objective::CpdNce,
        Objective::CpdExact,
        Objective::Mmid,
        Objective::Ranking,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::CpdNce => "cpd_nce",
            Objective::CpdExact => "cpd_exact",
            Objective::Mmid => "mmid",
            Objective::Ranking => "ranking",
        }
    }
}

/// Schedule of which encoders train when.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CurriculumMode {
    /// Text frozen until validation plateaus, then joint training.
    TwoStage,
    /// Text frozen throughout; stops at the first plateau.
    Stage1Only,
    /// Both encoders trained from the first epoch at `stage1_lr`.
    Direct,
}

impl CurriculumMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CurriculumMode::TwoStage => "two_stage",
            CurriculumMode::Stage1Only => "stage1_only",
            CurriculumMode::Direct => "direct",
        }
    }
}

/// Starting point of the text encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TextInit {
    /// Brief autoencoding fit on the training texts.
    Warmup,
    Random,
}

impl TextInit {
    pub fn as_str(self) -> &'static str {
        match self {
            TextInit::Warmup => "warmup",
            TextInit::Random => "random",
        }
    }
}

macro_rules! parse_enum {
    ($ty:ty, $what:literal, [$($variant:expr),+]) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                [$($variant),+]
                    .into_iter()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| {
                        let names: Vec<&str> = [$($variant.as_str()),+].to_vec();
                        invalid(format!(concat!("unknown ", $what, " '{}', expected one of {}"), s, names.join(", ")))
                    })
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

parse_enum!(
    Objective,
    "objective",
    [
        Objective::CpdNce,
        Objective::CpdExact,
        Objective::Mmid,
        Objective::Ranking
    ]
);
parse_enum!(
    CurriculumMode,
    "curriculum",
    [
        CurriculumMode::TwoStage,
        CurriculumMode::Stage1Only,
        CurriculumMode::Direct
    ]
);
parse_enum!(TextInit, "text_init", [TextInit::Warmup, TextInit::Random]);

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub objective: Objective,
    pub tau: f64,
    /// Noise samples per positive; clamped to the bank size at run time.
    pub m: usize,
    /// Ranking margin.
    pub delta: f64,
    pub batch_size: usize,
    pub stage1_lr: f64,
    pub stage2_lr_text: f64,
    pub stage2_lr_rest: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub seed: u64,
    pub bank_momentum: f64,
    pub exclude_positive: bool,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub curriculum: CurriculumMode,
    pub text_init: TextInit,
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            objective: Objective::CpdNce,
            tau: 0.07,
            m: 4096,
            delta: 0.5,
            batch_size: 8,
            stage1_lr: 0.1,
            stage2_lr_text: 3e-5,
            stage2_lr_rest: 0.01,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            max_epochs: 300,
            plateau_patience: 5,
            plateau_min_delta: 0.002,
            seed: 0,
            bank_momentum: 0.5,
            exclude_positive: true,
            hidden_dim: 128,
            embed_dim: 64,
            curriculum: CurriculumMode::TwoStage,
            text_init: TextInit::Warmup,
            warmup_epochs: 10,
            warmup_lr: 0.05,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| invalid(format!("bad value '{value}' for {key}: {e}")))
}

impl TrainingConfig {
    /// Upper limit accepted for `m`.
    pub const M_MAX: usize = 16384;

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau", self.tau),
            ("stage1_lr", self.stage1_lr),
            ("stage2_lr_text", self.stage2_lr_text),
            ("stage2_lr_rest", self.stage2_lr_rest),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.m == 0 || self.m > Self::M_MAX {
            return Err(invalid(format!("m must lie in [1, {}], got {}", Self::M_MAX, self.m)));
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return Err(invalid(format!("delta must be >= 0, got {}", self.delta)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if self.objective == Objective::Ranking && self.batch_size < 2 {
            return Err(invalid("ranking needs batch_size >= 2"));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(invalid(format!(
                "sgd_momentum must lie in [0, 1), got {}",
                self.sgd_momentum
            )));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(invalid(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.plateau_patience == 0 {
            return Err(invalid("plateau_patience must be >= 1"));
        }
        if !(self.plateau_min_delta >= 0.0) {
            return Err(invalid("plateau_min_delta must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.bank_momentum) {
            return Err(invalid(format!(
                "bank_momentum must lie in [0, 1], got {}",
                self.bank_momentum
            )));
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(invalid("hidden_dim and embed_dim must be >= 1"));
        }
        if self.text_init == TextInit::Warmup && !(self.warmup_lr > 0.0) {
            return Err(invalid("warmup_lr must be positive"));
        }
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "objective" => self.objective = value.trim().parse()?,
            "tau" => self.tau = parse_value(key, value)?,
            "m" => self.m = parse_value(key, value)?,
            "delta" => self.delta = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "stage1_lr" => self.stage1_lr = parse_value(key, value)?,
            "stage2_lr_text" => self.stage2_lr_text = parse_value(key, value)?,
            "stage2_lr_rest" => self.stage2_lr_rest = parse_value(key, value)?,
            "sgd_momentum" => self.sgd_momentum = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "plateau_patience" => self.plateau_patience = parse_value(key, value)?,
            "plateau_min_delta" => self.plateau_min_delta = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "bank_momentum" => self.bank_momentum = parse_value(key, value)?,
            "exclude_positive" => self.exclude_positive = parse_value(key, value)?,
            "hidden_dim" => self.hidden_dim = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "curriculum" => self.curriculum = value.trim().parse()?,
            "text_init" => self.text_init = value.trim().parse()?,
            "warmup_epochs" => self.warmup_epochs = parse_value(key, value)?,
            "warmup_lr" => self.warmup_lr = parse_value(key, value)?,
            _ => return Err(invalid(format!("unknown training key '{key}'"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)` in a form accepted by [`set`](Self::set).
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("objective", self.objective.to_string()),
            ("tau", self.tau.to_string()),
            ("m", self.m.to_string()),
            ("delta", self.delta.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("stage1_lr", self.stage1_lr.to_string()),
            ("stage2_lr_text", self.stage2_lr_text.to_string()),
            ("stage2_lr_rest", self.stage2_lr_rest.to_string()),
            ("sgd_momentum", self.sgd_momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("plateau_patience", self.plateau_patience.to_string()),
            ("plateau_min_delta", self.plateau_min_delta.to_string()),
            ("seed", self.seed.to_string()),
            ("bank_momentum", self.bank_momentum.to_string()),
            ("exclude_positive", self.exclude_positive.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("curriculum", self.curriculum.to_string()),
            ("text_init", self.text_init.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("warmup_lr", self.warmup_lr.to_string()),
        ]
    }

    /// Noise count actually used against a bank of `n` rows.
    pub fn effective_m(&self, n: usize) -> usize {
        let cap = if self.exclude_positive { n.saturating_sub(1) } else { n };
        self.m.min(cap).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Stage1TextFrozen,
    Stage2Joint,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage1TextFrozen => "stage1",
            Stage::Stage2Joint => "stage2",
        }
    }

    pub fn index(self) -> u8 {
        match self {
            Stage::Stage1TextFrozen => 1,
            Stage::Stage2Joint => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurriculumState {
    pub stage: Stage,
    pub best_val_recall: f64,
    pub epochs_since_improvement: usize,
    pub stopped: bool,
}

impl CurriculumState {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            best_val_recall: f64::NEG_INFINITY,
            epochs_since_improvement: 0,
            stopped: false,
        }
    }
}

/// Advances the plateau detector by one validation report.
///
/// A report improves when it beats the best so far by more than `min_delta`.
/// After `patience` reports without improvement, Stage1 moves to Stage2 (the
/// counter restarts) and Stage2 stops.
pub fn plateau_step(cur: CurriculumState, val_recall: f64, patience: usize, min_delta: f64) -> CurriculumState {
    let mut next = cur;
    if cur.stopped {
        return next;
    }
    if val_recall > cur.best_val_recall + min_delta {
        next.best_val_recall = val_recall;
        next.epochs_since_improvement = 0;
        return next;
    }
    next.epochs_since_improvement += 1;
    if next.epochs_since_improvement >= patience {
        match cur.stage {
            Stage::Stage1TextFrozen => {
                next.stage = Stage::Stage2Joint;
                next.epochs_since_improvement = 0;
            }
            Stage::Stage2Joint => next.stopped = true,
        }
    }
    next
}

/// Mean over queries of `Σ_j exp(bank[j]·q/τ)` against one modality's store.
pub fn calibrate_z(bank: &MemoryBank, modality: Modality, queries: &Array2<f64>, tau: f64) -> Result<f64> {
    let z = bank.log_partition(modality, queries.view(), tau)?.exp();
    if z.is_finite() && z > 0.0 {
        Ok(z)
    } else {
        Err(Error::NumericFault(format!("partition estimate overflowed ({z})")))
    }
}

/// `ln z` for each conditional direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPartition {
    /// Visual queries against the text store.
    pub video_to_text: f64,
    /// Text queries against the visual store.
    pub text_to_video: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub objective: Objective,
    pub train_loss: f64,
    pub val_recall_at_1: f64,
    pub val_recall_at_5: f64,
    pub wall_time: f64,
}

impl MetricsRecord {
    /// Equality on everything except wall time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.stage == other.stage
            && self.objective == other.objective
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.val_recall_at_1.to_bits() == other.val_recall_at_1.to_bits()
            && self.val_recall_at_5.to_bits() == other.val_recall_at_5.to_bits()
    }
}

/// Seeds for independent parts of a run, all derived from one run seed.
fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainingConfig,
    pub visual: EncoderParams,
    pub text: EncoderParams,
    pub opt_visual: OptimizerState,
    pub opt_text: OptimizerState,
    pub bank: MemoryBank,
    pub curriculum: CurriculumState,
    pub epoch: usize,
    pub log_z: Option<LogPartition>,
    pub rng: ChaCha8Rng,
    /// Dataset ids of the training instances; bank row `r` belongs to `train_ids[r]`.
    pub train_ids: Vec<usize>,
}

impl TrainState {
    /// Fresh encoders, optimizer, bank and curriculum for `data`'s train split.
    pub fn init(data: &PairedDataset, config: &TrainingConfig) -> Result<Self> {
        config.validate()?;
        let splits = data.require_splits()?;
        let train_ids = splits.train.clone();
        let n = train_ids.len();
        if config.objective == Objective::CpdNce && config.exclude_positive && n < 2 {
            return Err(invalid(
                "NCE with exclude_positive needs at least two training instances",
            ));
        }
        if config.objective == Objective::CpdNce && config.effective_m(n) < config.m {
            log::warn!(
                "m={} exceeds the {} available noise rows; using m={}",
                config.m,
                n,
                config.effective_m(n)
            );
        }
        let visual = EncoderParams::init(
            &[data.visual_dim(), config.hidden_dim, config.embed_dim],
            derive_seed(config.seed, 1),
        )?;
        let mut text = EncoderParams::init(
            &[data.text_dim(), config.hidden_dim, config.embed_dim],
            derive_seed(config.seed, 2),
        )?;
        if config.text_init == TextInit::Warmup && config.warmup_epochs > 0 {
            let texts = data.text_matrix(&train_ids);
            warmup_text_encoder(&mut text, &texts, config, derive_seed(config.seed, 3))?;
        }
        let bank = MemoryBank::new(n, config.embed_dim, config.bank_momentum, derive_seed(config.seed, 4))?;
        let stage = match config.curriculum {
            CurriculumMode::Direct => Stage::Stage2Joint,
            _ => Stage::Stage1TextFrozen,
        };
        let mut state = Self {
            opt_visual: OptimizerState::new(&visual, config.sgd_momentum, config.weight_decay)?,
            opt_text: OptimizerState::new(&text, config.sgd_momentum, config.weight_decay)?,
            config: config.clone(),
            visual,
            text,
            bank,
            curriculum: CurriculumState::new(stage),
            epoch: 0,
            log_z: None,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 5)),
            train_ids,
        };
        if config.objective == Objective::CpdNce {
            state.calibrate(data)?;
        }
        Ok(state)
    }

    /// Re-estimates both partition constants from the current encoders and bank.
    pub fn calibrate(&mut self, data: &PairedDataset) -> Result<()> {
        let fv = embed_rows(&self.visual, &data.visual_matrix(&self.train_ids))?;
        let ft = embed_rows(&self.text, &data.text_matrix(&self.train_ids))?;
        let tau = self.config.tau;
        self.log_z = Some(LogPartition {
            video_to_text: calibrate_z(&self.bank, Modality::Text, &fv, tau)?.ln(),
            text_to_video: calibrate_z(&self.bank, Modality::Visual, &ft, tau)?.ln(),
        });
        Ok(())
    }

    /// `(visual lr, text lr)`; a text lr of `None` means frozen.
    pub fn learning_rates(&self) -> (f64, Option<f64>) {
        let c = &self.config;
        match (self.curriculum.stage, c.curriculum) {
            (Stage::Stage1TextFrozen, _) => (c.stage1_lr, None),
            (Stage::Stage2Joint, CurriculumMode::Direct) => (c.stage1_lr, Some(c.stage1_lr)),
            (Stage::Stage2Joint, _) => (c.stage2_lr_rest, Some(c.stage2_lr_text)),
        }
    }

    pub fn text_frozen(&self) -> bool {
        self.learning_rates().1.is_none()
    }
}

/// Loss of one batch with gradients for each instance's embeddings.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// Mean over the batch of the per-instance loss (both directions summed).
    pub loss: f64,
    pub grad_v: Array2<f64>,
    pub grad_t: Array2<f64>,
    pub saturated: usize,
}

struct Forward {
    emb_v: Array2<f64>,
    emb_t: Array2<f64>,
    cache_v: Vec<ForwardCache>,
    cache_t: Vec<ForwardCache>,
}

fn forward_batch(state: &TrainState, data: &PairedDataset, rows: &[usize]) -> Result<Forward> {
    let d = state.config.embed_dim;
    let mut out = Forward {
        emb_v: Array2::zeros((rows.len(), d)),
        emb_t: Array2::zeros((rows.len(), d)),
        cache_v: Vec::with_capacity(rows.len()),
        cache_t: Vec::with_capacity(rows.len()),
    };
    for (b, &r) in rows.iter().enumerate() {
        let inst = &data.instances[state.train_ids[r]];
        let (ev, cv) = state.visual.forward(ndarray::aview1(&inst.visual))?;
        let (et, ct) = state.text.forward(ndarray::aview1(&inst.text))?;
        out.emb_v.row_mut(b).assign(&ev);
        out.emb_t.row_mut(b).assign(&et);
        out.cache_v.push(cv);
        out.cache_t.push(ct);
    }
    Ok(out)
}

fn loss_from_embeddings(
    state: &TrainState,
    rows: &[usize],
    emb_v: &Array2<f64>,
    emb_t: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<BatchLoss> {
    let cfg = &state.config;
    let tau = Temperature::new(cfg.tau)?;
    let b = rows.len();
    if b == 0 {
        return Err(invalid("empty batch"));
    }
    if cfg.objective == Objective::Ranking {
        let r = ranking_loss(emb_v.view(), emb_t.view(), cfg.delta)?;
        return Ok(BatchLoss {
            loss: r.loss,
            grad_v: r.grad_v,
            grad_t: r.grad_t,
            saturated: 0,
        });
    }
    let bank_v = state.bank.store(Modality::Visual);
    let bank_t = state.bank.store(Modality::Text);
    let mut out = BatchLoss {
        loss: 0.0,
        grad_v: Array2::zeros(emb_v.dim()),
        grad_t: Array2::zeros(emb_t.dim()),
        saturated: 0,
    };
    for (k, &r) in rows.iter().enumerate() {
        let (fv, ft) = (emb_v.row(k), emb_t.row(k));
        let (loss, gv, gt, sat) = match cfg.objective {
            Objective::CpdExact => {
                let p = cpd_loss_exact(fv, ft, r, bank_v, bank_t, tau)?;
                (p.loss, p.grad_v, p.grad_t, p.saturated)
            }
            Objective::Mmid => {
                let p = mmid_loss_exact(fv, ft, r, bank_v, bank_t, tau)?;
                (p.loss, p.grad_v, p.grad_t, p.saturated)
            }
            Objective::CpdNce => {
                let log_z = state
                    .log_z
                    .ok_or_else(|| invalid("partition estimate is not calibrated"))?;
                let n = state.bank.len();
                let m = cfg.effective_m(n);
                let mut direction = |query, store: Modality, ln_z: f64| -> Result<_> {
                    let draw = state.bank.sample_noise(m, r, cfg.exclude_positive, rng)?;
                    let noise = state.bank.lookup(store, &draw.indices)?;
                    let nce = NceConfig {
                        m,
                        n,
                        z_estimate: Some(ln_z.exp()),
                        exclude_positive: cfg.exclude_positive,
                    };
                    nce_loss(query, state.bank.row(store, r)?, noise.view(), &nce, tau)
                };
                let v2t = direction(fv, Modality::Text, log_z.video_to_text)?;
                let t2v = direction(ft, Modality::Visual, log_z.text_to_video)?;
                (v2t.loss + t2v.loss, v2t.grad, t2v.grad, v2t.saturated + t2v.saturated)
            }
            Objective::Ranking => unreachable!(),
        };
        out.loss += loss;
        out.grad_v.row_mut(k).assign(&gv);
        out.grad_t.row_mut(k).assign(&gt);
        out.saturated += sat;
    }
    let scale = 1.0 / b as f64;
    out.loss *= scale;
    out.grad_v *= scale;
    out.grad_t *= scale;
    Ok(out)
}

/// Loss of a batch of bank rows under the current encoders and bank,
/// without changing any state except the noise stream `rng`.
pub fn batch_loss(state: &TrainState, data: &PairedDataset, rows: &[usize], rng: &mut ChaCha8Rng) -> Result<BatchLoss> {
    let fwd = forward_batch(state, data, rows)?;
    loss_from_embeddings(state, rows, &fwd.emb_v, &fwd.emb_t, rng)
}

fn check_rows(state: &TrainState, rows: &[usize]) -> Result<()> {
    match rows.iter().find(|&&r| r >= state.bank.len()) {
        Some(r) => Err(invalid(format!(
            "bank row {r} outside {} training instances",
            state.bank.len()
        ))),
        None => Ok(()),
    }
}

fn train_batch(state: &mut TrainState, data: &PairedDataset, rows: &[usize]) -> Result<f64> {
    let fwd = forward_batch(state, data, rows)?;
    let mut rng = state.rng.clone();
    let loss = loss_from_embeddings(state, rows, &fwd.emb_v, &fwd.emb_t, &mut rng)?;
    state.rng = rng;
    if !loss.loss.is_finite() {
        return Err(Error::NumericFault(format!("non-finite batch loss {}", loss.loss)));
    }
    let (lr_v, lr_t) = state.learning_rates();
    let mut grads_v = EncoderGrads::zeros_like(&state.visual);
    for (cache, g) in fwd.cache_v.iter().zip(loss.grad_v.axis_iter(Axis(0))) {
        state.visual.backward_into(cache, g, &mut grads_v)?;
    }
    if let Some(lr_t) = lr_t {
        let mut grads_t = EncoderGrads::zeros_like(&state.text);
        for (cache, g) in fwd.cache_t.iter().zip(loss.grad_t.axis_iter(Axis(0))) {
            state.text.backward_into(cache, g, &mut grads_t)?;
        }
        sgd_step(&mut state.text, &grads_t, &mut state.opt_text, lr_t)?;
    }
    sgd_step(&mut state.visual, &grads_v, &mut state.opt_visual, lr_v)?;
    for (k, &r) in rows.iter().enumerate() {
        state.bank.update(Modality::Visual, r, fwd.emb_v.row(k))?;
        state.bank.update(Modality::Text, r, fwd.emb_t.row(k))?;
    }
    Ok(loss.loss)
}

/// Validation retrieval recall@1 and recall@5, each averaged over both directions.
pub fn validation_recall(state: &TrainState, data: &PairedDataset) -> Result<(f64, f64)> {
    let val = &data.require_splits()?.val;
    let fv = embed_rows(&state.visual, &data.visual_matrix(val))?;
    let ft = embed_rows(&state.text, &data.text_matrix(val))?;
    let k5 = 5.min(val.len());
    let r = retrieval_recall(fv.view(), ft.view(), &[1, k5])?;
    Ok((r.mean_at(1).unwrap_or(0.0), r.mean_at(k5).unwrap_or(0.0)))
}

/// One shuffled pass over the training split followed by validation.
///
/// The epoch is all-or-nothing: on any error, including a non-finite loss,
/// `state` is left exactly as it was before the call.
pub fn train_epoch(state: &mut TrainState, data: &PairedDataset) -> Result<MetricsRecord> {
    let start = Instant::now();
    let mut next = state.clone();
    let mut order: Vec<usize> = (0..next.bank.len()).collect();
    order.shuffle(&mut next.rng);
    check_rows(&next, &order)?;
    let stage = next.curriculum.stage;
    let mut total = 0.0;
    let mut batches = 0usize;
    for rows in order.chunks(next.config.batch_size) {
        if next.config.objective == Objective::Ranking && rows.len() < 2 {
            continue;
        }
        total += train_batch(&mut next, data, rows)?;
        batches += 1;
    }
    let (r1, r5) = validation_recall(&next, data)?;
    next.epoch += 1;
    let record = MetricsRecord {
        epoch: next.epoch,
        stage,
        objective: next.config.objective,
        train_loss: if batches > 0 { total / batches as f64 } else { 0.0 },
        val_recall_at_1: r1,
        val_recall_at_5: r5,
        wall_time: start.elapsed().as_secs_f64(),
    };
    *state = next;
    Ok(record)
}

/// Applies one validation report to the curriculum, handling the mode's
/// stopping rule and recalibrating the partition on Stage2 entry.
pub fn advance_curriculum(state: &mut TrainState, data: &PairedDataset, val_recall: f64) -> Result<()> {
    let c = &state.config;
    let mut next = plateau_step(state.curriculum, val_recall, c.plateau_patience, c.plateau_min_delta);
    if next.stage != state.curriculum.stage {
        if c.curriculum == CurriculumMode::Stage1Only {
            next.stage = state.curriculum.stage;
            next.stopped = true;
        } else {
            log::info!("entering stage 2 after epoch {}", state.epoch);
            state.curriculum = next;
            if c.objective == Objective::CpdNce {
                state.calibrate(data)?;
            }
            return Ok(());
        }
    }
    state.curriculum = next;
    Ok(())
}

/// Final state and per-epoch metrics of a run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainState,
    pub history: Vec<MetricsRecord>,
}

impl RunOutcome {
    pub fn final_recall(&self) -> f64 {
        self.history.last().map_or(0.0, |r| r.val_recall_at_1)
    }
}

pub fn run_curriculum(data: &PairedDataset, config: &TrainingConfig) -> Result<RunOutcome> {
    let mut state = TrainState::init(data, config)?;
    let history = run_curriculum_with(&mut state, data, |_, _| Ok(()))?;
    Ok(RunOutcome { state, history })
}

/// Trains `state` until the curriculum stops or `max_epochs` is reached,
/// calling `on_epoch` after every epoch's curriculum update.
///
/// On error `state` holds the last completed epoch.
pub fn run_curriculum_with<F>(
    state: &mut TrainState,
    data: &PairedDataset,
    mut on_epoch: F,
) -> Result<Vec<MetricsRecord>>
where
    F: FnMut(&TrainState, &MetricsRecord) -> Result<()>,
{
    let mut history = Vec::new();
    while state.epoch < state.config.max_epochs && !state.curriculum.stopped {
        let before = state.clone();
        let record = train_epoch(state, data)?;
        if let Err(e) = advance_curriculum(state, data, record.val_recall_at_1) {
            *state = before;
            return Err(e);
        }
        on_epoch(state, &record)?;
        history.push(record);
    }
    Ok(history)
}

/// Fits the text encoder as the front half of an autoencoder with a linear
/// decoder, using plain mini-batch SGD with momentum.
fn warmup_text_encoder(text: &mut EncoderParams, texts: &Array2<f64>, cfg: &TrainingConfig, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d_out, d_emb) = (texts.ncols(), text.embed_dim());
    let normal = Normal::new(0.0, 1.0 / (d_emb as f64).sqrt()).map_err(|e| invalid(e.to_string()))?;
    let mut decoder = Linear {
        weight: Array2::from_shape_simple_fn((d_out, d_emb), || normal.sample(&mut rng)),
        bias: Array1::zeros(d_out),
    };
    let mut dec_buf = Linear::zeros(d_emb, d_out);
    let mut opt = OptimizerState::new(text, cfg.sgd_momentum, 0.0)?;
    let mut order: Vec<usize> = (0..texts.nrows()).collect();
    for _ in 0..cfg.warmup_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = EncoderGrads::zeros_like(text);
            let mut dec_grad = Linear::zeros(d_emb, d_out);
            let mut loss = 0.0;
            for &i in batch {
                let t = texts.row(i);
                let (e, cache) = text.forward(t)?;
                let residual = decoder.weight.dot(&e) + &decoder.bias - t;
                loss += 0.5 * residual.dot(&residual);
                for (mut row, &r) in dec_grad.weight.rows_mut().into_iter().zip(&residual) {
                    row.scaled_add(r, &e);
                }
                dec_grad.bias += &residual;
                let ge = decoder.weight.t().dot(&residual);
                text.backward_into(&cache, ge.view(), &mut grads)?;
            }
            if !loss.is_finite() {
                return Err(Error::NumericFault("text warmup diverged".into()));
            }
            let scale = 1.0 / batch.len() as f64;
            grads.scale(scale);
            sgd_step(text, &grads, &mut opt, cfg.warmup_lr)?;
            ndarray::Zip::from(&mut decoder.weight)
                .and(&mut dec_buf.weight)
                .and(&dec_grad.weight)
                .for_each(|p, b, &g| {
                    *b = cfg.sgd_momentum * *b + g * scale;
                    *p -= cfg.warmup_lr * *b;
                });
            ndarray::Zip::from(&mut decoder.bias)
                .and(&mut dec_buf.bias)
                .and(&dec_grad.bias)
                .for_each(|p, b, &g| {
                    *b = cfg.sgd_momentum * *b + g * scale;
                    *p -= cfg.warmup_lr * *b;
                });
        }
    }
    // The encoder's update counter is an optimizer detail of the warmup.
    *text = EncoderParams::from_layers(text.layers().to_vec())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, split, SyntheticSpec};
    use ndarray::arr2;

    fn small_data(seed: u64) -> PairedDataset {
        let spec = SyntheticSpec {
            classes: 4,
            per_class: 12,
            d_v: 10,
            d_t: 8,
            sigma: 0.1,
            rho: 0.0,
            latent_dim: None,
            seed,
        };
        split(&generate(&spec).unwrap().dataset, [0.5, 0.25, 0.25], seed).unwrap()
    }

    fn small_config(objective: Objective) -> TrainingConfig {
        TrainingConfig {
            objective,
            m: 8,
            batch_size: 8,
            hidden_dim: 16,
            embed_dim: 8,
            max_epochs: 6,
            warmup_epochs: 2,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn config_defaults_follow_the_training_protocol() {
        let c = TrainingConfig::default();
        assert_eq!(c.tau, 0.07);
        assert_eq!(c.stage1_lr, 0.1);
        assert_eq!(c.stage2_lr_text, 3e-5);
        assert_eq!(c.sgd_momentum, 0.9);
        assert_eq!(c.weight_decay, 1e-4);
        assert_eq!(c.max_epochs, 300);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_rejects_invalid_values() {
        let mut c = TrainingConfig::default();
        assert!(matches!(c.set("objective", "bogus"), Err(Error::InvalidConfig(_))));
        assert!(matches!(c.set("nonsense", "1"), Err(Error::InvalidConfig(_))));
        assert!(matches!(c.set("tau", "abc"), Err(Error::InvalidConfig(_))));
        c.set("stage1_lr", "0").unwrap();
        assert!(c.validate().is_err());
        let c = TrainingConfig {
            plateau_patience: 0,
            ..TrainingConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainingConfig {
            m: 16385,
            ..TrainingConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_entries_round_trip() {
        let mut c = TrainingConfig {
            objective: Objective::Mmid,
            tau: 0.123456789,
            curriculum: CurriculumMode::Direct,
            text_init: TextInit::Random,
            exclude_positive: false,
            ..TrainingConfig::default()
        };
        c.seed = 77;
        let mut d = TrainingConfig::default();
        for (k, v) in c.entries() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(c, d);
    }

    #[test]
    fn calibrate_z_orthogonal_bank_gives_n() {
        let bank = MemoryBank::from_parts(Array2::eye(3), Array2::eye(3), 0.5).unwrap();
        // A query orthogonal to every stored row scores zero against all of them.
        let bank4 = MemoryBank::from_parts(
            arr2(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]),
            arr2(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]),
            0.5,
        )
        .unwrap();
        let z = calibrate_z(&bank4, Modality::Text, &arr2(&[[0.0, 0.0, 0.0, 1.0]]), 0.07).unwrap();
        assert!((z - 3.0).abs() < 1e-12);
        let z = calibrate_z(&bank, Modality::Visual, &Array2::zeros((2, 3)), 0.07).unwrap();
        assert!((z - 3.0).abs() < 1e-12);
    }

    #[test]
    fn calibrate_z_two_rows() {
        let tau = 0.07;
        let bank =
            MemoryBank::from_parts(arr2(&[[1.0, 0.0], [0.0, 1.0]]), arr2(&[[1.0, 0.0], [0.0, 1.0]]), 0.5).unwrap();
        let z = calibrate_z(&bank, Modality::Visual, &arr2(&[[1.0, 0.0]]), tau).unwrap();
        let expected = (1.0f64 / tau).exp() + 1.0;
        assert!((z - expected).abs() / expected < 1e-12);
    }

    #[test]
    fn calibrate_z_ignores_query_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = MemoryBank::new(20, 6, 0.5, 3).unwrap();
        let q = Array2::from_shape_simple_fn((7, 6), || rand::Rng::random::<f64>(&mut rng) - 0.5);
        let mut rev = q.clone();
        rev.invert_axis(Axis(0));
        let a = calibrate_z(&bank, Modality::Text, &q, 0.07).unwrap();
        let b = calibrate_z(&bank, Modality::Text, &rev, 0.07).unwrap();
        assert!((a - b).abs() / a < 1e-12);
    }

    #[test]
    fn plateau_increasing_recall_stays_in_stage1() {
        let mut s = CurriculumState::new(Stage::Stage1TextFrozen);
        for i in 0..20 {
            s = plateau_step(s, 0.1 + 0.01 * i as f64, 3, 0.002);
            assert_eq!(s.stage, Stage::Stage1TextFrozen);
            assert_eq!(s.epochs_since_improvement, 0);
        }
    }

    #[test]
    fn plateau_flat_recall_enters_stage2_after_fourth_report() {
        let mut s = CurriculumState::new(Stage::Stage1TextFrozen);
        for report in 1..=4 {
            s = plateau_step(s, 0.5, 3, 0.0);
            let expected = if report < 4 {
                Stage::Stage1TextFrozen
            } else {
                Stage::Stage2Joint
            };
            assert_eq!(s.stage, expected, "after report {report}");
        }
        assert_eq!(s.epochs_since_improvement, 0);
        for _ in 0..3 {
            assert!(!s.stopped);
            s = plateau_step(s, 0.5, 3, 0.0);
        }
        assert!(s.stopped);
        assert_eq!(s.stage, Stage::Stage2Joint);
    }

    #[test]
    fn plateau_small_gain_is_not_improvement() {
        let s = plateau_step(CurriculumState::new(Stage::Stage1TextFrozen), 0.500, 5, 0.01);
        let s = plateau_step(s, 0.505, 5, 0.01);
        assert_eq!(s.epochs_since_improvement, 1);
        assert_eq!(s.best_val_recall, 0.5);
    }

    #[test]
    fn zero_learning_rates_freeze_everything() {
        let data = small_data(1);
        let cfg = TrainingConfig {
            curriculum: CurriculumMode::Direct,
            weight_decay: 0.0,
            ..small_config(Objective::CpdExact)
        };
        let mut state = TrainState::init(&data, &cfg).unwrap();
        // Configured rates must be positive; the optimizer itself accepts zero.
        state.config.stage1_lr = 0.0;
        let visual = state.visual.layers().to_vec();
        let text = state.text.layers().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rows: Vec<usize> = (0..8).collect();
        train_epoch(&mut state, &data).unwrap();
        assert_eq!(state.visual.layers(), &visual[..]);
        assert_eq!(state.text.layers(), &text[..]);
        let first = batch_loss(&state, &data, &rows, &mut rng).unwrap().loss;
        let repeat = batch_loss(&state, &data, &rows, &mut rng).unwrap().loss;
        assert_eq!(first.to_bits(), repeat.to_bits());
    }

    #[test]
    fn fixed_seed_runs_are_identical() {
        let data = small_data(2);
        for objective in Objective::ALL {
            let cfg = small_config(objective);
            let a = run_curriculum(&data, &cfg).unwrap();
            let b = run_curriculum(&data, &cfg).unwrap();
            assert_eq!(a.history.len(), b.history.len());
            for (x, y) in a.history.iter().zip(&b.history) {
                assert!(x.same_outcome(y), "{objective}: {x:?} vs {y:?}");
            }
            assert_eq!(a.state.visual, b.state.visual);
            assert_eq!(a.state.text, b.state.text);
            assert_eq!(a.state.bank, b.state.bank);
        }
    }

    #[test]
    fn stage1_leaves_text_encoder_untouched() {
        let data = small_data(3);
        let cfg = TrainingConfig {
            plateau_patience: 1000,
            ..small_config(Objective::CpdNce)
        };
        let mut state = TrainState::init(&data, &cfg).unwrap();
        let hash = state.text.fingerprint();
        for _ in 0..4 {
            let rec = train_epoch(&mut state, &data).unwrap();
            assert_eq!(rec.stage, Stage::Stage1TextFrozen);
            assert_eq!(state.text.fingerprint(), hash);
        }
    }

    #[test]
    fn history_has_at_most_one_transition() {
        let data = small_data(4);
        let cfg = TrainingConfig {
            plateau_patience: 1,
            plateau_min_delta: 0.5,
            max_epochs: 10,
            ..small_config(Objective::CpdExact)
        };
        let out = run_curriculum(&data, &cfg).unwrap();
        let stages: Vec<u8> = out.history.iter().map(|r| r.stage.index()).collect();
        assert!(stages.windows(2).all(|w| w[0] <= w[1]));
        let transitions = stages.windows(2).filter(|w| w[0] != w[1]).count();
        assert_eq!(transitions, 1, "stages {stages:?}");
        assert!(out.state.curriculum.stopped);
    }

    #[test]
    fn stage1_only_never_leaves_stage1() {
        let data = small_data(5);
        let cfg = TrainingConfig {
            curriculum: CurriculumMode::Stage1Only,
            plateau_patience: 1,
            plateau_min_delta: 0.5,
            ..small_config(Objective::CpdExact)
        };
        let out = run_curriculum(&data, &cfg).unwrap();
        assert!(out.history.iter().all(|r| r.stage == Stage::Stage1TextFrozen));
        assert!(out.state.curriculum.stopped);
    }

    #[test]
    fn direct_mode_trains_text_from_the_start() {
        let data = small_data(6);
        let cfg = TrainingConfig {
            curriculum: CurriculumMode::Direct,
            ..small_config(Objective::CpdExact)
        };
        let mut state = TrainState::init(&data, &cfg).unwrap();
        assert_eq!(state.learning_rates(), (cfg.stage1_lr, Some(cfg.stage1_lr)));
        let hash = state.text.fingerprint();
        train_epoch(&mut state, &data).unwrap();
        assert_ne!(state.text.fingerprint(), hash);
    }

    #[test]
    fn stage2_rates_apply_after_transition() {
        let data = small_data(7);
        let cfg = small_config(Objective::CpdNce);
        let mut state = TrainState::init(&data, &cfg).unwrap();
        let z0 = state.log_z.unwrap();
        state.curriculum = CurriculumState {
            epochs_since_improvement: cfg.plateau_patience - 1,
            best_val_recall: 1.0,
            ..state.curriculum
        };
        train_epoch(&mut state, &data).unwrap();
        advance_curriculum(&mut state, &data, 0.0).unwrap();
        assert_eq!(state.curriculum.stage, Stage::Stage2Joint);
        assert_eq!(state.learning_rates(), (cfg.stage2_lr_rest, Some(cfg.stage2_lr_text)));
        assert_ne!(state.log_z.unwrap(), z0);
    }

    #[test]
    fn non_finite_loss_keeps_last_good_state() {
        let data = small_data(8);
        let mut state = TrainState::init(&data, &small_config(Objective::CpdNce)).unwrap();
        train_epoch(&mut state, &data).unwrap();
        let snapshot = state.clone();
        state.log_z = Some(LogPartition {
            video_to_text: f64::NAN,
            text_to_video: f64::NAN,
        });
        let err = train_epoch(&mut state, &data);
        assert!(err.is_err());
        assert_eq!(state.epoch, snapshot.epoch);
        assert_eq!(state.visual, snapshot.visual);
        assert_eq!(state.bank, snapshot.bank);
    }

    #[test]
    fn m_is_clamped_to_the_bank() {
        let c = TrainingConfig::default();
        assert_eq!(c.effective_m(360), 359);
        let c = TrainingConfig {
            exclude_positive: false,
            ..c
        };
        assert_eq!(c.effective_m(360), 360);
        assert_eq!(TrainingConfig { m: 32, ..c }.effective_m(360), 32);
    }

    #[test]
    fn warmup_changes_text_encoder_deterministically() {
        let data = small_data(9);
        let cfg = small_config(Objective::CpdExact);
        let warm = TrainState::init(&data, &cfg).unwrap();
        let cold = TrainState::init(
            &data,
            &TrainingConfig {
                text_init: TextInit::Random,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_ne!(warm.text, cold.text);
        assert_eq!(warm.text, TrainState::init(&data, &cfg).unwrap().text);
        assert_eq!(warm.visual, cold.visual);
    }
}
