//! Binary checkpoints of a full [`TrainState`].
//!
//! Layout (little-endian): the magic `CPDCKPT\0`, a `u32` version, the
//! training config as `key=value` lines, both encoders, both optimizer
//! states, the memory bank, the curriculum, the epoch counter, the partition
//! estimates, the noise RNG and the training ids.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{EncoderGrads, EncoderParams, Linear, OptimizerState};
use crate::error::{Error, Result};
use crate::memory_bank::{MemoryBank, Modality};
use crate::trainer::{CurriculumState, LogPartition, Stage, TrainState, TrainingConfig};

const MAGIC: &[u8; 8] = b"CPDCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, v: &[u8]) {
        self.usize(v.len());
        self.buf.extend_from_slice(v);
    }

    fn matrix(&mut self, m: &Array2<f64>) {
        self.usize(m.nrows());
        self.usize(m.ncols());
        for &x in m.iter() {
            self.f64(x);
        }
    }

    fn vector(&mut self, v: &Array1<f64>) {
        self.usize(v.len());
        for &x in v.iter() {
            self.f64(x);
        }
    }

    fn layers(&mut self, layers: &[Linear]) {
        self.usize(layers.len());
        for l in layers {
            self.matrix(&l.weight);
            self.vector(&l.bias);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice of length N"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length does not fit in memory".into()))
    }

    /// A length that must be backed by at least `unit` bytes per element.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(Error::Format(format!(
                "length {n} at byte {} exceeds the file",
                self.pos
            )));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }

    fn matrix(&mut self) -> Result<Array2<f64>> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("matrix size overflows".into()))?;
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(Error::Format(format!("{rows}x{cols} matrix exceeds the file")));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
    }

    fn vector(&mut self) -> Result<Array1<f64>> {
        let n = self.len(8)?;
        Ok(Array1::from_vec(
            (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?,
        ))
    }

    fn layers(&mut self) -> Result<Vec<Linear>> {
        let n = self.len(16)?;
        (0..n)
            .map(|_| {
                Ok(Linear {
                    weight: self.matrix()?,
                    bias: self.vector()?,
                })
            })
            .collect()
    }
}

fn write_config(w: &mut Writer, config: &TrainingConfig) {
    let text: String = config
        .entries()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    w.bytes(text.as_bytes());
}

fn read_config(r: &mut Reader) -> Result<TrainingConfig> {
    let text = std::str::from_utf8(r.bytes()?).map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let mut config = TrainingConfig::default();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad config line '{line}'")))?;
        config.set(k, v).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(config)
}

fn write_optimizer(w: &mut Writer, opt: &OptimizerState) {
    w.f64(opt.momentum);
    w.f64(opt.weight_decay);
    w.layers(&opt.buffers.layers);
}

fn read_optimizer(r: &mut Reader, params: &EncoderParams) -> Result<OptimizerState> {
    let momentum = r.f64()?;
    let weight_decay = r.f64()?;
    let mut opt = OptimizerState::new(params, momentum, weight_decay).map_err(|e| Error::Format(e.to_string()))?;
    let buffers = EncoderGrads { layers: r.layers()? };
    let fits = buffers.layers.len() == params.layers().len()
        && buffers
            .layers
            .iter()
            .zip(params.layers())
            .all(|(b, p)| b.weight.dim() == p.weight.dim() && b.bias.len() == p.bias.len());
    if !fits {
        return Err(Error::Format("optimizer buffers do not match encoder shapes".into()));
    }
    opt.buffers = buffers;
    Ok(opt)
}

fn encode_stage(stage: Stage) -> u8 {
    stage.index()
}

fn decode_stage(v: u8) -> Result<Stage> {
    match v {
        1 => Ok(Stage::Stage1TextFrozen),
        2 => Ok(Stage::Stage2Joint),
        _ => Err(Error::Format(format!("unknown stage tag {v}"))),
    }
}

pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    write_config(&mut w, &state.config);
    for enc in [&state.visual, &state.text] {
        w.u64(enc.generation());
        w.layers(enc.layers());
    }
    write_optimizer(&mut w, &state.opt_visual);
    write_optimizer(&mut w, &state.opt_text);
    w.f64(state.bank.momentum());
    w.matrix(&state.bank.store(Modality::Visual).to_owned());
    w.matrix(&state.bank.store(Modality::Text).to_owned());
    let c = &state.curriculum;
    w.u8(encode_stage(c.stage));
    w.f64(c.best_val_recall);
    w.usize(c.epochs_since_improvement);
    w.u8(u8::from(c.stopped));
    w.usize(state.epoch);
    match state.log_z {
        Some(z) => {
            w.u8(1);
            w.f64(z.video_to_text);
            w.f64(z.text_to_video);
        }
        None => w.u8(0),
    }
    w.buf.extend_from_slice(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.buf.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    w.usize(state.train_ids.len());
    for &id in &state.train_ids {
        w.usize(id);
    }
    w.buf
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config = read_config(&mut r)?;
    let mut encoders = Vec::with_capacity(2);
    for _ in 0..2 {
        let generation = r.u64()?;
        let params = EncoderParams::from_layers(r.layers()?).map_err(|e| Error::Format(e.to_string()))?;
        encoders.push(params.with_generation(generation));
    }
    let text = encoders.pop().expect("two encoders");
    let visual = encoders.pop().expect("two encoders");
    let opt_visual = read_optimizer(&mut r, &visual)?;
    let opt_text = read_optimizer(&mut r, &text)?;
    let momentum = r.f64()?;
    let bank_v = r.matrix()?;
    let bank_t = r.matrix()?;
    let bank = MemoryBank::from_parts(bank_v, bank_t, momentum).map_err(|e| Error::Format(e.to_string()))?;
    let curriculum = CurriculumState {
        stage: decode_stage(r.u8()?)?,
        best_val_recall: r.f64()?,
        epochs_since_improvement: r.usize()?,
        stopped: r.u8()? != 0,
    };
    let epoch = r.usize()?;
    let log_z = match r.u8()? {
        0 => None,
        1 => Some(LogPartition {
            video_to_text: r.f64()?,
            text_to_video: r.f64()?,
        }),
        v => return Err(Error::Format(format!("bad partition tag {v}"))),
    };
    let seed: [u8; 32] = r.array()?;
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.array()?);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let n = r.len(8)?;
    let train_ids = (0..n).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if train_ids.len() != bank.len() {
        return Err(Error::Format("training ids and bank rows disagree".into()));
    }
    if visual.embed_dim() != bank.dim() || text.embed_dim() != bank.dim() {
        return Err(Error::Format("encoder output and bank dimensions disagree".into()));
    }
    Ok(TrainState {
        config,
        visual,
        text,
        opt_visual,
        opt_text,
        bank,
        curriculum,
        epoch,
        log_z,
        rng,
        train_ids,
    })
}

/// Writes atomically: the previous file stays intact until the new one is complete.
pub fn save(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&to_bytes(state))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<TrainState> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, split, SyntheticSpec};
    use crate::trainer::{run_curriculum_with, train_epoch, Objective};

    fn setup() -> (crate::data::PairedDataset, TrainingConfig) {
        let spec = SyntheticSpec {
            classes: 3,
            per_class: 10,
            d_v: 6,
            d_t: 5,
            seed: 3,
            ..SyntheticSpec::default()
        };
        let data = split(&generate(&spec).unwrap().dataset, [0.6, 0.2, 0.2], 3).unwrap();
        let cfg = TrainingConfig {
            objective: Objective::CpdNce,
            m: 5,
            hidden_dim: 8,
            embed_dim: 4,
            max_epochs: 6,
            warmup_epochs: 1,
            plateau_patience: 2,
            ..TrainingConfig::default()
        };
        (data, cfg)
    }

    #[test]
    fn round_trip_is_exact() {
        let (data, cfg) = setup();
        let mut state = TrainState::init(&data, &cfg).unwrap();
        train_epoch(&mut state, &data).unwrap();
        let back = from_bytes(&to_bytes(&state)).unwrap();
        assert_eq!(back, state);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let (data, cfg) = setup();
        let mut full = TrainState::init(&data, &cfg).unwrap();
        let full_history = run_curriculum_with(&mut full, &data, |_, _| Ok(())).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let mut state = TrainState::init(&data, &cfg).unwrap();
        for _ in 0..3 {
            let rec = train_epoch(&mut state, &data).unwrap();
            crate::trainer::advance_curriculum(&mut state, &data, rec.val_recall_at_1).unwrap();
        }
        save(&state, &path).unwrap();
        let mut resumed = load(&path).unwrap();
        let resumed_history = run_curriculum_with(&mut resumed, &data, |_, _| Ok(())).unwrap();
        assert_eq!(resumed, full);
        assert_eq!(resumed_history.len() + 3, full_history.len());
        for (a, b) in resumed_history.iter().zip(&full_history[3..]) {
            assert!(a.same_outcome(b));
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (data, cfg) = setup();
        let state = TrainState::init(&data, &cfg).unwrap();
        let bytes = to_bytes(&state);
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(from_bytes(b"not a checkpoint"), Err(Error::Format(_))));
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(matches!(from_bytes(&wrong_version), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(dir.path().join("absent.ckpt")), Err(Error::Io(_))));
    }
}
