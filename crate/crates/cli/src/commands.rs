use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cpd_core::checkpoint;
use cpd_core::data::{self, generate, split, PairedDataset, PairedInstance, Prototypes, Provenance};
use cpd_core::encoders::embed_rows;
use cpd_core::evaluation::{
    accuracy, extract_features, knn_classify, linear_probe, retrieval_recall, zero_shot_classify, LabeledFeatureSet,
    LayerTag,
};
use cpd_core::trainer::{run_curriculum_with, MetricsRecord, TrainState};
use cpd_core::{Error, Result};
use ndarray::Array2;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::plot;

pub const METRICS_HEADER: [&str; 7] = [
    "epoch",
    "stage",
    "objective",
    "train_loss",
    "recall1",
    "recall5",
    "wall_s",
];
const RETRIEVAL_KS: [usize; 3] = [1, 5, 10];

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Io(io::Error::new(io::ErrorKind::InvalidData, format!("{other:?}"))),
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Io(io::Error::other(e))
}

fn write_resolved(cfg: &RunConfig, out_dir: &Path, command: &str) -> Result<()> {
    fs::write(out_dir.join(format!("{command}.resolved.conf")), cfg.to_text())?;
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(json_err)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, out_dir: &Path) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| out_dir.join("model.ckpt"))
}

/// The dataset named by `data`, or the synthetic benchmark, split if needed.
fn load_data(cfg: &RunConfig) -> Result<PairedDataset> {
    let ds = match &cfg.data {
        Some(path) => data::load(path)?,
        None => generate(&cfg.spec)?.dataset,
    };
    if ds.splits.is_some() {
        Ok(ds)
    } else {
        split(&ds, cfg.split_fractions, cfg.split_seed)
    }
}

/// Class prototypes stored as a paired file with one row per class.
fn prototypes_to_dataset(p: &Prototypes) -> Result<PairedDataset> {
    let instances = p
        .visual
        .iter()
        .zip(&p.text)
        .enumerate()
        .map(|(c, (v, t))| PairedInstance {
            id: c,
            visual: v.clone(),
            text: t.clone(),
            label: Some(c),
        })
        .collect();
    PairedDataset::new(instances, Provenance::Synthetic)
}

fn load_prototypes(cfg: &RunConfig) -> Result<Array2<f64>> {
    let ds = match (&cfg.prototypes, &cfg.data) {
        (Some(path), _) => data::load(path)?,
        (None, None) => prototypes_to_dataset(&generate(&cfg.spec)?.prototypes)?,
        (None, Some(_)) => {
            return Err(Error::InvalidConfig(
                "zeroshot on a dataset file needs 'prototypes'".into(),
            ));
        }
    };
    let idx: Vec<usize> = (0..ds.len()).collect();
    Ok(ds.text_matrix(&idx))
}

pub fn gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let synth = generate(&cfg.spec)?;
    let ds = split(&synth.dataset, cfg.split_fractions, cfg.split_seed)?;
    write_resolved(cfg, out_dir, "gen-data")?;
    data::write(&ds, out_dir.join("pairs.txt"))?;
    data::write(
        &prototypes_to_dataset(&synth.prototypes)?,
        out_dir.join("prototypes.txt"),
    )?;
    log::info!("wrote {} pairs to {}", ds.len(), out_dir.join("pairs.txt").display());
    Ok(())
}

fn metrics_row(r: &MetricsRecord) -> [String; 7] {
    [
        r.epoch.to_string(),
        r.stage.as_str().to_string(),
        r.objective.to_string(),
        format!("{:.10e}", r.train_loss),
        format!("{:.6}", r.val_recall_at_1),
        format!("{:.6}", r.val_recall_at_5),
        format!("{:.3}", r.wall_time),
    ]
}

pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let ds = load_data(cfg)?;
    let mut state = TrainState::init(&ds, &cfg.training)?;
    write_resolved(cfg, out_dir, "train")?;
    let ckpt = checkpoint_path(cfg, out_dir);
    let mut writer = csv::Writer::from_path(out_dir.join("metrics.csv")).map_err(csv_err)?;
    writer.write_record(METRICS_HEADER).map_err(csv_err)?;
    writer.flush()?;
    let start = Instant::now();
    let every = cfg.checkpoint_every;
    let result = run_curriculum_with(&mut state, &ds, |s, record| {
        writer.write_record(metrics_row(record)).map_err(csv_err)?;
        writer.flush()?;
        log::info!(
            "epoch {} {} loss {:.4} R@1 {:.3} ({:.1}s)",
            record.epoch,
            record.stage.as_str(),
            record.train_loss,
            record.val_recall_at_1,
            start.elapsed().as_secs_f64()
        );
        if every > 0 && s.epoch % every == 0 {
            checkpoint::save(s, &ckpt)?;
        }
        Ok(())
    });
    if let Err(e) = result {
        if matches!(e, Error::NumericFault(_)) {
            checkpoint::save(&state, &ckpt)?;
            log::error!("numeric fault; last good state saved to {}", ckpt.display());
        }
        return Err(e);
    }
    checkpoint::save(&state, &ckpt)?;
    Ok(())
}

fn labeled(
    state: &TrainState,
    ds: &PairedDataset,
    idx: &[usize],
    tag: LayerTag,
    cfg: &RunConfig,
) -> Result<LabeledFeatureSet> {
    let feats = extract_features(&state.visual, &ds.visual_matrix(idx), tag, &cfg.multi_view)?;
    LabeledFeatureSet::new(feats, ds.labels(idx)?, tag)
}

fn load_checkpoint(cfg: &RunConfig, out_dir: &Path) -> Result<TrainState> {
    let path = checkpoint_path(cfg, out_dir);
    if !path.exists() {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::NotFound,
            format!("checkpoint not found: {}", path.display()),
        )));
    }
    checkpoint::load(&path)
}

pub fn eval(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let state = load_checkpoint(cfg, out_dir)?;
    let ds = load_data(cfg)?;
    let splits = ds.require_splits()?.clone();
    let seed = state.config.seed;
    let p = &cfg.probe;
    let probe_config = json!({
        "lr": p.lr, "epochs": p.epochs, "decay_every": p.decay_every, "decay_factor": p.decay_factor,
        "batch_size": p.batch_size, "standardize": p.standardize, "beta1": p.beta1, "beta2": p.beta2, "eps": p.eps,
    });
    let mut results = Vec::new();
    for tag in [LayerTag::Embedding, LayerTag::Penultimate] {
        let train = labeled(&state, &ds, &splits.train, tag, cfg)?;
        let test = labeled(&state, &ds, &splits.test, tag, cfg)?;
        let knn = accuracy(&knn_classify(&train, test.features(), cfg.knn_k)?, test.labels());
        results.push(json!({
            "protocol": "knn", "layer_tag": tag.as_str(), "k": cfg.knn_k,
            "metrics": {"accuracy": knn}, "seed": seed,
        }));
        let probe = linear_probe(&train, &test, p)?;
        results.push(json!({
            "protocol": "linear_probe", "layer_tag": tag.as_str(), "config": probe_config,
            "metrics": {"accuracy": probe}, "seed": p.seed,
        }));
    }
    let f_v = embed_rows(&state.visual, &ds.visual_matrix(&splits.test))?;
    let f_t = embed_rows(&state.text, &ds.text_matrix(&splits.test))?;
    let ks: Vec<usize> = RETRIEVAL_KS
        .iter()
        .copied()
        .filter(|&k| k <= splits.test.len())
        .collect();
    let rr = retrieval_recall(f_v.view(), f_t.view(), &ks)?;
    let mut metrics = serde_json::Map::new();
    for (i, k) in rr.ks.iter().enumerate() {
        metrics.insert(format!("video_to_text@{k}"), json!(rr.video_to_text[i]));
        metrics.insert(format!("text_to_video@{k}"), json!(rr.text_to_video[i]));
    }
    results.push(json!({
        "protocol": "retrieval", "layer_tag": LayerTag::Embedding.as_str(), "k": rr.ks,
        "metrics": metrics, "seed": seed,
    }));
    write_resolved(cfg, out_dir, "eval")?;
    write_json(&out_dir.join("eval.json"), &Value::Array(results.clone()))?;
    write_eval_csv(&out_dir.join("eval.csv"), &results)?;
    Ok(())
}

/// Flattens result objects to `protocol,layer_tag,metric,value,seed` rows.
fn write_eval_csv(path: &Path, results: &[Value]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["protocol", "layer_tag", "metric", "value", "seed"])
        .map_err(csv_err)?;
    for r in results {
        if let Some(metrics) = r["metrics"].as_object() {
            for (name, value) in metrics {
                w.write_record([
                    r["protocol"].as_str().unwrap_or_default(),
                    r["layer_tag"].as_str().unwrap_or_default(),
                    name,
                    &value.to_string(),
                    &r["seed"].to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn zeroshot(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let state = load_checkpoint(cfg, out_dir)?;
    let ds = load_data(cfg)?;
    let test = ds.require_splits()?.test.clone();
    let class_texts = load_prototypes(cfg)?;
    let pred = zero_shot_classify(&class_texts, &ds.visual_matrix(&test), &state.text, &state.visual)?;
    let acc = accuracy(&pred, &ds.labels(&test)?);
    write_resolved(cfg, out_dir, "zeroshot")?;
    write_json(
        &out_dir.join("zeroshot.json"),
        &json!({
            "protocol": "zero_shot", "layer_tag": LayerTag::Embedding.as_str(),
            "config": {"classes": class_texts.nrows(), "queries": test.len()},
            "metrics": {"accuracy": acc}, "seed": state.config.seed,
        }),
    )?;
    log::info!("zero-shot accuracy {acc:.3}");
    Ok(())
}

pub fn plot(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let inputs = if cfg.metrics.is_empty() {
        vec![out_dir.join("metrics.csv")]
    } else {
        cfg.metrics.clone()
    };
    let mut runs = Vec::new();
    for path in &inputs {
        let run = plot::read_run(path)?;
        if run.rows.is_empty() {
            log::warn!("{} has no data rows; skipped", path.display());
        } else {
            runs.push(run);
        }
    }
    write_resolved(cfg, out_dir, "plot")?;
    if runs.is_empty() {
        log::warn!("no metrics to plot; no chart written");
        return Ok(());
    }
    for (metric, title) in plot::METRICS {
        fs::write(
            out_dir.join(format!("{metric}.svg")),
            plot::render(&runs, metric, title),
        )?;
    }
    Ok(())
}

/// Appends `message` to `error.log` in `out_dir`.
pub fn log_error(out_dir: &Path, message: &str) {
    use std::io::Write;
    let _ = fs::create_dir_all(out_dir);
    if let Ok(mut f) = File::options()
        .create(true)
        .append(true)
        .open(out_dir.join("error.log"))
    {
        let _ = writeln!(f, "{message}");
    }
}
