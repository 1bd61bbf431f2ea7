//! Frozen-feature evaluation: kNN, linear probe, zero-shot classification
//! and cross-modal retrieval recall.
//!
//! All evaluators only read their inputs and are deterministic for a given
//! seed.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoders::{embed_rows, l2_normalize, EncoderParams};
use crate::error::{contract, invalid, Error, Result};

pub const DEFAULT_K: usize = 25;

/// Variance floor used when standardizing probe inputs.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerTag {
    /// Unit-norm output embedding.
    Embedding,
    /// Last hidden activation before the output layer.
    Penultimate,
}

impl LayerTag {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerTag::Embedding => "embedding",
            LayerTag::Penultimate => "penultimate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureSet {
    features: Array2<f64>,
    labels: Vec<usize>,
    layer_tag: LayerTag,
}

impl LabeledFeatureSet {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, layer_tag: LayerTag) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericFault("feature matrix has non-finite entries".into()));
        }
        Ok(Self {
            features,
            labels,
            layer_tag,
        })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn layer_tag(&self) -> LayerTag {
        self.layer_tag
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// One more than the largest label.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&c| c + 1)
    }
}

/// Averages the embeddings of several noisy copies of each input.
///
/// With `views == 1` and zero noise this is plain embedding. Off by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiView {
    pub views: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for MultiView {
    fn default() -> Self {
        Self {
            views: 1,
            noise: 0.0,
            seed: 0,
        }
    }
}

fn embed_multi_view(params: &EncoderParams, inputs: &Array2<f64>, mv: &MultiView) -> Result<Array2<f64>> {
    if mv.views == 0 || !(mv.noise >= 0.0) {
        return Err(invalid("multi-view needs views >= 1 and noise >= 0"));
    }
    if mv.views == 1 && mv.noise == 0.0 {
        return embed_rows(params, inputs);
    }
    let normal = Normal::new(0.0, mv.noise).map_err(|e| invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mv.seed);
    let mut out = Array2::zeros((inputs.nrows(), params.embed_dim()));
    for (row, mut dst) in inputs.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        let mut acc = Array1::<f64>::zeros(params.embed_dim());
        for _ in 0..mv.views {
            let noisy = row.mapv(|x| x + normal.sample(&mut rng));
            acc += &params.forward(noisy.view())?.0;
        }
        dst.assign(&l2_normalize(acc.view())?);
    }
    Ok(out)
}

/// Frozen features of every input row at the requested layer.
pub fn extract_features(
    params: &EncoderParams,
    inputs: &Array2<f64>,
    tag: LayerTag,
    multi_view: &MultiView,
) -> Result<Array2<f64>> {
    match tag {
        LayerTag::Embedding => embed_multi_view(params, inputs, multi_view),
        LayerTag::Penultimate => {
            let rows = inputs
                .axis_iter(Axis(0))
                .map(|x| params.forward(x).map(|(_, c)| c.penultimate().clone()))
                .collect::<Result<Vec<_>>>()?;
            let d = rows.first().map_or(0, |r| r.len());
            let mut out = Array2::zeros((rows.len(), d));
            for (mut dst, r) in out.axis_iter_mut(Axis(0)).zip(rows) {
                dst.assign(&r);
            }
            Ok(out)
        }
    }
}

/// Rows scaled to unit length; all-zero rows stay zero.
fn unit_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// Indices of the `k` largest scores, ties going to the lower index.
fn top_k(scores: ArrayView1<f64>, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Cosine kNN majority vote.
///
/// Ties in the vote count are broken by the summed similarity of each class's
/// neighbours, then by the lowest class id.
pub fn knn_classify(train: &LabeledFeatureSet, queries: ArrayView2<f64>, k: usize) -> Result<Vec<usize>> {
    if train.is_empty() {
        return Err(invalid("kNN needs a non-empty training set"));
    }
    if k == 0 || k > train.len() {
        return Err(invalid(format!("k={k} must lie in [1, {}]", train.len())));
    }
    if queries.ncols() != train.dim() {
        return Err(Error::Shape(format!(
            "queries have dimension {}, training features {}",
            queries.ncols(),
            train.dim()
        )));
    }
    let reference = unit_rows(train.features());
    let sims = unit_rows(queries).dot(&reference.t());
    let c = train.num_classes();
    Ok(sims
        .axis_iter(Axis(0))
        .map(|row| {
            let mut votes = vec![(0usize, 0.0f64); c];
            for j in top_k(row, k) {
                let slot = &mut votes[train.labels[j]];
                slot.0 += 1;
                slot.1 += row[j];
            }
            let mut best = 0;
            for (class, &(count, sum)) in votes.iter().enumerate().skip(1) {
                let (bc, bs) = votes[best];
                if count > bc || (count == bc && sum > bs) {
                    best = class;
                }
            }
            best
        })
        .collect())
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Multiply the learning rate by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub standardize: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 30,
            decay_every: 10,
            decay_factor: 0.1,
            batch_size: 8,
            standardize: true,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(invalid(format!("probe lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return Err(invalid("probe epochs, batch size and decay period must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.decay_factor) {
            return Err(invalid("probe decay factor must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(invalid("Adam constants out of range"));
        }
        Ok(())
    }
}

/// Softmax classifier on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    mean: Array1<f64>,
    scale: Array1<f64>,
    weight: Array2<f64>,
    bias: Array1<f64>,
}

struct Adam {
    m: Array2<f64>,
    v: Array2<f64>,
    mb: Array1<f64>,
    vb: Array1<f64>,
    t: i32,
}

impl LinearProbe {
    pub fn fit(train: &LabeledFeatureSet, classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(invalid("linear probe needs training examples"));
        }
        if classes < train.num_classes() {
            return Err(contract(format!(
                "{classes} classes but training labels reach {}",
                train.num_classes() - 1
            )));
        }
        let d = train.dim();
        let x = train.features();
        let (mean, scale) = if cfg.standardize {
            let mean = x.mean_axis(Axis(0)).expect("non-empty");
            let var = x.var_axis(Axis(0), 0.0);
            let floored = var.iter().filter(|&&v| v < VARIANCE_FLOOR).count();
            if floored > 0 {
                log::warn!("{floored} feature dimension(s) have variance below {VARIANCE_FLOOR}; clamped");
            }
            (mean, var.mapv(|v| 1.0 / v.max(VARIANCE_FLOOR).sqrt()))
        } else {
            (Array1::zeros(d), Array1::ones(d))
        };
        let mut probe = Self {
            mean,
            scale,
            weight: Array2::zeros((classes, d)),
            bias: Array1::zeros(classes),
        };
        let xs = probe.standardize(x);
        let mut adam = Adam {
            m: Array2::zeros((classes, d)),
            v: Array2::zeros((classes, d)),
            mb: Array1::zeros(classes),
            vb: Array1::zeros(classes),
            t: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..cfg.epochs {
            let lr = cfg.lr * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32);
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let (gw, gb) = probe.batch_gradient(&xs, train.labels(), batch);
                adam.t += 1;
                let c1 = 1.0 - cfg.beta1.powi(adam.t);
                let c2 = 1.0 - cfg.beta2.powi(adam.t);
                ndarray::Zip::from(&mut probe.weight)
                    .and(&mut adam.m)
                    .and(&mut adam.v)
                    .and(&gw)
                    .for_each(|w, m, v, &g| {
                        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                    });
                ndarray::Zip::from(&mut probe.bias)
                    .and(&mut adam.mb)
                    .and(&mut adam.vb)
                    .and(&gb)
                    .for_each(|w, m, v, &g| {
                        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                    });
            }
        }
        Ok(probe)
    }

    fn standardize(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean) * &self.scale
    }

    fn batch_gradient(&self, xs: &Array2<f64>, labels: &[usize], batch: &[usize]) -> (Array2<f64>, Array1<f64>) {
        let mut gw = Array2::zeros(self.weight.dim());
        let mut gb = Array1::zeros(self.bias.len());
        for &i in batch {
            let x = xs.row(i);
            let logits = self.weight.dot(&x) + &self.bias;
            let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut p = logits.mapv(|l| (l - max).exp());
            p /= p.sum();
            p[labels[i]] -= 1.0;
            for (mut row, &pc) in gw.rows_mut().into_iter().zip(&p) {
                row.scaled_add(pc, &x);
            }
            gb += &p;
        }
        let n = batch.len() as f64;
        (gw / n, gb / n)
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::Shape(format!(
                "probe expects dimension {}, got {}",
                self.mean.len(),
                x.ncols()
            )));
        }
        let logits = self.standardize(x).dot(&self.weight.t()) + &self.bias;
        Ok(logits.axis_iter(Axis(0)).map(|row| top_k(row, 1)[0]).collect())
    }
}

/// Fits a probe on `train` and returns its top-1 accuracy on `test`.
pub fn linear_probe(train: &LabeledFeatureSet, test: &LabeledFeatureSet, cfg: &ProbeConfig) -> Result<f64> {
    if train.dim() != test.dim() {
        return Err(Error::Shape(format!(
            "train features have dimension {}, test {}",
            train.dim(),
            test.dim()
        )));
    }
    let classes = train.num_classes().max(test.num_classes());
    let probe = LinearProbe::fit(train, classes, cfg)?;
    Ok(accuracy(&probe.predict(test.features())?, test.labels()))
}

/// Assigns each video embedding to the class embedding of highest cosine.
pub fn zero_shot_from_embeddings(classes: ArrayView2<f64>, videos: ArrayView2<f64>) -> Result<Vec<usize>> {
    if classes.nrows() == 0 {
        return Err(invalid("zero-shot needs at least one class"));
    }
    if classes.ncols() != videos.ncols() {
        return Err(Error::Shape("class and video embeddings differ in dimension".into()));
    }
    let sims = unit_rows(videos).dot(&unit_rows(classes).t());
    Ok(sims.axis_iter(Axis(0)).map(|row| top_k(row, 1)[0]).collect())
}

/// Embeds raw class-prototype text features and raw videos, then classifies
/// each video by its nearest class in the joint space.
pub fn zero_shot_classify(
    class_texts: &Array2<f64>,
    videos: &Array2<f64>,
    text_encoder: &EncoderParams,
    visual_encoder: &EncoderParams,
) -> Result<Vec<usize>> {
    let classes = embed_rows(text_encoder, class_texts)?;
    let embedded = embed_rows(visual_encoder, videos)?;
    zero_shot_from_embeddings(classes.view(), embedded.view())
}

/// Recall@k in both retrieval directions, aligned with `ks`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRecall {
    pub ks: Vec<usize>,
    pub video_to_text: Vec<f64>,
    pub text_to_video: Vec<f64>,
}

impl RetrievalRecall {
    /// Mean of both directions at `k`, if `k` was evaluated.
    pub fn mean_at(&self, k: usize) -> Option<f64> {
        let pos = self.ks.iter().position(|&x| x == k)?;
        Some(0.5 * (self.video_to_text[pos] + self.text_to_video[pos]))
    }
}

/// Rank of each query's partner: candidates scoring higher, or equal with a
/// lower index, come first.
fn partner_ranks(sims: &Array2<f64>) -> Vec<usize> {
    sims.axis_iter(Axis(0))
        .enumerate()
        .map(|(i, row)| {
            let own = row[i];
            row.iter()
                .enumerate()
                .filter(|&(j, &s)| s > own || (s == own && j < i))
                .count()
        })
        .collect()
}

pub fn retrieval_recall(f_v: ArrayView2<f64>, f_t: ArrayView2<f64>, ks: &[usize]) -> Result<RetrievalRecall> {
    if f_v.dim() != f_t.dim() {
        return Err(Error::Shape(format!(
            "video features {:?} and text features {:?} are not paired",
            f_v.dim(),
            f_t.dim()
        )));
    }
    let m = f_v.nrows();
    if m == 0 {
        return Err(invalid("retrieval needs at least one pair"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > m) {
        return Err(invalid(format!("k={k} must lie in [1, {m}]")));
    }
    for (name, x) in [("video", f_v), ("text", f_t)] {
        for (i, row) in x.axis_iter(Axis(0)).enumerate() {
            let n = row.dot(&row).sqrt();
            if !((n - 1.0).abs() <= 1e-6) {
                return Err(contract(format!("{name} row {i} has norm {n}, expected unit")));
            }
        }
    }
    let v2t = f_v.dot(&f_t.t());
    let t2v = v2t.t().to_owned();
    let recall = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / m as f64;
    let (rv, rt) = (partner_ranks(&v2t), partner_ranks(&t2v));
    Ok(RetrievalRecall {
        ks: ks.to_vec(),
        video_to_text: ks.iter().map(|&k| recall(&rv, k)).collect(),
        text_to_video: ks.iter().map(|&k| recall(&rt, k)).collect(),
    })
}
