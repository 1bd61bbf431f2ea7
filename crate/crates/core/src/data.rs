//! Paired visual/text feature datasets: synthetic generation, the text file
//! format, and deterministic train/val/test splits.
//!
//! # Synthetic model
//!
//! Each class `c` owns a pair of unit prototypes `(μ_v[c], μ_t[c])`. Every
//! instance draws a latent `g ~ N(0, I_k)` that both modalities see through
//! fixed orthonormal projections:
//!
//! ```text
//! v = μ_v[c] + σ·A_v g        t = μ_t[c] + σ·A_t g
//! ```
//!
//! so a caption carries the instance-specific detail of its own clip. With
//! probability `ρ` the caption is replaced by an unrelated sample from another
//! class (fresh latent), which models irrelevant text supervision.
//!
//! # File format
//!
//! ```text
//! cpdpairs v1 N=<n> dv=<dv> dt=<dt> labeled=<0|1>
//! <id>,<label or -1>,<dv floats>,<dt floats>
//! ```
//!
//! Splits live in a sidecar file (`<path>.splits`) listing index sets.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};

/// One training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedInstance {
    pub id: usize,
    pub visual: Vec<f64>,
    pub text: Vec<f64>,
    /// Class of the visual side; only used for evaluation.
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub instances: Vec<PairedInstance>,
    pub splits: Option<Splits>,
    pub provenance: Provenance,
    d_v: usize,
    d_t: usize,
}

impl PairedDataset {
    pub fn new(instances: Vec<PairedInstance>, provenance: Provenance) -> Result<Self> {
        let first = instances.first().ok_or_else(|| invalid("dataset is empty"))?;
        let (d_v, d_t) = (first.visual.len(), first.text.len());
        if d_v == 0 || d_t == 0 {
            return Err(invalid("feature dimensions must be positive"));
        }
        for (row, inst) in instances.iter().enumerate() {
            if inst.visual.len() != d_v || inst.text.len() != d_t {
                return Err(Error::Schema {
                    line: row + 1,
                    message: format!(
                        "instance {} has dims ({}, {}), expected ({d_v}, {d_t})",
                        inst.id,
                        inst.visual.len(),
                        inst.text.len()
                    ),
                });
            }
            if inst.id != row {
                return Err(invalid(format!("instance at row {row} has id {}", inst.id)));
            }
        }
        Ok(Self {
            instances,
            splits: None,
            provenance,
            d_v,
            d_t,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn visual_dim(&self) -> usize {
        self.d_v
    }

    pub fn text_dim(&self) -> usize {
        self.d_t
    }

    pub fn is_labeled(&self) -> bool {
        self.instances.iter().all(|i| i.label.is_some())
    }

    pub fn num_classes(&self) -> usize {
        self.instances.iter().filter_map(|i| i.label).max().map_or(0, |c| c + 1)
    }

    pub fn visual_matrix(&self, indices: &[usize]) -> Array2<f64> {
        rows_to_matrix(indices.iter().map(|&i| &self.instances[i].visual[..]), self.d_v)
    }

    pub fn text_matrix(&self, indices: &[usize]) -> Array2<f64> {
        rows_to_matrix(indices.iter().map(|&i| &self.instances[i].text[..]), self.d_t)
    }

    /// Labels of `indices`; missing labels are an error.
    pub fn labels(&self, indices: &[usize]) -> Result<Vec<usize>> {
        indices
            .iter()
            .map(|&i| {
                self.instances[i]
                    .label
                    .ok_or_else(|| invalid(format!("instance {i} has no label")))
            })
            .collect()
    }

    pub fn require_splits(&self) -> Result<&Splits> {
        self.splits
            .as_ref()
            .ok_or_else(|| invalid("dataset has no train/val/test split"))
    }
}

fn rows_to_matrix<'a>(rows: impl ExactSizeIterator<Item = &'a [f64]>, d: usize) -> Array2<f64> {
    let n = rows.len();
    let flat: Vec<f64> = rows.flat_map(|r| r.iter().copied()).collect();
    Array2::from_shape_vec((n, d), flat).expect("rows share the dataset dimension")
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub d_v: usize,
    pub d_t: usize,
    /// Scale of the shared per-instance variation.
    pub sigma: f64,
    /// Probability that a caption is replaced by an unrelated other-class sample.
    pub rho: f64,
    /// Dimension of the shared latent; `None` uses `min(d_v, d_t)`.
    pub latent_dim: Option<usize>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 60,
            d_v: 48,
            d_t: 32,
            sigma: 0.1,
            rho: 0.2,
            latent_dim: None,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn latent(&self) -> usize {
        self.latent_dim.unwrap_or(self.d_v.min(self.d_t))
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(invalid("synthetic data needs at least two classes"));
        }
        if self.per_class == 0 || self.d_v == 0 || self.d_t == 0 {
            return Err(invalid("per_class, d_v and d_t must be positive"));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(invalid(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(invalid(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        let k = self.latent();
        if k == 0 || k > self.d_v.min(self.d_t) {
            return Err(invalid(format!(
                "latent dimension {k} must be in 1..={}",
                self.d_v.min(self.d_t)
            )));
        }
        Ok(())
    }
}

/// Class prototypes of a synthetic dataset; the text prototypes are the
/// clean class descriptions used for zero-shot classification.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub visual: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: PairedDataset,
    pub prototypes: Prototypes,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(d, || rng.sample(StandardNormal))
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    loop {
        let v = gaussian_vec(rng, d);
        let n = v.dot(&v).sqrt();
        if n > 1e-8 {
            return v / n;
        }
    }
}

/// `d × k` matrix with orthonormal columns (Gram–Schmidt on Gaussian columns).
fn orthonormal_columns(rng: &mut ChaCha8Rng, d: usize, k: usize) -> Array2<f64> {
    let mut cols: Vec<Array1<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v = gaussian_vec(rng, d);
        for c in &cols {
            let proj = c.dot(&v);
            v.scaled_add(-proj, c);
        }
        let n = v.dot(&v).sqrt();
        if n > 1e-6 {
            cols.push(v / n);
        }
    }
    let mut m = Array2::zeros((d, k));
    for (j, c) in cols.iter().enumerate() {
        m.column_mut(j).assign(c);
    }
    m
}

/// Generates a labeled synthetic dataset, deterministic in `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.latent();
    let proto_v: Vec<Array1<f64>> = (0..spec.classes).map(|_| unit_vec(&mut rng, spec.d_v)).collect();
    let proto_t: Vec<Array1<f64>> = (0..spec.classes).map(|_| unit_vec(&mut rng, spec.d_t)).collect();
    let proj_v = orthonormal_columns(&mut rng, spec.d_v, k);
    let proj_t = orthonormal_columns(&mut rng, spec.d_t, k);

    let mut instances = Vec::with_capacity(spec.classes * spec.per_class);
    for c in 0..spec.classes {
        for _ in 0..spec.per_class {
            let g = gaussian_vec(&mut rng, k);
            let visual = &proto_v[c] + &(proj_v.dot(&g) * spec.sigma);
            let swap: f64 = rng.random();
            let text = if swap < spec.rho {
                let other = (c + 1 + rng.random_range(0..spec.classes - 1)) % spec.classes;
                let g_other = gaussian_vec(&mut rng, k);
                &proto_t[other] + &(proj_t.dot(&g_other) * spec.sigma)
            } else {
                &proto_t[c] + &(proj_t.dot(&g) * spec.sigma)
            };
            instances.push(PairedInstance {
                id: instances.len(),
                visual: visual.to_vec(),
                text: text.to_vec(),
                label: Some(c),
            });
        }
    }
    Ok(SyntheticData {
        dataset: PairedDataset::new(instances, Provenance::Synthetic)?,
        prototypes: Prototypes {
            visual: proto_v.into_iter().map(|p| p.to_vec()).collect(),
            text: proto_t.into_iter().map(|p| p.to_vec()).collect(),
        },
    })
}

/// Serializes `dataset` in the `cpdpairs v1` text format.
pub fn to_text(dataset: &PairedDataset) -> String {
    let labeled = dataset.instances.iter().any(|i| i.label.is_some());
    let mut out = format!(
        "cpdpairs v1 N={} dv={} dt={} labeled={}\n",
        dataset.len(),
        dataset.d_v,
        dataset.d_t,
        u8::from(labeled)
    );
    for inst in &dataset.instances {
        let label = inst.label.map_or(-1, |l| l as i64);
        write!(out, "{},{}", inst.id, label).unwrap();
        for x in inst.visual.iter().chain(&inst.text) {
            write!(out, ",{x}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write(dataset: &PairedDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path.as_ref(), to_text(dataset))?;
    if let Some(splits) = &dataset.splits {
        write_splits(splits, splits_path(path.as_ref()))?;
    }
    Ok(())
}

struct Header {
    n: usize,
    d_v: usize,
    d_t: usize,
    labeled: bool,
}

fn parse_header(line: &str) -> Result<Header> {
    let err = |message: String| Error::Parse { line: 1, message };
    let mut parts = line.split_whitespace();
    if parts.next() != Some("cpdpairs") || parts.next() != Some("v1") {
        return Err(err(format!("expected `cpdpairs v1` header, got {line:?}")));
    }
    let mut fields = [None; 4];
    for part in parts {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| err(format!("malformed header field {part:?}")))?;
        let slot = match key {
            "N" => 0,
            "dv" => 1,
            "dt" => 2,
            "labeled" => 3,
            _ => return Err(err(format!("unknown header field {key:?}"))),
        };
        let value: usize = value
            .parse()
            .map_err(|_| err(format!("header field {key} has non-integer value {value:?}")))?;
        fields[slot] = Some(value);
    }
    let get = |i: usize, name: &str| fields[i].ok_or_else(|| err(format!("header is missing {name}")));
    let header = Header {
        n: get(0, "N")?,
        d_v: get(1, "dv")?,
        d_t: get(2, "dt")?,
        labeled: match get(3, "labeled")? {
            0 => false,
            1 => true,
            other => return Err(err(format!("labeled must be 0 or 1, got {other}"))),
        },
    };
    if header.d_v == 0 || header.d_t == 0 {
        return Err(Error::Schema {
            line: 1,
            message: "feature dimensions must be positive".into(),
        });
    }
    Ok(header)
}

/// Parses the `cpdpairs v1` text format. Ids are assigned by row order.
pub fn from_text(text: &str) -> Result<PairedDataset> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    // A complete file ends with a newline, leaving an empty final piece.
    let complete = lines.last() == Some(&"");
    if complete {
        lines.pop();
    }
    let header_line = lines.first().ok_or(Error::Parse {
        line: 1,
        message: "file is empty".into(),
    })?;
    let header = parse_header(header_line.trim_end_matches('\r'))?;
    let records = &lines[1..];
    let expected_fields = 2 + header.d_v + header.d_t;
    let mut instances = Vec::with_capacity(header.n);
    for (k, raw) in records.iter().enumerate() {
        let line = k + 2;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            return Err(Error::Parse {
                line,
                message: format!("record {k} is blank"),
            });
        }
        if k >= header.n {
            return Err(Error::Parse {
                line,
                message: format!("header declares {} records but more follow", header.n),
            });
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        let is_last = k + 1 == records.len();
        if fields.len() != expected_fields {
            if is_last && !complete {
                return Err(Error::Parse {
                    line,
                    message: format!("record {k} is truncated: {} of {expected_fields} fields", fields.len()),
                });
            }
            return Err(Error::Schema {
                line,
                message: format!(
                    "record {k} has {} fields, expected {expected_fields} (id, label, {} visual, {} text)",
                    fields.len(),
                    header.d_v,
                    header.d_t
                ),
            });
        }
        fields[0].parse::<u64>().map_err(|_| Error::Parse {
            line,
            message: format!("record {k} has malformed id {:?}", fields[0]),
        })?;
        let label: i64 = fields[1].parse().map_err(|_| Error::Parse {
            line,
            message: format!("record {k} has malformed label {:?}", fields[1]),
        })?;
        let label = match (header.labeled, label) {
            (_, -1) => None,
            (true, l) if l >= 0 => Some(l as usize),
            _ => {
                return Err(Error::Schema {
                    line,
                    message: format!(
                        "record {k} has label {label} in a file with labeled={}",
                        u8::from(header.labeled)
                    ),
                })
            }
        };
        let mut values = Vec::with_capacity(header.d_v + header.d_t);
        for (j, f) in fields[2..].iter().enumerate() {
            let x: f64 = f.parse().map_err(|_| Error::Parse {
                line,
                message: format!("record {k} field {} is not a number: {f:?}", j + 2),
            })?;
            if !x.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("record {k} field {} is not finite", j + 2),
                });
            }
            values.push(x);
        }
        let text = values.split_off(header.d_v);
        instances.push(PairedInstance {
            id: k,
            visual: values,
            text,
            label,
        });
    }
    if instances.len() < header.n {
        return Err(Error::Parse {
            line: records.len() + 2,
            message: format!(
                "file is truncated: header declares {} records, found {} (record {} missing)",
                header.n,
                instances.len(),
                instances.len()
            ),
        });
    }
    PairedDataset::new(instances, Provenance::File)
}

/// Loads a dataset and, when present, its splits sidecar.
pub fn load(path: impl AsRef<Path>) -> Result<PairedDataset> {
    let path = path.as_ref();
    let mut dataset = from_text(&fs::read_to_string(path)?)?;
    let sidecar = splits_path(path);
    if sidecar.exists() {
        let splits = read_splits(&sidecar)?;
        check_splits(&splits, dataset.len())?;
        dataset.splits = Some(splits);
    }
    Ok(dataset)
}

pub fn splits_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".splits");
    PathBuf::from(s)
}

pub fn write_splits(splits: &Splits, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("cpdsplits v1\n");
    for (name, idx) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        out.push_str(name);
        out.push(':');
        for i in idx {
            write!(out, " {i}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_splits(path: impl AsRef<Path>) -> Result<Splits> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("cpdsplits v1") {
        return Err(Error::Parse {
            line: 1,
            message: "expected `cpdsplits v1` header".into(),
        });
    }
    let mut splits = Splits::default();
    for (k, line) in lines.enumerate() {
        let line_no = k + 2;
        let (name, rest) = line.split_once(':').ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("expected `<split>: <indices>`, got {line:?}"),
        })?;
        let indices = rest
            .split_whitespace()
            .map(|s| {
                s.parse::<usize>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("bad index {s:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        match name.trim() {
            "train" => splits.train = indices,
            "val" => splits.val = indices,
            "test" => splits.test = indices,
            other => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("unknown split {other:?}"),
                })
            }
        }
    }
    Ok(splits)
}

fn check_splits(splits: &Splits, n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in splits.train.iter().chain(&splits.val).chain(&splits.test) {
        if i >= n {
            return Err(invalid(format!("split index {i} outside dataset of {n}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(invalid(format!("index {i} appears in more than one split")));
        }
    }
    Ok(())
}

/// Sizes of the three splits for `n` items: floor of each share, with the
/// leftover of `floor(Σf·n)` handed out by largest remainder.
fn allocate(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let eps = 1e-9;
    let total = ((fractions.iter().sum::<f64>() * n as f64) + eps).floor() as usize;
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for s in 0..3 {
        sizes[s] = (exact[s] + eps).floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - sizes[a] as f64;
        let rb = exact[b] - sizes[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut leftover = total.saturating_sub(sizes.iter().sum());
    for &s in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        sizes[s] += 1;
        leftover -= 1;
    }
    sizes
}

/// Seeded shuffle then contiguous assignment into train/val/test, stratified
/// by class when every instance is labeled.
pub fn split(dataset: &PairedDataset, fractions: [f64; 3], seed: u64) -> Result<PairedDataset> {
    if fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(invalid(format!("split fractions must be positive, got {fractions:?}")));
    }
    if fractions.iter().sum::<f64>() > 1.0 + 1e-9 {
        return Err(invalid(format!("split fractions sum above 1: {fractions:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = if dataset.is_labeled() {
        let mut by_class = vec![Vec::new(); dataset.num_classes()];
        for inst in &dataset.instances {
            by_class[inst.label.unwrap()].push(inst.id);
        }
        by_class.into_iter().filter(|g| !g.is_empty()).collect()
    } else {
        vec![(0..dataset.len()).collect()]
    };

    let mut splits = Splits::default();
    for mut group in groups {
        group.shuffle(&mut rng);
        let [a, b, c] = allocate(group.len(), fractions);
        splits.train.extend_from_slice(&group[..a]);
        splits.val.extend_from_slice(&group[a..a + b]);
        splits.test.extend_from_slice(&group[a + b..a + b + c]);
    }
    for (name, idx) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        if idx.is_empty() {
            return Err(invalid(format!(
                "{name} split would be empty for {} instances with fractions {fractions:?}",
                dataset.len()
            )));
        }
    }
    // Interleave classes so contiguous batches are not single-class.
    splits.train.shuffle(&mut rng);
    splits.val.shuffle(&mut rng);
    splits.test.shuffle(&mut rng);
    let mut out = dataset.clone();
    out.splits = Some(splits);
    Ok(out)
}
