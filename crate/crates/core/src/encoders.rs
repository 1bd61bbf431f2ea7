//! Feed-forward modality encoders with exact backpropagation.
//!
//! An encoder is a stack of affine layers with rectifier activations between
//! them and an identity final layer, followed by ℓ2 normalization onto the unit
//! sphere. [`EncoderParams::backward`] differentiates the scalar
//! `grad_embedding · embedding`, including the normalization Jacobian
//! `(I − uuᵀ)/‖z‖`, so any loss gradient expressed with respect to the unit
//! embedding can be pushed back to parameters and inputs.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, invalid, Error, Result};

/// Norms below this are rejected by [`l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

/// Divides `v` by its Euclidean norm.
pub fn l2_normalize(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if !(norm >= MIN_NORM) {
        return Err(Error::DegenerateVector { norm });
    }
    Ok(v.mapv(|x| x / norm))
}

/// One affine layer, `weight` is `[out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|x| x.is_finite())
    }
}

/// Parameters of one modality's encoder.
///
/// The `generation` counter changes every time the parameters are updated
/// through [`sgd_step`]; forward caches remember it so a cache taken before an
/// update cannot be used for a backward pass afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    layers: Vec<Linear>,
    generation: u64,
}

impl EncoderParams {
    /// Fan-in scaled Gaussian weights (standard deviation `1/√fan_in`) and
    /// zero biases, deterministic in `seed`.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal =
                    Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("fan-in scale is finite and positive");
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || normal.sample(&mut rng));
                Linear {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self { layers, generation: 0 })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("encoder needs at least one layer"));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::Shape(format!(
                    "layer {l}: bias has {} entries, weight has {} rows",
                    layer.bias.len(),
                    layer.output_dim()
                )));
            }
            if layer.input_dim() == 0 || layer.output_dim() == 0 {
                return Err(invalid(format!("layer {l} has a zero dimension")));
            }
            if !layer.is_finite() {
                return Err(Error::NumericFault(format!("layer {l} has non-finite entries")));
            }
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape(format!(
                    "layer {l} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    l + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers, generation: 0 })
    }

    /// Restores the update counter, e.g. when reading a checkpoint.
    pub fn with_generation(mut self, generation: u64) -> Self {
        self.generation = generation;
        self
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    /// `[input, hidden..., embed]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].input_dim())
            .chain(self.layers.iter().map(Linear::output_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Hash of the exact bit patterns of every parameter.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        self.layer_dims().hash(&mut hasher);
        for layer in &self.layers {
            for x in layer.weight.iter().chain(layer.bias.iter()) {
                x.to_bits().hash(&mut hasher);
            }
        }
        hasher.finish()
    }

    /// Embeds `x`, returning the unit embedding and everything backward needs.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<(Array1<f64>, ForwardCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "encoder expects input of dimension {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.weight.dot(&a) + &layer.bias;
            inputs.push(a);
            a = if l < last { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            pre_activations.push(z);
        }
        let norm = a.dot(&a).sqrt();
        if !norm.is_finite() {
            return Err(Error::NumericFault("encoder output is not finite".into()));
        }
        let embedding = l2_normalize(a.view())?;
        let cache = ForwardCache {
            inputs,
            pre_activations,
            norm,
            embedding: embedding.clone(),
            generation: self.generation,
            dims: self.layer_dims(),
        };
        Ok((embedding, cache))
    }

    /// Gradients of `grad_embedding · embedding` with respect to every
    /// parameter and to the input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_embedding: ArrayView1<f64>,
    ) -> Result<(EncoderGrads, Array1<f64>)> {
        let mut grads = EncoderGrads::zeros_like(self);
        let grad_input = self.backward_into(cache, grad_embedding, &mut grads)?;
        Ok((grads, grad_input))
    }

    /// Like [`backward`](Self::backward) but adds the parameter gradients
    /// into `acc`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        grad_embedding: ArrayView1<f64>,
        acc: &mut EncoderGrads,
    ) -> Result<Array1<f64>> {
        if cache.generation != self.generation || cache.dims != self.layer_dims() {
            return Err(contract(
                "forward cache does not belong to the current encoder parameters",
            ));
        }
        if grad_embedding.len() != self.embed_dim() {
            return Err(Error::Shape(format!(
                "gradient has dimension {}, embedding has {}",
                grad_embedding.len(),
                self.embed_dim()
            )));
        }
        if acc.layers.len() != self.layers.len() {
            return Err(Error::Shape("gradient accumulator has wrong depth".into()));
        }

        let u = &cache.embedding;
        let radial = u.dot(&grad_embedding);
        let mut delta = (&grad_embedding - &(u * radial)) / cache.norm;

        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let a = &cache.inputs[l];
            let slot = &mut acc.layers[l];
            Zip::from(slot.weight.rows_mut())
                .and(&delta)
                .for_each(|mut row, &d| row.scaled_add(d, a));
            slot.bias += &delta;
            let mut upstream = layer.weight.t().dot(&delta);
            if l > 0 {
                Zip::from(&mut upstream)
                    .and(&cache.pre_activations[l - 1])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            delta = upstream;
        }
        Ok(delta)
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(invalid(format!(
            "encoder needs at least input and output dimensions, got {layer_dims:?}"
        )));
    }
    if layer_dims.contains(&0) {
        return Err(invalid(format!(
            "layer dimensions must be positive, got {layer_dims:?}"
        )));
    }
    Ok(())
}

/// Activations recorded by [`EncoderParams::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer: the raw features, then each rectified hidden activation.
    inputs: Vec<Array1<f64>>,
    pre_activations: Vec<Array1<f64>>,
    norm: f64,
    embedding: Array1<f64>,
    generation: u64,
    dims: Vec<usize>,
}

impl ForwardCache {
    pub fn embedding(&self) -> &Array1<f64> {
        &self.embedding
    }

    /// Output of the final layer before normalization.
    pub fn output(&self) -> &Array1<f64> {
        &self.pre_activations[self.pre_activations.len() - 1]
    }

    pub fn output_norm(&self) -> f64 {
        self.norm
    }

    /// Last hidden activation, or the pre-normalization output for a
    /// single-layer encoder.
    pub fn penultimate(&self) -> &Array1<f64> {
        if self.inputs.len() > 1 {
            &self.inputs[self.inputs.len() - 1]
        } else {
            self.output()
        }
    }
}

/// Gradients (or momentum buffers) shaped like an [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub layers: Vec<Linear>,
}

impl EncoderGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Linear::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            layer.weight *= factor;
            layer.bias *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Linear::is_finite)
    }

    fn matches(&self, params: &EncoderParams) -> bool {
        self.layers.len() == params.layers.len()
            && self
                .layers
                .iter()
                .zip(&params.layers)
                .all(|(g, p)| g.weight.dim() == p.weight.dim() && g.bias.len() == p.bias.len())
    }
}

/// Momentum buffers for SGD with momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: EncoderGrads,
}

impl OptimizerState {
    pub fn new(params: &EncoderParams, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid(format!("SGD momentum must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) || !weight_decay.is_finite() {
            return Err(invalid(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        Ok(Self {
            momentum,
            weight_decay,
            buffers: EncoderGrads::zeros_like(params),
        })
    }
}

/// `buffer ← momentum·buffer + grad + weight_decay·param; param ← param − lr·buffer`.
///
/// Non-finite gradients leave both parameters and buffers untouched.
pub fn sgd_step(params: &mut EncoderParams, grads: &EncoderGrads, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(invalid(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    if !grads.matches(params) || !state.buffers.matches(params) {
        return Err(Error::Shape("gradient or buffer shapes do not match parameters".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NumericFault("non-finite gradient".into()));
    }
    let (mu, wd) = (state.momentum, state.weight_decay);
    for ((p, g), b) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.buffers.layers)
    {
        Zip::from(&mut p.weight)
            .and(&g.weight)
            .and(&mut b.weight)
            .for_each(|p, &g, b| {
                *b = mu * *b + g + wd * *p;
                *p -= lr * *b;
            });
        Zip::from(&mut p.bias)
            .and(&g.bias)
            .and(&mut b.bias)
            .for_each(|p, &g, b| {
                *b = mu * *b + g + wd * *p;
                *p -= lr * *b;
            });
    }
    params.generation += 1;
    Ok(())
}

/// Embeds every row of `inputs`.
pub fn embed_rows(params: &EncoderParams, inputs: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((inputs.nrows(), params.embed_dim()));
    for (row, mut dst) in inputs.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        let (e, _) = params.forward(row)?;
        dst.assign(&e);
    }
    Ok(out)
}
