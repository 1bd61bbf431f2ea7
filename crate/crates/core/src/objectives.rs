//! Training objectives and their analytic gradients.
//!
//! All losses here take unit-norm embeddings and return gradients with respect
//! to those embeddings only; memory-bank rows are treated as constants. The
//! encoder's backward pass takes care of the normalization Jacobian.
//!
//! * [`cpd_loss_exact`]: cross-modal pair discrimination, `−log p(i_t|v) − log p(i_v|t)`
//!   with `p(i_t|v) = softmax_j(bank_t[j]·f_v / τ)[i]` over the whole bank.
//! * [`mmid_loss_exact`]: joint instance discrimination scoring
//!   `(bank_v[j]·f_v + bank_t[j]·f_t)/τ`.
//! * [`ranking_loss`]: bidirectional hinge loss over in-batch negatives.
//! * [`nce_loss`]: the noise-contrastive approximation of the cross-modal
//!   softmax against `m` uniformly drawn bank rows.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{contract, invalid, Error, Result};

/// Probabilities below this (or `1 − h` below this) are counted as saturated.
pub const SATURATION_FLOOR: f64 = 1e-30;

/// Softmax temperature τ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self(tau))
        } else {
            Err(invalid(format!("temperature must be positive and finite, got {tau}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(0.07)
    }
}

fn log_sum_exp(scores: &Array1<f64>) -> f64 {
    let max = scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

fn softmax(scores: &Array1<f64>) -> Array1<f64> {
    let max = scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut p = scores.mapv(|s| (s - max).exp());
    let total = p.sum();
    p /= total;
    p
}

fn check_query(query: ArrayView1<f64>, bank: ArrayView2<f64>) -> Result<()> {
    if bank.nrows() == 0 {
        return Err(invalid("bank is empty"));
    }
    if bank.ncols() != query.len() {
        return Err(Error::Shape(format!(
            "query has dimension {}, bank rows have {}",
            query.len(),
            bank.ncols()
        )));
    }
    Ok(())
}

/// Softmax over all bank rows of `bank[j]·query / τ`.
pub fn cpd_probs_exact(query: ArrayView1<f64>, bank: ArrayView2<f64>, tau: Temperature) -> Result<Array1<f64>> {
    check_query(query, bank)?;
    Ok(softmax(&(bank.dot(&query) / tau.get())))
}

/// `p(i | query)` under the full cross-modal softmax.
pub fn cpd_prob_exact(query: ArrayView1<f64>, bank: ArrayView2<f64>, i: usize, tau: Temperature) -> Result<f64> {
    let probs = cpd_probs_exact(query, bank, tau)?;
    probs
        .get(i)
        .copied()
        .ok_or_else(|| contract(format!("index {i} outside bank of {} rows", bank.nrows())))
}

/// Loss and query gradient for one conditional direction.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionLoss {
    pub loss: f64,
    pub grad: Array1<f64>,
    pub saturated: usize,
}

/// `−log softmax_j(bank[j]·query/τ)[i]` and its gradient with respect to `query`.
pub fn cpd_direction_loss(
    query: ArrayView1<f64>,
    bank: ArrayView2<f64>,
    i: usize,
    tau: Temperature,
) -> Result<DirectionLoss> {
    check_query(query, bank)?;
    if i >= bank.nrows() {
        return Err(contract(format!("index {i} outside bank of {} rows", bank.nrows())));
    }
    let t = tau.get();
    let scores = bank.dot(&query) / t;
    let loss = log_sum_exp(&scores) - scores[i];
    let mut weights = softmax(&scores);
    weights[i] -= 1.0;
    let grad = bank.t().dot(&weights) / t;
    Ok(DirectionLoss {
        loss,
        grad,
        saturated: usize::from(loss > -SATURATION_FLOOR.ln()),
    })
}

/// Loss of one instance together with gradients for both query embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    pub grad_v: Array1<f64>,
    pub grad_t: Array1<f64>,
    pub saturated: usize,
}

/// Cross-modal pair discrimination with the exact softmax, summed over
/// both conditional directions (video→text against the text bank and
/// text→video against the visual bank).
pub fn cpd_loss_exact(
    f_v: ArrayView1<f64>,
    f_t: ArrayView1<f64>,
    i: usize,
    bank_v: ArrayView2<f64>,
    bank_t: ArrayView2<f64>,
    tau: Temperature,
) -> Result<PairLoss> {
    let v2t = cpd_direction_loss(f_v, bank_t, i, tau)?;
    let t2v = cpd_direction_loss(f_t, bank_v, i, tau)?;
    Ok(PairLoss {
        loss: v2t.loss + t2v.loss,
        grad_v: v2t.grad,
        grad_t: t2v.grad,
        saturated: v2t.saturated + t2v.saturated,
    })
}

/// Joint multi-modal instance discrimination: one softmax over instances with
/// scores built from the self-correlation terms of both modalities.
pub fn mmid_loss_exact(
    f_v: ArrayView1<f64>,
    f_t: ArrayView1<f64>,
    i: usize,
    bank_v: ArrayView2<f64>,
    bank_t: ArrayView2<f64>,
    tau: Temperature,
) -> Result<PairLoss> {
    check_query(f_v, bank_v)?;
    check_query(f_t, bank_t)?;
    if bank_v.nrows() != bank_t.nrows() {
        return Err(Error::Shape("visual and text banks differ in size".into()));
    }
    if i >= bank_v.nrows() {
        return Err(contract(format!("index {i} outside bank of {} rows", bank_v.nrows())));
    }
    let t = tau.get();
    let scores = (bank_v.dot(&f_v) + bank_t.dot(&f_t)) / t;
    let loss = log_sum_exp(&scores) - scores[i];
    let mut weights = softmax(&scores);
    weights[i] -= 1.0;
    Ok(PairLoss {
        loss,
        grad_v: bank_v.t().dot(&weights) / t,
        grad_t: bank_t.t().dot(&weights) / t,
        saturated: usize::from(loss > -SATURATION_FLOOR.ln()),
    })
}

/// Parametric instance classifier with free per-instance weights
/// `(w_v[j], w_t[j])`: `−log softmax_j(w_v[j]·f_v + w_t[j]·f_t)[i]`.
///
/// Only used as a reference: with `w = bank/τ` it coincides with
/// [`mmid_loss_exact`]. It is not a training path.
pub fn parametric_instance_loss(
    w_v: ArrayView2<f64>,
    w_t: ArrayView2<f64>,
    f_v: ArrayView1<f64>,
    f_t: ArrayView1<f64>,
    i: usize,
) -> Result<f64> {
    check_query(f_v, w_v)?;
    check_query(f_t, w_t)?;
    if w_v.nrows() != w_t.nrows() || i >= w_v.nrows() {
        return Err(contract("class index or weight shapes inconsistent"));
    }
    let scores = w_v.dot(&f_v) + w_t.dot(&f_t);
    Ok(log_sum_exp(&scores) - scores[i])
}

/// Result of [`ranking_loss`] for a whole batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingLoss {
    pub loss: f64,
    pub grad_v: Array2<f64>,
    pub grad_t: Array2<f64>,
    /// Number of hinge terms with positive value.
    pub active: usize,
}

/// Bidirectional margin ranking loss over in-batch negatives.
///
/// Rows of `batch_v` and `batch_t` are paired by position and assumed unit
/// norm, so similarity is the dot product. For a video anchor `i` the term is
/// `1/(n−1) Σ_{j≠i} max(0, δ + v_i·t_j − v_i·t_i)`, and symmetrically for text
/// anchors. The returned loss sums both directions and averages over anchors.
pub fn ranking_loss(batch_v: ArrayView2<f64>, batch_t: ArrayView2<f64>, delta: f64) -> Result<RankingLoss> {
    let n = batch_v.nrows();
    if n < 2 {
        return Err(invalid("ranking loss needs at least two pairs in a batch"));
    }
    if batch_t.dim() != batch_v.dim() {
        return Err(Error::Shape(format!(
            "visual batch {:?} and text batch {:?} differ",
            batch_v.dim(),
            batch_t.dim()
        )));
    }
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(invalid(format!("margin must be finite and >= 0, got {delta}")));
    }
    let sim = batch_v.dot(&batch_t.t());
    let w = 1.0 / ((n - 1) as f64 * n as f64);
    let mut loss = 0.0;
    let mut active = 0;
    let mut grad_v = Array2::zeros(batch_v.dim());
    let mut grad_t = Array2::zeros(batch_t.dim());
    for i in 0..n {
        let pos = sim[[i, i]];
        for j in (0..n).filter(|&j| j != i) {
            // Video anchor i against text j.
            let term = delta + sim[[i, j]] - pos;
            if term > 0.0 {
                loss += w * term;
                active += 1;
                let (vi, tj, ti) = (batch_v.row(i), batch_t.row(j), batch_t.row(i));
                grad_v.row_mut(i).scaled_add(w, &tj);
                grad_v.row_mut(i).scaled_add(-w, &ti);
                grad_t.row_mut(j).scaled_add(w, &vi);
                grad_t.row_mut(i).scaled_add(-w, &vi);
            }
            // Text anchor i against video j.
            let term = delta + sim[[j, i]] - pos;
            if term > 0.0 {
                loss += w * term;
                active += 1;
                let (ti, vj, vi) = (batch_t.row(i), batch_v.row(j), batch_v.row(i));
                grad_t.row_mut(i).scaled_add(w, &vj);
                grad_t.row_mut(i).scaled_add(-w, &vi);
                grad_v.row_mut(j).scaled_add(w, &ti);
                grad_v.row_mut(i).scaled_add(-w, &ti);
            }
        }
    }
    Ok(RankingLoss {
        loss,
        grad_v,
        grad_t,
        active,
    })
}

/// Settings of the noise-contrastive estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct NceConfig {
    /// Noise samples per positive.
    pub m: usize,
    /// Number of instances, so the noise distribution is `1/n`.
    pub n: usize,
    /// Partition-function estimate turning `exp(s/τ)` into a probability.
    pub z_estimate: Option<f64>,
    pub exclude_positive: bool,
}

impl NceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(invalid("NCE needs m >= 1 and n >= 1"));
        }
        if self.m > self.n {
            return Err(invalid(format!(
                "noise count m={} exceeds instance count n={}",
                self.m, self.n
            )));
        }
        match self.z_estimate {
            Some(z) if !(z > 0.0 && z.is_finite()) => Err(invalid(format!(
                "partition estimate must be positive and finite, got {z}"
            ))),
            _ => Ok(()),
        }
    }

    fn log_z(&self) -> Result<f64> {
        self.validate()?;
        self.z_estimate
            .map(f64::ln)
            .ok_or_else(|| invalid("partition estimate is not calibrated"))
    }

    /// `ln(m · p_n) = ln(m/n)`.
    fn log_noise_mass(&self) -> f64 {
        (self.m as f64 / self.n as f64).ln()
    }
}

/// Posterior that a candidate with model probability `p` came from the data
/// rather than the uniform noise: `p / (p + m/n)`.
pub fn nce_posterior(p: f64, m: usize, n: usize) -> f64 {
    debug_assert!(p > 0.0 && m >= 1 && n >= 1);
    1.0 / (1.0 + (m as f64 / n as f64) / p)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of [`nce_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct NceLoss {
    pub loss: f64,
    pub grad: Array1<f64>,
    pub h_pos: f64,
    pub h_noise: Vec<f64>,
    pub saturated: usize,
}

fn check_nce_inputs(
    query: ArrayView1<f64>,
    pos: ArrayView1<f64>,
    noise: ArrayView2<f64>,
    cfg: &NceConfig,
) -> Result<()> {
    if pos.len() != query.len() || noise.ncols() != query.len() {
        return Err(Error::Shape(
            "query, positive and noise rows must share a dimension".into(),
        ));
    }
    if noise.nrows() != cfg.m {
        return Err(Error::Shape(format!(
            "expected {} noise rows, got {}",
            cfg.m,
            noise.nrows()
        )));
    }
    Ok(())
}

/// Binary data-vs-noise loss `−log h(pos) − Σ_noise log(1 − h(noise))`.
///
/// Each candidate's probability is `exp(f·query/τ) / z_estimate`. Everything is
/// evaluated in the log domain, so the loss stays finite even when a posterior
/// rounds to 0 or 1; such terms are counted in `saturated`.
pub fn nce_loss(
    query: ArrayView1<f64>,
    pos: ArrayView1<f64>,
    noise: ArrayView2<f64>,
    cfg: &NceConfig,
    tau: Temperature,
) -> Result<NceLoss> {
    let log_z = cfg.log_z()?;
    check_nce_inputs(query, pos, noise, cfg)?;
    let t = tau.get();
    let offset = log_z + cfg.log_noise_mass();

    // Logit of h: ln p − ln(m/n).
    let x_pos = pos.dot(&query) / t - offset;
    let h_pos = sigmoid(x_pos);
    let mut loss = softplus(-x_pos);
    let mut grad = pos.to_owned() * (-sigmoid(-x_pos) / t);
    let mut saturated = usize::from(h_pos < SATURATION_FLOOR);

    let mut h_noise = Vec::with_capacity(noise.nrows());
    for row in noise.axis_iter(Axis(0)) {
        let x = row.dot(&query) / t - offset;
        let h = sigmoid(x);
        loss += softplus(x);
        grad.scaled_add(h / t, &row);
        saturated += usize::from(sigmoid(-x) < SATURATION_FLOOR);
        h_noise.push(h);
    }
    Ok(NceLoss {
        loss,
        grad,
        h_pos,
        h_noise,
        saturated,
    })
}

/// Posterior-weighted descent direction of the NCE loss:
/// `[1 − h(pos)]/τ · f_pos − Σ h(noise)/τ · f_noise`.
///
/// This is the negated gradient of [`nce_loss`], evaluated directly from the
/// posteriors `h = p/(p + m/n)` with `p = exp(s/τ)/z`.
pub fn cpd_grad_formula(
    query: ArrayView1<f64>,
    pos: ArrayView1<f64>,
    noise: ArrayView2<f64>,
    cfg: &NceConfig,
    tau: Temperature,
) -> Result<Array1<f64>> {
    let z = cfg.log_z()?.exp();
    check_nce_inputs(query, pos, noise, cfg)?;
    let t = tau.get();
    let posterior = |f: ArrayView1<f64>| nce_posterior((f.dot(&query) / t).exp() / z, cfg.m, cfg.n);
    let mut out = pos.to_owned() * ((1.0 - posterior(pos)) / t);
    for row in noise.axis_iter(Axis(0)) {
        out.scaled_add(-posterior(row) / t, &row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    const E: f64 = std::f64::consts::E;

    fn tau(t: f64) -> Temperature {
        Temperature::new(t).unwrap()
    }

    fn orthogonal_geometry() -> (Array1<f64>, Array2<f64>) {
        (
            arr1(&[1.0, 0.0, 0.0]),
            arr2(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
        )
    }

    fn random_unit_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Array2<f64> {
        let mut m: Array2<f64> = Array::from_shape_simple_fn((rows, d), || StandardNormal.sample(rng));
        for mut r in m.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        m
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(Temperature::new(f64::NAN).is_err());
        assert_eq!(Temperature::default().get(), 0.07);
    }

    #[test]
    fn single_class_softmax_is_certain() {
        let q = arr1(&[0.6, 0.8]);
        let bank = arr2(&[[0.0, 1.0]]);
        assert_eq!(cpd_prob_exact(q.view(), bank.view(), 0, tau(0.07)).unwrap(), 1.0);
        assert!(cpd_prob_exact(q.view(), Array2::zeros((0, 2)).view(), 0, tau(1.0)).is_err());
    }

    #[test]
    fn orthogonal_negatives_at_unit_temperature() {
        let (q, bank) = orthogonal_geometry();
        let p = cpd_prob_exact(q.view(), bank.view(), 0, tau(1.0)).unwrap();
        assert!((p - E / (E + 2.0)).abs() < 1e-15);
        assert!((p - 0.57611).abs() < 1e-5);
    }

    #[test]
    fn small_temperature_sharpens() {
        let (q, bank) = orthogonal_geometry();
        let p = cpd_prob_exact(q.view(), bank.view(), 0, tau(0.07)).unwrap();
        let expected = 1.0 / (1.0 + 2.0 * (-1.0f64 / 0.07).exp());
        assert!((p - expected).abs() < 1e-15);
        assert!(((1.0 - p) - 1.25e-6).abs() < 0.01e-6);
    }

    #[test]
    fn cpd_loss_examples() {
        let (q, bank) = orthogonal_geometry();
        let out = cpd_loss_exact(q.view(), q.view(), 0, bank.view(), bank.view(), tau(1.0)).unwrap();
        let per_direction = -(E / (E + 2.0)).ln();
        assert!((per_direction - 0.55144).abs() < 1e-5);
        assert!((out.loss - 2.0 * per_direction).abs() < 1e-14);

        let one = arr2(&[[1.0, 0.0, 0.0]]);
        let out = cpd_loss_exact(q.view(), q.view(), 0, one.view(), one.view(), tau(0.07)).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(matches!(
            cpd_loss_exact(q.view(), q.view(), 3, bank.view(), bank.view(), tau(1.0)),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn mmid_two_instance_example() {
        let t = 0.5;
        // Self scores 1 + 1 = 2 for instance 0, zero for instance 1.
        let f = arr1(&[1.0, 0.0]);
        let bank = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let out = mmid_loss_exact(f.view(), f.view(), 0, bank.view(), bank.view(), tau(t)).unwrap();
        let s1 = 2.0 / t;
        assert!((out.loss + (s1.exp() / (s1.exp() + 1.0)).ln()).abs() < 1e-14);
        let single = arr2(&[[0.0, 1.0]]);
        assert_eq!(
            mmid_loss_exact(f.view(), f.view(), 0, single.view(), single.view(), tau(t))
                .unwrap()
                .loss,
            0.0
        );
    }

    #[test]
    fn parametric_classifier_matches_mmid_with_bank_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank_v = random_unit_rows(&mut rng, 6, 4);
        let bank_t = random_unit_rows(&mut rng, 6, 4);
        let f_v = random_unit_rows(&mut rng, 1, 4).row(0).to_owned();
        let f_t = random_unit_rows(&mut rng, 1, 4).row(0).to_owned();
        let t = 0.2;
        let a =
            parametric_instance_loss((&bank_v / t).view(), (&bank_t / t).view(), f_v.view(), f_t.view(), 2).unwrap();
        let b = mmid_loss_exact(f_v.view(), f_t.view(), 2, bank_v.view(), bank_t.view(), tau(t)).unwrap();
        assert!((a - b.loss).abs() < 1e-12);
    }

    #[test]
    fn ranking_satisfied_margin_is_zero() {
        let v = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let out = ranking_loss(v.view(), v.view(), 0.5).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.active, 0);
        assert!(out.grad_v.iter().chain(out.grad_t.iter()).all(|&g| g == 0.0));
    }

    #[test]
    fn ranking_tied_similarities_contribute_margin() {
        // Every pair has similarity 0.5, so each hinge equals δ and each
        // anchor's average is δ; both directions sum to 2δ.
        let c = (0.75f64).sqrt();
        let v = arr2(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);
        let t = arr2(&[[0.5, c], [0.5, c], [0.5, -c]]);
        let out = ranking_loss(v.view(), t.view(), 0.3).unwrap();
        assert!((out.loss - 0.6).abs() < 1e-15);
        assert_eq!(out.active, 12);
        assert!(matches!(
            ranking_loss(v.slice(ndarray::s![..1, ..]), t.slice(ndarray::s![..1, ..]), 0.3),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn ranking_gradient_is_pair_difference() {
        // All four hinge terms are active (each equals 0.3). Video anchor 0
        // collects w·(t1 − t0) from its own term, −w·t0 from text anchor 0's
        // term and +w·t1 from text anchor 1's term, with w = 1/((n−1)n) = 1/2.
        let v = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let t = arr2(&[[0.6, 0.8], [0.8, 0.6]]);
        let out = ranking_loss(v.view(), t.view(), 0.1).unwrap();
        assert_eq!(out.active, 4);
        let expected = &t.row(1) - &t.row(0);
        assert!((&out.grad_v.row(0) - &expected).iter().all(|d| d.abs() < 1e-15));
        assert!((out.loss - 4.0 * 0.3 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn posterior_examples() {
        assert_eq!(nce_posterior(0.25, 1, 4), 0.5);
        assert_eq!(nce_posterior(0.5, 2, 4), 0.5);
        let mut last = 0.0;
        for p in [1e-3, 1e-1, 1.0, 1e3, 1e9, f64::INFINITY] {
            let h = nce_posterior(p, 16, 100);
            assert!(h > last);
            last = h;
        }
        assert_eq!(last, 1.0);
    }

    #[test]
    fn nce_requires_calibration() {
        let q = arr1(&[1.0, 0.0]);
        let noise = arr2(&[[0.0, 1.0]]);
        let cfg = NceConfig {
            m: 1,
            n: 4,
            z_estimate: None,
            exclude_positive: true,
        };
        assert!(matches!(
            nce_loss(q.view(), q.view(), noise.view(), &cfg, tau(1.0)),
            Err(Error::InvalidConfig(_))
        ));
        let bad = NceConfig { m: 5, ..cfg.clone() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn nce_closed_form_with_shared_posterior() {
        // Positive and both noise rows have the same score, so one h.
        let q = arr1(&[1.0, 0.0]);
        let s: f64 = 0.5;
        let row = arr1(&[s, (1.0 - s * s).sqrt()]);
        let noise = ndarray::stack(Axis(0), &[row.view(), row.view()]).unwrap();
        let (t, z) = (0.5, 3.0);
        let cfg = NceConfig {
            m: 2,
            n: 4,
            z_estimate: Some(z),
            exclude_positive: true,
        };
        let out = nce_loss(q.view(), row.view(), noise.view(), &cfg, tau(t)).unwrap();
        let p = (s / t).exp() / z;
        let h = p / (p + 2.0 / 4.0);
        let expected = -h.ln() - 2.0 * (1.0 - h).ln();
        assert!((out.loss - expected).abs() < 1e-14);
        assert!((out.h_pos - h).abs() < 1e-15);
    }

    #[test]
    fn saturated_posteriors_give_zero_direction() {
        let q = arr1(&[1.0, 0.0, 0.0]);
        let noise = arr2(&[[-1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        let cfg = NceConfig {
            m: 2,
            n: 8,
            z_estimate: Some(1.0),
            exclude_positive: true,
        };
        let g = cpd_grad_formula(q.view(), q.view(), noise.view(), &cfg, tau(0.01)).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-30));
        let out = nce_loss(q.view(), q.view(), noise.view(), &cfg, tau(0.01)).unwrap();
        assert!(out.loss.is_finite() && out.loss >= 0.0);
    }

    // Central finite differences of a scalar function of one vector.
    fn numeric_grad(f: impl Fn(&Array1<f64>) -> f64, x: &Array1<f64>) -> Array1<f64> {
        let h = 1e-5;
        Array1::from_shape_fn(x.len(), |k| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
    }

    fn rel_err(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn cpd_exact_gradients_match_finite_differences(seed in 0u64..100_000, n in 1usize..9, d in 2usize..17, t in 0.1f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bv = random_unit_rows(&mut rng, n, d);
            let bt = random_unit_rows(&mut rng, n, d);
            let fv = random_unit_rows(&mut rng, 1, d).row(0).to_owned();
            let ft = random_unit_rows(&mut rng, 1, d).row(0).to_owned();
            let i = seed as usize % n;
            let out = cpd_loss_exact(fv.view(), ft.view(), i, bv.view(), bt.view(), tau(t)).unwrap();
            let nv = numeric_grad(|x| cpd_loss_exact(x.view(), ft.view(), i, bv.view(), bt.view(), tau(t)).unwrap().loss, &fv);
            let nt = numeric_grad(|x| cpd_loss_exact(fv.view(), x.view(), i, bv.view(), bt.view(), tau(t)).unwrap().loss, &ft);
            prop_assert!(rel_err(&out.grad_v, &nv) <= 1e-4);
            prop_assert!(rel_err(&out.grad_t, &nt) <= 1e-4);
            prop_assert!(out.loss >= 0.0);
        }

        #[test]
        fn mmid_gradients_match_finite_differences(seed in 0u64..100_000, n in 1usize..9, d in 2usize..17, t in 0.1f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bv = random_unit_rows(&mut rng, n, d);
            let bt = random_unit_rows(&mut rng, n, d);
            let fv = random_unit_rows(&mut rng, 1, d).row(0).to_owned();
            let ft = random_unit_rows(&mut rng, 1, d).row(0).to_owned();
            let i = seed as usize % n;
            let out = mmid_loss_exact(fv.view(), ft.view(), i, bv.view(), bt.view(), tau(t)).unwrap();
            let nv = numeric_grad(|x| mmid_loss_exact(x.view(), ft.view(), i, bv.view(), bt.view(), tau(t)).unwrap().loss, &fv);
            let nt = numeric_grad(|x| mmid_loss_exact(fv.view(), x.view(), i, bv.view(), bt.view(), tau(t)).unwrap().loss, &ft);
            prop_assert!(rel_err(&out.grad_v, &nv) <= 1e-4);
            prop_assert!(rel_err(&out.grad_t, &nt) <= 1e-4);
        }

        #[test]
        fn exact_softmax_sums_to_one(seed in 0u64..100_000, n in 1usize..65, d in 2usize..17) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bank = random_unit_rows(&mut rng, n, d);
            let q = random_unit_rows(&mut rng, 1, d).row(0).to_owned();
            let total = cpd_probs_exact(q.view(), bank.view(), tau(0.07)).unwrap().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn nce_gradient_and_formula_agree(seed in 0u64..100_000, m in 1usize..8, d in 2usize..17, t in 0.05f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 8;
            let q = random_unit_rows(&mut rng, 1, d).row(0).to_owned();
            let pos = random_unit_rows(&mut rng, 1, d).row(0).to_owned();
            let noise = random_unit_rows(&mut rng, m, d);
            let cfg = NceConfig { m, n, z_estimate: Some(n as f64 * 1.3), exclude_positive: true };
            let out = nce_loss(q.view(), pos.view(), noise.view(), &cfg, tau(t)).unwrap();
            let numeric = numeric_grad(|x| nce_loss(x.view(), pos.view(), noise.view(), &cfg, tau(t)).unwrap().loss, &q);
            prop_assert!(rel_err(&out.grad, &numeric) <= 1e-4);
            let formula = cpd_grad_formula(q.view(), pos.view(), noise.view(), &cfg, tau(t)).unwrap();
            let diff = (&formula + &out.grad).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
            prop_assert!(diff <= 1e-6);
            prop_assert!(out.h_pos > 0.0 && out.h_pos < 1.0);
        }

        #[test]
        fn posterior_is_monotone_and_bounded(a in 1e-6f64..1e6, b in 1e-6f64..1e6, m in 1usize..100, n in 100usize..1000) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let (hl, hh) = (nce_posterior(lo, m, n), nce_posterior(hi, m, n));
            prop_assert!(hl > 0.0 && hh < 1.0);
            if lo < hi { prop_assert!(hl < hh); }
        }
    }

    #[test]
    fn ranking_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = 2 + (rand::Rng::random_range(&mut rng, 0..6));
            let d = 2 + (rand::Rng::random_range(&mut rng, 0..14));
            let v = random_unit_rows(&mut rng, n, d);
            let t = random_unit_rows(&mut rng, n, d);
            let out = ranking_loss(v.view(), t.view(), 0.5).unwrap();
            let flat_v = Array1::from_iter(v.iter().copied());
            let num_v = numeric_grad(
                |x| {
                    ranking_loss(x.to_shape((n, d)).unwrap().view(), t.view(), 0.5)
                        .unwrap()
                        .loss
                },
                &flat_v,
            );
            let ana_v = Array1::from_iter(out.grad_v.iter().copied());
            assert!(rel_err(&ana_v, &num_v) <= 1e-4);
            let flat_t = Array1::from_iter(t.iter().copied());
            let num_t = numeric_grad(
                |x| {
                    ranking_loss(v.view(), x.to_shape((n, d)).unwrap().view(), 0.5)
                        .unwrap()
                        .loss
                },
                &flat_t,
            );
            let ana_t = Array1::from_iter(out.grad_t.iter().copied());
            assert!(rel_err(&ana_t, &num_t) <= 1e-4);
        }
    }
}
