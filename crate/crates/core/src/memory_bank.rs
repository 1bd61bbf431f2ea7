//! Per-instance embedding memory for both modalities.
//!
//! Every row is kept on the unit sphere. Rows are refreshed with a momentum
//! blend of the stored value and the newest embedding, then renormalized;
//! a momentum of zero overwrites the row outright.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::encoders::l2_normalize;
use crate::error::{contract, invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Visual,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    visual: Array2<f64>,
    text: Array2<f64>,
    momentum: f64,
}

/// Indices drawn by [`MemoryBank::sample_noise`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseDraw {
    pub indices: Vec<usize>,
}

fn check_momentum(momentum: f64) -> Result<()> {
    if (0.0..=1.0).contains(&momentum) {
        Ok(())
    } else {
        Err(invalid(format!("bank momentum must lie in [0, 1], got {momentum}")))
    }
}

fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut rows = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
    for mut row in rows.rows_mut() {
        // A standard normal draw of norm < 1e-12 does not happen in practice;
        // fall back to a basis vector rather than failing initialization.
        let norm = row.dot(&row).sqrt();
        if norm > 1e-12 {
            row /= norm;
        } else {
            row.fill(0.0);
            row[0] = 1.0;
        }
    }
    rows
}

impl MemoryBank {
    /// Random unit rows for `n` instances of dimension `d`, deterministic in `seed`.
    pub fn new(n: usize, d: usize, momentum: f64, seed: u64) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(invalid(format!("memory bank needs n >= 1 and d >= 1, got {n}x{d}")));
        }
        check_momentum(momentum)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let visual = random_unit_rows(&mut rng, n, d);
        let text = random_unit_rows(&mut rng, n, d);
        Ok(Self { visual, text, momentum })
    }

    /// Rebuilds a bank from stored rows, checking the unit-norm invariant.
    pub fn from_parts(visual: Array2<f64>, text: Array2<f64>, momentum: f64) -> Result<Self> {
        check_momentum(momentum)?;
        if visual.dim() != text.dim() || visual.is_empty() {
            return Err(Error::Shape(format!(
                "visual {:?} and text {:?} stores must be equal and non-empty",
                visual.dim(),
                text.dim()
            )));
        }
        for store in [&visual, &text] {
            for (i, row) in store.axis_iter(Axis(0)).enumerate() {
                let norm = row.dot(&row).sqrt();
                if !((norm - 1.0).abs() <= 1e-6) {
                    return Err(contract(format!("bank row {i} has norm {norm}")));
                }
            }
        }
        Ok(Self { visual, text, momentum })
    }

    pub fn len(&self) -> usize {
        self.visual.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.visual.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.visual.ncols()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn store(&self, modality: Modality) -> ArrayView2<'_, f64> {
        match modality {
            Modality::Visual => self.visual.view(),
            Modality::Text => self.text.view(),
        }
    }

    pub fn row(&self, modality: Modality, i: usize) -> Result<ArrayView1<'_, f64>> {
        self.check_index(i)?;
        let store = match modality {
            Modality::Visual => &self.visual,
            Modality::Text => &self.text,
        };
        Ok(store.row(i))
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i < self.len() {
            Ok(())
        } else {
            Err(contract(format!("instance {i} outside bank of {} rows", self.len())))
        }
    }

    /// Blends `embedding` into row `i` with the bank's momentum.
    pub fn update(&mut self, modality: Modality, i: usize, embedding: ArrayView1<f64>) -> Result<()> {
        self.update_with_momentum(modality, i, embedding, self.momentum)
    }

    /// `row_i ← normalize(momentum·row_i + (1 − momentum)·embedding)`.
    pub fn update_with_momentum(
        &mut self,
        modality: Modality,
        i: usize,
        embedding: ArrayView1<f64>,
        momentum: f64,
    ) -> Result<()> {
        self.check_index(i)?;
        check_momentum(momentum)?;
        if embedding.len() != self.dim() {
            return Err(Error::Shape(format!(
                "embedding has dimension {}, bank stores {}",
                embedding.len(),
                self.dim()
            )));
        }
        let store = match modality {
            Modality::Visual => &mut self.visual,
            Modality::Text => &mut self.text,
        };
        let mut row = store.row_mut(i);
        let blended = if momentum == 0.0 {
            embedding.to_owned()
        } else if momentum == 1.0 {
            return Ok(());
        } else {
            &row * momentum + &(&embedding * (1.0 - momentum))
        };
        row.assign(&l2_normalize(blended.view())?);
        Ok(())
    }

    /// Copies the requested rows; later updates do not affect the result.
    pub fn lookup(&self, modality: Modality, indices: &[usize]) -> Result<Array2<f64>> {
        for &i in indices {
            self.check_index(i)?;
        }
        Ok(self.store(modality).select(Axis(0), indices))
    }

    /// Draws `m` instance ids i.i.d. from the uniform distribution over the
    /// bank, rejecting `positive` when `exclude_positive` is set.
    pub fn sample_noise<R: Rng + ?Sized>(
        &self,
        m: usize,
        positive: usize,
        exclude_positive: bool,
        rng: &mut R,
    ) -> Result<NoiseDraw> {
        let n = self.len();
        if m == 0 {
            return Err(invalid("noise count must be >= 1"));
        }
        if exclude_positive {
            self.check_index(positive)?;
            if n < 2 {
                return Err(invalid("cannot exclude the positive from a single-instance bank"));
            }
        }
        let indices = (0..m)
            .map(|_| loop {
                let j = rng.random_range(0..n);
                if !(exclude_positive && j == positive) {
                    break j;
                }
            })
            .collect();
        Ok(NoiseDraw { indices })
    }

    /// Mean of `Σ_j exp(store[j]·q/τ)` over query rows, in the log domain.
    pub fn log_partition(&self, modality: Modality, queries: ArrayView2<f64>, tau: f64) -> Result<f64> {
        if queries.nrows() == 0 {
            return Err(invalid("partition estimate needs at least one query"));
        }
        let store = self.store(modality);
        let per_query: Vec<f64> = queries
            .axis_iter(Axis(0))
            .map(|q| {
                let s: Array1<f64> = store.dot(&q) / tau;
                let max = s.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                max + s.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
            })
            .collect();
        let max = per_query.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = per_query.iter().map(|x| (x - max).exp()).sum::<f64>() / per_query.len() as f64;
        let log_z = max + mean.ln();
        if log_z.is_finite() {
            Ok(log_z)
        } else {
            Err(Error::NumericFault(format!(
                "partition estimate is not finite ({log_z})"
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, aview1};
    use proptest::prelude::{prop_assert, proptest};

    #[test]
    fn init_rows_are_unit_and_deterministic() {
        let a = MemoryBank::new(50, 8, 0.5, 3).unwrap();
        let b = MemoryBank::new(50, 8, 0.5, 3).unwrap();
        assert_eq!(a, b);
        for m in [Modality::Visual, Modality::Text] {
            for row in a.store(m).rows() {
                assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
            }
        }
        assert!(MemoryBank::new(0, 8, 0.5, 0).is_err());
        assert!(MemoryBank::new(4, 0, 0.5, 0).is_err());
        assert!(MemoryBank::new(4, 2, 1.5, 0).is_err());
    }

    #[test]
    fn random_rows_are_nearly_orthogonal() {
        let bank = MemoryBank::new(10_000, 64, 0.5, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store = bank.store(Modality::Visual);
        let mut total = 0.0;
        for _ in 0..100 {
            let (i, j): (usize, usize) = (
                Rng::random_range(&mut rng, 0..10_000),
                Rng::random_range(&mut rng, 0..10_000),
            );
            total += store.row(i).dot(&store.row(j).view());
        }
        // Pairs with i == j would contribute 1; the chance of one is 1%.
        assert!((total / 100.0).abs() < 0.05, "mean dot {}", total / 100.0);
    }

    #[test]
    fn update_examples() {
        let mut bank = MemoryBank::new(3, 2, 0.5, 0).unwrap();
        let e2 = arr1(&[0.0, 1.0]);
        bank.update_with_momentum(Modality::Text, 1, e2.view(), 0.0).unwrap();
        assert_eq!(bank.row(Modality::Text, 1).unwrap(), e2.view());

        let before = bank.row(Modality::Visual, 0).unwrap().to_owned();
        bank.update_with_momentum(Modality::Visual, 0, e2.view(), 1.0).unwrap();
        assert_eq!(bank.row(Modality::Visual, 0).unwrap(), before.view());

        bank.update_with_momentum(Modality::Visual, 2, aview1(&[1.0, 0.0]), 0.0)
            .unwrap();
        bank.update(Modality::Visual, 2, e2.view()).unwrap();
        let r = bank.row(Modality::Visual, 2).unwrap();
        let s = 0.5f64.sqrt();
        assert!((r[0] - s).abs() < 1e-15 && (r[1] - s).abs() < 1e-15);

        assert!(matches!(
            bank.update(Modality::Visual, 3, e2.view()),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn lookup_has_value_semantics() {
        let mut bank = MemoryBank::new(4, 3, 0.0, 9).unwrap();
        let v = arr1(&[0.0, 0.0, 1.0]);
        bank.update(Modality::Visual, 2, v.view()).unwrap();
        let got = bank.lookup(Modality::Visual, &[2]).unwrap();
        assert_eq!(got.row(0), v.view());

        bank.update(Modality::Visual, 2, aview1(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(got.row(0), v.view());

        let all = bank.lookup(Modality::Text, &[0, 1, 2, 3]).unwrap();
        assert!(all.rows().into_iter().all(|r| (r.dot(&r) - 1.0).abs() < 1e-12));
        assert!(bank.lookup(Modality::Text, &[4]).is_err());
    }

    #[test]
    fn noise_from_single_instance() {
        let bank = MemoryBank::new(1, 2, 0.5, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(bank.sample_noise(3, 0, false, &mut rng).unwrap().indices, vec![0, 0, 0]);
        assert!(bank.sample_noise(3, 0, true, &mut rng).is_err());
    }

    #[test]
    fn excluded_positive_never_drawn() {
        let bank = MemoryBank::new(5, 2, 0.5, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draw = bank.sample_noise(10_000, 3, true, &mut rng).unwrap();
        assert!(draw.indices.iter().all(|&j| j != 3 && j < 5));
    }

    #[test]
    fn noise_is_uniform() {
        for n in [4usize, 16] {
            let bank = MemoryBank::new(n, 2, 0.5, 0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let draw = bank.sample_noise(100_000, 0, false, &mut rng).unwrap();
            let mut counts = vec![0usize; n];
            for j in draw.indices {
                counts[j] += 1;
            }
            let expected = 1.0 / n as f64;
            for c in counts {
                let freq = c as f64 / 100_000.0;
                assert!((freq - expected).abs() <= 0.02 * expected.max(0.25), "freq {freq}");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_in_rng_state() {
        let bank = MemoryBank::new(10, 2, 0.5, 0).unwrap();
        let a = bank
            .sample_noise(20, 1, true, &mut ChaCha8Rng::seed_from_u64(8))
            .unwrap();
        let b = bank
            .sample_noise(20, 1, true, &mut ChaCha8Rng::seed_from_u64(8))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn partition_of_orthogonal_bank_is_its_size() {
        let bank = MemoryBank::from_parts(
            Array2::eye(3),
            ndarray::arr2(&[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]),
            0.5,
        )
        .unwrap();
        let q = ndarray::arr2(&[[1.0, 0.0, 0.0]]);
        let log_z = bank.log_partition(Modality::Text, q.view(), 0.07).unwrap();
        assert!((log_z.exp() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn momentum_blend_converges_to_constant_target() {
        for mu in [0.1, 0.5, 0.9] {
            let mut bank = MemoryBank::new(1, 4, mu, 21).unwrap();
            let target = arr1(&[0.0, 0.6, 0.0, 0.8]);
            let bound = ((1e-3f64 / 2.0).ln() / mu.ln()).ceil() as usize + 5;
            let mut last = f64::INFINITY;
            let mut reached = None;
            for step in 1..=bound + 50 {
                bank.update(Modality::Visual, 0, target.view()).unwrap();
                let r = bank.row(Modality::Visual, 0).unwrap();
                let dist = (&r - &target).mapv(|x| x * x).sum().sqrt();
                assert!(dist <= last + 1e-15);
                last = dist;
                if dist < 1e-3 && reached.is_none() {
                    reached = Some(step);
                }
            }
            assert!(
                reached.unwrap() <= bound,
                "mu {mu}: reached at {reached:?}, bound {bound}"
            );
        }
    }

    proptest! {
        #[test]
        fn updates_preserve_unit_rows(
            seed in 0u64..1000,
            ops in proptest::collection::vec((0usize..6, proptest::bool::ANY, 0.0f64..1.0, proptest::collection::vec(-1.0f64..1.0, 5)), 1..40),
        ) {
            let mut bank = MemoryBank::new(6, 5, 0.5, seed).unwrap();
            for (i, visual, mu, raw) in ops {
                let Ok(e) = l2_normalize(aview1(&raw)) else { continue };
                let modality = if visual { Modality::Visual } else { Modality::Text };
                match bank.update_with_momentum(modality, i, e.view(), mu) {
                    Ok(()) | Err(Error::DegenerateVector { .. }) => {}
                    Err(e) => prop_assert!(false, "{e}"),
                }
            }
            for m in [Modality::Visual, Modality::Text] {
                for row in bank.store(m).rows() {
                    prop_assert!((row.dot(&row).sqrt() - 1.0).abs() <= 1e-6);
                }
            }
        }
    }
}
