//! Static selection of the features communicated at BF16.
//!
//! The primary strategy keeps the top-k features by aggregated quantization
//! range; uniform random selection and the empty selection exist as
//! baselines. A selection is fixed across all sequences and devices, so the
//! wire format stays synchronized.

use serde::{Deserialize, Serialize};

use crate::calibration::RangeVector;
use crate::error::{Error, Result};
use crate::numeric::Rng;

/// How a selection was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Top-k features by aggregated range.
    TopRange,
    /// Uniform sample without replacement.
    Random { seed: u64 },
    /// No high-precision features (pure low-bit baseline).
    None,
}

/// A static set of `k` feature indices kept at BF16, sorted ascending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSelection {
    features: usize,
    indices: Vec<u32>,
    strategy: SelectionStrategy,
}

impl FeatureSelection {
    /// Validates indices (distinct, ascending, in range). An empty index set
    /// normalizes the strategy to `None`.
    pub fn new(
        features: usize,
        indices: Vec<u32>,
        strategy: SelectionStrategy,
    ) -> Result<Self> {
        if indices.len() > features {
            return Err(Error::SelectionTooLarge { k: indices.len(), features });
        }
        for pair in indices.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::InvalidArgument(
                    "selection indices must be strictly ascending".into(),
                ));
            }
        }
        if let Some(&last) = indices.last() {
            if last as usize >= features {
                return Err(Error::InvalidArgument(format!(
                    "selection index {last} out of range [0, {features})"
                )));
            }
        }
        let strategy = if indices.is_empty() { SelectionStrategy::None } else { strategy };
        Ok(FeatureSelection { features, indices, strategy })
    }

    /// The empty selection: everything is quantized.
    pub fn none(features: usize) -> Self {
        FeatureSelection { features, indices: Vec::new(), strategy: SelectionStrategy::None }
    }

    pub fn feature_count(&self) -> usize {
        self.features
    }

    /// Number of selected (BF16) features.
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn strategy(&self) -> SelectionStrategy {
        self.strategy
    }

    /// Dense membership mask over all features.
    pub fn mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.features];
        for &i in &self.indices {
            mask[i as usize] = true;
        }
        mask
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let parsed: FeatureSelection = serde_json::from_str(json)?;
        FeatureSelection::new(parsed.features, parsed.indices, parsed.strategy)
    }
}

/// The paper's default selection size, `floor(E / 64)`.
pub fn default_k(features: usize) -> usize {
    features / 64
}

/// The `k` features with the largest aggregated ranges; ties break toward
/// the lower index. The result is sorted ascending.
pub fn select_top_range(ranges: &RangeVector, k: usize) -> Result<FeatureSelection> {
    let features = ranges.feature_count();
    if k > features {
        return Err(Error::SelectionTooLarge { k, features });
    }
    let mut order: Vec<u32> = (0..features as u32).collect();
    order.sort_by(|&a, &b| {
        ranges
            .aggregated(b as usize)
            .total_cmp(&ranges.aggregated(a as usize))
            .then(a.cmp(&b))
    });
    let mut indices = order[..k].to_vec();
    indices.sort_unstable();
    FeatureSelection::new(features, indices, SelectionStrategy::TopRange)
}

/// Uniform sample of `k` distinct features, deterministic given the
/// generator; sorted ascending.
pub fn select_random(features: usize, k: usize, rng: &mut Rng) -> Result<FeatureSelection> {
    if k > features {
        return Err(Error::SelectionTooLarge { k, features });
    }
    let mut indices: Vec<u32> =
        rand::seq::index::sample(rng, features, k).iter().map(|i| i as u32).collect();
    indices.sort_unstable();
    FeatureSelection::new(features, indices, SelectionStrategy::Random { seed: rng.seed() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranges_of(aggregated_halves: &[f32]) -> RangeVector {
        // Single device: aggregated range == device range.
        RangeVector::from_per_device(1, aggregated_halves.len(), aggregated_halves.to_vec())
            .unwrap()
    }

    /// Brute-force oracle: sort all (range, index) pairs descending by range,
    /// ascending by index, take the first k.
    fn top_range_oracle(aggregated: &[f32], k: usize) -> Vec<u32> {
        let mut pairs: Vec<(f32, u32)> =
            aggregated.iter().enumerate().map(|(i, &r)| (r, i as u32)).collect();
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut idx: Vec<u32> = pairs[..k].iter().map(|p| p.1).collect();
        idx.sort_unstable();
        idx
    }

    #[test]
    fn default_k_values() {
        assert_eq!(default_k(4608), 72);
        assert_eq!(default_k(64), 1);
        assert_eq!(default_k(63), 0);
        assert_eq!(default_k(512), 8);
    }

    #[test]
    fn picks_largest_ranges() {
        let sel = select_top_range(&ranges_of(&[0.1, 9.0, 0.2, 5.0]), 2).unwrap();
        assert_eq!(sel.indices(), &[1, 3]);
        assert_eq!(sel.strategy(), SelectionStrategy::TopRange);
    }

    #[test]
    fn k_zero_is_none_strategy() {
        let sel = select_top_range(&ranges_of(&[1.0, 2.0]), 0).unwrap();
        assert_eq!(sel.k(), 0);
        assert_eq!(sel.strategy(), SelectionStrategy::None);
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let sel = select_top_range(&ranges_of(&[3.0, 3.0, 3.0, 3.0]), 2).unwrap();
        assert_eq!(sel.indices(), &[0, 1]);
    }

    #[test]
    fn k_too_large_is_an_error() {
        assert!(select_top_range(&ranges_of(&[1.0]), 2).is_err());
        assert!(select_random(1, 2, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = Rng::new(99);
        for _ in 0..200 {
            let e = 1 + (rand::Rng::random::<u32>(&mut rng) as usize % 40);
            // Draw from a tiny value set so ties are common.
            let aggregated: Vec<f32> = (0..e)
                .map(|_| (rand::Rng::random::<u32>(&mut rng) % 5) as f32 * 0.5)
                .collect();
            let k = rand::Rng::random::<u32>(&mut rng) as usize % (e + 1);
            let sel = select_top_range(&ranges_of(&aggregated), k).unwrap();
            assert_eq!(sel.indices(), top_range_oracle(&aggregated, k), "E={e} k={k}");
        }
    }

    #[test]
    fn top_range_invariant_under_positive_scaling() {
        let aggregated = vec![0.3, 7.0, 0.01, 5.5, 5.5, 2.0];
        let scaled: Vec<f32> = aggregated.iter().map(|r| r * 42.5).collect();
        let a = select_top_range(&ranges_of(&aggregated), 3).unwrap();
        let b = select_top_range(&ranges_of(&scaled), 3).unwrap();
        assert_eq!(a.indices(), b.indices());
    }

    #[test]
    fn random_selection_is_deterministic() {
        let a = select_random(100, 5, &mut Rng::new(1234)).unwrap();
        let b = select_random(100, 5, &mut Rng::new(1234)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.strategy(), SelectionStrategy::Random { seed: 1234 });
    }

    #[test]
    fn random_selection_edge_sizes() {
        let all = select_random(6, 6, &mut Rng::new(5)).unwrap();
        assert_eq!(all.indices(), &[0, 1, 2, 3, 4, 5]);
        let none = select_random(6, 0, &mut Rng::new(5)).unwrap();
        assert_eq!(none.k(), 0);
        assert_eq!(none.strategy(), SelectionStrategy::None);
    }

    #[test]
    fn random_selection_frequency_is_uniform() {
        // Each feature should appear with empirical frequency k/E within
        // 3 standard errors.
        let e = 50;
        let k = 5;
        let trials = 4000;
        let mut counts = vec![0u32; e];
        for seed in 0..trials {
            let sel = select_random(e, k, &mut Rng::new(seed)).unwrap();
            for &i in sel.indices() {
                counts[i as usize] += 1;
            }
        }
        let p = k as f64 / e as f64;
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / trials as f64;
            assert!(
                (freq - p).abs() <= 3.0 * se,
                "feature {i}: frequency {freq} vs expected {p} (se {se})"
            );
        }
    }

    #[test]
    fn json_round_trip() {
        let sel = select_top_range(&ranges_of(&[1.0, 5.0, 2.0]), 2).unwrap();
        let json = sel.to_json().unwrap();
        assert_eq!(FeatureSelection::from_json(&json).unwrap(), sel);
    }

    #[test]
    fn invalid_indices_rejected() {
        assert!(FeatureSelection::new(4, vec![1, 1], SelectionStrategy::TopRange).is_err());
        assert!(FeatureSelection::new(4, vec![2, 1], SelectionStrategy::TopRange).is_err());
        assert!(FeatureSelection::new(4, vec![4], SelectionStrategy::TopRange).is_err());
    }
}
