//! Synthetic positive-unlabeled data with a known ground truth, drawn under
//! the selected-completely-at-random labeling mechanism.

use rand::Rng;

use crate::envs::{Bounds, PointState};

#[derive(Clone, Debug)]
pub struct ScarDataset {
    /// Labeled (and therefore feasible) states.
    pub labeled: Vec<PointState>,
    /// Unlabeled feasible states plus every infeasible state.
    pub unlabeled: Vec<PointState>,
    /// The infeasible rectangle.
    pub region: Bounds,
    pub bounds: Bounds,
    pub label_frequency: f64,
}

impl ScarDataset {
    /// Draws `n` states uniformly from `bounds`; states inside `region` are
    /// infeasible, every feasible state is labeled independently with
    /// probability `label_frequency`.
    pub fn generate<R: Rng + ?Sized>(
        n: usize,
        label_frequency: f64,
        region: Bounds,
        bounds: Bounds,
        rng: &mut R,
    ) -> Self {
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        for _ in 0..n {
            let [x, y] = bounds.sample(rng);
            let s = PointState::new(x, y, 0.0);
            let feasible = !region.contains(x, y);
            if feasible && rng.random_bool(label_frequency) {
                labeled.push(s);
            } else {
                unlabeled.push(s);
            }
        }
        ScarDataset {
            labeled,
            unlabeled,
            region,
            bounds,
            label_frequency,
        }
    }

    /// Ground-truth `Pr(c=1|s)` (class 1 = feasible).
    pub fn feasible_probability(&self, x: f64, y: f64) -> f64 {
        if self.region.contains(x, y) {
            0.0
        } else {
            1.0
        }
    }

    /// Ground-truth `Pr(l=1|s) = f·Pr(c=1|s)`.
    pub fn label_probability(&self, x: f64, y: f64) -> f64 {
        self.label_frequency * self.feasible_probability(x, y)
    }
}
