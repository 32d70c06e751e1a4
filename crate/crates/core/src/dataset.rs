//! Toy data distributions the teachers are trained on.

use crate::error::{BootError, Result};
use crate::tensorcore::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const RING_RADIUS: f64 = 4.0;
pub const RING_STD: f64 = 0.15;
pub const RING_MODES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyDataset {
    /// Ring of eight isotropic Gaussians, radius 4, per-mode std 0.15.
    EightGaussians,
    /// Same ring with two interleaved class labels (mode index mod 2).
    TwoClassRing,
    /// Point mass at a fixed vector; handy for convergence oracles.
    Constant(Vec<f64>),
}

impl ToyDataset {
    pub fn dim(&self) -> usize {
        match self {
            ToyDataset::EightGaussians | ToyDataset::TwoClassRing => 2,
            ToyDataset::Constant(c) => c.len(),
        }
    }

    /// Number of class labels; 0 means unlabeled.
    pub fn num_classes(&self) -> usize {
        match self {
            ToyDataset::TwoClassRing => 2,
            _ => 0,
        }
    }

    pub fn mode_centers(&self) -> Vec<Vec<f64>> {
        match self {
            ToyDataset::EightGaussians | ToyDataset::TwoClassRing => ring_centers(),
            ToyDataset::Constant(c) => vec![c.clone()],
        }
    }

    /// Centers belonging to one class of the labeled ring.
    pub fn class_centers(&self, class: usize) -> Result<Vec<Vec<f64>>> {
        if class >= self.num_classes() {
            return Err(BootError::contract(format!(
                "class {class} out of range for dataset with {} classes",
                self.num_classes()
            )));
        }
        Ok(ring_centers()
            .into_iter()
            .enumerate()
            .filter(|(i, _)| i % 2 == class)
            .map(|(_, c)| c)
            .collect())
    }

    /// Draws `n` samples; labels are returned only for labeled datasets.
    /// RNG consumption order per sample: mode index (if any), then the
    /// coordinate noise in axis order.
    pub fn sample<R: Rng>(&self, rng: &mut R, n: usize) -> (Tensor, Option<Vec<usize>>) {
        match self {
            ToyDataset::Constant(c) => {
                let mut data = Vec::with_capacity(n * c.len());
                for _ in 0..n {
                    data.extend_from_slice(c);
                }
                (
                    Tensor::new(vec![n, c.len()], data).expect("constant batch"),
                    None,
                )
            }
            ToyDataset::EightGaussians | ToyDataset::TwoClassRing => {
                let centers = ring_centers();
                let mut data = Vec::with_capacity(n * 2);
                let mut labels = Vec::with_capacity(n);
                for _ in 0..n {
                    let k = rng.gen_range(0..RING_MODES);
                    labels.push(k % 2);
                    let z0: f64 = rng.sample(StandardNormal);
                    let z1: f64 = rng.sample(StandardNormal);
                    data.push(centers[k][0] + RING_STD * z0);
                    data.push(centers[k][1] + RING_STD * z1);
                }
                let pts = Tensor::new(vec![n, 2], data).expect("ring batch");
                match self {
                    ToyDataset::TwoClassRing => (pts, Some(labels)),
                    _ => (pts, None),
                }
            }
        }
    }
}

fn ring_centers() -> Vec<Vec<f64>> {
    (0..RING_MODES)
        .map(|k| {
            let th = 2.0 * std::f64::consts::PI * k as f64 / RING_MODES as f64;
            vec![RING_RADIUS * th.cos(), RING_RADIUS * th.sin()]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ring_centers_lie_on_radius() {
        for c in ToyDataset::EightGaussians.mode_centers() {
            let r = (c[0] * c[0] + c[1] * c[1]).sqrt();
            assert!((r - RING_RADIUS).abs() < 1e-12);
        }
    }

    #[test]
    fn samples_cluster_near_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = ToyDataset::EightGaussians;
        let (pts, labels) = ds.sample(&mut rng, 500);
        assert!(labels.is_none());
        let centers = ds.mode_centers();
        for i in 0..pts.rows() {
            let p = pts.row(i);
            let d = centers
                .iter()
                .map(|c| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(d < RING_STD * 6.0, "sample {i} is {d} from every center");
        }
    }

    #[test]
    fn labeled_ring_alternates_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = ToyDataset::TwoClassRing;
        let (pts, labels) = ds.sample(&mut rng, 200);
        let labels = labels.unwrap();
        assert_eq!(labels.len(), pts.rows());
        assert!(labels.iter().any(|&l| l == 0) && labels.iter().any(|&l| l == 1));
        let class0 = ds.class_centers(0).unwrap();
        assert_eq!(class0.len(), 4);
        assert!(ds.class_centers(2).is_err());
    }

    #[test]
    fn constant_dataset_repeats_the_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = ToyDataset::Constant(vec![1.5]);
        let (pts, _) = ds.sample(&mut rng, 4);
        assert_eq!(pts.data(), &[1.5, 1.5, 1.5, 1.5]);
    }
}
