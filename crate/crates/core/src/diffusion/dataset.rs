use alloc::string::String;
use alloc::vec::Vec;

use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};

/// Samples of one concept: an isotropic Gaussian mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptClass {
    pub name: String,
    pub center: Vec<f64>,
    /// `count × data_dim`
    pub samples: Matrix,
}

/// Synthetic per-concept training data.
///
/// Mode centres sit evenly on a circle of the given radius in the first two
/// coordinates (remaining coordinates are zero).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub data_dim: usize,
    pub std: f64,
    pub classes: Vec<ConceptClass>,
}

impl ToyDataset {
    pub fn generate(
        names: &[String],
        data_dim: usize,
        radius: f64,
        std: f64,
        per_concept: usize,
        seed: u64,
    ) -> Result<Self> {
        if names.is_empty() || per_concept == 0 {
            return Err(Error::InvalidArgument("dataset needs at least one concept and one sample".into()));
        }
        if data_dim == 0 {
            return Err(Error::InvalidArgument("data_dim must be positive".into()));
        }
        let mut rng = Rng::new(seed);
        let k = names.len();
        let classes = names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let angle = 2.0 * core::f64::consts::PI * i as f64 / k as f64;
                let mut center = alloc::vec![0.0; data_dim];
                if data_dim == 1 {
                    center[0] = radius * (2.0 * i as f64 / (k.max(2) - 1) as f64 - 1.0);
                } else {
                    center[0] = radius * libm::cos(angle);
                    center[1] = radius * libm::sin(angle);
                }
                let samples = Matrix::from_fn(per_concept, data_dim, |_, d| center[d] + std * rng.normal());
                ConceptClass {
                    name: name.clone(),
                    center,
                    samples,
                }
            })
            .collect();
        Ok(Self {
            data_dim,
            std,
            classes,
        })
    }

    pub fn class(&self, name: &str) -> Result<&ConceptClass> {
        self.classes
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownConcept(name.into()))
    }

    /// A uniformly chosen stored sample of class `idx`.
    pub fn draw<'a>(&'a self, idx: usize, rng: &mut Rng) -> &'a [f64] {
        let s = &self.classes[idx].samples;
        s.row(rng.index(s.rows()))
    }

    pub fn draw_named<'a>(&'a self, name: &str, rng: &mut Rng) -> Result<&'a [f64]> {
        let s = &self.class(name)?.samples;
        Ok(s.row(rng.index(s.rows())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::math::norm2;
    use alloc::vec;

    fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, c) in centroids.iter().enumerate() {
            let d: Vec<f64> = c.iter().zip(x).map(|(a, b)| a - b).collect();
            let d = norm2(&d);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    #[test]
    fn classes_are_separable_by_nearest_centroid() {
        let names: Vec<String> = ["A", "B", "C", "D", "E"].iter().map(|s| (*s).into()).collect();
        let train = ToyDataset::generate(&names, 2, 2.0, 0.1, 500, 1).unwrap();
        let held_out = ToyDataset::generate(&names, 2, 2.0, 0.1, 500, 2).unwrap();
        let centroids: Vec<Vec<f64>> = train
            .classes
            .iter()
            .map(|c| {
                let mut m = vec![0.0; 2];
                for i in 0..c.samples.rows() {
                    for d in 0..2 {
                        m[d] += c.samples[(i, d)] / c.samples.rows() as f64;
                    }
                }
                m
            })
            .collect();
        let mut correct = 0;
        let mut total = 0;
        for (k, c) in held_out.classes.iter().enumerate() {
            for i in 0..c.samples.rows() {
                correct += (nearest(&centroids, c.samples.row(i)) == k) as usize;
                total += 1;
            }
        }
        assert!(correct as f64 / total as f64 >= 0.95);
    }

    #[test]
    fn rejects_empty() {
        assert!(ToyDataset::generate(&[], 2, 2.0, 0.1, 10, 0).is_err());
        assert!(ToyDataset::generate(&["A".into()], 2, 2.0, 0.1, 0, 0).is_err());
    }
}
