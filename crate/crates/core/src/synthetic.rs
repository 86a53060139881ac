//! Seeded smooth test map `R^3 -> R^3` standing in for the spine dataset:
//! a sum of Gaussian bumps shifted so that `f(0) = 0`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;

pub const DEFAULT_SEED: u64 = 20_240_607;
pub const DEFAULT_SAMPLES: usize = 1370;
pub const DEFAULT_BUMPS: usize = 20;
pub const DIM: usize = 3;
/// Range of the bump shape parameters; broad enough that the map is gently
/// curved on `[-1, 1]^3`.
pub const DEFAULT_SHAPES: (f64, f64) = (0.4, 1.0);

#[derive(Clone, Debug, PartialEq)]
pub struct BumpMap {
    centers: Vec<[f64; DIM]>,
    widths: Vec<f64>,
    weights: Vec<[f64; DIM]>,
    /// Value of each bump at the origin.
    offsets: Vec<f64>,
}

fn bump(center: &[f64; DIM], width: f64, x: &[f64]) -> f64 {
    let r2: f64 = center.iter().zip(x).map(|(c, v)| (c - v) * (c - v)).sum();
    (-width * width * r2).exp()
}

impl BumpMap {
    /// Centers uniform in `[-1, 1]^3`, shape parameters in
    /// [`DEFAULT_SHAPES`], weight vectors uniform in `[-1, 1]^3`.
    pub fn new(seed: u64, bumps: usize) -> Self {
        Self::with_shapes(seed, bumps, DEFAULT_SHAPES)
    }

    pub fn with_shapes(seed: u64, bumps: usize, shapes: (f64, f64)) -> Self {
        assert!(
            0.0 < shapes.0 && shapes.0 < shapes.1,
            "bad shape range {shapes:?}"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centers = Vec::with_capacity(bumps);
        let mut widths = Vec::with_capacity(bumps);
        let mut weights = Vec::with_capacity(bumps);
        for _ in 0..bumps {
            centers.push(std::array::from_fn(|_| rng.gen_range(-1.0..1.0)));
            widths.push(rng.gen_range(shapes.0..shapes.1));
            weights.push(std::array::from_fn(|_| rng.gen_range(-1.0..1.0)));
        }
        let offsets = centers
            .iter()
            .zip(&widths)
            .map(|(c, w)| bump(c, *w, &[0.0; DIM]))
            .collect();
        BumpMap {
            centers,
            widths,
            weights,
            offsets,
        }
    }

    pub fn eval(&self, x: &[f64]) -> [f64; DIM] {
        let mut out = [0.0; DIM];
        for k in 0..self.centers.len() {
            let b = bump(&self.centers[k], self.widths[k], x) - self.offsets[k];
            for (o, w) in out.iter_mut().zip(&self.weights[k]) {
                *o += w * b;
            }
        }
        out
    }

    /// `n` samples with inputs uniform in `[-1, 1]^3` drawn from a generator
    /// seeded with `seed + 1`. Row 0 is the origin, where the map vanishes.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        assert!(n >= 1, "need at least one sample");
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let inputs = DMatrix::from_fn(n, DIM, |i, _| {
            if i == 0 {
                0.0
            } else {
                rng.gen_range(-1.0..1.0)
            }
        });
        let outputs = DMatrix::from_fn(n, DIM, |i, j| {
            let x: Vec<f64> = inputs.row(i).iter().copied().collect();
            self.eval(&x)[j]
        });
        Dataset::new(inputs, outputs).expect("nonempty synthetic dataset")
    }
}

/// The reference dataset: [`DEFAULT_SAMPLES`] samples of a
/// [`DEFAULT_BUMPS`]-bump map, both seeded with `seed`.
pub fn spine_like(seed: u64) -> Dataset {
    BumpMap::new(seed, DEFAULT_BUMPS).sample(DEFAULT_SAMPLES, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_maps_to_zero() {
        let m = BumpMap::new(1, 20);
        assert_eq!(m.eval(&[0.0; 3]), [0.0; 3]);
        let d = spine_like(DEFAULT_SEED);
        assert_eq!(d.len(), DEFAULT_SAMPLES);
        assert!(d.inputs.row(0).iter().all(|v| *v == 0.0));
        assert!(d.outputs.row(0).iter().all(|v| *v == 0.0));
        assert!(d.inputs.iter().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(spine_like(5), spine_like(5));
        assert_ne!(spine_like(5).outputs, spine_like(6).outputs);
    }
}
