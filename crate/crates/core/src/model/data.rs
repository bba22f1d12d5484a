//! Seeded class-conditional Gaussian images.

use std::hash::{DefaultHasher, Hash, Hasher};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone)]
pub struct SynthDataset {
    /// `(image [h, w, c], label)`, grouped by class in label order.
    pub samples: Vec<(Tensor, usize)>,
    pub classes: usize,
    pub shape: [usize; 3],
    pub seed: u64,
    /// Per-class mean images.
    pub means: Vec<Tensor>,
}

/// `per_class` samples of each of `classes` classes. Class `c` has a mean
/// image built from per-channel offsets plus a smooth spatial pattern, both
/// scaled by `separation`; samples add unit Gaussian noise per pixel.
pub fn synth_dataset(
    classes: usize,
    per_class: usize,
    shape: [usize; 3],
    separation: f64,
    seed: u64,
    dtype: DType,
) -> Result<SynthDataset> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least two classes, got {classes}")));
    }
    let [h, w, c] = shape;
    if h * w * c == 0 {
        return Err(Error::Config(format!("empty image shape {shape:?}")));
    }
    let mut rng = Rng::new(seed);
    let means = (0..classes)
        .map(|_| {
            let offsets: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
            let (fy, fx, phase) = (rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.0, 6.3));
            let mut data = Vec::with_capacity(h * w * c);
            for y in 0..h {
                for x in 0..w {
                    let wave = (fy * y as f64 / h as f64 * 6.3 + fx * x as f64 / w as f64 * 6.3 + phase).sin();
                    data.extend(offsets.iter().map(|o| separation * (o + 0.5 * wave)));
                }
            }
            Tensor::from_vec_dtype(data, &[h, w, c], dtype)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::with_capacity(classes * per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let data = mean.data().iter().map(|m| m + rng.normal()).collect();
            samples.push((Tensor::from_vec_dtype(data, &shape, dtype)?, label));
        }
    }
    Ok(SynthDataset {
        samples,
        classes,
        shape,
        seed,
        means,
    })
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for (_, l) in &self.samples {
            counts[*l] += 1;
        }
        counts
    }

    /// Hash of every label and pixel bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (x, l) in &self.samples {
            l.hash(&mut h);
            x.shape().hash(&mut h);
            for v in x.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_reproducible() {
        let a = synth_dataset(3, 10, [4, 4, 2], 3.0, 9, DType::F64).unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(a.class_counts(), vec![10, 10, 10]);
        let b = synth_dataset(3, 10, [4, 4, 2], 3.0, 9, DType::F64).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = synth_dataset(3, 10, [4, 4, 2], 3.0, 10, DType::F64).unwrap();
        assert_ne!(a.checksum(), c.checksum());
        assert!(synth_dataset(1, 10, [4, 4, 2], 3.0, 0, DType::F64).is_err());
    }
}
