//! Inverse-frequency oversampling and zero-fill shift augmentation.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inverse-frequency weights `p_c ∝ 1/count_c`, normalized over classes.
/// Drawing each sample of class c with weight `p_c` makes every class
/// equally likely.
pub fn oversample_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::Config("no classes to sample".into()));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass { class: c });
    }
    let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
    let z: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|v| v / z).collect())
}

/// Shifts every plane of a [B, N, N] image by (dy, dx), zero-filling the
/// vacated border.
pub fn shift_image(image: &Tensor<f32>, dy: i64, dx: i64) -> Tensor<f32> {
    let s = image.shape();
    let (b, h, w) = (s[0], s[1] as i64, s[2] as i64);
    let src = image.data();
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..b {
        let base = ch * (h * w) as usize;
        for y in 0..h {
            let sy = y - dy;
            if !(0..h).contains(&sy) {
                continue;
            }
            for x in 0..w {
                let sx = x - dx;
                if (0..w).contains(&sx) {
                    out[base + (y * w + x) as usize] = src[base + (sy * w + sx) as usize];
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Random per-axis integer shift in `[−⌊max_frac·N⌋, ⌊max_frac·N⌋]`.
pub fn augment_shift(image: &Tensor<f32>, max_frac: f64, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    if !(0.0..1.0).contains(&max_frac) {
        return Err(Error::invalid(format!("shift fraction {max_frac} outside [0, 1)")));
    }
    if image.rank() != 3 {
        return Err(Error::Rank {
            op: "augment_shift",
            expected: 3,
            shape: image.shape().to_vec(),
        });
    }
    let limit = |n: usize| (max_frac * n as f64).floor() as i64;
    let (ly, lx) = (limit(image.shape()[1]), limit(image.shape()[2]));
    if ly == 0 && lx == 0 {
        return Ok(image.clone());
    }
    let dy = rng.random_range(-ly..=ly);
    let dx = rng.random_range(-lx..=lx);
    Ok(shift_image(image, dy, dx))
}

/// Draws training batches with class-balanced probabilities.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    dist: WeightedIndex<f64>,
    len: usize,
}

impl BatchSampler {
    pub fn new(labels: &[u16], classes: usize) -> Result<Self> {
        let mut counts = vec![0usize; classes];
        for &l in labels {
            *counts.get_mut(l as usize).ok_or(Error::LabelOutOfRange {
                label: l as usize,
                classes,
            })? += 1;
        }
        let p = oversample_weights(&counts)?;
        let w: Vec<f64> = labels.iter().map(|&l| p[l as usize]).collect();
        let dist = WeightedIndex::new(&w).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            dist,
            len: labels.len(),
        })
    }

    /// `⌈len/batch⌉` batches of `batch` sample indices each.
    pub fn epoch(&self, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let n = self.len.div_ceil(batch);
        (0..n)
            .map(|_| (0..batch).map(|_| self.dist.sample(rng)).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weights_examples() {
        assert_eq!(oversample_weights(&[5, 5, 5, 5]).unwrap(), vec![0.25; 4]);
        let p = oversample_weights(&[100, 300]).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
        assert!(matches!(oversample_weights(&[3, 0]), Err(Error::EmptyClass { class: 1 })));
    }

    #[test]
    fn sampled_stream_is_balanced() {
        let labels: Vec<u16> = (0..400).map(|i| if i < 100 { 0 } else if i < 300 { 1 } else { 2 }).collect();
        let s = BatchSampler::new(&labels, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0f64; 3];
        let draws = 100_000;
        for _ in 0..draws / 100 {
            for i in s.epoch(100, &mut rng).swap_remove(0) {
                counts[labels[i] as usize] += 1.0;
            }
        }
        let e = draws as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
        // 2 degrees of freedom, p = 0.001
        assert!(chi2 < 13.82, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn epoch_length() {
        let labels = vec![0u16; 250];
        let s = BatchSampler::new(&labels, 1).unwrap();
        let e = s.epoch(100, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(e.len(), 3);
        assert!(e.iter().all(|b| b.len() == 100));
    }

    #[test]
    fn shift_zero_is_identity() {
        let img = Tensor::from_fn(vec![2, 12, 12], |i| i as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_shift(&img, 0.0, &mut rng).unwrap(), img);
        assert!(augment_shift(&img, 1.0, &mut rng).is_err());
    }

    #[test]
    fn shift_range_for_twelve() {
        let img = Tensor::from_fn(vec![1, 12, 12], |i| (i + 1) as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..500 {
            let out = augment_shift(&img, 0.2, &mut rng).unwrap();
            let (dy, dx) = (-2..=2i64)
                .flat_map(|dy| (-2..=2i64).map(move |dx| (dy, dx)))
                .find(|&(dy, dx)| shift_image(&img, dy, dx) == out)
                .expect("shift within ±2");
            seen.insert((dy, dx));
        }
        assert_eq!(seen.len(), 25);
    }

    #[test]
    fn shift_round_trip_keeps_interior() {
        let img = Tensor::from_fn(vec![1, 6, 6], |i| (i + 1) as f32);
        let back = shift_image(&shift_image(&img, 1, -2), -1, 2);
        for y in 0..6 {
            for x in 0..6 {
                let v = back.at(&[0, y, x]);
                if y < 5 && x >= 2 {
                    assert_eq!(v, img.at(&[0, y, x]));
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }
}
