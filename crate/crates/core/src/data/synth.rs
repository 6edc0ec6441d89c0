//! Class-coded objects planted at independent random offsets per source.
//!
//! Each class owns one signature per source: a smooth pattern over
//! (channel, row, col) of the object footprint. Signatures are orthonormal
//! directions pulled toward their centroid as difficulty grows. Every
//! sample additionally blends in a random other class (a fine-grained
//! confuser, drawn independently per source), plus pixel noise. The object
//! is pasted over a cluttered background of random blobs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, DatasetManifest, GroundTruth, MultisourceSample, SourceSpec, Split, SplitDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SAMPLE_STREAM: u64 = 1 << 32;
const SPLIT_STREAM: u64 = 1 << 40;
const PATTERN_GAIN: f64 = 0.8;
const PRESENCE: f64 = 0.5;
const BLOBS: usize = 3;
const FREQUENCIES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub sources: Vec<SourceSpec>,
    pub classes: usize,
    /// Samples of the most frequent class.
    pub base_count: usize,
    /// Ratio between the largest and smallest class (1 = balanced).
    pub imbalance: f64,
    /// Fine-grained difficulty in [0, 1].
    pub difficulty: f64,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn new(sources: Vec<SourceSpec>, classes: usize, seed: u64) -> Self {
        Self {
            sources,
            classes,
            base_count: 300,
            imbalance: 10.0,
            difficulty: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Config("at least one source is required".into()));
        }
        for s in &self.sources {
            s.validate()?;
        }
        let mut names: Vec<&str> = self.sources.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate source names".into()));
        }
        if self.classes == 0 || self.classes > u16::MAX as usize {
            return Err(Error::Config(format!("class count {} out of range", self.classes)));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(Error::Config(format!("difficulty {} outside [0, 1]", self.difficulty)));
        }
        if !(self.imbalance >= 1.0 && self.imbalance.is_finite()) {
            return Err(Error::Config(format!("imbalance {} must be at least 1", self.imbalance)));
        }
        for (c, &n) in class_counts(self.classes, self.base_count, self.imbalance).iter().enumerate() {
            if n < 3 {
                return Err(Error::Config(format!(
                    "class {c} would get {n} samples; every split needs one"
                )));
            }
        }
        Ok(())
    }
}

/// Power-law class sizes: `base · (c+1)^(−ln(ratio)/ln C)`, so the first
/// class has `base` samples and the last `base / ratio`.
pub fn class_counts(classes: usize, base: usize, ratio: f64) -> Vec<usize> {
    if classes <= 1 {
        return vec![base; classes];
    }
    let alpha = ratio.ln() / (classes as f64).ln();
    (0..classes)
        .map(|c| (base as f64 * ((c + 1) as f64).powf(-alpha)).round() as usize)
        .collect()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Unit-norm class directions, mutually orthogonal when the footprint
/// has at least as many dimensions as there are classes.
fn class_directions(dim: usize, classes: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        if out.len() < dim {
            for u in &out {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        out.push(v);
    }
    out
}

/// Orthonormal low-frequency 2-D cosine basis over an `o`×`o` footprint,
/// `f`×`f` functions.
fn cosine_basis(o: usize, f: usize) -> Vec<Vec<f64>> {
    let axis = |u: usize, y: usize| {
        let s = if u == 0 { (1.0 / o as f64).sqrt() } else { (2.0 / o as f64).sqrt() };
        s * (std::f64::consts::PI * u as f64 * (y as f64 + 0.5) / o as f64).cos()
    };
    let mut out = Vec::with_capacity(f * f);
    for u in 0..f {
        for v in 0..f {
            out.push((0..o * o).map(|i| axis(u, i / o) * axis(v, i % o)).collect());
        }
    }
    out
}

/// Per-source class patterns over the object footprint [B·obj·obj].
/// Patterns are spatially smooth: each channel is a combination of the
/// lowest-frequency cosines, so small shifts keep them recognizable.
struct Signatures {
    patterns: Vec<Vec<f64>>,
}

impl Signatures {
    fn new(spec: &SourceSpec, classes: usize, difficulty: f64, rng: &mut impl Rng) -> Self {
        let (b, o) = (spec.channels, spec.object_size);
        let basis = cosine_basis(o, o.min(FREQUENCIES));
        let per = basis.len();
        let dim = b * o * o;
        let gain = PATTERN_GAIN * (dim as f64).sqrt();
        let mut patterns: Vec<Vec<f64>> = class_directions(b * per, classes, rng)
            .into_iter()
            .map(|coef| {
                let mut p = vec![0.0; dim];
                for ch in 0..b {
                    for (q, f) in basis.iter().enumerate() {
                        let w = coef[ch * per + q];
                        p[ch * o * o..(ch + 1) * o * o].iter_mut().zip(f).for_each(|(v, f)| *v += w * f);
                    }
                }
                p
            })
            .collect();
        let centroid: Vec<f64> = (0..dim)
            .map(|i| patterns.iter().map(|p| p[i]).sum::<f64>() / classes as f64)
            .collect();
        let keep = 1.0 - 0.6 * difficulty;
        for p in &mut patterns {
            for (v, m) in p.iter_mut().zip(&centroid) {
                *v = gain * (m + keep * (*v - m));
            }
        }
        Self { patterns }
    }
}

fn render(
    spec: &SourceSpec,
    sig: &Signatures,
    label: usize,
    difficulty: f64,
    rng: &mut impl Rng,
) -> (Tensor<f32>, (i16, i16)) {
    let (b, n, o) = (spec.channels, spec.neighborhood, spec.object_size);
    let mut img = vec![0.0f64; b * n * n];

    let blob_sigma = (o as f64 / 2.0).max(1.0);
    for _ in 0..BLOBS {
        let cy = rng.random_range(0.0..n as f64);
        let cx = rng.random_range(0.0..n as f64);
        let amp: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..1.0)).collect();
        for y in 0..n {
            for x in 0..n {
                let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let w = (-r2 / (2.0 * blob_sigma * blob_sigma)).exp();
                for (ch, a) in amp.iter().enumerate() {
                    img[(ch * n + y) * n + x] += a * w;
                }
            }
        }
    }
    for v in &mut img {
        *v += 0.2 * gaussian(rng);
    }

    let c = spec.center() as i64;
    let j = spec.offset_jitter as i64;
    let oy = (c + rng.random_range(-j..=j)) as usize;
    let ox = (c + rng.random_range(-j..=j)) as usize;

    let classes = sig.patterns.len();
    let mix = if classes > 1 {
        rng.random_range(0.0..=1.0) * (1.2 * difficulty).min(1.0)
    } else {
        0.0
    };
    let other = if classes > 1 {
        let k = rng.random_range(0..classes - 1);
        if k >= label {
            k + 1
        } else {
            k
        }
    } else {
        label
    };
    let noise = 0.6 * difficulty;
    let (own, confuser) = (&sig.patterns[label], &sig.patterns[other]);
    for ch in 0..b {
        for y in 0..o {
            for x in 0..o {
                let k = (ch * o + y) * o + x;
                let mut v = PRESENCE + (1.0 - mix) * own[k] + mix * confuser[k];
                if noise > 0.0 {
                    v += noise * gaussian(rng);
                }
                img[(ch * n + oy + y) * n + ox + x] = v;
            }
        }
    }
    let t = Tensor::new(vec![b, n, n], img.into_iter().map(|v| v as f32).collect()).expect("render shape");
    (t, (oy as i16, ox as i16))
}

/// Generates the three splits. Identical configs give bit-identical data.
pub fn gen_dataset(config: &GeneratorConfig) -> Result<SplitDataset> {
    config.validate()?;
    let classes = config.classes;
    let counts = class_counts(classes, config.base_count, config.imbalance);
    let signatures: Vec<Signatures> = config
        .sources
        .iter()
        .enumerate()
        .map(|(m, s)| Signatures::new(s, classes, config.difficulty, &mut stream_rng(config.seed, m as u64)))
        .collect();

    let mut samples: Vec<MultisourceSample> = Vec::with_capacity(counts.iter().sum());
    for (label, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let mut rng = stream_rng(config.seed, SAMPLE_STREAM + samples.len() as u64);
            let (images, offsets) = config
                .sources
                .iter()
                .zip(&signatures)
                .map(|(s, sig)| render(s, sig, label, config.difficulty, &mut rng))
                .unzip();
            samples.push(MultisourceSample {
                images,
                label,
                offsets,
            });
        }
    }

    let mut assignment = vec![Split::Train; samples.len()];
    let mut split_counts = [vec![0; classes], vec![0; classes], vec![0; classes]];
    let mut start = 0;
    for (c, &count) in counts.iter().enumerate() {
        let mut idx: Vec<usize> = (start..start + count).collect();
        idx.shuffle(&mut stream_rng(config.seed, SPLIT_STREAM + c as u64));
        let held = ((0.2 * count as f64).round() as usize).max(1);
        let (val, rest) = idx.split_at(held);
        let (test, _) = rest.split_at(held);
        val.iter().for_each(|&i| assignment[i] = Split::Val);
        test.iter().for_each(|&i| assignment[i] = Split::Test);
        split_counts[0][c] = count - 2 * held;
        split_counts[1][c] = held;
        split_counts[2][c] = held;
        start += count;
    }

    let manifest = DatasetManifest {
        classes,
        seed: config.seed,
        difficulty: config.difficulty,
        imbalance: config.imbalance,
        base_count: config.base_count,
        sources: config.sources.clone(),
        counts,
        split_counts,
    };
    let build = |split: Split| -> Result<Dataset> {
        let members: Vec<&MultisourceSample> = samples
            .iter()
            .zip(&assignment)
            .filter(|(_, &a)| a == split)
            .map(|(s, _)| s)
            .collect();
        let images = (0..config.sources.len())
            .map(|m| Tensor::stack(&members.iter().map(|s| s.images[m].clone()).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let truth = GroundTruth {
            offsets: (0..config.sources.len())
                .map(|m| members.iter().map(|s| s.offsets[m]).collect())
                .collect(),
        };
        let labels = members.iter().map(|s| s.label as u16).collect();
        Dataset::new(split, manifest.clone(), images, labels, truth)
    };
    Ok(SplitDataset {
        train: build(Split::Train)?,
        val: build(Split::Val)?,
        test: build(Split::Test)?,
        manifest,
    })
}
