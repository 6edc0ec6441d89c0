//! Single-source weakly supervised instance attention.
//!
//! Each of the R sliding-window proposals is encoded to a feature vector.
//! A localization branch scores regions against each other per class
//! (softmax over regions), a classification branch scores classes per
//! region (softmax over classes). Their Hadamard product summed over
//! regions, plus a per-class bias, gives the image-level logits.

use rand::Rng;

use crate::encoder::{DropoutSpec, Init, Linear, RegionEncoder, RegionEncoderSpec};
use crate::error::{Error, Result};
use crate::proposals;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Default sharpening temperature for single-source attention models.
pub const DEFAULT_TEMPERATURE: f64 = 1.0 / 60.0;

/// Positive divisor applied to logits before the final softmax.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureConfig(f64);

impl TemperatureConfig {
    pub fn new(t: f64) -> Result<Self> {
        if t > 0.0 && t.is_finite() {
            Ok(Self(t))
        } else {
            Err(Error::invalid(format!("temperature {t} must be positive")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        Self(DEFAULT_TEMPERATURE)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Variant {
    #[default]
    Full,
    /// Localization scores replaced by the uniform 1/R (mean pooling of
    /// classification scores).
    ClsOnly,
}

/// Graph handles of one attention forward pass. Score tensors are laid
/// out [B, R, C]; logits (bias included) are [B, C].
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub loc: Var,
    pub cls: Var,
    pub logits: Var,
}

/// φ^loc, φ^cls and the per-class bias b_c.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchHeads {
    pub loc: Linear,
    pub cls: Linear,
    pub bias: ParamId,
    pub classes: usize,
    pub features: usize,
}

impl BranchHeads {
    pub fn new(
        store: &mut ParamStore<f32>,
        prefix: &str,
        features: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("class count must be positive"));
        }
        Ok(Self {
            loc: Linear::new(store, &format!("{prefix}loc"), features, classes, Init::XavierUniform, rng)?,
            cls: Linear::new(store, &format!("{prefix}cls"), features, classes, Init::XavierUniform, rng)?,
            bias: store.add(format!("{prefix}bias"), Tensor::zeros(vec![classes]))?,
            classes,
            features,
        })
    }

    /// Raw branch scores for [B, R, F] features, shaped [B, R, C].
    fn project<T: Scalar>(&self, g: &mut Graph<'_, T>, omega: Var, layer: &Linear) -> Result<Var> {
        let s = g.shape(omega).to_vec();
        let flat = g.reshape(omega, vec![s[0] * s[1], s[2]])?;
        let y = layer.forward(g, flat)?;
        g.reshape(y, vec![s[0], s[1], self.classes])
    }

    /// σ^loc: per class, softmax across regions.
    pub fn localization<T: Scalar>(&self, g: &mut Graph<'_, T>, omega: Var) -> Result<Var> {
        let raw = self.project(g, omega, &self.loc)?;
        g.softmax(raw, 1)
    }

    /// σ^cls: per region, softmax across classes.
    pub fn classification<T: Scalar>(&self, g: &mut Graph<'_, T>, omega: Var) -> Result<Var> {
        let raw = self.project(g, omega, &self.cls)?;
        g.softmax(raw, 2)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, omega: Var, variant: Variant) -> Result<AttentionVars> {
        let s = g.shape(omega).to_vec();
        if s.len() != 3 || s[2] != self.features {
            return Err(Error::Geometry(format!(
                "branch heads expect [B, R, {}] features, got {s:?}",
                self.features
            )));
        }
        let cls = self.classification(g, omega)?;
        let loc = match variant {
            Variant::Full => self.localization(g, omega)?,
            Variant::ClsOnly => {
                let r = T::from_usize(s[1]).unwrap();
                g.input(Tensor::full(vec![s[0], s[1], self.classes], T::one() / r))
            }
        };
        let bias = g.param(self.bias);
        let logits = aggregate(g, loc, cls, bias)?;
        Ok(AttentionVars { loc, cls, logits })
    }
}

/// `logits[b, c] = Σ_i loc[b, i, c] · cls[b, i, c] + bias[c]`.
pub fn aggregate<T: Scalar>(g: &mut Graph<'_, T>, loc: Var, cls: Var, bias: Var) -> Result<Var> {
    let prod = g.mul(loc, cls)?;
    let pooled = g.sum_axis(prod, 1)?;
    let shape = g.shape(pooled).to_vec();
    let b = g.broadcast(bias, shape)?;
    g.add(pooled, b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub classes: usize,
    pub channels: usize,
    pub neighborhood: usize,
    pub window: usize,
    pub encoder: RegionEncoderSpec,
    pub dropout: DropoutSpec,
    pub temperature: TemperatureConfig,
    pub variant: Variant,
}

impl AttentionConfig {
    pub fn regions(&self) -> usize {
        (self.neighborhood + 1 - self.window).pow(2)
    }
}

/// φ^WSL = φ^pred ∘ φ^enc.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub config: AttentionConfig,
    pub encoder: RegionEncoder,
    pub heads: BranchHeads,
    /// Width of a per-sample context vector appended to every region's
    /// features before the branch heads (0 for a plain head).
    pub context: usize,
}

impl AttentionHead {
    pub fn new(store: &mut ParamStore<f32>, prefix: &str, config: AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::with_context(store, prefix, config, 0, rng)
    }

    /// Head whose branch layers read `features + context` inputs per region.
    pub fn with_context(
        store: &mut ParamStore<f32>,
        prefix: &str,
        config: AttentionConfig,
        context: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        proposals::region_count(config.neighborhood, config.window)?;
        let encoder = RegionEncoder::new(
            store,
            &format!("{prefix}enc."),
            &config.encoder,
            config.channels,
            config.window,
            config.dropout,
            rng,
        )?;
        let heads = BranchHeads::new(store, prefix, encoder.features() + context, config.classes, rng)?;
        Ok(Self {
            config,
            encoder,
            heads,
            context,
        })
    }

    /// Same architecture with the other variant; shares parameter ids.
    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut out = self.clone();
        out.config.variant = variant;
        out
    }

    pub fn regions(&self) -> usize {
        self.config.regions()
    }

    /// φ^enc: [B, Ch, N, N] → ω as [B, R, F].
    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.channels || s[2] != c.neighborhood || s[3] != c.neighborhood {
            return Err(Error::Geometry(format!(
                "attention model expects [B, {}, {n}, {n}], got {s:?}",
                c.channels,
                n = c.neighborhood
            )));
        }
        let crops = g.windows(x, c.window)?;
        let feats = self.encoder.forward(g, crops)?;
        g.reshape(feats, vec![s[0], self.regions(), self.encoder.features()])
    }

    /// Forward pass on `x` widened by the [B, K] vector `constant` as K
    /// spatially constant channels, without materializing them.
    pub fn forward_widened<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, constant: Var) -> Result<AttentionVars> {
        let s = g.shape(x).to_vec();
        let c = &self.config;
        let k = g.shape(constant).get(1).copied().unwrap_or(0);
        if s.len() != 4 || s[1] + k != c.channels || s[2] != c.neighborhood || s[3] != c.neighborhood {
            return Err(Error::Geometry(format!(
                "widened attention model expects [B, {}, {n}, {n}], got {s:?}",
                c.channels - k.min(c.channels),
                n = c.neighborhood
            )));
        }
        let crops = g.windows(x, c.window)?;
        let feats = self.encoder.forward_constant(g, crops, constant, self.regions())?;
        let omega = g.reshape(feats, vec![s[0], self.regions(), self.encoder.features()])?;
        self.heads.forward(g, omega, self.config.variant)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<AttentionVars> {
        if self.context != 0 {
            return Err(Error::Config(format!(
                "head expects a {}-wide context vector",
                self.context
            )));
        }
        let omega = self.encode(g, x)?;
        self.heads.forward(g, omega, self.config.variant)
    }

    /// Forward pass with a [B, context] vector replicated across regions and
    /// concatenated after each region's features.
    pub fn forward_with_context<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, context: Var) -> Result<AttentionVars> {
        let omega = self.encode(g, x)?;
        let s = g.shape(omega).to_vec();
        let cs = g.shape(context).to_vec();
        if cs != [s[0], self.context] {
            return Err(Error::Geometry(format!(
                "context must be [{}, {}], got {cs:?}",
                s[0], self.context
            )));
        }
        let ctx = g.reshape(context, vec![s[0], 1, self.context])?;
        let ctx = g.broadcast(ctx, vec![s[0], s[1], self.context])?;
        let omega = g.concat(&[omega, ctx], 2)?;
        self.heads.forward(g, omega, self.config.variant)
    }

    /// Logits divided by the temperature, ready for softmax / cross-entropy.
    pub fn tempered<T: Scalar>(&self, g: &mut Graph<'_, T>, logits: Var) -> Var {
        g.scale(logits, T::from_f64_lossy(1.0 / self.config.temperature.get()))
    }

    /// Full diagnostic output for a single [Ch, N, N] sample.
    pub fn predict(&self, store: &ParamStore<f32>, x: &Tensor<f32>) -> Result<AttentionOutput> {
        let s = x.shape();
        let c = &self.config;
        if s != [c.channels, c.neighborhood, c.neighborhood] {
            return Err(Error::Geometry(format!(
                "expected [{}, {n}, {n}], got {s:?}",
                c.channels,
                n = c.neighborhood
            )));
        }
        let mut g = Graph::new(store).no_grad();
        let xv = g.input(x.clone().reshape(vec![1, s[0], s[1], s[2]])?);
        let vars = self.forward(&mut g, xv)?;
        AttentionOutput::from_graph(&g, &vars, store.get(self.heads.bias), c.temperature, 0)
    }
}

/// Per-sample attention diagnostics with [C, R] score matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub loc_scores: Tensor<f32>,
    pub cls_scores: Tensor<f32>,
    pub logits: Vec<f32>,
    pub probs: Vec<f32>,
    pub bias: Vec<f32>,
}

impl AttentionOutput {
    pub fn from_graph(
        g: &Graph<'_, f32>,
        vars: &AttentionVars,
        bias: &Tensor<f32>,
        temperature: TemperatureConfig,
        sample: usize,
    ) -> Result<Self> {
        let s = g.shape(vars.loc).to_vec();
        let (r, c) = (s[1], s[2]);
        let pick = |v: Var| -> Result<Tensor<f32>> {
            let d = &g.value(v)[sample * r * c..(sample + 1) * r * c];
            // [R, C] → [C, R]
            Tensor::new(vec![c, r], (0..c * r).map(|k| d[(k % r) * c + k / r]).collect())
        };
        let logits = g.value(vars.logits)[sample * c..(sample + 1) * c].to_vec();
        let probs = tempered_softmax(&logits, temperature.get());
        Ok(Self {
            loc_scores: pick(vars.loc)?,
            cls_scores: pick(vars.cls)?,
            logits,
            probs,
            bias: bias.data().to_vec(),
        })
    }

    pub fn predicted_class(&self) -> usize {
        crate::tensor::argmax(&self.probs)
    }

    /// loc ⊙ cls for `class`, min-max normalized to [0, 1].
    pub fn region_scores(&self, class: usize) -> Vec<f32> {
        let r = self.loc_scores.shape()[1];
        let row: Vec<f32> = (0..r)
            .map(|i| self.loc_scores.at(&[class, i]) * self.cls_scores.at(&[class, i]))
            .collect();
        let lo = row.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if hi > lo {
            row.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; r]
        }
    }
}

/// softmax(logits / t) in f64, returned as f32.
pub fn tempered_softmax(logits: &[f32], t: f64) -> Vec<f32> {
    let z: Vec<f64> = logits.iter().map(|&v| v as f64 / t).collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| (v / s) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderStyle, Width};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(classes: usize, n: usize, w: usize) -> (ParamStore<f32>, AttentionHead) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AttentionConfig {
            classes,
            channels: 2,
            neighborhood: n,
            window: w,
            encoder: RegionEncoderSpec::new(EncoderStyle::Flat, Width { kernels: 3, features: 5 }, 1).unwrap(),
            dropout: DropoutSpec::NONE,
            temperature: TemperatureConfig::default(),
            variant: Variant::Full,
        };
        let head = AttentionHead::new(&mut store, "a.", cfg, &mut rng).unwrap();
        (store, head)
    }

    fn sample(n: usize) -> Tensor<f32> {
        Tensor::from_fn(vec![2, n, n], |i| ((i * 7919) % 23) as f32 / 23.0 - 0.5)
    }

    #[test]
    fn output_invariants() {
        let (store, head) = tiny(4, 6, 3);
        let out = head.predict(&store, &sample(6)).unwrap();
        assert_eq!(out.loc_scores.shape(), &[4, 16]);
        for c in 0..4 {
            let s: f32 = (0..16).map(|i| out.loc_scores.at(&[c, i])).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        for i in 0..16 {
            let s: f32 = (0..4).map(|c| out.cls_scores.at(&[c, i])).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        for (l, b) in out.logits.iter().zip(&out.bias) {
            let pre = l - b;
            assert!((0.0..=1.0).contains(&pre));
        }
        assert!((out.probs.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_region_logits_are_cls_plus_bias() {
        let (mut store, head) = tiny(3, 4, 4);
        store.get_mut(head.heads.bias).data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
        let out = head.predict(&store, &sample(4)).unwrap();
        for c in 0..3 {
            assert_eq!(out.loc_scores.at(&[c, 0]), 1.0);
            assert_eq!(out.logits[c], out.cls_scores.at(&[c, 0]) + out.bias[c]);
        }
    }

    #[test]
    fn zero_branches_give_uniform_scores() {
        let (mut store, head) = tiny(5, 5, 3);
        for id in [head.heads.loc.w, head.heads.cls.w] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let out = head.predict(&store, &sample(5)).unwrap();
        assert!(out.loc_scores.data().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-7));
        assert!(out.cls_scores.data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
        assert!(out.logits.iter().all(|&v| (v - 0.2).abs() < 1e-6));
    }

    #[test]
    fn cls_only_is_mean_of_cls_scores() {
        let (store, head) = tiny(3, 5, 3);
        let ablation = head.with_variant(Variant::ClsOnly);
        let out = ablation.predict(&store, &sample(5)).unwrap();
        for c in 0..3 {
            let mean: f32 = (0..9).map(|i| out.cls_scores.at(&[c, i])).sum::<f32>() / 9.0;
            assert!((out.logits[c] - (mean + out.bias[c])).abs() < 1e-6);
        }
        // R = 1: ablation and full model coincide
        let (store, head) = tiny(3, 4, 4);
        let a = head.predict(&store, &sample(4)).unwrap();
        let b = head.with_variant(Variant::ClsOnly).predict(&store, &sample(4)).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn temperature_limits() {
        assert!(TemperatureConfig::new(0.0).is_err());
        let logits = [0.9f32, 0.1, 0.4];
        let flat = tempered_softmax(&logits, 1e6);
        assert!(flat.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-4));
        for t in [1.0 / 60.0, 0.25, 1.0, 10.0] {
            let p = tempered_softmax(&logits, t);
            assert_eq!(crate::tensor::argmax(&p), 0);
        }
    }

    #[test]
    fn geometry_mismatch() {
        let (store, head) = tiny(3, 6, 3);
        assert!(matches!(head.predict(&store, &sample(5)), Err(Error::Geometry(_))));
    }
}
