//! Multisource models combining a centered reference branch with instance
//! attention branches for the uncertain sources.
//!
//! | scheme | combination |
//! |---|---|
//! | `ProbLevel` | mean of the branch distributions |
//! | `LogitLevel` | α₀·ref logits + Σ α_m·S⁻¹(attention logits)/T_m, α = softmax(β) |
//! | `FeatureLevel` | reference features appended to every region's features |
//! | `PixelLevel` | reference features appended as constant input channels |
//!
//! Every model produces `scores` whose softmax is the final distribution.

use rand::Rng;

use crate::attention::{AttentionConfig, AttentionHead, AttentionOutput, AttentionVars, TemperatureConfig};
use crate::encoder::EncoderStyle;
use crate::error::{Error, Result};
use crate::reference::ReferenceCnn;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Clamp used before the inverse sigmoid.
pub const INV_SIGMOID_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    ProbLevel,
    LogitLevel,
    FeatureLevel,
    PixelLevel,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::ProbLevel, Scheme::LogitLevel, Scheme::FeatureLevel, Scheme::PixelLevel];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::ProbLevel => "ext1",
            Scheme::LogitLevel => "ext2",
            Scheme::FeatureLevel => "ext3",
            Scheme::PixelLevel => "ext4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion scheme `{s}`")))
    }
}

/// Branch weights: fixed α over the additional sources, or β over all
/// sources (reference first) with α = softmax(β).
#[derive(Clone, Debug, PartialEq)]
pub enum Weights {
    Alpha(Vec<f64>),
    Beta { init: Vec<f64>, learn: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub scheme: Scheme,
    /// One per additional source.
    pub temperatures: Vec<f64>,
    pub weights: Weights,
    pub eps: f64,
}

/// Default logit weights and temperatures by source style.
fn style_defaults(scheme: Scheme, style: EncoderStyle) -> (f64, f64) {
    use EncoderStyle::*;
    match (scheme, style) {
        (Scheme::ProbLevel, Flat) => (1.0, 1.0 / 48.0),
        (Scheme::ProbLevel, _) => (1.0, 1.0 / 18.0),
        (Scheme::LogitLevel, Flat) => (2.5, 0.25),
        (Scheme::LogitLevel, _) => (1.5, 0.25),
        (Scheme::FeatureLevel, Flat) => (0.74, 0.05),
        (Scheme::FeatureLevel, _) => (0.26, 0.025),
        (Scheme::PixelLevel, Flat) => (0.76, 1.0 / 60.0),
        (Scheme::PixelLevel, _) => (0.24, 1.0 / 60.0),
    }
}

impl FusionConfig {
    /// Defaults for the given additional-source encoder styles.
    pub fn preset(scheme: Scheme, styles: &[EncoderStyle]) -> Self {
        let (w, temperatures): (Vec<f64>, Vec<f64>) = styles.iter().map(|&s| style_defaults(scheme, s)).unzip();
        let weights = match scheme {
            Scheme::ProbLevel => Weights::Alpha(vec![1.0 / styles.len().max(1) as f64; styles.len()]),
            Scheme::LogitLevel => Weights::Beta {
                init: std::iter::once(1.0).chain(w).collect(),
                learn: false,
            },
            _ => {
                let z: f64 = w.iter().sum();
                Weights::Alpha(w.iter().map(|v| v / z).collect())
            }
        };
        Self {
            scheme,
            temperatures,
            weights,
            eps: INV_SIGMOID_EPS,
        }
    }

    pub fn validate(&self, additional: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{}: {m}", self.scheme.as_str())));
        if self.temperatures.len() != additional {
            return bad(format!("{} temperatures for {additional} sources", self.temperatures.len()));
        }
        if let Some(t) = self.temperatures.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return bad(format!("temperature {t} must be positive"));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return bad(format!("clamp epsilon {} outside (0, 0.5)", self.eps));
        }
        match &self.weights {
            Weights::Alpha(a) => {
                if a.len() != additional {
                    return bad(format!("{} weights for {additional} sources", a.len()));
                }
                if a.iter().any(|v| !(*v >= 0.0)) || (a.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return bad(format!("weights {a:?} must be nonnegative and sum to 1"));
                }
            }
            Weights::Beta { init, .. } => {
                if self.scheme != Scheme::LogitLevel {
                    return bad("learnable weights only apply to logit-level fusion".into());
                }
                if init.len() != additional + 1 {
                    return bad(format!("{} β values for {} sources", init.len(), additional + 1));
                }
            }
        }
        if self.scheme == Scheme::LogitLevel && !matches!(self.weights, Weights::Beta { .. }) {
            return bad("logit-level fusion is weighted by β".into());
        }
        Ok(())
    }

    /// Normalized weights (α = softmax(β) for the β form).
    pub fn alphas(&self) -> Vec<f64> {
        match &self.weights {
            Weights::Alpha(a) => a.clone(),
            Weights::Beta { init, .. } => softmax64(init),
        }
    }
}

pub(crate) fn softmax64(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Inverse sigmoid ln(p/(1−p)) after clamping p to [ε, 1−ε].
pub fn inv_sigmoid(p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Graph handles of one fusion forward pass.
#[derive(Clone, Debug)]
pub struct FusionVars {
    /// [B, C]; softmax gives the final distribution.
    pub scores: Var,
    pub branches: Vec<AttentionVars>,
}

/// A reference CNN plus one attention head per additional source.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub reference: ReferenceCnn,
    pub branches: Vec<AttentionHead>,
    pub beta: Option<ParamId>,
}

impl FusionModel {
    /// Builds the model. `branch_configs` describe each additional source as
    /// a plain attention model; feature- and pixel-level schemes widen the
    /// branch inputs by the reference feature size.
    pub fn new(
        store: &mut ParamStore<f32>,
        prefix: &str,
        config: FusionConfig,
        reference: ReferenceCnn,
        branch_configs: Vec<(String, AttentionConfig)>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate(branch_configs.len())?;
        let f_ref = reference.features();
        let mut branches = Vec::with_capacity(branch_configs.len());
        for (i, (name, mut cfg)) in branch_configs.into_iter().enumerate() {
            if cfg.classes != reference.config.classes {
                return Err(Error::Config(format!(
                    "branch `{name}` has {} classes, reference has {}",
                    cfg.classes, reference.config.classes
                )));
            }
            cfg.temperature = TemperatureConfig::new(config.temperatures[i])?;
            let p = format!("{prefix}{name}.");
            let head = match config.scheme {
                Scheme::FeatureLevel => AttentionHead::with_context(store, &p, cfg, f_ref, rng)?,
                Scheme::PixelLevel => {
                    cfg.channels += f_ref;
                    AttentionHead::new(store, &p, cfg, rng)?
                }
                _ => AttentionHead::new(store, &p, cfg, rng)?,
            };
            branches.push(head);
        }
        let beta = match &config.weights {
            Weights::Beta { init, learn } => {
                let t = Tensor::new(vec![init.len()], init.iter().map(|&v| v as f32).collect())?;
                let id = store.add(format!("{prefix}beta"), t)?;
                store.get_mut(id).set_requires_grad(*learn);
                Some(id)
            }
            Weights::Alpha(_) => None,
        };
        Ok(Self {
            config,
            reference,
            branches,
            beta,
        })
    }

    pub fn classes(&self) -> usize {
        self.reference.config.classes
    }

    /// `x_ref` is [B, Ch_ref, N_ref, N_ref]; `xs[m]` feeds branch m.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x_ref: Var, xs: &[Var]) -> Result<FusionVars> {
        if xs.len() != self.branches.len() {
            return Err(Error::Config(format!(
                "{} inputs for {} branches",
                xs.len(),
                self.branches.len()
            )));
        }
        let temps = &self.config.temperatures;
        let mut branch_vars = Vec::with_capacity(xs.len());
        let scores = match self.config.scheme {
            Scheme::ProbLevel => {
                let r = self.reference.forward_logits(g, x_ref)?;
                let mut sum = g.softmax(r, 1)?;
                for ((head, &x), &t) in self.branches.iter().zip(xs).zip(temps) {
                    let v = head.forward(g, x)?;
                    let z = g.scale(v.logits, T::from_f64_lossy(1.0 / t));
                    let p = g.softmax(z, 1)?;
                    sum = g.add(sum, p)?;
                    branch_vars.push(v);
                }
                let mean = g.scale(sum, T::from_f64_lossy(1.0 / (xs.len() + 1) as f64));
                g.ln(mean)
            }
            Scheme::LogitLevel => {
                let beta = g.param(self.beta.expect("logit fusion owns β"));
                let m = xs.len() + 1;
                let beta = g.reshape(beta, vec![1, m])?;
                let alpha = g.softmax(beta, 1)?;
                let r = self.reference.forward_logits(g, x_ref)?;
                let shape = g.shape(r).to_vec();
                let mut comb = self.weighted(g, alpha, 0, r, &shape)?;
                for (i, ((head, &x), &t)) in self.branches.iter().zip(xs).zip(temps).enumerate() {
                    let v = head.forward(g, x)?;
                    let s = g.inv_sigmoid(v.logits, self.config.eps)?;
                    let s = g.scale(s, T::from_f64_lossy(1.0 / t));
                    let term = self.weighted(g, alpha, i + 1, s, &shape)?;
                    comb = g.add(comb, term)?;
                    branch_vars.push(v);
                }
                comb
            }
            Scheme::FeatureLevel | Scheme::PixelLevel => {
                let f = self.reference.penultimate_features(g, x_ref)?;
                let alphas = self.config.alphas();
                let mut comb: Option<Var> = None;
                for (((head, &x), &t), &a) in self.branches.iter().zip(xs).zip(temps).zip(&alphas) {
                    let v = if self.config.scheme == Scheme::FeatureLevel {
                        head.forward_with_context(g, x, f)?
                    } else {
                        head.forward_widened(g, x, f)?
                    };
                    let term = g.scale(v.logits, T::from_f64_lossy(a / t));
                    comb = Some(match comb {
                        Some(c) => g.add(c, term)?,
                        None => term,
                    });
                    branch_vars.push(v);
                }
                comb.ok_or_else(|| Error::Config("feature/pixel fusion needs an additional source".into()))?
            }
        };
        Ok(FusionVars {
            scores,
            branches: branch_vars,
        })
    }

    fn weighted<T: Scalar>(&self, g: &mut Graph<'_, T>, alpha: Var, i: usize, x: Var, shape: &[usize]) -> Result<Var> {
        let a = g.narrow(alpha, 1, i, 1)?;
        let a = g.broadcast(a, shape.to_vec())?;
        g.mul(a, x)
    }
}

/// Appends a [B, F] vector to [B, Ch, N, N] as F spatially constant channels.
pub fn widen_pixels<T: Scalar>(g: &mut Graph<'_, T>, x: Var, features: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let fs = g.shape(features).to_vec();
    if s.len() != 4 || fs.len() != 2 || fs[0] != s[0] {
        return Err(Error::Geometry(format!("cannot widen {s:?} with features {fs:?}")));
    }
    let f = g.reshape(features, vec![fs[0], fs[1], 1, 1])?;
    let f = g.broadcast(f, vec![s[0], fs[1], s[2], s[3]])?;
    g.concat(&[x, f], 1)
}

/// Per-sample diagnostics of any multisource model.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    pub scores: Vec<f32>,
    pub probs: Vec<f32>,
    pub branches: Vec<AttentionOutput>,
}

impl FusionOutput {
    pub fn predicted_class(&self) -> usize {
        crate::tensor::argmax(&self.probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Variant;
    use crate::encoder::{DropoutSpec, RegionEncoderSpec, Width};
    use crate::reference::BaselineConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const C: usize = 3;
    const W: Width = Width { kernels: 2, features: 4 };

    fn reference(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> ReferenceCnn {
        let cfg = BaselineConfig {
            classes: C,
            channels: 2,
            neighborhood: 8,
            encoder: RegionEncoderSpec::new(EncoderStyle::Reference, W, 1).unwrap(),
            dropout: DropoutSpec::NONE,
        };
        ReferenceCnn::new(store, "ref.", cfg, rng).unwrap()
    }

    fn branch(channels: usize, n: usize, w: usize) -> AttentionConfig {
        AttentionConfig {
            classes: C,
            channels,
            neighborhood: n,
            window: w,
            encoder: RegionEncoderSpec::new(EncoderStyle::Flat, W, 1).unwrap(),
            dropout: DropoutSpec::NONE,
            temperature: TemperatureConfig::default(),
            variant: Variant::Full,
        }
    }

    fn model(scheme: Scheme) -> (ParamStore<f32>, FusionModel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let r = reference(&mut store, &mut rng);
        let cfg = FusionConfig::preset(scheme, &[EncoderStyle::Flat, EncoderStyle::Pooled]);
        let branches = vec![("a".to_string(), branch(2, 5, 3)), ("b".to_string(), branch(1, 6, 4))];
        let m = FusionModel::new(&mut store, "", cfg, r, branches, &mut rng).unwrap();
        (store, m)
    }

    fn inputs(g: &mut Graph<'_, f32>) -> (Var, Vec<Var>) {
        let f = |shape: Vec<usize>, k: usize| Tensor::from_fn(shape, |i| (((i * 31 + k) % 17) as f32 - 8.0) / 8.0);
        let r = g.input(f(vec![2, 2, 8, 8], 0));
        let a = g.input(f(vec![2, 2, 5, 5], 1));
        let b = g.input(f(vec![2, 1, 6, 6], 2));
        (r, vec![a, b])
    }

    fn probs(store: &ParamStore<f32>, m: &FusionModel) -> Vec<f32> {
        let mut g = Graph::new(store).no_grad();
        let (r, xs) = inputs(&mut g);
        let v = m.forward(&mut g, r, &xs).unwrap();
        let p = g.softmax(v.scores, 1).unwrap();
        g.value(p).to_vec()
    }

    #[test]
    fn presets_match_defaults() {
        let styles = [EncoderStyle::Flat, EncoderStyle::Pooled];
        let e1 = FusionConfig::preset(Scheme::ProbLevel, &styles);
        assert_eq!(e1.temperatures, vec![1.0 / 48.0, 1.0 / 18.0]);
        let e2 = FusionConfig::preset(Scheme::LogitLevel, &styles);
        assert_eq!(e2.weights, Weights::Beta { init: vec![1.0, 2.5, 1.5], learn: false });
        assert_eq!(e2.temperatures, vec![0.25, 0.25]);
        let e3 = FusionConfig::preset(Scheme::FeatureLevel, &styles);
        assert_eq!(e3.alphas(), vec![0.74, 0.26]);
        let e4 = FusionConfig::preset(Scheme::PixelLevel, &styles);
        assert_eq!(e4.alphas(), vec![0.76, 0.24]);
        for c in [e1, e2, e3, e4] {
            c.validate(2).unwrap();
        }
    }

    #[test]
    fn weight_validation() {
        let mut c = FusionConfig::preset(Scheme::FeatureLevel, &[EncoderStyle::Flat, EncoderStyle::Pooled]);
        c.weights = Weights::Alpha(vec![0.5, 0.6]);
        assert!(matches!(c.validate(2), Err(Error::Config(_))));
        c.weights = Weights::Alpha(vec![0.5, 0.5]);
        c.eps = 0.5;
        assert!(c.validate(2).is_err());
    }

    #[test]
    fn beta_softmax() {
        let c = FusionConfig {
            scheme: Scheme::LogitLevel,
            temperatures: vec![0.25],
            weights: Weights::Beta { init: vec![0.0, 0.0], learn: true },
            eps: INV_SIGMOID_EPS,
        };
        assert_eq!(c.alphas(), vec![0.5, 0.5]);
    }

    #[test]
    fn inverse_sigmoid_round_trip() {
        assert_eq!(inv_sigmoid(0.5, INV_SIGMOID_EPS), 0.0);
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            assert!((sigmoid(inv_sigmoid(p, INV_SIGMOID_EPS)) - p).abs() < 1e-6);
        }
        assert!(inv_sigmoid(1.7, INV_SIGMOID_EPS).is_finite());
        assert!(inv_sigmoid(-0.3, INV_SIGMOID_EPS).is_finite());
    }

    #[test]
    fn every_scheme_is_a_distribution() {
        for scheme in Scheme::ALL {
            let (store, m) = model(scheme);
            let p = probs(&store, &m);
            for row in p.chunks(C) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6, "{scheme:?}");
                assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
            }
        }
    }

    #[test]
    fn prob_level_is_branch_order_invariant() {
        let (store, m) = model(Scheme::ProbLevel);
        let mut g = Graph::new(&store).no_grad();
        let (r, xs) = inputs(&mut g);
        let a = m.forward(&mut g, r, &xs).unwrap().scores;
        // Manual mean in the opposite order.
        let rl = m.reference.forward_logits(&mut g, r).unwrap();
        let pr = g.softmax(rl, 1).unwrap();
        let mut acc = None;
        for (i, (head, &x)) in m.branches.iter().zip(&xs).enumerate().rev() {
            let v = head.forward(&mut g, x).unwrap();
            let z = g.scale(v.logits, 1.0 / m.config.temperatures[i] as f32);
            let p = g.softmax(z, 1).unwrap();
            acc = Some(match acc {
                Some(s) => g.add(s, p).unwrap(),
                None => p,
            });
        }
        let sum = g.add(acc.unwrap(), pr).unwrap();
        for (x, y) in g.value(a).iter().zip(g.value(sum)) {
            assert!((x.exp() - y / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn logit_level_single_source_is_reference() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = reference(&mut store, &mut rng);
        let cfg = FusionConfig {
            scheme: Scheme::LogitLevel,
            temperatures: vec![],
            weights: Weights::Beta { init: vec![0.3], learn: false },
            eps: INV_SIGMOID_EPS,
        };
        let m = FusionModel::new(&mut store, "", cfg, r, vec![], &mut rng).unwrap();
        let mut g = Graph::new(&store).no_grad();
        let (x, _) = inputs(&mut g);
        let fused = m.forward(&mut g, x, &[]).unwrap().scores;
        let pf = g.softmax(fused, 1).unwrap();
        let rl = m.reference.forward_logits(&mut g, x).unwrap();
        let pr = g.softmax(rl, 1).unwrap();
        assert_eq!(g.value(pf), g.value(pr));
    }

    #[test]
    fn logit_level_matches_hand_combination() {
        let (store, m) = model(Scheme::LogitLevel);
        let mut g = Graph::new(&store).no_grad();
        let (r, xs) = inputs(&mut g);
        let v = m.forward(&mut g, r, &xs).unwrap();
        let fused = g.value(v.scores).to_vec();
        let ref_logits = m.reference.forward_logits(&mut g, r).unwrap();
        let alpha = m.config.alphas();
        for (k, got) in fused.iter().enumerate() {
            let mut want = alpha[0] * g.value(ref_logits)[k] as f64;
            for (i, bv) in v.branches.iter().enumerate() {
                let p = g.value(bv.logits)[k] as f64;
                want += alpha[i + 1] * inv_sigmoid(p, INV_SIGMOID_EPS) / m.config.temperatures[i];
            }
            assert!((*got as f64 - want).abs() < 1e-4 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn feature_level_widths() {
        let (store, m) = model(Scheme::FeatureLevel);
        assert_eq!(m.branches[0].heads.features, 4 + 4);
        // Zeroing the reference-feature columns of the branch layers turns
        // each branch into a plain attention head over its own features.
        let mut zeroed = store.clone();
        for b in &m.branches {
            for lin in [&b.heads.loc, &b.heads.cls] {
                let t = zeroed.get_mut(lin.w);
                let fin = t.shape()[1];
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    if i % fin >= b.encoder.features() {
                        *v = 0.0;
                    }
                }
            }
        }
        let mut g = Graph::new(&zeroed).no_grad();
        let (r, xs) = inputs(&mut g);
        let v = m.forward(&mut g, r, &xs).unwrap();
        let fused: Vec<f32> = g.value(v.branches[0].logits).to_vec();
        let omega = m.branches[0].encode(&mut g, xs[0]).unwrap();
        let plain_heads = crate::attention::BranchHeads {
            features: 4,
            ..m.branches[0].heads.clone()
        };
        // Same weights restricted to the first four input columns.
        let mut narrow = zeroed.clone();
        let mut ids = vec![];
        for lin in [&plain_heads.loc, &plain_heads.cls] {
            let t = zeroed.get(lin.w);
            let rows: Vec<f32> = t.data().chunks(8).flat_map(|r| r[..4].to_vec()).collect();
            ids.push(narrow.add(format!("narrow{}", ids.len()), Tensor::new(vec![C, 4], rows).unwrap()).unwrap());
        }
        let heads = crate::attention::BranchHeads {
            loc: crate::encoder::Linear { w: ids[0], ..plain_heads.loc.clone() },
            cls: crate::encoder::Linear { w: ids[1], ..plain_heads.cls.clone() },
            ..plain_heads
        };
        let mut g2 = Graph::new(&narrow).no_grad();
        let om = g2.input(g.tensor(omega));
        let single = heads.forward(&mut g2, om, Variant::Full).unwrap();
        for (a, b) in fused.iter().zip(g2.value(single.logits)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn pixel_level_widens_channels() {
        let (store, m) = model(Scheme::PixelLevel);
        assert_eq!(m.branches[0].config.channels, 2 + 4);
        let mut g = Graph::new(&store).no_grad();
        let x = g.input(Tensor::from_fn(vec![2, 1, 3, 3], |i| i as f32));
        let f = g.input(Tensor::new(vec![2, 2], vec![7.0, 8.0, 9.0, 10.0]).unwrap());
        let w = widen_pixels(&mut g, x, f).unwrap();
        let t = g.tensor(w);
        assert_eq!(t.shape(), &[2, 3, 3, 3]);
        for y in 0..3 {
            for xx in 0..3 {
                assert_eq!(t.at(&[0, 1, y, xx]), 7.0);
                assert_eq!(t.at(&[1, 2, y, xx]), 10.0);
            }
        }
        let _ = probs(&store, &m);
    }

    #[test]
    fn implicit_constant_channels_match_explicit_widening() {
        let (store, m) = model(Scheme::PixelLevel);
        let store = store.cast::<f64>();
        let mut g = Graph::new(&store).no_grad();
        let (r, xs) = {
            let f = |shape: Vec<usize>, k: usize| Tensor::from_fn(shape, |i| (((i * 31 + k) % 17) as f64 - 8.0) / 8.0);
            (g.input(f(vec![2, 2, 8, 8], 0)), vec![g.input(f(vec![2, 2, 5, 5], 1)), g.input(f(vec![2, 1, 6, 6], 2))])
        };
        let f = m.reference.penultimate_features(&mut g, r).unwrap();
        for (head, &x) in m.branches.iter().zip(&xs) {
            let wide = widen_pixels(&mut g, x, f).unwrap();
            let explicit = head.forward(&mut g, wide).unwrap();
            let implicit = head.forward_widened(&mut g, x, f).unwrap();
            let (a, b) = (g.value(explicit.logits).to_vec(), g.value(implicit.logits).to_vec());
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-12, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn class_mismatch_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = reference(&mut store, &mut rng);
        let mut b = branch(2, 5, 3);
        b.classes = C + 1;
        let cfg = FusionConfig::preset(Scheme::ProbLevel, &[EncoderStyle::Flat]);
        assert!(FusionModel::new(&mut store, "", cfg, r, vec![("a".into(), b)], &mut rng).is_err());
    }
}
