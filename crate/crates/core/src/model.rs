//! Serializable model descriptions and the networks built from them.

use std::fmt::Write as _;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::attention::{AttentionConfig, AttentionHead, AttentionOutput, AttentionVars, TemperatureConfig, Variant};
use crate::data::{Dataset, Role, SourceSpec};
use crate::encoder::{DropoutSpec, EncoderStyle, RegionEncoderSpec, Width};
use crate::error::{Error, Result};
use crate::fusion::{softmax64, FusionConfig, FusionModel, FusionOutput, Scheme, Weights};
use crate::reference::{BaselineConfig, ReferenceCnn};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Holistic CNN over the whole neighborhood of one source.
    Baseline,
    /// Single-source instance attention.
    Attention,
    Fusion(Scheme),
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Attention => "attention",
            ModelKind::Fusion(s) => s.as_str(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(ModelKind::Baseline),
            "attention" => Ok(ModelKind::Attention),
            other => Scheme::parse(other)
                .map(ModelKind::Fusion)
                .map_err(|_| Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

/// Everything needed to rebuild a network's architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub classes: usize,
    /// Input sources in order; fusion models take the reference first.
    pub sources: Vec<SourceSpec>,
    pub width: Width,
    pub scale: usize,
    pub variant: Variant,
    /// One per source.
    pub dropout: Vec<DropoutSpec>,
    /// Single-source attention temperature.
    pub temperature: f64,
    pub fusion: Option<FusionConfig>,
    /// Feature/pixel fusion over several additional sources: one separately
    /// trained two-source model per additional source, logits combined by α.
    pub pairwise: bool,
}

/// Per-style dropout used by feature-level fusion, where the pretrained
/// layers stay frozen.
fn feature_level_dropout(style: EncoderStyle) -> DropoutSpec {
    match style {
        EncoderStyle::Flat => DropoutSpec { conv: 0.5, fc: 0.1 },
        _ => DropoutSpec { conv: 0.1, fc: 0.5 },
    }
}

impl ModelSpec {
    /// Default hyperparameters for `kind` over `sources`.
    pub fn new(kind: ModelKind, classes: usize, sources: Vec<SourceSpec>, width: Width, scale: usize) -> Result<Self> {
        let mut dropout = vec![DropoutSpec::default(); sources.len()];
        let fusion = match kind {
            ModelKind::Baseline | ModelKind::Attention => {
                if sources.len() != 1 {
                    return Err(Error::Config(format!(
                        "{} models take exactly one source, got {}",
                        kind.as_str(),
                        sources.len()
                    )));
                }
                None
            }
            ModelKind::Fusion(scheme) => {
                let styles: Vec<EncoderStyle> = sources.iter().skip(1).map(|s| s.encoder).collect();
                if scheme == Scheme::FeatureLevel {
                    for (d, &st) in dropout.iter_mut().skip(1).zip(&styles) {
                        *d = feature_level_dropout(st);
                    }
                }
                Some(FusionConfig::preset(scheme, &styles))
            }
        };
        let pairwise = matches!(kind, ModelKind::Fusion(Scheme::FeatureLevel | Scheme::PixelLevel)) && sources.len() > 2;
        let spec = Self {
            kind,
            classes,
            sources,
            width,
            scale,
            variant: Variant::Full,
            dropout,
            temperature: crate::attention::DEFAULT_TEMPERATURE,
            fusion,
            pairwise,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if self.scale == 0 {
            return Err(Error::Config("scale must be at least 1".into()));
        }
        if self.dropout.len() != self.sources.len() {
            return Err(Error::Config("one dropout setting per source".into()));
        }
        for s in &self.sources {
            s.validate()?;
        }
        for d in &self.dropout {
            d.validate()?;
        }
        TemperatureConfig::new(self.temperature)?;
        if let ModelKind::Fusion(scheme) = self.kind {
            if self.sources.len() < 2 {
                return Err(Error::Config(format!("{} needs a reference and at least one more source", scheme.as_str())));
            }
            if self.sources[0].role != Role::Reference {
                return Err(Error::Config(format!(
                    "first fusion source `{}` must be the reference",
                    self.sources[0].name
                )));
            }
            if let Some(s) = self.sources[1..].iter().find(|s| s.role == Role::Reference) {
                return Err(Error::Config(format!("only one reference source is supported, `{}` is another", s.name)));
            }
            let f = self.fusion.as_ref().ok_or_else(|| Error::Config("fusion settings missing".into()))?;
            if f.scheme != scheme {
                return Err(Error::Config("fusion scheme disagrees with model kind".into()));
            }
            f.validate(self.sources.len() - 1)?;
            if self.pairwise && !matches!(scheme, Scheme::FeatureLevel | Scheme::PixelLevel) {
                return Err(Error::Config("pairwise combination applies to ext3/ext4".into()));
            }
        } else if self.fusion.is_some() || self.pairwise {
            return Err(Error::Config("fusion settings on a single-source model".into()));
        }
        Ok(())
    }

    /// Multiplies every dropout probability by `factor`.
    pub fn scale_dropout(&mut self, factor: f64) -> Result<()> {
        if !(factor >= 0.0) {
            return Err(Error::Config(format!("dropout scale {factor} must be nonnegative")));
        }
        for d in &mut self.dropout {
            d.conv *= factor;
            d.fc *= factor;
            d.validate()?;
        }
        Ok(())
    }

    pub fn source_names(&self) -> Vec<&str> {
        self.sources.iter().map(|s| s.name.as_str()).collect()
    }

    /// The two-source model for additional source `i` (1-based position in
    /// `sources`) of a pairwise combination.
    pub fn pair(&self, i: usize) -> Result<ModelSpec> {
        let f = self.fusion.as_ref().ok_or_else(|| Error::Config("not a fusion model".into()))?;
        if i == 0 || i >= self.sources.len() {
            return Err(Error::Config(format!("no additional source at position {i}")));
        }
        let ref_dropout = if f.scheme == Scheme::FeatureLevel {
            self.dropout[i]
        } else {
            self.dropout[0]
        };
        let weights = match &f.weights {
            Weights::Alpha(_) => Weights::Alpha(vec![1.0]),
            Weights::Beta { init, learn } => Weights::Beta {
                init: vec![init[0], init[i]],
                learn: *learn,
            },
        };
        Ok(ModelSpec {
            sources: vec![self.sources[0].clone(), self.sources[i].clone()],
            dropout: vec![ref_dropout, self.dropout[i]],
            fusion: Some(FusionConfig {
                scheme: f.scheme,
                temperatures: vec![f.temperatures[i - 1]],
                weights,
                eps: f.eps,
            }),
            pairwise: false,
            ..self.clone()
        })
    }

    fn encoder(&self, style: EncoderStyle) -> Result<RegionEncoderSpec> {
        RegionEncoderSpec::new(style, self.width, self.scale)
    }

    fn baseline_config(&self, i: usize) -> Result<BaselineConfig> {
        let s = &self.sources[i];
        Ok(BaselineConfig {
            classes: self.classes,
            channels: s.channels,
            neighborhood: s.neighborhood,
            encoder: self.encoder(s.encoder)?,
            dropout: self.dropout[i],
        })
    }

    fn attention_config(&self, i: usize) -> Result<AttentionConfig> {
        let s = &self.sources[i];
        Ok(AttentionConfig {
            classes: self.classes,
            channels: s.channels,
            neighborhood: s.neighborhood,
            window: s.window,
            encoder: self.encoder(s.encoder)?,
            dropout: self.dropout[i],
            temperature: TemperatureConfig::new(self.temperature)?,
            variant: self.variant,
        })
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        writeln!(s, "kind: {}", self.kind.as_str()).unwrap();
        writeln!(s, "classes: {}", self.classes).unwrap();
        writeln!(s, "width: {},{}", self.width.kernels, self.width.features).unwrap();
        writeln!(s, "scale: {}", self.scale).unwrap();
        let variant = match self.variant {
            Variant::Full => "full",
            Variant::ClsOnly => "cls-only",
        };
        writeln!(s, "variant: {variant}").unwrap();
        writeln!(s, "temperature: {}", self.temperature).unwrap();
        writeln!(s, "pairwise: {}", self.pairwise).unwrap();
        writeln!(s, "sources: {}", self.sources.len()).unwrap();
        for (i, (src, d)) in self.sources.iter().zip(&self.dropout).enumerate() {
            writeln!(s, "source.{i}: {}", src.to_record()).unwrap();
            writeln!(s, "dropout.{i}: {},{}", d.conv, d.fc).unwrap();
        }
        if let Some(f) = &self.fusion {
            writeln!(s, "fusion.temperatures: {}", list(&f.temperatures)).unwrap();
            match &f.weights {
                Weights::Alpha(a) => writeln!(s, "fusion.alpha: {}", list(a)).unwrap(),
                Weights::Beta { init, learn } => {
                    writeln!(s, "fusion.beta: {}", list(init)).unwrap();
                    writeln!(s, "fusion.learn_beta: {learn}").unwrap();
                }
            }
            writeln!(s, "fusion.eps: {}", f.eps).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(": ")
                .ok_or_else(|| Error::format(format!("model spec line `{line}`")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::format(format!("model spec missing `{k}`")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::format(format!("model spec `{k}`: bad value `{v}`")))
        }
        let floats = |k: &str| -> Result<Vec<f64>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(vec![]);
            }
            v.split(',').map(|x| num(k, x)).collect()
        };
        let pair = |k: &str| -> Result<(String, String)> {
            get(k)?
                .split_once(',')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Error::format(format!("model spec `{k}` needs two values")))
        };
        let kind = ModelKind::parse(get("kind")?)?;
        let (wk, wf) = pair("width")?;
        let n: usize = num("sources", get("sources")?)?;
        let mut sources = Vec::with_capacity(n);
        let mut dropout = Vec::with_capacity(n);
        for i in 0..n {
            sources.push(SourceSpec::from_record(get(&format!("source.{i}"))?)?);
            let (c, f) = pair(&format!("dropout.{i}"))?;
            dropout.push(DropoutSpec {
                conv: num("dropout", &c)?,
                fc: num("dropout", &f)?,
            });
        }
        let fusion = match kind {
            ModelKind::Fusion(scheme) => {
                let weights = if fields.contains_key("fusion.beta") {
                    Weights::Beta {
                        init: floats("fusion.beta")?,
                        learn: num("fusion.learn_beta", get("fusion.learn_beta")?)?,
                    }
                } else {
                    Weights::Alpha(floats("fusion.alpha")?)
                };
                Some(FusionConfig {
                    scheme,
                    temperatures: floats("fusion.temperatures")?,
                    weights,
                    eps: num("fusion.eps", get("fusion.eps")?)?,
                })
            }
            _ => None,
        };
        let spec = Self {
            kind,
            classes: num("classes", get("classes")?)?,
            sources,
            width: Width {
                kernels: num("width", &wk)?,
                features: num("width", &wf)?,
            },
            scale: num("scale", get("scale")?)?,
            variant: match get("variant")? {
                "full" => Variant::Full,
                "cls-only" => Variant::ClsOnly,
                v => return Err(Error::format(format!("unknown variant `{v}`"))),
            },
            temperature: num("temperature", get("temperature")?)?,
            dropout,
            fusion,
            pairwise: num("pairwise", get("pairwise")?)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// First 64 bits of SHA-256 over the spec text and any extra context.
    pub fn hash_with(&self, extra: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.to_text());
        h.update(extra);
        let d = h.finalize();
        u64::from_be_bytes(d[..8].try_into().unwrap())
    }
}

/// Graph handles of one network forward pass.
#[derive(Clone, Debug)]
pub struct ModelVars {
    /// [B, C]; softmax gives the predicted distribution, cross-entropy
    /// against these is the training loss.
    pub scores: Var,
    pub branches: Vec<AttentionVars>,
}

/// Independently trained two-source models combined by fixed weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Pairwise {
    pub parts: Vec<FusionModel>,
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Network {
    Baseline(ReferenceCnn),
    Attention(AttentionHead),
    Fusion(FusionModel),
    Pairwise(Pairwise),
}

/// Parameter-name prefixes used by [`Network::build`].
pub mod prefix {
    pub const BASELINE: &str = "base.";
    pub const ATTENTION: &str = "att.";
    pub const REFERENCE: &str = "ref.";

    pub fn branch(source: &str) -> String {
        format!("src.{source}.")
    }

    pub fn pair(i: usize) -> String {
        format!("pair{i}.")
    }
}

impl Network {
    /// Registers all parameters of `spec` in `store`.
    pub fn build(spec: &ModelSpec, store: &mut ParamStore<f32>, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        match spec.kind {
            ModelKind::Baseline => Ok(Network::Baseline(ReferenceCnn::new(
                store,
                prefix::BASELINE,
                spec.baseline_config(0)?,
                rng,
            )?)),
            ModelKind::Attention => Ok(Network::Attention(AttentionHead::new(
                store,
                prefix::ATTENTION,
                spec.attention_config(0)?,
                rng,
            )?)),
            ModelKind::Fusion(_) if spec.pairwise => {
                let parts = (1..spec.sources.len())
                    .map(|i| build_fusion(&spec.pair(i)?, store, &prefix::pair(i - 1), rng))
                    .collect::<Result<Vec<_>>>()?;
                let alpha = spec.fusion.as_ref().expect("validated").alphas();
                Ok(Network::Pairwise(Pairwise { parts, alpha }))
            }
            ModelKind::Fusion(_) => Ok(Network::Fusion(build_fusion(spec, store, "", rng)?)),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Network::Baseline(m) => m.config.classes,
            Network::Attention(m) => m.config.classes,
            Network::Fusion(m) => m.classes(),
            Network::Pairwise(p) => p.parts[0].classes(),
        }
    }

    /// `inputs` follow the spec's source order, each [B, Ch, N, N].
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, inputs: &[Var]) -> Result<ModelVars> {
        let need = match self {
            Network::Baseline(_) | Network::Attention(_) => 1,
            Network::Fusion(m) => m.branches.len() + 1,
            Network::Pairwise(p) => p.parts.len() + 1,
        };
        if inputs.len() != need {
            return Err(Error::Config(format!("model takes {need} inputs, got {}", inputs.len())));
        }
        match self {
            Network::Baseline(m) => Ok(ModelVars {
                scores: m.forward_logits(g, inputs[0])?,
                branches: vec![],
            }),
            Network::Attention(m) => {
                let v = m.forward(g, inputs[0])?;
                Ok(ModelVars {
                    scores: m.tempered(g, v.logits),
                    branches: vec![v],
                })
            }
            Network::Fusion(m) => {
                let v = m.forward(g, inputs[0], &inputs[1..])?;
                Ok(ModelVars {
                    scores: v.scores,
                    branches: v.branches,
                })
            }
            Network::Pairwise(p) => {
                let mut scores: Option<Var> = None;
                let mut branches = vec![];
                for (i, (part, &a)) in p.parts.iter().zip(&p.alpha).enumerate() {
                    let v = part.forward(g, inputs[0], &[inputs[i + 1]])?;
                    let s = g.scale(v.scores, T::from_f64_lossy(a));
                    scores = Some(match scores {
                        Some(acc) => g.add(acc, s)?,
                        None => s,
                    });
                    branches.extend(v.branches);
                }
                Ok(ModelVars {
                    scores: scores.expect("at least one part"),
                    branches,
                })
            }
        }
    }

    /// Attention heads in branch output order.
    pub fn heads(&self) -> Vec<&AttentionHead> {
        match self {
            Network::Baseline(_) => vec![],
            Network::Attention(m) => vec![m],
            Network::Fusion(m) => m.branches.iter().collect(),
            Network::Pairwise(p) => p.parts.iter().flat_map(|m| m.branches.iter()).collect(),
        }
    }

    /// Class distributions [S, C] for whole-split inputs, in batches.
    pub fn predict_probs(&self, store: &ParamStore<f32>, inputs: &[Tensor<f32>], batch: usize) -> Result<Tensor<f32>> {
        let n = inputs.first().map_or(0, |t| t.shape()[0]);
        let c = self.classes();
        let mut out = Vec::with_capacity(n * c);
        let mut start = 0;
        while start < n {
            let len = batch.max(1).min(n - start);
            let mut g = Graph::new(store).no_grad();
            let vars = inputs
                .iter()
                .map(|t| Ok(g.input(slice_first(t, start, len)?)))
                .collect::<Result<Vec<_>>>()?;
            let v = self.forward(&mut g, &vars)?;
            let p = g.softmax(v.scores, 1)?;
            out.extend_from_slice(g.value(p));
            start += len;
        }
        Tensor::new(vec![n, c], out)
    }

    /// Distributions for every sample of `data`, reading `sources`.
    pub fn predict_dataset(&self, store: &ParamStore<f32>, data: &Dataset, sources: &[usize]) -> Result<Tensor<f32>> {
        let inputs: Vec<Tensor<f32>> = sources.iter().map(|&s| data.images[s].clone()).collect();
        self.predict_probs(store, &inputs, 100)
    }

    /// Full diagnostics for one sample (`inputs[m]` is [Ch, N, N]).
    pub fn diagnose(&self, store: &ParamStore<f32>, inputs: &[Tensor<f32>]) -> Result<FusionOutput> {
        let mut g = Graph::new(store).no_grad();
        let vars = inputs
            .iter()
            .map(|t| {
                let mut s = vec![1];
                s.extend_from_slice(t.shape());
                Ok(g.input(t.clone().reshape(s)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let v = self.forward(&mut g, &vars)?;
        let scores = g.value(v.scores).to_vec();
        let probs = softmax64(&scores.iter().map(|&x| x as f64).collect::<Vec<_>>())
            .into_iter()
            .map(|x| x as f32)
            .collect();
        let branches = self
            .heads()
            .into_iter()
            .zip(&v.branches)
            .map(|(h, bv)| AttentionOutput::from_graph(&g, bv, store.get(h.heads.bias), h.config.temperature, 0))
            .collect::<Result<Vec<_>>>()?;
        Ok(FusionOutput { scores, probs, branches })
    }
}

fn build_fusion(spec: &ModelSpec, store: &mut ParamStore<f32>, p: &str, rng: &mut impl Rng) -> Result<FusionModel> {
    let reference = ReferenceCnn::new(store, &format!("{p}{}", prefix::REFERENCE), spec.baseline_config(0)?, rng)?;
    let branches = (1..spec.sources.len())
        .map(|i| {
            Ok((
                format!("src.{}", spec.sources[i].name),
                spec.attention_config(i)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    FusionModel::new(
        store,
        p,
        spec.fusion.clone().expect("validated"),
        reference,
        branches,
        rng,
    )
}

/// Rows `[start, start+len)` of a tensor's leading axis.
pub(crate) fn slice_first(t: &Tensor<f32>, start: usize, len: usize) -> Result<Tensor<f32>> {
    let inner: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = len;
    Tensor::new(shape, t.data()[start * inner..(start + len) * inner].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const W: Width = Width { kernels: 2, features: 4 };

    fn spec(kind: &str, names: &[&str]) -> ModelSpec {
        let all = SourceSpec::defaults();
        let sources = names
            .iter()
            .map(|n| all.iter().find(|s| s.name == *n).unwrap().clone())
            .collect();
        ModelSpec::new(ModelKind::parse(kind).unwrap(), 4, sources, W, 1).unwrap()
    }

    fn count(spec: &ModelSpec) -> usize {
        let mut store = ParamStore::new();
        Network::build(spec, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        store.param_count()
    }

    #[test]
    fn spec_text_round_trip() {
        for (k, s) in [
            ("baseline", vec!["a"]),
            ("attention", vec!["b"]),
            ("ext1", vec!["ref", "a", "b"]),
            ("ext2", vec!["ref", "a", "b"]),
            ("ext3", vec!["ref", "a", "b"]),
            ("ext4", vec!["ref", "a"]),
        ] {
            let sp = spec(k, &s);
            let back = ModelSpec::parse(&sp.to_text()).unwrap();
            assert_eq!(back, sp);
            assert_eq!(back.hash_with(""), sp.hash_with(""));
        }
        let a = spec("ext3", &["ref", "a", "b"]);
        assert!(a.pairwise);
        assert_ne!(a.hash_with(""), spec("ext3", &["ref", "a"]).hash_with(""));
    }

    #[test]
    fn invalid_combinations() {
        let all = SourceSpec::defaults();
        let k = ModelKind::Fusion(Scheme::FeatureLevel);
        assert!(ModelSpec::new(k, 4, vec![all[1].clone(), all[2].clone()], W, 1).is_err());
        assert!(ModelSpec::new(k, 4, vec![all[0].clone()], W, 1).is_err());
        assert!(ModelSpec::new(ModelKind::Attention, 4, all.clone(), W, 1).is_err());
    }

    #[test]
    fn prob_fusion_counts_are_branch_sums() {
        let fused = count(&spec("ext1", &["ref", "a", "b"]));
        let parts = count(&spec("baseline", &["ref"])) + count(&spec("attention", &["a"])) + count(&spec("attention", &["b"]));
        assert_eq!(fused, parts);
    }

    #[test]
    fn counts_grow_with_scale() {
        let mut prev = 0;
        for s in 1..=3 {
            let mut sp = spec("ext3", &["ref", "a", "b"]);
            sp.scale = s;
            let n = count(&sp);
            assert!(n > prev);
            prev = n;
        }
    }

    #[test]
    fn pairwise_unit_weight_is_first_pair() {
        let sp = spec("ext3", &["ref", "a", "b"]);
        let mut store = ParamStore::new();
        let net = Network::build(&sp, &mut store, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let Network::Pairwise(mut p) = net else { panic!("expected pairwise") };
        p.alpha = vec![1.0, 0.0];
        let combined = Network::Pairwise(p.clone());
        let first = Network::Fusion(p.parts[0].clone());
        let x = |shape: Vec<usize>| Tensor::from_fn(shape, |i| ((i % 13) as f32 - 6.0) / 6.0);
        let inputs = vec![x(vec![2, 3, 25, 25]), x(vec![2, 8, 12, 12]), x(vec![2, 1, 24, 24])];
        let a = combined.predict_probs(&store, &inputs, 10).unwrap();
        let b = first.predict_probs(&store, &inputs[..2], 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn diagnose_reports_every_branch() {
        let sp = spec("ext2", &["ref", "a", "b"]);
        let mut store = ParamStore::new();
        let net = Network::build(&sp, &mut store, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let inputs = vec![
            Tensor::full(vec![3, 25, 25], 0.1),
            Tensor::full(vec![8, 12, 12], 0.2),
            Tensor::full(vec![1, 24, 24], 0.3),
        ];
        let out = net.diagnose(&store, &inputs).unwrap();
        assert_eq!(out.branches.len(), 2);
        assert_eq!(out.branches[0].loc_scores.shape(), &[4, 64]);
        assert_eq!(out.branches[1].loc_scores.shape(), &[4, 289]);
        assert!((out.probs.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
