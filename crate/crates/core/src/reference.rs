//! Holistic single-source classification CNN.
//!
//! Serves as the reference-source branch of every fusion model (its
//! penultimate features feed feature- and pixel-level fusion) and as the
//! single-source baseline for the uncertain sources.

use rand::Rng;

use crate::encoder::{DropoutSpec, Init, Linear, RegionEncoder, RegionEncoderSpec};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Scalar, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub classes: usize,
    pub channels: usize,
    pub neighborhood: usize,
    pub encoder: RegionEncoderSpec,
    pub dropout: DropoutSpec,
}

/// Encoder stack over the whole neighborhood, FC(F_ref) + ReLU + dropout,
/// then FC(C).
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceCnn {
    pub config: BaselineConfig,
    pub encoder: RegionEncoder,
    pub out: Linear,
}

impl ReferenceCnn {
    pub fn new(store: &mut ParamStore<f32>, prefix: &str, config: BaselineConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.classes == 0 {
            return Err(Error::invalid("class count must be positive"));
        }
        let encoder = RegionEncoder::new(
            store,
            &format!("{prefix}enc."),
            &config.encoder,
            config.channels,
            config.neighborhood,
            config.dropout,
            rng,
        )?;
        let out = Linear::new(
            store,
            &format!("{prefix}out"),
            encoder.features(),
            config.classes,
            Init::XavierUniform,
            rng,
        )?;
        Ok(Self { config, encoder, out })
    }

    /// F_ref, the penultimate feature size.
    pub fn features(&self) -> usize {
        self.encoder.features()
    }

    /// φ^enc_ref: [B, Ch, N, N] → [B, F_ref].
    pub fn penultimate_features<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.encoder.forward(g, x)
    }

    /// Final classification layer applied to penultimate features.
    pub fn classify<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        self.out.forward(g, features)
    }

    /// φ^CNN_ref: unbounded class logits [B, C].
    pub fn forward_logits<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let f = self.penultimate_features(g, x)?;
        self.classify(g, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderStyle, Width};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(scale: usize) -> (ParamStore<f32>, ReferenceCnn) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = BaselineConfig {
            classes: 4,
            channels: 3,
            neighborhood: 25,
            encoder: RegionEncoderSpec::new(EncoderStyle::Reference, Width::default(), scale).unwrap(),
            dropout: DropoutSpec::default(),
        };
        let cnn = ReferenceCnn::new(&mut store, "ref.", cfg, &mut rng).unwrap();
        (store, cnn)
    }

    fn input() -> Tensor<f32> {
        Tensor::from_fn(vec![2, 3, 25, 25], |i| ((i % 17) as f32 - 8.0) / 8.0)
    }

    #[test]
    fn feature_sizes_follow_scale() {
        assert_eq!(net(1).1.features(), 128);
        assert_eq!(net(2).1.features(), 256);
    }

    #[test]
    fn logits_compose_from_features() {
        let (store, cnn) = net(1);
        let mut g = Graph::new(&store).no_grad();
        let x = g.input(input());
        let logits = cnn.forward_logits(&mut g, x).unwrap();
        let f = cnn.penultimate_features(&mut g, x).unwrap();
        let again = cnn.classify(&mut g, f).unwrap();
        assert_eq!(g.value(logits), g.value(again));
        assert_eq!(g.shape(logits), &[2, 4]);
    }

    #[test]
    fn zero_output_layer_is_uniform() {
        let (mut store, cnn) = net(1);
        store.get_mut(cnn.out.w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new(&store).no_grad();
        let x = g.input(input());
        let logits = cnn.forward_logits(&mut g, x).unwrap();
        let p = g.softmax(logits, 1).unwrap();
        assert!(g.value(p).iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn geometry_checked() {
        let (store, cnn) = net(1);
        let mut g = Graph::new(&store).no_grad();
        let x = g.input(Tensor::zeros(vec![1, 3, 24, 24]));
        assert!(matches!(cnn.forward_logits(&mut g, x), Err(Error::Geometry(_))));
    }
}
