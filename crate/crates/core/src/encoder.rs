//! Convolutional region encoder shared by the attention heads and the
//! holistic reference network.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Convolution stack layout families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderStyle {
    /// Three 3×3 convolutions, no pooling (multispectral-like sources).
    Flat,
    /// 5×5, 5×5, 3×3 convolutions, each followed by 2×2/2 max pooling
    /// (elevation-like sources).
    Pooled,
    /// Three 3×3 convolutions, each followed by 2×2/2 max pooling
    /// (the centered reference source).
    Reference,
}

impl EncoderStyle {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderStyle::Flat => "flat",
            EncoderStyle::Pooled => "pooled",
            EncoderStyle::Reference => "reference",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(EncoderStyle::Flat),
            "pooled" => Ok(EncoderStyle::Pooled),
            "reference" => Ok(EncoderStyle::Reference),
            other => Err(Error::Config(format!("unknown encoder style `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvLayerSpec {
    pub kernels: usize,
    pub size: usize,
    pub pool: bool,
}

/// Layer layout of a region encoder: convolutions (zero "same" padding,
/// stride 1, ReLU) followed by one fully connected layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RegionEncoderSpec {
    pub layers: Vec<ConvLayerSpec>,
    pub features: usize,
}

/// Base channel/feature widths before width scaling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Width {
    pub kernels: usize,
    pub features: usize,
}

impl Default for Width {
    fn default() -> Self {
        Self {
            kernels: 64,
            features: 128,
        }
    }
}

impl RegionEncoderSpec {
    /// Default layout for `style` at the given base width and scale `s`:
    /// every kernel and feature count is multiplied by `s`.
    pub fn new(style: EncoderStyle, width: Width, scale: usize) -> Result<Self> {
        if scale == 0 {
            return Err(Error::invalid("width scale must be at least 1"));
        }
        let k = width.kernels * scale;
        let sizes: [(usize, bool); 3] = match style {
            EncoderStyle::Flat => [(3, false), (3, false), (3, false)],
            EncoderStyle::Pooled => [(5, true), (5, true), (3, true)],
            EncoderStyle::Reference => [(3, true), (3, true), (3, true)],
        };
        Ok(Self {
            layers: sizes
                .iter()
                .map(|&(size, pool)| ConvLayerSpec {
                    kernels: k,
                    size,
                    pool,
                })
                .collect(),
            features: width.features * scale,
        })
    }

    pub fn ms(scale: usize) -> Result<Self> {
        Self::new(EncoderStyle::Flat, Width::default(), scale)
    }

    pub fn lidar(scale: usize) -> Result<Self> {
        Self::new(EncoderStyle::Pooled, Width::default(), scale)
    }

    /// Spatial side after the convolution stack for a `side`×`side` input.
    pub fn output_side(&self, side: usize) -> Result<usize> {
        let mut s = side;
        for (i, l) in self.layers.iter().enumerate() {
            if l.pool {
                if s < 2 {
                    return Err(Error::Architecture(format!(
                        "input {side}x{side} collapses below 1x1 before pooling layer {i}"
                    )));
                }
                s /= 2;
            }
        }
        if s == 0 {
            return Err(Error::Architecture(format!("input {side}x{side} collapses to 0x0")));
        }
        Ok(s)
    }
}

/// Dropout probabilities after each convolution and after the encoder FC.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutSpec {
    pub conv: f64,
    pub fc: f64,
}

impl Default for DropoutSpec {
    fn default() -> Self {
        Self { conv: 0.25, fc: 0.5 }
    }
}

impl DropoutSpec {
    pub const NONE: DropoutSpec = DropoutSpec { conv: 0.0, fc: 0.0 };

    pub fn validate(&self) -> Result<()> {
        for p in [self.conv, self.fc] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// U(±√(6/fan_in)), for layers feeding a ReLU.
    HeUniform,
    /// U(±√(6/(fan_in+fan_out))).
    XavierUniform,
    Zeros,
}

pub(crate) fn init_tensor(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    init: Init,
    rng: &mut impl Rng,
) -> Tensor<f32> {
    let bound = match init {
        Init::HeUniform => (6.0 / fan_in as f64).sqrt(),
        Init::XavierUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        Init::Zeros => return Tensor::zeros(shape),
    };
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound) as f32)
}

/// Fully connected layer `y = x·wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore<f32>,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.w"),
            init_tensor(vec![outputs, inputs], inputs, outputs, init, rng),
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![outputs]))?;
        Ok(Self {
            w,
            b,
            inputs,
            outputs,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    spec: ConvLayerSpec,
}

/// φ^region: convolution stack plus one FC layer, applied to a batch of
/// equally sized crops.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionEncoder {
    pub spec: RegionEncoderSpec,
    pub in_channels: usize,
    pub input_side: usize,
    pub dropout: DropoutSpec,
    convs: Vec<ConvLayer>,
    fc: Linear,
}

impl RegionEncoder {
    pub fn new(
        store: &mut ParamStore<f32>,
        prefix: &str,
        spec: &RegionEncoderSpec,
        in_channels: usize,
        input_side: usize,
        dropout: DropoutSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        dropout.validate()?;
        let out_side = spec.output_side(input_side)?;
        let mut convs = Vec::with_capacity(spec.layers.len());
        let mut ch = in_channels;
        for (i, l) in spec.layers.iter().enumerate() {
            if l.size % 2 == 0 {
                return Err(Error::Architecture(format!(
                    "conv layer {i}: even kernel size {} has no centered padding",
                    l.size
                )));
            }
            let fan_in = ch * l.size * l.size;
            let w = store.add(
                format!("{prefix}conv{i}.w"),
                init_tensor(
                    vec![l.kernels, ch, l.size, l.size],
                    fan_in,
                    l.kernels * l.size * l.size,
                    Init::HeUniform,
                    rng,
                ),
            )?;
            let b = store.add(format!("{prefix}conv{i}.b"), Tensor::zeros(vec![l.kernels]))?;
            convs.push(ConvLayer { w, b, spec: *l });
            ch = l.kernels;
        }
        let flat = ch * out_side * out_side;
        let fc = Linear::new(store, &format!("{prefix}fc"), flat, spec.features, Init::HeUniform, rng)?;
        Ok(Self {
            spec: spec.clone(),
            in_channels,
            input_side,
            dropout,
            convs,
            fc,
        })
    }

    pub fn features(&self) -> usize {
        self.spec.features
    }

    /// First convolution's weight (re-initialized when its input widens).
    pub fn first_conv(&self) -> ParamId {
        self.convs[0].w
    }

    /// [n, C, S, S] → [n, F]
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.forward_inner(g, x, None)
    }

    /// Same as [`forward`](Self::forward) on `x` widened by spatially
    /// constant channels: crop `i` gets the values `constant[i / per]`
    /// ([B, K]) as its last K input channels. The constant channels are
    /// never materialized; their first-layer response is the per-channel
    /// sum of in-bounds kernel taps, computed once per batch.
    pub fn forward_constant<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, constant: Var, per: usize) -> Result<Var> {
        self.forward_inner(g, x, Some((constant, per)))
    }

    fn forward_inner<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, constant: Option<(Var, usize)>) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let extra = match constant {
            Some((c, per)) => {
                let cs = g.shape(c).to_vec();
                if cs.len() != 2 || s.is_empty() || cs[0] * per != s[0] {
                    return Err(Error::Geometry(format!(
                        "constant channels {cs:?} do not cover {per} crops each of {s:?}"
                    )));
                }
                cs[1]
            }
            None => 0,
        };
        if s.len() != 4 || s[1] + extra != self.in_channels || s[2] != self.input_side || s[3] != self.input_side {
            return Err(Error::Geometry(format!(
                "encoder expects [n, {}, {side}, {side}], got {s:?}",
                self.in_channels - extra,
                side = self.input_side
            )));
        }
        let mut h = x;
        for (i, layer) in self.convs.iter().enumerate() {
            let (w, b) = (g.param(layer.w), g.param(layer.b));
            let pad = layer.spec.size / 2;
            h = match constant {
                Some((c, per)) if i == 0 => {
                    let w_img = g.narrow(w, 1, 0, s[1])?;
                    let w_const = g.narrow(w, 1, s[1], extra)?;
                    let conv = g.conv2d(h, w_img, b, pad)?;
                    let resp = constant_response(g, w_const, self.input_side, pad)?;
                    let os = g.shape(conv).to_vec();
                    let flat = os[1] * os[2] * os[3];
                    // [B, K] · [K, k·pos] via linear with a zero bias
                    let rt = g.permute(resp, &[1, 0])?;
                    let zero = g.input(Tensor::zeros(vec![flat]));
                    let add = g.linear(c, rt, zero)?;
                    let b_n = g.shape(c)[0];
                    let add = g.reshape(add, vec![b_n, 1, flat])?;
                    let add = g.broadcast(add, vec![b_n, per, flat])?;
                    let add = g.reshape(add, os)?;
                    g.add(conv, add)?
                }
                _ => g.conv2d(h, w, b, pad)?,
            };
            h = g.relu(h);
            if layer.spec.pool {
                h = g.maxpool2d(h, 2, 2)?;
            }
            h = g.dropout(h, self.dropout.conv)?;
        }
        let n = s[0];
        let flat = g.shape(h)[1..].iter().product();
        let h = g.reshape(h, vec![n, flat])?;
        let h = self.fc.forward(g, h)?;
        let h = g.relu(h);
        g.dropout(h, self.dropout.fc)
    }
}

/// Response of a zero-padded convolution to one all-ones channel at a
/// time: [K, k·oh·ow] for weights [k, K, kh, kw] on a `side`² input.
fn constant_response<T: Scalar>(g: &mut Graph<'_, T>, w: Var, side: usize, pad: usize) -> Result<Var> {
    let ws = g.shape(w).to_vec();
    let (k, kc) = (ws[0], ws[1]);
    let plane = side * side;
    let ones = Tensor::from_fn(vec![kc, kc, side, side], |i| {
        if (i / plane) % kc == i / (kc * plane) {
            T::one()
        } else {
            T::zero()
        }
    });
    let ones = g.input(ones);
    let zero = g.input(Tensor::zeros(vec![k]));
    let r = g.conv2d(ones, w, zero, pad)?;
    let rs = g.shape(r).to_vec();
    g.reshape(r, vec![kc, rs[1] * rs[2] * rs[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_layouts() {
        let ms = RegionEncoderSpec::ms(1).unwrap();
        assert_eq!(ms.features, 128);
        assert!(ms.layers.iter().all(|l| l.kernels == 64 && l.size == 3 && !l.pool));
        let lidar = RegionEncoderSpec::lidar(2).unwrap();
        assert_eq!(lidar.features, 256);
        assert_eq!(
            lidar.layers.iter().map(|l| l.size).collect::<Vec<_>>(),
            vec![5, 5, 3]
        );
        assert!(lidar.layers.iter().all(|l| l.pool && l.kernels == 128));
    }

    #[test]
    fn pooled_needs_eight_pixels() {
        let lidar = RegionEncoderSpec::lidar(1).unwrap();
        assert_eq!(lidar.output_side(8).unwrap(), 1);
        assert_eq!(lidar.output_side(16).unwrap(), 2);
        assert!(matches!(lidar.output_side(7), Err(Error::Architecture(_))));
        assert_eq!(RegionEncoderSpec::ms(1).unwrap().output_side(2).unwrap(), 2);
    }

    #[test]
    fn encoder_output_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = RegionEncoderSpec::new(
            EncoderStyle::Pooled,
            Width {
                kernels: 4,
                features: 6,
            },
            1,
        )
        .unwrap();
        let enc = RegionEncoder::new(&mut store, "e.", &spec, 1, 8, DropoutSpec::NONE, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::full(vec![3, 1, 8, 8], 0.5));
        let y = enc.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[3, 6]);
        let bad = g.input(Tensor::full(vec![3, 2, 8, 8], 0.5));
        assert!(matches!(enc.forward(&mut g, bad), Err(Error::Geometry(_))));
    }
}
