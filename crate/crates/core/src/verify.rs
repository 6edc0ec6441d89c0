//! Finite-difference verification of every differentiable op and of small
//! end-to-end models.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Role, SourceSpec};
use crate::encoder::{EncoderStyle, Width};
use crate::error::Result;
use crate::fusion::Scheme;
use crate::model::{ModelKind, ModelSpec, Network};
use crate::tensor::gradcheck::{check_inputs, check_params, GradCheck, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Step for whole-model checks, small enough that ReLU and max-pool kinks
/// are almost never straddled.
pub const MODEL_STEP: f64 = 1e-6;

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Distinct values at least 0.01 apart, away from zero, in random order,
/// so max-pool and ReLU stay differentiable under a ±h nudge.
fn spaced(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - (n / 2) as f64) * 0.01 + 0.0037).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("spaced shape")
}

/// Contracts an op output with fixed random weights so every output entry
/// gets a distinct upstream gradient.
fn project(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.input(uniform(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(out, w)?;
    g.sum_all(p)
}

type OpCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>);

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let labels = [2usize, 0, 1];
    vec![
        (
            "conv2d_valid",
            vec![uniform(rng, &[2, 2, 5, 5], -1.0, 1.0), uniform(rng, &[3, 2, 3, 3], -0.5, 0.5), uniform(rng, &[3], -0.5, 0.5)],
            Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 0)),
        ),
        (
            "conv2d_same",
            vec![uniform(rng, &[2, 2, 4, 4], -1.0, 1.0), uniform(rng, &[2, 2, 3, 3], -0.5, 0.5), uniform(rng, &[2], -0.5, 0.5)],
            Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1)),
        ),
        ("maxpool2d", vec![spaced(rng, &[2, 2, 5, 5])], Box::new(|g, v| g.maxpool2d(v[0], 2, 2))),
        (
            "linear",
            vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[5, 4], -0.5, 0.5), uniform(rng, &[5], -0.5, 0.5)],
            Box::new(|g, v| g.linear(v[0], v[1], v[2])),
        ),
        ("relu", vec![spaced(rng, &[3, 7])], Box::new(|g, v| Ok(g.relu(v[0])))),
        ("ln", vec![uniform(rng, &[3, 4], 0.2, 2.0)], Box::new(|g, v| Ok(g.ln(v[0])))),
        (
            "add",
            vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)],
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        (
            "sub",
            vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)],
            Box::new(|g, v| g.sub(v[0], v[1])),
        ),
        (
            "mul",
            vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)],
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        ("scale", vec![uniform(rng, &[4, 3], -1.0, 1.0)], Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        ("add_scalar", vec![uniform(rng, &[4, 3], -1.0, 1.0)], Box::new(|g, v| Ok(g.add_scalar(v[0], 0.3)))),
        ("sum_axis", vec![uniform(rng, &[2, 3, 4], -1.0, 1.0)], Box::new(|g, v| g.sum_axis(v[0], 1))),
        ("mean_all", vec![uniform(rng, &[2, 3, 4], -1.0, 1.0)], Box::new(|g, v| g.mean_all(v[0]))),
        ("softmax_last", vec![uniform(rng, &[3, 5], -2.0, 2.0)], Box::new(|g, v| g.softmax(v[0], 1))),
        ("softmax_first", vec![uniform(rng, &[4, 3], -2.0, 2.0)], Box::new(|g, v| g.softmax(v[0], 0))),
        ("log_softmax", vec![uniform(rng, &[3, 5], -2.0, 2.0)], Box::new(|g, v| g.log_softmax(v[0], 1))),
        ("reshape", vec![uniform(rng, &[2, 6], -1.0, 1.0)], Box::new(|g, v| g.reshape(v[0], vec![3, 4]))),
        ("permute", vec![uniform(rng, &[2, 3, 4], -1.0, 1.0)], Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        ("broadcast", vec![uniform(rng, &[3, 1], -1.0, 1.0)], Box::new(|g, v| g.broadcast(v[0], vec![2, 3, 4]))),
        (
            "concat",
            vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 2], -1.0, 1.0)],
            Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
        ),
        ("narrow", vec![uniform(rng, &[3, 6], -1.0, 1.0)], Box::new(|g, v| g.narrow(v[0], 1, 2, 3))),
        ("windows", vec![uniform(rng, &[2, 2, 5, 5], -1.0, 1.0)], Box::new(|g, v| g.windows(v[0], 3))),
        ("inv_sigmoid", vec![uniform(rng, &[3, 4], 0.05, 0.95)], Box::new(|g, v| g.inv_sigmoid(v[0], 1e-6))),
        (
            "nll",
            vec![uniform(rng, &[3, 4], -3.0, -0.1)],
            Box::new(move |g, v| g.nll(v[0], &labels)),
        ),
        (
            "cross_entropy",
            vec![uniform(rng, &[3, 4], -2.0, 2.0)],
            Box::new(move |g, v| g.cross_entropy(v[0], &labels)),
        ),
    ]
}

/// One check per differentiable op.
pub fn op_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_cases(&mut rng)
        .into_iter()
        .enumerate()
        .map(|(i, (name, inputs, op))| {
            let proj = seed.wrapping_add(i as u64);
            check_inputs(name, seed, &inputs, DEFAULT_STEP, DEFAULT_TOLERANCE, |g, v| {
                let out = op(g, v)?;
                if g.shape(out) == [1] {
                    Ok(out)
                } else {
                    project(g, out, proj)
                }
            })
        })
        .collect()
}

/// Source for the toy attention model: 6×6 neighborhood, 4×4 windows,
/// hence R = 9 regions.
pub fn toy_source() -> SourceSpec {
    SourceSpec {
        name: "toy".into(),
        channels: 2,
        neighborhood: 6,
        object_size: 2,
        window: 4,
        role: Role::Additional,
        offset_jitter: 2,
        encoder: EncoderStyle::Flat,
    }
}

fn toy_reference() -> SourceSpec {
    SourceSpec {
        name: "tref".into(),
        channels: 2,
        neighborhood: 8,
        object_size: 8,
        window: 8,
        role: Role::Reference,
        offset_jitter: 0,
        encoder: EncoderStyle::Reference,
    }
}

pub const TOY_WIDTH: Width = Width { kernels: 3, features: 4 };

/// Checks the cross-entropy gradient of a whole network with respect to
/// every trainable parameter, on a fixed batch of two samples.
pub fn model_check(name: &str, spec: &ModelSpec, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store32 = ParamStore::<f32>::new();
    let net = Network::build(spec, &mut store32, &mut rng)?;
    let mut store: ParamStore<f64> = store32.cast();
    // zero-initialized biases put ReLU inputs exactly on the kink wherever
    // a patch is all zeros; check at a generic point instead
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
    let batch = 2;
    let inputs: Vec<Tensor<f64>> = spec
        .sources
        .iter()
        .map(|s| uniform(&mut rng, &[batch, s.channels, s.neighborhood, s.neighborhood], -1.0, 1.0))
        .collect();
    let labels: Vec<usize> = (0..batch).map(|i| i % spec.classes).collect();
    check_params(name, seed, &store, MODEL_STEP, DEFAULT_TOLERANCE, |g| {
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = net.forward(g, &vars)?;
        g.cross_entropy(out.scores, &labels)
    })
}

/// Toy single-source attention model, C = 3, R = 9.
pub fn toy_attention_spec() -> Result<ModelSpec> {
    ModelSpec::new(ModelKind::Attention, 3, vec![toy_source()], TOY_WIDTH, 1)
}

/// Toy two-source fusion model for `scheme`.
pub fn toy_fusion_spec(scheme: Scheme) -> Result<ModelSpec> {
    ModelSpec::new(ModelKind::Fusion(scheme), 3, vec![toy_reference(), toy_source()], TOY_WIDTH, 1)
}

/// The full suite: all ops, the toy attention model, its cls-only ablation
/// and one toy model per fusion scheme.
pub fn full_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = op_checks(seed)?;
    out.push(model_check("toy_attention", &toy_attention_spec()?, seed)?);
    let mut ablation = toy_attention_spec()?;
    ablation.variant = crate::attention::Variant::ClsOnly;
    out.push(model_check("toy_attention_cls_only", &ablation, seed)?);
    let mut baseline = ModelSpec::new(ModelKind::Baseline, 3, vec![toy_reference()], TOY_WIDTH, 1)?;
    baseline.scale = 1;
    out.push(model_check("toy_baseline", &baseline, seed)?);
    for scheme in Scheme::ALL {
        out.push(model_check(&format!("toy_{}", scheme.as_str()), &toy_fusion_spec(scheme)?, seed)?);
    }
    Ok(out)
}

/// A deliberately wrong backward rule (d/dx x² taken as x); the oracle must
/// reject it.
pub fn negative_control(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[4], 0.5, 2.0);
    check_inputs("negative_control", seed, &[x], DEFAULT_STEP, DEFAULT_TOLERANCE, |g, v| {
        let xs = g.value(v[0]).to_vec();
        let out = Tensor::new(vec![xs.len()], xs.iter().map(|a| a * a).collect())?;
        let sq = g.custom(
            &[v[0]],
            out,
            Box::new(|p, _, d| vec![p[0].iter().zip(d).map(|(a, g)| a * g).collect()]),
        );
        g.sum_all(sq)
    })
}
