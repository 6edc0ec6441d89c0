//! Holistic baseline versus instance attention on a jittered source.
//!
//! Small widths and a short schedule keep this to about a minute.

use msattn::attention::Variant;
use msattn::data::{gen_dataset, GeneratorConfig, SourceSpec, Split};
use msattn::encoder::Width;
use msattn::model::ModelKind;
use msattn::train::{Pipeline, TrainConfig};

fn main() -> msattn::Result<()> {
    let mut gen = GeneratorConfig::new(SourceSpec::defaults(), 5, 0);
    gen.base_count = 120;
    gen.difficulty = 0.3;
    let data = gen_dataset(&gen)?;
    let config = TrainConfig {
        lr: 3e-3,
        batch: 25,
        patience: 5,
        max_epochs: 30,
        ..TrainConfig::default()
    };
    let mut pipeline = Pipeline::new(&data, config)
        .with_width(Width { kernels: 8, features: 16 })
        .with_dropout_scale(0.3);

    for (kind, variant) in [
        (ModelKind::Baseline, Variant::Full),
        (ModelKind::Attention, Variant::Full),
        (ModelKind::Attention, Variant::ClsOnly),
    ] {
        let mut spec = pipeline.spec(kind, &["a"], 1)?;
        spec.variant = variant;
        let m = pipeline.run(&spec)?;
        let test = m.evaluate(&data, Split::Test)?;
        println!(
            "{:<14} {:?}: {} epochs, test normalized accuracy {:.3}",
            m.label(),
            variant,
            m.history.epochs(),
            test.normalized_accuracy
        );
    }
    Ok(())
}
