//! Every fusion scheme on three sources. Each scheme starts from the
//! separately trained reference and attention models, which the pipeline
//! trains once and reuses.

use msattn::data::{gen_dataset, GeneratorConfig, SourceSpec, Split};
use msattn::encoder::Width;
use msattn::fusion::Scheme;
use msattn::model::ModelKind;
use msattn::train::{Pipeline, TrainConfig};

fn main() -> msattn::Result<()> {
    let mut gen = GeneratorConfig::new(SourceSpec::defaults(), 4, 5);
    gen.base_count = 60;
    let data = gen_dataset(&gen)?;
    let config = TrainConfig {
        lr: 3e-3,
        batch: 25,
        patience: 3,
        max_epochs: 10,
        ..TrainConfig::default()
    };
    let mut pipeline = Pipeline::new(&data, config).with_width(Width { kernels: 4, features: 8 });

    for scheme in Scheme::ALL {
        let spec = pipeline.spec(ModelKind::Fusion(scheme), &["ref", "a", "b"], 1)?;
        let m = pipeline.run(&spec)?;
        let test = m.evaluate(&data, Split::Test)?;
        println!("{:<16} test normalized accuracy {:.3}", m.label(), test.normalized_accuracy);
    }
    println!("{} trainings, {} parameter transfers", pipeline.runs, pipeline.log.len());
    Ok(())
}
