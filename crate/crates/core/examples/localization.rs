//! Trains attention on noise-free data and checks how often the best
//! region is centered on the planted object.

use msattn::data::{gen_dataset, GeneratorConfig, SourceSpec, Split};
use msattn::encoder::Width;
use msattn::localize::{dump_regions, hit_rates};
use msattn::model::ModelKind;
use msattn::train::{Pipeline, TrainConfig};

fn main() -> msattn::Result<()> {
    let mut gen = GeneratorConfig::new(vec![SourceSpec::reference(), SourceSpec::additional_a()], 5, 2);
    gen.base_count = 100;
    gen.difficulty = 0.0;
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
    let m = pipeline.run(&pipeline.spec(ModelKind::Attention, &["a"], 1)?)?;

    let test = &data.test;
    let samples: Vec<usize> = (0..test.len()).collect();
    let dumps = dump_regions(&m.net, &m.store, test, &m.source_indices(&data)?, &samples)?;
    println!("test accuracy {:.3}", m.evaluate(&data, Split::Test)?.normalized_accuracy);
    for (source, rate) in hit_rates(&dumps) {
        println!("{source}: best region on the object for {:.1}% of samples", 100.0 * rate);
    }
    let d = &dumps[0];
    println!("sample 0: predicted corner {:?}, object at {:?}", d.predicted_offset, d.true_offset);
    Ok(())
}
