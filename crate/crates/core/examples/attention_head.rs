//! An untrained instance-attention head on one synthetic sample: logits,
//! class probabilities and the region-score grid of the top class.

use msattn::attention::{AttentionConfig, AttentionHead, TemperatureConfig, Variant};
use msattn::data::{gen_dataset, GeneratorConfig, SourceSpec};
use msattn::encoder::{DropoutSpec, EncoderStyle, RegionEncoderSpec, Width};
use msattn::tensor::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> msattn::Result<()> {
    let source = SourceSpec::additional_a();
    let mut gen = GeneratorConfig::new(vec![SourceSpec::reference(), source.clone()], 4, 1);
    gen.base_count = 40;
    let data = gen_dataset(&gen)?;

    let config = AttentionConfig {
        classes: 4,
        channels: source.channels,
        neighborhood: source.neighborhood,
        window: source.window,
        encoder: RegionEncoderSpec::new(EncoderStyle::Flat, Width { kernels: 8, features: 16 }, 1)?,
        dropout: DropoutSpec::NONE,
        temperature: TemperatureConfig::default(),
        variant: Variant::Full,
    };
    let mut store = ParamStore::new();
    let head = AttentionHead::new(&mut store, "a.", config, &mut ChaCha8Rng::seed_from_u64(3))?;
    println!("{} regions, {} parameters", head.regions(), store.param_count());

    let out = head.predict(&store, &data.train.image(1, 0))?;
    println!("logits {:?}", out.logits);
    println!("probs  {:?}", out.probs);
    let class = out.predicted_class();
    let side = source.neighborhood + 1 - source.window;
    for row in out.region_scores(class).chunks(side) {
        println!("{}", row.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" "));
    }
    Ok(())
}
