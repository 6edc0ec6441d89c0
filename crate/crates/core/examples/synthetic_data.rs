//! Generates a small multisource dataset, saves it and reloads it.

use msattn::data::{gen_dataset, GeneratorConfig, SourceSpec, SplitDataset};

fn main() -> msattn::Result<()> {
    let mut config = GeneratorConfig::new(SourceSpec::defaults(), 5, 42);
    config.base_count = 40;
    config.difficulty = 0.3;
    let data = gen_dataset(&config)?;
    println!("train {} / val {} / test {}", data.train.len(), data.val.len(), data.test.len());
    for s in data.sources() {
        println!(
            "{:>4}: {}×{}×{}, object {}, jitter ±{}",
            s.name, s.channels, s.neighborhood, s.neighborhood, s.object_size, s.offset_jitter
        );
    }
    let offsets = &data.train.ground_truth().offsets[1];
    println!("first object offsets in `a`: {:?}", &offsets[..4]);

    let dir = std::env::temp_dir().join("msattn-example-data");
    data.save(&dir)?;
    let back = SplitDataset::load(&dir)?;
    assert_eq!(back.content_hash(), data.content_hash());
    println!("saved to {} (hash {})", dir.display(), &data.content_hash()[..16]);
    Ok(())
}
