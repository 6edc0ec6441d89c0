//! Accuracy as a function of region size on one source.

use msattn::data::{gen_dataset, GeneratorConfig, SourceSpec};
use msattn::encoder::Width;
use msattn::train::{best_window, window_sweep, write_window_csv, Pipeline, TrainConfig};

fn main() -> msattn::Result<()> {
    let mut gen = GeneratorConfig::new(vec![SourceSpec::reference(), SourceSpec::additional_a()], 4, 3);
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
    let rows = window_sweep(&mut pipeline, "a", &[3, 5, 8, 13])?;
    write_window_csv(&rows, std::io::stdout())?;
    println!("best window: {:?}", best_window(&rows));
    Ok(())
}
