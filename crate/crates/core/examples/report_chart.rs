//! Turns a result table into an SVG bar chart.

use msattn::report::{chart_from_csv, render_svg};

const RESULTS: &str = "model,val_accuracy,test_accuracy
baseline,0.41,0.40
attention,0.49,0.48
ext3,0.54,0.53
";

fn main() -> msattn::Result<()> {
    let chart = chart_from_csv("models", RESULTS, None, &[])?;
    let path = std::env::temp_dir().join("msattn-models.svg");
    std::fs::write(&path, render_svg(&chart))?;
    println!("{} series over {} models -> {}", chart.series.len(), chart.categories.len(), path.display());
    Ok(())
}
