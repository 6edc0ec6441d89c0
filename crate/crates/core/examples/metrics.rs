//! Confusion matrix, normalized accuracy and Cohen's kappa.

use msattn::metrics::{confusion, write_report_csv, ConfusionMatrix};

fn main() -> msattn::Result<()> {
    let labels = [0, 0, 0, 0, 1, 1, 1, 2, 2, 2];
    let preds = [0, 0, 0, 1, 1, 1, 2, 2, 2, 0];
    let cm = confusion(&preds, &labels, 3)?;
    println!("overall accuracy    {:.3}", cm.overall_accuracy());
    println!("normalized accuracy {:.3}", cm.normalized_accuracy()?);
    println!("kappa               {:.3}", cm.kappa()?);
    write_report_csv(&cm, std::io::stdout())?;

    let perfect = ConfusionMatrix::from_rows(&[vec![5, 0], vec![0, 2]])?;
    println!("diagonal kappa {}", perfect.kappa()?);
    Ok(())
}
