//! Confusion matrix, normalized (macro) accuracy, Cohen's kappa and
//! per-class recall.

use std::io::Write;

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

/// Builds the confusion matrix of 0-based predictions against labels.
pub fn confusion(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&p, &t) in preds.iter().zip(labels) {
        for v in [p, t] {
            if v >= classes {
                return Err(Error::LabelOutOfRange { label: v, classes });
            }
        }
        cm.counts[t * classes + p] += 1;
    }
    Ok(cm)
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::invalid("confusion matrix must be square"));
        }
        Ok(Self {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.classes..(truth + 1) * self.classes]
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.row(truth).iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, pred)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn diagonal(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    /// Fraction of correctly classified samples.
    pub fn overall_accuracy(&self) -> f64 {
        self.diagonal() as f64 / self.total().max(1) as f64
    }

    /// Recall of every class, in class order.
    pub fn per_class_report(&self) -> Result<Vec<(usize, f64)>> {
        (0..self.classes)
            .map(|c| {
                let n = self.row_sum(c);
                if n == 0 {
                    return Err(Error::EmptyClass { class: c });
                }
                Ok((c, self.get(c, c) as f64 / n as f64))
            })
            .collect()
    }

    /// Unweighted mean of per-class recall.
    pub fn normalized_accuracy(&self) -> Result<f64> {
        let report = self.per_class_report()?;
        Ok(report.iter().map(|(_, r)| r).sum::<f64>() / report.len() as f64)
    }

    /// Cohen's κ on raw counts, evaluated as
    /// `(n·Σ diag − Σ r_c·k_c) / (n² − Σ r_c·k_c)` in exact integers.
    pub fn kappa(&self) -> Result<f64> {
        let n = self.total() as u128;
        if n == 0 {
            return Err(Error::invalid("kappa of an empty confusion matrix"));
        }
        let chance: u128 = (0..self.classes)
            .map(|c| self.row_sum(c) as u128 * self.col_sum(c) as u128)
            .sum();
        let denom = n * n - chance;
        if denom == 0 {
            return Err(Error::UndefinedKappa);
        }
        let num = (n * self.diagonal() as u128) as i128 - chance as i128;
        Ok(num as f64 / denom as f64)
    }

    /// Rows scaled to sum to 1 (empty rows stay zero).
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        (0..self.classes)
            .map(|t| {
                let s = self.row_sum(t).max(1) as f64;
                self.row(t).iter().map(|&v| v as f64 / s).collect()
            })
            .collect()
    }

    /// `true\pred` header, one row of counts per true class.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["true\\pred".to_string()];
        header.extend((0..self.classes).map(|c| c.to_string()));
        out.write_record(&header)?;
        for t in 0..self.classes {
            let mut rec = vec![t.to_string()];
            rec.extend(self.row(t).iter().map(u64::to_string));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-class recall table with a final summary row holding normalized
/// accuracy and κ.
pub fn write_report_csv(cm: &ConfusionMatrix, w: impl Write) -> Result<()> {
    let report = cm.per_class_report()?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["class", "support", "recall"])?;
    for (c, r) in &report {
        out.write_record([c.to_string(), cm.row_sum(*c).to_string(), format!("{r:.6}")])?;
    }
    let kappa = cm.kappa().map(|k| format!("{k:.6}")).unwrap_or_else(|_| "nan".into());
    out.write_record([
        "normalized_accuracy".to_string(),
        cm.total().to_string(),
        format!("{:.6}", cm.normalized_accuracy()?),
    ])?;
    out.write_record(["kappa".to_string(), cm.total().to_string(), kappa])?;
    out.flush()?;
    Ok(())
}

/// Predicted class per row of a [S, C] probability table (first on ties).
pub fn argmax_rows(probs: &[f32], classes: usize) -> Vec<usize> {
    probs.chunks(classes).map(crate::tensor::argmax).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let m = confusion(&[1], &[0], 2).unwrap();
        assert_eq!(m, cm(&[&[0, 1], &[0, 0]]));
        let m = confusion(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(m.diagonal(), 4);
        assert_eq!(m.total(), 4);
        assert!(matches!(confusion(&[3], &[0], 3), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn normalized_accuracy_example() {
        assert_eq!(cm(&[&[9, 1], &[5, 5]]).normalized_accuracy().unwrap(), 0.7);
        assert_eq!(cm(&[&[3, 0], &[0, 8]]).normalized_accuracy().unwrap(), 1.0);
        assert_eq!(
            cm(&[&[18, 2], &[5, 5]]).normalized_accuracy().unwrap(),
            cm(&[&[9, 1], &[5, 5]]).normalized_accuracy().unwrap()
        );
        assert!(matches!(
            cm(&[&[1, 0], &[0, 0]]).normalized_accuracy(),
            Err(Error::EmptyClass { class: 1 })
        ));
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cm(&[&[20, 5], &[10, 15]]).kappa().unwrap(), 0.4);
        assert_eq!(cm(&[&[25, 25], &[25, 25]]).kappa().unwrap(), 0.0);
        assert_eq!(cm(&[&[4, 0, 0], &[0, 7, 0], &[0, 0, 1]]).kappa().unwrap(), 1.0);
        assert!(matches!(cm(&[&[5, 0], &[0, 0]]).kappa(), Err(Error::UndefinedKappa)));
    }

    #[test]
    fn report_mean_is_normalized_accuracy() {
        let m = cm(&[&[7, 2, 1], &[3, 3, 3], &[0, 1, 4]]);
        let r = m.per_class_report().unwrap();
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        let mean = r.iter().map(|x| x.1).sum::<f64>() / 3.0;
        assert_eq!(mean, m.normalized_accuracy().unwrap());
    }

    #[test]
    fn csv_layout() {
        let m = cm(&[&[9, 1], &[5, 5]]);
        let mut buf = Vec::new();
        write_report_csv(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "class,support,recall\n0,10,0.900000\n1,10,0.500000\nnormalized_accuracy,20,0.700000\nkappa,20,0.400000\n"
        );
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "true\\pred,0,1\n0,9,1\n1,5,5\n");
    }
}
