//! Capacity, region-size and neighborhood-size sweeps.

use std::io::Write;

use super::{Pipeline, TrainConfig};
use crate::data::{gen_dataset, GeneratorConfig, Split};
use crate::encoder::{RegionEncoderSpec, Width};
use crate::error::{Error, Result};
use crate::model::{ModelKind, ModelSpec};
use crate::proposals::region_count;

#[derive(Clone, Debug, PartialEq)]
pub struct CapacityRow {
    pub model: String,
    pub scale: usize,
    pub params: usize,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// Trains `kind` over `sources` at every width scale.
pub fn capacity_sweep(
    pipeline: &mut Pipeline<'_>,
    kind: ModelKind,
    sources: &[&str],
    scales: &[usize],
) -> Result<Vec<CapacityRow>> {
    if let Some(&s) = scales.iter().find(|&&s| s == 0) {
        return Err(Error::Config(format!("scale factor {s} must be at least 1")));
    }
    scales
        .iter()
        .map(|&scale| {
            let spec = pipeline.spec(kind, sources, scale)?;
            let m = pipeline.run(&spec)?;
            Ok(CapacityRow {
                model: kind.as_str().to_string(),
                scale,
                params: m.store.param_count(),
                val_accuracy: m.evaluate(pipeline.data, Split::Val)?.normalized_accuracy,
                test_accuracy: m.evaluate(pipeline.data, Split::Test)?.normalized_accuracy,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowRow {
    pub source: String,
    pub window: usize,
    /// Proposal count, 0 when skipped.
    pub regions: usize,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    /// Why the point was skipped.
    pub note: String,
}

/// Single-source attention at each region size `W`. Sizes the encoder
/// cannot handle are reported as skipped rows.
pub fn window_sweep(pipeline: &mut Pipeline<'_>, source: &str, windows: &[usize]) -> Result<Vec<WindowRow>> {
    let base = pipeline.spec(ModelKind::Attention, &[source], 1)?;
    let mut rows = Vec::with_capacity(windows.len());
    for &w in windows {
        let mut spec: ModelSpec = base.clone();
        spec.sources[0].window = w;
        let mut row = WindowRow {
            source: source.to_string(),
            window: w,
            regions: 0,
            val_accuracy: None,
            test_accuracy: None,
            note: String::new(),
        };
        let attempt = spec
            .validate()
            .and_then(|_| region_count(spec.sources[0].neighborhood, w))
            .and_then(|r| {
                RegionEncoderSpec::new(spec.sources[0].encoder, spec.width, spec.scale)?.output_side(w)?;
                Ok(r)
            });
        match attempt {
            Ok(r) => row.regions = r,
            Err(e) => {
                row.note = format!("skipped: {e}");
                if pipeline.config.verbose {
                    eprintln!("window {w}: {}", row.note);
                }
                rows.push(row);
                continue;
            }
        }
        let m = pipeline.run(&spec)?;
        row.val_accuracy = Some(m.evaluate(pipeline.data, Split::Val)?.normalized_accuracy);
        row.test_accuracy = Some(m.evaluate(pipeline.data, Split::Test)?.normalized_accuracy);
        rows.push(row);
    }
    Ok(rows)
}

/// Best-validation window among the evaluated rows.
pub fn best_window(rows: &[WindowRow]) -> Option<usize> {
    rows.iter()
        .filter_map(|r| r.val_accuracy.map(|a| (r.window, a)))
        .fold(None, |best: Option<(usize, f64)>, (w, a)| match best {
            Some((_, b)) if b >= a => best,
            _ => Some((w, a)),
        })
        .map(|(w, _)| w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodRow {
    pub source: String,
    pub neighborhood: usize,
    pub regions: usize,
    pub baseline_accuracy: f64,
    pub attention_accuracy: f64,
}

/// Regenerates the benchmark with source `source` cropped to each
/// neighborhood side and compares baseline and attention test accuracy.
/// Jitter is capped so the object always stays inside.
pub fn neighborhood_sweep(
    generator: &GeneratorConfig,
    source: &str,
    sides: &[usize],
    config: &TrainConfig,
    width: Width,
) -> Result<Vec<NeighborhoodRow>> {
    let idx = generator
        .sources
        .iter()
        .position(|s| s.name == source)
        .ok_or_else(|| Error::Config(format!("unknown source `{source}`")))?;
    let mut rows = Vec::with_capacity(sides.len());
    for &n in sides {
        let mut cfg = generator.clone();
        let s = &mut cfg.sources[idx];
        s.neighborhood = n;
        let free = n.checked_sub(s.object_size).ok_or_else(|| {
            Error::Config(format!("neighborhood {n} is smaller than the object ({})", s.object_size))
        })?;
        s.offset_jitter = s.offset_jitter.min(free / 2);
        s.window = s.window.min(n);
        let regions = region_count(n, s.window)?;
        let data = gen_dataset(&cfg)?;
        let mut p = Pipeline::new(&data, config.clone()).with_width(width);
        let test = |p: &mut Pipeline<'_>, kind| -> Result<f64> {
            let spec = p.spec(kind, &[source], 1)?;
            let m = p.run(&spec)?;
            Ok(m.evaluate(&data, Split::Test)?.normalized_accuracy)
        };
        rows.push(NeighborhoodRow {
            source: source.to_string(),
            neighborhood: n,
            regions,
            baseline_accuracy: test(&mut p, ModelKind::Baseline)?,
            attention_accuracy: test(&mut p, ModelKind::Attention)?,
        });
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|a| format!("{a:.6}")).unwrap_or_default()
}

pub fn write_capacity_csv(rows: &[CapacityRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "scale", "params", "val_accuracy", "test_accuracy"])?;
    for r in rows {
        out.write_record([
            r.model.clone(),
            r.scale.to_string(),
            r.params.to_string(),
            format!("{:.6}", r.val_accuracy),
            format!("{:.6}", r.test_accuracy),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_window_csv(rows: &[WindowRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["source", "window", "regions", "val_accuracy", "test_accuracy", "note"])?;
    for r in rows {
        out.write_record([
            r.source.clone(),
            r.window.to_string(),
            r.regions.to_string(),
            opt(r.val_accuracy),
            opt(r.test_accuracy),
            r.note.clone(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_neighborhood_csv(rows: &[NeighborhoodRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["source", "neighborhood", "regions", "baseline_accuracy", "attention_accuracy"])?;
    for r in rows {
        out.write_record([
            r.source.clone(),
            r.neighborhood.to_string(),
            r.regions.to_string(),
            format!("{:.6}", r.baseline_accuracy),
            format!("{:.6}", r.attention_accuracy),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(w: usize, a: Option<f64>) -> WindowRow {
        WindowRow {
            source: "a".into(),
            window: w,
            regions: 0,
            val_accuracy: a,
            test_accuracy: a,
            note: String::new(),
        }
    }

    #[test]
    fn best_window_prefers_first_of_ties() {
        let rows = vec![row(2, Some(0.4)), row(5, Some(0.6)), row(8, None), row(9, Some(0.6))];
        assert_eq!(best_window(&rows), Some(5));
        assert_eq!(best_window(&[row(3, None)]), None);
    }

    #[test]
    fn window_csv_has_one_row_per_window() {
        let mut buf = Vec::new();
        write_window_csv(&[row(2, Some(0.5)), row(3, None)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("a,3,0,,,"));
    }
}
