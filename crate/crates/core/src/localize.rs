//! Where the attention heads look: region-score grids and the planted-offset
//! hit rate.

use std::io::Write;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::proposals::origins;
use crate::tensor::{argmax, ParamStore};

/// Region scores of one attention branch for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionDump {
    pub sample: usize,
    pub source: String,
    pub label: usize,
    pub predicted: usize,
    /// Grid side, N − W + 1.
    pub side: usize,
    /// loc ⊙ cls of the predicted class, row-major over the grid, in [0, 1].
    pub scores: Vec<f32>,
    /// Top-left corner of the best region.
    pub predicted_offset: (usize, usize),
    /// Top-left corner of the planted object.
    pub true_offset: (i16, i16),
    pub hit: bool,
}

/// True when the center of the `window`-sized region at `origin` lies
/// inside the `object`-sized box at `offset`.
pub fn center_inside(origin: (usize, usize), window: usize, offset: (i16, i16), object: usize) -> bool {
    let c = |o: usize| o as f64 + (window as f64 - 1.0) / 2.0;
    let inside = |v: f64, lo: i16| v >= lo as f64 && v <= lo as f64 + object as f64 - 1.0;
    inside(c(origin.0), offset.0) && inside(c(origin.1), offset.1)
}

/// Region grids for the given samples of `data`, one entry per attention
/// branch and sample. `sources` maps model inputs to dataset sources.
pub fn dump_regions(
    net: &Network,
    store: &ParamStore<f32>,
    data: &Dataset,
    sources: &[usize],
    samples: &[usize],
) -> Result<Vec<RegionDump>> {
    let heads = net.heads();
    // attention branches read every input but the reference
    let branch_sources: Vec<usize> = match net {
        Network::Attention(_) => sources.to_vec(),
        Network::Fusion(_) => sources[1..].to_vec(),
        Network::Pairwise(_) => sources[1..].to_vec(),
        Network::Baseline(_) => return Err(Error::Config("baseline models have no region scores".into())),
    };
    let mut out = Vec::with_capacity(samples.len() * heads.len());
    for &i in samples {
        if i >= data.len() {
            return Err(Error::invalid(format!("sample {i} out of range for {} samples", data.len())));
        }
        let inputs: Vec<_> = sources.iter().map(|&s| data.image(s, i)).collect();
        let diag = net.diagnose(store, &inputs)?;
        let predicted = diag.predicted_class();
        for ((head, branch), &s) in heads.iter().zip(&diag.branches).zip(&branch_sources) {
            let spec = &data.sources()[s];
            let window = head.config.window;
            let grid = origins(head.config.neighborhood, window)?;
            let scores = branch.region_scores(predicted);
            let best = grid[argmax(&scores)];
            let offset = data.ground_truth().offsets[s][i];
            out.push(RegionDump {
                sample: i,
                source: spec.name.clone(),
                label: data.labels[i] as usize,
                predicted,
                side: head.config.neighborhood + 1 - window,
                scores,
                predicted_offset: best,
                true_offset: offset,
                hit: center_inside(best, window, offset, spec.object_size),
            });
        }
    }
    Ok(out)
}

/// Fraction of dumps whose best region is centered on the object, per
/// source in first-seen order.
pub fn hit_rates(dumps: &[RegionDump]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, usize, usize)> = Vec::new();
    for d in dumps {
        let k = match out.iter().position(|(s, _, _)| *s == d.source) {
            Some(k) => k,
            None => {
                out.push((d.source.clone(), 0, 0));
                out.len() - 1
            }
        };
        out[k].1 += d.hit as usize;
        out[k].2 += 1;
    }
    out.into_iter().map(|(s, h, n)| (s, h as f64 / n as f64)).collect()
}

/// One row per sample and branch; the grid is flattened row-major into a
/// space-separated `scores` column.
pub fn write_regions_csv(dumps: &[RegionDump], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "sample", "source", "label", "predicted", "side", "pred_row", "pred_col", "true_row", "true_col", "hit", "scores",
    ])?;
    for d in dumps {
        let scores: Vec<String> = d.scores.iter().map(|v| format!("{v:.6}")).collect();
        out.write_record([
            d.sample.to_string(),
            d.source.clone(),
            d.label.to_string(),
            d.predicted.to_string(),
            d.side.to_string(),
            d.predicted_offset.0.to_string(),
            d.predicted_offset.1.to_string(),
            d.true_offset.0.to_string(),
            d.true_offset.1.to_string(),
            (d.hit as u8).to_string(),
            scores.join(" "),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_geometry() {
        // 5×5 window at (3, 3) has center (5, 5); a 4×4 object at (4, 4)
        // spans rows and columns 4..=7
        assert!(center_inside((3, 3), 5, (4, 4), 4));
        assert!(!center_inside((0, 3), 5, (4, 4), 4));
        assert!(center_inside((5, 5), 5, (4, 4), 4));
        assert!(!center_inside((6, 5), 5, (4, 4), 4));
        // even windows: center between pixels
        assert!(center_inside((8, 8), 8, (8, 8), 8));
        assert!(!center_inside((0, 0), 8, (8, 8), 8));
    }

    #[test]
    fn rates_per_source() {
        let d = |source: &str, hit| RegionDump {
            sample: 0,
            source: source.into(),
            label: 0,
            predicted: 0,
            side: 1,
            scores: vec![1.0],
            predicted_offset: (0, 0),
            true_offset: (0, 0),
            hit,
        };
        let r = hit_rates(&[d("a", true), d("b", false), d("a", false), d("a", true)]);
        assert_eq!(r, vec![("a".to_string(), 2.0 / 3.0), ("b".to_string(), 0.0)]);
    }
}
