//! Dense sliding-window region proposals.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Scalar, Tensor};

/// Every stride-1 `W`×`W` crop of an `N`×`N` neighborhood.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionGrid<T = f32> {
    /// [R, B, W, W], row-major over window origins.
    pub windows: Tensor<T>,
    /// Top-left (row, col) of each window.
    pub origins: Vec<(usize, usize)>,
    pub neighborhood: usize,
    pub window: usize,
}

impl<T> RegionGrid<T> {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Windows per axis, `N − W + 1`.
    pub fn side(&self) -> usize {
        self.neighborhood + 1 - self.window
    }
}

/// Number of proposals for an `n`×`n` neighborhood and `w`×`w` window.
pub fn region_count(n: usize, w: usize) -> Result<usize> {
    if w == 0 || w > n {
        return Err(Error::invalid(format!(
            "window {w} must lie in [1, {n}] for a {n}x{n} neighborhood"
        )));
    }
    Ok((n - w + 1).pow(2))
}

/// Top-left origins in the same order [`extract_proposals`] emits windows.
pub fn origins(n: usize, w: usize) -> Result<Vec<(usize, usize)>> {
    region_count(n, w)?;
    Ok(kernels::window_origins(n, w))
}

/// Extracts all proposals from a [B, N, N] image.
pub fn extract_proposals<T: Scalar>(image: &Tensor<T>, window: usize) -> Result<RegionGrid<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Rank {
            op: "extract_proposals",
            expected: 3,
            shape: s.to_vec(),
        });
    }
    if s[1] != s[2] {
        return Err(Error::Geometry(format!("neighborhood must be square, got {s:?}")));
    }
    let (bands, n) = (s[0], s[1]);
    let r = region_count(n, window)?;
    let data = kernels::extract_windows(image.data(), 1, bands, n, window);
    Ok(RegionGrid {
        windows: Tensor::new(vec![r, bands, window, window], data)?,
        origins: kernels::window_origins(n, window),
        neighborhood: n,
        window,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(b: usize, n: usize) -> Tensor<f32> {
        Tensor::from_fn(vec![b, n, n], |i| (i as f32 * 0.37).sin())
    }

    #[test]
    fn region_counts() {
        assert_eq!(extract_proposals(&image(8, 12), 5).unwrap().len(), 64);
        assert_eq!(extract_proposals(&image(1, 24), 8).unwrap().len(), 289);
        let whole = extract_proposals(&image(3, 6), 6).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole.windows.data(), image(3, 6).data());
    }

    #[test]
    fn oversized_window_rejected() {
        assert!(matches!(
            extract_proposals(&image(1, 4), 5),
            Err(Error::InvalidParameter(_))
        ));
        assert!(extract_proposals(&image(1, 4), 0).is_err());
    }

    #[test]
    fn windows_match_origins() {
        let img = image(2, 7);
        let grid = extract_proposals(&img, 3).unwrap();
        for (i, &(r0, c0)) in grid.origins.iter().enumerate() {
            for b in 0..2 {
                for u in 0..3 {
                    for v in 0..3 {
                        assert_eq!(
                            grid.windows.at(&[i, b, u, v]).to_bits(),
                            img.at(&[b, r0 + u, c0 + v]).to_bits()
                        );
                    }
                }
            }
        }
    }
}
