//! Sliding-window region proposals over a neighborhood.

use msattn::proposals::{extract_proposals, origins, region_count};
use msattn::tensor::Tensor;

fn main() -> msattn::Result<()> {
    for (n, w) in [(12, 5), (24, 8), (25, 25)] {
        println!("N={n:>2} W={w:>2}: {} regions", region_count(n, w)?);
    }

    let image = Tensor::from_fn(vec![1, 6, 6], |i| i as f32);
    let grid = extract_proposals(&image, 4)?;
    let corners = origins(6, 4)?;
    println!("{} regions on a {}×{} grid", grid.len(), grid.side(), grid.side());
    for (k, (r, c)) in corners.iter().enumerate().take(3) {
        println!("region {k} at ({r}, {c})");
    }
    Ok(())
}
