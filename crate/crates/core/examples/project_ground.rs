//! Projects ground points into the default camera and builds the resampling
//! table that the geometric branch uses for each depth extent.

use hft::geometry::build_resample_map;
use hft::synthworld::{default_grid, default_intrinsics};

fn main() -> hft::Result<()> {
    let intr = default_intrinsics();
    let grid = default_grid();
    for (x, z) in [(0.0, 2.0), (0.0, 10.0), (-4.0, 10.0), (6.0, 30.0)] {
        let (u, v) = intr.ground_to_pixel(x, z)?;
        let (bx, bz) = intr.pixel_to_ground(u, v)?;
        println!("ground ({x:5.1}, {z:5.1}) -> pixel ({u:6.2}, {v:6.2}) -> ground ({bx:5.2}, {bz:5.2})");
    }
    let strides = [32, 16, 8];
    for (e, &(lo, hi)) in grid.extents.iter().enumerate() {
        let map = build_resample_map(&intr, &grid, strides[e], e)?;
        println!(
            "extent {e} z [{lo}, {hi}) stride {:2}: {}x{} cells, {} inside the image",
            strides[e],
            map.depth_cells,
            map.lateral_cells,
            map.in_bounds_count()
        );
    }
    Ok(())
}
