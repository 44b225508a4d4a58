//! Pinhole camera model, the metric BEV grid and the precomputed resampling
//! tables that lift height-flattened frontal features onto the ground plane.
//!
//! Conventions: the camera looks along +z with its optical axis parallel to
//! the ground, `cam_height` metres above it. Image `u` grows to the right and
//! `v` grows downwards; pixel `(row i, col j)` covers `[j, j+1) x [i, i+1)`.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::tensor::{Float, Tensor};

/// Pinhole intrinsics plus the camera height above the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub cam_height: f64,
    /// Nominal image size in pixels.
    pub image_width: usize,
    pub image_height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        cam_height: f64,
        image_width: usize,
        image_height: usize,
    ) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            cam_height,
            image_width,
            image_height,
        };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            bail!(Domain, "focal lengths must be positive");
        }
        if !(self.cam_height > 0.0) {
            bail!(Domain, "camera height must be positive");
        }
        if self.image_width == 0 || self.image_height == 0 {
            bail!(Domain, "image size must be non-zero");
        }
        let (w, h) = (self.image_width as f64, self.image_height as f64);
        if !(0.0..=w).contains(&self.cx) || !(0.0..=h).contains(&self.cy) {
            bail!(Domain, "principal point ({}, {}) outside image", self.cx, self.cy);
        }
        Ok(())
    }

    /// The 3x3 intrinsic matrix.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ]
    }

    /// Projects a point at `height` metres above the ground.
    pub fn point_to_pixel(&self, x: f64, height: f64, z: f64) -> Result<(f64, f64)> {
        if !(z > 0.0) {
            bail!(Domain, "depth must be positive, got {}", z);
        }
        Ok((
            self.fx * x / z + self.cx,
            self.fy * (self.cam_height - height) / z + self.cy,
        ))
    }

    /// Projects a ground-plane point `(x, z)` into the image.
    pub fn ground_to_pixel(&self, x: f64, z: f64) -> Result<(f64, f64)> {
        self.point_to_pixel(x, 0.0, z)
    }

    /// Intersects the viewing ray through `(u, v)` with the ground plane.
    pub fn pixel_to_ground(&self, u: f64, v: f64) -> Result<(f64, f64)> {
        let dv = v - self.cy;
        if !(dv > 0.0) {
            bail!(Domain, "pixel row {} is at or above the horizon", v);
        }
        let z = self.fy * self.cam_height / dv;
        Ok(((u - self.cx) * z / self.fx, z))
    }

    pub fn pixel_in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.image_width as f64 && v >= 0.0 && v < self.image_height as f64
    }

    /// True when the ground point `(x, z)` is visible in the image.
    pub fn in_frustum(&self, x: f64, z: f64) -> bool {
        match self.ground_to_pixel(x, z) {
            Ok((u, v)) => self.pixel_in_image(u, v),
            Err(_) => false,
        }
    }

    /// Intrinsics of the horizontally mirrored image.
    pub fn flipped(&self) -> Self {
        Self {
            cx: self.image_width as f64 - self.cx,
            ..*self
        }
    }
}

/// The metric bird's-eye-view grid and its per-scale depth extents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevGridSpec {
    pub depth_cells: usize,
    pub lateral_cells: usize,
    pub cell_size: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// `(z_lo, z_hi)` per extent, ascending in depth.
    pub extents: Vec<(f64, f64)>,
}

const GRID_TOL: f64 = 1e-9;

impl BevGridSpec {
    pub fn new(
        depth_cells: usize,
        lateral_cells: usize,
        cell_size: f64,
        z_min: f64,
        extents: Vec<(f64, f64)>,
    ) -> Result<Self> {
        let grid = Self {
            depth_cells,
            lateral_cells,
            cell_size,
            z_min,
            z_max: z_min + depth_cells as f64 * cell_size,
            extents,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Splits `[z_min, z_max)` into extents with the given cell counts.
    pub fn with_extent_cells(
        lateral_cells: usize,
        cell_size: f64,
        z_min: f64,
        extent_cells: &[usize],
    ) -> Result<Self> {
        let mut extents = Vec::with_capacity(extent_cells.len());
        let mut lo = z_min;
        for &n in extent_cells {
            let hi = lo + n as f64 * cell_size;
            extents.push((lo, hi));
            lo = hi;
        }
        Self::new(
            extent_cells.iter().sum(),
            lateral_cells,
            cell_size,
            z_min,
            extents,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth_cells == 0 || self.lateral_cells == 0 {
            bail!(Config, "grid must have at least one cell");
        }
        if !(self.cell_size > 0.0) {
            bail!(Config, "cell size must be positive");
        }
        if !(self.z_min > 0.0) {
            bail!(Domain, "z_min must be positive, got {}", self.z_min);
        }
        let span = self.depth_cells as f64 * self.cell_size;
        if (span - (self.z_max - self.z_min)).abs() > GRID_TOL * span.max(1.0) {
            bail!(
                Config,
                "depth cells x cell size ({}) does not match z range ({})",
                span,
                self.z_max - self.z_min
            );
        }
        if self.extents.is_empty() {
            bail!(Config, "grid needs at least one depth extent");
        }
        let mut expected_lo = self.z_min;
        for &(lo, hi) in &self.extents {
            if (lo - expected_lo).abs() > GRID_TOL || !(hi > lo) {
                bail!(
                    Config,
                    "extents must be ordered and contiguous, found ({}, {})",
                    lo,
                    hi
                );
            }
            let cells = (hi - lo) / self.cell_size;
            if (cells - cells.round()).abs() > 1e-6 {
                bail!(Config, "extent ({}, {}) is not cell-aligned", lo, hi);
            }
            expected_lo = hi;
        }
        if (expected_lo - self.z_max).abs() > GRID_TOL {
            bail!(Config, "extents do not cover [z_min, z_max)");
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.depth_cells * self.lateral_cells
    }

    pub fn lateral_half_width(&self) -> f64 {
        self.lateral_cells as f64 * self.cell_size / 2.0
    }

    /// Metric centre `(x, z)` of cell `(zi, xi)`.
    pub fn cell_center(&self, zi: usize, xi: usize) -> (f64, f64) {
        (
            -self.lateral_half_width() + (xi as f64 + 0.5) * self.cell_size,
            self.z_min + (zi as f64 + 0.5) * self.cell_size,
        )
    }

    /// Depth-row range `[start, end)` covered by extent `index`.
    pub fn extent_rows(&self, index: usize) -> std::ops::Range<usize> {
        let (lo, hi) = self.extents[index];
        let start = ((lo - self.z_min) / self.cell_size).round() as usize;
        let end = ((hi - self.z_min) / self.cell_size).round() as usize;
        start..end
    }

    pub fn extent_depth_cells(&self, index: usize) -> usize {
        self.extent_rows(index).len()
    }

    /// Cells whose centres project inside the image at ground level.
    pub fn frustum_mask(&self, intr: &CameraIntrinsics) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.num_cells());
        for zi in 0..self.depth_cells {
            for xi in 0..self.lateral_cells {
                let (x, z) = self.cell_center(zi, xi);
                mask.push(intr.in_frustum(x, z));
            }
        }
        mask
    }
}

/// Fractional source location for one BEV cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleCoord {
    /// Column in the polar map.
    pub col: f64,
    /// Depth bin in the polar map.
    pub depth: f64,
    pub in_bounds: bool,
}

/// Precomputed resampling from a `D x U` polar feature map onto the
/// `Z_e x W` cells of one depth extent.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleMap {
    pub depth_cells: usize,
    pub lateral_cells: usize,
    pub src_depth: usize,
    pub src_cols: usize,
    /// Row-major over `(z, x)`.
    pub coords: Vec<SampleCoord>,
    taps: Vec<Option<[(usize, f64); 4]>>,
}

impl ResampleMap {
    /// Assembles a map from explicit coordinates.
    pub fn from_coords(
        depth_cells: usize,
        lateral_cells: usize,
        src_depth: usize,
        src_cols: usize,
        coords: Vec<SampleCoord>,
    ) -> Result<Self> {
        if coords.len() != depth_cells * lateral_cells {
            bail!(
                Shape,
                "resample map has {} coords for a {}x{} grid",
                coords.len(),
                depth_cells,
                lateral_cells
            );
        }
        if src_depth == 0 || src_cols == 0 {
            bail!(Shape, "empty source map");
        }
        let max_d = (src_depth - 1) as f64;
        let max_u = (src_cols - 1) as f64;
        let mut taps = Vec::with_capacity(coords.len());
        for c in &coords {
            if !c.in_bounds {
                taps.push(None);
                continue;
            }
            if !(0.0..=max_d).contains(&c.depth) || !(0.0..=max_u).contains(&c.col) {
                bail!(
                    Shape,
                    "in-bounds coordinate ({}, {}) outside {}x{} source",
                    c.depth,
                    c.col,
                    src_depth,
                    src_cols
                );
            }
            let d0 = c.depth.floor() as usize;
            let u0 = c.col.floor() as usize;
            let d1 = (d0 + 1).min(src_depth - 1);
            let u1 = (u0 + 1).min(src_cols - 1);
            let b = c.depth - d0 as f64;
            let a = c.col - u0 as f64;
            taps.push(Some([
                (d0 * src_cols + u0, (1.0 - a) * (1.0 - b)),
                (d0 * src_cols + u1, a * (1.0 - b)),
                (d1 * src_cols + u0, (1.0 - a) * b),
                (d1 * src_cols + u1, a * b),
            ]));
        }
        Ok(Self {
            depth_cells,
            lateral_cells,
            src_depth,
            src_cols,
            coords,
            taps,
        })
    }

    pub fn in_bounds_count(&self) -> usize {
        self.coords.iter().filter(|c| c.in_bounds).count()
    }

    fn check_source(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != 3 || shape[1] != self.src_depth || shape[2] != self.src_cols {
            bail!(
                Shape,
                "source {:?} does not match map source {}x{}",
                shape,
                self.src_depth,
                self.src_cols
            );
        }
        Ok(shape[0])
    }
}

/// Depth-bin coordinate of depth `z` inside the extent `(z_lo, z_hi)` for a
/// polar map with `bins` bins, spaced linearly in depth.
pub fn depth_bin(z: f64, z_lo: f64, z_hi: f64, bins: usize) -> f64 {
    if bins <= 1 {
        return 0.0;
    }
    (z - z_lo) / (z_hi - z_lo) * (bins - 1) as f64
}

/// Fractional feature column of image column `u` at a given stride, with
/// feature cell `j` centred on pixel `j * stride + stride / 2`.
pub fn feature_col(u: f64, stride: usize) -> f64 {
    u / stride as f64 - 0.5
}

/// Builds the resampling table for extent `extent_index`, reading a polar
/// map of `Z_e` depth bins and `image_width / stride` columns.
pub fn build_resample_map(
    intr: &CameraIntrinsics,
    grid: &BevGridSpec,
    scale_stride: usize,
    extent_index: usize,
) -> Result<ResampleMap> {
    let Some(&(z_lo, z_hi)) = grid.extents.get(extent_index) else {
        bail!(
            Config,
            "extent index {} out of range ({} extents)",
            extent_index,
            grid.extents.len()
        );
    };
    if !(z_lo > 0.0) {
        bail!(Domain, "extent lower bound must be positive, got {}", z_lo);
    }
    grid.validate()?;
    intr.validate()?;
    if scale_stride == 0 || intr.image_width % scale_stride != 0 {
        bail!(
            Config,
            "stride {} does not divide image width {}",
            scale_stride,
            intr.image_width
        );
    }
    let src_cols = intr.image_width / scale_stride;
    let rows = grid.extent_rows(extent_index);
    let depth_cells = rows.len();
    let src_depth = depth_cells;
    let max_col = (src_cols - 1) as f64;
    let mut coords = Vec::with_capacity(depth_cells * grid.lateral_cells);
    for zi in rows {
        for xi in 0..grid.lateral_cells {
            let (x, z) = grid.cell_center(zi, xi);
            let (u, v) = intr.ground_to_pixel(x, z)?;
            let in_bounds = intr.pixel_in_image(u, v);
            coords.push(SampleCoord {
                col: feature_col(u, scale_stride).clamp(0.0, max_col),
                depth: depth_bin(z, z_lo, z_hi, src_depth),
                in_bounds,
            });
        }
    }
    ResampleMap::from_coords(depth_cells, grid.lateral_cells, src_depth, src_cols, coords)
}

/// Bilinearly samples `source` (`C x D x U`) at every map cell; out-of-bounds
/// cells are zero. Returns `C x Z_e x W`.
pub fn bilinear_sample<T: Float>(source: &Tensor<T>, map: &ResampleMap) -> Result<Tensor<T>> {
    let channels = map.check_source(source.shape())?;
    let plane = map.src_depth * map.src_cols;
    let cells = map.coords.len();
    let src = source.data();
    let mut out = vec![T::zero(); channels * cells];
    for (cell, taps) in map.taps.iter().enumerate() {
        let Some(taps) = taps else { continue };
        let w = taps.map(|(i, w)| (i, T::f(w)));
        for c in 0..channels {
            let s = &src[c * plane..(c + 1) * plane];
            out[c * cells + cell] =
                w[0].1 * s[w[0].0] + w[1].1 * s[w[1].0] + w[2].1 * s[w[2].0] + w[3].1 * s[w[3].0];
        }
    }
    Tensor::from_vec(&[channels, map.depth_cells, map.lateral_cells], out)
}

/// Adjoint of [`bilinear_sample`]: scatters an output gradient back onto the
/// source layout.
pub fn bilinear_sample_backward<T: Float>(
    grad_out: &Tensor<T>,
    map: &ResampleMap,
) -> Result<Tensor<T>> {
    let shape = grad_out.shape();
    if shape.len() != 3 || shape[1] != map.depth_cells || shape[2] != map.lateral_cells {
        return Err(Error::Shape(format!(
            "gradient {:?} does not match map {}x{}",
            shape, map.depth_cells, map.lateral_cells
        )));
    }
    let channels = shape[0];
    let plane = map.src_depth * map.src_cols;
    let cells = map.coords.len();
    let g = grad_out.data();
    let mut out = vec![T::zero(); channels * plane];
    for (cell, taps) in map.taps.iter().enumerate() {
        let Some(taps) = taps else { continue };
        for c in 0..channels {
            let go = g[c * cells + cell];
            let dst = &mut out[c * plane..(c + 1) * plane];
            for &(i, w) in taps {
                dst[i] += T::f(w) * go;
            }
        }
    }
    Tensor::from_vec(&[channels, map.src_depth, map.src_cols], out)
}
