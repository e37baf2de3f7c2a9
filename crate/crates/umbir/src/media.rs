//! Layered medium, sensor geometry, and the reconstruction grid.
//!
//! Coordinate convention: every 2-D point is `(depth, height)` in meters.
//! The depth axis runs perpendicular to the transducer face (depth 0 at the
//! face, increasing into the structure); the height axis runs along the
//! receiver line. Layers are parallel slabs stacked along depth.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A 2-D point in `(depth, height)` coordinates, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub depth: f64,
    pub height: f64,
}

impl Point {
    pub fn new(depth: f64, height: f64) -> Self {
        Point { depth, height }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        ((self.depth - other.depth).powi(2) + (self.height - other.height).powi(2)).sqrt()
    }
}

/// One slab of the propagation medium.
///
/// `attenuation` is in s/m, chosen so that `speed * attenuation * |f| * dt`
/// is the dimensionless amplitude exponent accumulated while crossing the
/// layer in time `dt` (frequency `f` in Hz).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Thickness along depth, m.
    pub thickness: f64,
    /// Acoustic speed, m/s.
    pub speed: f64,
    /// Attenuation coefficient, s/m.
    pub attenuation: f64,
    /// Acoustic impedance, kg/(m^2 s).
    pub impedance: f64,
}

impl Layer {
    pub fn new(thickness: f64, speed: f64, attenuation: f64, impedance: f64) -> Result<Self> {
        let layer = Layer { thickness, speed, attenuation, impedance };
        layer.validate()?;
        Ok(layer)
    }

    /// Build a layer from a mass density, deriving impedance = density * speed.
    pub fn from_density(thickness: f64, speed: f64, attenuation: f64, density: f64) -> Result<Self> {
        if !(density > 0.0) {
            return Err(Error::config(format!("layer density must be > 0, got {density}")));
        }
        Layer::new(thickness, speed, attenuation, density * speed)
    }

    fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.thickness > 0.0) {
            errs.push(format!("layer thickness must be > 0, got {}", self.thickness));
        }
        if !(self.speed > 0.0) {
            errs.push(format!("layer speed must be > 0, got {}", self.speed));
        }
        if !(self.attenuation >= 0.0) {
            errs.push(format!("layer attenuation must be >= 0, got {}", self.attenuation));
        }
        if !(self.impedance > 0.0) {
            errs.push(format!("layer impedance must be > 0, got {}", self.impedance));
        }
        if errs.is_empty() { Ok(()) } else { Err(Error::Config(errs)) }
    }
}

/// Ordered stack of parallel slabs along the depth axis.
///
/// Layer 0 starts at depth 0 (the transducer face).
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredMedium {
    layers: Vec<Layer>,
    /// Cumulative depth of each interface; `boundaries[0] = 0`,
    /// `boundaries[L]` = total depth.
    boundaries: Vec<f64>,
}

impl LayeredMedium {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("medium must contain at least one layer"));
        }
        for layer in &layers {
            layer.validate()?;
        }
        let mut boundaries = Vec::with_capacity(layers.len() + 1);
        let mut depth = 0.0;
        boundaries.push(0.0);
        for layer in &layers {
            depth += layer.thickness;
            boundaries.push(depth);
        }
        Ok(LayeredMedium { layers, boundaries })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Total stack depth, m.
    pub fn total_depth(&self) -> f64 {
        *self.boundaries.last().unwrap()
    }

    /// Depth of the shallow face of layer `index`.
    pub fn layer_top(&self, index: usize) -> f64 {
        self.boundaries[index]
    }

    /// Index of the layer containing `depth`. Interface depths belong to the
    /// shallower layer's deep boundary, i.e. layer `l` owns the half-open
    /// interval `(top_l, bottom_l]`, except depth 0 which belongs to layer 0.
    pub fn layer_of_depth(&self, depth: f64) -> Result<usize> {
        if !(0.0..=self.total_depth()).contains(&depth) {
            return Err(Error::config(format!(
                "depth {depth} m outside medium [0, {}]",
                self.total_depth()
            )));
        }
        if depth == 0.0 {
            return Ok(0);
        }
        // First layer whose deep boundary is >= depth.
        let idx = self.boundaries[1..].partition_point(|&b| b < depth);
        Ok(idx.min(self.layers.len() - 1))
    }

    /// Prefix of the stack reaching exactly to `depth`: full layers above,
    /// the final layer truncated. Used for per-voxel ray paths, impedance
    /// products, and dispersion sums, which only involve material between
    /// the face and the voxel.
    pub fn truncate_to_depth(&self, depth: f64) -> Result<LayeredMedium> {
        let depth = depth.min(self.total_depth());
        let last = self.layer_of_depth(depth)?;
        let mut layers: Vec<Layer> = self.layers[..=last].to_vec();
        let partial = depth - self.boundaries[last];
        if partial > 0.0 {
            layers[last].thickness = partial;
        } else if last > 0 {
            // Depth coincides with the top of `last`; drop the empty slab.
            layers.pop();
        } else {
            // Degenerate zero-depth request: keep a hair of layer 0 so the
            // stack stays valid; delays through it are negligible.
            layers[0].thickness = f64::MIN_POSITIVE;
        }
        LayeredMedium::new(layers)
    }
}

/// Transmitter, receiver array, and the fluid the transducers sit in.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    /// Transmitter position (on the face plane).
    pub transmitter: Point,
    /// Transmitter pointing angle, radians; positive tilts toward +height.
    pub pointing_angle: f64,
    /// Receiver positions, all on the same face plane as the transmitter.
    pub receivers: Vec<Point>,
    /// Acoustic speed of the embedding fluid, m/s.
    pub embedding_speed: f64,
    /// Attenuation of the embedding fluid, s/m.
    pub embedding_attenuation: f64,
}

impl ArrayGeometry {
    pub fn new(
        transmitter: Point,
        pointing_angle: f64,
        receivers: Vec<Point>,
        embedding_speed: f64,
        embedding_attenuation: f64,
    ) -> Result<Self> {
        let geom = ArrayGeometry {
            transmitter,
            pointing_angle,
            receivers,
            embedding_speed,
            embedding_attenuation,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn n_receivers(&self) -> usize {
        self.receivers.len()
    }

    /// Mean of the receiver positions.
    pub fn receiver_center(&self) -> Point {
        let n = self.receivers.len() as f64;
        Point::new(
            self.receivers.iter().map(|r| r.depth).sum::<f64>() / n,
            self.receivers.iter().map(|r| r.height).sum::<f64>() / n,
        )
    }

    /// Reference point of the sensor assembly: midpoint between the
    /// transmitter and the receiver-array center.
    pub fn assembly_reference(&self) -> Point {
        let rc = self.receiver_center();
        Point::new(
            0.5 * (self.transmitter.depth + rc.depth),
            0.5 * (self.transmitter.height + rc.height),
        )
    }

    fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.receivers.is_empty() {
            errs.push("geometry must have at least one receiver".to_string());
        }
        if !self.pointing_angle.is_finite()
            || self.pointing_angle.abs() >= std::f64::consts::FRAC_PI_2
        {
            errs.push(format!(
                "pointing angle must be finite with |angle| < pi/2, got {}",
                self.pointing_angle
            ));
        }
        for (j, r) in self.receivers.iter().enumerate() {
            if (r.depth - self.transmitter.depth).abs() > 1e-12 {
                errs.push(format!(
                    "receiver {j} depth {} differs from transmitter face depth {}",
                    r.depth, self.transmitter.depth
                ));
            }
        }
        if !(self.embedding_speed > 0.0) {
            errs.push(format!("embedding speed must be > 0, got {}", self.embedding_speed));
        }
        if !(self.embedding_attenuation >= 0.0) {
            errs.push(format!(
                "embedding attenuation must be >= 0, got {}",
                self.embedding_attenuation
            ));
        }
        if errs.is_empty() { Ok(()) } else { Err(Error::Config(errs)) }
    }
}

/// Rectangular voxel grid for the reconstructed cross-section.
///
/// Index mapping is row-major with the column as the depth coordinate:
/// `v = row * cols + col`, voxel center at
/// `origin + ((col + 1/2) * pitch, (row + 1/2) * pitch)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    /// Height samples.
    pub rows: usize,
    /// Depth samples.
    pub cols: usize,
    /// Square voxel side, m.
    pub pitch: f64,
    /// Shallow/low corner of the grid (not a voxel center).
    pub origin: Point,
}

impl ImageGrid {
    pub fn new(rows: usize, cols: usize, pitch: f64, origin: Point) -> Result<Self> {
        let mut errs = Vec::new();
        if rows == 0 || cols == 0 {
            errs.push(format!("grid must have rows >= 1 and cols >= 1, got {rows}x{cols}"));
        }
        if !(pitch > 0.0) {
            errs.push(format!("grid pitch must be > 0, got {pitch}"));
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        Ok(ImageGrid { rows, cols, pitch, origin })
    }

    pub fn n_voxels(&self) -> usize {
        self.rows * self.cols
    }

    /// Depth span covered by the grid, m.
    pub fn depth_extent(&self) -> f64 {
        self.cols as f64 * self.pitch
    }

    /// Height span covered by the grid, m.
    pub fn height_extent(&self) -> f64 {
        self.rows as f64 * self.pitch
    }

    /// Deepest coordinate covered by the grid.
    pub fn max_depth(&self) -> f64 {
        self.origin.depth + self.depth_extent()
    }

    pub fn index_of(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.rows && col < self.cols);
        row * self.cols + col
    }

    pub fn row_col(&self, v: usize) -> (usize, usize) {
        (v / self.cols, v % self.cols)
    }

    /// Physical center of voxel `v`.
    pub fn voxel_center(&self, v: usize) -> Result<Point> {
        if v >= self.n_voxels() {
            return Err(Error::Shape(format!(
                "voxel index {v} out of range for {}x{} grid",
                self.rows, self.cols
            )));
        }
        let (row, col) = self.row_col(v);
        Ok(Point::new(
            self.origin.depth + (col as f64 + 0.5) * self.pitch,
            self.origin.height + (row as f64 + 0.5) * self.pitch,
        ))
    }

    /// Index of the voxel whose center is nearest to `p`, or `None` when `p`
    /// falls outside the grid.
    pub fn nearest_voxel(&self, p: &Point) -> Option<usize> {
        let fc = (p.depth - self.origin.depth) / self.pitch - 0.5;
        let fr = (p.height - self.origin.height) / self.pitch - 0.5;
        let col = fc.round();
        let row = fr.round();
        if col < 0.0 || row < 0.0 || col >= self.cols as f64 || row >= self.rows as f64 {
            return None;
        }
        Some(self.index_of(row as usize, col as usize))
    }

    /// Column whose voxel centers are nearest to `depth` (clamped to range).
    pub fn nearest_col(&self, depth: f64) -> usize {
        let fc = ((depth - self.origin.depth) / self.pitch - 0.5).round();
        (fc.max(0.0) as usize).min(self.cols - 1)
    }

    /// Row whose voxel centers are nearest to `height` (clamped to range).
    pub fn nearest_row(&self, height: f64) -> usize {
        let fr = ((height - self.origin.height) / self.pitch - 0.5).round();
        (fr.max(0.0) as usize).min(self.rows - 1)
    }

    /// Center depth of column `col`.
    pub fn col_depth(&self, col: usize) -> f64 {
        self.origin.depth + (col as f64 + 0.5) * self.pitch
    }

    /// Center height of row `row`.
    pub fn row_height(&self, row: usize) -> f64 {
        self.origin.height + (row as f64 + 0.5) * self.pitch
    }
}

/// Check that the medium reaches exactly to the deep edge of the grid,
/// within one voxel pitch. Run at configuration load.
pub fn validate_medium_grid(medium: &LayeredMedium, grid: &ImageGrid) -> Result<()> {
    let diff = (medium.total_depth() - grid.max_depth()).abs();
    if diff > grid.pitch {
        return Err(Error::config(format!(
            "medium depth {:.4} m does not match grid max depth {:.4} m (tolerance one pitch = {} m)",
            medium.total_depth(),
            grid.max_depth(),
            grid.pitch
        )));
    }
    Ok(())
}
