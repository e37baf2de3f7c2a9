//! Sparse forward-model assembly: the system matrix `A`, the direct-arrival
//! basis `D`, amplitude factors, and multi-frequency stacking.
//!
//! `A` is stored column-major with one contiguous row run per receiver band,
//! which is exactly the access pattern coordinate descent needs. Rows are
//! ordered receiver-major then time within one frequency block, and
//! frequency-major across blocks.

use crate::error::{Error, Result};
use crate::media::{ArrayGeometry, ImageGrid, LayeredMedium};
use crate::pulse::{KernelBank, PulseSpec};
use crate::raypath::DelayTable;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Collimated-beam apodization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamParams {
    /// Apodization exponent; larger is more collimated.
    pub beta: f64,
    /// Transmitter pointing angle, radians.
    pub pointing_angle: f64,
}

impl BeamParams {
    pub fn new(beta: f64, pointing_angle: f64) -> Result<Self> {
        if !(beta >= 0.0) {
            return Err(Error::config(format!("beam exponent must be >= 0, got {beta}")));
        }
        Ok(BeamParams { beta, pointing_angle })
    }
}

/// Angular sensitivity `cos^beta(launch - pointing) * cos^2(return)`.
///
/// Clamped to zero when the launch offset passes 90 degrees: a collimated
/// source has no back lobe, and a negative cosine under a fractional
/// exponent would be undefined anyway.
pub fn apodization(launch_angle: f64, return_angle: f64, beam: &BeamParams) -> f64 {
    let c_launch = (launch_angle - beam.pointing_angle).cos();
    if c_launch <= 0.0 {
        return 0.0;
    }
    c_launch.powf(beam.beta) * return_angle.cos().powi(2)
}

/// Round-trip interface transmission product for a stack, times the
/// apodization factor `phi`. For a single layer both products are empty.
///
/// The outbound product crosses each interface going deeper; the return
/// product crosses them coming back.
pub fn transmission_factor(medium: &LayeredMedium, phi: f64) -> f64 {
    phi * impedance_product(medium)
}

/// The bare interface product (no apodization).
pub fn impedance_product(medium: &LayeredMedium) -> f64 {
    let layers = medium.layers();
    let mut product = 1.0;
    for l in 1..layers.len() {
        let zeta_prev = layers[l - 1].impedance;
        let zeta = layers[l].impedance;
        // Outbound crossing into layer l, then the return crossing back out.
        product *= 2.0 * zeta / (zeta_prev + zeta);
        product *= 2.0 * zeta_prev / (zeta_prev + zeta);
    }
    product
}

/// Fill the amplitude factor of every reachable delay-table entry:
/// apodization times the impedance product of the stack truncated at the
/// voxel depth.
pub fn fill_amplitudes(
    table: &mut DelayTable,
    medium: &LayeredMedium,
    grid: &ImageGrid,
    beam: &BeamParams,
) -> Result<()> {
    let n_receivers = table.n_receivers();
    // The truncated stack depends only on the voxel's depth column.
    let mut col_product = vec![0.0f64; grid.cols];
    for (col, slot) in col_product.iter_mut().enumerate() {
        let depth = grid.col_depth(col).min(medium.total_depth());
        *slot = impedance_product(&medium.truncate_to_depth(depth)?);
    }
    for v in 0..grid.n_voxels() {
        let (_, col) = grid.row_col(v);
        for j in 0..n_receivers {
            let entry = table.entry_mut(v, j);
            if !entry.reachable {
                entry.amplitude = 0.0;
                continue;
            }
            let phi = apodization(entry.launch_angle, entry.return_angle, beam);
            entry.amplitude = phi * col_product[col];
        }
    }
    Ok(())
}

/// One contiguous run of nonzeros within a column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    /// First row of the run.
    pub row_start: u32,
    /// Run length.
    pub len: u32,
    /// Offset of the run's first value in the value pool.
    pub offset: usize,
}

/// Column-sparse matrix with contiguous row runs, single-precision values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    /// Band index range of column `i` is `col_ptr[i]..col_ptr[i + 1]`.
    col_ptr: Vec<u32>,
    bands: Vec<Band>,
    values: Vec<f32>,
}

impl SparseMatrix {
    /// Assemble from per-column band lists: `(row_start, values)` runs.
    pub fn from_columns(nrows: usize, ncols: usize, columns: Vec<Vec<(u32, Vec<f32>)>>) -> Result<Self> {
        if columns.len() != ncols {
            return Err(Error::Shape(format!(
                "expected {ncols} columns, got {}",
                columns.len()
            )));
        }
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut bands = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0u32);
        for runs in &columns {
            for (row_start, vals) in runs {
                if *row_start as usize + vals.len() > nrows {
                    return Err(Error::Shape(format!(
                        "band [{row_start}, {}) exceeds {nrows} rows",
                        *row_start as usize + vals.len()
                    )));
                }
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical("non-finite matrix value".to_string()));
                }
                bands.push(Band {
                    row_start: *row_start,
                    len: vals.len() as u32,
                    offset: values.len(),
                });
                values.extend_from_slice(vals);
            }
            col_ptr.push(bands.len() as u32);
        }
        Ok(SparseMatrix { nrows, ncols, col_ptr, bands, values })
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        SparseMatrix {
            nrows,
            ncols,
            col_ptr: vec![0; ncols + 1],
            bands: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Bands of column `i`.
    pub fn column_bands(&self, i: usize) -> impl Iterator<Item = (&Band, &[f32])> {
        let lo = self.col_ptr[i] as usize;
        let hi = self.col_ptr[i + 1] as usize;
        self.bands[lo..hi]
            .iter()
            .map(move |band| (band, &self.values[band.offset..band.offset + band.len as usize]))
    }

    /// `y += scale * A[:, i]`.
    pub fn axpy_column(&self, i: usize, scale: f64, y: &mut [f64]) {
        for (band, vals) in self.column_bands(i) {
            let row = band.row_start as usize;
            for (k, &v) in vals.iter().enumerate() {
                y[row + k] += scale * v as f64;
            }
        }
    }

    /// `A[:, i] . y`.
    pub fn column_dot(&self, i: usize, y: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (band, vals) in self.column_bands(i) {
            let row = band.row_start as usize;
            for (k, &v) in vals.iter().enumerate() {
                acc += v as f64 * y[row + k];
            }
        }
        acc
    }

    /// Squared Euclidean norm of column `i`.
    pub fn column_norm_sq(&self, i: usize) -> f64 {
        let mut acc = 0.0;
        for (_, vals) in self.column_bands(i) {
            for &v in vals {
                acc += (v as f64) * (v as f64);
            }
        }
        acc
    }

    /// `y += A x`.
    pub fn forward(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                self.axpy_column(i, xi, y);
            }
        }
    }

    /// `out += A^T y`.
    pub fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.nrows);
        debug_assert_eq!(out.len(), self.ncols);
        for (i, slot) in out.iter_mut().enumerate() {
            *slot += self.column_dot(i, y);
        }
    }

    /// Scale every stored value by `factor`.
    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v = (*v as f64 * factor) as f32;
        }
    }
}

/// Single-frequency system: reflectivity matrix `A` (`M K x N`), direct
/// arrival basis `D` (`M K x K`, block diagonal), and the acquisition
/// metadata tying them to a measurement block.
#[derive(Debug, Clone)]
pub struct SparseSystem {
    pub a: SparseMatrix,
    pub d: SparseMatrix,
    /// Samples per trace.
    pub n_samples: usize,
    /// Receivers.
    pub n_receivers: usize,
    /// Image voxels.
    pub n_voxels: usize,
    /// The excitation this block was built for.
    pub band: PulseSpec,
}

impl SparseSystem {
    pub fn n_rows(&self) -> usize {
        self.n_samples * self.n_receivers
    }
}

/// Options controlling matrix assembly.
#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    /// Kernel window length, s. `None` selects the default energy rule.
    pub window: Option<f64>,
    /// Oversampling factor for fractional-delay interpolation.
    pub oversample: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { window: None, oversample: crate::pulse::DEFAULT_OVERSAMPLE }
    }
}

/// Build the reflectivity system matrix for one excitation.
///
/// Column `i` holds, for each receiver `j`, the windowed kernel at the
/// pair's dispersion exponent, delayed by the round-trip time and scaled by
/// the amplitude factor. Entries landing outside the record are clipped;
/// unreachable pairs contribute nothing.
pub fn build_a(
    grid: &ImageGrid,
    spec: &PulseSpec,
    table: &DelayTable,
    bank: &KernelBank,
) -> Result<SparseMatrix> {
    spec.validate()?;
    if table.n_voxels() != grid.n_voxels() {
        return Err(Error::Shape(format!(
            "delay table covers {} voxels, grid has {}",
            table.n_voxels(),
            grid.n_voxels()
        )));
    }
    let m = spec.record_length;
    let k = table.n_receivers();
    let n = grid.n_voxels();
    let dt = spec.dt();
    let t0 = bank.t0;
    let columns: Vec<Vec<(u32, Vec<f32>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut runs = Vec::new();
            for j in 0..k {
                let entry = table.entry(i, j);
                if !entry.reachable || entry.amplitude == 0.0 {
                    continue;
                }
                // Rows with 0 <= t_m - delay < t0.
                let lo = ((entry.delay - spec.record_start) / dt).ceil().max(0.0) as usize;
                let hi_f = ((entry.delay + t0 - spec.record_start) / dt).ceil().max(0.0);
                let hi = (hi_f as usize).min(m);
                if lo >= hi {
                    continue;
                }
                let vals: Vec<f32> = (lo..hi)
                    .map(|mm| {
                        let t = spec.sample_time(mm) - entry.delay;
                        (entry.amplitude * bank.value_at(entry.dispersion, t)) as f32
                    })
                    .collect();
                if vals.iter().all(|&v| v == 0.0) {
                    continue;
                }
                runs.push(((j * m + lo) as u32, vals));
            }
            runs
        })
        .collect();
    let a = SparseMatrix::from_columns(m * k, n, columns)?;
    log::debug!(
        "system matrix: {} x {}, {} nonzeros ({:.2}% dense)",
        a.nrows(),
        a.ncols(),
        a.nnz(),
        100.0 * a.nnz() as f64 / (a.nrows() as f64 * a.ncols() as f64)
    );
    Ok(a)
}

/// Build the direct-arrival basis: one column per receiver holding the
/// embedding-fluid kernel delayed by the straight transmitter-receiver
/// time of flight, placed in that receiver's row block.
pub fn build_d(
    geometry: &ArrayGeometry,
    spec: &PulseSpec,
    bank: &KernelBank,
) -> Result<SparseMatrix> {
    spec.validate()?;
    let m = spec.record_length;
    let k = geometry.n_receivers();
    let dt = spec.dt();
    let t0 = bank.t0;
    let mut columns = Vec::with_capacity(k);
    for (j, receiver) in geometry.receivers.iter().enumerate() {
        let tau = geometry.transmitter.distance(receiver) / geometry.embedding_speed;
        let gamma = geometry.embedding_attenuation * geometry.embedding_speed * tau;
        let lo = ((tau - spec.record_start) / dt).ceil().max(0.0) as usize;
        let hi = (((tau + t0 - spec.record_start) / dt).ceil().max(0.0) as usize).min(m);
        let mut runs = Vec::new();
        if lo < hi {
            let vals: Vec<f32> = (lo..hi)
                .map(|mm| bank.value_at(gamma, spec.sample_time(mm) - tau) as f32)
                .collect();
            if vals.iter().any(|&v| v != 0.0) {
                runs.push(((j * m + lo) as u32, vals));
            }
        }
        columns.push(runs);
    }
    SparseMatrix::from_columns(m * k, k, columns)
}

/// Build the complete single-frequency system (delay table shared by both
/// matrices; the bank covers the largest dispersion either needs).
pub fn build_system(
    medium: &LayeredMedium,
    geometry: &ArrayGeometry,
    grid: &ImageGrid,
    spec: &PulseSpec,
    beam: &BeamParams,
    table: &DelayTable,
    options: &BuildOptions,
) -> Result<SparseSystem> {
    let t0 = match options.window {
        Some(t0) => t0,
        None => crate::pulse::default_window(spec)?,
    };
    let gamma_direct = geometry
        .receivers
        .iter()
        .map(|r| {
            geometry.embedding_attenuation * geometry.transmitter.distance(r)
        })
        .fold(0.0, f64::max);
    let gamma_max = table.max_dispersion().max(gamma_direct);
    let bank = KernelBank::build(spec, t0, gamma_max, options.oversample)?;
    let mut table = table.clone();
    fill_amplitudes(&mut table, medium, grid, beam)?;
    let a = build_a(grid, spec, &table, &bank)?;
    let d = build_d(geometry, spec, &bank)?;
    Ok(SparseSystem {
        a,
        d,
        n_samples: spec.record_length,
        n_receivers: geometry.n_receivers(),
        n_voxels: grid.n_voxels(),
        band: *spec,
    })
}

/// Vertically stacked multi-frequency system. Measurement rows are ordered
/// frequency-major, then receiver, then time; the per-frequency `A` blocks
/// stack vertically and the `D` blocks sit on the diagonal.
#[derive(Debug, Clone)]
pub struct MultiFreqSystem {
    pub blocks: Vec<SparseSystem>,
}

impl From<SparseSystem> for MultiFreqSystem {
    fn from(system: SparseSystem) -> Self {
        MultiFreqSystem { blocks: vec![system] }
    }
}

impl MultiFreqSystem {
    pub fn n_bands(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.blocks[0].n_voxels
    }

    /// Total stacked measurement length.
    pub fn n_rows(&self) -> usize {
        self.blocks.iter().map(|b| b.n_rows()).sum()
    }

    /// Length of the stacked direct-arrival coefficient vector.
    pub fn g_len(&self) -> usize {
        self.blocks.iter().map(|b| b.n_receivers).sum()
    }

    /// Row offset of frequency block `s`.
    pub fn row_offset(&self, s: usize) -> usize {
        self.blocks[..s].iter().map(|b| b.n_rows()).sum()
    }

    /// Offset of block `s` within the stacked `g` vector.
    pub fn g_offset(&self, s: usize) -> usize {
        self.blocks[..s].iter().map(|b| b.n_receivers).sum()
    }

    /// `y += A x` over the stacked system.
    pub fn forward_a(&self, x: &[f64], y: &mut [f64]) {
        let mut off = 0;
        for block in &self.blocks {
            block.a.forward(x, &mut y[off..off + block.n_rows()]);
            off += block.n_rows();
        }
    }

    /// `y += D g` over the stacked block-diagonal basis.
    pub fn forward_d(&self, g: &[f64], y: &mut [f64]) {
        let mut row_off = 0;
        let mut g_off = 0;
        for block in &self.blocks {
            block
                .d
                .forward(&g[g_off..g_off + block.n_receivers], &mut y[row_off..row_off + block.n_rows()]);
            row_off += block.n_rows();
            g_off += block.n_receivers;
        }
    }

    /// `out += A^T y` over the stacked system.
    pub fn adjoint_a(&self, y: &[f64], out: &mut [f64]) {
        let mut off = 0;
        for block in &self.blocks {
            block.a.adjoint(&y[off..off + block.n_rows()], out);
            off += block.n_rows();
        }
    }

    /// `out += D^T y` over the stacked basis.
    pub fn adjoint_d(&self, y: &[f64], out: &mut [f64]) {
        let mut row_off = 0;
        let mut g_off = 0;
        for block in &self.blocks {
            block
                .d
                .adjoint(&y[row_off..row_off + block.n_rows()], &mut out[g_off..g_off + block.n_receivers]);
            row_off += block.n_rows();
            g_off += block.n_receivers;
        }
    }

    /// Dot of stacked column `i` of `A` with a stacked vector.
    pub fn a_column_dot(&self, i: usize, y: &[f64]) -> f64 {
        let mut acc = 0.0;
        let mut off = 0;
        for block in &self.blocks {
            acc += block.a.column_dot(i, &y[off..off + block.n_rows()]);
            off += block.n_rows();
        }
        acc
    }

    /// Squared norm of stacked column `i` of `A`.
    pub fn a_column_norm_sq(&self, i: usize) -> f64 {
        self.blocks.iter().map(|b| b.a.column_norm_sq(i)).sum()
    }

    /// `y += scale * A[:, i]` over the stacked system.
    pub fn a_axpy_column(&self, i: usize, scale: f64, y: &mut [f64]) {
        let mut off = 0;
        for block in &self.blocks {
            block.a.axpy_column(i, scale, &mut y[off..off + block.n_rows()]);
            off += block.n_rows();
        }
    }

    /// Residual `y - A x - D g`.
    pub fn residual(&self, y: &[f64], x: &[f64], g: &[f64]) -> Vec<f64> {
        let mut r = y.to_vec();
        let mut ax = vec![0.0; y.len()];
        self.forward_a(x, &mut ax);
        self.forward_d(g, &mut ax);
        for (ri, axi) in r.iter_mut().zip(&ax) {
            *ri -= axi;
        }
        r
    }

    /// Restrict to a subset of frequency blocks (for single-frequency runs).
    pub fn select_bands(&self, bands: &[usize]) -> Result<MultiFreqSystem> {
        let mut blocks = Vec::with_capacity(bands.len());
        for &s in bands {
            if s >= self.blocks.len() {
                return Err(Error::Shape(format!(
                    "frequency index {s} out of range (have {})",
                    self.blocks.len()
                )));
            }
            blocks.push(self.blocks[s].clone());
        }
        if blocks.is_empty() {
            return Err(Error::Shape("at least one frequency block required".to_string()));
        }
        Ok(MultiFreqSystem { blocks })
    }
}

/// Stack per-frequency systems with their measurement blocks.
///
/// All systems must share the image grid; each measurement block must match
/// its system's row count. Returns the stacked system and the concatenated
/// measurement vector, ordered frequency-major.
pub fn stack_multifrequency(
    systems: Vec<SparseSystem>,
    measurements: Vec<Vec<f64>>,
) -> Result<(MultiFreqSystem, Vec<f64>)> {
    if systems.is_empty() {
        return Err(Error::Shape("no systems to stack".to_string()));
    }
    if systems.len() != measurements.len() {
        return Err(Error::Shape(format!(
            "{} systems but {} measurement blocks",
            systems.len(),
            measurements.len()
        )));
    }
    let n = systems[0].n_voxels;
    for (s, (system, block)) in systems.iter().zip(&measurements).enumerate() {
        if system.n_voxels != n {
            return Err(Error::Shape(format!(
                "system {s} has {} voxels, expected {n}",
                system.n_voxels
            )));
        }
        if block.len() != system.n_rows() {
            return Err(Error::Shape(format!(
                "measurement block {s} has {} samples, system expects {}",
                block.len(),
                system.n_rows()
            )));
        }
    }
    let y = measurements.concat();
    Ok((MultiFreqSystem { blocks: systems }, y))
}

/// Rescale block `s` of a stacked system and its measurements by
/// `sigma / sigma_s`, turning per-frequency noise levels into the single
/// noise scale the solver uses.
pub fn apply_band_weights(
    system: &mut MultiFreqSystem,
    y: &mut [f64],
    sigma: f64,
    band_sigmas: &[f64],
) -> Result<()> {
    if band_sigmas.len() != system.n_bands() {
        return Err(Error::Shape(format!(
            "{} band sigmas for {} bands",
            band_sigmas.len(),
            system.n_bands()
        )));
    }
    for (s, &sigma_s) in band_sigmas.iter().enumerate() {
        if !(sigma_s > 0.0) {
            return Err(Error::config(format!("band sigma must be > 0, got {sigma_s}")));
        }
        let w = sigma / sigma_s;
        let off = system.row_offset(s);
        let rows = system.blocks[s].n_rows();
        system.blocks[s].a.scale(w);
        system.blocks[s].d.scale(w);
        for yi in &mut y[off..off + rows] {
            *yi *= w;
        }
    }
    Ok(())
}
