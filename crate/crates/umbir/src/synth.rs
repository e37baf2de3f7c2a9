//! Synthetic phantoms and forward-model measurement generation.
//!
//! Two routes produce data. `synthesize` applies the assembled sparse
//! system, so its output lies exactly in the model's range. For end-to-end
//! tests that should not invert the very operator that made the data,
//! `synthesize_offgrid` refines each phantom voxel into a sub-grid of point
//! scatterers and accumulates their responses spectrally, with exact
//! per-point dispersion exponents and exact (sub-sample) delays; the sparse
//! assembly path, with its windowing, kernel interpolation, and dispersion
//! quantization, is never touched.

use crate::error::{Error, Result};
use crate::media::{ArrayGeometry, ImageGrid, LayeredMedium, Point};
use crate::pulse::{make_pulse, PulseSpec};
use crate::raypath::{delay_table, default_reach_tolerance};
use crate::system::{apodization, fill_amplitudes, BeamParams, MultiFreqSystem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

/// Concrete-cylinder back wall depth, m.
pub const CC_WALL_DEPTH: f64 = 0.1885;
/// Concrete-cylinder wall depth within the notch, m (50 mm deeper).
pub const CC_NOTCH_WALL_DEPTH: f64 = 0.2385;
/// Angular extent of the notch, radians.
pub const CC_NOTCH_ANGLE: f64 = std::f64::consts::FRAC_PI_4;
/// Granite-block defect range from the borehole center, m.
pub const GB_DEFECT_RANGE: f64 = 0.21;

/// Built-in phantom profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomProfile {
    /// Back wall at 18.85 cm across the full height.
    CcNoNotch,
    /// Back wall at 23.85 cm within the notch height band, 18.85 cm outside.
    CcNotch,
    /// Point defect at 21 cm.
    GbDefect,
    /// Three isolated point scatterers.
    PointTargets,
}

/// A reflectivity image with its named features.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub reflectivity: Vec<f64>,
    pub grid: ImageGrid,
    /// Wall depth per row (columns of the wall line), when the profile has one.
    pub wall_col_by_row: Option<Vec<usize>>,
    pub back_wall_depth: Option<f64>,
    /// Height band of the notch, when present.
    pub notch_band: Option<(f64, f64)>,
    pub defects: Vec<Point>,
}

impl Phantom {
    /// Voxel indices with nonzero reflectivity.
    pub fn support(&self) -> Vec<usize> {
        self.reflectivity
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Measurement noise: white Gaussian with the given standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec { sigma: 0.0, seed: 0 }
    }
}

fn feature_inside(grid: &ImageGrid, depth: f64, what: &str) -> Result<()> {
    if depth < grid.origin.depth || depth > grid.max_depth() {
        return Err(Error::config(format!(
            "{what} at depth {depth} m lies outside the grid [{}, {}]",
            grid.origin.depth,
            grid.max_depth()
        )));
    }
    Ok(())
}

/// Build a named phantom on the grid. Walls have amplitude 1 and are one
/// voxel thick at the nearest column; point features are single voxels.
pub fn make_phantom(profile: PhantomProfile, grid: &ImageGrid) -> Result<Phantom> {
    let mut x = vec![0.0; grid.n_voxels()];
    match profile {
        PhantomProfile::CcNoNotch => {
            feature_inside(grid, CC_WALL_DEPTH, "back wall")?;
            let col = grid.nearest_col(CC_WALL_DEPTH);
            let mut wall = Vec::with_capacity(grid.rows);
            for row in 0..grid.rows {
                x[grid.index_of(row, col)] = 1.0;
                wall.push(col);
            }
            Ok(Phantom {
                reflectivity: x,
                grid: *grid,
                wall_col_by_row: Some(wall),
                back_wall_depth: Some(grid.col_depth(col)),
                notch_band: None,
                defects: vec![],
            })
        }
        PhantomProfile::CcNotch => {
            feature_inside(grid, CC_WALL_DEPTH, "back wall")?;
            feature_inside(grid, CC_NOTCH_WALL_DEPTH, "notch wall")?;
            let wall_col = grid.nearest_col(CC_WALL_DEPTH);
            let notch_col = grid.nearest_col(CC_NOTCH_WALL_DEPTH);
            // The notch subtends a fixed angle of the cylinder; its height
            // footprint in one cross-section is the arc length at the wall
            // radius, centered mid-grid.
            let half_band = 0.5 * CC_NOTCH_ANGLE * CC_WALL_DEPTH;
            let mid = grid.origin.height + 0.5 * grid.height_extent();
            let mut wall = Vec::with_capacity(grid.rows);
            for row in 0..grid.rows {
                let h = grid.row_height(row);
                let col = if (h - mid).abs() <= half_band { notch_col } else { wall_col };
                x[grid.index_of(row, col)] = 1.0;
                wall.push(col);
            }
            Ok(Phantom {
                reflectivity: x,
                grid: *grid,
                wall_col_by_row: Some(wall),
                back_wall_depth: Some(grid.col_depth(wall_col)),
                notch_band: Some((mid - half_band, mid + half_band)),
                defects: vec![],
            })
        }
        PhantomProfile::GbDefect => {
            feature_inside(grid, GB_DEFECT_RANGE, "defect")?;
            let col = grid.nearest_col(GB_DEFECT_RANGE);
            let row = grid.rows / 2;
            x[grid.index_of(row, col)] = 1.0;
            let p = Point::new(grid.col_depth(col), grid.row_height(row));
            Ok(Phantom {
                reflectivity: x,
                grid: *grid,
                wall_col_by_row: None,
                back_wall_depth: None,
                notch_band: None,
                defects: vec![p],
            })
        }
        PhantomProfile::PointTargets => {
            let positions = [
                (grid.rows / 4, grid.cols / 3),
                (grid.rows / 2, 2 * grid.cols / 3),
                (3 * grid.rows / 4, grid.cols / 2),
            ];
            let mut defects = Vec::new();
            for (row, col) in positions {
                x[grid.index_of(row, col)] = 1.0;
                defects.push(Point::new(grid.col_depth(col), grid.row_height(row)));
            }
            Ok(Phantom {
                reflectivity: x,
                grid: *grid,
                wall_col_by_row: None,
                back_wall_depth: None,
                notch_band: None,
                defects,
            })
        }
    }
}

fn add_noise(y: &mut [f64], noise: &NoiseSpec) {
    if noise.sigma == 0.0 {
        return;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(noise.seed);
    for v in y.iter_mut() {
        // Box-Muller on ChaCha draws keeps the stream portable.
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        *v += noise.sigma * z;
    }
}

/// Default direct-arrival coefficients: per-receiver amplitudes around
/// `scale`, drawn once from the seed. Models a barrier that only partially
/// blocks the transmitter-to-receiver path.
pub fn default_direct_arrival(n_bands: usize, n_receivers: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..n_bands * n_receivers)
        .map(|_| scale * rng.gen_range(0.5..1.5))
        .collect()
}

/// Matrix-route synthesis: `y_s = A_s x + D_s g_s + w_s` per frequency,
/// stacked frequency-major.
pub fn synthesize(
    phantom: &Phantom,
    system: &MultiFreqSystem,
    g_true: Option<&[f64]>,
    noise: &NoiseSpec,
) -> Result<Vec<f64>> {
    if phantom.reflectivity.len() != system.n_voxels() {
        return Err(Error::Shape(format!(
            "phantom has {} voxels, system expects {}",
            phantom.reflectivity.len(),
            system.n_voxels()
        )));
    }
    let mut y = vec![0.0; system.n_rows()];
    system.forward_a(&phantom.reflectivity, &mut y);
    if let Some(g) = g_true {
        if g.len() != system.g_len() {
            return Err(Error::Shape(format!(
                "direct-arrival vector has {} coefficients, system expects {}",
                g.len(),
                system.g_len()
            )));
        }
        system.forward_d(g, &mut y);
    }
    add_noise(&mut y, noise);
    Ok(y)
}

/// Point scatterer used by the off-grid route.
struct Scatterer {
    position: Point,
    amplitude: f64,
}

/// Subdivide each nonzero phantom voxel into `refinement^2` point
/// scatterers spanning the voxel, amplitudes scaled to preserve the voxel's
/// total reflectivity.
fn refine_phantom(phantom: &Phantom, refinement: usize) -> Vec<Scatterer> {
    let grid = &phantom.grid;
    let r = refinement.max(1);
    let sub = grid.pitch / r as f64;
    let share = 1.0 / (r * r) as f64;
    let mut points = Vec::new();
    for (v, &amp) in phantom.reflectivity.iter().enumerate() {
        if amp == 0.0 {
            continue;
        }
        let (row, col) = grid.row_col(v);
        let d0 = grid.origin.depth + col as f64 * grid.pitch;
        let h0 = grid.origin.height + row as f64 * grid.pitch;
        for i in 0..r {
            for j in 0..r {
                points.push(Scatterer {
                    position: Point::new(
                        d0 + (j as f64 + 0.5) * sub,
                        h0 + (i as f64 + 0.5) * sub,
                    ),
                    amplitude: amp * share,
                });
            }
        }
    }
    points
}

/// Trace one scatterer's legs exactly (no table, no quantization).
fn scatterer_response(
    medium: &LayeredMedium,
    geometry: &ArrayGeometry,
    beam: &BeamParams,
    point: &Point,
    tol_z: f64,
) -> Result<Vec<Option<(f64, f64, f64)>>> {
    use crate::raypath::Direction;
    let trunc = medium.truncate_to_depth(point.depth.min(medium.total_depth()))?;
    let imp = crate::system::impedance_product(&trunc);
    let solve = |dz: f64, direction: Direction| -> Option<(f64, f64, f64)> {
        let seed = crate::raypath::solve_angle(&trunc, dz, direction, tol_z).ok()?;
        let chain = crate::raypath::snell_chain(&trunc, seed.abs(), direction).ok()?;
        let delays = crate::raypath::layer_delays(&trunc, &chain);
        let delay: f64 = delays.iter().sum();
        let gamma: f64 = trunc
            .layers()
            .iter()
            .zip(&delays)
            .map(|(l, &t)| l.speed * l.attenuation * t)
            .sum();
        let angle = chain.surface_angle().copysign(if dz == 0.0 { 1.0 } else { dz });
        Some((delay, gamma, angle))
    };
    let out = solve(point.height - geometry.transmitter.height, Direction::Outbound);
    Ok(geometry
        .receivers
        .iter()
        .map(|receiver| {
            let (out_delay, out_gamma, launch) = out?;
            let (ret_delay, ret_gamma, ret_angle) =
                solve(receiver.height - point.height, Direction::Return)?;
            let phi = apodization(launch, ret_angle, beam);
            Some((
                out_delay + ret_delay,
                out_gamma + ret_gamma,
                phi * imp,
            ))
        })
        .collect())
}

/// Off-grid synthesis: spectral accumulation of exact per-scatterer
/// responses, one trace at a time.
///
/// Per receiver, the trace spectrum accumulates
/// `amp * S(f) * exp(-gamma |f|) * exp(-i 2 pi f (delay - record_start))`
/// over all scatterers plus the direct-arrival terms, then one inverse FFT
/// yields the record. Delays are exact to spectral precision and dispersion
/// exponents are evaluated per scatterer, so none of the sparse-assembly
/// approximations enter.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_offgrid(
    phantom: &Phantom,
    medium: &LayeredMedium,
    geometry: &ArrayGeometry,
    specs: &[PulseSpec],
    beam: &BeamParams,
    g_true: Option<&[f64]>,
    noise: &NoiseSpec,
    refinement: usize,
) -> Result<Vec<f64>> {
    if let Some(g) = g_true {
        if g.len() != specs.len() * geometry.n_receivers() {
            return Err(Error::Shape(format!(
                "direct-arrival vector has {} coefficients, expected {}",
                g.len(),
                specs.len() * geometry.n_receivers()
            )));
        }
    }
    let scatterers = refine_phantom(phantom, refinement);
    let tol_z = default_reach_tolerance(&phantom.grid) / refinement.max(1) as f64;
    // Per-scatterer kinematics are frequency-independent; trace them once.
    let responses: Vec<Vec<Option<(f64, f64, f64)>>> = scatterers
        .iter()
        .map(|s| scatterer_response(medium, geometry, beam, &s.position, tol_z))
        .collect::<Result<Vec<_>>>()?;

    let k = geometry.n_receivers();
    let mut planner = FftPlanner::new();
    let mut out = Vec::new();
    for (s_idx, spec) in specs.iter().enumerate() {
        spec.validate()?;
        let m = spec.record_length;
        let fs = spec.sampling_frequency;
        // Room for the deepest arrival beyond the record end.
        let nfft = (m + spec.support_samples() + 2).next_power_of_two();
        let pulse = make_pulse(spec)?;
        let mut pulse_spectrum: Vec<Complex<f64>> = pulse
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(nfft)
            .collect();
        planner.plan_fft_forward(nfft).process(&mut pulse_spectrum);
        let ifft = planner.plan_fft_inverse(nfft);
        let df = fs / nfft as f64;
        for j in 0..k {
            let mut spectrum = vec![Complex::new(0.0, 0.0); nfft];
            let mut accumulate = |delay: f64, gamma: f64, amp: f64| {
                if amp == 0.0 {
                    return;
                }
                let tau = delay - spec.record_start;
                for bin in 0..=nfft / 2 {
                    let f = bin as f64 * df;
                    let phase = -2.0 * std::f64::consts::PI * f * tau;
                    let w = Complex::from_polar((-gamma * f).exp() * amp, phase);
                    spectrum[bin] += pulse_spectrum[bin] * w;
                }
            };
            for (scatterer, response) in scatterers.iter().zip(&responses) {
                if let Some((delay, gamma, lambda)) = response[j] {
                    accumulate(delay, gamma, scatterer.amplitude * lambda);
                }
            }
            if let Some(g) = g_true {
                let tau = geometry.transmitter.distance(&geometry.receivers[j])
                    / geometry.embedding_speed;
                let gamma = geometry.embedding_attenuation * geometry.embedding_speed * tau;
                accumulate(tau, gamma, g[s_idx * k + j]);
            }
            // Mirror into a conjugate-symmetric spectrum and invert.
            for bin in 1..nfft / 2 {
                spectrum[nfft - bin] = spectrum[bin].conj();
            }
            spectrum[0] = Complex::new(spectrum[0].re, 0.0);
            spectrum[nfft / 2] = Complex::new(spectrum[nfft / 2].re, 0.0);
            ifft.process(&mut spectrum);
            let scale = 1.0 / nfft as f64;
            out.extend(spectrum[..m].iter().map(|c| c.re * scale));
        }
    }
    add_noise(&mut out, noise);
    Ok(out)
}

/// Root-mean-square of a signal.
pub fn rms(y: &[f64]) -> f64 {
    (y.iter().map(|v| v * v).sum::<f64>() / y.len().max(1) as f64).sqrt()
}

/// Noise level achieving the requested signal-to-noise ratio (dB) against a
/// clean reference signal.
pub fn sigma_for_snr(clean: &[f64], snr_db: f64) -> f64 {
    rms(clean) * 10f64.powf(-snr_db / 20.0)
}
