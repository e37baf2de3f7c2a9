//! Refraction chains, travel times, and dispersion exponents through the
//! layered medium.
//!
//! For a voxel at depth `z` only the stack between the transducer face and
//! `z` matters, so each leg is traced through a truncated medium. The
//! departure (or arrival) angle is recovered from the monotone relationship
//! between seed angle and total vertical offset by half-interval search, and
//! the per-layer delays follow in closed form from the angle chain.

use crate::error::{Error, Result};
use crate::media::{ArrayGeometry, ImageGrid, LayeredMedium};
use rayon::prelude::*;

/// Seed end of a Snell recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Seeded at the face-side layer (layer 0), recursing deeper.
    Outbound,
    /// Seeded at the deepest layer, recursing back toward the face.
    Return,
}

/// Per-layer propagation angles, index 0 = layer nearest the face.
///
/// All chains satisfy Snell constancy: `sin(theta_l) / c_l` is the same for
/// every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleChain {
    pub angles: Vec<f64>,
}

impl AngleChain {
    /// Angle at the face-side layer.
    pub fn surface_angle(&self) -> f64 {
        self.angles[0]
    }

    /// Angle at the deepest layer.
    pub fn deep_angle(&self) -> f64 {
        *self.angles.last().unwrap()
    }
}

/// Margin kept between the bisection bracket and the critical angle.
pub const CRITICAL_MARGIN: f64 = 1e-6;

/// Propagate a seed angle through every layer by Snell's law.
///
/// `Outbound` seeds layer 0 and recurses toward the deepest layer; `Return`
/// seeds the deepest layer and recurses toward layer 0. Either way the
/// invariant `sin(theta_l)/c_l = const` holds along the chain.
pub fn snell_chain(medium: &LayeredMedium, seed: f64, direction: Direction) -> Result<AngleChain> {
    let layers = medium.layers();
    let n = layers.len();
    let mut angles = vec![0.0; n];
    let seed_idx = match direction {
        Direction::Outbound => 0,
        Direction::Return => n - 1,
    };
    angles[seed_idx] = seed;
    let snell = seed.sin() / layers[seed_idx].speed;
    let order: Box<dyn Iterator<Item = usize>> = match direction {
        Direction::Outbound => Box::new(1..n),
        Direction::Return => Box::new((0..n - 1).rev()),
    };
    for l in order {
        let s = snell * layers[l].speed;
        if s.abs() > 1.0 {
            return Err(Error::TotalInternalReflection { layer: l, sin_magnitude: s.abs() });
        }
        angles[l] = s.asin();
    }
    Ok(AngleChain { angles })
}

/// Total vertical offset `sum_l thickness_l * tan(theta_l)` accumulated by a
/// ray with the given seed angle. Strictly increasing in the seed over the
/// pre-critical range.
pub fn vertical_reach(medium: &LayeredMedium, seed: f64, direction: Direction) -> Result<f64> {
    let chain = snell_chain(medium, seed, direction)?;
    Ok(reach_of_chain(medium, &chain))
}

/// Vertical offset of an already-computed chain.
pub fn reach_of_chain(medium: &LayeredMedium, chain: &AngleChain) -> f64 {
    medium
        .layers()
        .iter()
        .zip(&chain.angles)
        .map(|(layer, &theta)| layer.thickness * theta.tan())
        .sum()
}

/// Largest seed angle for which no layer goes super-critical.
pub fn critical_angle(medium: &LayeredMedium, direction: Direction) -> f64 {
    let layers = medium.layers();
    let seed_speed = match direction {
        Direction::Outbound => layers[0].speed,
        Direction::Return => layers[layers.len() - 1].speed,
    };
    let max_speed = layers.iter().map(|l| l.speed).fold(f64::MIN, f64::max);
    if max_speed <= seed_speed {
        std::f64::consts::FRAC_PI_2
    } else {
        (seed_speed / max_speed).asin()
    }
}

/// Solve for the seed angle whose vertical reach equals `dz`, by bisection
/// on the monotone reach function. Negative `dz` is handled by symmetry:
/// the solved angle is negated.
///
/// `tol_z` is the guaranteed residual bound in the reach, meters. The
/// bracket is halved until it collapses rather than stopping at `tol_z`:
/// the extra handful of iterations is free, and an early exit would leave
/// an angle error that perturbs delays at first order, which downstream
/// consistency checks between independently traced paths would see.
pub fn solve_angle(
    medium: &LayeredMedium,
    dz: f64,
    direction: Direction,
    tol_z: f64,
) -> Result<f64> {
    if dz == 0.0 {
        return Ok(0.0);
    }
    let target = dz.abs();
    let hi = critical_angle(medium, direction) - CRITICAL_MARGIN;
    let max_reach = vertical_reach(medium, hi, direction)?;
    if target > max_reach {
        return Err(Error::UnreachableTarget { target_m: target, max_reach_m: max_reach });
    }
    let mut lo = 0.0f64;
    let mut hi = hi;
    while hi - lo > 1e-14 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let reach = vertical_reach(medium, mid, direction)?;
        if reach < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let angle = 0.5 * (lo + hi);
    let residual = (vertical_reach(medium, angle, direction)? - target).abs();
    if residual > tol_z {
        return Err(Error::Numerical(format!(
            "bisection residual {residual:.3e} m exceeds tolerance {tol_z:.3e} m"
        )));
    }
    Ok(angle.copysign(dz))
}

/// Per-layer traversal times `thickness_l * sqrt(1 + tan^2(theta_l)) / c_l`
/// for the layers of `medium` along `chain`.
pub fn layer_delays(medium: &LayeredMedium, chain: &AngleChain) -> Vec<f64> {
    medium
        .layers()
        .iter()
        .zip(&chain.angles)
        .map(|(layer, &theta)| {
            layer.thickness * (1.0 + theta.tan().powi(2)).sqrt() / layer.speed
        })
        .collect()
}

/// One traced leg: total delay, accumulated dispersion exponent, and the
/// angle at the face-side layer.
#[derive(Debug, Clone, Copy)]
struct Leg {
    delay: f64,
    dispersion: f64,
    surface_angle: f64,
}

/// Trace one leg through `medium` for a vertical offset `dz`, seeded at the
/// end given by `direction`.
fn trace_leg(medium: &LayeredMedium, dz: f64, direction: Direction, tol_z: f64) -> Result<Leg> {
    let seed = solve_angle(medium, dz, direction, tol_z)?;
    let chain = snell_chain(medium, seed.abs(), direction)?;
    let delays = layer_delays(medium, &chain);
    let delay: f64 = delays.iter().sum();
    let dispersion: f64 = medium
        .layers()
        .iter()
        .zip(&delays)
        .map(|(layer, &t)| layer.speed * layer.attenuation * t)
        .sum();
    Ok(Leg { delay, dispersion, surface_angle: chain.surface_angle().copysign(if dz == 0.0 { 1.0 } else { dz }) })
}

/// Round-trip timing entry for one (voxel, receiver) pair.
#[derive(Debug, Clone, Copy)]
pub struct DelayEntry {
    /// Round-trip group delay, s.
    pub delay: f64,
    /// Round-trip dispersion exponent (multiplies |f| in Hz), s.
    pub dispersion: f64,
    /// Amplitude factor: apodization times interface transmission products.
    /// Zero until filled by the system-model stage.
    pub amplitude: f64,
    /// Outbound departure angle at the face, signed toward +height.
    pub launch_angle: f64,
    /// Return angle at the face (at the receiver), signed toward +height.
    pub return_angle: f64,
    /// False when either leg exceeds the critical angle or the reach.
    pub reachable: bool,
}

impl DelayEntry {
    fn unreachable() -> Self {
        DelayEntry {
            delay: 0.0,
            dispersion: 0.0,
            amplitude: 0.0,
            launch_angle: 0.0,
            return_angle: 0.0,
            reachable: false,
        }
    }
}

/// Dense table of [`DelayEntry`] for every (voxel, receiver) pair.
#[derive(Debug, Clone)]
pub struct DelayTable {
    entries: Vec<DelayEntry>,
    n_voxels: usize,
    n_receivers: usize,
}

impl DelayTable {
    pub fn entry(&self, voxel: usize, receiver: usize) -> &DelayEntry {
        &self.entries[voxel * self.n_receivers + receiver]
    }

    pub fn entry_mut(&mut self, voxel: usize, receiver: usize) -> &mut DelayEntry {
        &mut self.entries[voxel * self.n_receivers + receiver]
    }

    pub fn n_voxels(&self) -> usize {
        self.n_voxels
    }

    pub fn n_receivers(&self) -> usize {
        self.n_receivers
    }

    pub fn entries(&self) -> &[DelayEntry] {
        &self.entries
    }

    /// Largest dispersion exponent over reachable entries.
    pub fn max_dispersion(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.reachable)
            .map(|e| e.dispersion)
            .fold(0.0, f64::max)
    }
}

/// Default sub-voxel bisection tolerance: one hundredth of the grid pitch.
pub fn default_reach_tolerance(grid: &ImageGrid) -> f64 {
    grid.pitch / 100.0
}

/// Build the delay table for every (voxel, receiver) pair.
///
/// For each voxel the outbound leg runs from the transmitter height to the
/// voxel height and each return leg from the voxel height to a receiver
/// height, both through the stack truncated at the voxel depth. Pairs beyond
/// the critical angle are flagged unreachable rather than failing: the
/// collimated beam makes them negligible and they receive empty columns.
pub fn delay_table(
    medium: &LayeredMedium,
    geometry: &ArrayGeometry,
    grid: &ImageGrid,
    tol_z: f64,
) -> Result<DelayTable> {
    let n_voxels = grid.n_voxels();
    let n_receivers = geometry.n_receivers();
    let entries: Vec<DelayEntry> = (0..n_voxels)
        .into_par_iter()
        .map(|v| {
            let center = grid.voxel_center(v).expect("index in range");
            let mut row = vec![DelayEntry::unreachable(); n_receivers];
            let trunc = match medium.truncate_to_depth(center.depth) {
                Ok(t) => t,
                Err(_) => return row,
            };
            let out = match trace_leg(
                &trunc,
                center.height - geometry.transmitter.height,
                Direction::Outbound,
                tol_z,
            ) {
                Ok(leg) => leg,
                Err(_) => return row,
            };
            for (j, receiver) in geometry.receivers.iter().enumerate() {
                let ret = match trace_leg(
                    &trunc,
                    receiver.height - center.height,
                    Direction::Return,
                    tol_z,
                ) {
                    Ok(leg) => leg,
                    Err(_) => continue,
                };
                row[j] = DelayEntry {
                    delay: out.delay + ret.delay,
                    dispersion: out.dispersion + ret.dispersion,
                    amplitude: 0.0,
                    launch_angle: out.surface_angle,
                    return_angle: ret.surface_angle,
                    reachable: true,
                };
            }
            row
        })
        .flatten()
        .collect();
    Ok(DelayTable { entries, n_voxels, n_receivers })
}
