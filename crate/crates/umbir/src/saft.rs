//! Multi-layer delay-and-sum (SAFT) baseline.
//!
//! Shares the refracted delay tables with the model-based path but inverts
//! nothing: each voxel just sums the (optionally envelope-detected) traces
//! sampled at the round-trip delay, weighted by the apodization factor.

use crate::error::{Error, Result};
use crate::media::ImageGrid;
use crate::pulse::PulseSpec;
use crate::raypath::DelayTable;
use crate::system::{apodization, BeamParams};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Delay-and-sum variant switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaftConfig {
    /// Sum the magnitude of the analytic signal instead of the raw trace.
    pub envelope: bool,
    /// Weight each contribution by the apodization factor.
    pub apodize: bool,
}

impl Default for SaftConfig {
    fn default() -> Self {
        SaftConfig { envelope: true, apodize: true }
    }
}

/// Magnitude of the analytic signal (Hilbert envelope) of a real trace.
pub fn envelope(trace: &[f64]) -> Vec<f64> {
    let n = trace.len();
    if n < 2 {
        return trace.iter().map(|v| v.abs()).collect();
    }
    let m = n.next_power_of_two();
    let mut buf: Vec<Complex<f64>> = trace
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(m)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(m).process(&mut buf);
    // Analytic signal: keep DC and Nyquist, double positives, zero negatives.
    for bin in buf.iter_mut().take(m / 2).skip(1) {
        *bin *= 2.0;
    }
    for bin in buf.iter_mut().skip(m / 2 + 1) {
        *bin = Complex::new(0.0, 0.0);
    }
    planner.plan_fft_inverse(m).process(&mut buf);
    let scale = 1.0 / m as f64;
    buf[..n].iter().map(|c| (c * scale).norm()).collect()
}

/// Delay-and-sum image from one frequency block of measurements.
///
/// `y` holds `K` traces of `M` samples, receiver-major. For each voxel
/// `x(v) = sum_j w_j(v) * trace_j(delay_j(v))`, the trace sampled by linear
/// interpolation; delays outside the record and unreachable pairs
/// contribute nothing.
pub fn saft_reconstruct(
    y: &[f64],
    spec: &PulseSpec,
    table: &DelayTable,
    beam: &BeamParams,
    grid: &ImageGrid,
    config: &SaftConfig,
) -> Result<Vec<f64>> {
    spec.validate()?;
    let m = spec.record_length;
    let k = table.n_receivers();
    if y.len() != m * k {
        return Err(Error::Shape(format!(
            "expected {} samples ({k} receivers x {m}), got {}",
            m * k,
            y.len()
        )));
    }
    if table.n_voxels() != grid.n_voxels() {
        return Err(Error::Shape("delay table does not match the grid".to_string()));
    }
    let traces: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let slice = &y[j * m..(j + 1) * m];
            if config.envelope { envelope(slice) } else { slice.to_vec() }
        })
        .collect();
    let fs = spec.sampling_frequency;
    let image: Vec<f64> = (0..grid.n_voxels())
        .into_par_iter()
        .map(|v| {
            let mut acc = 0.0;
            for (j, trace) in traces.iter().enumerate() {
                let entry = table.entry(v, j);
                if !entry.reachable {
                    continue;
                }
                let idx = (entry.delay - spec.record_start) * fs;
                if idx < 0.0 || idx >= (m - 1) as f64 {
                    continue;
                }
                let i0 = idx as usize;
                let frac = idx - i0 as f64;
                let sample = trace[i0] + frac * (trace[i0 + 1] - trace[i0]);
                let w = if config.apodize {
                    apodization(entry.launch_angle, entry.return_angle, beam)
                } else {
                    1.0
                };
                acc += w * sample;
            }
            acc
        })
        .collect();
    Ok(image)
}

/// Constructed multi-frequency baseline: per-frequency SAFT images averaged
/// after per-image max-normalization.
pub fn saft_average(images: &[Vec<f64>]) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::Shape("no images to average".to_string()));
    }
    let n = images[0].len();
    let mut out = vec![0.0; n];
    for image in images {
        if image.len() != n {
            return Err(Error::Shape("image sizes differ".to_string()));
        }
        let peak = image.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
        for (o, &v) in out.iter_mut().zip(image) {
            *o += scale * v;
        }
    }
    let inv = 1.0 / images.len() as f64;
    for o in &mut out {
        *o *= inv;
    }
    Ok(out)
}
