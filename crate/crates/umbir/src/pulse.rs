//! Transmitted pulse synthesis and dispersion-filtered impulse kernels.
//!
//! The transmitted pulse is a Tukey-windowed sinusoid. Propagation through
//! lossy layers multiplies its spectrum by `exp(-gamma |f|)`, a zero-phase
//! real filter parameterized by the accumulated dispersion exponent `gamma`
//! (seconds; `gamma * |f|` is dimensionless with `f` in Hz). The group delay
//! is applied separately during system-matrix assembly, so kernels here are
//! all referenced to t = 0.

use crate::error::{Error, Result};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

/// Transmitted narrow-band pulse and the acquisition clock it is sampled on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseSpec {
    /// Excitation center frequency, Hz.
    pub center_frequency: f64,
    /// Pulse duration, s.
    pub duration: f64,
    /// Tukey window taper ratio in [0, 1] (0 = rectangular, 1 = Hann).
    pub taper: f64,
    /// Acquisition sampling frequency, Hz.
    pub sampling_frequency: f64,
    /// Record length per trace, samples.
    pub record_length: usize,
    /// Time of the first recorded sample, s.
    pub record_start: f64,
}

impl PulseSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.center_frequency > 0.0)
            || self.center_frequency >= 0.5 * self.sampling_frequency
        {
            errs.push(format!(
                "center frequency {} Hz must sit below Nyquist {} Hz",
                self.center_frequency,
                0.5 * self.sampling_frequency
            ));
        }
        if !(self.duration * self.sampling_frequency >= 2.0) {
            errs.push(format!(
                "pulse duration {} s must span at least 2 samples at {} Hz",
                self.duration, self.sampling_frequency
            ));
        }
        if !(0.0..=1.0).contains(&self.taper) {
            errs.push(format!("taper ratio must lie in [0, 1], got {}", self.taper));
        }
        if self.record_length == 0 {
            errs.push("record length must be >= 1 sample".to_string());
        }
        if !self.record_start.is_finite() {
            errs.push(format!("record start must be finite, got {}", self.record_start));
        }
        if errs.is_empty() { Ok(()) } else { Err(Error::Config(errs)) }
    }

    /// Sample period, s.
    pub fn dt(&self) -> f64 {
        1.0 / self.sampling_frequency
    }

    /// Number of samples spanned by the pulse.
    pub fn support_samples(&self) -> usize {
        (self.duration * self.sampling_frequency).ceil() as usize
    }

    /// Time of record sample `m`.
    pub fn sample_time(&self, m: usize) -> f64 {
        m as f64 * self.dt() + self.record_start
    }
}

/// Tukey window on [0, 1] with the given taper ratio.
pub fn tukey(u: f64, taper: f64) -> f64 {
    if !(0.0..=1.0).contains(&u) {
        return 0.0;
    }
    if taper <= 0.0 {
        return 1.0;
    }
    let half = 0.5 * taper;
    if u < half {
        0.5 * (1.0 + (std::f64::consts::PI * (u / half - 1.0)).cos())
    } else if u > 1.0 - half {
        0.5 * (1.0 + (std::f64::consts::PI * ((u - 1.0) / half + 1.0)).cos())
    } else {
        1.0
    }
}

/// Sample the transmitted pulse `tukey(t / duration) * sin(2 pi f0 t)` on
/// `[0, duration)` at the acquisition rate.
pub fn make_pulse(spec: &PulseSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let n = spec.support_samples();
    let dt = spec.dt();
    Ok((0..n)
        .map(|m| {
            let t = m as f64 * dt;
            tukey(t / spec.duration, spec.taper)
                * (2.0 * std::f64::consts::PI * spec.center_frequency * t).sin()
        })
        .collect())
}

/// A dispersion-filtered, optionally time-windowed kernel sampled at the
/// acquisition rate. `samples[m]` is the value at `t = m / fs`; the kernel
/// is identically zero outside `[0, t0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    /// Dispersion exponent the kernel was filtered with.
    pub gamma: f64,
    /// Amplitude samples on `[0, t0)`.
    pub samples: Vec<f64>,
    /// Support length, s.
    pub t0: f64,
}

impl Kernel {
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }
}

fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

/// Apply `exp(-gamma |f|)` to `spectrum` laid out in standard FFT bin order
/// for sample rate `fs`.
fn apply_dispersion(spectrum: &mut [Complex<f64>], gamma: f64, fs: f64) {
    let n = spectrum.len();
    let df = fs / n as f64;
    for (k, bin) in spectrum.iter_mut().enumerate() {
        let f = if k <= n / 2 { k as f64 * df } else { (n - k) as f64 * df };
        *bin *= (-gamma * f).exp();
    }
}

/// Dense kernel evaluation: inverse transform of the filtered pulse spectrum
/// on an `oversample`-times finer clock, for band-limited interpolation at
/// fractional delays. The buffer covers at least `min_samples` base-rate
/// samples so a later window of that length never sees wrapped content.
fn dense_kernel(
    spec: &PulseSpec,
    gamma: f64,
    oversample: usize,
    min_samples: usize,
) -> Result<Vec<f64>> {
    if !(gamma >= 0.0) {
        return Err(Error::Numerical(format!("dispersion exponent must be >= 0, got {gamma}")));
    }
    let pulse = make_pulse(spec)?;
    // Zero-pad well past the pulse so the filter's symmetric spread cannot
    // wrap back into the support.
    let n = next_pow2((2 * pulse.len() + 256).max(min_samples + pulse.len() + 256));
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex<f64>> = pulse
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(n)
        .collect();
    planner.plan_fft_forward(n).process(&mut buf);
    apply_dispersion(&mut buf, gamma, spec.sampling_frequency);

    let m = n * oversample.max(1);
    let mut up = vec![Complex::new(0.0, 0.0); m];
    if m == n {
        up.copy_from_slice(&buf);
    } else {
        // Spectral zero-padding; split the Nyquist bin to keep the spectrum
        // conjugate-symmetric.
        up[..n / 2].copy_from_slice(&buf[..n / 2]);
        up[m - n / 2 + 1..].copy_from_slice(&buf[n / 2 + 1..]);
        let ny = 0.5 * buf[n / 2];
        up[n / 2] = ny;
        up[m - n / 2] = ny;
    }
    planner.plan_fft_inverse(m).process(&mut up);
    let scale = 1.0 / n as f64;
    let max_im = up.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    let max_re = up.iter().map(|c| c.re.abs()).fold(0.0, f64::max);
    if max_im > 1e-9 * max_re.max(1e-300) {
        return Err(Error::Numerical(format!(
            "kernel transform lost spectral symmetry (imag leakage {max_im:e})"
        )));
    }
    Ok(up.iter().map(|c| c.re * scale).collect())
}

/// Dispersion-filter the transmitted pulse with exponent `gamma`.
///
/// At `gamma = 0` this reproduces the pulse samples up to transform
/// round-off. The returned support covers the full padded buffer; use
/// [`window_kernel`] to truncate it.
pub fn dispersion_kernel(spec: &PulseSpec, gamma: f64) -> Result<Kernel> {
    let samples = dense_kernel(spec, gamma, 1, 0)?;
    let t0 = samples.len() as f64 / spec.sampling_frequency;
    Ok(Kernel { gamma, samples, t0 })
}

/// Fraction of discarded tail energy above which [`window_kernel`] logs a
/// warning.
pub const WINDOW_TAIL_WARN: f64 = 0.01;

/// Truncate a kernel to `[0, t0)`, reporting how much energy the discarded
/// tail carried.
pub fn window_kernel(kernel: &Kernel, t0: f64, fs: f64) -> Result<Kernel> {
    if !(t0 > 0.0) {
        return Err(Error::Numerical(format!("window length must be > 0, got {t0}")));
    }
    let keep = ((t0 * fs).ceil() as usize).min(kernel.samples.len());
    let total = kernel.energy();
    let kept: f64 = kernel.samples[..keep].iter().map(|v| v * v).sum();
    if total > 0.0 {
        let discarded = 1.0 - kept / total;
        if discarded > WINDOW_TAIL_WARN {
            log::warn!(
                "kernel window t0 = {t0:.3e} s discards {:.2}% of energy (gamma = {:.3e})",
                100.0 * discarded,
                kernel.gamma
            );
        }
    }
    Ok(Kernel {
        gamma: kernel.gamma,
        samples: kernel.samples[..keep].to_vec(),
        t0: keep as f64 / fs,
    })
}

/// Energy retained by the default window rule.
pub const DEFAULT_WINDOW_ENERGY: f64 = 0.999;

/// Default window length: the shortest duration (whole samples) retaining
/// [`DEFAULT_WINDOW_ENERGY`] of the undispersed kernel's energy. Keeps
/// system-matrix columns short while bounding the model error.
pub fn default_window(spec: &PulseSpec) -> Result<f64> {
    let kernel = dispersion_kernel(spec, 0.0)?;
    let total = kernel.energy();
    if total == 0.0 {
        return Ok(spec.duration);
    }
    let mut acc = 0.0;
    for (m, v) in kernel.samples.iter().enumerate() {
        acc += v * v;
        if acc >= DEFAULT_WINDOW_ENERGY * total {
            return Ok((m + 1) as f64 / spec.sampling_frequency);
        }
    }
    Ok(kernel.t0)
}

/// Windowed kernel on an oversampled clock, with linear interpolation at
/// arbitrary times. Band-limited interpolation of fractional delays is done
/// by sampling this dense grid.
#[derive(Debug, Clone)]
pub struct InterpKernel {
    pub gamma: f64,
    /// Window length, s; the kernel is zero outside `[0, t0)`.
    pub t0: f64,
    /// Oversampling factor relative to the acquisition rate.
    pub oversample: usize,
    step: f64,
    samples: Vec<f64>,
}

impl InterpKernel {
    /// Kernel value at time `t` (s), zero outside `[0, t0)`.
    #[inline]
    pub fn value_at(&self, t: f64) -> f64 {
        if t < 0.0 || t >= self.t0 || self.samples.is_empty() {
            return 0.0;
        }
        let x = t / self.step;
        // Rounding in t / step can push the index to exactly len at the
        // window edge.
        let i = (x as usize).min(self.samples.len() - 1);
        let u = x - i as f64;
        // Four-point cubic on the oversampled grid; linear interpolation
        // leaves O((2 pi f / (os fs))^2) ripple, too coarse for the
        // operator-consistency tolerances.
        let n = self.samples.len();
        let at = |k: isize| -> f64 {
            if k < 0 || k as usize >= n { 0.0 } else { self.samples[k as usize] }
        };
        let p0 = at(i as isize - 1);
        let p1 = self.samples[i];
        let p2 = at(i as isize + 1);
        let p3 = at(i as isize + 2);
        0.5 * (2.0 * p1
            + u * ((p2 - p0)
                + u * ((2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3)
                    + u * (3.0 * (p1 - p2) + p3 - p0))))
    }
}

/// Default oversampling factor for fractional-delay evaluation.
pub const DEFAULT_OVERSAMPLE: usize = 8;

/// Build a windowed, oversampled kernel for interpolation.
pub fn interp_kernel(
    spec: &PulseSpec,
    gamma: f64,
    t0: f64,
    oversample: usize,
) -> Result<InterpKernel> {
    let oversample = oversample.max(1);
    let dense = dense_kernel(spec, gamma, oversample, (t0 * spec.sampling_frequency).ceil() as usize)?;
    let rate = spec.sampling_frequency * oversample as f64;
    let keep = ((t0 * rate).ceil() as usize).min(dense.len());
    let total: f64 = dense.iter().map(|v| v * v).sum();
    let kept: f64 = dense[..keep].iter().map(|v| v * v).sum();
    if total > 0.0 && 1.0 - kept / total > WINDOW_TAIL_WARN {
        log::warn!(
            "kernel window t0 = {t0:.3e} s discards {:.2}% of energy (gamma = {gamma:.3e})",
            100.0 * (1.0 - kept / total)
        );
    }
    Ok(InterpKernel {
        gamma,
        t0: keep as f64 / rate,
        oversample,
        step: 1.0 / rate,
        samples: dense[..keep].to_vec(),
    })
}

/// Read-only bank of interpolation kernels on a uniform dispersion grid.
///
/// Column assembly needs kernels at a continuum of `gamma` values; the bank
/// stores them at a spacing fine enough that linear interpolation between
/// neighboring entries is accurate to second order in `gamma_step * f`.
/// Built once, then shared read-only across threads.
#[derive(Debug)]
pub struct KernelBank {
    pub spec: PulseSpec,
    pub t0: f64,
    gamma_step: f64,
    kernels: Vec<InterpKernel>,
}

/// Bank spacing rule: `gamma_step * center_frequency = GAMMA_STEP_SCALE`.
pub const GAMMA_STEP_SCALE: f64 = 1e-2;

impl KernelBank {
    /// Cover dispersion exponents `[0, gamma_max]` for the given pulse.
    pub fn build(spec: &PulseSpec, t0: f64, gamma_max: f64, oversample: usize) -> Result<Self> {
        let gamma_step = GAMMA_STEP_SCALE / spec.center_frequency;
        let n = (gamma_max / gamma_step).ceil() as usize + 2;
        let kernels = (0..n)
            .map(|i| interp_kernel(spec, i as f64 * gamma_step, t0, oversample))
            .collect::<Result<Vec<_>>>()?;
        Ok(KernelBank { spec: *spec, t0, gamma_step, kernels })
    }

    /// Kernel value at dispersion `gamma` and time `t`, linearly interpolated
    /// between the two bracketing bank entries.
    #[inline]
    pub fn value_at(&self, gamma: f64, t: f64) -> f64 {
        let x = gamma / self.gamma_step;
        let i = (x as usize).min(self.kernels.len() - 2);
        let w = (x - i as f64).clamp(0.0, 1.0);
        let a = self.kernels[i].value_at(t);
        let b = self.kernels[i + 1].value_at(t);
        a + w * (b - a)
    }

    pub fn n_entries(&self) -> usize {
        self.kernels.len()
    }
}
