use umbir::media::*;
use umbir::pulse::*;
use umbir::raypath::*;
use umbir::synth::*;
use umbir::system::*;

fn main() {
    // Single scatterer, single receiver, lossless single layer, delay on grid.
    let medium =
        LayeredMedium::new(vec![Layer::new(0.15, 1500.0, 0.0, 1.5e6).unwrap()]).unwrap();
    let grid = ImageGrid::new(1, 1, 0.15, Point::new(0.0, -0.055)).unwrap();
    let geometry = ArrayGeometry::new(
        Point::new(0.0, 0.02),
        0.0,
        vec![Point::new(0.0, 0.02)],
        1500.0,
        0.0,
    )
    .unwrap();
    let spec = PulseSpec {
        center_frequency: 50e3,
        duration: 60e-6,
        taper: 0.5,
        sampling_frequency: 1e6,
        record_length: 512,
        record_start: 0.0,
    };
    let beam = BeamParams::new(0.0, 0.0).unwrap();
    let table = delay_table(&medium, &geometry, &grid, 1e-9).unwrap();
    println!("delay = {}", table.entry(0, 0).delay);
    let opts = BuildOptions { window: Some(0.6e-3), ..BuildOptions::default() };
    let system = MultiFreqSystem::from(
        build_system(&medium, &geometry, &grid, &spec, &beam, &table, &opts).unwrap(),
    );
    let phantom = make_phantom(PhantomProfile::PointTargets, &grid);
    // PointTargets on 1x1 grid puts one target at the single voxel.
    let phantom = match phantom {
        Ok(p) => p,
        Err(e) => {
            println!("phantom err {e}");
            return;
        }
    };
    println!("support: {:?}", phantom.support());
    let a = synthesize(&phantom, &system, None, &NoiseSpec::none()).unwrap();
    let b = synthesize_offgrid(
        &phantom,
        &medium,
        &geometry,
        &[spec],
        &beam,
        None,
        &NoiseSpec::none(),
        1,
    )
    .unwrap();
    let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let err = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    println!("rel err = {:.4e}", err / norm);
    // locate biggest pointwise diffs
    let mut diffs: Vec<(usize, f64, f64, f64)> = a
        .iter()
        .zip(&b)
        .enumerate()
        .map(|(i, (x, y))| (i, (x - y).abs(), *x, *y))
        .collect();
    diffs.sort_by(|p, q| q.1.total_cmp(&p.1));
    for d in &diffs[..8] {
        println!("m={} diff={:.3e} matrix={:.6} spectral={:.6}", d.0, d.1, d.2, d.3);
    }

    // Manual spectral synthesis with the same pulse, copied step by step.
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;
    let pulse = make_pulse(&spec).unwrap();
    println!("pulse len {}", pulse.len());
    let nfft = 1024usize;
    let mut planner = FftPlanner::new();
    let mut ps: Vec<Complex<f64>> = pulse
        .iter()
        .map(|&v| Complex::new(v, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(nfft)
        .collect();
    planner.plan_fft_forward(nfft).process(&mut ps);
    let tau = 1e-4;
    let df = 1e6 / nfft as f64;
    let mut spectrum = vec![Complex::new(0.0, 0.0); nfft];
    for bin in 0..=nfft / 2 {
        let f = bin as f64 * df;
        let phase = -2.0 * std::f64::consts::PI * f * tau;
        spectrum[bin] += ps[bin] * Complex::from_polar(1.0, phase);
    }
    for bin in 1..nfft / 2 {
        spectrum[nfft - bin] = spectrum[bin].conj();
    }
    spectrum[0] = Complex::new(spectrum[0].re, 0.0);
    spectrum[nfft / 2] = Complex::new(spectrum[nfft / 2].re, 0.0);
    planner.plan_fft_inverse(nfft).process(&mut spectrum);
    let scale = 1.0 / nfft as f64;
    let manual: Vec<f64> = spectrum[..512].iter().map(|c| c.re * scale).collect();
    let merr = manual
        .iter()
        .zip(&a)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    println!("manual vs matrix err = {merr:.4e}");
    let merr2 = manual
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    println!("manual vs offgrid err = {merr2:.4e}");
    for m in 96..112 {
        println!("m={m} manual={:+.6} offgrid={:+.6} matrix={:+.6}", manual[m], b[m], a[m]);
    }
}
