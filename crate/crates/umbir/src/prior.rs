//! Spatially varying QGGMRF prior: potential, influence function, quadratic
//! surrogate coefficient, clique weights, and the depth-amplified variance
//! field.

use crate::error::{Error, Result};
use crate::media::{ArrayGeometry, ImageGrid};
use serde::{Deserialize, Serialize};

/// Shape and scale parameters of the QGGMRF potential
/// `rho(d) = (|d|^p / (p s^p)) * u / (1 + u)` with `u = |d / (T s)|^(q-p)`
/// and `s` the clique scale. `1 < p < q = 2` keeps the potential convex with
/// continuous first and second derivatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QggmrfParams {
    pub p: f64,
    pub q: f64,
    /// Unit-less edge threshold `T`.
    pub edge_threshold: f64,
    /// Base scale of the reflectivity-difference distribution, image units.
    pub sigma0: f64,
    /// Depth amplification factor (1 disables it).
    pub nu: f64,
    /// Depth amplification exponent.
    pub depth_exponent: f64,
    /// Clique offsets `(d_row, d_col)` with normalized weights.
    pub neighborhood: Vec<(i32, i32, f64)>,
}

impl QggmrfParams {
    pub fn new(p: f64, q: f64, edge_threshold: f64, sigma0: f64, nu: f64, depth_exponent: f64) -> Result<Self> {
        let params = QggmrfParams {
            p,
            q,
            edge_threshold,
            sigma0,
            nu,
            depth_exponent,
            neighborhood: default_neighborhood(),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(1.0 < self.p && self.p < self.q) {
            errs.push(format!("shape exponents must satisfy 1 < p < q, got p = {}, q = {}", self.p, self.q));
        }
        if (self.q - 2.0).abs() > 1e-12 {
            errs.push(format!("q must equal 2 for a convex potential with continuous curvature, got {}", self.q));
        }
        if !(self.edge_threshold > 0.0) {
            errs.push(format!("edge threshold must be > 0, got {}", self.edge_threshold));
        }
        if !(self.sigma0 > 0.0) {
            errs.push(format!("sigma0 must be > 0, got {}", self.sigma0));
        }
        if !(self.nu > 0.0) {
            errs.push(format!("nu must be > 0, got {}", self.nu));
        }
        if !(self.depth_exponent > 0.0) {
            errs.push(format!("depth exponent must be > 0, got {}", self.depth_exponent));
        }
        if self.neighborhood.is_empty() {
            errs.push("neighborhood must not be empty".to_string());
        }
        if self.neighborhood.iter().any(|&(_, _, b)| !(b >= 0.0)) {
            errs.push("clique weights must be >= 0".to_string());
        }
        let total: f64 = self.neighborhood.iter().map(|&(_, _, b)| b).sum();
        if (total - 1.0).abs() > 1e-9 {
            errs.push(format!("clique weights must sum to 1, got {total}"));
        }
        if errs.is_empty() { Ok(()) } else { Err(Error::Config(errs)) }
    }
}

/// 8-connected neighborhood with weights proportional to inverse offset
/// distance, normalized to sum 1.
pub fn default_neighborhood() -> Vec<(i32, i32, f64)> {
    let offsets: [(i32, i32); 8] = [
        (-1, -1), (-1, 0), (-1, 1),
        (0, -1), (0, 1),
        (1, -1), (1, 0), (1, 1),
    ];
    let raw: Vec<f64> = offsets
        .iter()
        .map(|&(dr, dc)| 1.0 / ((dr * dr + dc * dc) as f64).sqrt())
        .collect();
    let total: f64 = raw.iter().sum();
    offsets
        .iter()
        .zip(raw)
        .map(|(&(dr, dc), w)| (dr, dc, w / total))
        .collect()
}

/// QGGMRF potential. Even, zero at the origin, convex for `1 < p <= q = 2`;
/// approaches `|d|^p / (p s^p)` for `|d| >> T s`.
pub fn rho(delta: f64, sigma_sr: f64, params: &QggmrfParams) -> f64 {
    let a = delta.abs();
    if a == 0.0 {
        return 0.0;
    }
    let u = (a / (params.edge_threshold * sigma_sr)).powf(params.q - params.p);
    a.powf(params.p) / (params.p * sigma_sr.powf(params.p)) * u / (1.0 + u)
}

/// Derivative of [`rho`] with respect to `delta`. Odd, sign-matching.
pub fn rho_prime(delta: f64, sigma_sr: f64, params: &QggmrfParams) -> f64 {
    let a = delta.abs();
    if a == 0.0 {
        return 0.0;
    }
    let u = (a / (params.edge_threshold * sigma_sr)).powf(params.q - params.p);
    let mag = a.powf(params.p - 1.0) / sigma_sr.powf(params.p) * u * (params.q / params.p + u)
        / (1.0 + u).powi(2);
    mag.copysign(delta)
}

/// Coefficient `b~` of the symmetric quadratic surrogate
/// `b~ (u - delta)^2 + rho_prime(delta) (u - delta) + rho(delta)`, which
/// majorizes `rho` with tangency at `u = delta`:
/// `b~ = rho_prime(delta) / (2 delta)`, continued analytically at zero.
pub fn surrogate_coeff(delta: f64, sigma_sr: f64, params: &QggmrfParams) -> f64 {
    if delta == 0.0 {
        // Limit of rho_prime(d) / (2 d) as d -> 0 (half the curvature at 0).
        return params.q
            / (2.0
                * params.p
                * sigma_sr.powf(params.p)
                * (params.edge_threshold * sigma_sr).powf(params.q - params.p));
    }
    rho_prime(delta, sigma_sr, params) / (2.0 * delta)
}

/// Per-voxel variance amplification and the clique scales derived from it.
#[derive(Debug, Clone)]
pub struct VarianceField {
    /// Amplification `nu_s` per voxel, in `[1, nu]` for `nu >= 1`.
    pub nu_s: Vec<f64>,
    /// Square roots of `nu_s`, cached for clique-scale products.
    sqrt_nu: Vec<f64>,
    sigma0: f64,
}

impl VarianceField {
    /// Clique scale `sigma0 * sqrt(nu_s * nu_r)`.
    #[inline]
    pub fn sigma_sr(&self, s: usize, r: usize) -> f64 {
        self.sigma0 * self.sqrt_nu[s] * self.sqrt_nu[r]
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    /// Uniform field (no depth amplification) for `n` voxels.
    pub fn uniform(n: usize, sigma0: f64) -> Self {
        VarianceField { nu_s: vec![1.0; n], sqrt_nu: vec![1.0; n], sigma0 }
    }
}

/// Depth-amplified variance field:
/// `nu_s = 1 + (nu - 1) (d_s / d_max)^a`, `d_s` the distance from the sensor
/// assembly reference point to voxel `s` and `d_max` its grid maximum.
pub fn variance_field(
    grid: &ImageGrid,
    geometry: &ArrayGeometry,
    sigma0: f64,
    nu: f64,
    depth_exponent: f64,
) -> Result<VarianceField> {
    if !(nu > 0.0) || !(depth_exponent > 0.0) || !(sigma0 > 0.0) {
        return Err(Error::config(format!(
            "variance field requires sigma0, nu, a > 0, got sigma0 = {sigma0}, nu = {nu}, a = {depth_exponent}"
        )));
    }
    let reference = geometry.assembly_reference();
    let n = grid.n_voxels();
    let mut dist = Vec::with_capacity(n);
    let mut d_max = 0.0f64;
    for v in 0..n {
        let d = grid.voxel_center(v)?.distance(&reference);
        d_max = d_max.max(d);
        dist.push(d);
    }
    let nu_s: Vec<f64> = dist
        .iter()
        .map(|&d| {
            if d_max == 0.0 {
                1.0
            } else {
                1.0 + (nu - 1.0) * (d / d_max).powf(depth_exponent)
            }
        })
        .collect();
    let sqrt_nu = nu_s.iter().map(|&v| v.sqrt()).collect();
    Ok(VarianceField { nu_s, sqrt_nu, sigma0 })
}

/// Neighbor list mapped onto a grid: for each voxel, the adjacent voxel
/// indices with their clique weights. Boundary voxels keep the interior
/// weights and simply drop the missing neighbors.
pub fn neighbor_lists(grid: &ImageGrid, params: &QggmrfParams) -> Vec<Vec<(usize, f64)>> {
    let rows = grid.rows as i32;
    let cols = grid.cols as i32;
    (0..grid.n_voxels())
        .map(|v| {
            let (r, c) = grid.row_col(v);
            params
                .neighborhood
                .iter()
                .filter_map(|&(dr, dc, b)| {
                    let nr = r as i32 + dr;
                    let nc = c as i32 + dc;
                    if nr < 0 || nc < 0 || nr >= rows || nc >= cols {
                        None
                    } else {
                        Some((grid.index_of(nr as usize, nc as usize), b))
                    }
                })
                .collect()
        })
        .collect()
}

/// Forward half of the neighborhood, for enumerating each unordered clique
/// exactly once.
pub fn forward_offsets(params: &QggmrfParams) -> Vec<(i32, i32, f64)> {
    params
        .neighborhood
        .iter()
        .copied()
        .filter(|&(dr, dc, _)| dr > 0 || (dr == 0 && dc > 0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::Point;

    fn params() -> QggmrfParams {
        QggmrfParams::new(1.1, 2.0, 0.01, 2.0, 10.0, 2.0).unwrap()
    }

    #[test]
    fn potential_zero_at_origin() {
        assert_eq!(rho(0.0, 1.0, &params()), 0.0);
    }

    #[test]
    fn potential_is_even() {
        let p = params();
        let mut state = 88172645463325252u64;
        for _ in 0..100 {
            // xorshift64 keeps the test free of RNG dependencies.
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let delta = (state as f64 / u64::MAX as f64 - 0.5) * 10.0;
            assert_eq!(rho(delta, 1.5, &p), rho(-delta, 1.5, &p));
        }
    }

    #[test]
    fn large_delta_asymptote_power_law() {
        let p = params();
        let sigma = 0.7;
        // |delta / (T sigma)|^(q-p) > 99 makes the saturation factor > 0.99.
        let delta = p.edge_threshold * sigma * 99f64.powf(1.0 / (p.q - p.p)) * 1.01;
        let expected = delta.powf(p.p) / (p.p * sigma.powf(p.p));
        let got = rho(delta, sigma, &p);
        assert!((got - expected).abs() / expected < 0.01, "asymptote off: {got} vs {expected}");
    }

    #[test]
    fn rho_decreases_in_scale() {
        let p = params();
        let delta = 0.3;
        let mut prev = f64::INFINITY;
        for sigma in [0.5, 1.0, 2.0, 4.0] {
            let v = rho(delta, sigma, &p);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn influence_zero_at_origin_and_sign_matching() {
        let p = params();
        assert_eq!(rho_prime(0.0, 1.0, &p), 0.0);
        for delta in [-2.0, -0.01, 0.01, 2.0] {
            assert_eq!(rho_prime(delta, 1.0, &p).signum(), delta.signum());
        }
    }

    #[test]
    fn influence_matches_central_difference() {
        let p = params();
        let cases: [(f64, f64); 5] = [
            (0.37, 0.8), (-1.4, 1.2), (0.003, 2.0), (5.0, 0.3), (-0.08, 1.0),
        ];
        for (delta, sigma) in cases {
            let h = 1e-6 * f64::max(1.0, delta.abs());
            let fd = (rho(delta + h, sigma, &p) - rho(delta - h, sigma, &p)) / (2.0 * h);
            let an = rho_prime(delta, sigma, &p);
            let denom = f64::max(an.abs(), 1e-12);
            assert!(
                (fd - an).abs() / denom < 1e-6,
                "delta {delta}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn surrogate_positive_and_continuous_at_zero() {
        let p = params();
        let sigma = 1.3;
        let at_zero = surrogate_coeff(0.0, sigma, &p);
        assert!(at_zero > 0.0);
        for delta in [1e-8, -1e-8] {
            let near = surrogate_coeff(delta, sigma, &p);
            assert!(
                ((near - at_zero) / at_zero).abs() < 1e-4,
                "discontinuity at 0: {near} vs {at_zero}"
            );
        }
    }

    #[test]
    fn quadratic_limit_gives_constant_coefficient() {
        // As p -> q = 2 the saturation factor u / (1 + u) pins at 1/2, so
        // the potential tends to delta^2 / (4 sigma^2): a pure quadratic
        // whose surrogate coefficient is the constant 1 / (4 sigma^2),
        // independent of delta and of the edge threshold.
        let sigma = 0.9;
        let expected = 1.0 / (4.0 * sigma * sigma);
        for t in [1e-6, 1.0, 1e6] {
            let p = QggmrfParams::new(2.0 - 1e-9, 2.0, t, 1.0, 10.0, 2.0).unwrap();
            for delta in [0.05, 0.4, 1.7] {
                let got = surrogate_coeff(delta, sigma, &p);
                assert!(
                    ((got - expected) / expected).abs() < 1e-4,
                    "T {t}, delta {delta}: {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn majorization_and_tangency() {
        let p = params();
        let sigma = 1.1;
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut rand = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state as f64 / u64::MAX as f64
        };
        for _ in 0..1000 {
            let delta = (rand() - 0.5) * 6.0;
            let u = (rand() - 0.5) * 6.0;
            let coeff = surrogate_coeff(delta, sigma, &p);
            let surrogate =
                coeff * (u - delta).powi(2) + rho_prime(delta, sigma, &p) * (u - delta)
                    + rho(delta, sigma, &p);
            assert!(
                surrogate >= rho(u, sigma, &p) - 1e-12,
                "majorization violated at delta = {delta}, u = {u}"
            );
        }
        // Tangency: equal value and slope at u = delta.
        let delta = 0.42;
        let coeff = surrogate_coeff(delta, sigma, &p);
        let at = coeff * 0.0 + rho(delta, sigma, &p);
        assert!((at - rho(delta, sigma, &p)).abs() < 1e-15);
        let h = 1e-7;
        let surrogate_slope = (coeff * h * h + rho_prime(delta, sigma, &p) * h) / h;
        assert!((surrogate_slope - rho_prime(delta, sigma, &p)).abs() < 1e-5);
    }

    #[test]
    fn convexity_second_differences() {
        for pv in [1.1, 1.5, 1.9] {
            let p = QggmrfParams::new(pv, 2.0, 0.5, 1.0, 2.0, 1.0).unwrap();
            let n = 2001;
            let h = 8.0 / (n - 1) as f64;
            let vals: Vec<f64> = (0..n).map(|i| rho(-4.0 + i as f64 * h, 1.0, &p)).collect();
            for i in 1..n - 1 {
                let second = vals[i - 1] - 2.0 * vals[i] + vals[i + 1];
                assert!(second >= -1e-12, "p = {pv}: negative curvature at i = {i}: {second}");
            }
        }
    }

    #[test]
    fn default_neighborhood_normalized() {
        let nb = default_neighborhood();
        assert_eq!(nb.len(), 8);
        let total: f64 = nb.iter().map(|&(_, _, b)| b).sum();
        assert!((total - 1.0).abs() < 1e-12);
        // Axial weights exceed diagonal ones.
        let axial = nb.iter().find(|&&(dr, dc, _)| dr == 0 && dc == 1).unwrap().2;
        let diag = nb.iter().find(|&&(dr, dc, _)| dr == 1 && dc == 1).unwrap().2;
        assert!(axial > diag);
    }

    fn small_geometry() -> ArrayGeometry {
        ArrayGeometry::new(
            Point::new(0.0, 0.0),
            0.0,
            vec![Point::new(0.0, 0.1)],
            1500.0,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn variance_field_disabled_when_nu_one() {
        let grid = ImageGrid::new(5, 4, 0.01, Point::new(0.0, 0.0)).unwrap();
        let field = variance_field(&grid, &small_geometry(), 2.0, 1.0, 2.0).unwrap();
        assert!(field.nu_s.iter().all(|&v| v == 1.0));
        assert_eq!(field.sigma_sr(0, 5), 2.0);
    }

    #[test]
    fn variance_field_endpoint_and_midpoint() {
        let grid = ImageGrid::new(5, 4, 0.01, Point::new(0.0, 0.0)).unwrap();
        let field = variance_field(&grid, &small_geometry(), 2.0, 10.0, 2.0).unwrap();
        let d: Vec<f64> = (0..grid.n_voxels())
            .map(|v| grid.voxel_center(v).unwrap().distance(&small_geometry().assembly_reference()))
            .collect();
        let d_max = d.iter().cloned().fold(0.0, f64::max);
        let far = d.iter().position(|&x| x == d_max).unwrap();
        assert!((field.nu_s[far] - 10.0).abs() < 1e-12);
        // Half distance: 1 + 9 * 0.25 = 3.25.
        for (v, &dv) in d.iter().enumerate() {
            let expected = 1.0 + 9.0 * (dv / d_max).powi(2);
            assert!((field.nu_s[v] - expected).abs() < 1e-12);
        }
        let half_value: f64 = 1.0 + 9.0 * 0.25;
        assert!((half_value - 3.25).abs() < 1e-15);
    }

    #[test]
    fn neighbor_lists_truncate_at_boundaries() {
        let grid = ImageGrid::new(3, 3, 1.0, Point::new(0.0, 0.0)).unwrap();
        let lists = neighbor_lists(&grid, &params());
        assert_eq!(lists[4].len(), 8); // center voxel
        assert_eq!(lists[0].len(), 3); // corner voxel
        assert_eq!(lists[1].len(), 5); // edge voxel
    }

    #[test]
    fn forward_offsets_cover_half_the_cliques() {
        let p = params();
        let fw = forward_offsets(&p);
        assert_eq!(fw.len(), 4);
    }
}
