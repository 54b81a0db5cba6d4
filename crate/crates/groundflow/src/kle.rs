//! Log-conductivity random fields via the truncated Karhunen-Loeve expansion.
//!
//! The covariance of Z = ln K is the separable exponential model
//! `C(x, x') = s2 * exp(-|x1-x2|/eta_x - |y1-y2|/eta_y)`, for which the 1-D
//! eigenpairs are analytic: eigenvalues `2*eta*s2 / (eta^2 w^2 + 1)` with `w`
//! the positive roots of `(eta^2 w^2 - 1) sin(wL) = 2 eta w cos(wL)`, and 2-D
//! pairs formed as products of the 1-D ones. Spatial derivatives of K come out
//! analytically as well, which is what the physics residual consumes.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{GfError, Result};
use crate::grid::Grid2D;
use ndarray::Array2;

/// Parameters of the separable exponential covariance of Z = ln K.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceSpec {
    /// Variance of the log-conductivity field.
    pub variance: f64,
    /// Correlation length along x.
    pub corr_len_x: f64,
    /// Correlation length along y.
    pub corr_len_y: f64,
    /// Domain extent along x.
    pub domain_len_x: f64,
    /// Domain extent along y.
    pub domain_len_y: f64,
    /// Constant mean of ln K.
    pub mean_logk: f64,
}

impl Default for CovarianceSpec {
    /// Base configuration: unit variance, correlation length 408 on a
    /// 1020 x 1020 domain, zero-mean log conductivity.
    fn default() -> Self {
        CovarianceSpec {
            variance: 1.0,
            corr_len_x: 408.0,
            corr_len_y: 408.0,
            domain_len_x: 1020.0,
            domain_len_y: 1020.0,
            mean_logk: 0.0,
        }
    }
}

impl CovarianceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0) {
            return Err(GfError::invalid(
                "covariance spec",
                format!("variance must be > 0, got {}", self.variance),
            ));
        }
        for (name, v) in [
            ("corr_len_x", self.corr_len_x),
            ("corr_len_y", self.corr_len_y),
            ("domain_len_x", self.domain_len_x),
            ("domain_len_y", self.domain_len_y),
        ] {
            if !(v > 0.0) {
                return Err(GfError::invalid(
                    "covariance spec",
                    format!("{name} must be > 0, got {v}"),
                ));
            }
        }
        if !self.mean_logk.is_finite() {
            return Err(GfError::invalid("covariance spec", "mean_logk not finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// One 1-D eigenpair of the exponential covariance on [0, L].
#[derive(Debug, Clone, Copy)]
pub struct EigenMode1D {
    /// Positive root of the characteristic equation.
    pub omega: f64,
    /// 1-D eigenvalue `2*eta*s2 / (eta^2 omega^2 + 1)`.
    pub lambda: f64,
    pub axis: Axis,
    eta: f64,
    norm: f64,
}

impl EigenMode1D {
    pub fn new(omega: f64, eta: f64, domain_len: f64, variance: f64, axis: Axis) -> Self {
        let lambda = eigenvalue_1d(omega, eta, variance);
        let norm = 1.0 / ((eta * eta * omega * omega + 1.0) * domain_len / 2.0 + eta).sqrt();
        EigenMode1D {
            omega,
            lambda,
            axis,
            eta,
            norm,
        }
    }

    /// Eigenfunction value and its spatial derivative at `x`.
    pub fn eval(&self, x: f64) -> (f64, f64) {
        let (s, c) = (self.omega * x).sin_cos();
        let f = self.norm * (self.eta * self.omega * c + s);
        let df = self.norm * (self.omega * c - self.eta * self.omega * self.omega * s);
        (f, df)
    }
}

/// One retained 2-D mode: a product of an x-mode and a y-mode.
#[derive(Debug, Clone, Copy)]
pub struct Mode2D {
    /// 2-D eigenvalue `lambda_x * lambda_y / s2`.
    pub lambda: f64,
    pub x_mode: EigenMode1D,
    pub y_mode: EigenMode1D,
    /// 1-based per-axis indices of the factors, used for tie-breaking.
    pub jk: (usize, usize),
}

/// Truncated 2-D eigenbasis, sorted by descending eigenvalue.
#[derive(Debug, Clone)]
pub struct KlBasis2D {
    modes: Vec<Mode2D>,
    spec: CovarianceSpec,
}

impl KlBasis2D {
    pub fn modes(&self) -> &[Mode2D] {
        &self.modes
    }

    pub fn n_terms(&self) -> usize {
        self.modes.len()
    }

    pub fn spec(&self) -> &CovarianceSpec {
        &self.spec
    }

    /// Fraction of the field variance captured by the retained modes,
    /// relative to the total `s2 * Lx * Ly` (integrated over the domain).
    pub fn captured_variance_fraction(&self) -> f64 {
        let total = self.spec.variance * self.spec.domain_len_x * self.spec.domain_len_y;
        self.modes.iter().map(|m| m.lambda).sum::<f64>() / total
    }
}

/// Characteristic function whose positive roots generate the 1-D eigenpairs:
/// `g(w) = (eta^2 w^2 - 1) sin(wL) - 2 eta w cos(wL)`.
fn characteristic(omega: f64, eta: f64, domain_len: f64) -> f64 {
    let (s, c) = (omega * domain_len).sin_cos();
    (eta * eta * omega * omega - 1.0) * s - 2.0 * eta * omega * c
}

/// The `n` smallest positive roots of the characteristic equation,
/// strictly increasing.
///
/// Scans with step `pi / (10 L)` (roots are separated by about `pi / L`, so
/// the scan cannot skip a sign change) and refines each bracket by bisection
/// down to floating-point resolution.
pub fn solve_characteristic_roots(eta: f64, domain_len: f64, n: usize) -> Result<Vec<f64>> {
    if !(eta > 0.0) || !(domain_len > 0.0) {
        return Err(GfError::invalid(
            "characteristic roots",
            format!("eta and L must be > 0, got eta={eta}, L={domain_len}"),
        ));
    }
    let mut roots = Vec::with_capacity(n);
    if n == 0 {
        return Ok(roots);
    }
    let step = std::f64::consts::PI / (10.0 * domain_len);
    // g(0) = 0 is not an admissible root; start one step in. g < 0 just
    // above zero, so the first sign change brackets the first root.
    let mut lo = step;
    let mut g_lo = characteristic(lo, eta, domain_len);
    let max_scan = 200 * (n + 1) * 10;
    let mut scanned = 0usize;
    while roots.len() < n {
        let hi = lo + step;
        let g_hi = characteristic(hi, eta, domain_len);
        if g_lo == 0.0 {
            roots.push(lo);
        } else if g_lo.signum() != g_hi.signum() {
            roots.push(bisect(eta, domain_len, lo, hi, g_lo)?);
        }
        lo = hi;
        g_lo = g_hi;
        scanned += 1;
        if scanned > max_scan {
            return Err(GfError::RootFind {
                lo,
                hi: lo + step,
                why: format!("scan exhausted after {scanned} steps with {} roots", roots.len()),
            });
        }
    }
    Ok(roots)
}

fn bisect(eta: f64, domain_len: f64, mut lo: f64, mut hi: f64, mut g_lo: f64) -> Result<f64> {
    const MAX_ITER: usize = 200;
    for _ in 0..MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Ok(mid); // interval no longer representable
        }
        let g_mid = characteristic(mid, eta, domain_len);
        if g_mid == 0.0 {
            return Ok(mid);
        }
        if g_mid.signum() == g_lo.signum() {
            lo = mid;
            g_lo = g_mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * mid {
            return Ok(0.5 * (lo + hi));
        }
    }
    Err(GfError::RootFind {
        lo,
        hi,
        why: format!("bisection did not converge within {MAX_ITER} iterations"),
    })
}

/// 1-D eigenvalue of the exponential covariance for characteristic root `omega`.
pub fn eigenvalue_1d(omega: f64, eta: f64, variance: f64) -> f64 {
    2.0 * eta * variance / (eta * eta * omega * omega + 1.0)
}

fn axis_modes(
    eta: f64,
    domain_len: f64,
    variance: f64,
    axis: Axis,
    count: usize,
) -> Result<Vec<EigenMode1D>> {
    let roots = solve_characteristic_roots(eta, domain_len, count)?;
    Ok(roots
        .into_iter()
        .map(|w| EigenMode1D::new(w, eta, domain_len, variance, axis))
        .collect())
}

/// Builds the truncated 2-D basis: computes per-axis eigenpairs, combines
/// them as `lambda = lambda_x * lambda_y / s2`, sorts descending and keeps
/// the top `n_terms` (ties broken by lexicographic (j, k)).
///
/// The per-axis pool starts at `ceil(sqrt(n_terms)) + 10` and is enlarged
/// (bounded) until the selection provably contains the n largest products:
/// the smallest kept product must be at least as large as any product using
/// a mode just outside the pool.
pub fn build_basis_2d(spec: &CovarianceSpec, n_terms: usize) -> Result<KlBasis2D> {
    spec.validate()?;
    if n_terms < 1 {
        return Err(GfError::invalid(
            "basis truncation",
            format!("n_terms must be >= 1, got {n_terms}"),
        ));
    }
    let mut pool = (n_terms as f64).sqrt().ceil() as usize + 10;
    const MAX_ENLARGE: usize = 8;
    for round in 0..=MAX_ENLARGE {
        // one extra mode per axis acts as the out-of-pool sentinel
        let xs = axis_modes(spec.corr_len_x, spec.domain_len_x, spec.variance, Axis::X, pool + 1)?;
        let ys = axis_modes(spec.corr_len_y, spec.domain_len_y, spec.variance, Axis::Y, pool + 1)?;

        let mut products: Vec<Mode2D> = Vec::with_capacity(pool * pool);
        for (j, xm) in xs[..pool].iter().enumerate() {
            for (k, ym) in ys[..pool].iter().enumerate() {
                products.push(Mode2D {
                    lambda: xm.lambda * ym.lambda / spec.variance,
                    x_mode: *xm,
                    y_mode: *ym,
                    jk: (j + 1, k + 1),
                });
            }
        }
        if products.len() < n_terms {
            pool *= 2;
            continue;
        }
        products.sort_by(|a, b| {
            b.lambda
                .partial_cmp(&a.lambda)
                .unwrap()
                .then_with(|| a.jk.cmp(&b.jk))
        });
        products.truncate(n_terms);

        let smallest_kept = products[n_terms - 1].lambda;
        let sentinel = (xs[pool].lambda * ys[0].lambda / spec.variance)
            .max(xs[0].lambda * ys[pool].lambda / spec.variance);
        if smallest_kept >= sentinel {
            return Ok(KlBasis2D {
                modes: products,
                spec: *spec,
            });
        }
        if round == MAX_ENLARGE {
            break;
        }
        pool *= 2;
    }
    Err(GfError::invalid(
        "basis truncation",
        format!("per-axis pool could not be enlarged enough to certify the top {n_terms} products"),
    ))
}

/// Value and analytic gradient of Z = ln K at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogKPoint {
    pub z: f64,
    pub dz_dx: f64,
    pub dz_dy: f64,
}

/// One realization of the conductivity field: a basis plus standard-normal
/// coordinates `xi`. Immutable after construction.
#[derive(Debug, Clone)]
pub struct ConductivityField {
    basis: Arc<KlBasis2D>,
    xi: Vec<f64>,
}

impl ConductivityField {
    pub fn new(basis: Arc<KlBasis2D>, xi: Vec<f64>) -> Result<Self> {
        if xi.len() != basis.n_terms() {
            return Err(GfError::invalid(
                "conductivity field",
                format!(
                    "xi has {} entries but the basis retains {} terms",
                    xi.len(),
                    basis.n_terms()
                ),
            ));
        }
        Ok(ConductivityField { basis, xi })
    }

    /// Draws `xi` from `sample_xi(seed, basis.n_terms())`.
    pub fn sample(basis: Arc<KlBasis2D>, seed: u64) -> Self {
        let xi = sample_xi(seed, basis.n_terms());
        ConductivityField { basis, xi }
    }

    pub fn basis(&self) -> &KlBasis2D {
        &self.basis
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    /// Z = mean + sum_i sqrt(lambda_i) f_i(x, y) xi_i with analytic gradient.
    pub fn synthesize_logk(&self, x: f64, y: f64) -> LogKPoint {
        let mut z = self.basis.spec.mean_logk;
        let mut zx = 0.0;
        let mut zy = 0.0;
        for (mode, &xi) in self.basis.modes.iter().zip(&self.xi) {
            let (fx, dfx) = mode.x_mode.eval(x);
            let (fy, dfy) = mode.y_mode.eval(y);
            let a = mode.lambda.sqrt() * xi;
            z += a * fx * fy;
            zx += a * dfx * fy;
            zy += a * fx * dfy;
        }
        LogKPoint {
            z,
            dz_dx: zx,
            dz_dy: zy,
        }
    }

    /// K = exp(Z) and its analytic gradient.
    pub fn k_at(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let p = self.synthesize_logk(x, y);
        let k = p.z.exp();
        (k, k * p.dz_dx, k * p.dz_dy)
    }

    /// K evaluated at every cell center; row index j (y), column index i (x).
    pub fn k_grid(&self, grid: &Grid2D) -> Array2<f64> {
        Array2::from_shape_fn((grid.ny, grid.nx), |(j, i)| {
            self.synthesize_logk(grid.x_center(i), grid.y_center(j)).z.exp()
        })
    }
}

/// `n` independent standard-normal draws, deterministic for a fixed seed.
pub fn sample_xi(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

// ---------------------------------------------------------------------------
// Field document I/O
// ---------------------------------------------------------------------------

/// On-disk form of a field realization: spec header, xi vector at full
/// decimal precision, optional gridded Z values in row-major CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldFile {
    pub spec: CovarianceSpec,
    pub n_terms: usize,
    pub seed: Option<u64>,
    pub xi: Vec<f64>,
    /// Optional (nx, ny, row-major Z values) block.
    pub grid_z: Option<(usize, usize, Vec<f64>)>,
}

pub const FIELD_FORMAT_HEADER: &str = "groundflow-field v1";

impl FieldFile {
    pub fn from_field(field: &ConductivityField, seed: Option<u64>) -> Self {
        FieldFile {
            spec: *field.basis().spec(),
            n_terms: field.basis().n_terms(),
            seed,
            xi: field.xi().to_vec(),
            grid_z: None,
        }
    }

    /// Attach gridded Z values sampled at the cell centers of `grid`.
    pub fn with_grid(mut self, field: &ConductivityField, grid: &Grid2D) -> Self {
        let mut z = Vec::with_capacity(grid.n_cells());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                z.push(field.synthesize_logk(grid.x_center(i), grid.y_center(j)).z);
            }
        }
        self.grid_z = Some((grid.nx, grid.ny, z));
        self
    }

    pub fn to_document(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FIELD_FORMAT_HEADER}");
        let _ = writeln!(s, "variance = {}", self.spec.variance);
        let _ = writeln!(s, "corr_len_x = {}", self.spec.corr_len_x);
        let _ = writeln!(s, "corr_len_y = {}", self.spec.corr_len_y);
        let _ = writeln!(s, "domain_len_x = {}", self.spec.domain_len_x);
        let _ = writeln!(s, "domain_len_y = {}", self.spec.domain_len_y);
        let _ = writeln!(s, "mean_logk = {}", self.spec.mean_logk);
        let _ = writeln!(s, "n_terms = {}", self.n_terms);
        match self.seed {
            Some(seed) => {
                let _ = writeln!(s, "seed = {seed}");
            }
            None => {
                let _ = writeln!(s, "seed = none");
            }
        }
        let xi_strs: Vec<String> = self.xi.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(s, "xi = {}", xi_strs.join(" "));
        if let Some((nx, ny, z)) = &self.grid_z {
            let _ = writeln!(s, "grid = {nx} {ny}");
            for j in 0..*ny {
                let row: Vec<String> = (0..*nx).map(|i| format!("{}", z[j * nx + i])).collect();
                let _ = writeln!(s, "{}", row.join(","));
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header.trim() != FIELD_FORMAT_HEADER {
            return Err(GfError::Parse {
                context: "field document".into(),
                why: format!("unexpected header '{header}'"),
            });
        }
        let mut kv = std::collections::BTreeMap::new();
        let mut grid_dims: Option<(usize, usize)> = None;
        let mut z_rows: Vec<f64> = Vec::new();
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if grid_dims.is_some() {
                for tok in line.split(',') {
                    z_rows.push(parse_f64(tok, "field grid z")?);
                }
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(GfError::Parse {
                    context: "field document".into(),
                    why: format!("expected 'key = value', got '{line}'"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            if k == "grid" {
                let mut it = v.split_whitespace();
                let nx = parse_usize(it.next().unwrap_or(""), "field grid nx")?;
                let ny = parse_usize(it.next().unwrap_or(""), "field grid ny")?;
                grid_dims = Some((nx, ny));
            } else {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let get = |key: &str| -> Result<String> {
            kv.get(key).cloned().ok_or_else(|| GfError::Parse {
                context: "field document".into(),
                why: format!("missing key '{key}'"),
            })
        };
        let spec = CovarianceSpec {
            variance: parse_f64(&get("variance")?, "variance")?,
            corr_len_x: parse_f64(&get("corr_len_x")?, "corr_len_x")?,
            corr_len_y: parse_f64(&get("corr_len_y")?, "corr_len_y")?,
            domain_len_x: parse_f64(&get("domain_len_x")?, "domain_len_x")?,
            domain_len_y: parse_f64(&get("domain_len_y")?, "domain_len_y")?,
            mean_logk: parse_f64(&get("mean_logk")?, "mean_logk")?,
        };
        let n_terms = parse_usize(&get("n_terms")?, "n_terms")?;
        let seed_raw = get("seed")?;
        let seed = if seed_raw == "none" {
            None
        } else {
            Some(parse_usize(&seed_raw, "seed")? as u64)
        };
        let xi: Vec<f64> = get("xi")?
            .split_whitespace()
            .map(|t| parse_f64(t, "xi"))
            .collect::<Result<_>>()?;
        if xi.len() != n_terms {
            return Err(GfError::Parse {
                context: "field document".into(),
                why: format!("xi has {} entries, n_terms is {n_terms}", xi.len()),
            });
        }
        let grid_z = match grid_dims {
            Some((nx, ny)) => {
                if z_rows.len() != nx * ny {
                    return Err(GfError::Parse {
                        context: "field document".into(),
                        why: format!("grid block has {} values, expected {}", z_rows.len(), nx * ny),
                    });
                }
                Some((nx, ny, z_rows))
            }
            None => None,
        };
        Ok(FieldFile {
            spec,
            n_terms,
            seed,
            xi,
            grid_z,
        })
    }

    /// Rebuilds the basis and wraps the stored xi into a usable field.
    pub fn instantiate(&self) -> Result<ConductivityField> {
        let basis = Arc::new(build_basis_2d(&self.spec, self.n_terms)?);
        ConductivityField::new(basis, self.xi.clone())
    }
}

fn parse_f64(tok: &str, what: &str) -> Result<f64> {
    tok.trim().parse::<f64>().map_err(|e| GfError::Parse {
        context: what.to_string(),
        why: format!("'{tok}': {e}"),
    })
}

fn parse_usize(tok: &str, what: &str) -> Result<usize> {
    tok.trim().parse::<usize>().map_err(|e| GfError::Parse {
        context: what.to_string(),
        why: format!("'{tok}': {e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const ETA: f64 = 408.0;
    const LEN: f64 = 1020.0;

    #[test]
    fn zero_roots_requested() {
        assert!(solve_characteristic_roots(ETA, LEN, 0).unwrap().is_empty());
    }

    #[test]
    fn first_roots_match_high_precision_oracle() {
        // Frozen from an independent scan-and-bisect run at 40-digit precision.
        let expected = [
            0.001825013185364944942522,
            0.004130148379845548779665,
            0.006835092983879380997373,
            0.009724113383964765002793,
            0.01269396186125723705581,
        ];
        let roots = solve_characteristic_roots(ETA, LEN, 5).unwrap();
        for (r, e) in roots.iter().zip(expected) {
            assert_relative_eq!(*r, e, max_relative = 1e-10);
        }
        for w in roots.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn roots_satisfy_characteristic_equation() {
        let roots = solve_characteristic_roots(ETA, LEN, 30).unwrap();
        for w in &roots {
            // scale-aware residual: g mixes terms of size ~(eta w)^2
            let scale = (ETA * ETA * w * w + 1.0) * (1.0 + 2.0 * ETA * w);
            assert!(
                characteristic(*w, ETA, LEN).abs() <= 1e-9 * scale,
                "root {w} leaves residual {}",
                characteristic(*w, ETA, LEN)
            );
        }
    }

    #[test]
    fn root_interlacing() {
        let roots = solve_characteristic_roots(ETA, LEN, 200).unwrap();
        let max_gap = 2.0 * std::f64::consts::PI / LEN;
        for w in roots.windows(2) {
            let gap = w[1] - w[0];
            assert!(gap > 0.0 && gap < max_gap, "gap {gap} outside (0, {max_gap})");
        }
        for (i, w) in roots.iter().enumerate().skip(50) {
            let ratio = w * LEN / std::f64::consts::PI;
            assert!((ratio - (i + 1) as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn eigenvalue_trace_approaches_total_variance() {
        // partial sums of the eigenvalues approach s2 * L
        let roots = solve_characteristic_roots(ETA, LEN, 200).unwrap();
        let total: f64 = roots.iter().map(|w| eigenvalue_1d(*w, ETA, 1.0)).sum();
        assert!(((total - LEN) / LEN).abs() < 0.02, "trace gap too large: {total}");
    }

    #[test]
    fn eigenvalue_formula_special_point() {
        // eta * omega = 1 collapses the formula to eta * s2
        assert_relative_eq!(eigenvalue_1d(1.0 / ETA, ETA, 1.0), ETA, max_relative = 1e-15);
        // large omega limit goes to zero monotonically
        let mut prev = f64::INFINITY;
        for k in 1..60 {
            let v = eigenvalue_1d(k as f64, ETA, 1.0);
            assert!(v < prev && v > 0.0);
            prev = v;
        }
        assert!(eigenvalue_1d(1e6, ETA, 1.0) < 1e-9);
    }

    #[test]
    fn eigenfunction_at_origin_and_quadrature_norm() {
        let roots = solve_characteristic_roots(ETA, LEN, 3).unwrap();
        for w in roots {
            let mode = EigenMode1D::new(w, ETA, LEN, 1.0, Axis::X);
            let (f0, df0) = mode.eval(0.0);
            assert_relative_eq!(f0, mode.norm * ETA * w, max_relative = 1e-14);
            assert_relative_eq!(df0, mode.norm * w, max_relative = 1e-14);
            // composite trapezoid at 10^4 + 1 points
            let n = 10_000usize;
            let h = LEN / n as f64;
            let mut acc = 0.0;
            for i in 0..=n {
                let x = i as f64 * h;
                let (f, _) = mode.eval(x);
                let wgt = if i == 0 || i == n { 0.5 } else { 1.0 };
                acc += wgt * f * f;
            }
            acc *= h;
            assert!((acc - 1.0).abs() < 1e-6, "norm integral {acc}");
        }
    }

    #[test]
    fn eigenfunction_derivative_matches_finite_difference() {
        let roots = solve_characteristic_roots(ETA, LEN, 4).unwrap();
        let x = LEN / 3.0;
        let h = 1e-4 * LEN;
        for w in roots {
            let mode = EigenMode1D::new(w, ETA, LEN, 1.0, Axis::X);
            let (_, df) = mode.eval(x);
            let (fp, _) = mode.eval(x + h);
            let (fm, _) = mode.eval(x - h);
            let fd = (fp - fm) / (2.0 * h);
            assert_relative_eq!(df, fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn basis_is_sorted_and_matches_brute_force() {
        let spec = CovarianceSpec::default();
        let basis = build_basis_2d(&spec, 20).unwrap();
        assert_eq!(basis.n_terms(), 20);
        for pair in basis.modes().windows(2) {
            assert!(pair[0].lambda >= pair[1].lambda);
        }
        // brute force over a 30x30 per-axis pool
        let xs = axis_modes(spec.corr_len_x, spec.domain_len_x, spec.variance, Axis::X, 30).unwrap();
        let ys = axis_modes(spec.corr_len_y, spec.domain_len_y, spec.variance, Axis::Y, 30).unwrap();
        let mut all: Vec<f64> = Vec::new();
        for xm in &xs {
            for ym in &ys {
                all.push(xm.lambda * ym.lambda / spec.variance);
            }
        }
        all.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (mode, expect) in basis.modes().iter().zip(&all[..20]) {
            assert_relative_eq!(mode.lambda, *expect, max_relative = 1e-12);
        }
        // each 2-D eigenvalue is the normalized product of its factors
        for mode in basis.modes() {
            assert_relative_eq!(
                mode.lambda,
                mode.x_mode.lambda * mode.y_mode.lambda / spec.variance,
                max_relative = 1e-15
            );
        }
    }

    #[test]
    fn single_term_basis_takes_largest_product() {
        let basis = build_basis_2d(&CovarianceSpec::default(), 1).unwrap();
        assert_eq!(basis.modes()[0].jk, (1, 1));
    }

    #[test]
    fn basis_rejects_zero_terms() {
        assert!(build_basis_2d(&CovarianceSpec::default(), 0).is_err());
    }

    #[test]
    fn synthesize_zero_xi_gives_mean() {
        let basis = Arc::new(build_basis_2d(&CovarianceSpec::default(), 20).unwrap());
        let field = ConductivityField::new(basis, vec![0.0; 20]).unwrap();
        let p = field.synthesize_logk(510.0, 510.0);
        assert_eq!(p.z, 0.0);
        assert_eq!(p.dz_dx, 0.0);
        assert_eq!(p.dz_dy, 0.0);
        let (k, kx, ky) = field.k_at(100.0, 900.0);
        assert_eq!((k, kx, ky), (1.0, 0.0, 0.0));
    }

    #[test]
    fn synthesize_is_linear_in_xi() {
        let basis = Arc::new(build_basis_2d(&CovarianceSpec::default(), 20).unwrap());
        let xi = sample_xi(7, 20);
        let xi2: Vec<f64> = xi.iter().map(|v| 2.0 * v).collect();
        let f1 = ConductivityField::new(basis.clone(), xi).unwrap();
        let f2 = ConductivityField::new(basis, xi2).unwrap();
        for (x, y) in [(13.0, 980.0), (510.0, 510.0), (1000.0, 17.5)] {
            let a = f1.synthesize_logk(x, y).z;
            let b = f2.synthesize_logk(x, y).z;
            assert_relative_eq!(b, 2.0 * a, max_relative = 1e-12);
        }
    }

    #[test]
    fn synthesize_gradients_match_finite_differences() {
        let basis = Arc::new(build_basis_2d(&CovarianceSpec::default(), 20).unwrap());
        let field = ConductivityField::sample(basis, 42);
        let h = 1e-4 * 1020.0;
        // fourth-order central difference keeps the oracle's truncation error
        // far below the 1e-6 relative target even where modes nearly cancel
        let fd4 = |f: &dyn Fn(f64) -> f64, c: f64| {
            (-f(c + 2.0 * h) + 8.0 * f(c + h) - 8.0 * f(c - h) + f(c - 2.0 * h)) / (12.0 * h)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x = 1020.0 * rand::Rng::random::<f64>(&mut rng).clamp(0.01, 0.99);
            let y = 1020.0 * rand::Rng::random::<f64>(&mut rng).clamp(0.01, 0.99);
            let p = field.synthesize_logk(x, y);
            let fd_x = fd4(&|c| field.synthesize_logk(c, y).z, x);
            let fd_y = fd4(&|c| field.synthesize_logk(x, c).z, y);
            assert_relative_eq!(p.dz_dx, fd_x, max_relative = 1e-6, epsilon = 1e-12);
            assert_relative_eq!(p.dz_dy, fd_y, max_relative = 1e-6, epsilon = 1e-12);
        }
        // spot check at the domain center with a plain central difference
        let p = field.synthesize_logk(510.0, 510.0);
        let fd_x = (field.synthesize_logk(510.0 + h, 510.0).z
            - field.synthesize_logk(510.0 - h, 510.0).z)
            / (2.0 * h);
        assert_relative_eq!(p.dz_dx, fd_x, max_relative = 1e-6);
    }

    #[test]
    fn xi_length_mismatch_is_rejected() {
        let basis = Arc::new(build_basis_2d(&CovarianceSpec::default(), 20).unwrap());
        assert!(ConductivityField::new(basis, vec![0.0; 19]).is_err());
    }

    #[test]
    fn sample_xi_is_deterministic_and_standardized() {
        assert_eq!(sample_xi(99, 20), sample_xi(99, 20));
        assert_ne!(sample_xi(99, 20), sample_xi(100, 20));
        let draws = sample_xi(1234, 100_000);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (draws.len() - 1) as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn field_document_round_trip() {
        let spec = CovarianceSpec::default();
        let basis = Arc::new(build_basis_2d(&spec, 20).unwrap());
        let field = ConductivityField::sample(basis, 5);
        let grid = Grid2D::from_extent(6, 5, 1020.0, 1020.0).unwrap();
        let doc = FieldFile::from_field(&field, Some(5)).with_grid(&field, &grid);
        let text = doc.to_document();
        let parsed = FieldFile::parse(&text).unwrap();
        assert_eq!(parsed, doc);
        let rebuilt = parsed.instantiate().unwrap();
        assert_eq!(rebuilt.xi(), field.xi());
        let p = field.synthesize_logk(100.0, 200.0);
        let q = rebuilt.synthesize_logk(100.0, 200.0);
        assert_eq!(p, q);
    }

    #[test]
    fn field_document_rejects_bad_header() {
        assert!(FieldFile::parse("bogus v9\n").is_err());
    }
}
