//! Discrete domain `[0, Gamma] x [0, 1]`: periodic-uniform in the
//! horizontal, Chebyshev-Gauss-Lobatto in the vertical, with
//! Clenshaw-Curtis quadrature, norms, traces and averages.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Tolerance on the quadrature-weight normalization `sum w = 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Which wall a trace refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wall {
    Bottom,
    Top,
}

/// Lebesgue norm orders supported by [`norm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormOrder {
    L1,
    L2,
    L4,
    LInf,
}

/// Sobolev norm kinds supported by [`sobolev_norm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SobolevKind {
    H1,
    W14,
}

/// The discrete domain. Vertical nodes are Chebyshev-Gauss-Lobatto
/// points mapped to `[0, 1]` (endpoints included, increasing), so wall
/// traces and wall boundary conditions are imposed at exact grid rows.
/// Horizontal nodes are uniform with no duplicated seam column.
#[derive(Debug, Clone)]
pub struct Domain {
    gamma: f64,
    nx: usize,
    nz: usize,
    z_nodes: Vec<f64>,
    quad_weights: Vec<f64>,
}

impl Domain {
    pub fn new(gamma: f64, nx: usize, nz: usize) -> Result<Arc<Self>> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
        }
        if nx < 8 || nx % 2 != 0 {
            return Err(Error::invalid(format!("nx must be an even integer >= 8, got {nx}")));
        }
        if nz < 9 {
            return Err(Error::invalid(format!("nz must be >= 9, got {nz}")));
        }
        let n = nz - 1;
        let z_nodes: Vec<f64> = (0..nz)
            .map(|j| 0.5 * (1.0 - (PI * j as f64 / n as f64).cos()))
            .collect();
        let quad_weights = clenshaw_curtis_mapped(nz);
        let sum: f64 = quad_weights.iter().sum();
        debug_assert!((sum - 1.0).abs() < WEIGHT_SUM_TOL, "weight sum {sum}");
        Ok(Arc::new(Domain { gamma, nx, nz, z_nodes, quad_weights }))
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    /// Vertical collocation nodes, increasing, `z[0] = 0`, `z[nz-1] = 1`.
    pub fn z_nodes(&self) -> &[f64] {
        &self.z_nodes
    }

    /// Clenshaw-Curtis weights on the mapped nodes; they sum to 1.
    pub fn quad_weights(&self) -> &[f64] {
        &self.quad_weights
    }

    /// Horizontal coordinate of column `i`.
    pub fn x_node(&self, i: usize) -> f64 {
        self.gamma * i as f64 / self.nx as f64
    }

    /// Uniform horizontal spacing.
    pub fn dx(&self) -> f64 {
        self.gamma / self.nx as f64
    }

    pub fn wall_index(&self, wall: Wall) -> usize {
        match wall {
            Wall::Bottom => 0,
            Wall::Top => self.nz - 1,
        }
    }

    /// `int_0^1 profile dz` by Clenshaw-Curtis quadrature.
    pub fn quadrature(&self, profile: &[f64]) -> f64 {
        assert_eq!(profile.len(), self.nz);
        profile.iter().zip(&self.quad_weights).map(|(p, w)| p * w).sum()
    }

    /// `int_0^delta profile dz`, evaluated by integrating the Chebyshev
    /// interpolant of the profile exactly over `[0, delta]`.
    pub fn partial_integral(&self, profile: &[f64], delta: f64) -> f64 {
        assert_eq!(profile.len(), self.nz);
        assert!((0.0..=1.0).contains(&delta));
        let a = chebyshev_coefficients(profile);
        // Antiderivative coefficients: Q' = q, Q = sum b_m T_m.
        let n = a.len();
        let mut b = vec![0.0; n + 1];
        b[1] = a[0] - if n > 2 { a[2] / 2.0 } else { 0.0 };
        for m in 2..=n - 1 {
            let upper = if m + 1 < n { a[m + 1] } else { 0.0 };
            b[m] = (a[m - 1] - upper) / (2.0 * m as f64);
        }
        b[n] = a[n - 1] / (2.0 * n as f64);
        // z in [0, delta] maps to x in [1 - 2 delta, 1] with dz = -dx/2.
        let x_lo = 1.0 - 2.0 * delta;
        0.5 * (clenshaw(&b, 1.0) - clenshaw(&b, x_lo))
    }

    /// Smallest `delta` for which at least two nodes lie in `[0, delta]`.
    pub fn min_delta(&self) -> f64 {
        self.z_nodes[1]
    }
}

/// One scalar unknown on the discrete domain. `values` is `nx x nz`
/// with the row index running over the horizontal direction; the
/// periodic seam is not duplicated.
#[derive(Debug, Clone)]
pub struct ScalarField {
    domain: Arc<Domain>,
    values: Array2<f64>,
}

impl ScalarField {
    pub fn zeros(domain: &Arc<Domain>) -> Self {
        ScalarField {
            domain: Arc::clone(domain),
            values: Array2::zeros((domain.nx, domain.nz)),
        }
    }

    pub fn constant(domain: &Arc<Domain>, c: f64) -> Self {
        ScalarField {
            domain: Arc::clone(domain),
            values: Array2::from_elem((domain.nx, domain.nz), c),
        }
    }

    pub fn from_fn(domain: &Arc<Domain>, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Array2::zeros((domain.nx, domain.nz));
        for i in 0..domain.nx {
            let x = domain.x_node(i);
            for (j, &z) in domain.z_nodes.iter().enumerate() {
                values[[i, j]] = f(x, z);
            }
        }
        ScalarField { domain: Arc::clone(domain), values }
    }

    pub fn from_values(domain: &Arc<Domain>, values: Array2<f64>) -> Result<Self> {
        if values.dim() != (domain.nx, domain.nz) {
            return Err(Error::invalid(format!(
                "field shape {:?} does not match domain ({}, {})",
                values.dim(),
                domain.nx,
                domain.nz
            )));
        }
        Ok(ScalarField { domain: Arc::clone(domain), values })
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { context })
        }
    }

    /// Wall row of the field as a profile over `x1`.
    pub fn wall_values(&self, wall: Wall) -> Vec<f64> {
        let j = self.domain.wall_index(wall);
        self.values.column(j).to_vec()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            domain: Arc::clone(&self.domain),
            values: self.values.mapv(&f),
        }
    }

    pub fn zip_with(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        assert_shared_domain(self, other);
        let mut values = self.values.clone();
        values.zip_mut_with(&other.values, |a, &b| *a = f(*a, b));
        ScalarField { domain: Arc::clone(&self.domain), values }
    }

    pub fn scaled(&self, c: f64) -> ScalarField {
        self.map(|v| c * v)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Pointwise max |self - other|.
    pub fn max_abs_diff(&self, other: &ScalarField) -> f64 {
        assert_shared_domain(self, other);
        self.values
            .iter()
            .zip(other.values.iter())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

fn assert_shared_domain(a: &ScalarField, b: &ScalarField) {
    assert!(
        Arc::ptr_eq(&a.domain, &b.domain)
            || (a.domain.nx == b.domain.nx
                && a.domain.nz == b.domain.nz
                && a.domain.gamma == b.domain.gamma),
        "fields live on different domains"
    );
}

impl std::ops::Add for &ScalarField {
    type Output = ScalarField;
    fn add(self, rhs: &ScalarField) -> ScalarField {
        self.zip_with(rhs, |a, b| a + b)
    }
}

impl std::ops::Sub for &ScalarField {
    type Output = ScalarField;
    fn sub(self, rhs: &ScalarField) -> ScalarField {
        self.zip_with(rhs, |a, b| a - b)
    }
}

/// Pointwise product.
impl std::ops::Mul for &ScalarField {
    type Output = ScalarField;
    fn mul(self, rhs: &ScalarField) -> ScalarField {
        self.zip_with(rhs, |a, b| a * b)
    }
}

/// Velocity field; `u2` vanishes on both walls for any admissible state.
#[derive(Debug, Clone)]
pub struct VectorField {
    pub u1: ScalarField,
    pub u2: ScalarField,
}

impl VectorField {
    pub fn zeros(domain: &Arc<Domain>) -> Self {
        VectorField { u1: ScalarField::zeros(domain), u2: ScalarField::zeros(domain) }
    }

    pub fn is_finite(&self) -> bool {
        self.u1.is_finite() && self.u2.is_finite()
    }
}

/// `int_Omega f dx = Gamma * (horizontal mean) * (vertical quadrature)`.
pub fn integrate(f: &ScalarField) -> Result<f64> {
    f.ensure_finite("integrate")?;
    Ok(integrate_unchecked(f))
}

pub(crate) fn integrate_unchecked(f: &ScalarField) -> f64 {
    let d = f.domain();
    let inv_nx = 1.0 / d.nx as f64;
    let mut acc = 0.0;
    for (j, &w) in d.quad_weights.iter().enumerate() {
        let col_sum: f64 = f.values.column(j).sum();
        acc += w * col_sum;
    }
    d.gamma * inv_nx * acc
}

/// `(int |f|^p)^(1/p)` for finite p, `max |f|` for p = inf.
pub fn norm(f: &ScalarField, p: NormOrder) -> Result<f64> {
    f.ensure_finite("norm")?;
    let val = match p {
        NormOrder::L1 => integrate_unchecked(&f.map(f64::abs)),
        NormOrder::L2 => integrate_unchecked(&f.map(|v| v * v)).max(0.0).sqrt(),
        NormOrder::L4 => integrate_unchecked(&f.map(|v| v.powi(4))).max(0.0).powf(0.25),
        NormOrder::LInf => f.max_abs(),
    };
    Ok(val)
}

/// Lp norm for a general real order `p >= 1` (used by the pressure
/// bound monitor, where the paper allows any r > 2).
pub fn norm_lp(f: &ScalarField, p: f64) -> Result<f64> {
    if !(p.is_finite() && p >= 1.0) {
        return Err(Error::UnsupportedNorm(format!("{p}")));
    }
    f.ensure_finite("norm_lp")?;
    Ok(integrate_unchecked(&f.map(|v| v.abs().powf(p))).max(0.0).powf(1.0 / p))
}

/// `(||f||_p^p + ||grad f||_p^p)^(1/p)` with p = 2 (H1) or p = 4 (W14).
/// The gradient is supplied by the caller (the spectral operators
/// module provides it) so this module stays free of calculus.
pub fn sobolev_norm<G>(f: &ScalarField, kind: SobolevKind, gradient: G) -> Result<f64>
where
    G: FnOnce(&ScalarField) -> Result<(ScalarField, ScalarField)>,
{
    f.ensure_finite("sobolev_norm")?;
    let (fx, fz) = gradient(f)?;
    let grad_sq = fx.zip_with(&fz, |a, b| a * a + b * b);
    match kind {
        SobolevKind::H1 => {
            let f2 = integrate_unchecked(&f.map(|v| v * v));
            let g2 = integrate_unchecked(&grad_sq);
            Ok((f2 + g2).max(0.0).sqrt())
        }
        SobolevKind::W14 => {
            let f4 = integrate_unchecked(&f.map(|v| v.powi(4)));
            let g4 = integrate_unchecked(&grad_sq.map(|v| v * v));
            Ok((f4 + g4).max(0.0).powf(0.25))
        }
    }
}

/// Per-node mean over `x1`; returns a vertical profile of length nz.
pub fn horizontal_average(f: &ScalarField) -> Result<Vec<f64>> {
    f.ensure_finite("horizontal_average")?;
    Ok(horizontal_average_unchecked(f))
}

pub(crate) fn horizontal_average_unchecked(f: &ScalarField) -> Vec<f64> {
    let d = f.domain();
    let inv_nx = 1.0 / d.nx as f64;
    (0..d.nz).map(|j| f.values.column(j).sum() * inv_nx).collect()
}

/// `int_0^Gamma f(x1, wall) dx1` by the periodic trapezoid rule, which
/// is spectrally accurate for periodic integrands.
pub fn wall_trace_integral(f: &ScalarField, wall: Wall) -> f64 {
    let d = f.domain();
    let j = d.wall_index(wall);
    let sum: f64 = f.values.column(j).sum();
    sum * d.dx()
}

/// Chebyshev coefficients of the interpolant through values at CGL
/// nodes ordered by increasing z (i.e. decreasing x = 1 - 2z).
pub(crate) fn chebyshev_coefficients(profile: &[f64]) -> Vec<f64> {
    let nz = profile.len();
    let n = nz - 1;
    let mut a = vec![0.0; nz];
    for (m, am) in a.iter_mut().enumerate() {
        let mut s = 0.5 * (profile[0] + if m % 2 == 0 { profile[n] } else { -profile[n] });
        for (j, &pj) in profile.iter().enumerate().take(n).skip(1) {
            s += pj * (PI * (m * j) as f64 / n as f64).cos();
        }
        let c = if m == 0 || m == n { 2.0 } else { 1.0 };
        *am = 2.0 * s / (c * n as f64);
    }
    a
}

/// Clenshaw evaluation of `sum b_m T_m(x)`.
pub(crate) fn clenshaw(b: &[f64], x: f64) -> f64 {
    let mut u1 = 0.0;
    let mut u2 = 0.0;
    for &bm in b.iter().skip(1).rev() {
        let u = 2.0 * x * u1 - u2 + bm;
        u2 = u1;
        u1 = u;
    }
    x * u1 - u2 + b[0]
}

/// Clenshaw-Curtis weights for CGL nodes mapped to `[0, 1]`.
fn clenshaw_curtis_mapped(nz: usize) -> Vec<f64> {
    let n = nz - 1;
    let mut w = vec![0.0; nz];
    let endpoint = if n % 2 == 0 {
        1.0 / ((n * n - 1) as f64)
    } else {
        1.0 / ((n * n) as f64)
    };
    w[0] = endpoint;
    w[n] = endpoint;
    for i in 1..n {
        let theta = PI * i as f64 / n as f64;
        let mut v = 1.0;
        if n % 2 == 0 {
            for k in 1..(n / 2) {
                v -= 2.0 * (2.0 * k as f64 * theta).cos() / ((4 * k * k - 1) as f64);
            }
            v -= (n as f64 * theta).cos() / ((n * n - 1) as f64);
        } else {
            for k in 1..=((n - 1) / 2) {
                v -= 2.0 * (2.0 * k as f64 * theta).cos() / ((4 * k * k - 1) as f64);
            }
        }
        w[i] = 2.0 * v / n as f64;
    }
    // Interval [0,1] is half the length of [-1,1].
    for wi in w.iter_mut() {
        *wi *= 0.5;
    }
    w
}
