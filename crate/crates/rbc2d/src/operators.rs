//! Spectral calculus on the domain: Fourier derivatives in `x1`,
//! Chebyshev collocation derivatives in `x2`, 2/3-rule dealiasing, and
//! mode-by-mode elliptic (Poisson/Helmholtz) solves with Dirichlet or
//! Neumann walls.
//!
//! Elliptic problems are solved one horizontal wavenumber at a time:
//! for each mode the 1D two-point boundary value problem in `x2` is
//! solved through a dense LU factorization of the collocation operator
//! with the boundary rows replaced by the boundary conditions.
//! Factorizations are cached per (mode, shift, BC kind).

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Zip};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::domain::{Domain, ScalarField, VectorField};
use crate::error::{Error, Result};

/// Relative tolerance on the Neumann mean-compatibility constraint.
pub const NEUMANN_COMPAT_TOL: f64 = 1e-10;

/// Boundary condition for one wall of an elliptic solve. The profile is
/// the boundary value (Dirichlet) or the `d/dx2` derivative (Neumann)
/// as a function of `x1`.
#[derive(Debug, Clone)]
pub enum EllipticBc {
    Dirichlet(Vec<f64>),
    Neumann(Vec<f64>),
}

impl EllipticBc {
    pub fn homogeneous_dirichlet(domain: &Domain) -> Self {
        EllipticBc::Dirichlet(vec![0.0; domain.nx()])
    }

    pub fn homogeneous_neumann(domain: &Domain) -> Self {
        EllipticBc::Neumann(vec![0.0; domain.nx()])
    }

    fn kind(&self) -> BcKind {
        match self {
            EllipticBc::Dirichlet(_) => BcKind::Dirichlet,
            EllipticBc::Neumann(_) => BcKind::Neumann,
        }
    }

    fn profile(&self) -> &[f64] {
        match self {
            EllipticBc::Dirichlet(p) | EllipticBc::Neumann(p) => p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BcKind {
    Dirichlet,
    Neumann,
}

/// `(Delta - helmholtz_shift) g = rhs` with the given wall conditions.
#[derive(Debug, Clone)]
pub struct EllipticProblem {
    pub helmholtz_shift: f64,
    pub bc_bottom: EllipticBc,
    pub bc_top: EllipticBc,
}

/// Fourier coefficients of a real field: rows are modes `m = 0..nx/2`
/// (the Hermitian half), columns are vertical nodes. Real and imaginary
/// parts are kept as separate planes so vertical derivatives reduce to
/// real matrix products.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub re: Array2<f64>,
    pub im: Array2<f64>,
}

impl Spectrum {
    pub fn zeros(nkeep: usize, nz: usize) -> Self {
        Spectrum { re: Array2::zeros((nkeep, nz)), im: Array2::zeros((nkeep, nz)) }
    }

    pub fn fill_zero(&mut self) {
        self.re.fill(0.0);
        self.im.fill(0.0);
    }
}

#[derive(PartialEq, Eq, Hash, Clone, Copy, Debug)]
struct SolveKey {
    mode: usize,
    shift_bits: u64,
    bc: (BcKind, BcKind),
}

struct ModeFactors {
    lu: nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    bordered: bool,
}

/// Spectral operators bound to one domain.
pub struct SpectralOps {
    domain: Arc<Domain>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    /// Signed physical wavenumber `2 pi m / Gamma` per kept mode.
    kx: Vec<f64>,
    /// Highest mode kept by the 2/3 rule.
    dealias_max_mode: usize,
    /// Mapped Chebyshev differentiation matrix (d/dz on [0,1]).
    diff_z: Array2<f64>,
    diff_z_t: Array2<f64>,
    diff2_z: Array2<f64>,
    diff2_z_t: Array2<f64>,
    cache: Mutex<HashMap<SolveKey, Arc<ModeFactors>>>,
}

impl SpectralOps {
    pub fn new(domain: &Arc<Domain>) -> Self {
        let nx = domain.nx();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(nx);
        let ifft = planner.plan_fft_inverse(nx);
        let nkeep = nx / 2 + 1;
        let kx: Vec<f64> =
            (0..nkeep).map(|m| 2.0 * PI * m as f64 / domain.gamma()).collect();
        let diff_z = chebyshev_diff_matrix(domain.z_nodes());
        let diff2_z = diff_z.dot(&diff_z);
        let diff_z_t = diff_z.t().to_owned();
        let diff2_z_t = diff2_z.t().to_owned();
        SpectralOps {
            domain: Arc::clone(domain),
            fft,
            ifft,
            kx,
            dealias_max_mode: nx / 3,
            diff_z,
            diff_z_t,
            diff2_z,
            diff2_z_t,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn domain(&self) -> &Arc<Domain> {
        &self.domain
    }

    /// Number of kept Fourier modes (the Hermitian half, `nx/2 + 1`).
    pub fn nkeep(&self) -> usize {
        self.kx.len()
    }

    /// Signed wavenumbers of the kept modes.
    pub fn wavenumbers(&self) -> &[f64] {
        &self.kx
    }

    /// Highest mode index kept by the 2/3 dealiasing rule.
    pub fn dealias_max_mode(&self) -> usize {
        self.dealias_max_mode
    }

    pub fn diff_z(&self) -> &Array2<f64> {
        &self.diff_z
    }

    /// Transposed derivative matrices, laid out for `field . D^T`
    /// products on row-major arrays.
    pub fn diff_z_t(&self) -> &Array2<f64> {
        &self.diff_z_t
    }

    pub fn diff2_z_t(&self) -> &Array2<f64> {
        &self.diff2_z_t
    }

    pub fn diff2_z(&self) -> &Array2<f64> {
        &self.diff2_z
    }

    // ----- transforms ------------------------------------------------

    /// Forward transform: physical values to Fourier coefficients
    /// (normalized so that `f(x) = sum_m c_m exp(i k_m x)`).
    pub fn forward(&self, f: &ScalarField) -> Spectrum {
        let mut spec = Spectrum::zeros(self.nkeep(), self.domain.nz());
        self.forward_values(f.values(), &mut spec);
        spec
    }

    pub fn forward_values(&self, values: &Array2<f64>, spec: &mut Spectrum) {
        let nx = self.domain.nx();
        let nz = self.domain.nz();
        let nkeep = spec.re.nrows();
        debug_assert!(nkeep <= self.nkeep());
        let inv_nx = 1.0 / nx as f64;
        let fft = &self.fft;
        let re_ptr = SendPtr(spec.re.as_mut_ptr());
        let im_ptr = SendPtr(spec.im.as_mut_ptr());
        (0..nz).into_par_iter().for_each_init(
            || vec![Complex::new(0.0, 0.0); nx],
            |buf, j| {
                for i in 0..nx {
                    buf[i] = Complex::new(values[[i, j]], 0.0);
                }
                fft.process(buf);
                // Planes are (nkeep, nz) row-major: element (m, j) at m*nz + j.
                let re = re_ptr.get();
                let im = im_ptr.get();
                for m in 0..nkeep {
                    unsafe {
                        *re.add(m * nz + j) = buf[m].re * inv_nx;
                        *im.add(m * nz + j) = buf[m].im * inv_nx;
                    }
                }
            },
        );
    }

    /// Inverse transform using Hermitian symmetry of the kept half.
    pub fn inverse(&self, spec: &Spectrum) -> ScalarField {
        let mut out = ScalarField::zeros(&self.domain);
        self.inverse_values(spec, out.values_mut());
        out
    }

    pub fn inverse_values(&self, spec: &Spectrum, values: &mut Array2<f64>) {
        let nx = self.domain.nx();
        let nz = self.domain.nz();
        let nkeep = spec.re.nrows();
        debug_assert!(nkeep <= self.nkeep());
        let ifft = &self.ifft;
        let out_ptr = SendPtr(values.as_mut_ptr());
        let re = &spec.re;
        let im = &spec.im;
        (0..nz).into_par_iter().for_each_init(
            || vec![Complex::new(0.0, 0.0); nx],
            |buf, j| {
                buf.fill(Complex::new(0.0, 0.0));
                buf[0] = Complex::new(re[[0, j]], im[[0, j]]);
                for m in 1..nkeep {
                    let c = Complex::new(re[[m, j]], im[[m, j]]);
                    buf[m] = c;
                    if m < nx - m {
                        buf[nx - m] = c.conj();
                    }
                }
                ifft.process(buf);
                let out = out_ptr.get();
                for i in 0..nx {
                    unsafe {
                        *out.add(i * nz + j) = buf[i].re;
                    }
                }
            },
        );
    }

    // ----- derivatives -----------------------------------------------

    /// Spectral `d/dx1`.
    pub fn ddx(&self, f: &ScalarField) -> ScalarField {
        let mut spec = self.forward(f);
        self.ddx_spectrum_inplace(&mut spec);
        self.inverse(&spec)
    }

    /// In place `c_m -> i k_m c_m`; the Nyquist mode is set to zero.
    pub fn ddx_spectrum_inplace(&self, spec: &mut Spectrum) {
        let nkeep = spec.re.nrows();
        let nyquist = self.nkeep() - 1;
        for m in 0..nkeep {
            let k = if m == nyquist { 0.0 } else { self.kx[m] };
            let mut re_row = spec.re.row_mut(m);
            let mut im_row = spec.im.row_mut(m);
            for j in 0..re_row.len() {
                let r = re_row[j];
                let i = im_row[j];
                re_row[j] = -k * i;
                im_row[j] = k * r;
            }
        }
    }

    /// Chebyshev collocation `d/dx2`.
    pub fn ddz(&self, f: &ScalarField) -> ScalarField {
        let mut out = ScalarField::zeros(&self.domain);
        ndarray::linalg::general_mat_mul(
            1.0,
            f.values(),
            &self.diff_z_t,
            0.0,
            out.values_mut(),
        );
        out
    }

    /// `d2/dx2^2` by the squared differentiation matrix.
    pub fn ddz2(&self, f: &ScalarField) -> ScalarField {
        let mut out = ScalarField::zeros(&self.domain);
        ndarray::linalg::general_mat_mul(
            1.0,
            f.values(),
            &self.diff2_z_t,
            0.0,
            out.values_mut(),
        );
        out
    }

    /// Gradient `(d/dx1 f, d/dx2 f)`.
    pub fn gradient(&self, f: &ScalarField) -> Result<(ScalarField, ScalarField)> {
        f.ensure_finite("gradient")?;
        Ok((self.ddx(f), self.ddz(f)))
    }

    /// `Delta f` (for residual checks and manufactured solutions).
    pub fn laplacian(&self, f: &ScalarField) -> ScalarField {
        let mut spec = self.forward(f);
        // d2/dx1^2 in place.
        for m in 0..spec.re.nrows() {
            let k2 = self.kx[m] * self.kx[m];
            spec.re.row_mut(m).mapv_inplace(|v| -k2 * v);
            spec.im.row_mut(m).mapv_inplace(|v| -k2 * v);
        }
        let dxx = self.inverse(&spec);
        let dzz = self.ddz2(f);
        &dxx + &dzz
    }

    /// 2/3-rule truncation in `x1`, applied in place to a physical field.
    pub fn dealias(&self, f: &mut ScalarField) {
        let mut spec = self.forward(f);
        self.dealias_spectrum_inplace(&mut spec);
        self.inverse_values(&spec, f.values_mut());
    }

    pub fn dealias_spectrum_inplace(&self, spec: &mut Spectrum) {
        for m in (self.dealias_max_mode + 1)..spec.re.nrows() {
            spec.re.row_mut(m).fill(0.0);
            spec.im.row_mut(m).fill(0.0);
        }
    }

    /// `u = grad^perp psi = (-d psi/dx2, d psi/dx1)`.
    pub fn velocity_from_streamfunction(&self, psi: &ScalarField) -> Result<VectorField> {
        psi.ensure_finite("velocity_from_streamfunction")?;
        let u1 = self.ddz(psi).scaled(-1.0);
        let u2 = self.ddx(psi);
        Ok(VectorField { u1, u2 })
    }

    // ----- elliptic solves --------------------------------------------

    /// Solve `(Delta - shift) g = rhs` with the problem's wall
    /// conditions. For a pure-Neumann Poisson problem the right-hand
    /// side must satisfy the mean compatibility constraint; the
    /// solution is then pinned to zero mean.
    pub fn solve_elliptic(
        &self,
        problem: &EllipticProblem,
        rhs: &ScalarField,
    ) -> Result<ScalarField> {
        rhs.ensure_finite("solve_elliptic rhs")?;
        if problem.helmholtz_shift < 0.0 {
            return Err(Error::invalid("helmholtz_shift must be non-negative"));
        }
        let rhs_spec = self.forward(rhs);
        let bot = self.profile_spectrum(problem.bc_bottom.profile());
        let top = self.profile_spectrum(problem.bc_top.profile());
        let kinds = (problem.bc_bottom.kind(), problem.bc_top.kind());

        if kinds == (BcKind::Neumann, BcKind::Neumann) && problem.helmholtz_shift == 0.0 {
            self.check_neumann_compatibility(&rhs_spec, &bot, &top)?;
        }

        let mut out_spec = Spectrum::zeros(self.nkeep(), self.domain.nz());
        self.solve_modes(
            problem.helmholtz_shift,
            kinds,
            &rhs_spec,
            &bot,
            &top,
            self.nkeep(),
            &mut out_spec,
        );
        let mut g = self.inverse(&out_spec);

        // Dirichlet rows are known exactly; remove solver roundoff there.
        if let EllipticBc::Dirichlet(p) = &problem.bc_bottom {
            let j = 0;
            for (i, v) in p.iter().enumerate() {
                g.values_mut()[[i, j]] = *v;
            }
        }
        if let EllipticBc::Dirichlet(p) = &problem.bc_top {
            let j = self.domain.nz() - 1;
            for (i, v) in p.iter().enumerate() {
                g.values_mut()[[i, j]] = *v;
            }
        }
        Ok(g)
    }

    /// Fourier coefficients of a wall profile.
    pub fn profile_spectrum(&self, profile: &[f64]) -> Vec<Complex<f64>> {
        let nx = self.domain.nx();
        assert_eq!(profile.len(), nx);
        let mut buf: Vec<Complex<f64>> =
            profile.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fft.process(&mut buf);
        let inv_nx = 1.0 / nx as f64;
        buf.truncate(self.nkeep());
        for c in buf.iter_mut() {
            *c *= inv_nx;
        }
        buf
    }

    fn check_neumann_compatibility(
        &self,
        rhs: &Spectrum,
        bot: &[Complex<f64>],
        top: &[Complex<f64>],
    ) -> Result<()> {
        // Mean mode: int_0^1 rhs_0 dz must equal dg/dz|top - dg/dz|bottom.
        let mean_profile: Vec<f64> = rhs.re.row(0).to_vec();
        let rhs_int = self.domain.quadrature(&mean_profile);
        let flux = top[0].re - bot[0].re;
        let defect = flux - rhs_int;
        let scale = rhs_int.abs().max(top[0].re.abs()).max(bot[0].re.abs()).max(1e-300);
        let rel = defect.abs() / scale;
        if rel > NEUMANN_COMPAT_TOL && defect.abs() > NEUMANN_COMPAT_TOL {
            return Err(Error::IncompatibleNeumann { defect, scale, rel });
        }
        Ok(())
    }

    /// Solve the first `modes` Fourier modes of `(Delta - shift) g = rhs`
    /// given boundary spectra. Modes beyond `modes` are left zero.
    #[allow(clippy::too_many_arguments)]
    pub fn solve_modes(
        &self,
        shift: f64,
        kinds: (BcKind, BcKind),
        rhs: &Spectrum,
        bot: &[Complex<f64>],
        top: &[Complex<f64>],
        modes: usize,
        out: &mut Spectrum,
    ) {
        let factors = self.factor_family(shift, kinds, modes);
        self.solve_modes_with(&factors, rhs, bot, top, out);
    }

    /// Build a factorization family without touching the shared cache.
    /// Long-running integrators hold these directly so that changing
    /// time steps do not grow the cache without bound.
    pub fn build_family(
        &self,
        shift: f64,
        kinds: (BcKind, BcKind),
        modes: usize,
    ) -> Vec<Arc<ModeFamilyEntry>> {
        (0..modes)
            .into_par_iter()
            .map(|m| {
                Arc::new(ModeFamilyEntry {
                    factors: Arc::new(self.build_factors(m, shift, kinds)),
                })
            })
            .collect()
    }

    /// Resolve (or build) the cached factorizations for one family.
    pub fn factor_family(
        &self,
        shift: f64,
        kinds: (BcKind, BcKind),
        modes: usize,
    ) -> Vec<Arc<ModeFamilyEntry>> {
        let mut resolved: Vec<Option<Arc<ModeFactors>>> = vec![None; modes];
        {
            let cache = self.cache.lock().unwrap();
            for (m, slot) in resolved.iter_mut().enumerate() {
                let key = SolveKey { mode: m, shift_bits: shift.to_bits(), bc: kinds };
                *slot = cache.get(&key).cloned();
            }
        }
        let missing: Vec<usize> =
            resolved.iter().enumerate().filter(|(_, s)| s.is_none()).map(|(m, _)| m).collect();
        if !missing.is_empty() {
            let built: Vec<(usize, Arc<ModeFactors>)> = missing
                .par_iter()
                .map(|&m| (m, Arc::new(self.build_factors(m, shift, kinds))))
                .collect();
            let mut cache = self.cache.lock().unwrap();
            for (m, f) in built {
                let key = SolveKey { mode: m, shift_bits: shift.to_bits(), bc: kinds };
                cache.insert(key, Arc::clone(&f));
                resolved[m] = Some(f);
            }
        }
        resolved
            .into_iter()
            .map(|f| Arc::new(ModeFamilyEntry { factors: f.unwrap() }))
            .collect()
    }

    /// Per-mode solves against prefetched factors.
    pub fn solve_modes_with(
        &self,
        family: &[Arc<ModeFamilyEntry>],
        rhs: &Spectrum,
        bot: &[Complex<f64>],
        top: &[Complex<f64>],
        out: &mut Spectrum,
    ) {
        let nz = self.domain.nz();
        let modes = family.len();
        let re_ptr = SendPtr(out.re.as_mut_ptr());
        let im_ptr = SendPtr(out.im.as_mut_ptr());
        (0..modes).into_par_iter().for_each(|m| {
            let f = &family[m].factors;
            let n = if f.bordered { nz + 1 } else { nz };
            let mut b_re = DVector::zeros(n);
            let mut b_im = DVector::zeros(n);
            b_re[0] = bot[m].re;
            b_im[0] = bot[m].im;
            for j in 1..nz - 1 {
                b_re[j] = rhs.re[[m, j]];
                b_im[j] = rhs.im[[m, j]];
            }
            b_re[nz - 1] = top[m].re;
            b_im[nz - 1] = top[m].im;
            let ok = f.lu.solve_mut(&mut b_re) && f.lu.solve_mut(&mut b_im);
            debug_assert!(ok, "singular elliptic factorization");
            let re = re_ptr.get();
            let im = im_ptr.get();
            for j in 0..nz {
                unsafe {
                    *re.add(m * nz + j) = b_re[j];
                    *im.add(m * nz + j) = b_im[j];
                }
            }
        });
    }

    fn build_factors(&self, mode: usize, shift: f64, kinds: (BcKind, BcKind)) -> ModeFactors {
        let nz = self.domain.nz();
        let k2 = self.kx[mode] * self.kx[mode];
        let lambda = k2 + shift;
        let bordered =
            kinds == (BcKind::Neumann, BcKind::Neumann) && lambda == 0.0 && mode == 0;
        let n = if bordered { nz + 1 } else { nz };
        let mut a = DMatrix::zeros(n, n);
        // Interior rows: D2 - lambda I.
        for row in 1..nz - 1 {
            for col in 0..nz {
                a[(row, col)] = self.diff2_z[[row, col]];
            }
            a[(row, row)] -= lambda;
        }
        // Boundary rows.
        match kinds.0 {
            BcKind::Dirichlet => a[(0, 0)] = 1.0,
            BcKind::Neumann => {
                for col in 0..nz {
                    a[(0, col)] = self.diff_z[[0, col]];
                }
            }
        }
        match kinds.1 {
            BcKind::Dirichlet => a[(nz - 1, nz - 1)] = 1.0,
            BcKind::Neumann => {
                for col in 0..nz {
                    a[(nz - 1, col)] = self.diff_z[[nz - 1, col]];
                }
            }
        }
        if bordered {
            // Distribute the (projected-out) defect over interior rows and
            // pin the quadrature mean of the solution to zero.
            for row in 1..nz - 1 {
                a[(row, nz)] = 1.0;
            }
            for (col, &w) in self.domain.quad_weights().iter().enumerate() {
                a[(nz, col)] = w;
            }
        }
        ModeFactors { lu: a.lu(), bordered }
    }

    /// Wall values for the vorticity under the Navier-slip closure:
    /// `omega = -u1/L_s` at the bottom and `omega = +u1/L_s` at the top;
    /// both vanish in the free-slip limit `L_s = inf`.
    pub fn vorticity_wall_values(
        u1_bottom: &[f64],
        u1_top: &[f64],
        ls: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if !(ls > 0.0) {
            return Err(Error::invalid(format!("slip length must be positive, got {ls}")));
        }
        if ls.is_infinite() {
            return Ok((vec![0.0; u1_bottom.len()], vec![0.0; u1_top.len()]));
        }
        let inv = 1.0 / ls;
        Ok((
            u1_bottom.iter().map(|&v| -v * inv).collect(),
            u1_top.iter().map(|&v| v * inv).collect(),
        ))
    }
}

/// One cached factorization handed out to solvers.
pub struct ModeFamilyEntry {
    factors: Arc<ModeFactors>,
}

/// Raw-pointer wrapper for disjoint parallel writes (each worker touches
/// a distinct set of indices).
#[derive(Clone, Copy)]
struct SendPtr(*mut f64);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

impl SendPtr {
    fn get(self) -> *mut f64 {
        self.0
    }
}

/// Chebyshev differentiation matrix for CGL nodes mapped to `[0, 1]`
/// (nodes increasing). Off-diagonal entries use the standard barycentric
/// form; diagonals come from the negative-sum trick.
fn chebyshev_diff_matrix(z_nodes: &[f64]) -> Array2<f64> {
    let nz = z_nodes.len();
    let n = nz - 1;
    // Standard nodes x_j = cos(j pi / n) = 1 - 2 z_j, decreasing in j.
    let x: Vec<f64> = (0..nz).map(|j| (PI * j as f64 / n as f64).cos()).collect();
    let c = |j: usize| -> f64 {
        if j == 0 || j == n {
            2.0
        } else {
            1.0
        }
    };
    let mut d = Array2::zeros((nz, nz));
    for i in 0..nz {
        for j in 0..nz {
            if i != j {
                let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                d[[i, j]] = (c(i) / c(j)) * sign / (x[i] - x[j]);
            }
        }
    }
    for i in 0..nz {
        let mut s = 0.0;
        for j in 0..nz {
            if i != j {
                s += d[[i, j]];
            }
        }
        d[[i, i]] = -s;
    }
    // d/dz = (dx/dz) d/dx = -2 d/dx.
    d.mapv_inplace(|v| -2.0 * v);
    d
}

/// Discrete divergence diagnostic `||div u||_2 / ||grad u||_2`.
pub fn divergence_ratio(ops: &SpectralOps, u: &VectorField) -> f64 {
    let div = &ops.ddx(&u.u1) + &ops.ddz(&u.u2);
    let d11 = ops.ddx(&u.u1);
    let d12 = ops.ddz(&u.u1);
    let d21 = ops.ddx(&u.u2);
    let d22 = ops.ddz(&u.u2);
    let grad_sq = crate::domain::integrate_unchecked(
        &d11.zip_with(&d12, |a, b| a * a + b * b)
            .zip_with(&d21.zip_with(&d22, |a, b| a * a + b * b), |a, b| a + b),
    );
    let div_sq = crate::domain::integrate_unchecked(&div.map(|v| v * v));
    if grad_sq <= 0.0 {
        return 0.0;
    }
    (div_sq / grad_sq).sqrt()
}

/// Used by `Zip`-free callers that need elementwise AXPY on fields.
pub fn axpy(alpha: f64, x: &ScalarField, y: &mut ScalarField) {
    Zip::from(y.values_mut()).and(x.values()).for_each(|yv, &xv| *yv += alpha * xv);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{integrate, norm, wall_trace_integral, NormOrder, Wall};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn setup(gamma: f64, nx: usize, nz: usize) -> (Arc<Domain>, SpectralOps) {
        let d = Domain::new(gamma, nx, nz).unwrap();
        let ops = SpectralOps::new(&d);
        (d, ops)
    }

    #[test]
    fn ddx_of_constant_vanishes() {
        let (d, ops) = setup(2.0, 32, 17);
        let f = ScalarField::constant(&d, 4.2);
        assert!(ops.ddx(&f).max_abs() < 1e-12);
    }

    #[test]
    fn ddx_of_sine() {
        let (d, ops) = setup(2.0, 32, 17);
        let k = 2.0 * PI / 2.0;
        let f = ScalarField::from_fn(&d, |x, _| (k * x).sin());
        let expected = ScalarField::from_fn(&d, |x, _| k * (k * x).cos());
        assert!(ops.ddx(&f).max_abs_diff(&expected) < 1e-10);
    }

    #[test]
    fn ddx_twice_of_cosine() {
        let (d, ops) = setup(2.0, 32, 17);
        let k = 2.0 * PI / 2.0;
        let f = ScalarField::from_fn(&d, |x, _| (k * x).cos());
        let expected = ScalarField::from_fn(&d, |x, _| -k * k * (k * x).cos());
        let got = ops.ddx(&ops.ddx(&f));
        assert!(got.max_abs_diff(&expected) < 1e-9);
    }

    #[test]
    fn ddz_polynomial_exactness() {
        let (d, ops) = setup(1.0, 16, 17);
        let c = ScalarField::constant(&d, -1.5);
        assert!(ops.ddz(&c).max_abs() < 1e-12);

        let lin = ScalarField::from_fn(&d, |_, z| z);
        let ones = ScalarField::constant(&d, 1.0);
        assert!(ops.ddz(&lin).max_abs_diff(&ones) < 1e-11);

        let cubic = ScalarField::from_fn(&d, |_, z| z * z * z);
        let expected = ScalarField::from_fn(&d, |_, z| 3.0 * z * z);
        assert!(ops.ddz(&cubic).max_abs_diff(&expected) < 1e-10);
    }

    #[test]
    fn adjointness_of_ddx() {
        let (d, ops) = setup(2.0, 32, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (a, b): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let kf = rng.gen_range(1..5) as f64;
            let kg = rng.gen_range(1..5) as f64;
            let f = ScalarField::from_fn(&d, |x, z| a * (PI * kf * x).cos() * (1.0 + z));
            let g = ScalarField::from_fn(&d, |x, z| b * (PI * kg * x).sin() * (2.0 - z));
            let lhs = integrate(&(&ops.ddx(&f) * &g)).unwrap();
            let rhs = -integrate(&(&f * &ops.ddx(&g))).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "lhs {lhs} rhs {rhs}");
        }
    }

    #[test]
    fn integration_by_parts_in_z() {
        let (d, ops) = setup(2.0, 16, 33);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let a: f64 = rng.gen_range(-1.0..1.0);
            let m = rng.gen_range(1..4) as f64;
            let f = ScalarField::from_fn(&d, |x, z| a * (PI * x).cos() * (m * z).cos());
            let g = ScalarField::from_fn(&d, |x, z| (PI * x).cos() * (1.0 + z * z));
            let lhs = integrate(&(&ops.ddz(&f) * &g)).unwrap()
                + integrate(&(&f * &ops.ddz(&g))).unwrap();
            let fg = &f * &g;
            let rhs = wall_trace_integral(&fg, Wall::Top) - wall_trace_integral(&fg, Wall::Bottom);
            assert!((lhs - rhs).abs() < 1e-9, "lhs {lhs} rhs {rhs}");
        }
    }

    #[test]
    fn solve_zero_rhs_dirichlet_gives_zero() {
        let (d, ops) = setup(2.0, 16, 17);
        let problem = EllipticProblem {
            helmholtz_shift: 0.0,
            bc_bottom: EllipticBc::homogeneous_dirichlet(&d),
            bc_top: EllipticBc::homogeneous_dirichlet(&d),
        };
        let rhs = ScalarField::zeros(&d);
        let g = ops.solve_elliptic(&problem, &rhs).unwrap();
        assert!(g.max_abs() < 1e-12);
    }

    #[test]
    fn manufactured_dirichlet_poisson() {
        let (d, ops) = setup(2.0, 32, 33);
        let k = 2.0 * PI / 2.0;
        let g_exact = ScalarField::from_fn(&d, |x, z| (k * x).sin() * (PI * z).sin());
        let rhs = ScalarField::from_fn(&d, |x, z| {
            -(k * k + PI * PI) * (k * x).sin() * (PI * z).sin()
        });
        let problem = EllipticProblem {
            helmholtz_shift: 0.0,
            bc_bottom: EllipticBc::homogeneous_dirichlet(&d),
            bc_top: EllipticBc::homogeneous_dirichlet(&d),
        };
        let g = ops.solve_elliptic(&problem, &rhs).unwrap();
        assert!(g.max_abs_diff(&g_exact) < 1e-8);
    }

    #[test]
    fn pure_neumann_poisson_zero_mean() {
        let (d, ops) = setup(2.0, 32, 33);
        let k = 2.0 * PI / 2.0;
        let rhs = ScalarField::from_fn(&d, |x, _| (k * x).cos());
        let problem = EllipticProblem {
            helmholtz_shift: 0.0,
            bc_bottom: EllipticBc::homogeneous_neumann(&d),
            bc_top: EllipticBc::homogeneous_neumann(&d),
        };
        let g = ops.solve_elliptic(&problem, &rhs).unwrap();
        let expected = ScalarField::from_fn(&d, |x, _| -(k * x).cos() / (k * k));
        assert!(g.max_abs_diff(&expected) < 1e-9);
        assert!(integrate(&g).unwrap().abs() < 1e-10);
    }

    #[test]
    fn pure_neumann_singular_mode() {
        let (d, ops) = setup(1.0, 16, 33);
        // g = cos(pi z): dg/dz = 0 at both walls, zero mean.
        let rhs = ScalarField::from_fn(&d, |_, z| -PI * PI * (PI * z).cos());
        let problem = EllipticProblem {
            helmholtz_shift: 0.0,
            bc_bottom: EllipticBc::homogeneous_neumann(&d),
            bc_top: EllipticBc::homogeneous_neumann(&d),
        };
        let g = ops.solve_elliptic(&problem, &rhs).unwrap();
        let expected = ScalarField::from_fn(&d, |_, z| (PI * z).cos());
        assert!(g.max_abs_diff(&expected) < 1e-9);
        assert!(integrate(&g).unwrap().abs() < 1e-11);
    }

    #[test]
    fn neumann_linear_solution_from_wall_data() {
        // rhs = 0 with dg/dz = c at both walls: g = c (z - 1/2), zero mean.
        let (d, ops) = setup(1.0, 16, 33);
        let c = 7.5;
        let problem = EllipticProblem {
            helmholtz_shift: 0.0,
            bc_bottom: EllipticBc::Neumann(vec![c; d.nx()]),
            bc_top: EllipticBc::Neumann(vec![c; d.nx()]),
        };
        let rhs = ScalarField::zeros(&d);
        let g = ops.solve_elliptic(&problem, &rhs).unwrap();
        let expected = ScalarField::from_fn(&d, |_, z| c * (z - 0.5));
        assert!(g.max_abs_diff(&expected) < 1e-9);
    }

    #[test]
    fn incompatible_neumann_rejected() {
        let (d, ops) = setup(1.0, 16, 33);
        let problem = EllipticProblem {
            helmholtz_shift: 0.0,
            bc_bottom: EllipticBc::Neumann(vec![1.0; d.nx()]),
            bc_top: EllipticBc::homogeneous_neumann(&d),
        };
        let rhs = ScalarField::zeros(&d);
        match ops.solve_elliptic(&problem, &rhs) {
            Err(Error::IncompatibleNeumann { .. }) => {}
            other => panic!("expected IncompatibleNeumann, got {other:?}"),
        }
    }

    #[test]
    fn helmholtz_roundtrip_residual() {
        let (d, ops) = setup(2.0, 32, 33);
        let shift = 37.0;
        let rhs = ScalarField::from_fn(&d, |x, z| {
            (PI * x).cos() * (2.0 * z - 1.0) + 0.3 * (2.0 * PI * x).sin() * z * z
        });
        let problem = EllipticProblem {
            helmholtz_shift: shift,
            bc_bottom: EllipticBc::homogeneous_dirichlet(&d),
            bc_top: EllipticBc::homogeneous_dirichlet(&d),
        };
        let g = ops.solve_elliptic(&problem, &rhs).unwrap();
        let applied = {
            let lap = ops.laplacian(&g);
            lap.zip_with(&g, |l, gv| l - shift * gv)
        };
        // Interior residual relative to the rhs magnitude.
        let mut max_err: f64 = 0.0;
        for i in 0..d.nx() {
            for j in 1..d.nz() - 1 {
                max_err = max_err.max((applied.values()[[i, j]] - rhs.values()[[i, j]]).abs());
            }
        }
        let scale = norm(&rhs, NormOrder::LInf).unwrap();
        assert!(max_err / scale < 1e-9, "rel residual {}", max_err / scale);
    }

    #[test]
    fn velocity_from_streamfunction_single_mode() {
        let (d, ops) = setup(2.0, 32, 33);
        let k = 2.0 * PI / 2.0;
        let psi = ScalarField::from_fn(&d, |x, z| (k * x).sin() * (PI * z).sin());
        let u = ops.velocity_from_streamfunction(&psi).unwrap();
        let u1_exact = ScalarField::from_fn(&d, |x, z| -PI * (k * x).sin() * (PI * z).cos());
        let u2_exact = ScalarField::from_fn(&d, |x, z| k * (k * x).cos() * (PI * z).sin());
        assert!(u.u1.max_abs_diff(&u1_exact) < 1e-9);
        assert!(u.u2.max_abs_diff(&u2_exact) < 1e-9);
        // u2 vanishes identically on the walls.
        for i in 0..d.nx() {
            assert!(u.u2.values()[[i, 0]].abs() < 1e-12);
            assert!(u.u2.values()[[i, d.nz() - 1]].abs() < 1e-12);
        }
        assert!(divergence_ratio(&ops, &u) < 1e-9);
    }

    #[test]
    fn vorticity_wall_values_cases() {
        let u_bot = vec![1.0; 8];
        let u_top: Vec<f64> = (0..8).map(|i| (2.0 * PI * i as f64 / 8.0).sin()).collect();
        let (b, t) =
            SpectralOps::vorticity_wall_values(&u_bot, &u_top, f64::INFINITY).unwrap();
        assert!(b.iter().chain(t.iter()).all(|&v| v == 0.0));

        let (b, _) = SpectralOps::vorticity_wall_values(&u_bot, &u_top, 2.0).unwrap();
        assert!(b.iter().all(|&v| (v + 0.5).abs() < 1e-15));

        let (_, t) = SpectralOps::vorticity_wall_values(&u_bot, &u_top, 1.0).unwrap();
        for (got, want) in t.iter().zip(u_top.iter()) {
            assert_relative_eq!(got, want, epsilon = 1e-15);
        }

        assert!(SpectralOps::vorticity_wall_values(&u_bot, &u_top, 0.0).is_err());
        assert!(SpectralOps::vorticity_wall_values(&u_bot, &u_top, -1.0).is_err());
    }

    #[test]
    fn grad_identity_for_dirichlet_streamfunction() {
        // ||grad u||_2 = ||omega||_2 for u = grad^perp psi, psi = 0 on walls.
        let (d, ops) = setup(2.0, 32, 33);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut psi = ScalarField::zeros(&d);
            for kk in 1..4 {
                for mm in 1..4 {
                    let a: f64 = rng.gen_range(-1.0..1.0) / ((kk * kk + mm * mm) as f64);
                    let b: f64 = rng.gen_range(-1.0..1.0) / ((kk * kk + mm * mm) as f64);
                    let phase = ScalarField::from_fn(&d, |x, z| {
                        (a * (PI * kk as f64 * x).cos() + b * (PI * kk as f64 * x).sin())
                            * (PI * mm as f64 * z).sin()
                    });
                    psi = &psi + &phase;
                }
            }
            let u = ops.velocity_from_streamfunction(&psi).unwrap();
            let omega = ops.laplacian(&psi);
            let d11 = ops.ddx(&u.u1);
            let d12 = ops.ddz(&u.u1);
            let d21 = ops.ddx(&u.u2);
            let d22 = ops.ddz(&u.u2);
            let grad_sq = integrate(
                &d11.zip_with(&d12, |a, b| a * a + b * b)
                    .zip_with(&d21.zip_with(&d22, |a, b| a * a + b * b), |a, b| a + b),
            )
            .unwrap();
            let omega_sq = integrate(&omega.map(|v| v * v)).unwrap();
            let rel = ((grad_sq.sqrt() - omega_sq.sqrt()) / omega_sq.sqrt()).abs();
            assert!(rel < 1e-8, "rel {rel}");
        }
    }

    #[test]
    fn dealias_removes_high_modes() {
        let (d, ops) = setup(2.0, 32, 17);
        // Mode 12 > 32/3 must vanish, mode 3 must survive.
        let mut f = ScalarField::from_fn(&d, |x, _| {
            (2.0 * PI * 3.0 * x / 2.0).cos() + (2.0 * PI * 12.0 * x / 2.0).cos()
        });
        ops.dealias(&mut f);
        let expected = ScalarField::from_fn(&d, |x, _| (2.0 * PI * 3.0 * x / 2.0).cos());
        assert!(f.max_abs_diff(&expected) < 1e-12);
    }
}
