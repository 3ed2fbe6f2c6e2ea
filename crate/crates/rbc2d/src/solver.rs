//! Time integration of the Boussinesq system in vorticity-streamfunction
//! form with Navier-slip walls.
//!
//! One step advances `(omega, T)` with an IMEX scheme: Crank-Nicolson on
//! the diffusion, second-order Adams-Bashforth on advection and buoyancy
//! (Euler on the first step). The streamfunction then solves
//! `Delta psi = omega` with homogeneous Dirichlet walls, `u = grad^perp
//! psi`, and the vorticity wall rows are overwritten with the slip
//! closure `omega = -u1/L_s` (bottom) / `omega = +u1/L_s` (top); one
//! fixed-point sweep per step, no inner iteration.
//!
//! The prognostic fields live in the 2/3-dealiased Fourier band. Since
//! the nonlinear terms are truncated to that band and the linear terms
//! do not couple bands, modes above the cutoff stay exactly zero for
//! band-limited initial data; initial data are projected onto the band.
//!
//! At `Pr = inf` the vorticity solves the stationary balance
//! `-Delta omega = Ra dT/dx1` each step.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Zip};
use rustfft::num_complex::Complex;

use crate::domain::{Domain, ScalarField, VectorField, Wall};
use crate::error::{Error, Result};
use crate::operators::{
    BcKind, EllipticBc, EllipticProblem, ModeFamilyEntry, SpectralOps, Spectrum,
};

/// Relative tolerance on the Neumann compatibility defect of the
/// recovered pressure; a larger defect signals an inconsistent state.
pub const PRESSURE_COMPAT_TOL: f64 = 1e-4;

/// Dimensionless control parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysParams {
    /// Rayleigh number.
    pub ra: f64,
    /// Prandtl number; `inf` selects the stationary-vorticity limit.
    pub pr: f64,
    /// Slip length; `inf` is free-slip. `ls = 0` (no-slip) is rejected.
    pub ls: f64,
    /// Aspect ratio of the periodic cell.
    pub gamma: f64,
}

impl PhysParams {
    pub fn new(ra: f64, pr: f64, ls: f64, gamma: f64) -> Result<Self> {
        if !(ra.is_finite() && ra > 0.0) {
            return Err(Error::invalid(format!("ra must be positive and finite, got {ra}")));
        }
        if !(pr > 0.0) || pr.is_nan() {
            return Err(Error::invalid(format!("pr must be positive, got {pr}")));
        }
        if !(ls > 0.0) || ls.is_nan() {
            return Err(Error::invalid(format!(
                "ls must be positive (ls = 0 no-slip is not supported), got {ls}"
            )));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
        }
        Ok(PhysParams { ra, pr, ls, gamma })
    }

    pub fn free_slip(&self) -> bool {
        self.ls.is_infinite()
    }

    pub fn infinite_pr(&self) -> bool {
        self.pr.is_infinite()
    }

    /// `1/L_s`, zero for free-slip.
    pub fn inv_ls(&self) -> f64 {
        if self.free_slip() {
            0.0
        } else {
            1.0 / self.ls
        }
    }

    /// `1/Pr`, zero in the infinite-Prandtl limit.
    pub fn inv_pr(&self) -> f64 {
        if self.infinite_pr() {
            0.0
        } else {
            1.0 / self.pr
        }
    }
}

/// Dimensional inputs of the physical problem.
#[derive(Debug, Clone, Copy)]
pub struct Nondim {
    pub g: f64,
    pub alpha: f64,
    pub delta_t: f64,
    pub h: f64,
    pub kappa: f64,
    pub nu: f64,
}

/// `Ra = g alpha dT h^3 / (kappa nu)`, `Pr = nu / kappa`.
pub fn nondimensionalize(n: &Nondim) -> Result<(f64, f64)> {
    for (name, v) in [
        ("g", n.g),
        ("alpha", n.alpha),
        ("delta_t", n.delta_t),
        ("h", n.h),
        ("kappa", n.kappa),
        ("nu", n.nu),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::invalid(format!("{name} must be positive, got {v}")));
        }
    }
    let ra = n.g * n.alpha * n.delta_t * n.h.powi(3) / (n.kappa * n.nu);
    let pr = n.nu / n.kappa;
    Ok((ra, pr))
}

/// Full prognostic state plus derived fields.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub temperature: ScalarField,
    pub vorticity: ScalarField,
    pub streamfunction: ScalarField,
    pub velocity: VectorField,
    pub time: f64,
}

impl FlowState {
    pub fn is_finite(&self) -> bool {
        self.temperature.is_finite()
            && self.vorticity.is_finite()
            && self.streamfunction.is_finite()
            && self.velocity.is_finite()
    }

    pub fn domain(&self) -> &Arc<Domain> {
        self.temperature.domain()
    }
}

/// Initial condition: a temperature field and a streamfunction. Taking
/// the velocity through a streamfunction makes it divergence-free and
/// wall-impermeable by construction.
#[derive(Debug, Clone)]
pub struct InitialCondition {
    pub temperature: ScalarField,
    pub streamfunction: ScalarField,
}

impl InitialCondition {
    /// Motionless conduction state `T = 1 - x2`.
    pub fn conduction(domain: &Arc<Domain>) -> Self {
        InitialCondition {
            temperature: ScalarField::from_fn(domain, |_, z| 1.0 - z),
            streamfunction: ScalarField::zeros(domain),
        }
    }

    /// Default run start: conduction profile with a single-mode thermal
    /// perturbation, fluid at rest.
    pub fn conduction_perturbed(domain: &Arc<Domain>, eps: f64) -> Self {
        let gamma = domain.gamma();
        InitialCondition {
            temperature: ScalarField::from_fn(domain, |x, z| {
                1.0 - z
                    + eps
                        * (std::f64::consts::PI * z).sin()
                        * (2.0 * std::f64::consts::PI * x / gamma).cos()
            }),
            streamfunction: ScalarField::zeros(domain),
        }
    }

    /// Seeded random multi-mode thermal perturbation of the conduction
    /// state; amplitudes decay with the mode numbers.
    pub fn random_perturbation(domain: &Arc<Domain>, eps: f64, seed: u64) -> Self {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma = domain.gamma();
        let kmax = 4usize;
        let mmax = 4usize;
        let coeffs: Vec<(f64, f64)> =
            (0..kmax * mmax).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(0.0..std::f64::consts::TAU))).collect();
        let temperature = ScalarField::from_fn(domain, |x, z| {
            let mut v = 1.0 - z;
            for k in 0..kmax {
                for m in 1..=mmax {
                    let (a, phase) = coeffs[k * mmax + (m - 1)];
                    let decay = 1.0 / ((1 + k * k + m * m) as f64);
                    v += eps
                        * a
                        * decay
                        * (std::f64::consts::PI * m as f64 * z).sin()
                        * (std::f64::consts::TAU * k as f64 * x / gamma + phase).cos();
                }
            }
            v.clamp(0.0, 1.0)
        });
        InitialCondition { temperature, streamfunction: ScalarField::zeros(domain) }
    }

    pub fn validate(&self, ops: &SpectralOps) -> Result<()> {
        self.temperature.ensure_finite("initial temperature")?;
        self.streamfunction.ensure_finite("initial streamfunction")?;
        let (min, max) = self
            .temperature
            .values()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let tol = 1e-12;
        if min < -tol || max > 1.0 + tol {
            return Err(Error::invalid(format!(
                "initial temperature range [{min}, {max}] violates 0 <= T0 <= 1"
            )));
        }
        let u = ops.velocity_from_streamfunction(&self.streamfunction)?;
        let div = crate::operators::divergence_ratio(ops, &u);
        if div > 1e-9 {
            return Err(Error::invalid(format!("initial velocity divergence ratio {div}")));
        }
        Ok(())
    }
}

/// Time-step selection policy.
#[derive(Debug, Clone, Copy)]
pub enum DtPolicy {
    Fixed(f64),
    /// Advective CFL with the given safety factor, capped by `dt_max`,
    /// re-evaluated every `recheck` steps.
    Cfl { safety: f64, dt_max: f64, recheck: u64 },
}

impl DtPolicy {
    pub fn default_cfl() -> Self {
        DtPolicy::Cfl { safety: 0.4, dt_max: 5e-4, recheck: 16 }
    }

    pub fn recheck_every(&self) -> u64 {
        match self {
            DtPolicy::Fixed(_) => 64,
            DtPolicy::Cfl { recheck, .. } => (*recheck).max(1),
        }
    }
}

/// When to emit samples during a run.
#[derive(Debug, Clone, Copy)]
pub enum SampleStride {
    /// Sample once at least this much simulated time has elapsed since
    /// the previous sample.
    Time(f64),
    /// Sample every fixed number of steps.
    Steps(u64),
}

#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub dt_policy: DtPolicy,
    pub t_end: f64,
    pub stride: SampleStride,
    /// Fraction of the horizon discarded before averaging.
    pub spinup_frac: f64,
}

impl Schedule {
    pub fn new(t_end: f64) -> Self {
        Schedule {
            dt_policy: DtPolicy::default_cfl(),
            t_end,
            stride: SampleStride::Time(0.05),
            spinup_frac: 0.5,
        }
    }
}

/// The integrator. Owns the prognostic spectra and all scratch buffers;
/// one simulation is driven by one thread, only the per-mode solves and
/// transforms inside a step run data-parallel.
pub struct Simulation {
    params: PhysParams,
    domain: Arc<Domain>,
    ops: Arc<SpectralOps>,
    /// Kept modes (2/3 band): rows of every spectrum below.
    active: usize,
    time: f64,
    steps: u64,
    dt: f64,
    // Prognostic / derived spectra.
    t_hat: Spectrum,
    w_hat: Spectrum,
    psi_hat: Spectrum,
    u1_hat: Spectrum,
    u2_hat: Spectrum,
    // Physical-space copies (advection, diagnostics).
    t_phys: Array2<f64>,
    w_phys: Array2<f64>,
    u1_phys: Array2<f64>,
    u2_phys: Array2<f64>,
    // AB history of explicit terms.
    e_t_prev: Spectrum,
    e_w_prev: Spectrum,
    e_t_cur: Spectrum,
    e_w_cur: Spectrum,
    have_history: bool,
    // Scratch.
    s_a: Spectrum,
    s_b: Spectrum,
    s_rhs: Spectrum,
    p_a: Array2<f64>,
    p_b: Array2<f64>,
    p_c: Array2<f64>,
    // Factor families for the current dt.
    fam_t: Vec<Arc<ModeFamilyEntry>>,
    fam_w: Vec<Arc<ModeFamilyEntry>>,
    fam_psi: Vec<Arc<ModeFamilyEntry>>,
    // Constant BC spectra for the temperature walls.
    t_bot_bc: Vec<Complex<f64>>,
    t_top_bc: Vec<Complex<f64>>,
    zeros_bc: Vec<Complex<f64>>,
    // Scratch BC spectra for the vorticity walls.
    w_bot_bc: Vec<Complex<f64>>,
    w_top_bc: Vec<Complex<f64>>,
    pub warnings: Vec<String>,
}

impl Simulation {
    pub fn new(
        ops: &Arc<SpectralOps>,
        params: PhysParams,
        init: &InitialCondition,
        dt_policy: DtPolicy,
    ) -> Result<Self> {
        init.validate(ops)?;
        let mut sim = Self::empty(ops, params)?;
        ops.forward_values(init.temperature.values(), &mut sim.t_hat);
        ops.forward_values(init.streamfunction.values(), &mut sim.psi_hat);
        // Derived fields consistent with the initial streamfunction:
        // omega = Delta psi with slip-consistent wall rows.
        sim.zero_wall_columns_psi();
        let mut lap = Spectrum::zeros(sim.active, sim.domain.nz());
        sim.laplacian_spectrum(&sim.psi_hat.clone(), &mut lap);
        sim.w_hat.assign_from(&lap);
        sim.update_velocity_spectra();
        sim.overwrite_vorticity_walls();
        sim.refresh_physical();
        let dt0 = sim.policy_dt(&dt_policy);
        sim.set_dt(dt0);
        Ok(sim)
    }

    /// Restart from an existing state (the explicit-term history
    /// restarts with an Euler step). The vorticity is taken as-is.
    pub fn from_state(
        ops: &Arc<SpectralOps>,
        params: PhysParams,
        state: &FlowState,
        dt_policy: DtPolicy,
    ) -> Result<Self> {
        state.temperature.ensure_finite("restart temperature")?;
        state.streamfunction.ensure_finite("restart streamfunction")?;
        state.vorticity.ensure_finite("restart vorticity")?;
        let mut sim = Self::empty(ops, params)?;
        ops.forward_values(state.temperature.values(), &mut sim.t_hat);
        ops.forward_values(state.streamfunction.values(), &mut sim.psi_hat);
        ops.forward_values(state.vorticity.values(), &mut sim.w_hat);
        sim.time = state.time;
        sim.zero_wall_columns_psi();
        sim.update_velocity_spectra();
        sim.refresh_physical();
        let dt0 = sim.policy_dt(&dt_policy);
        sim.set_dt(dt0);
        Ok(sim)
    }

    fn empty(ops: &Arc<SpectralOps>, params: PhysParams) -> Result<Self> {
        let domain = Arc::clone(ops.domain());
        if (params.gamma - domain.gamma()).abs() > 1e-14 {
            return Err(Error::invalid("params.gamma does not match the domain"));
        }
        let nz = domain.nz();
        let active = ops.dealias_max_mode() + 1;
        let mut t_bot_bc = vec![Complex::new(0.0, 0.0); active];
        t_bot_bc[0] = Complex::new(1.0, 0.0);
        let fam_psi = ops.build_family(0.0, (BcKind::Dirichlet, BcKind::Dirichlet), active);
        Ok(Simulation {
            params,
            domain: Arc::clone(&domain),
            ops: Arc::clone(ops),
            active,
            time: 0.0,
            steps: 0,
            dt: 0.0,
            t_hat: Spectrum::zeros(active, nz),
            w_hat: Spectrum::zeros(active, nz),
            psi_hat: Spectrum::zeros(active, nz),
            u1_hat: Spectrum::zeros(active, nz),
            u2_hat: Spectrum::zeros(active, nz),
            t_phys: Array2::zeros((domain.nx(), nz)),
            w_phys: Array2::zeros((domain.nx(), nz)),
            u1_phys: Array2::zeros((domain.nx(), nz)),
            u2_phys: Array2::zeros((domain.nx(), nz)),
            e_t_prev: Spectrum::zeros(active, nz),
            e_w_prev: Spectrum::zeros(active, nz),
            e_t_cur: Spectrum::zeros(active, nz),
            e_w_cur: Spectrum::zeros(active, nz),
            have_history: false,
            s_a: Spectrum::zeros(active, nz),
            s_b: Spectrum::zeros(active, nz),
            s_rhs: Spectrum::zeros(active, nz),
            p_a: Array2::zeros((domain.nx(), nz)),
            p_b: Array2::zeros((domain.nx(), nz)),
            p_c: Array2::zeros((domain.nx(), nz)),
            fam_t: Vec::new(),
            fam_w: Vec::new(),
            fam_psi,
            t_bot_bc,
            t_top_bc: vec![Complex::new(0.0, 0.0); active],
            zeros_bc: vec![Complex::new(0.0, 0.0); active],
            w_bot_bc: vec![Complex::new(0.0, 0.0); active],
            w_top_bc: vec![Complex::new(0.0, 0.0); active],
            warnings: Vec::new(),
        })
    }

    pub fn params(&self) -> &PhysParams {
        &self.params
    }

    pub fn ops(&self) -> &Arc<SpectralOps> {
        &self.ops
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Change the time step; refactors the implicit solves. At `Pr = 1`
    /// the temperature and vorticity share one factor family, and at
    /// `Pr = inf` the vorticity reuses the Poisson family.
    pub fn set_dt(&mut self, dt: f64) {
        assert!(dt.is_finite() && dt > 0.0, "dt must be positive, got {dt}");
        if dt == self.dt {
            return;
        }
        self.dt = dt;
        let dd = (BcKind::Dirichlet, BcKind::Dirichlet);
        let shift_t = 2.0 / dt;
        self.fam_t = self.ops.build_family(shift_t, dd, self.active);
        if self.params.infinite_pr() {
            self.fam_w = self.fam_psi.clone();
        } else if self.params.pr == 1.0 {
            self.fam_w = self.fam_t.clone();
        } else {
            let shift_w = 2.0 / (dt * self.params.pr);
            self.fam_w = self.ops.build_family(shift_w, dd, self.active);
        }
        // A dt change breaks the AB2 history consistency; restart with
        // an Euler step.
        self.have_history = false;
    }

    /// Advective CFL limit from the current velocity plus a startup cap
    /// for the explicitly coupled buoyancy term; `dt_max` caps the result.
    pub fn cfl_dt(&self, safety: f64, dt_max: f64) -> f64 {
        let nx = self.domain.nx();
        let nz = self.domain.nz();
        let dx = self.domain.dx();
        let z = self.domain.z_nodes();

        let mut u1_max = 0.0_f64;
        for &v in self.u1_phys.iter() {
            u1_max = u1_max.max(v.abs());
        }
        let mut dt = dt_max;
        if u1_max > 0.0 {
            dt = dt.min(safety * dx / u1_max);
        }
        // Vertical: per-node spacing against the column maximum of |u2|;
        // u2 vanishes quadratically at the walls, so the local ratio
        // stays meaningful on the clustered grid.
        for j in 0..nz {
            let dz = if j == 0 {
                z[1] - z[0]
            } else if j == nz - 1 {
                z[nz - 1] - z[nz - 2]
            } else {
                (z[j + 1] - z[j]).min(z[j] - z[j - 1])
            };
            let mut u2_max = 0.0_f64;
            for i in 0..nx {
                u2_max = u2_max.max(self.u2_phys[[i, j]].abs());
            }
            if u2_max > 0.0 {
                dt = dt.min(safety * dz / u2_max);
            }
        }
        // Buoyancy is explicit; cap the step by the fastest convective
        // growth rate so the start from rest stays stable.
        if !self.params.infinite_pr() {
            let growth = (self.params.ra * self.params.pr.max(1.0)).sqrt();
            dt = dt.min(0.5 / growth.max(1.0));
        }
        dt
    }

    fn policy_dt(&self, policy: &DtPolicy) -> f64 {
        match policy {
            DtPolicy::Fixed(dt) => *dt,
            DtPolicy::Cfl { safety, dt_max, .. } => self.cfl_dt(*safety, *dt_max),
        }
    }

    /// Re-evaluate the dt policy; returns true if the step changed.
    pub fn apply_dt_policy(&mut self, policy: &DtPolicy) -> bool {
        match policy {
            DtPolicy::Fixed(dt) => {
                let target = self.cfl_dt(1.0, f64::INFINITY);
                if *dt > target && self.warnings.len() < 32 {
                    self.warnings.push(format!(
                        "fixed dt {dt:.3e} exceeds the advective CFL limit {target:.3e} at t = {:.4}",
                        self.time
                    ));
                }
                false
            }
            DtPolicy::Cfl { safety, dt_max, .. } => {
                let target = self.cfl_dt(*safety, *dt_max);
                if target < self.dt || target > 1.6 * self.dt {
                    // Shrink immediately; grow reluctantly to limit
                    // refactorization churn.
                    let new_dt = if target < self.dt { target } else { 1.4 * self.dt };
                    self.set_dt(new_dt);
                    true
                } else {
                    false
                }
            }
        }
    }

    /// One IMEX step. Fails with `BlowUp` when non-finite values appear.
    pub fn step(&mut self) -> Result<()> {
        let dt = self.dt;
        let pr = self.params.pr;
        let ra = self.params.ra;
        let nz = self.domain.nz();

        // Explicit terms at time n: E_T = -u . grad T and, at finite Pr,
        // E_w = Pr Ra dT/dx1 - u . grad omega.
        self.s_a.assign_from(&self.t_hat);
        self.ops.ddx_spectrum_inplace(&mut self.s_a);
        self.ops.inverse_values(&self.s_a, &mut self.p_a); // dT/dx1
        plane_dgemm(&self.t_hat, self.ops.diff_z_t(), &mut self.s_b);
        self.ops.inverse_values(&self.s_b, &mut self.p_b); // dT/dx2

        Zip::from(&mut self.p_c)
            .and(&self.u1_phys)
            .and(&self.u2_phys)
            .and(&self.p_a)
            .and(&self.p_b)
            .for_each(|out, &u1, &u2, &fx, &fz| *out = -(u1 * fx + u2 * fz));
        {
            let (p_c, e_t_cur) = (&self.p_c, &mut self.e_t_cur);
            self.ops.forward_values(p_c, e_t_cur);
        }

        if !self.params.infinite_pr() {
            self.s_a.assign_from(&self.w_hat);
            self.ops.ddx_spectrum_inplace(&mut self.s_a);
            self.ops.inverse_values(&self.s_a, &mut self.p_a); // dw/dx1
            plane_dgemm(&self.w_hat, self.ops.diff_z_t(), &mut self.s_b);
            self.ops.inverse_values(&self.s_b, &mut self.p_b); // dw/dx2
            Zip::from(&mut self.p_c)
                .and(&self.u1_phys)
                .and(&self.u2_phys)
                .and(&self.p_a)
                .and(&self.p_b)
                .for_each(|out, &u1, &u2, &fx, &fz| *out = -(u1 * fx + u2 * fz));
            {
                let (p_c, e_w_cur) = (&self.p_c, &mut self.e_w_cur);
                self.ops.forward_values(p_c, e_w_cur);
            }
            // + Pr Ra dT/dx1, assembled in spectral space.
            let ks = self.ops.wavenumbers();
            for m in 0..self.active {
                let c = pr * ra * ks[m];
                if c == 0.0 {
                    continue;
                }
                let t_re = self.t_hat.re.row(m);
                let t_im = self.t_hat.im.row(m);
                let mut w_re = self.e_w_cur.re.row_mut(m);
                let mut w_im = self.e_w_cur.im.row_mut(m);
                for j in 0..nz {
                    w_re[j] -= c * t_im[j];
                    w_im[j] += c * t_re[j];
                }
            }
        }

        // Temperature: (Delta - 2/dt) T1 = -(2/dt) T0 - Lap T0 - 2 AB2(E_T).
        let (c_new, c_old) = if self.have_history { (1.5, -0.5) } else { (1.0, 0.0) };
        {
            let shift_t = 2.0 / dt;
            plane_dgemm(&self.t_hat, self.ops.diff2_z_t(), &mut self.s_a);
            subtract_k2(&mut self.s_a, &self.t_hat, self.ops.wavenumbers());
            assemble_rhs(
                &mut self.s_rhs,
                &self.t_hat,
                -shift_t,
                &self.s_a,
                -1.0,
                &self.e_t_cur,
                -2.0 * c_new,
                &self.e_t_prev,
                -2.0 * c_old,
            );
            let (rhs, out) = (&self.s_rhs, &mut self.t_hat);
            self.ops.solve_modes_with(&self.fam_t, rhs, &self.t_bot_bc, &self.t_top_bc, out);
        }

        // Vorticity, with slip wall values lagged by one sweep.
        self.fill_slip_bc();
        if self.params.infinite_pr() {
            // -Delta w = Ra dT/dx1 with the fresh temperature.
            let ks = self.ops.wavenumbers();
            for m in 0..self.active {
                let k = ks[m];
                let t_re = self.t_hat.re.row(m);
                let t_im = self.t_hat.im.row(m);
                let mut r_re = self.s_rhs.re.row_mut(m);
                let mut r_im = self.s_rhs.im.row_mut(m);
                for j in 0..nz {
                    r_re[j] = ra * k * t_im[j];
                    r_im[j] = -ra * k * t_re[j];
                }
            }
            let (rhs, out) = (&self.s_rhs, &mut self.w_hat);
            self.ops.solve_modes_with(&self.fam_w, rhs, &self.w_bot_bc, &self.w_top_bc, out);
        } else {
            let shift_w = 2.0 / (dt * pr);
            plane_dgemm(&self.w_hat, self.ops.diff2_z_t(), &mut self.s_a);
            subtract_k2(&mut self.s_a, &self.w_hat, self.ops.wavenumbers());
            assemble_rhs(
                &mut self.s_rhs,
                &self.w_hat,
                -shift_w,
                &self.s_a,
                -1.0,
                &self.e_w_cur,
                -(2.0 / pr) * c_new,
                &self.e_w_prev,
                -(2.0 / pr) * c_old,
            );
            let (rhs, out) = (&self.s_rhs, &mut self.w_hat);
            self.ops.solve_modes_with(&self.fam_w, rhs, &self.w_bot_bc, &self.w_top_bc, out);
        }

        // Streamfunction and velocity.
        {
            let (rhs, out) = (&self.w_hat, &mut self.psi_hat);
            self.ops.solve_modes_with(&self.fam_psi, rhs, &self.zeros_bc, &self.zeros_bc, out);
        }
        self.zero_wall_columns_psi();
        self.update_velocity_spectra();
        self.overwrite_vorticity_walls();
        self.refresh_physical();

        std::mem::swap(&mut self.e_t_prev, &mut self.e_t_cur);
        std::mem::swap(&mut self.e_w_prev, &mut self.e_w_cur);
        self.have_history = true;

        self.time += dt;
        self.steps += 1;

        if !self.finite_check() {
            return Err(Error::BlowUp { step: self.steps, time: self.time });
        }
        Ok(())
    }

    fn finite_check(&self) -> bool {
        self.t_phys.iter().all(|v| v.is_finite()) && self.w_phys.iter().all(|v| v.is_finite())
    }

    fn fill_slip_bc(&mut self) {
        let inv_ls = self.params.inv_ls();
        let nz = self.domain.nz();
        for m in 0..self.active {
            let b = Complex::new(self.u1_hat.re[[m, 0]], self.u1_hat.im[[m, 0]]);
            let t = Complex::new(self.u1_hat.re[[m, nz - 1]], self.u1_hat.im[[m, nz - 1]]);
            self.w_bot_bc[m] = -b * inv_ls;
            self.w_top_bc[m] = t * inv_ls;
        }
    }

    fn overwrite_vorticity_walls(&mut self) {
        let inv_ls = self.params.inv_ls();
        let nz = self.domain.nz();
        for m in 0..self.active {
            self.w_hat.re[[m, 0]] = -self.u1_hat.re[[m, 0]] * inv_ls;
            self.w_hat.im[[m, 0]] = -self.u1_hat.im[[m, 0]] * inv_ls;
            self.w_hat.re[[m, nz - 1]] = self.u1_hat.re[[m, nz - 1]] * inv_ls;
            self.w_hat.im[[m, nz - 1]] = self.u1_hat.im[[m, nz - 1]] * inv_ls;
        }
    }

    fn zero_wall_columns_psi(&mut self) {
        let nz = self.domain.nz();
        for m in 0..self.active {
            self.psi_hat.re[[m, 0]] = 0.0;
            self.psi_hat.im[[m, 0]] = 0.0;
            self.psi_hat.re[[m, nz - 1]] = 0.0;
            self.psi_hat.im[[m, nz - 1]] = 0.0;
        }
    }

    fn update_velocity_spectra(&mut self) {
        // u1 = -d psi/dx2, u2 = d psi/dx1.
        plane_dgemm(&self.psi_hat, self.ops.diff_z_t(), &mut self.u1_hat);
        self.u1_hat.re.mapv_inplace(|v| -v);
        self.u1_hat.im.mapv_inplace(|v| -v);
        self.u2_hat.assign_from(&self.psi_hat);
        self.ops.ddx_spectrum_inplace(&mut self.u2_hat);
    }

    fn refresh_physical(&mut self) {
        self.ops.inverse_values(&self.t_hat, &mut self.t_phys);
        self.ops.inverse_values(&self.w_hat, &mut self.w_phys);
        self.ops.inverse_values(&self.u1_hat, &mut self.u1_phys);
        self.ops.inverse_values(&self.u2_hat, &mut self.u2_phys);
    }

    /// `Lap f` in spectral space: `f . D2^T - k^2 f`.
    fn laplacian_spectrum(&self, f: &Spectrum, out: &mut Spectrum) {
        plane_dgemm(f, self.ops.diff2_z_t(), out);
        subtract_k2(out, f, self.ops.wavenumbers());
    }

    /// Materialize the full state (copies).
    pub fn state(&self) -> FlowState {
        let d = &self.domain;
        FlowState {
            temperature: ScalarField::from_values(d, self.t_phys.clone()).unwrap(),
            vorticity: ScalarField::from_values(d, self.w_phys.clone()).unwrap(),
            streamfunction: {
                let mut psi = Array2::zeros((d.nx(), d.nz()));
                self.ops.inverse_values(&self.psi_hat, &mut psi);
                ScalarField::from_values(d, psi).unwrap()
            },
            velocity: VectorField {
                u1: ScalarField::from_values(d, self.u1_phys.clone()).unwrap(),
                u2: ScalarField::from_values(d, self.u2_phys.clone()).unwrap(),
            },
            time: self.time,
        }
    }
}

impl Spectrum {
    fn assign_from(&mut self, other: &Spectrum) {
        self.re.assign(&other.re);
        self.im.assign(&other.im);
    }
}

/// `out = a . bt` on both planes.
fn plane_dgemm(a: &Spectrum, bt: &Array2<f64>, out: &mut Spectrum) {
    ndarray::linalg::general_mat_mul(1.0, &a.re, bt, 0.0, &mut out.re);
    ndarray::linalg::general_mat_mul(1.0, &a.im, bt, 0.0, &mut out.im);
}

/// `out -= k_m^2 f` row by row.
fn subtract_k2(out: &mut Spectrum, f: &Spectrum, ks: &[f64]) {
    for m in 0..out.re.nrows() {
        let k2 = ks[m] * ks[m];
        if k2 == 0.0 {
            continue;
        }
        let f_re = f.re.row(m);
        let f_im = f.im.row(m);
        let mut o_re = out.re.row_mut(m);
        let mut o_im = out.im.row_mut(m);
        for j in 0..f_re.len() {
            o_re[j] -= k2 * f_re[j];
            o_im[j] -= k2 * f_im[j];
        }
    }
}

/// `rhs = ca*a + cb*b + cc*c + cd*d` elementwise on both planes.
#[allow(clippy::too_many_arguments)]
fn assemble_rhs(
    rhs: &mut Spectrum,
    a: &Spectrum,
    ca: f64,
    b: &Spectrum,
    cb: f64,
    c: &Spectrum,
    cc: f64,
    d: &Spectrum,
    cd: f64,
) {
    Zip::from(&mut rhs.re)
        .and(&a.re)
        .and(&b.re)
        .and(&c.re)
        .and(&d.re)
        .for_each(|r, &av, &bv, &cv, &dv| *r = ca * av + cb * bv + cc * cv + cd * dv);
    Zip::from(&mut rhs.im)
        .and(&a.im)
        .and(&b.im)
        .and(&c.im)
        .and(&d.im)
        .for_each(|r, &av, &bv, &cv, &dv| *r = ca * av + cb * bv + cc * cv + cd * dv);
}

/// Single-step convenience wrapper matching the operational contract:
/// advance a state by one IMEX step (with an Euler bootstrap for the
/// explicit terms, since no history is available).
pub fn step_once(
    ops: &Arc<SpectralOps>,
    state: &FlowState,
    params: &PhysParams,
    dt: f64,
) -> Result<FlowState> {
    let mut sim = Simulation::from_state(ops, *params, state, DtPolicy::Fixed(dt))?;
    sim.step()?;
    Ok(sim.state())
}

/// Recover the pressure from an instantaneous state:
/// `Delta p = -(1/Pr) grad u^T : grad u + Ra dT/dx2` with Neumann data
/// `dp/dx2 = (1/L_s) du1/dx1` at the top and
/// `dp/dx2 = Ra - (1/L_s) du1/dx1` at the bottom. The mean (k = 0)
/// compatibility defect of the discrete data is projected out; a defect
/// beyond `PRESSURE_COMPAT_TOL` (relative) signals an inconsistent state
/// and fails. The result has zero mean.
pub fn recover_pressure(
    ops: &SpectralOps,
    state: &FlowState,
    params: &PhysParams,
) -> Result<ScalarField> {
    let domain = state.domain();
    let inv_ls = params.inv_ls();
    let inv_pr = params.inv_pr();

    let dz_t = ops.ddz(&state.temperature);
    let mut rhs = dz_t.scaled(params.ra);
    if inv_pr != 0.0 {
        let d11 = ops.ddx(&state.velocity.u1);
        let d12 = ops.ddz(&state.velocity.u1);
        let d21 = ops.ddx(&state.velocity.u2);
        let d22 = ops.ddz(&state.velocity.u2);
        // grad u^T : grad u = d11^2 + 2 d21 d12 + d22^2.
        let nl = d11.zip_with(&d22, |a, b| a * a + b * b);
        let cross = d21.zip_with(&d12, |a, b| 2.0 * a * b);
        let nl = &nl + &cross;
        crate::operators::axpy(-inv_pr, &nl, &mut rhs);
    }

    let du1dx = ops.ddx(&state.velocity.u1);
    let bot_profile: Vec<f64> =
        du1dx.wall_values(Wall::Bottom).iter().map(|&v| params.ra - inv_ls * v).collect();
    let top_profile: Vec<f64> =
        du1dx.wall_values(Wall::Top).iter().map(|&v| inv_ls * v).collect();

    // Compatibility of the mean mode: int rhs = flux(top) - flux(bottom),
    // both per unit horizontal length.
    let bot_mean = bot_profile.iter().sum::<f64>() / bot_profile.len() as f64;
    let top_mean = top_profile.iter().sum::<f64>() / top_profile.len() as f64;
    let rhs_mean_profile = crate::domain::horizontal_average_unchecked(&rhs);
    let rhs_int = domain.quadrature(&rhs_mean_profile);
    let defect = (top_mean - bot_mean) - rhs_int;
    let scale = rhs_int.abs().max(top_mean.abs()).max(bot_mean.abs()).max(1e-300);
    if defect.abs() / scale > PRESSURE_COMPAT_TOL && defect.abs() > PRESSURE_COMPAT_TOL {
        return Err(Error::IncompatibleNeumann { defect, scale, rel: defect.abs() / scale });
    }
    // Project the defect onto the uniform mode of the right-hand side.
    let mut rhs = rhs;
    if defect != 0.0 {
        rhs.values_mut().mapv_inplace(|v| v + defect);
    }

    let problem = EllipticProblem {
        helmholtz_shift: 0.0,
        bc_bottom: EllipticBc::Neumann(bot_profile),
        bc_top: EllipticBc::Neumann(top_profile),
    };
    ops.solve_elliptic(&problem, &rhs)
}

// ----- snapshot io -----------------------------------------------------

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"RBNS";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Write the binary snapshot: magic, version u32, nx u32, nz u32, then
/// f64 gamma, ra, pr, ls (inf encoded as IEEE +inf), time, then the
/// row-major f64 arrays T, omega, psi; everything little-endian.
pub fn write_snapshot(path: &Path, state: &FlowState, params: &PhysParams) -> Result<()> {
    let d = state.domain();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_u32::<LittleEndian>(SNAPSHOT_VERSION)?;
    w.write_u32::<LittleEndian>(d.nx() as u32)?;
    w.write_u32::<LittleEndian>(d.nz() as u32)?;
    for v in [params.gamma, params.ra, params.pr, params.ls, state.time] {
        w.write_f64::<LittleEndian>(v)?;
    }
    for field in [&state.temperature, &state.vorticity, &state.streamfunction] {
        for v in field.values().iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a snapshot back; the velocity is rebuilt from the streamfunction.
pub fn read_snapshot(path: &Path) -> Result<(PhysParams, FlowState)> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    if file_len < 16 {
        return Err(Error::Snapshot(format!(
            "truncated file: {file_len} bytes is too short for a header"
        )));
    }
    r.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::Snapshot(format!(
            "bad magic {magic:?}, expected {SNAPSHOT_MAGIC:?}"
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Snapshot(format!("unsupported version {version}")));
    }
    let nx = r.read_u32::<LittleEndian>()? as usize;
    let nz = r.read_u32::<LittleEndian>()? as usize;
    let expected = (4 + 4 + 8 + 5 * 8 + 3 * 8 * nx * nz) as u64;
    if file_len != expected {
        return Err(Error::Snapshot(format!(
            "truncated or oversized file: expected {expected} bytes for nx={nx}, nz={nz}, got {file_len}"
        )));
    }
    let gamma = r.read_f64::<LittleEndian>()?;
    let ra = r.read_f64::<LittleEndian>()?;
    let pr = r.read_f64::<LittleEndian>()?;
    let ls = r.read_f64::<LittleEndian>()?;
    let time = r.read_f64::<LittleEndian>()?;
    let params = PhysParams::new(ra, pr, ls, gamma)?;
    let domain = Domain::new(gamma, nx, nz)?;
    let mut read_field = || -> Result<ScalarField> {
        let mut values = Array2::zeros((nx, nz));
        for v in values.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        ScalarField::from_values(&domain, values)
    };
    let temperature = read_field()?;
    let vorticity = read_field()?;
    let streamfunction = read_field()?;
    let ops = SpectralOps::new(&domain);
    let velocity = ops.velocity_from_streamfunction(&streamfunction)?;
    Ok((params, FlowState { temperature, vorticity, streamfunction, velocity, time }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn setup(gamma: f64, nx: usize, nz: usize) -> (Arc<Domain>, Arc<SpectralOps>) {
        let d = Domain::new(gamma, nx, nz).unwrap();
        let ops = Arc::new(SpectralOps::new(&d));
        (d, ops)
    }

    #[test]
    fn params_validation() {
        assert!(PhysParams::new(1e5, 1.0, 1.0, 2.0).is_ok());
        assert!(PhysParams::new(1e5, f64::INFINITY, f64::INFINITY, 2.0).is_ok());
        assert!(PhysParams::new(0.0, 1.0, 1.0, 2.0).is_err());
        assert!(PhysParams::new(1e5, 1.0, 0.0, 2.0).is_err());
        assert!(PhysParams::new(1e5, -1.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn nondimensionalize_cases() {
        let unit = Nondim { g: 1.0, alpha: 1.0, delta_t: 1.0, h: 1.0, kappa: 1.0, nu: 1.0 };
        assert_eq!(nondimensionalize(&unit).unwrap(), (1.0, 1.0));

        let visc = Nondim { nu: 2.0, ..unit };
        let (ra, pr) = nondimensionalize(&visc).unwrap();
        assert_relative_eq!(ra, 0.5);
        assert_relative_eq!(pr, 2.0);

        let tall = Nondim { h: 10.0, ..unit };
        let (ra, pr) = nondimensionalize(&tall).unwrap();
        assert_relative_eq!(ra, 1000.0);
        assert_relative_eq!(pr, 1.0);

        assert!(nondimensionalize(&Nondim { g: -1.0, ..unit }).is_err());
    }

    #[test]
    fn conduction_is_fixed_point_per_step() {
        let (d, ops) = setup(2.0, 32, 33);
        for (ls, pr) in [(0.1, 1.0), (1.0, 1.0), (f64::INFINITY, 1.0), (1.0, f64::INFINITY)] {
            let params = PhysParams::new(1e3, pr, ls, 2.0).unwrap();
            let init = InitialCondition::conduction(&d);
            let mut sim = Simulation::new(&ops, params, &init, DtPolicy::Fixed(1e-4)).unwrap();
            let t0 = sim.state();
            for _ in 0..20 {
                sim.step().unwrap();
            }
            let t1 = sim.state();
            let dt_err = t1.temperature.max_abs_diff(&t0.temperature) / 20.0;
            let dw = t1.vorticity.max_abs() / 20.0;
            assert!(dt_err < 1e-12, "ls={ls} pr={pr}: temperature drift {dt_err}");
            assert!(dw < 1e-12, "ls={ls} pr={pr}: vorticity drift {dw}");
        }
    }

    #[test]
    fn pure_diffusion_decay() {
        // Ra -> 0 keeps u ~ 0; the sin(pi z) temperature mode decays at
        // rate pi^2 with a CN-sized defect.
        let (d, ops) = setup(2.0, 16, 33);
        let params = PhysParams::new(1e-8, 1.0, 1.0, 2.0).unwrap();
        let eps = 1e-3;
        let init = InitialCondition {
            temperature: ScalarField::from_fn(&d, |_, z| 1.0 - z + eps * (PI * z).sin()),
            streamfunction: ScalarField::zeros(&d),
        };
        let dt = 1e-3;
        let mut sim = Simulation::new(&ops, params, &init, DtPolicy::Fixed(dt)).unwrap();
        let t_final = 0.1;
        let steps = (t_final / dt).round() as usize;
        for _ in 0..steps {
            sim.step().unwrap();
        }
        let state = sim.state();
        let decay = (-PI * PI * t_final).exp();
        let expected = ScalarField::from_fn(&d, |_, z| 1.0 - z + eps * decay * (PI * z).sin());
        let err = state.temperature.max_abs_diff(&expected);
        assert!(err < 1e-4 * eps, "diffusion error {err}");
    }

    #[test]
    fn richardson_second_order_in_time() {
        let (d, ops) = setup(2.0, 16, 17);
        let params = PhysParams::new(1e4, 1.0, 1.0, 2.0).unwrap();
        let init = InitialCondition::conduction_perturbed(&d, 0.01);
        let horizon = 0.02;
        let run = |dt: f64| -> ScalarField {
            let mut sim = Simulation::new(&ops, params, &init, DtPolicy::Fixed(dt)).unwrap();
            let steps = (horizon / dt).round() as usize;
            for _ in 0..steps {
                sim.step().unwrap();
            }
            sim.state().temperature
        };
        let dt0 = 4e-4;
        let reference = run(dt0 / 10.0);
        let e_coarse = run(dt0).max_abs_diff(&reference);
        let e_fine = run(dt0 / 2.0).max_abs_diff(&reference);
        let ratio = e_coarse / e_fine;
        assert!(
            (3.2..=4.8).contains(&ratio),
            "expected ~4x error reduction, got {ratio} ({e_coarse} / {e_fine})"
        );
    }

    #[test]
    fn blowup_detected() {
        let (d, ops) = setup(2.0, 16, 17);
        let params = PhysParams::new(1e8, 1.0, 1.0, 2.0).unwrap();
        let init = InitialCondition::conduction_perturbed(&d, 0.01);
        let mut sim = Simulation::new(&ops, params, &init, DtPolicy::Fixed(0.5)).unwrap();
        let mut failed = false;
        for _ in 0..200 {
            match sim.step() {
                Ok(()) => {}
                Err(Error::BlowUp { step, .. }) => {
                    assert!(step > 0);
                    failed = true;
                    break;
                }
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        assert!(failed, "expected blow-up detection");
    }

    #[test]
    fn slip_walls_satisfied_after_step() {
        let (d, ops) = setup(2.0, 32, 33);
        let params = PhysParams::new(1e5, 1.0, 0.5, 2.0).unwrap();
        let init = InitialCondition::conduction_perturbed(&d, 0.01);
        let mut sim = Simulation::new(&ops, params, &init, DtPolicy::default_cfl()).unwrap();
        for _ in 0..50 {
            sim.step().unwrap();
        }
        let state = sim.state();
        let u1_bot = state.velocity.u1.wall_values(Wall::Bottom);
        let u1_top = state.velocity.u1.wall_values(Wall::Top);
        let w_bot = state.vorticity.wall_values(Wall::Bottom);
        let w_top = state.vorticity.wall_values(Wall::Top);
        let scale = state.vorticity.max_abs().max(1e-12);
        for i in 0..d.nx() {
            assert!((w_bot[i] + u1_bot[i] / 0.5).abs() <= 1e-8 * scale);
            assert!((w_top[i] - u1_top[i] / 0.5).abs() <= 1e-8 * scale);
        }
        // u2 = 0 on the walls.
        for i in 0..d.nx() {
            assert!(state.velocity.u2.values()[[i, 0]].abs() < 1e-10);
            assert!(state.velocity.u2.values()[[i, d.nz() - 1]].abs() < 1e-10);
        }
    }

    #[test]
    fn hydrostatic_pressure_recovery() {
        let (d, ops) = setup(2.0, 16, 33);
        let params = PhysParams::new(1e4, 1.0, 1.0, 2.0).unwrap();
        let init = InitialCondition::conduction(&d);
        let sim = Simulation::new(&ops, params, &init, DtPolicy::Fixed(1e-4)).unwrap();
        let state = sim.state();
        let p = recover_pressure(&ops, &state, &params).unwrap();
        // p = Ra (z - z^2/2) + c with zero mean: c = -Ra/3.
        let expected =
            ScalarField::from_fn(&d, |_, z| params.ra * (z - 0.5 * z * z - 1.0 / 3.0));
        let rel = p.max_abs_diff(&expected) / params.ra;
        assert!(rel < 1e-9, "hydrostatic pressure error {rel}");
    }

    #[test]
    fn manufactured_pressure_recovery() {
        // u = 0, T = 1 - z + eps sin(k x) sin(pi z): fully analytic
        // pressure with mixed modes.
        let (d, ops) = setup(2.0, 32, 33);
        let ra = 1e5;
        let params = PhysParams::new(ra, 1.0, 1.0, 2.0).unwrap();
        let eps = 0.3;
        let k = 2.0 * PI / 2.0;
        let temperature =
            ScalarField::from_fn(&d, |x, z| 1.0 - z + eps * (k * x).sin() * (PI * z).sin());
        let state = FlowState {
            temperature,
            vorticity: ScalarField::zeros(&d),
            streamfunction: ScalarField::zeros(&d),
            velocity: VectorField::zeros(&d),
            time: 0.0,
        };
        let p = recover_pressure(&ops, &state, &params).unwrap();
        let amp = -ra * eps * PI / (PI * PI + k * k);
        let expected = ScalarField::from_fn(&d, |x, z| {
            ra * (z - 0.5 * z * z - 1.0 / 3.0) + amp * (k * x).sin() * (PI * z).cos()
        });
        let rel = p.max_abs_diff(&expected) / ra;
        assert!(rel < 1e-7, "manufactured pressure error {rel}");
    }

    #[test]
    fn snapshot_roundtrip_bitwise() {
        let (d, ops) = setup(2.0, 16, 17);
        let params = PhysParams::new(2.5e4, 0.7, f64::INFINITY, 2.0).unwrap();
        let init = InitialCondition::conduction_perturbed(&d, 0.01);
        let mut sim = Simulation::new(&ops, params, &init, DtPolicy::Fixed(1e-4)).unwrap();
        for _ in 0..10 {
            sim.step().unwrap();
        }
        let state = sim.state();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("state.rbns");
        write_snapshot(&path, &state, &params).unwrap();
        let (params2, state2) = read_snapshot(&path).unwrap();
        assert_eq!(params2.ra, params.ra);
        assert!(params2.ls.is_infinite());
        assert_eq!(state2.time, state.time);
        for (a, b) in [
            (&state.temperature, &state2.temperature),
            (&state.vorticity, &state2.vorticity),
            (&state.streamfunction, &state2.streamfunction),
        ] {
            for (x, y) in a.values().iter().zip(b.values().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn snapshot_error_paths() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("bad.rbns");

        std::fs::write(&path, b"NOPE").unwrap();
        match read_snapshot(&path) {
            Err(Error::Snapshot(msg)) => {
                assert!(msg.contains("bad magic") || msg.contains("truncated"), "{msg}")
            }
            other => panic!("expected snapshot error, got {other:?}"),
        }

        // Valid magic with an unsupported version.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(SNAPSHOT_MAGIC);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&17u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match read_snapshot(&path) {
            Err(Error::Snapshot(msg)) => assert!(msg.contains("unsupported version 2"), "{msg}"),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn snapshot_truncated_reports_sizes() {
        let (d, ops) = setup(2.0, 16, 17);
        let params = PhysParams::new(1e4, 1.0, 1.0, 2.0).unwrap();
        let init = InitialCondition::conduction(&d);
        let sim = Simulation::new(&ops, params, &init, DtPolicy::Fixed(1e-4)).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("trunc.rbns");
        write_snapshot(&path, &sim.state(), &params).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 100]).unwrap();
        match read_snapshot(&path) {
            Err(Error::Snapshot(msg)) => {
                assert!(msg.contains("expected") && msg.contains("got"), "{msg}");
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }
}
