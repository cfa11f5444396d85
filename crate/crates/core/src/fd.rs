//! Crank–Nicolson / Newton–Raphson reference solver for `∂t θ = r(θ) ∂xx θ`.
//!
//! Every time step solves the nonlinear system
//!
//! ```text
//! θⁿ⁺¹_i - Δt/2 · r(θⁿ⁺¹_i) D²θⁿ⁺¹_i = θⁿ_i + Δt/2 · r(θⁿ_i) D²θⁿ_i
//! ```
//!
//! with full Newton (the Jacobian keeps the `r'(θ)` term) and a direct
//! tridiagonal elimination per iteration. Dirichlet values are `θ_l` on the
//! left and the similarity solution on the right.

use crate::error::{Result, StefanError};
use crate::scalar::Real;
use crate::stefan::{
    effective_diffusivity, effective_diffusivity_prime, exact_theta, solve_lambda0, InterfaceConstant,
    StefanConfig,
};

/// Uniform space-time lattice covering `[x0, x1] x [t0, t1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid<T> {
    /// Node count including both boundary nodes.
    pub nx: usize,
    pub dx: T,
    pub dt: T,
    /// Number of time steps; there are `nt + 1` time levels.
    pub nt: usize,
    pub x0: T,
    pub t0: T,
}

impl<T: Real> Grid<T> {
    pub fn new(cfg: &StefanConfig<T>, nx: usize, nt: usize) -> Result<Self> {
        cfg.validate()?;
        if nx < 3 || nt < 1 {
            return Err(StefanError::InvalidConfig(format!("grid needs nx >= 3 and nt >= 1 (got {nx}, {nt})")));
        }
        Ok(Self {
            nx,
            dx: (cfg.x1 - cfg.x0) / T::from_usize(nx - 1).unwrap(),
            dt: (cfg.t1 - cfg.t0) / T::from_usize(nt).unwrap(),
            nt,
            x0: cfg.x0,
            t0: cfg.t0,
        })
    }

    /// Grid with `nx` nodes and the largest time step `<= dt` that divides the window.
    pub fn with_dt(cfg: &StefanConfig<T>, nx: usize, dt: T) -> Result<Self> {
        if !(dt > T::zero()) {
            return Err(StefanError::InvalidConfig("dt must be positive".into()));
        }
        Self::new(cfg, nx, steps_for(cfg.t1 - cfg.t0, dt)?)
    }

    /// Equal space and time steps `Δx = Δt = h`. `h` must divide the spatial
    /// domain; the time step is shrunk to the nearest divisor of the window.
    pub fn equal_steps(cfg: &StefanConfig<T>, h: T) -> Result<Self> {
        if !(h > T::zero()) {
            return Err(StefanError::InvalidConfig("h must be positive".into()));
        }
        let cells = ((cfg.x1 - cfg.x0) / h).round();
        if ((cfg.x1 - cfg.x0) / h - cells).abs() > T::lit(1e-6) {
            return Err(StefanError::InvalidConfig("h must divide the spatial domain".into()));
        }
        Self::new(cfg, cells.to_usize().unwrap() + 1, steps_for(cfg.t1 - cfg.t0, h)?)
    }

    pub fn x(&self, i: usize) -> T {
        self.x0 + self.dx * T::from_usize(i).unwrap()
    }

    pub fn t(&self, n: usize) -> T {
        self.t0 + self.dt * T::from_usize(n).unwrap()
    }

    pub fn t_end(&self) -> T {
        self.t(self.nt)
    }

    pub fn x_end(&self) -> T {
        self.x(self.nx - 1)
    }
}

fn steps_for<T: Real>(window: T, dt: T) -> Result<usize> {
    let ratio = window / dt;
    let n = (ratio - T::lit(1e-9)).ceil().max(T::one());
    n.to_usize()
        .ok_or_else(|| StefanError::InvalidConfig(format!("cannot fit time step {dt} into window {window}")))
}

/// Temperature at every grid node at one time level.
#[derive(Clone, Debug, PartialEq)]
pub struct Field1D<T> {
    pub values: Vec<T>,
    pub time: T,
}

/// Tridiagonal matrix: `sub[i]` multiplies `x[i-1]`, `sup[i]` multiplies `x[i+1]`
/// in row `i` (`sub[0]` and `sup[n-1]` are ignored).
#[derive(Clone, Debug, PartialEq)]
pub struct Tridiagonal<T> {
    pub sub: Vec<T>,
    pub diag: Vec<T>,
    pub sup: Vec<T>,
}

impl<T: Real> Tridiagonal<T> {
    pub fn zeros(n: usize) -> Self {
        Self { sub: vec![T::zero(); n], diag: vec![T::zero(); n], sup: vec![T::zero(); n] }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Thomas elimination without pivoting; fails on pivots below `1e-14`.
    pub fn solve(&self, rhs: &[T]) -> Result<Vec<T>> {
        let n = self.len();
        if rhs.len() != n || self.sub.len() != n || self.sup.len() != n {
            return Err(StefanError::Shape("tridiagonal system size mismatch".into()));
        }
        let tiny = T::lit(1e-14);
        let mut c = vec![T::zero(); n];
        let mut d = vec![T::zero(); n];
        let mut pivot = self.diag[0];
        for i in 0..n {
            if i > 0 {
                pivot = self.diag[i] - self.sub[i] * c[i - 1];
            }
            if !(pivot.abs() >= tiny) {
                return Err(StefanError::SingularJacobian { row: i, pivot: pivot.as_f64() });
            }
            c[i] = if i + 1 < n { self.sup[i] / pivot } else { T::zero() };
            d[i] = if i == 0 { rhs[0] / pivot } else { (rhs[i] - self.sub[i] * d[i - 1]) / pivot };
        }
        for i in (0..n.saturating_sub(1)).rev() {
            d[i] = d[i] - c[i] * d[i + 1];
        }
        Ok(d)
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut s = self.diag[i] * x[i];
                if i > 0 {
                    s = s + self.sub[i] * x[i - 1];
                }
                if i + 1 < n {
                    s = s + self.sup[i] * x[i + 1];
                }
                s
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NewtonOptions<T> {
    /// Max-norm residual tolerance.
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Real> Default for NewtonOptions<T> {
    fn default() -> Self {
        Self { tol: T::lit(1e-10), max_iter: 50 }
    }
}

#[derive(Clone, Debug)]
pub struct NewtonOutcome<T> {
    pub solution: Vec<T>,
    /// Number of Newton updates applied.
    pub iterations: usize,
    pub residual: T,
}

fn max_norm<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, x| if x.abs() > m || x.is_nan() { x.abs() } else { m })
}

/// Newton–Raphson for systems with a tridiagonal Jacobian.
///
/// `residual(x, out)` writes `F(x)`; `jacobian(x, jac)` writes `F'(x)`.
pub fn newton_solve<T, R, J>(
    mut residual: R,
    mut jacobian: J,
    guess: Vec<T>,
    opts: NewtonOptions<T>,
) -> Result<NewtonOutcome<T>>
where
    T: Real,
    R: FnMut(&[T], &mut [T]),
    J: FnMut(&[T], &mut Tridiagonal<T>),
{
    let n = guess.len();
    let mut x = guess;
    let mut f = vec![T::zero(); n];
    let mut jac = Tridiagonal::zeros(n);
    let mut iterations = 0;
    loop {
        residual(&x, &mut f);
        let norm = max_norm(&f);
        if norm <= opts.tol {
            return Ok(NewtonOutcome { solution: x, iterations, residual: norm });
        }
        if iterations >= opts.max_iter || !norm.is_finite() {
            return Err(StefanError::NewtonDiverged { step: None, iterations, residual: norm.as_f64() });
        }
        jacobian(&x, &mut jac);
        let delta = jac.solve(&f)?;
        for (xi, di) in x.iter_mut().zip(&delta) {
            *xi = *xi - *di;
        }
        iterations += 1;
    }
}

/// One Crank–Nicolson step; returns the new field and the Newton iteration count.
pub fn cn_step<T: Real>(
    prev: &Field1D<T>,
    grid: &Grid<T>,
    cfg: &StefanConfig<T>,
    bc_left: T,
    bc_right: T,
) -> Result<(Field1D<T>, usize)> {
    cn_step_with(prev, grid.dt, grid, cfg, bc_left, bc_right, NewtonOptions::default(), None)
}

pub(crate) fn cn_step_with<T: Real>(
    prev: &Field1D<T>,
    dt: T,
    grid: &Grid<T>,
    cfg: &StefanConfig<T>,
    bc_left: T,
    bc_right: T,
    opts: NewtonOptions<T>,
    predictor: Option<&[T]>,
) -> Result<(Field1D<T>, usize)> {
    let n = grid.nx;
    if prev.values.len() != n {
        return Err(StefanError::Shape(format!("field has {} nodes, grid has {n}", prev.values.len())));
    }
    let half_dt = dt * T::lit(0.5);
    let inv_dx2 = (grid.dx * grid.dx).recip();
    let two = T::lit(2.0);
    let old = &prev.values;

    let mut explicit = vec![T::zero(); n];
    for i in 1..n - 1 {
        let lap = (old[i + 1] - two * old[i] + old[i - 1]) * inv_dx2;
        explicit[i] = old[i] + half_dt * effective_diffusivity(old[i], cfg) * lap;
    }

    let residual = |x: &[T], out: &mut [T]| {
        out[0] = T::zero();
        out[n - 1] = T::zero();
        for i in 1..n - 1 {
            let lap = (x[i + 1] - two * x[i] + x[i - 1]) * inv_dx2;
            out[i] = x[i] - half_dt * effective_diffusivity(x[i], cfg) * lap - explicit[i];
        }
    };
    let jacobian = |x: &[T], jac: &mut Tridiagonal<T>| {
        jac.diag[0] = T::one();
        jac.sup[0] = T::zero();
        jac.diag[n - 1] = T::one();
        jac.sub[n - 1] = T::zero();
        for i in 1..n - 1 {
            let lap = (x[i + 1] - two * x[i] + x[i - 1]) * inv_dx2;
            let r = effective_diffusivity(x[i], cfg);
            let dr = effective_diffusivity_prime(x[i], cfg);
            jac.diag[i] = T::one() - half_dt * (dr * lap - two * r * inv_dx2);
            jac.sub[i] = -half_dt * r * inv_dx2;
            jac.sup[i] = -half_dt * r * inv_dx2;
        }
    };

    let mut guess = predictor.map_or_else(|| old.clone(), <[T]>::to_vec);
    guess[0] = bc_left;
    guess[n - 1] = bc_right;
    let out = newton_solve(residual, jacobian, guess, opts)?;
    Ok((Field1D { values: out.solution, time: prev.time + dt }, out.iterations))
}

/// Time history produced by [`solve`].
#[derive(Clone, Debug)]
pub struct FdSolution<T> {
    pub grid: Grid<T>,
    /// `nt + 1` snapshots, the first at `t0`.
    pub snapshots: Vec<Field1D<T>>,
    /// Newton iterations used by each step.
    pub newton_iterations: Vec<usize>,
    pub lambda: InterfaceConstant<T>,
}

/// Samples the similarity solution at `t` on the grid nodes.
pub fn exact_field<T: Real>(cfg: &StefanConfig<T>, lam: &InterfaceConstant<T>, grid: &Grid<T>, t: T) -> Field1D<T> {
    Field1D { values: (0..grid.nx).map(|i| exact_theta(cfg, lam, t, grid.x(i))).collect(), time: t }
}

/// Full reference solve from the exact initial condition at `t0`.
pub fn solve<T: Real>(cfg: &StefanConfig<T>, grid: &Grid<T>) -> Result<FdSolution<T>> {
    let lam = solve_lambda0(cfg)?;
    let mut current = exact_field(cfg, &lam, grid, grid.t0);
    let mut snapshots = Vec::with_capacity(grid.nt + 1);
    let mut newton_iterations = Vec::with_capacity(grid.nt);
    snapshots.push(current.clone());
    let x_right = grid.x_end();
    let mut predictor = Vec::new();
    for step in 0..grid.nt {
        let t_next = grid.t(step + 1);
        let bc_right = exact_theta(cfg, &lam, t_next, x_right);
        let pred = if step > 0 {
            let older = &snapshots[step - 1].values;
            predictor.clear();
            predictor.extend(current.values.iter().zip(older).map(|(&a, &b)| a + a - b));
            Some(&predictor[..])
        } else {
            None
        };
        let (mut next, its) =
            cn_step_with(&current, grid.dt, grid, cfg, cfg.theta_l, bc_right, NewtonOptions::default(), pred).map_err(
                |e| match e {
                    StefanError::NewtonDiverged { iterations, residual, .. } => {
                        StefanError::NewtonDiverged { step: Some(step), iterations, residual }
                    }
                    other => other,
                },
            )?;
        next.time = t_next;
        newton_iterations.push(its);
        snapshots.push(next.clone());
        current = next;
    }
    Ok(FdSolution { grid: *grid, snapshots, newton_iterations, lambda: lam })
}

impl<T: Real> FdSolution<T> {
    /// Bilinear interpolation in `(t, x)`; points on grid nodes are returned exactly.
    /// Coordinates outside the lattice are clamped.
    pub fn sample(&self, t: T, x: T) -> T {
        let g = &self.grid;
        let (n, wt) = locate((t - g.t0) / g.dt, g.nt);
        let (i, wx) = locate((x - g.x0) / g.dx, g.nx - 1);
        let row = |k: usize| {
            let v = &self.snapshots[k].values;
            if wx == T::zero() {
                v[i]
            } else {
                v[i] * (T::one() - wx) + v[i + 1] * wx
            }
        };
        if wt == T::zero() {
            row(n)
        } else {
            row(n) * (T::one() - wt) + row(n + 1) * wt
        }
    }

    pub fn final_field(&self) -> &Field1D<T> {
        self.snapshots.last().expect("at least one snapshot")
    }

    /// Relative L2 distance to `reference`, over this solution's space-time nodes.
    pub fn rel_l2_to(&self, reference: &FdSolution<T>) -> Result<T> {
        let mut num = T::zero();
        let mut den = T::zero();
        for snap in &self.snapshots {
            for (i, &v) in snap.values.iter().enumerate() {
                let r = reference.sample(snap.time, self.grid.x(i));
                num = num + (v - r) * (v - r);
                den = den + r * r;
            }
        }
        if den == T::zero() {
            return Err(StefanError::ZeroReference);
        }
        Ok((num / den).sqrt())
    }
}

// Splits a fractional lattice coordinate into (cell, weight), snapping to nodes.
fn locate<T: Real>(p: T, last: usize) -> (usize, T) {
    let last_t = T::from_usize(last).unwrap();
    let p = p.max(T::zero()).min(last_t);
    let k = p.round();
    if (p - k).abs() <= T::lit(1e-9) {
        let k = k.to_usize().unwrap();
        return (k, T::zero());
    }
    let f = p.floor();
    let k = f.to_usize().unwrap().min(last - 1);
    (k, p - T::from_usize(k).unwrap())
}

/// One row of the self-convergence table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceRow<T> {
    pub h: T,
    pub rel_l2: T,
}

/// Solves at each `h` (equal space/time steps) and measures the relative L2
/// distance to a solve at `h_min`.
pub fn convergence_study<T: Real>(cfg: &StefanConfig<T>, steps: &[T], h_min: T) -> Result<Vec<ConvergenceRow<T>>> {
    let reference = solve(cfg, &Grid::equal_steps(cfg, h_min)?)?;
    steps
        .iter()
        .map(|&h| {
            let sol = solve(cfg, &Grid::equal_steps(cfg, h)?)?;
            Ok(ConvergenceRow { h, rel_l2: sol.rel_l2_to(&reference)? })
        })
        .collect()
}

/// Least-squares slope of `log(error)` against `log(h)`, skipping zero errors.
pub fn loglog_slope<T: Real>(rows: &[ConvergenceRow<T>]) -> Option<T> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.rel_l2 > T::zero())
        .map(|r| (r.h.as_f64().ln(), r.rel_l2.as_f64().ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    T::from_f64(sxy / sxx)
}
