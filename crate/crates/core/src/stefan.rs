//! Physical model of the one-dimensional two-phase melting problem.
//!
//! Holds the closed-form similarity solution on the half line, the
//! transcendental equation for the interface constant, the tanh
//! regularization of the liquid fraction and the effective diffusivity
//! `r(θ)` shared by the finite-difference solver and the network residual.

use crate::error::{Result, StefanError};
use crate::scalar::Real;

/// Physical and regularization parameters plus the space-time window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StefanConfig<T> {
    /// Fourier number.
    pub fo: T,
    /// Stefan number.
    pub ste: T,
    /// Width of the tanh regularization of the liquid fraction.
    pub delta: T,
    /// Left wall temperature (liquid side, > 0).
    pub theta_l: T,
    /// Far-field / initial temperature (solid side, < 0).
    pub theta_r: T,
    pub t0: T,
    pub t1: T,
    pub x0: T,
    pub x1: T,
}

impl<T: Real> StefanConfig<T> {
    /// `Fo = 0.01`, `Ste = 0.5`, `δ = 0.05`, `θ_l = 1`, `θ_r = -0.1` on
    /// `[0.05, 1] x [0, 1]`.
    pub fn baseline() -> Self {
        Self {
            fo: T::lit(0.01),
            ste: T::lit(0.5),
            delta: T::lit(0.05),
            theta_l: T::one(),
            theta_r: T::lit(-0.1),
            t0: T::lit(0.05),
            t1: T::one(),
            x0: T::zero(),
            x1: T::one(),
        }
    }

    /// Same as [`baseline`](Self::baseline) with `Ste = 0.005`.
    pub fn low_stefan() -> Self {
        Self { ste: T::lit(0.005), ..Self::baseline() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(StefanError::InvalidConfig(msg.to_string()));
        let all = [
            self.fo,
            self.ste,
            self.delta,
            self.theta_l,
            self.theta_r,
            self.t0,
            self.t1,
            self.x0,
            self.x1,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("all parameters must be finite");
        }
        if self.fo <= T::zero() {
            return bad("fo must be positive");
        }
        if self.ste <= T::zero() {
            return bad("ste must be positive");
        }
        if self.delta <= T::zero() {
            return bad("delta must be positive");
        }
        if !(self.t0 >= T::zero() && self.t1 > self.t0) {
            return bad("time window must satisfy 0 <= t0 < t1");
        }
        if self.x1 <= self.x0 {
            return bad("spatial domain must satisfy x0 < x1");
        }
        if !(self.theta_l > T::zero() && self.theta_r < T::zero()) {
            return bad("need theta_l > 0 > theta_r for a single melting front");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Error function

const ERF_SWITCH: f64 = 2.5;

fn inv_sqrt_pi<T: Real>() -> T {
    T::FRAC_2_SQRT_PI() * T::lit(0.5)
}

/// Error function, accurate to about 1e-15 absolute in `f64`.
pub fn erf<T: Real>(x: T) -> T {
    if x.is_nan() {
        return x;
    }
    if x < T::zero() {
        return -erf(-x);
    }
    if x < T::lit(ERF_SWITCH) {
        erf_series(x)
    } else {
        T::one() - erfc_continued_fraction(x)
    }
}

/// Complementary error function. Keeps relative accuracy in the right tail.
pub fn erfc<T: Real>(x: T) -> T {
    if x.is_nan() {
        return x;
    }
    if x < T::zero() {
        return T::lit(2.0) - erfc(-x);
    }
    if x < T::lit(ERF_SWITCH) {
        T::one() - erf_series(x)
    } else {
        erfc_continued_fraction(x)
    }
}

// erf(x) = 2/sqrt(pi) e^{-x^2} sum_n (2x^2)^n x / (1*3*...*(2n+1)); all terms positive.
fn erf_series<T: Real>(x: T) -> T {
    let x2 = x * x;
    let two_x2 = x2 + x2;
    let mut term = x;
    let mut sum = x;
    let mut n = 0usize;
    loop {
        n += 1;
        term = term * two_x2 / T::from_usize(2 * n + 1).unwrap();
        sum = sum + term;
        if term <= sum * T::epsilon() * T::lit(0.25) || n > 200 {
            break;
        }
    }
    T::FRAC_2_SQRT_PI() * (-x2).exp() * sum
}

// erfc(x) = e^{-x^2}/sqrt(pi) / (x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))), modified Lentz.
fn erfc_continued_fraction<T: Real>(x: T) -> T {
    let tiny = T::min_positive_value().sqrt();
    let half = T::lit(0.5);
    let mut f = x;
    let mut c = f;
    let mut d = T::zero();
    for n in 1..500 {
        let a = half * T::from_usize(n).unwrap();
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = d.recip();
        let delta = c * d;
        f = f * delta;
        if (delta - T::one()).abs() <= T::epsilon() {
            break;
        }
    }
    (-x * x).exp() * inv_sqrt_pi::<T>() / f
}

// ---------------------------------------------------------------------------
// Interface constant

/// Root `λ₀` of the interface equation; the front sits at `2 λ₀ sqrt(t Fo)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterfaceConstant<T> {
    pub lambda0: T,
    /// Interface equation evaluated at `lambda0`.
    pub residual: T,
}

/// `λ - Ste/sqrt(π) e^{-λ²} (θ_r/erfc λ + θ_l/erf λ)`.
pub fn lambda0_residual<T: Real>(cfg: &StefanConfig<T>, lam: T) -> T {
    let g = (-lam * lam).exp();
    lam - cfg.ste * inv_sqrt_pi::<T>() * g * (cfg.theta_r / erfc(lam) + cfg.theta_l / erf(lam))
}

fn lambda0_residual_derivative<T: Real>(cfg: &StefanConfig<T>, lam: T) -> T {
    let two = T::lit(2.0);
    let g = (-lam * lam).exp();
    let k = T::FRAC_2_SQRT_PI() * g;
    let (ef, efc) = (erf(lam), erfc(lam));
    // d/dλ [e^{-λ²}/erfc λ] and d/dλ [e^{-λ²}/erf λ]
    let d_right = g * (-two * lam * efc + k) / (efc * efc);
    let d_left = g * (-two * lam * ef - k) / (ef * ef);
    T::one() - cfg.ste * inv_sqrt_pi::<T>() * (cfg.theta_r * d_right + cfg.theta_l * d_left)
}

const LAMBDA_LO: f64 = 1e-8;
const LAMBDA_HI: f64 = 5.0;

/// Solves the interface equation by bisection on `(1e-8, 5]` followed by a
/// Newton polish that is only accepted while it stays bracketed and lowers
/// the residual.
pub fn solve_lambda0<T: Real>(cfg: &StefanConfig<T>) -> Result<InterfaceConstant<T>> {
    cfg.validate()?;
    let f = |l: T| lambda0_residual(cfg, l);
    let mut lo = T::lit(LAMBDA_LO);
    let mut hi = T::lit(LAMBDA_HI);
    let (mut f_lo, f_hi) = (f(lo), f(hi));
    if !(f_lo.is_finite() && f_hi.is_finite()) || f_lo.signum() == f_hi.signum() {
        return Err(StefanError::NoRootBracket { lo: LAMBDA_LO, hi: LAMBDA_HI });
    }
    for _ in 0..200 {
        let mid = (lo + hi) * T::lit(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = f(mid);
        if f_mid == T::zero() {
            lo = mid;
            hi = mid;
            break;
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    let mut lam = (lo + hi) * T::lit(0.5);
    let mut res = f(lam);
    for _ in 0..5 {
        let d = lambda0_residual_derivative(cfg, lam);
        if d == T::zero() || !d.is_finite() {
            break;
        }
        let next = lam - res / d;
        let next_res = f(next);
        if next < lo || next > hi || next_res.abs() >= res.abs() {
            break;
        }
        lam = next;
        res = next_res;
    }
    Ok(InterfaceConstant { lambda0: lam, residual: res })
}

impl<T: Real> InterfaceConstant<T> {
    /// Front position `2 λ₀ sqrt(t Fo)`.
    pub fn position(&self, cfg: &StefanConfig<T>, t: T) -> T {
        T::lit(2.0) * self.lambda0 * (t * cfg.fo).sqrt()
    }

    /// Front velocity `λ₀ sqrt(Fo / t)`.
    pub fn velocity(&self, cfg: &StefanConfig<T>, t: T) -> T {
        self.lambda0 * (cfg.fo / t).sqrt()
    }
}

// ---------------------------------------------------------------------------
// Exact solution

/// Similarity solution on the half line, `t > 0`.
pub fn exact_theta<T: Real>(cfg: &StefanConfig<T>, lam: &InterfaceConstant<T>, t: T, x: T) -> T {
    let eta = x / (T::lit(2.0) * (t * cfg.fo).sqrt());
    if x <= lam.position(cfg, t) {
        cfg.theta_l * (T::one() - erf(eta) / erf(lam.lambda0))
    } else {
        cfg.theta_r * (T::one() - erfc(eta) / erfc(lam.lambda0))
    }
}

/// Analytic `∂x θ` of the liquid branch (valid for any `x`).
pub fn exact_theta_dx_left<T: Real>(cfg: &StefanConfig<T>, lam: &InterfaceConstant<T>, t: T, x: T) -> T {
    let s = T::lit(2.0) * (t * cfg.fo).sqrt();
    let eta = x / s;
    -cfg.theta_l / erf(lam.lambda0) * T::FRAC_2_SQRT_PI() * (-eta * eta).exp() / s
}

/// Analytic `∂x θ` of the solid branch (valid for any `x`).
pub fn exact_theta_dx_right<T: Real>(cfg: &StefanConfig<T>, lam: &InterfaceConstant<T>, t: T, x: T) -> T {
    let s = T::lit(2.0) * (t * cfg.fo).sqrt();
    let eta = x / s;
    cfg.theta_r / erfc(lam.lambda0) * T::FRAC_2_SQRT_PI() * (-eta * eta).exp() / s
}

/// Jump condition at the front: `∂x θ_right - ∂x θ_left - λ'(t)/(Fo Ste)`.
pub fn stefan_condition_residual<T: Real>(cfg: &StefanConfig<T>, lam: &InterfaceConstant<T>, t: T) -> T {
    let xf = lam.position(cfg, t);
    exact_theta_dx_right(cfg, lam, t, xf) - exact_theta_dx_left(cfg, lam, t, xf)
        - lam.velocity(cfg, t) / (cfg.fo * cfg.ste)
}

// ---------------------------------------------------------------------------
// Enthalpy and regularization

/// Dimensionless enthalpy with a sharp liquid fraction.
pub fn enthalpy<T: Real>(theta: T, ste: T) -> T {
    if theta <= T::zero() {
        theta
    } else {
        theta + ste.recip()
    }
}

/// `θ + φ_δ(θ)/Ste`.
pub fn regularized_enthalpy<T: Real>(theta: T, delta: T, ste: T) -> T {
    theta + phi_delta(theta, delta) / ste
}

/// Regularized liquid fraction `½(1 + tanh(θ/δ))`.
pub fn phi_delta<T: Real>(theta: T, delta: T) -> T {
    T::lit(0.5) * (T::one() + (theta / delta).tanh())
}

/// `φ'_δ(θ) = sech²(θ/δ) / (2δ)`.
pub fn phi_delta_prime<T: Real>(theta: T, delta: T) -> T {
    let th = (theta / delta).tanh();
    (T::one() - th * th) / (T::lit(2.0) * delta)
}

/// `φ''_δ(θ) = -sech²(θ/δ) tanh(θ/δ) / δ²`.
pub fn phi_delta_second<T: Real>(theta: T, delta: T) -> T {
    let th = (theta / delta).tanh();
    -(T::one() - th * th) * th / (delta * delta)
}

/// `r(θ) = Fo (1 + φ'_δ(θ)/Ste)^{-1}`.
pub fn effective_diffusivity<T: Real>(theta: T, cfg: &StefanConfig<T>) -> T {
    cfg.fo / (T::one() + phi_delta_prime(theta, cfg.delta) / cfg.ste)
}

/// `r'(θ)`, needed by the full Newton Jacobian.
pub fn effective_diffusivity_prime<T: Real>(theta: T, cfg: &StefanConfig<T>) -> T {
    let den = T::one() + phi_delta_prime(theta, cfg.delta) / cfg.ste;
    -cfg.fo * phi_delta_second(theta, cfg.delta) / (cfg.ste * den * den)
}

/// Zero crossing of a sampled temperature profile on a uniform grid, by linear
/// interpolation between the first pair of nodes where the sign changes from
/// positive to non-positive.
pub fn interface_from_samples<T: Real>(values: &[T], x0: T, dx: T) -> Option<T> {
    values.windows(2).enumerate().find_map(|(i, w)| {
        let (a, b) = (w[0], w[1]);
        if a > T::zero() && b <= T::zero() {
            let frac = a / (a - b);
            Some(x0 + dx * (T::from_usize(i).unwrap() + frac))
        } else {
            None
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // mpmath, 50 digits
    const ERF_REF: &[(f64, f64, f64)] = &[
        (0.1, 0.1124629160182848984, 0.8875370839817151016),
        (0.5, 0.52049987781304653768, 0.47950012218695346232),
        (1.0, 0.84270079294971486934, 0.15729920705028513066),
        (1.5, 0.96610514647531072707, 0.033894853524689272933),
        (2.0, 0.99532226501895273416, 0.0046777349810472658379),
        (2.5, 0.99959304798255504106, 0.00040695201744495893956),
        (3.0, 0.99997790950300141456, 0.000022090496998585441373),
        (4.0, 0.99999998458274209972, 1.5417257900280018852e-8),
        (5.0, 0.99999999999846254021, 1.5374597944280348502e-12),
        (-0.7, -0.67780119383741844228, 1.6778011938374184423),
    ];

    #[test]
    fn erf_matches_high_precision_values() {
        for &(x, e, ec) in ERF_REF {
            assert!((erf(x) - e).abs() <= 1e-12, "erf({x})");
            assert!((erfc(x) - ec).abs() <= 1e-12, "erfc({x})");
            assert!((erfc(x) - (1.0 - erf(x))).abs() <= 1e-12);
        }
        assert_eq!(erf(0.0f64), 0.0);
        assert!((erf(1.0f64) - 0.8427007929497149).abs() <= 1e-15);
    }

    #[test]
    fn erfc_tail_is_relatively_accurate() {
        let rel = (erfc(5.0f64) - 1.5374597944280348502e-12).abs() / 1.5374597944280348502e-12;
        assert!(rel < 1e-13, "{rel}");
    }

    #[test]
    fn erf_works_in_single_precision() {
        assert!((erf(1.0f32) - 0.842_700_8).abs() < 1e-6);
        assert!((erfc(3.0f32) - 2.209_05e-5).abs() < 1e-9);
    }

    #[test]
    fn erf_is_odd_and_bounded() {
        let mut prev = -1.0;
        for i in -600..=600 {
            let x = i as f64 * 0.01;
            let e = erf(x);
            assert_eq!(e, -erf(-x));
            assert!(e > -1.0 - 1e-15 && e < 1.0 + 1e-15);
            assert!(e >= prev);
            prev = e;
        }
    }

    #[test]
    fn lambda0_matches_high_precision_root() {
        let cfg = StefanConfig::<f64>::baseline();
        let lam = solve_lambda0(&cfg).unwrap();
        assert!(lam.residual.abs() <= 1e-12);
        assert!((lam.lambda0 - 0.44612273607671508443).abs() < 1e-12);
        let lam = solve_lambda0(&StefanConfig::<f64>::low_stefan()).unwrap();
        assert!((lam.lambda0 - 0.049809813060563551296).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = StefanConfig::<f64>::baseline();
        cfg.theta_r = 0.2;
        assert!(matches!(solve_lambda0(&cfg), Err(StefanError::InvalidConfig(_))));
        let mut cfg = StefanConfig::<f64>::baseline();
        cfg.t1 = cfg.t0;
        assert!(cfg.validate().is_err());
        let mut cfg = StefanConfig::<f64>::baseline();
        cfg.delta = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn no_bracket_for_huge_stefan_number() {
        // latent term still dominates at the upper end of the search interval
        let cfg = StefanConfig::<f64> { ste: 1.0, theta_l: 1e13, ..StefanConfig::baseline() };
        assert!(matches!(solve_lambda0(&cfg), Err(StefanError::NoRootBracket { .. })));
    }

    #[test]
    fn exact_solution_boundary_and_interface_values() {
        let cfg = StefanConfig::<f64>::baseline();
        let lam = solve_lambda0(&cfg).unwrap();
        for &t in &[0.05, 0.3, 1.0] {
            assert!((exact_theta(&cfg, &lam, t, 0.0) - cfg.theta_l).abs() < 1e-15);
            let xf = lam.position(&cfg, t);
            assert!(exact_theta(&cfg, &lam, t, xf).abs() < 1e-12);
            assert!(exact_theta(&cfg, &lam, t, xf * (1.0 + 1e-12)).abs() < 1e-10);
            assert!((exact_theta(&cfg, &lam, t, 50.0) - cfg.theta_r).abs() < 1e-14);
        }
    }

    #[test]
    fn stefan_condition_holds_and_detects_perturbation() {
        let cfg = StefanConfig::<f64>::baseline();
        let lam = solve_lambda0(&cfg).unwrap();
        let res: Vec<f64> = [0.05, 0.5, 1.0].iter().map(|&t| stefan_condition_residual(&cfg, &lam, t)).collect();
        for r in &res {
            assert!(r.abs() <= 1e-8, "{r}");
        }
        assert!((res[0] - res[2]).abs() <= 1e-8);
        let bumped = InterfaceConstant { lambda0: lam.lambda0 * 1.1, ..lam };
        assert!(stefan_condition_residual(&cfg, &bumped, 0.5).abs() > 1e-3);
    }

    #[test]
    fn regularization_values() {
        assert_eq!(phi_delta(0.0, 0.05), 0.5);
        assert!((phi_delta(0.05f64, 0.05) - 0.8807970779778823).abs() < 1e-15);
        for &th in &[0.01f64, 0.2, 3.0] {
            assert!((phi_delta(th, 0.05) + phi_delta(-th, 0.05) - 1.0).abs() < 1e-15);
        }
        assert!((phi_delta_prime(0.0f64, 0.05) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn phi_derivatives_match_central_differences() {
        let d = 0.05f64;
        let h = 1e-6;
        for &th in &[-0.1, -0.02, 0.0, 0.013, 0.07] {
            let fd1 = (phi_delta(th + h, d) - phi_delta(th - h, d)) / (2.0 * h);
            assert!((fd1 - phi_delta_prime(th, d)).abs() < 1e-6);
            let fd2 = (phi_delta_prime(th + h, d) - phi_delta_prime(th - h, d)) / (2.0 * h);
            assert!((fd2 - phi_delta_second(th, d)).abs() < 1e-4 * (1.0 + fd2.abs()));
        }
        let cfg = StefanConfig::<f64>::baseline();
        for &th in &[-0.04, 0.0, 0.02] {
            let fd = (effective_diffusivity(th + h, &cfg) - effective_diffusivity(th - h, &cfg)) / (2.0 * h);
            assert!((fd - effective_diffusivity_prime(th, &cfg)).abs() < 1e-8);
        }
    }

    #[test]
    fn effective_diffusivity_shape() {
        let cfg = StefanConfig::<f64>::baseline();
        assert!((effective_diffusivity(0.0, &cfg) - 0.01 / 21.0).abs() < 1e-15);
        assert!((effective_diffusivity(2.0, &cfg) - 0.01).abs() < 1e-12);
        for &th in &[0.01, 0.05, 0.3] {
            let r = effective_diffusivity(th, &cfg);
            assert_eq!(r, effective_diffusivity(-th, &cfg));
            assert!(r > effective_diffusivity(0.0, &cfg) && r <= cfg.fo);
        }
    }

    #[test]
    fn interface_from_linear_profile() {
        let v = [1.0f64, 0.5, -0.5, -1.0];
        let x = interface_from_samples(&v, 0.0, 0.1).unwrap();
        assert!((x - 0.15).abs() < 1e-15);
        assert!(interface_from_samples(&[-1.0, -2.0], 0.0, 0.1).is_none());
    }
}
