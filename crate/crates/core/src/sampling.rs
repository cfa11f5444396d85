//! Training point generation: Latin hypercube sets for the initial, boundary
//! and collocation families, and the nested time-slab schedule used by
//! sequence-in-time training.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, StefanError};
use crate::scalar::Real;
use crate::stefan::{exact_theta, InterfaceConstant, StefanConfig};

/// Latin hypercube sample of `n` points in the box `bounds`.
///
/// Each axis is cut into `n` equal bins and every bin holds exactly one
/// point; the position inside a bin is uniform and the per-axis
/// permutations are independent.
pub fn lhs<T: Real, const D: usize>(n: usize, bounds: [(T, T); D], rng: &mut impl Rng) -> Vec<[T; D]> {
    let mut pts = vec![[T::zero(); D]; n];
    let nf = n as f64;
    let mut perm: Vec<usize> = (0..n).collect();
    for (d, &(lo, hi)) in bounds.iter().enumerate() {
        perm.shuffle(rng);
        let width = hi - lo;
        for (p, &bin) in pts.iter_mut().zip(&perm) {
            let u: f64 = rng.gen();
            let frac = T::lit((bin as f64 + u) / nf);
            p[d] = (lo + width * frac).min(hi).max(lo);
        }
    }
    pts
}

/// Seeded convenience wrapper around [`lhs`].
pub fn lhs_seeded<T: Real, const D: usize>(n: usize, bounds: [(T, T); D], seed: u64) -> Vec<[T; D]> {
    lhs(n, bounds, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Training points, all stored as `(t, x)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet<T> {
    /// Points at `t = t0`.
    pub initial: Vec<[T; 2]>,
    pub initial_targets: Vec<T>,
    /// Points on `x = x0` followed by points on `x = x1`.
    pub boundary: Vec<[T; 2]>,
    pub boundary_targets: Vec<T>,
    /// Collocation points in the interior of the space-time window.
    pub residual: Vec<[T; 2]>,
}

/// Initial targets from the similarity solution at `t0`; Dirichlet targets
/// `θ_l` on the left wall and the similarity solution on the right wall.
pub fn build_sample_set<T: Real>(
    cfg: &StefanConfig<T>,
    lam: &InterfaceConstant<T>,
    n0: usize,
    nb: usize,
    nr: usize,
    seed: u64,
) -> Result<SampleSet<T>> {
    cfg.validate()?;
    if n0 == 0 || nb == 0 || nr == 0 {
        return Err(StefanError::InvalidConfig("sample counts must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial: Vec<[T; 2]> = lhs(n0, [(cfg.x0, cfg.x1)], &mut rng).into_iter().map(|[x]| [cfg.t0, x]).collect();
    let initial_targets = initial.iter().map(|p| exact_theta(cfg, lam, p[0], p[1])).collect();

    let n_left = nb.div_ceil(2);
    let n_right = nb - n_left;
    let mut boundary: Vec<[T; 2]> =
        lhs(n_left, [(cfg.t0, cfg.t1)], &mut rng).into_iter().map(|[t]| [t, cfg.x0]).collect();
    if n_right > 0 {
        boundary.extend(lhs(n_right, [(cfg.t0, cfg.t1)], &mut rng).into_iter().map(|[t]| [t, cfg.x1]));
    }
    let boundary_targets = boundary
        .iter()
        .map(|p| if p[1] == cfg.x0 { cfg.theta_l } else { exact_theta(cfg, lam, p[0], p[1]) })
        .collect();

    let residual = lhs(nr, [(cfg.t0, cfg.t1), (cfg.x0, cfg.x1)], &mut rng);
    Ok(SampleSet { initial, initial_targets, boundary, boundary_targets, residual })
}

impl<T: Real> SampleSet<T> {
    /// Tidy CSV: `family,t,x,target` (target empty for collocation points).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("family,t,x,target\n");
        let mut row = |fam: &str, p: &[T; 2], target: Option<T>| {
            let tgt = target.map(|v| format!("{:.16e}", v.as_f64())).unwrap_or_default();
            let _ = writeln!(s, "{fam},{:.16e},{:.16e},{tgt}", p[0].as_f64(), p[1].as_f64());
        };
        for (p, &v) in self.initial.iter().zip(&self.initial_targets) {
            row("initial", p, Some(v));
        }
        for (p, &v) in self.boundary.iter().zip(&self.boundary_targets) {
            row("boundary", p, Some(v));
        }
        for p in &self.residual {
            row("residual", p, None);
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Sequence-in-time schedule

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurriculumParams<T> {
    /// Length of each new time slab.
    pub dt_seq: T,
    /// Collocation points in the first stage.
    pub base_nr: usize,
    /// New collocation points added per later stage.
    pub incr: usize,
    /// Target for `iterations * points` per stage.
    pub budget: f64,
}

impl<T: Real> Default for CurriculumParams<T> {
    fn default() -> Self {
        Self { dt_seq: T::lit(0.05), base_nr: 1000, incr: 500, budget: 1e8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage<T> {
    /// 1-based stage index.
    pub k: usize,
    /// Stage window is `[t0, t_end]`.
    pub t_end: T,
    pub n_residual: usize,
    pub n_iterations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumSchedule<T> {
    pub dt_seq: T,
    pub stages: Vec<Stage<T>>,
    /// Stage `k` trains on the first `stages[k-1].n_residual` points.
    pub residual_points: Vec<[T; 2]>,
}

impl<T: Real> CurriculumSchedule<T> {
    pub fn stage_points(&self, k: usize) -> &[[T; 2]] {
        &self.residual_points[..self.stages[k - 1].n_residual]
    }

    pub fn total_iterations(&self) -> usize {
        self.stages.iter().map(|s| s.n_iterations).sum()
    }
}

/// Builds `K = (t1 - t0)/dt_seq` nested stages. New points of stage `k` are
/// a Latin hypercube over the slab `[t_end(k-1), t_end(k)] x [x0, x1]`.
pub fn build_curriculum<T: Real>(
    cfg: &StefanConfig<T>,
    params: &CurriculumParams<T>,
    seed: u64,
) -> Result<CurriculumSchedule<T>> {
    cfg.validate()?;
    if !(params.dt_seq > T::zero()) || params.base_nr == 0 || !(params.budget > 0.0) {
        return Err(StefanError::InvalidConfig("curriculum needs dt_seq > 0, base_nr >= 1, budget > 0".into()));
    }
    let window = cfg.t1 - cfg.t0;
    let ratio = (window / params.dt_seq).as_f64();
    let k_total = ratio.round();
    if k_total < 1.0 || (ratio - k_total).abs() > 1e-9 * ratio.max(1.0) {
        return Err(StefanError::NonIntegerStages { window: window.as_f64(), dt_seq: params.dt_seq.as_f64() });
    }
    let k_total = k_total as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stages = Vec::with_capacity(k_total);
    let mut points = Vec::new();
    let mut t_prev = cfg.t0;
    for k in 1..=k_total {
        let t_end = if k == k_total { cfg.t1 } else { cfg.t0 + params.dt_seq * T::from_usize(k).unwrap() };
        let new = if k == 1 { params.base_nr } else { params.incr };
        if new > 0 {
            points.extend(lhs(new, [(t_prev, t_end), (cfg.x0, cfg.x1)], &mut rng));
        }
        let n_residual = points.len();
        let n_iterations = (params.budget / n_residual as f64).round() as usize;
        stages.push(Stage { k, t_end, n_residual, n_iterations });
        t_prev = t_end;
    }
    Ok(CurriculumSchedule { dt_seq: params.dt_seq, stages, residual_points: points })
}
