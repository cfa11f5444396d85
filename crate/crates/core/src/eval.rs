//! Accuracy metrics of a trained network against the finite-difference
//! reference, plus ensemble aggregation over seeds.

use crate::diff::{BatchEvaluator, Mlp};
use crate::error::{Result, StefanError};
use crate::fd::FdSolution;
use crate::scalar::Real;
use crate::stefan::StefanConfig;
use crate::trainer::{train, TrainConfig, TrainOutput};

/// Uniform `nt x nx` lattice over `[t0, t1] x [x0, x1]`, endpoints included.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalGrid<T> {
    pub nt: usize,
    pub nx: usize,
    pub t0: T,
    pub t1: T,
    pub x0: T,
    pub x1: T,
}

impl<T: Real> EvalGrid<T> {
    pub fn new(cfg: &StefanConfig<T>, nt: usize, nx: usize) -> Result<Self> {
        if nt < 2 || nx < 2 {
            return Err(StefanError::InvalidConfig("evaluation lattice needs at least 2x2 points".into()));
        }
        Ok(Self { nt, nx, t0: cfg.t0, t1: cfg.t1, x0: cfg.x0, x1: cfg.x1 })
    }

    /// The 500 x 500 lattice.
    pub fn standard(cfg: &StefanConfig<T>) -> Self {
        Self::new(cfg, 500, 500).expect("fixed sizes")
    }

    pub fn t(&self, i: usize) -> T {
        if i + 1 == self.nt {
            return self.t1;
        }
        self.t0 + (self.t1 - self.t0) * T::from_usize(i).unwrap() / T::from_usize(self.nt - 1).unwrap()
    }

    pub fn x(&self, j: usize) -> T {
        if j + 1 == self.nx {
            return self.x1;
        }
        self.x0 + (self.x1 - self.x0) * T::from_usize(j).unwrap() / T::from_usize(self.nx - 1).unwrap()
    }

    pub fn len(&self) -> usize {
        self.nt * self.nx
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All `(t, x)` points, row-major in time.
    pub fn points(&self) -> Vec<[T; 2]> {
        let mut pts = Vec::with_capacity(self.len());
        for i in 0..self.nt {
            let t = self.t(i);
            pts.extend((0..self.nx).map(|j| [t, self.x(j)]));
        }
        pts
    }

    /// Number of leading time rows with `t <= t_max`.
    pub fn rows_up_to(&self, t_max: T) -> usize {
        let eps = (self.t1 - self.t0) * T::lit(1e-12);
        (0..self.nt).take_while(|&i| self.t(i) <= t_max + eps).count()
    }
}

/// `‖pred - reference‖₂ / ‖reference‖₂` over matching lattices.
pub fn rel_l2<T: Real>(pred: &[T], reference: &[T]) -> Result<T> {
    if pred.len() != reference.len() {
        return Err(StefanError::Shape(format!("{} predictions vs {} reference values", pred.len(), reference.len())));
    }
    let mut num = T::zero();
    let mut den = T::zero();
    for (&p, &r) in pred.iter().zip(reference) {
        num = num + (p - r) * (p - r);
        den = den + r * r;
    }
    if den == T::zero() {
        return Err(StefanError::ZeroReference);
    }
    Ok((num / den).sqrt())
}

/// Reference values sampled (bilinearly) on an evaluation lattice.
#[derive(Clone, Debug)]
pub struct ReferenceLattice<T> {
    pub grid: EvalGrid<T>,
    pub values: Vec<T>,
    points: Vec<[T; 2]>,
}

impl<T: Real> ReferenceLattice<T> {
    pub fn from_fd(solution: &FdSolution<T>, grid: EvalGrid<T>) -> Self {
        let points = grid.points();
        let values = points.iter().map(|p| solution.sample(p[0], p[1])).collect();
        Self { grid, values, points }
    }

    pub fn points(&self) -> &[[T; 2]] {
        &self.points
    }

    /// Relative L2 error of `net` on the whole lattice.
    pub fn rel_l2(&self, net: &Mlp<T>, ev: &mut BatchEvaluator<T>) -> Result<T> {
        rel_l2(&ev.values(net, &self.points), &self.values)
    }

    /// Relative L2 error restricted to lattice rows with `t <= t_max`.
    pub fn rel_l2_until(&self, net: &Mlp<T>, t_max: T, ev: &mut BatchEvaluator<T>) -> Result<T> {
        let n = self.grid.rows_up_to(t_max) * self.grid.nx;
        if n == 0 {
            return Err(StefanError::InvalidConfig("window contains no lattice rows".into()));
        }
        rel_l2(&ev.values(net, &self.points[..n]), &self.values[..n])
    }
}

/// Outcome of [`evaluate`].
#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    pub rel_l2: T,
    pub prediction: Vec<T>,
    /// `|prediction - reference|` row-major on the lattice.
    pub abs_error: Vec<T>,
}

pub fn evaluate<T: Real>(net: &Mlp<T>, reference: &ReferenceLattice<T>) -> Result<Evaluation<T>> {
    let prediction = BatchEvaluator::new().values(net, reference.points());
    let rel = rel_l2(&prediction, &reference.values)?;
    let abs_error = prediction.iter().zip(&reference.values).map(|(p, r)| (*p - *r).abs()).collect();
    Ok(Evaluation { rel_l2: rel, prediction, abs_error })
}

/// Mean and population standard deviation, summed in sorted order so the
/// result does not depend on the order of `values`.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// One seed of an ensemble.
#[derive(Debug)]
pub struct SeedRun<T> {
    pub seed: u64,
    pub outcome: Result<TrainOutput<T>>,
}

/// Ensemble statistics over the seeds that finished.
#[derive(Debug)]
pub struct RunReport<T> {
    pub runs: Vec<SeedRun<T>>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub median: Option<f64>,
    pub config: Vec<(String, String)>,
}

impl<T: Real> RunReport<T> {
    /// Final errors of the successful seeds, in seed-list order.
    pub fn errors(&self) -> Vec<f64> {
        self.runs
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok().and_then(|o| o.final_rel_l2).map(|v| v.as_f64()))
            .collect()
    }

    pub fn failures(&self) -> impl Iterator<Item = (u64, &StefanError)> {
        self.runs.iter().filter_map(|r| r.outcome.as_ref().err().map(|e| (r.seed, e)))
    }
}

/// Trains one network per seed (`tc.seed` is replaced), at most `threads`
/// at a time. A failing seed is reported in its slot; the rest still run.
pub fn ensemble<T: Real>(
    cfg: &StefanConfig<T>,
    tc: &TrainConfig<T>,
    seeds: &[u64],
    reference: &ReferenceLattice<T>,
    threads: usize,
) -> Result<RunReport<T>> {
    if seeds.is_empty() {
        return Err(StefanError::InvalidConfig("ensemble needs at least one seed".into()));
    }
    cfg.validate()?;
    tc.validate()?;
    let mut runs = Vec::with_capacity(seeds.len());
    for batch in seeds.chunks(threads.max(1)) {
        let outcomes: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .iter()
                .map(|&seed| {
                    let tc = TrainConfig { seed, ..tc.clone() };
                    s.spawn(move || train(cfg, &tc, Some(reference)))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        });
        runs.extend(batch.iter().zip(outcomes).map(|(&seed, outcome)| SeedRun { seed, outcome }));
    }
    let mut report = RunReport { runs, mean: None, std: None, median: None, config: tc.describe() };
    let errs = report.errors();
    if let Some((m, sd)) = mean_std(&errs) {
        report.mean = Some(m);
        report.std = Some(sd);
    }
    report.median = median(&errs);
    report.config.retain(|(k, _)| k != "seed");
    report.config.push(("seeds".into(), seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::{solve, Grid};

    #[test]
    fn identical_fields_have_zero_error() {
        let r = vec![1.0, -2.0, 0.5];
        assert_eq!(rel_l2(&r, &r).unwrap(), 0.0);
    }

    #[test]
    fn scale_invariance() {
        let r = vec![1.0, -2.0, 0.5, 0.25];
        let p = vec![1.1, -1.9, 0.4, 0.3];
        let base = rel_l2(&p, &r).unwrap();
        let s = |v: &[f64], a: f64| v.iter().map(|x| x * a).collect::<Vec<_>>();
        assert!((rel_l2(&s(&p, -3.0), &s(&r, -3.0)).unwrap() - base).abs() < 1e-15);
    }

    #[test]
    fn constant_offset_on_unit_norm_lattice() {
        // ref with unit norm on n points; error norm is 0.01 * sqrt(n)
        let n = 400;
        let r: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 } / (n as f64).sqrt()).collect();
        let p: Vec<f64> = r.iter().map(|v| v + 0.01).collect();
        assert!((rel_l2(&p, &r).unwrap() - 0.01 * (n as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_reference_and_shape_errors() {
        assert!(matches!(rel_l2(&[1.0], &[0.0]), Err(StefanError::ZeroReference)));
        assert!(matches!(rel_l2(&[1.0], &[0.0, 1.0]), Err(StefanError::Shape(_))));
    }

    #[test]
    fn lattice_includes_endpoints() {
        let cfg = StefanConfig::<f64>::baseline();
        let g = EvalGrid::standard(&cfg);
        assert_eq!(g.t(0), 0.05);
        assert_eq!(g.t(499), 1.0);
        assert_eq!(g.x(499), 1.0);
        assert_eq!(g.points().len(), 250_000);
        assert_eq!(g.rows_up_to(1.0), 500);
        assert_eq!(g.rows_up_to(0.05), 1);
    }

    #[test]
    fn reference_against_itself() {
        let cfg = StefanConfig::<f64>::baseline();
        let sol = solve(&cfg, &Grid::equal_steps(&cfg, 1.0 / 64.0).unwrap()).unwrap();
        let lat = ReferenceLattice::from_fd(&sol, EvalGrid::new(&cfg, 40, 30).unwrap());
        let again: Vec<f64> = lat.points().iter().map(|p| sol.sample(p[0], p[1])).collect();
        assert_eq!(rel_l2(&again, &lat.values).unwrap(), 0.0);
    }

    #[test]
    fn untrained_network_is_far_off() {
        let cfg = StefanConfig::<f64>::baseline();
        let sol = solve(&cfg, &Grid::equal_steps(&cfg, 1.0 / 64.0).unwrap()).unwrap();
        let lat = ReferenceLattice::from_fd(&sol, EvalGrid::new(&cfg, 50, 50).unwrap());
        let net = Mlp::xavier(&crate::diff::DEFAULT_LAYER_SIZES, 0).unwrap();
        let e = evaluate(&net, &lat).unwrap();
        assert!(e.rel_l2 > 0.3 && e.rel_l2 < 10.0, "{}", e.rel_l2);
        assert_eq!(e.abs_error.len(), 2500);
    }

    #[test]
    fn ensemble_single_seed_and_repeatability() {
        use crate::trainer::Regime;
        let cfg = StefanConfig::<f64>::baseline();
        let sol = solve(&cfg, &Grid::equal_steps(&cfg, 1.0 / 32.0).unwrap()).unwrap();
        let lat = ReferenceLattice::from_fd(&sol, EvalGrid::new(&cfg, 20, 20).unwrap());
        let tc = TrainConfig {
            layer_sizes: vec![2, 6, 1],
            n_initial: 16,
            n_boundary: 8,
            n_residual: 32,
            iterations: 5,
            ..TrainConfig::paper(Regime::from_name("uniform").unwrap())
        };
        let one = ensemble(&cfg, &tc, &[4], &lat, 2).unwrap();
        assert_eq!(one.std, Some(0.0));
        let a = ensemble(&cfg, &tc, &[1, 2, 3], &lat, 2).unwrap();
        let b = ensemble(&cfg, &tc, &[1, 2, 3], &lat, 3).unwrap();
        assert_eq!(a.errors(), b.errors());
        assert_eq!((a.mean, a.std), (b.mean, b.std));
        assert_eq!(a.failures().count(), 0);
        let bad = TrainConfig { n_residual: 0, ..tc };
        assert!(ensemble(&cfg, &bad, &[1], &lat, 1).is_err());
        assert!(ensemble(&cfg, &tc_empty(), &[], &lat, 1).is_err());
    }

    fn tc_empty() -> TrainConfig<f64> {
        TrainConfig::paper(crate::trainer::Regime::Plain(crate::trainer::Weighting::Uniform))
    }

    #[test]
    fn aggregation_is_order_independent() {
        let a = [0.3, 0.1, 0.2];
        let b = [0.2, 0.3, 0.1];
        assert_eq!(mean_std(&a), mean_std(&b));
        assert_eq!(mean_std(&[0.4]).unwrap().1, 0.0);
        assert_eq!(median(&a), Some(0.2));
        assert_eq!(median(&[1.0, 3.0]), Some(2.0));
    }
}
