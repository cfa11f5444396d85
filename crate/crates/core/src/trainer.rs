//! Physics-informed training of the temperature network.
//!
//! The loss is the composite
//!
//! ```text
//! L = ω₀ L₀ + ω_b L_b + ω_r L_r
//! ```
//!
//! of mean squared initial, boundary and PDE-residual errors, where the
//! residual of the regularized equation is
//! `(1 + φ'_δ(θ)/Ste) ∂t θ - Fo ∂xx θ`. Four weighting regimes are
//! supported (uniform, static, gradient-statistics dynamic, pointwise
//! soft-attention masks trained by min–max), each optionally driven through
//! a sequence of growing time windows.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{BatchEvaluator, Jet2, Mlp, ParamGrad, DEFAULT_LAYER_SIZES};
use crate::error::{Result, StefanError};
use crate::eval::ReferenceLattice;
use crate::sampling::{build_curriculum, build_sample_set, CurriculumParams, CurriculumSchedule, SampleSet};
use crate::scalar::Real;
use crate::stefan::{phi_delta_prime, phi_delta_second, solve_lambda0, StefanConfig};

// ---------------------------------------------------------------------------
// Residual and losses

/// PDE residual from an output jet.
pub fn residual_from_jet<T: Real>(cfg: &StefanConfig<T>, u: &Jet2<T>) -> T {
    (T::one() + phi_delta_prime(u.v, cfg.delta) / cfg.ste) * u.dt - cfg.fo * u.dxx
}

/// `∂t θ - Fo ∂xx θ + (1/Ste) ∂t φ_δ(θ)` of the network at `(t, x)`.
pub fn residual<T: Real>(net: &Mlp<T>, cfg: &StefanConfig<T>, t: T, x: T) -> T {
    residual_from_jet(cfg, &net.forward_jet(t, x))
}

// Squared residual contribution `scale * R²` and its derivative w.r.t. the jet.
fn residual_loss<T: Real>(cfg: &StefanConfig<T>, u: &Jet2<T>, scale: T) -> (T, T, Jet2<T>) {
    let c1 = T::one() + phi_delta_prime(u.v, cfg.delta) / cfg.ste;
    let r = c1 * u.dt - cfg.fo * u.dxx;
    let g = T::lit(2.0) * scale * r;
    let adj = Jet2 {
        v: g * phi_delta_second(u.v, cfg.delta) / cfg.ste * u.dt,
        dt: g * c1,
        dx: T::zero(),
        dxx: -g * cfg.fo,
    };
    (scale * r * r, r * r, adj)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub l_r: T,
    pub l_0: T,
    pub l_b: T,
    pub weighted_total: T,
}

impl<T: Real> LossBreakdown<T> {
    pub fn is_finite(&self) -> bool {
        self.l_r.is_finite() && self.l_0.is_finite() && self.l_b.is_finite() && self.weighted_total.is_finite()
    }
}

/// Scalar loss weights `(ω₀, ω_b, ω_r)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarWeights<T> {
    pub omega0: T,
    pub omegab: T,
    pub omegar: T,
}

impl<T: Real> ScalarWeights<T> {
    pub fn ones() -> Self {
        Self { omega0: T::one(), omegab: T::one(), omegar: T::one() }
    }

    pub fn combine(&self, l: &LossBreakdown<T>) -> T {
        self.omega0 * l.l_0 + self.omegab * l.l_b + self.omegar * l.l_r
    }
}

/// Soft attention mask `w ↦ α / (1 + e^{-β (w - m)})`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mask<T> {
    pub alpha: T,
    pub beta: T,
    pub m: T,
}

impl<T: Real> Mask<T> {
    pub fn new(alpha: T, beta: T, m: T) -> Self {
        Self { alpha, beta, m }
    }

    pub fn value(&self, w: T) -> T {
        self.alpha / (T::one() + (-self.beta * (w - self.m)).exp())
    }

    pub fn derivative(&self, w: T) -> T {
        let v = self.value(w);
        self.beta * v * (T::one() - v / self.alpha)
    }
}

/// Trainable per-point weights for the initial and residual families.
#[derive(Clone, Debug, PartialEq)]
pub struct PointWeights<T> {
    pub w_i: Vec<T>,
    pub w_r: Vec<T>,
    pub mask_i: Mask<T>,
    pub mask_r: Mask<T>,
}

impl<T: Real> PointWeights<T> {
    /// Weights drawn uniformly from `[0, 1]`.
    pub fn uniform(n_initial: usize, n_residual: usize, mask_i: Mask<T>, mask_r: Mask<T>, rng: &mut impl Rng) -> Self {
        let mut draw = |n| (0..n).map(|_| T::lit(rng.gen::<f64>())).collect();
        let w_i = draw(n_initial);
        let w_r = draw(n_residual);
        Self { w_i, w_r, mask_i, mask_r }
    }
}

/// Weights applied when assembling the loss.
#[derive(Clone, Copy, Debug)]
pub enum LossWeights<'a, T> {
    Scalar(ScalarWeights<T>),
    Pointwise(&'a PointWeights<T>),
}

/// Loss terms of `net` on `samples` (no gradients).
pub fn assemble_loss<T: Real>(
    net: &Mlp<T>,
    cfg: &StefanConfig<T>,
    samples: &SampleSet<T>,
    weights: LossWeights<'_, T>,
) -> LossBreakdown<T> {
    let mut ev = BatchEvaluator::new();
    let active = ActiveSet::from_samples(samples);
    let (pw_i, pw_r) = match weights {
        LossWeights::Pointwise(p) => (Some((&p.w_i[..], p.mask_i)), Some((&p.w_r[..], p.mask_r))),
        LossWeights::Scalar(_) => (None, None),
    };
    let u0 = ev.values(net, active.initial);
    let l_0 = masked_mean(u0.iter().zip(active.initial_targets).map(|(u, g)| (*u - *g) * (*u - *g)), pw_i);
    let ub = ev.values(net, active.boundary);
    let l_b = masked_mean(ub.iter().zip(active.boundary_targets).map(|(u, g)| (*u - *g) * (*u - *g)), None);
    let jets = ev.jets(net, active.residual);
    let l_r = masked_mean(
        jets.iter().map(|j| {
            let r = residual_from_jet(cfg, j);
            r * r
        }),
        pw_r,
    );
    let mut out = LossBreakdown { l_r, l_0, l_b, weighted_total: T::zero() };
    out.weighted_total = match weights {
        LossWeights::Scalar(w) => w.combine(&out),
        LossWeights::Pointwise(_) => l_0 + l_b + l_r,
    };
    out
}

fn masked_mean<T: Real>(sq: impl Iterator<Item = T>, mask: Option<(&[T], Mask<T>)>) -> T {
    let mut n = 0usize;
    let mut s = T::zero();
    for (k, e) in sq.enumerate() {
        let w = mask.map_or(T::one(), |(w, m)| m.value(w[k]));
        s = s + w * e;
        n += 1;
    }
    s / T::from_usize(n.max(1)).unwrap()
}

// ---------------------------------------------------------------------------
// Optimizer

/// Exponential decay `t ↦ η γ^{t/κ}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule<T> {
    pub eta: T,
    pub gamma: T,
    pub kappa: T,
}

impl<T: Real> LrSchedule<T> {
    pub fn new(eta: T, gamma: T, kappa: T) -> Result<Self> {
        if !(eta > T::zero() && gamma > T::zero() && gamma <= T::one() && kappa > T::zero()) {
            return Err(StefanError::InvalidConfig("learning rate needs eta > 0, 0 < gamma <= 1, kappa > 0".into()));
        }
        Ok(Self { eta, gamma, kappa })
    }

    pub fn rate(&self, iteration: usize) -> T {
        self.eta * self.gamma.powf(T::from_usize(iteration).unwrap() / self.kappa)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> AdamState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }

    /// Bias-corrected Adam update `p -= lr m̂ / (sqrt(v̂) + ε)`.
    pub fn step(&mut self, params: &mut [T], grad: &[T], lr: T) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        self.step += 1;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let one = T::one();
        let c1 = one - self.beta1.powi(t);
        let c2 = one - self.beta2.powi(t);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Weighting regimes

/// Where the previous weight enters the dynamic update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DynamicVariant {
    /// `ω ← (1-α) ω + α max|∇L_r| / (ω · mean|∇L|)`
    WeightInDenominator,
    /// `ω ← (1-α) ω + α max|∇L_r| / mean|∇L|`
    Annealing,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynamicParams<T> {
    pub alpha: T,
    /// Update period in iterations; the first update happens at `every`.
    pub every: usize,
    pub variant: DynamicVariant,
}

impl<T: Real> Default for DynamicParams<T> {
    fn default() -> Self {
        Self { alpha: T::lit(0.6), every: 1000, variant: DynamicVariant::WeightInDenominator }
    }
}

/// One dynamic weight update from the gradient statistics of the residual
/// loss (`max_grad_r = max|∇L_r|`) and of the family loss (`mean_grad = mean|∇L|`).
pub fn dynamic_reweight<T: Real>(omega: T, max_grad_r: T, mean_grad: T, params: &DynamicParams<T>) -> Result<T> {
    if !(mean_grad > T::zero()) {
        return Err(StefanError::DegenerateStats);
    }
    let target = match params.variant {
        DynamicVariant::WeightInDenominator => max_grad_r / (omega * mean_grad),
        DynamicVariant::Annealing => max_grad_r / mean_grad,
    };
    Ok((T::one() - params.alpha) * omega + params.alpha * target)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointwiseParams<T> {
    pub mask_initial: Mask<T>,
    pub mask_residual: Mask<T>,
    /// Constant Adam rate of the weight ascent.
    pub ascent_lr: T,
}

impl<T: Real> Default for PointwiseParams<T> {
    fn default() -> Self {
        Self {
            mask_initial: Mask::new(T::lit(1000.0), T::lit(0.1), T::lit(2.0)),
            mask_residual: Mask::new(T::one(), T::one(), T::lit(5.0)),
            ascent_lr: T::lit(1e-3),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Weighting<T> {
    /// `ω₀ = ω_b = ω_r = 1`
    Uniform,
    /// Fixed `ω₀`, `ω_b = ω_r = 1`.
    Static { omega0: T },
    Dynamic(DynamicParams<T>),
    Pointwise(PointwiseParams<T>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Regime<T> {
    Plain(Weighting<T>),
    /// Sequence learning over growing time windows.
    Sequential {
        weighting: Weighting<T>,
        curriculum: CurriculumParams<T>,
        /// Advance early once the weighted loss falls below this value.
        loss_threshold: Option<T>,
    },
}

impl<T: Real> Regime<T> {
    /// Parses `uniform`, `static`, `dynamic`, `pointwise`, `seq-uniform`,
    /// `seq-static` or `seq-dynamic` with default parameters.
    pub fn from_name(name: &str) -> Result<Self> {
        let (seq, base) = match name.strip_prefix("seq-") {
            Some(rest) => (true, rest),
            None => (false, name),
        };
        let weighting = match base {
            "uniform" => Weighting::Uniform,
            "static" => Weighting::Static { omega0: T::lit(100.0) },
            "dynamic" => Weighting::Dynamic(DynamicParams::default()),
            "pointwise" if !seq => Weighting::Pointwise(PointwiseParams::default()),
            _ => return Err(StefanError::InvalidConfig(format!("unknown regime {name:?}"))),
        };
        Ok(if seq {
            Regime::Sequential { weighting, curriculum: CurriculumParams::default(), loss_threshold: None }
        } else {
            Regime::Plain(weighting)
        })
    }

    pub fn name(&self) -> String {
        let (prefix, w) = match self {
            Regime::Plain(w) => ("", w),
            Regime::Sequential { weighting, .. } => ("seq-", weighting),
        };
        let base = match w {
            Weighting::Uniform => "uniform",
            Weighting::Static { .. } => "static",
            Weighting::Dynamic(_) => "dynamic",
            Weighting::Pointwise(_) => "pointwise",
        };
        format!("{prefix}{base}")
    }

    pub fn weighting(&self) -> &Weighting<T> {
        match self {
            Regime::Plain(w) => w,
            Regime::Sequential { weighting, .. } => weighting,
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration and state

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig<T> {
    pub regime: Regime<T>,
    pub layer_sizes: Vec<usize>,
    pub n_initial: usize,
    pub n_boundary: usize,
    /// Collocation points (ignored by sequential regimes, which take them
    /// from the curriculum schedule).
    pub n_residual: usize,
    /// Iteration count (sequential regimes use the schedule's budget instead).
    pub iterations: usize,
    pub seed: u64,
    pub lr: LrSchedule<T>,
    /// Relative L2 cadence when a reference is supplied.
    pub metric_every: usize,
    /// History row cadence.
    pub log_every: usize,
    /// Map `(t, x)` onto `[-1, 1]²` before the first layer.
    pub normalize_inputs: bool,
}

impl<T: Real> TrainConfig<T> {
    /// Network, sample counts and optimizer settings for `regime`:
    /// 2→20×6→1, N₀ = 1024, N_b = 256, N_r = 10000, 100k iterations,
    /// rate `1e-3 · 0.9^{t/8000}` (`κ = 5000` for the pointwise regime).
    pub fn paper(regime: Regime<T>) -> Self {
        let kappa = if matches!(regime.weighting(), Weighting::Pointwise(_)) { 5000.0 } else { 8000.0 };
        Self {
            regime,
            layer_sizes: DEFAULT_LAYER_SIZES.to_vec(),
            n_initial: 1024,
            n_boundary: 256,
            n_residual: 10_000,
            iterations: 100_000,
            seed: 0,
            lr: LrSchedule { eta: T::lit(1e-3), gamma: T::lit(0.9), kappa: T::lit(kappa) },
            metric_every: 500,
            log_every: 100,
            normalize_inputs: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        LrSchedule::new(self.lr.eta, self.lr.gamma, self.lr.kappa)?;
        if self.n_initial == 0 || self.n_boundary == 0 || self.n_residual == 0 {
            return Err(StefanError::InvalidConfig("sample counts must be at least 1".into()));
        }
        if self.metric_every == 0 || self.log_every == 0 {
            return Err(StefanError::InvalidConfig("metric_every and log_every must be positive".into()));
        }
        if let Weighting::Dynamic(p) = self.regime.weighting() {
            if p.every == 0 || !(p.alpha >= T::zero() && p.alpha <= T::one()) {
                return Err(StefanError::InvalidConfig("dynamic weighting needs every > 0 and 0 <= alpha <= 1".into()));
            }
        }
        if let Weighting::Static { omega0 } = self.regime.weighting() {
            if !(*omega0 > T::zero()) {
                return Err(StefanError::InvalidConfig("static omega0 must be positive".into()));
            }
        }
        if let Regime::Sequential { weighting: Weighting::Pointwise(_), .. } = self.regime {
            return Err(StefanError::InvalidConfig("pointwise weighting is not combined with sequence learning".into()));
        }
        Ok(())
    }

    /// Every resolved hyperparameter as `key = value` lines.
    pub fn describe(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("regime".to_string(), self.regime.name()),
            ("layer_sizes".into(), self.layer_sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")),
            ("activation".into(), "tanh".into()),
            ("init".into(), "xavier-uniform, zero bias".into()),
            ("n_initial".into(), self.n_initial.to_string()),
            ("n_boundary".into(), self.n_boundary.to_string()),
            ("n_residual".into(), self.n_residual.to_string()),
            ("iterations".into(), self.iterations.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("lr_eta".into(), self.lr.eta.to_string()),
            ("lr_gamma".into(), self.lr.gamma.to_string()),
            ("lr_kappa".into(), self.lr.kappa.to_string()),
            ("adam".into(), "beta1=0.9 beta2=0.999 eps=1e-8".into()),
            ("metric_every".into(), self.metric_every.to_string()),
            ("log_every".into(), self.log_every.to_string()),
            ("normalize_inputs".into(), self.normalize_inputs.to_string()),
        ];
        match self.regime.weighting() {
            Weighting::Uniform => {}
            Weighting::Static { omega0 } => out.push(("omega0".into(), omega0.to_string())),
            Weighting::Dynamic(p) => {
                out.push(("dynamic_alpha".into(), p.alpha.to_string()));
                out.push(("dynamic_every".into(), p.every.to_string()));
                let v = match p.variant {
                    DynamicVariant::WeightInDenominator => "weight-in-denominator",
                    DynamicVariant::Annealing => "annealing",
                };
                out.push(("dynamic_variant".into(), v.into()));
            }
            Weighting::Pointwise(p) => {
                let m = |k: &Mask<T>| format!("alpha={} beta={} m={}", k.alpha, k.beta, k.m);
                out.push(("mask_initial".into(), m(&p.mask_initial)));
                out.push(("mask_residual".into(), m(&p.mask_residual)));
                out.push(("ascent_lr".into(), p.ascent_lr.to_string()));
            }
        }
        if let Regime::Sequential { curriculum, loss_threshold, .. } = &self.regime {
            out.push(("seq_dt".into(), curriculum.dt_seq.to_string()));
            out.push(("seq_base_nr".into(), curriculum.base_nr.to_string()));
            out.push(("seq_incr".into(), curriculum.incr.to_string()));
            out.push(("seq_budget".into(), curriculum.budget.to_string()));
            out.push((
                "seq_loss_threshold".into(),
                loss_threshold.map_or_else(|| "off".to_string(), |v| v.to_string()),
            ));
        }
        out
    }
}

/// Mutable training state.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub net: Mlp<T>,
    pub adam: AdamState<T>,
    pub weights: ScalarWeights<T>,
    pub point_weights: Option<PointWeights<T>>,
    adam_w_i: AdamState<T>,
    adam_w_r: AdamState<T>,
    /// Global iteration counter.
    pub iteration: usize,
    /// Current curriculum stage (1-based, 0 outside sequential training).
    pub stage: usize,
    pub seed: u64,
}

/// Points used by one optimization step.
#[derive(Clone, Copy, Debug)]
pub struct ActiveSet<'a, T> {
    pub initial: &'a [[T; 2]],
    pub initial_targets: &'a [T],
    pub boundary: &'a [[T; 2]],
    pub boundary_targets: &'a [T],
    pub residual: &'a [[T; 2]],
}

impl<'a, T: Real> ActiveSet<'a, T> {
    pub fn from_samples(s: &'a SampleSet<T>) -> Self {
        Self {
            initial: &s.initial,
            initial_targets: &s.initial_targets,
            boundary: &s.boundary,
            boundary_targets: &s.boundary_targets,
            residual: &s.residual,
        }
    }
}

/// Per-family losses and gradients of the unweighted family losses.
struct FamilyGrads<T> {
    g0: ParamGrad<T>,
    gb: ParamGrad<T>,
    gr: ParamGrad<T>,
    total: ParamGrad<T>,
    sq_i: Vec<T>,
    sq_r: Vec<T>,
}

/// Single-run optimizer; owns the state and scratch buffers.
pub struct Trainer<'c, T> {
    cfg: &'c StefanConfig<T>,
    tc: &'c TrainConfig<T>,
    pub state: TrainState<T>,
    ev: BatchEvaluator<T>,
    scratch: FamilyGrads<T>,
}

// decorrelated streams derived from the run seed
const SAMPLE_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;
const WEIGHT_STREAM: u64 = 0xD1B5_4A32_D192_ED03;

impl<'c, T: Real> Trainer<'c, T> {
    /// Xavier-initialized network and zeroed optimizer state; pointwise
    /// weights (if any) are sized for `n_initial` / `n_residual` points.
    pub fn new(cfg: &'c StefanConfig<T>, tc: &'c TrainConfig<T>, n_initial: usize, n_residual: usize) -> Result<Self> {
        cfg.validate()?;
        tc.validate()?;
        let mut net = Mlp::xavier(&tc.layer_sizes, tc.seed)?;
        if tc.normalize_inputs {
            net = net.with_input_box([cfg.t0, cfg.x0], [cfg.t1, cfg.x1]);
        }
        let n = net.num_params();
        let weights = match tc.regime.weighting() {
            Weighting::Static { omega0 } => ScalarWeights { omega0: *omega0, ..ScalarWeights::ones() },
            _ => ScalarWeights::ones(),
        };
        let point_weights = match tc.regime.weighting() {
            Weighting::Pointwise(p) => {
                let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ WEIGHT_STREAM);
                Some(PointWeights::uniform(n_initial, n_residual, p.mask_initial, p.mask_residual, &mut rng))
            }
            _ => None,
        };
        let zero = ParamGrad::zeros_like(&net);
        Ok(Self {
            cfg,
            tc,
            state: TrainState {
                net,
                adam: AdamState::new(n),
                weights,
                point_weights,
                adam_w_i: AdamState::new(n_initial),
                adam_w_r: AdamState::new(n_residual),
                iteration: 0,
                stage: 0,
                seed: tc.seed,
            },
            ev: BatchEvaluator::new(),
            scratch: FamilyGrads {
                g0: zero.clone(),
                gb: zero.clone(),
                gr: zero.clone(),
                total: zero,
                sq_i: Vec::new(),
                sq_r: Vec::new(),
            },
        })
    }

    fn family_gradients(&mut self, active: &ActiveSet<'_, T>) -> LossBreakdown<T> {
        let cfg = self.cfg;
        let net = &self.state.net;
        let pw = self.state.point_weights.as_ref();
        let s = &mut self.scratch;
        s.g0.clear();
        s.gb.clear();
        s.gr.clear();
        s.sq_i.clear();
        s.sq_i.resize(active.initial.len(), T::zero());
        s.sq_r.clear();
        s.sq_r.resize(active.residual.len(), T::zero());
        let two = T::lit(2.0);

        let inv0 = T::from_usize(active.initial.len()).unwrap().recip();
        let sq_i = &mut s.sq_i;
        let l_0 = self.ev.backprop_values(
            net,
            active.initial,
            |k, u| {
                let e = u - active.initial_targets[k];
                sq_i[k] = e * e;
                let w = pw.map_or(T::one(), |p| p.mask_i.value(p.w_i[k])) * inv0;
                (w * e * e, two * w * e)
            },
            &mut s.g0,
        );

        let invb = T::from_usize(active.boundary.len().max(1)).unwrap().recip();
        let l_b = if active.boundary.is_empty() {
            T::zero()
        } else {
            self.ev.backprop_values(
                net,
                active.boundary,
                |k, u| {
                    let e = u - active.boundary_targets[k];
                    (invb * e * e, two * invb * e)
                },
                &mut s.gb,
            )
        };

        let invr = T::from_usize(active.residual.len()).unwrap().recip();
        let sq_r = &mut s.sq_r;
        let l_r = self.ev.backprop_jets(
            net,
            active.residual,
            |k, u| {
                let w = pw.map_or(T::one(), |p| p.mask_r.value(p.w_r[k])) * invr;
                let (l, sq, adj) = residual_loss(cfg, u, w);
                sq_r[k] = sq;
                (l, adj)
            },
            &mut s.gr,
        );
        LossBreakdown { l_r, l_0, l_b, weighted_total: T::zero() }
    }

    /// One optimization step at the current iteration: gradient evaluation,
    /// scheduled weight updates, pointwise ascent and the Adam descent on the
    /// network. Returns the losses before the update.
    pub fn step(&mut self, active: &ActiveSet<'_, T>) -> Result<LossBreakdown<T>> {
        let it = self.state.iteration;
        let mut loss = self.family_gradients(active);
        let s = &self.scratch;
        if !loss.is_finite() || !(s.g0.is_finite() && s.gb.is_finite() && s.gr.is_finite()) {
            return Err(StefanError::NanLoss { iteration: it });
        }

        if let Weighting::Dynamic(p) = self.tc.regime.weighting() {
            if it > 0 && it % p.every == 0 {
                let max_r = s.gr.max_abs();
                let w = &mut self.state.weights;
                // a degenerate statistic leaves the weight where it is
                if let Ok(v) = dynamic_reweight(w.omega0, max_r, s.g0.mean_abs(), p) {
                    w.omega0 = v;
                }
                if let Ok(v) = dynamic_reweight(w.omegab, max_r, s.gb.mean_abs(), p) {
                    w.omegab = v;
                }
            }
        }

        let w = self.state.weights;
        loss.weighted_total = w.combine(&loss);
        let s = &mut self.scratch;
        s.total.clear();
        s.total.axpy(w.omega0, &s.g0);
        s.total.axpy(w.omegab, &s.gb);
        s.total.axpy(w.omegar, &s.gr);

        if let (Some(pw), Weighting::Pointwise(p)) = (self.state.point_weights.as_mut(), self.tc.regime.weighting()) {
            // ascent on the weights: Adam on the negated gradient
            let inv0 = T::from_usize(s.sq_i.len()).unwrap().recip();
            let g_i: Vec<T> =
                pw.w_i.iter().zip(&s.sq_i).map(|(&w, &e)| -(pw.mask_i.derivative(w) * e * inv0)).collect();
            let invr = T::from_usize(s.sq_r.len()).unwrap().recip();
            let g_r: Vec<T> =
                pw.w_r.iter().zip(&s.sq_r).map(|(&w, &e)| -(pw.mask_r.derivative(w) * e * invr)).collect();
            if g_i.len() == pw.w_i.len() {
                self.state.adam_w_i.step(&mut pw.w_i, &g_i, p.ascent_lr);
            }
            if g_r.len() == pw.w_r.len() {
                self.state.adam_w_r.step(&mut pw.w_r, &g_r, p.ascent_lr);
            }
        }

        let lr = self.tc.lr.rate(it);
        self.state.adam.step(self.state.net.params_mut(), &self.scratch.total.values, lr);
        self.state.iteration += 1;
        Ok(loss)
    }

    /// Weighted loss gradient at the current parameters (used by checks).
    pub fn current_gradient(&mut self, active: &ActiveSet<'_, T>) -> (LossBreakdown<T>, ParamGrad<T>) {
        let mut loss = self.family_gradients(active);
        let w = self.state.weights;
        loss.weighted_total = w.combine(&loss);
        let s = &mut self.scratch;
        let mut g = ParamGrad::zeros_like(&self.state.net);
        g.axpy(w.omega0, &s.g0);
        g.axpy(w.omegab, &s.gb);
        g.axpy(w.omegar, &s.gr);
        (loss, g)
    }

    fn weighted_point_loss(&mut self, active: &ActiveSet<'_, T>) -> LossBreakdown<T> {
        self.current_gradient(active).0
    }
}

// ---------------------------------------------------------------------------
// Drivers

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow<T> {
    pub iteration: usize,
    pub l_r: T,
    pub l_0: T,
    pub l_b: T,
    pub omega0: T,
    pub omegab: T,
    pub omegar: T,
    pub lr: T,
    pub rel_l2: Option<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord<T> {
    pub k: usize,
    pub t_end: T,
    pub start_iteration: usize,
    pub iterations: usize,
    /// Parameter fingerprints entering and leaving the stage.
    pub params_in: u64,
    pub params_out: u64,
    /// Relative L2 on `[t0, t_end(j)]` for every stage window `j`, measured
    /// when this stage completes (empty without a reference).
    pub window_errors: Vec<T>,
}

impl<T: Real> StageRecord<T> {
    /// Error on this stage's own window at its completion.
    pub fn own_window_error(&self) -> Option<T> {
        self.window_errors.get(self.k - 1).copied()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput<T> {
    pub net: Mlp<T>,
    pub history: Vec<HistoryRow<T>>,
    pub final_rel_l2: Option<T>,
    pub final_loss: LossBreakdown<T>,
    pub final_weights: ScalarWeights<T>,
    pub point_weights: Option<PointWeights<T>>,
    pub stages: Vec<StageRecord<T>>,
}

/// FNV-1a over the parameter bit patterns.
pub fn params_fingerprint<T: Real>(net: &Mlp<T>) -> u64 {
    net.params().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, p| {
        (h ^ p.as_f64().to_bits()).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Point sets a run with this configuration trains on.
pub fn sample_set<T: Real>(cfg: &StefanConfig<T>, tc: &TrainConfig<T>) -> Result<SampleSet<T>> {
    let lam = solve_lambda0(cfg)?;
    build_sample_set(cfg, &lam, tc.n_initial, tc.n_boundary, tc.n_residual, tc.seed ^ SAMPLE_STREAM)
}

/// Collocation schedule of a sequential run (`None` for plain regimes).
pub fn curriculum<T: Real>(cfg: &StefanConfig<T>, tc: &TrainConfig<T>) -> Result<Option<CurriculumSchedule<T>>> {
    match &tc.regime {
        Regime::Plain(_) => Ok(None),
        Regime::Sequential { curriculum, .. } => build_curriculum(cfg, curriculum, tc.seed ^ SAMPLE_STREAM).map(Some),
    }
}

/// Trains one network. `reference` enables relative-L2 tracking.
pub fn train<T: Real>(
    cfg: &StefanConfig<T>,
    tc: &TrainConfig<T>,
    reference: Option<&ReferenceLattice<T>>,
) -> Result<TrainOutput<T>> {
    cfg.validate()?;
    tc.validate()?;
    let samples = sample_set(cfg, tc)?;
    match tc.regime {
        Regime::Plain(_) => train_plain(cfg, tc, &samples, reference),
        Regime::Sequential { loss_threshold, .. } => {
            let schedule = curriculum(cfg, tc)?.expect("sequential regime");
            train_sequential(cfg, tc, &samples, &schedule, loss_threshold, reference)
        }
    }
}

fn history_row<T: Real>(it: usize, loss: &LossBreakdown<T>, w: &ScalarWeights<T>, lr: T, rel: Option<T>) -> HistoryRow<T> {
    HistoryRow {
        iteration: it,
        l_r: loss.l_r,
        l_0: loss.l_0,
        l_b: loss.l_b,
        omega0: w.omega0,
        omegab: w.omegab,
        omegar: w.omegar,
        lr,
        rel_l2: rel,
    }
}

fn train_plain<T: Real>(
    cfg: &StefanConfig<T>,
    tc: &TrainConfig<T>,
    samples: &SampleSet<T>,
    reference: Option<&ReferenceLattice<T>>,
) -> Result<TrainOutput<T>> {
    let mut trainer = Trainer::new(cfg, tc, samples.initial.len(), samples.residual.len())?;
    let active = ActiveSet::from_samples(samples);
    let mut history = Vec::new();
    let mut metric_ev = BatchEvaluator::new();
    for _ in 0..tc.iterations {
        let it = trainer.state.iteration;
        let rel = match reference {
            Some(r) if it % tc.metric_every == 0 => Some(r.rel_l2(&trainer.state.net, &mut metric_ev)?),
            _ => None,
        };
        let loss = trainer.step(&active)?;
        if it % tc.log_every == 0 || rel.is_some() {
            history.push(history_row(it, &loss, &trainer.state.weights, tc.lr.rate(it), rel));
        }
    }
    finish(trainer, &active, history, Vec::new(), reference, &mut metric_ev)
}

fn finish<T: Real>(
    mut trainer: Trainer<'_, T>,
    active: &ActiveSet<'_, T>,
    mut history: Vec<HistoryRow<T>>,
    stages: Vec<StageRecord<T>>,
    reference: Option<&ReferenceLattice<T>>,
    ev: &mut BatchEvaluator<T>,
) -> Result<TrainOutput<T>> {
    let it = trainer.state.iteration;
    let final_loss = trainer.weighted_point_loss(active);
    if !final_loss.is_finite() {
        return Err(StefanError::NanLoss { iteration: it });
    }
    let final_rel_l2 = reference.map(|r| r.rel_l2(&trainer.state.net, ev)).transpose()?;
    history.push(history_row(it, &final_loss, &trainer.state.weights, trainer.tc.lr.rate(it), final_rel_l2));
    let state = trainer.state;
    Ok(TrainOutput {
        net: state.net,
        history,
        final_rel_l2,
        final_loss,
        final_weights: state.weights,
        point_weights: state.point_weights,
        stages,
    })
}

fn train_sequential<T: Real>(
    cfg: &StefanConfig<T>,
    tc: &TrainConfig<T>,
    samples: &SampleSet<T>,
    schedule: &CurriculumSchedule<T>,
    loss_threshold: Option<T>,
    reference: Option<&ReferenceLattice<T>>,
) -> Result<TrainOutput<T>> {
    let mut trainer = Trainer::new(cfg, tc, samples.initial.len(), schedule.residual_points.len())?;
    let mut history = Vec::new();
    let mut stages = Vec::with_capacity(schedule.stages.len());
    let mut metric_ev = BatchEvaluator::new();
    let (mut bnd, mut bnd_targets) = (Vec::new(), Vec::new());
    for stage in &schedule.stages {
        trainer.state.stage = stage.k;
        bnd.clear();
        bnd_targets.clear();
        for (p, &v) in samples.boundary.iter().zip(&samples.boundary_targets) {
            if p[0] <= stage.t_end {
                bnd.push(*p);
                bnd_targets.push(v);
            }
        }
        let active = ActiveSet {
            initial: &samples.initial,
            initial_targets: &samples.initial_targets,
            boundary: &bnd,
            boundary_targets: &bnd_targets,
            residual: schedule.stage_points(stage.k),
        };
        let start = trainer.state.iteration;
        let params_in = params_fingerprint(&trainer.state.net);
        for _ in 0..stage.n_iterations {
            let it = trainer.state.iteration;
            let rel = match reference {
                Some(r) if it % tc.metric_every == 0 => Some(r.rel_l2(&trainer.state.net, &mut metric_ev)?),
                _ => None,
            };
            let loss = trainer.step(&active)?;
            if it % tc.log_every == 0 || rel.is_some() {
                history.push(history_row(it, &loss, &trainer.state.weights, tc.lr.rate(it), rel));
            }
            if loss_threshold.is_some_and(|th| loss.weighted_total < th) {
                break;
            }
        }
        let window_errors = match reference {
            Some(r) => stage_window_errors(r, &trainer.state.net, schedule, &mut metric_ev)?,
            None => Vec::new(),
        };
        stages.push(StageRecord {
            k: stage.k,
            t_end: stage.t_end,
            start_iteration: start,
            iterations: trainer.state.iteration - start,
            params_in,
            params_out: params_fingerprint(&trainer.state.net),
            window_errors,
        });
    }
    let full = ActiveSet::from_samples(samples);
    let full = ActiveSet { residual: &schedule.residual_points, ..full };
    finish(trainer, &full, history, stages, reference, &mut metric_ev)
}

fn stage_window_errors<T: Real>(
    reference: &ReferenceLattice<T>,
    net: &Mlp<T>,
    schedule: &CurriculumSchedule<T>,
    ev: &mut BatchEvaluator<T>,
) -> Result<Vec<T>> {
    let pred = ev.values(net, reference.points());
    let nx = reference.grid.nx;
    schedule
        .stages
        .iter()
        .map(|s| {
            let n = reference.grid.rows_up_to(s.t_end) * nx;
            crate::eval::rel_l2(&pred[..n], &reference.values[..n])
        })
        .collect()
}

/// History as CSV with 17 significant digits; `rel_l2` is empty between checkpoints.
pub fn history_csv<T: Real>(rows: &[HistoryRow<T>]) -> String {
    let mut s = String::from("iteration,l_r,l_0,l_b,omega0,omegab,omegar,lr,rel_l2\n");
    let f = |v: T| format!("{:.16e}", v.as_f64());
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.iteration,
            f(r.l_r),
            f(r.l_0),
            f(r.l_b),
            f(r.omega0),
            f(r.omegab),
            f(r.omegar),
            f(r.lr),
            r.rel_l2.map(f).unwrap_or_default()
        );
    }
    s
}
