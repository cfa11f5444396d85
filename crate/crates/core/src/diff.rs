//! Feed-forward tanh network with exact input derivatives and parameter gradients.
//!
//! Input derivatives are carried forward as second-order Taylor jets in
//! `(t, x)` ([`Jet2`]). Parameter gradients of any scalar loss built from the
//! output jets are obtained by reverse accumulation through the jet
//! propagation rules, batched over points so each layer is three GEMMs.

use std::ops::{Add, Mul, Neg, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, StefanError};
use crate::scalar::{gemm, MatView, Real};

/// Value of a scalar field at `(t, x)` with `∂t`, `∂x` and `∂xx`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Jet2<T> {
    pub v: T,
    pub dt: T,
    pub dx: T,
    pub dxx: T,
}

impl<T: Real> Jet2<T> {
    pub fn new(v: T, dt: T, dx: T, dxx: T) -> Self {
        Self { v, dt, dx, dxx }
    }

    pub fn constant(v: T) -> Self {
        Self { v, dt: T::zero(), dx: T::zero(), dxx: T::zero() }
    }

    /// The coordinate `t` itself.
    pub fn var_t(t: T) -> Self {
        Self { v: t, dt: T::one(), dx: T::zero(), dxx: T::zero() }
    }

    /// The coordinate `x` itself.
    pub fn var_x(x: T) -> Self {
        Self { v: x, dt: T::zero(), dx: T::one(), dxx: T::zero() }
    }

    pub fn scale(self, c: T) -> Self {
        Self { v: self.v * c, dt: self.dt * c, dx: self.dx * c, dxx: self.dxx * c }
    }

    /// Composition `f(self)` given `f`, `f'` and `f''` at `self.v`.
    pub fn compose(self, f: T, f1: T, f2: T) -> Self {
        Self {
            v: f,
            dt: f1 * self.dt,
            dx: f1 * self.dx,
            dxx: f2 * self.dx * self.dx + f1 * self.dxx,
        }
    }

    pub fn tanh(self) -> Self {
        let s = self.v.act_tanh();
        let s1 = T::one() - s * s;
        self.compose(s, s1, T::lit(-2.0) * s * s1)
    }

    pub fn is_finite(&self) -> bool {
        self.v.is_finite() && self.dt.is_finite() && self.dx.is_finite() && self.dxx.is_finite()
    }
}

impl<T: Real> Add for Jet2<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { v: self.v + o.v, dt: self.dt + o.dt, dx: self.dx + o.dx, dxx: self.dxx + o.dxx }
    }
}

impl<T: Real> Sub for Jet2<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self { v: self.v - o.v, dt: self.dt - o.dt, dx: self.dx - o.dx, dxx: self.dxx - o.dxx }
    }
}

impl<T: Real> Neg for Jet2<T> {
    type Output = Self;
    fn neg(self) -> Self {
        self.scale(-T::one())
    }
}

impl<T: Real> Mul for Jet2<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            dt: self.dt * o.v + self.v * o.dt,
            dx: self.dx * o.v + self.v * o.dx,
            dxx: self.dxx * o.v + T::lit(2.0) * self.dx * o.dx + self.v * o.dxx,
        }
    }
}

// ---------------------------------------------------------------------------

/// Fully connected network, tanh on hidden layers and identity on the output.
///
/// Parameters are stored flat: for each layer the row-major `out x in`
/// weight matrix followed by the bias vector. Inputs pass through a fixed
/// affine map `(p - shift) * scale` before the first layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    sizes: Vec<usize>,
    params: Vec<T>,
    input_map: [(T, T); 2],
}

/// Input 2, six hidden layers of 20, output 1.
pub const DEFAULT_LAYER_SIZES: [usize; 8] = [2, 20, 20, 20, 20, 20, 20, 1];

fn identity_map<T: Real>() -> [(T, T); 2] {
    [(T::zero(), T::one()), (T::zero(), T::one())]
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
        return Err(StefanError::Shape(format!("invalid layer sizes {sizes:?}")));
    }
    if sizes[0] != 2 || *sizes.last().unwrap() != 1 {
        return Err(StefanError::Shape(format!("network must map (t, x) to a scalar, got {sizes:?}")));
    }
    Ok(())
}

impl<T: Real> Mlp<T> {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        check_sizes(sizes)?;
        Ok(Self { sizes: sizes.to_vec(), params: vec![T::zero(); param_count(sizes)], input_map: identity_map() })
    }

    pub fn from_params(sizes: &[usize], params: Vec<T>) -> Result<Self> {
        check_sizes(sizes)?;
        if params.len() != param_count(sizes) {
            return Err(StefanError::Shape(format!(
                "expected {} parameters, got {}",
                param_count(sizes),
                params.len()
            )));
        }
        Ok(Self { sizes: sizes.to_vec(), params, input_map: identity_map() })
    }

    /// Glorot-uniform weights in `±sqrt(6/(fan_in+fan_out))`, zero biases.
    pub fn xavier(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for k in 0..net.num_layers() {
            let (fan_in, fan_out) = (sizes[k], sizes[k + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in net.weights_mut(k) {
                *w = T::lit(rng.gen_range(-limit..limit));
            }
        }
        Ok(net)
    }

    /// Map the box `[lo, hi]` onto `[-1, 1]` in each input.
    pub fn with_input_box(mut self, lo: [T; 2], hi: [T; 2]) -> Self {
        let two = T::lit(2.0);
        for k in 0..2 {
            self.input_map[k] = ((lo[k] + hi[k]) / two, two / (hi[k] - lo[k]));
        }
        self
    }

    pub fn input_map(&self) -> [(T, T); 2] {
        self.input_map
    }

    fn map_input(&self, t: T, x: T) -> (T, T) {
        let [(st, kt), (sx, kx)] = self.input_map;
        ((t - st) * kt, (x - sx) * kx)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn offset(&self, layer: usize) -> usize {
        param_count(&self.sizes[..=layer])
    }

    pub fn weights(&self, layer: usize) -> &[T] {
        let o = self.offset(layer);
        &self.params[o..o + self.sizes[layer] * self.sizes[layer + 1]]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [T] {
        let o = self.offset(layer);
        let n = self.sizes[layer] * self.sizes[layer + 1];
        &mut self.params[o..o + n]
    }

    pub fn bias(&self, layer: usize) -> &[T] {
        let o = self.offset(layer) + self.sizes[layer] * self.sizes[layer + 1];
        &self.params[o..o + self.sizes[layer + 1]]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [T] {
        let o = self.offset(layer) + self.sizes[layer] * self.sizes[layer + 1];
        let n = self.sizes[layer + 1];
        &mut self.params[o..o + n]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Plain forward pass at one point.
    pub fn forward(&self, t: T, x: T) -> T {
        let (t, x) = self.map_input(t, x);
        let mut a = vec![t, x];
        for k in 0..self.num_layers() {
            let (n_in, n_out) = (self.sizes[k], self.sizes[k + 1]);
            let w = self.weights(k);
            let b = self.bias(k);
            let last = k + 1 == self.num_layers();
            a = (0..n_out)
                .map(|j| {
                    let mut acc = b[j];
                    for i in 0..n_in {
                        acc = acc + w[j * n_in + i] * a[i];
                    }
                    if last {
                        acc
                    } else {
                        acc.act_tanh()
                    }
                })
                .collect();
        }
        a[0]
    }

    /// Forward pass carrying `(∂t, ∂x, ∂xx)`. The value channel performs the
    /// same operations in the same order as [`forward`](Self::forward).
    pub fn forward_jet(&self, t: T, x: T) -> Jet2<T> {
        let (mt, mx) = self.map_input(t, x);
        let [(_, kt), (_, kx)] = self.input_map;
        let mut a = vec![
            Jet2::new(mt, kt, T::zero(), T::zero()),
            Jet2::new(mx, T::zero(), kx, T::zero()),
        ];
        for k in 0..self.num_layers() {
            let (n_in, n_out) = (self.sizes[k], self.sizes[k + 1]);
            let w = self.weights(k);
            let b = self.bias(k);
            let last = k + 1 == self.num_layers();
            a = (0..n_out)
                .map(|j| {
                    let mut acc = Jet2::constant(b[j]);
                    for i in 0..n_in {
                        acc = acc + a[i].scale(w[j * n_in + i]);
                    }
                    if last {
                        acc
                    } else {
                        acc.tanh()
                    }
                })
                .collect();
        }
        a[0]
    }
}

// ---------------------------------------------------------------------------

/// Gradient with one slot per network parameter, same layout as [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad<T> {
    pub values: Vec<T>,
}

impl<T: Real> ParamGrad<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        Self { values: vec![T::zero(); net.num_params()] }
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = T::zero());
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: T, other: &Self) {
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s = *s + a * *o;
        }
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn mean_abs(&self) -> T {
        let s: T = self.values.iter().map(|v| v.abs()).sum();
        s / T::from_usize(self.values.len().max(1)).unwrap()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Batched evaluation

const CHUNK: usize = 128;

/// Reusable buffers for batched forward/backward passes.
#[derive(Clone, Debug)]
pub struct BatchEvaluator<T> {
    // per layer input activations (layer 0 = network input), row-major rows x (channels*chunk)
    acts: Vec<Vec<T>>,
    // per layer pre-activations
    pre: Vec<Vec<T>>,
    bar_a: Vec<T>,
    bar_z: Vec<T>,
    out_jets: Vec<Jet2<T>>,
    adjoints: Vec<Jet2<T>>,
}

impl<T: Real> Default for BatchEvaluator<T> {
    fn default() -> Self {
        Self {
            acts: Vec::new(),
            pre: Vec::new(),
            bar_a: Vec::new(),
            bar_z: Vec::new(),
            out_jets: Vec::new(),
            adjoints: Vec::new(),
        }
    }
}

impl<T: Real> BatchEvaluator<T> {
    pub fn new() -> Self {
        Self::default()
    }

    fn prepare(&mut self, sizes: &[usize], channels: usize) {
        let cols = channels * CHUNK;
        let layers = sizes.len() - 1;
        self.acts.resize_with(layers + 1, Vec::new);
        self.pre.resize_with(layers, Vec::new);
        for (k, &s) in sizes.iter().enumerate() {
            if self.acts[k].len() < s * cols {
                self.acts[k].resize(s * cols, T::zero());
            }
            if k > 0 && self.pre[k - 1].len() < s * cols {
                self.pre[k - 1].resize(s * cols, T::zero());
            }
        }
        let widest = sizes.iter().copied().max().unwrap_or(1);
        if self.bar_a.len() < widest * cols {
            self.bar_a.resize(widest * cols, T::zero());
            self.bar_z.resize(widest * cols, T::zero());
        }
    }

    // Forward over one chunk of `b` points with `c` channels (1: value, 4: jet).
    fn forward_chunk(&mut self, net: &Mlp<T>, pts: &[[T; 2]], c: usize) {
        let b = pts.len();
        let ld = c * b;
        {
            let a0 = &mut self.acts[0][..2 * ld];
            a0.iter_mut().for_each(|v| *v = T::zero());
            for (p, pt) in pts.iter().enumerate() {
                let (t, x) = net.map_input(pt[0], pt[1]);
                a0[p] = t;
                a0[ld + p] = x;
            }
            if c == 4 {
                // dt channel of t, dx channel of x
                let [(_, kt), (_, kx)] = net.input_map;
                for p in 0..b {
                    a0[b + p] = kt;
                    a0[ld + 2 * b + p] = kx;
                }
            }
        }
        let layers = net.num_layers();
        for k in 0..layers {
            let (n_in, n_out) = (net.sizes[k], net.sizes[k + 1]);
            let (before, after) = self.acts.split_at_mut(k + 1);
            let a = &before[k][..n_in * ld];
            let z = &mut self.pre[k][..n_out * ld];
            gemm(T::one(), MatView::new(net.weights(k), n_out, n_in), MatView::new(a, n_in, ld), T::zero(), z, ld);
            for (j, &bj) in net.bias(k).iter().enumerate() {
                for v in &mut z[j * ld..j * ld + b] {
                    *v = *v + bj;
                }
            }
            let h = &mut after[0][..n_out * ld];
            if k + 1 == layers {
                h.copy_from_slice(z);
                continue;
            }
            for j in 0..n_out {
                let zr = &z[j * ld..(j + 1) * ld];
                let hr = &mut h[j * ld..(j + 1) * ld];
                if c == 1 {
                    for p in 0..b {
                        hr[p] = zr[p].act_tanh();
                    }
                } else {
                    for p in 0..b {
                        let s = zr[p].act_tanh();
                        let s1 = T::one() - s * s;
                        let s2 = T::lit(-2.0) * s * s1;
                        let (zt, zx, zxx) = (zr[b + p], zr[2 * b + p], zr[3 * b + p]);
                        hr[p] = s;
                        hr[b + p] = s1 * zt;
                        hr[2 * b + p] = s1 * zx;
                        hr[3 * b + p] = s2 * zx * zx + s1 * zxx;
                    }
                }
            }
        }
    }

    // Backward over the chunk; `bar_z` holds the output adjoint on entry.
    fn backward_chunk(&mut self, net: &Mlp<T>, b: usize, c: usize, grad: &mut ParamGrad<T>) {
        let ld = c * b;
        let layers = net.num_layers();
        let mut offsets = Vec::with_capacity(layers);
        let mut o = 0;
        for k in 0..layers {
            offsets.push(o);
            o += net.sizes[k] * net.sizes[k + 1] + net.sizes[k + 1];
        }
        for k in (0..layers).rev() {
            let (n_in, n_out) = (net.sizes[k], net.sizes[k + 1]);
            let a = &self.acts[k][..n_in * ld];
            let zbar = &self.bar_z[..n_out * ld];
            let (gw, gb) = grad.values[offsets[k]..offsets[k] + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            gemm(T::one(), MatView::new(zbar, n_out, ld), MatView::new(a, n_in, ld).t(), T::one(), gw, n_in);
            for j in 0..n_out {
                let s: T = zbar[j * ld..j * ld + b].iter().copied().sum();
                gb[j] = gb[j] + s;
            }
            if k == 0 {
                break;
            }
            let abar = &mut self.bar_a[..n_in * ld];
            gemm(T::one(), MatView::new(net.weights(k), n_out, n_in).t(), MatView::new(zbar, n_out, ld), T::zero(), abar, ld);
            // through the tanh of layer k-1 (pre-activation z, activation h = acts[k])
            let z = &self.pre[k - 1][..n_in * ld];
            let h = &self.acts[k][..n_in * ld];
            let zbar_prev = &mut self.bar_z[..n_in * ld];
            for j in 0..n_in {
                let r = j * ld;
                if c == 1 {
                    for p in 0..b {
                        let s = h[r + p];
                        zbar_prev[r + p] = abar[r + p] * (T::one() - s * s);
                    }
                } else {
                    for p in 0..b {
                        let s = h[r + p];
                        let s1 = T::one() - s * s;
                        let s2 = T::lit(-2.0) * s * s1;
                        let s3 = T::lit(-2.0) * s1 * s1 - T::lit(2.0) * s * s2;
                        let (zt, zx, zxx) = (z[r + b + p], z[r + 2 * b + p], z[r + 3 * b + p]);
                        let (av, at, ax, axx) = (abar[r + p], abar[r + b + p], abar[r + 2 * b + p], abar[r + 3 * b + p]);
                        zbar_prev[r + p] = av * s1 + (at * zt + ax * zx) * s2 + axx * (s3 * zx * zx + s2 * zxx);
                        zbar_prev[r + b + p] = at * s1;
                        zbar_prev[r + 2 * b + p] = ax * s1 + T::lit(2.0) * axx * s2 * zx;
                        zbar_prev[r + 3 * b + p] = axx * s1;
                    }
                }
            }
        }
    }

    fn output_row(&self, net: &Mlp<T>) -> &[T] {
        &self.acts[net.num_layers()]
    }

    /// Network values at all points.
    pub fn values(&mut self, net: &Mlp<T>, pts: &[[T; 2]]) -> Vec<T> {
        self.prepare(net.sizes(), 1);
        let mut out = Vec::with_capacity(pts.len());
        for chunk in pts.chunks(CHUNK) {
            self.forward_chunk(net, chunk, 1);
            out.extend_from_slice(&self.output_row(net)[..chunk.len()]);
        }
        out
    }

    /// Output jets at all points.
    pub fn jets(&mut self, net: &Mlp<T>, pts: &[[T; 2]]) -> Vec<Jet2<T>> {
        self.prepare(net.sizes(), 4);
        let mut out = Vec::with_capacity(pts.len());
        for chunk in pts.chunks(CHUNK) {
            let b = chunk.len();
            self.forward_chunk(net, chunk, 4);
            let o = self.output_row(net);
            out.extend((0..b).map(|p| Jet2::new(o[p], o[b + p], o[2 * b + p], o[3 * b + p])));
        }
        out
    }

    /// Sums `loss(i, u_i)` over the points and accumulates its parameter
    /// gradient into `grad`. `loss` returns the contribution and `∂/∂u_i`.
    pub fn backprop_values<F>(&mut self, net: &Mlp<T>, pts: &[[T; 2]], mut loss: F, grad: &mut ParamGrad<T>) -> T
    where
        F: FnMut(usize, T) -> (T, T),
    {
        self.prepare(net.sizes(), 1);
        let mut total = T::zero();
        for (ci, chunk) in pts.chunks(CHUNK).enumerate() {
            let b = chunk.len();
            self.forward_chunk(net, chunk, 1);
            for p in 0..b {
                let u = self.acts[net.num_layers()][p];
                let (l, g) = loss(ci * CHUNK + p, u);
                total = total + l;
                self.bar_z[p] = g;
            }
            self.backward_chunk(net, b, 1, grad);
        }
        total
    }

    /// Jet version of [`backprop_values`](Self::backprop_values): `loss`
    /// returns the contribution and its derivative with respect to each jet
    /// component.
    pub fn backprop_jets<F>(&mut self, net: &Mlp<T>, pts: &[[T; 2]], mut loss: F, grad: &mut ParamGrad<T>) -> T
    where
        F: FnMut(usize, &Jet2<T>) -> (T, Jet2<T>),
    {
        self.prepare(net.sizes(), 4);
        let mut total = T::zero();
        for (ci, chunk) in pts.chunks(CHUNK).enumerate() {
            let b = chunk.len();
            self.forward_chunk(net, chunk, 4);
            self.out_jets.clear();
            {
                let o = &self.acts[net.num_layers()];
                self.out_jets.extend((0..b).map(|p| Jet2::new(o[p], o[b + p], o[2 * b + p], o[3 * b + p])));
            }
            self.adjoints.clear();
            for (p, jet) in self.out_jets.iter().enumerate() {
                let (l, g) = loss(ci * CHUNK + p, jet);
                total = total + l;
                self.adjoints.push(g);
            }
            for (p, g) in self.adjoints.iter().enumerate() {
                self.bar_z[p] = g.v;
                self.bar_z[b + p] = g.dt;
                self.bar_z[2 * b + p] = g.dx;
                self.bar_z[3 * b + p] = g.dxx;
            }
            self.backward_chunk(net, b, 4, grad);
        }
        total
    }
}

/// Value and parameter gradient of `Σ_i loss(i, jet_i)` over a point batch.
pub fn loss_param_grad<T, F>(net: &Mlp<T>, pts: &[[T; 2]], loss: F) -> (T, ParamGrad<T>)
where
    T: Real,
    F: FnMut(usize, &Jet2<T>) -> (T, Jet2<T>),
{
    let mut grad = ParamGrad::zeros_like(net);
    let total = BatchEvaluator::new().backprop_jets(net, pts, loss, &mut grad);
    (total, grad)
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &str = "stefan-pinn-mlp";
const CHECKPOINT_VERSION: u32 = 1;

impl<T: Real> Mlp<T> {
    /// Decimal text dump: header lines, then one parameter per line with
    /// 17 significant digits.
    pub fn to_checkpoint(&self) -> String {
        let mut s = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\nactivation tanh\nsizes");
        for n in &self.sizes {
            s.push_str(&format!(" {n}"));
        }
        let [(st, kt), (sx, kx)] = self.input_map;
        s.push_str(&format!(
            "\ninput_map {:.16e} {:.16e} {:.16e} {:.16e}",
            st.as_f64(),
            kt.as_f64(),
            sx.as_f64(),
            kx.as_f64()
        ));
        s.push_str(&format!("\nparams {}\n", self.params.len()));
        for p in &self.params {
            s.push_str(&format!("{:.16e}\n", p.as_f64()));
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let perr = |m: String| StefanError::Parse(m);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| perr("empty checkpoint".into()))?;
        let mut hp = header.split_whitespace();
        if hp.next() != Some(CHECKPOINT_MAGIC) {
            return Err(perr(format!("not a network checkpoint: {header:?}")));
        }
        let version: u32 = hp.next().and_then(|v| v.parse().ok()).ok_or_else(|| perr("missing version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(perr(format!("unsupported checkpoint version {version}")));
        }
        let mut sizes = None;
        let mut count = None;
        let mut map = None;
        for line in lines.by_ref() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("activation") => {
                    if parts.next() != Some("tanh") {
                        return Err(perr(format!("unsupported activation in {line:?}")));
                    }
                }
                Some("sizes") => {
                    sizes = Some(
                        parts
                            .map(|p| p.parse::<usize>().map_err(|e| perr(format!("bad size {p:?}: {e}"))))
                            .collect::<Result<Vec<_>>>()?,
                    );
                }
                Some("input_map") => {
                    let v = parts
                        .map(|p| p.parse::<f64>().map_err(|e| perr(format!("bad input map {p:?}: {e}"))))
                        .collect::<Result<Vec<_>>>()?;
                    if v.len() != 4 || v[1] == 0.0 || v[3] == 0.0 {
                        return Err(perr(format!("bad input map line {line:?}")));
                    }
                    map = Some([(T::lit(v[0]), T::lit(v[1])), (T::lit(v[2]), T::lit(v[3]))]);
                }
                Some("params") => {
                    count = parts.next().and_then(|c| c.parse::<usize>().ok());
                    break;
                }
                _ => return Err(perr(format!("unexpected header line {line:?}"))),
            }
        }
        let sizes = sizes.ok_or_else(|| perr("missing sizes".into()))?;
        let count = count.ok_or_else(|| perr("missing params count".into()))?;
        let params = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map(T::lit)
                    .map_err(|e| perr(format!("bad parameter {l:?}: {e}")))
            })
            .collect::<Result<Vec<T>>>()?;
        if params.len() != count {
            return Err(perr(format!("expected {count} parameters, found {}", params.len())));
        }
        let mut net = Self::from_params(&sizes, params)?;
        if let Some(m) = map {
            net.input_map = m;
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / ((1u64 << 53) as f64)
    }

    #[test]
    fn zero_network_has_zero_jet() {
        let net = Mlp::<f64>::zeros(&DEFAULT_LAYER_SIZES).unwrap();
        assert_eq!(net.forward_jet(0.3, 0.7), Jet2::new(0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn single_tanh_neuron() {
        // u = 1 * tanh(0*t + 1*x)
        let net = Mlp::<f64>::from_params(&[2, 1, 1], vec![0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let j = net.forward_jet(0.4, 0.0);
        assert_eq!(j.v, 0.0);
        assert_eq!(j.dx, 1.0);
        assert_eq!(j.dxx, 0.0);
        assert_eq!(j.dt, 0.0);
    }

    #[test]
    fn product_rule_second_order() {
        let mut s = 7u64;
        for _ in 0..50 {
            let a = Jet2::new(lcg(&mut s), lcg(&mut s), lcg(&mut s), lcg(&mut s));
            let b = Jet2::new(lcg(&mut s), lcg(&mut s), lcg(&mut s), lcg(&mut s));
            let p = a * b;
            assert_eq!(p.dxx, a.dxx * b.v + 2.0 * a.dx * b.dx + a.v * b.dxx);
            assert_eq!(p.dt, a.dt * b.v + a.v * b.dt);
        }
    }

    #[test]
    fn tanh_jet_matches_finite_differences() {
        // g(x) = tanh(x^2 + 0.3 x), jet seeded through the product rule
        let g = |x: f64| (x * x + 0.3 * x).tanh();
        for &x0 in &[-0.8, 0.1, 0.9] {
            let xj = Jet2::var_x(x0);
            let jet = (xj * xj + xj.scale(0.3)).tanh();
            let h = 1e-4;
            let d1 = (g(x0 + h) - g(x0 - h)) / (2.0 * h);
            let d2 = (g(x0 + h) - 2.0 * g(x0) + g(x0 - h)) / (h * h);
            assert!((jet.dx - d1).abs() < 1e-7);
            assert!((jet.dxx - d2).abs() < 1e-5);
        }
    }

    #[test]
    fn xavier_is_deterministic_with_zero_bias() {
        let a = Mlp::<f64>::xavier(&DEFAULT_LAYER_SIZES, 42).unwrap();
        let b = Mlp::<f64>::xavier(&DEFAULT_LAYER_SIZES, 42).unwrap();
        let c = Mlp::<f64>::xavier(&DEFAULT_LAYER_SIZES, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for k in 0..a.num_layers() {
            assert!(a.bias(k).iter().all(|&v| v == 0.0));
            let lim = (6.0 / (a.sizes()[k] + a.sizes()[k + 1]) as f64).sqrt();
            assert!(a.weights(k).iter().all(|w| w.abs() <= lim));
        }
        assert_eq!(a.num_params(), 2 * 20 + 20 + 5 * (400 + 20) + 21);
    }

    #[test]
    fn xavier_variance_over_seeds() {
        let sizes = [2, 20, 20, 1];
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut n = 0.0;
        for seed in 0..100 {
            let net = Mlp::<f64>::xavier(&sizes, seed).unwrap();
            for &w in net.weights(1) {
                sum += w;
                sq += w * w;
                n += 1.0;
            }
        }
        let mean = sum / n;
        let var = sq / n - mean * mean;
        assert!((var - 0.05).abs() < 0.2 * 0.05, "{var}");
    }

    #[test]
    fn value_channel_is_bit_identical() {
        let net = Mlp::<f64>::xavier(&DEFAULT_LAYER_SIZES, 3).unwrap();
        let mut s = 11u64;
        for _ in 0..100 {
            let (t, x) = (lcg(&mut s), lcg(&mut s));
            assert_eq!(net.forward_jet(t, x).v, net.forward(t, x));
        }
    }

    #[test]
    fn batched_paths_agree_with_pointwise() {
        let net = Mlp::<f64>::xavier(&DEFAULT_LAYER_SIZES, 5).unwrap().with_input_box([0.05, 0.0], [1.0, 1.0]);
        let mut s = 1u64;
        let pts: Vec<[f64; 2]> = (0..300).map(|_| [lcg(&mut s), lcg(&mut s)]).collect();
        let mut ev = BatchEvaluator::new();
        let vals = ev.values(&net, &pts);
        let jets = ev.jets(&net, &pts);
        for (p, (v, j)) in pts.iter().zip(vals.iter().zip(&jets)) {
            let r = net.forward_jet(p[0], p[1]);
            assert!((v - r.v).abs() < 1e-13);
            assert!((j.v - r.v).abs() < 1e-13);
            assert!((j.dt - r.dt).abs() < 1e-12);
            assert!((j.dx - r.dx).abs() < 1e-12);
            assert!((j.dxx - r.dxx).abs() < 1e-11);
        }
    }

    #[test]
    fn linear_model_gradient() {
        // u = w0 t + w1 x + b, loss = u^2 / 2
        let net = Mlp::<f64>::from_params(&[2, 1], vec![0.5, -1.5, 0.25]).unwrap();
        let (t, x) = (0.3, 0.8);
        let u = net.forward(t, x);
        let (l, g) = loss_param_grad(&net, &[[t, x]], |_, j| (0.5 * j.v * j.v, Jet2::new(j.v, 0.0, 0.0, 0.0)));
        assert!((l - 0.5 * u * u).abs() < 1e-15);
        let expect = [u * t, u * x, u];
        for (a, b) in g.values.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let net = Mlp::<f64>::xavier(&DEFAULT_LAYER_SIZES, 9).unwrap();
        let (_, g) = loss_param_grad(&net, &[[0.1, 0.2], [0.5, 0.5]], |_, _| (1.0, Jet2::default()));
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_box_applies_chain_rule() {
        let net = Mlp::<f64>::xavier(&[2, 8, 8, 1], 2).unwrap().with_input_box([0.05, 0.0], [1.0, 1.0]);
        let plain = Mlp::<f64>::from_params(&[2, 8, 8, 1], net.params().to_vec()).unwrap();
        assert_eq!(net.forward(0.05, 1.0), plain.forward(-1.0, 1.0));
        let (t, x, h) = (0.4, 0.3, 1e-4);
        let j = net.forward_jet(t, x);
        let f = |t, x| net.forward(t, x);
        assert!((j.dt - (f(t + h, x) - f(t - h, x)) / (2.0 * h)).abs() < 1e-7);
        assert!((j.dx - (f(t, x + h) - f(t, x - h)) / (2.0 * h)).abs() < 1e-7);
        assert!((j.dxx - (f(t, x + h) - 2.0 * f(t, x) + f(t, x - h)) / (h * h)).abs() < 1e-5);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let net = Mlp::<f64>::xavier(&DEFAULT_LAYER_SIZES, 17).unwrap().with_input_box([0.05, 0.0], [1.0, 1.0]);
        let back = Mlp::<f64>::from_checkpoint(&net.to_checkpoint()).unwrap();
        assert_eq!(net, back);
        assert!(Mlp::<f64>::from_checkpoint("garbage").is_err());
        let truncated: String = net.to_checkpoint().lines().take(10).map(|l| format!("{l}\n")).collect();
        assert!(Mlp::<f64>::from_checkpoint(&truncated).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Mlp::<f64>::zeros(&[3, 1]).is_err());
        assert!(Mlp::<f64>::zeros(&[2, 0, 1]).is_err());
        assert!(Mlp::<f64>::from_params(&[2, 1], vec![1.0]).is_err());
    }
}
