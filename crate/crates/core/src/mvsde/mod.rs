//! Interacting-particle approximation of controlled McKean-Vlasov SDEs whose
//! coefficients see the law only through the means `E[X_t]` and `E[alpha_t]`.
//!
//! Time stepping is Euler-Maruyama. Each particle owns a ChaCha8 stream
//! (`seed`, stream = particle index) that yields its initial Gaussian draw
//! first and then its Brownian increments step by step, so ensembles are
//! bit-identical for any thread count.

mod derivative;

pub use derivative::{cost_gradient, directional_derivative_check, DerivativeCheck};

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{column_means, pairwise_mean, pairwise_sum};
use crate::par;

/// Uniform grid `t_k = k T / M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::InvalidInput("grid needs at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }
}

/// State, control and Brownian dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Dims {
    pub state: usize,
    pub control: usize,
    pub noise: usize,
}

/// Partial derivatives of one coefficient column (`n` rows).
#[derive(Debug, Clone, PartialEq)]
pub struct Partials {
    pub x: DMatrix<f64>,
    pub mean_x: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub mean_a: DMatrix<f64>,
}

impl Partials {
    pub fn zeros(n: usize, l: usize) -> Self {
        Self {
            x: DMatrix::zeros(n, n),
            mean_x: DMatrix::zeros(n, n),
            u: DMatrix::zeros(n, l),
            mean_a: DMatrix::zeros(n, l),
        }
    }
}

/// Jacobians of the drift and of every diffusion column.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientJacobians {
    pub drift: Partials,
    pub diffusion: Vec<Partials>,
}

/// Drift `b(t, x, E[X], E[alpha], u)` and diffusion `sigma(...)` (row-major
/// `n x r`) with their derivatives.
pub trait MeanFieldDynamics: Send + Sync {
    fn dims(&self) -> Dims;
    fn drift(&self, t: f64, x: &[f64], mean_x: &[f64], mean_a: &[f64], u: &[f64], out: &mut [f64]);
    fn diffusion(&self, t: f64, x: &[f64], mean_x: &[f64], mean_a: &[f64], u: &[f64], out: &mut [f64]);
    fn jacobians(&self, t: f64, x: &[f64], mean_x: &[f64], mean_a: &[f64], u: &[f64]) -> CoefficientJacobians;
    /// Declared Lipschitz modulus in `(x, mean_x, mean_a, u)`, if any.
    fn lipschitz_modulus(&self) -> Option<f64> {
        None
    }
}

/// Scalar affine family
/// `b = b0 + b1 x + b2 E[X] + b3 u + b4 E[alpha]`,
/// `sigma = s0 + s1 x + s2 E[X] + s3 u + s4 E[alpha]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LinearMeanField {
    pub b: [f64; 5],
    pub s: [f64; 5],
}

impl LinearMeanField {
    /// The coefficient layout of the linear-quadratic example (no constants).
    pub fn lq(b: [f64; 4], s: [f64; 4]) -> Self {
        Self {
            b: [0.0, b[0], b[1], b[2], b[3]],
            s: [0.0, s[0], s[1], s[2], s[3]],
        }
    }

    fn eval(c: &[f64; 5], x: f64, m: f64, u: f64, a: f64) -> f64 {
        c[0] + c[1] * x + c[2] * m + c[3] * u + c[4] * a
    }

    fn partials(c: &[f64; 5]) -> Partials {
        Partials {
            x: DMatrix::from_element(1, 1, c[1]),
            mean_x: DMatrix::from_element(1, 1, c[2]),
            u: DMatrix::from_element(1, 1, c[3]),
            mean_a: DMatrix::from_element(1, 1, c[4]),
        }
    }
}

impl MeanFieldDynamics for LinearMeanField {
    fn dims(&self) -> Dims {
        Dims { state: 1, control: 1, noise: 1 }
    }

    fn drift(&self, _t: f64, x: &[f64], mean_x: &[f64], mean_a: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = Self::eval(&self.b, x[0], mean_x[0], u[0], mean_a[0]);
    }

    fn diffusion(&self, _t: f64, x: &[f64], mean_x: &[f64], mean_a: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = Self::eval(&self.s, x[0], mean_x[0], u[0], mean_a[0]);
    }

    fn jacobians(&self, _t: f64, _x: &[f64], _mx: &[f64], _ma: &[f64], _u: &[f64]) -> CoefficientJacobians {
        CoefficientJacobians {
            drift: Self::partials(&self.b),
            diffusion: vec![Self::partials(&self.s)],
        }
    }

    fn lipschitz_modulus(&self) -> Option<f64> {
        let l1 = |c: &[f64; 5]| c[1..].iter().map(|v| v.abs()).sum::<f64>();
        Some(l1(&self.b) + l1(&self.s))
    }
}

/// Largest sampled difference quotient `(|db| + |dsigma|_F) / |d(x, m, a, u)|`
/// over random pairs in the cube `[-radius, radius]`.
pub fn sampled_lipschitz(dynamics: &dyn MeanFieldDynamics, t: f64, radius: f64, samples: usize, seed: u64) -> f64 {
    let d = dynamics.dims();
    let width = 2 * d.state + 2 * d.control;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let eval = |p: &[f64]| {
        let (x, rest) = p.split_at(d.state);
        let (m, rest) = rest.split_at(d.state);
        let (u, a) = rest.split_at(d.control);
        let mut b = vec![0.0; d.state];
        let mut s = vec![0.0; d.state * d.noise];
        dynamics.drift(t, x, m, a, u, &mut b);
        dynamics.diffusion(t, x, m, a, u, &mut s);
        (b, s)
    };
    for _ in 0..samples {
        let p: Vec<f64> = (0..width).map(|_| rng.random_range(-radius..=radius)).collect();
        let q: Vec<f64> = (0..width).map(|_| rng.random_range(-radius..=radius)).collect();
        let dist = p.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dist == 0.0 {
            continue;
        }
        let (b1, s1) = eval(&p);
        let (b2, s2) = eval(&q);
        let db = b1.iter().zip(&b2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let ds = s1.iter().zip(&s2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst = worst.max((db + ds) / dist);
    }
    worst
}

/// Law of the initial state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum InitialLaw {
    PointMass(Vec<f64>),
    /// Independent Gaussian coordinates.
    Gaussian { mean: Vec<f64>, variance: Vec<f64> },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::PointMass(x) => x.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        if let InitialLaw::Gaussian { mean, variance } = self {
            check_dim("initial variance", mean.len(), variance.len())?;
            if variance.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidInput("initial variance must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }
}

/// Everything that fixes a particle run apart from dynamics and control.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSetup {
    pub grid: TimeGrid,
    pub particles: usize,
    pub seed: u64,
    pub initial: InitialLaw,
}

/// Initial states and Brownian increments of one seeded run.
#[derive(Debug, Clone)]
pub struct BrownianNoise {
    dims: Dims,
    particles: usize,
    steps: usize,
    /// `particles x n` initial states.
    pub initial_states: Arc<Vec<f64>>,
    /// `(step * particles + particle) * r + j` layout.
    pub increments: Arc<Vec<f64>>,
}

impl BrownianNoise {
    pub fn generate(setup: &SimulationSetup, dims: Dims) -> Result<Self> {
        setup.initial.validate()?;
        check_dim("initial law", dims.state, setup.initial.dim())?;
        let (n, r, m, np) = (dims.state, dims.noise, setup.grid.steps(), setup.particles);
        let sqdt = setup.grid.dt().sqrt();
        let per_particle = par::map_range(np, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
            rng.set_stream(i as u64);
            let z0: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let x0: Vec<f64> = match &setup.initial {
                InitialLaw::PointMass(x) => x.clone(),
                InitialLaw::Gaussian { mean, variance } => {
                    (0..n).map(|d| mean[d] + variance[d].sqrt() * z0[d]).collect()
                }
            };
            let dw: Vec<f64> = (0..m * r).map(|_| sqdt * rng.sample::<f64, _>(StandardNormal)).collect();
            (x0, dw)
        });
        let mut initial = vec![0.0; np * n];
        let mut increments = vec![0.0; m * np * r];
        for (i, (x0, dw)) in per_particle.into_iter().enumerate() {
            initial[i * n..(i + 1) * n].copy_from_slice(&x0);
            for k in 0..m {
                let dst = (k * np + i) * r;
                increments[dst..dst + r].copy_from_slice(&dw[k * r..(k + 1) * r]);
            }
        }
        Ok(Self {
            dims,
            particles: np,
            steps: m,
            initial_states: Arc::new(initial),
            increments: Arc::new(increments),
        })
    }
}

/// Feedback law `(step, t, x, mean_x, out)`.
pub type FeedbackFn = Arc<dyn Fn(usize, f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Particle-indexed feedback `(step, particle, t, x, mean_x, out)`.
pub type IndexedFeedbackFn = Arc<dyn Fn(usize, usize, f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// How controls are produced during a forward pass.
#[derive(Clone)]
pub enum ControlPolicy {
    /// Per particle-step controls, layout `(step * particles + particle) * l + j`
    /// over `M + 1` steps.
    OpenLoop(Arc<Vec<f64>>),
    Feedback(FeedbackFn),
    /// Feedback that may also depend on the particle index (e.g. a stored
    /// per-particle control field clamped against the current state).
    Indexed(IndexedFeedbackFn),
}

impl fmt::Debug for ControlPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlPolicy::OpenLoop(v) => write!(f, "OpenLoop({} values)", v.len()),
            ControlPolicy::Feedback(_) => write!(f, "Feedback(..)"),
            ControlPolicy::Indexed(_) => write!(f, "Indexed(..)"),
        }
    }
}

impl ControlPolicy {
    pub fn open_loop(controls: Vec<f64>) -> Self {
        ControlPolicy::OpenLoop(Arc::new(controls))
    }

    /// The same control vector at every particle and step.
    pub fn constant(u: Vec<f64>) -> Self {
        ControlPolicy::Feedback(Arc::new(move |_, _, _, _, out: &mut [f64]| out.copy_from_slice(&u)))
    }

    pub fn feedback<F>(f: F) -> Self
    where
        F: Fn(usize, f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        ControlPolicy::Feedback(Arc::new(f))
    }

    pub fn indexed<F>(f: F) -> Self
    where
        F: Fn(usize, usize, f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        ControlPolicy::Indexed(Arc::new(f))
    }
}

/// `N` particle paths of state and control on a grid.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub dims: Dims,
    pub grid: TimeGrid,
    pub particles: usize,
    pub seed: u64,
    /// `(step * particles + particle) * n + d`, `M + 1` steps.
    pub states: Vec<f64>,
    /// `(step * particles + particle) * l + j`, `M + 1` steps.
    pub controls: Vec<f64>,
    /// `(step * particles + particle) * r + j`, `M` steps.
    pub increments: Arc<Vec<f64>>,
    /// Empirical state mean per step (`(M + 1) x n`).
    pub mean_x: Vec<f64>,
    /// Empirical control mean per step (`(M + 1) x l`).
    pub mean_a: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn state(&self, k: usize, i: usize) -> &[f64] {
        let n = self.dims.state;
        let at = (k * self.particles + i) * n;
        &self.states[at..at + n]
    }

    pub fn control(&self, k: usize, i: usize) -> &[f64] {
        let l = self.dims.control;
        let at = (k * self.particles + i) * l;
        &self.controls[at..at + l]
    }

    pub fn increment(&self, k: usize, i: usize) -> &[f64] {
        let r = self.dims.noise;
        let at = (k * self.particles + i) * r;
        &self.increments[at..at + r]
    }

    /// All states at step `k`, particle-major.
    pub fn states_at(&self, k: usize) -> &[f64] {
        let w = self.particles * self.dims.state;
        &self.states[k * w..(k + 1) * w]
    }

    pub fn controls_at(&self, k: usize) -> &[f64] {
        let w = self.particles * self.dims.control;
        &self.controls[k * w..(k + 1) * w]
    }

    pub fn mean_x_at(&self, k: usize) -> &[f64] {
        let n = self.dims.state;
        &self.mean_x[k * n..(k + 1) * n]
    }

    pub fn mean_a_at(&self, k: usize) -> &[f64] {
        let l = self.dims.control;
        &self.mean_a[k * l..(k + 1) * l]
    }

    fn refresh_means(&mut self) {
        let (n, l) = (self.dims.state, self.dims.control);
        let steps = self.grid.steps() + 1;
        self.mean_x = (0..steps).flat_map(|k| column_means(self.states_at(k), n)).collect();
        self.mean_a = (0..steps).flat_map(|k| column_means(self.controls_at(k), l)).collect();
    }
}

fn validate(dynamics: &dyn MeanFieldDynamics, setup: &SimulationSetup, policy: &ControlPolicy) -> Result<Dims> {
    let d = dynamics.dims();
    if d.state == 0 || d.control == 0 || d.noise == 0 {
        return Err(Error::InvalidInput("state, control and noise dimensions must be positive".into()));
    }
    if setup.particles < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 particles, got {}", setup.particles)));
    }
    if let ControlPolicy::OpenLoop(v) = policy {
        check_dim("open-loop controls", (setup.grid.steps() + 1) * setup.particles * d.control, v.len())?;
    }
    Ok(d)
}

/// Frozen `(mean_x, mean_a)` flow, one row per step.
struct FrozenFlow<'a> {
    mean_x: &'a [f64],
    mean_a: &'a [f64],
}

fn run(
    dynamics: &dyn MeanFieldDynamics,
    policy: &ControlPolicy,
    setup: &SimulationSetup,
    noise: &BrownianNoise,
    frozen: Option<FrozenFlow<'_>>,
) -> Result<ParticleEnsemble> {
    let d = validate(dynamics, setup, policy)?;
    if noise.dims != d || noise.particles != setup.particles || noise.steps != setup.grid.steps() {
        return Err(Error::InvalidInput("noise was generated for a different setup".into()));
    }
    let (n, l, r) = (d.state, d.control, d.noise);
    let (np, m) = (setup.particles, setup.grid.steps());
    let dt = setup.grid.dt();
    let mut states = vec![0.0; (m + 1) * np * n];
    let mut controls = vec![0.0; (m + 1) * np * l];
    states[..np * n].copy_from_slice(&noise.initial_states);
    let inc = &noise.increments;

    for k in 0..=m {
        let t = setup.grid.t(k);
        let (done, rest) = states.split_at_mut((k + 1) * np * n);
        let cur = &done[k * np * n..];
        let mx: Vec<f64> = match &frozen {
            Some(f) => f.mean_x[k * n..(k + 1) * n].to_vec(),
            None => column_means(cur, n),
        };
        let ctrl = &mut controls[k * np * l..(k + 1) * np * l];
        match policy {
            ControlPolicy::OpenLoop(v) => ctrl.copy_from_slice(&v[k * np * l..(k + 1) * np * l]),
            ControlPolicy::Feedback(f) => {
                par::for_each_chunk(ctrl, l, || (), |_, i, out| f(k, t, &cur[i * n..(i + 1) * n], &mx, out))
            }
            ControlPolicy::Indexed(f) => {
                par::for_each_chunk(ctrl, l, || (), |_, i, out| f(k, i, t, &cur[i * n..(i + 1) * n], &mx, out))
            }
        }
        let ctrl = &controls[k * np * l..(k + 1) * np * l];
        let ma: Vec<f64> = match &frozen {
            Some(f) => f.mean_a[k * l..(k + 1) * l].to_vec(),
            None => column_means(ctrl, l),
        };
        if k == m {
            break;
        }
        let next = &mut rest[..np * n];
        let dw = &inc[k * np * r..(k + 1) * np * r];
        par::for_each_chunk(
            next,
            n,
            || (vec![0.0; n], vec![0.0; n * r]),
            |(b, s), i, out| {
                let x = &cur[i * n..(i + 1) * n];
                let u = &ctrl[i * l..(i + 1) * l];
                dynamics.drift(t, x, &mx, &ma, u, b);
                dynamics.diffusion(t, x, &mx, &ma, u, s);
                let w = &dw[i * r..(i + 1) * r];
                for a in 0..n {
                    let noise: f64 = (0..r).map(|j| s[a * r + j] * w[j]).sum();
                    out[a] = x[a] + b[a] * dt + noise;
                }
            },
        );
        if let Some(pos) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: k + 1, particle: pos / n });
        }
    }
    let mut ens = ParticleEnsemble {
        dims: d,
        grid: setup.grid,
        particles: np,
        seed: setup.seed,
        states,
        controls,
        increments: Arc::clone(&noise.increments),
        mean_x: Vec::new(),
        mean_a: Vec::new(),
    };
    ens.refresh_means();
    Ok(ens)
}

/// Euler-Maruyama with same-step empirical means; controls are evaluated
/// before each step.
pub fn simulate_forward(
    dynamics: &dyn MeanFieldDynamics,
    policy: &ControlPolicy,
    setup: &SimulationSetup,
) -> Result<ParticleEnsemble> {
    let noise = BrownianNoise::generate(setup, dynamics.dims())?;
    run(dynamics, policy, setup, &noise, None)
}

/// [`simulate_forward`] with pre-generated noise (reused across fixed-point passes).
pub fn simulate_with_noise(
    dynamics: &dyn MeanFieldDynamics,
    policy: &ControlPolicy,
    setup: &SimulationSetup,
    noise: &BrownianNoise,
) -> Result<ParticleEnsemble> {
    run(dynamics, policy, setup, noise, None)
}

/// Euler-Maruyama with the mean flow frozen to the given paths.
pub fn simulate_frozen(
    dynamics: &dyn MeanFieldDynamics,
    policy: &ControlPolicy,
    setup: &SimulationSetup,
    noise: &BrownianNoise,
    mean_x: &[f64],
    mean_a: &[f64],
) -> Result<ParticleEnsemble> {
    let d = dynamics.dims();
    let steps = setup.grid.steps() + 1;
    check_dim("frozen mean_x", steps * d.state, mean_x.len())?;
    check_dim("frozen mean_a", steps * d.control, mean_a.len())?;
    run(dynamics, policy, setup, noise, Some(FrozenFlow { mean_x, mean_a }))
}

/// Result of [`picard_iterate`].
#[derive(Debug, Clone)]
pub struct PicardOutcome {
    pub ensemble: ParticleEnsemble,
    /// `log[n - 1]` is the max-over-steps RMS distance between iterates `n` and `n - 1`.
    pub log: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Max over steps of the particle RMS distance between two state paths.
pub fn path_distance(a: &ParticleEnsemble, b: &ParticleEnsemble) -> f64 {
    let n = a.dims.state;
    (0..=a.grid.steps())
        .map(|k| {
            let sq: Vec<f64> = a
                .states_at(k)
                .chunks(n)
                .zip(b.states_at(k).chunks(n))
                .map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum())
                .collect();
            pairwise_mean(&sq).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Law-freezing fixed point: iterate `n` is simulated with the mean flow of
/// iterate `n - 1` and the same Brownian increments. Iterate 0 keeps every
/// particle at its initial state.
pub fn picard_iterate(
    dynamics: &dyn MeanFieldDynamics,
    policy: &ControlPolicy,
    setup: &SimulationSetup,
    max_iter: usize,
    tol: f64,
) -> Result<PicardOutcome> {
    let d = validate(dynamics, setup, policy)?;
    let noise = BrownianNoise::generate(setup, d)?;
    let (n, l, np, m) = (d.state, d.control, setup.particles, setup.grid.steps());

    // Iterate 0: constant paths, controls from the policy on those paths.
    let x0 = noise.initial_states.as_ref();
    let mx0 = column_means(x0, n);
    let mut states = Vec::with_capacity((m + 1) * np * n);
    let mut controls = vec![0.0; (m + 1) * np * l];
    for k in 0..=m {
        states.extend_from_slice(x0);
        let ctrl = &mut controls[k * np * l..(k + 1) * np * l];
        match policy {
            ControlPolicy::OpenLoop(v) => ctrl.copy_from_slice(&v[k * np * l..(k + 1) * np * l]),
            ControlPolicy::Feedback(f) => {
                let t = setup.grid.t(k);
                for (i, out) in ctrl.chunks_mut(l).enumerate() {
                    f(k, t, &x0[i * n..(i + 1) * n], &mx0, out);
                }
            }
            ControlPolicy::Indexed(f) => {
                let t = setup.grid.t(k);
                for (i, out) in ctrl.chunks_mut(l).enumerate() {
                    f(k, i, t, &x0[i * n..(i + 1) * n], &mx0, out);
                }
            }
        }
    }
    let mut prev = ParticleEnsemble {
        dims: d,
        grid: setup.grid,
        particles: np,
        seed: setup.seed,
        states,
        controls,
        increments: Arc::clone(&noise.increments),
        mean_x: Vec::new(),
        mean_a: Vec::new(),
    };
    prev.refresh_means();

    let mut log = Vec::new();
    for it in 1..=max_iter {
        let next = run(
            dynamics,
            policy,
            setup,
            &noise,
            Some(FrozenFlow { mean_x: &prev.mean_x, mean_a: &prev.mean_a }),
        )?;
        let dist = path_distance(&next, &prev);
        log.push(dist);
        prev = next;
        if dist < tol {
            return Ok(PicardOutcome { ensemble: prev, log, converged: true, iterations: it });
        }
    }
    Ok(PicardOutcome { ensemble: prev, log, converged: false, iterations: max_iter })
}

/// Exact sample moments at one step (population convention, divisor `N`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Moments {
    pub mean_x: Vec<f64>,
    pub mean_a: Vec<f64>,
    /// Row-major `n x n` covariance.
    pub cov_x: Vec<f64>,
}

pub fn empirical_moments(ens: &ParticleEnsemble, k: usize) -> Result<Moments> {
    if k > ens.grid.steps() {
        return Err(Error::InvalidInput(format!("step {k} beyond grid of {} steps", ens.grid.steps())));
    }
    let n = ens.dims.state;
    let xs = ens.states_at(k);
    let mean_x = column_means(xs, n);
    let mut cov_x = vec![0.0; n * n];
    let mut buf = Vec::with_capacity(ens.particles);
    for a in 0..n {
        for b in a..n {
            buf.clear();
            buf.extend(xs.chunks(n).map(|x| (x[a] - mean_x[a]) * (x[b] - mean_x[b])));
            let c = pairwise_mean(&buf);
            cov_x[a * n + b] = c;
            cov_x[b * n + a] = c;
        }
    }
    Ok(Moments {
        mean_x,
        mean_a: column_means(ens.controls_at(k), ens.dims.control),
        cov_x,
    })
}

/// Monte-Carlo cost with its sampling uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostEstimate {
    pub value: f64,
    pub std_error: f64,
    /// 95% normal-approximation half width.
    pub ci_halfwidth: f64,
}

/// Per-particle cost totals: left-endpoint `sum_k f dt` plus terminal `g`.
pub fn particle_costs<F, G>(ens: &ParticleEnsemble, running: F, terminal: G) -> Vec<f64>
where
    F: Fn(f64, &[f64], &[f64], &[f64], &[f64]) -> f64 + Sync + Send,
    G: Fn(&[f64], &[f64]) -> f64 + Sync + Send,
{
    let m = ens.grid.steps();
    let dt = ens.grid.dt();
    par::map_range(ens.particles, |i| {
        let mut acc = 0.0;
        for k in 0..m {
            acc += dt * running(ens.grid.t(k), ens.state(k, i), ens.mean_x_at(k), ens.mean_a_at(k), ens.control(k, i));
        }
        acc + terminal(ens.state(m, i), ens.mean_x_at(m))
    })
}

/// `E[ sum_k f(t_k, ...) dt + g(X_T, E[X_T]) ]` by particle averaging.
pub fn cost_evaluate<F, G>(ens: &ParticleEnsemble, running: F, terminal: G) -> CostEstimate
where
    F: Fn(f64, &[f64], &[f64], &[f64], &[f64]) -> f64 + Sync + Send,
    G: Fn(&[f64], &[f64]) -> f64 + Sync + Send,
{
    summarize(&particle_costs(ens, running, terminal))
}

pub(crate) fn summarize(samples: &[f64]) -> CostEstimate {
    let mean = pairwise_mean(samples);
    let sq: Vec<f64> = samples.iter().map(|c| (c - mean).powi(2)).collect();
    let n = samples.len() as f64;
    let var = if samples.len() > 1 { pairwise_sum(&sq) / (n - 1.0) } else { 0.0 };
    let se = (var / n).sqrt();
    CostEstimate { value: mean, std_error: se, ci_halfwidth: 1.96 * se }
}

/// Running/terminal cost with the derivatives needed by adjoint pairings.
pub trait CostFunctional: Send + Sync {
    fn running(&self, t: f64, x: &[f64], mean_x: &[f64], mean_a: &[f64], u: &[f64]) -> f64;
    fn terminal(&self, x: &[f64], mean_x: &[f64]) -> f64;
    fn running_gradient(&self, t: f64, x: &[f64], mean_x: &[f64], mean_a: &[f64], u: &[f64]) -> RunningGradient;
    /// `(d/dx g, d/dmean_x g)`.
    fn terminal_gradient(&self, x: &[f64], mean_x: &[f64]) -> (Vec<f64>, Vec<f64>);

    fn evaluate(&self, ens: &ParticleEnsemble) -> CostEstimate {
        cost_evaluate(
            ens,
            |t, x, mx, ma, u| self.running(t, x, mx, ma, u),
            |x, mx| self.terminal(x, mx),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningGradient {
    pub x: Vec<f64>,
    pub mean_x: Vec<f64>,
    pub u: Vec<f64>,
    pub mean_a: Vec<f64>,
}

/// Scalar `f = (q x^2 + v u^2) / 2`, `g = ell (x - c E[X])^2 / 2` with
/// `c = 1` when `centered`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadraticCost {
    pub q: f64,
    pub v: f64,
    pub ell: f64,
    pub centered: bool,
}

impl QuadraticCost {
    fn c(&self) -> f64 {
        if self.centered {
            1.0
        } else {
            0.0
        }
    }
}

impl CostFunctional for QuadraticCost {
    fn running(&self, _t: f64, x: &[f64], _mx: &[f64], _ma: &[f64], u: &[f64]) -> f64 {
        0.5 * (self.q * x[0] * x[0] + self.v * u[0] * u[0])
    }

    fn terminal(&self, x: &[f64], mean_x: &[f64]) -> f64 {
        let e = x[0] - self.c() * mean_x[0];
        0.5 * self.ell * e * e
    }

    fn running_gradient(&self, _t: f64, x: &[f64], _mx: &[f64], _ma: &[f64], u: &[f64]) -> RunningGradient {
        RunningGradient {
            x: vec![self.q * x[0]],
            mean_x: vec![0.0],
            u: vec![self.v * u[0]],
            mean_a: vec![0.0],
        }
    }

    fn terminal_gradient(&self, x: &[f64], mean_x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let e = x[0] - self.c() * mean_x[0];
        (vec![self.ell * e], vec![-self.c() * self.ell * e])
    }
}
