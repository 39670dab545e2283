//! Monte-Carlo engine for paired Wonham filters.
//!
//! One signal path and one observation path drive two filters started from
//! different priors. The filter is advanced by Lie splitting: an exact
//! prediction `π⁺ = e^{Λᵀ dt} π` followed by a pointwise Bayes correction
//! with the per-step likelihood
//!
//! ```text
//! white noise:  w_i = exp((h_i ΔY − ½ h_i² dt) / κ²)
//! counting:     w_i = h_i^{ΔN} exp(−h_i dt)
//! ```
//!
//! Both halves map the simplex into itself, so the recursion never needs
//! clipping. Weights are handled in the log domain with the largest exponent
//! among supported states subtracted before exponentiation.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::model::{check_probability, FiniteHmm, InitialPair, ObsKind};
use crate::numlin::{expm, NumError};
use crate::rng::{map_paths, PathRng};

/// Upper bound on `t_max / dt`.
pub const MAX_STEPS: f64 = 1e8;
pub const DEFAULT_CHECKPOINTS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WonhamError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("white-noise filtering needs kappa > 0")]
    KappaZero,
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("all correction weights vanish on the support of the predicted law at t = {time}")]
    DegenerateWeight { time: f64 },
    #[error(transparent)]
    Numerical(#[from] NumError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub t_max: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Keep every `record_stride`-th grid point in recorded trajectories.
    pub record_stride: usize,
    /// Number of leading paths whose full trajectories are kept.
    pub record_paths: usize,
}

impl SimConfig {
    pub fn new(t_max: f64, dt: f64, n_paths: usize, seed: u64) -> Self {
        SimConfig {
            t_max,
            dt,
            n_paths,
            seed,
            record_stride: 1,
            record_paths: 0,
        }
    }

    pub fn validate(&self) -> Result<(), WonhamError> {
        let bad = |s: &str| Err(WonhamError::InvalidConfig(s.to_string()));
        if !(self.t_max.is_finite() && self.t_max > 0.0) {
            return bad("t_max must be finite and > 0");
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad("dt must be finite and > 0");
        }
        if self.dt > self.t_max {
            return bad("dt must not exceed t_max");
        }
        if self.t_max / self.dt > MAX_STEPS {
            return bad("t_max/dt exceeds 1e8 steps");
        }
        if self.n_paths == 0 {
            return bad("n_paths must be >= 1");
        }
        if self.record_stride == 0 {
            return bad("record_stride must be >= 1");
        }
        Ok(())
    }

    /// Number of grid steps; the effective step is `t_max / n_steps`.
    pub fn n_steps(&self) -> usize {
        ((self.t_max / self.dt).round() as usize).max(1)
    }

    pub fn effective_dt(&self) -> f64 {
        self.t_max / self.n_steps() as f64
    }
}

/// `1e-3 · min(1, 1/max|Λ_ii|, κ²/max h²)`, floored at `1e-6`.
pub fn default_dt(m: &FiniteHmm) -> f64 {
    let max_rate = (0..m.d())
        .map(|i| m.generator()[(i, i)].abs())
        .fold(0.0, f64::max);
    let mut scale = 1.0f64;
    if max_rate > 0.0 {
        scale = scale.min(1.0 / max_rate);
    }
    if m.obs_kind() == ObsKind::WhiteNoise {
        let max_h2 = m.h().iter().map(|x| x * x).fold(0.0, f64::max);
        if max_h2 > 0.0 && m.kappa() > 0.0 {
            scale = scale.min(m.kappa() * m.kappa() / max_h2);
        }
    }
    (1e-3 * scale).max(1e-6)
}

/// Piecewise-constant signal path: `(jump time, new state)` pairs, starting
/// with `(0, x0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpPath {
    pub segments: Vec<(f64, usize)>,
    pub horizon: f64,
}

impl JumpPath {
    pub fn state_at(&self, t: f64) -> usize {
        let idx = self.segments.partition_point(|&(s, _)| s <= t);
        self.segments[idx.saturating_sub(1)].1
    }

    pub fn num_jumps(&self) -> usize {
        self.segments.len() - 1
    }
}

/// Gillespie simulation: exponential holding times with rate `−Λ_ii`, jump
/// law `Λ_ij / (−Λ_ii)`. Absorbing states never leave.
pub fn simulate_signal(m: &FiniteHmm, x0: usize, horizon: f64, rng: &mut PathRng) -> JumpPath {
    let g = m.generator();
    let d = m.d();
    let mut segments = vec![(0.0, x0)];
    let mut t = 0.0;
    let mut x = x0;
    loop {
        let rate = -g[(x, x)];
        if rate <= 0.0 {
            break;
        }
        let hold: f64 = Exp1.sample(rng);
        t += hold / rate;
        if t >= horizon {
            break;
        }
        let u: f64 = rng.random::<f64>() * rate;
        let mut acc = 0.0;
        let mut next = x;
        for j in 0..d {
            if j == x {
                continue;
            }
            acc += g[(x, j)];
            next = j;
            if u < acc {
                break;
            }
        }
        // `next` ends on the last positive-rate target when rounding leaves
        // `u` just above the cumulative sum.
        while g[(x, next)] <= 0.0 {
            next = (0..d).rev().find(|&j| j != x && g[(x, j)] > 0.0).unwrap();
        }
        x = next;
        segments.push((t, x));
    }
    JumpPath { segments, horizon }
}

/// Walks a jump path forward and integrates `h(X_s)` over consecutive
/// windows.
struct PathIntegrator<'a> {
    path: &'a JumpPath,
    h: &'a [f64],
    seg: usize,
}

impl<'a> PathIntegrator<'a> {
    fn new(path: &'a JumpPath, h: &'a [f64]) -> Self {
        PathIntegrator { path, h, seg: 0 }
    }

    /// `∫_a^b h(X_s) ds`; windows must be visited in increasing order.
    fn integrate(&mut self, a: f64, b: f64) -> f64 {
        let segs = &self.path.segments;
        while self.seg + 1 < segs.len() && segs[self.seg + 1].0 <= a {
            self.seg += 1;
        }
        let mut total = 0.0;
        let mut k = self.seg;
        let mut lo = a;
        loop {
            let end = if k + 1 < segs.len() {
                segs[k + 1].0.min(b)
            } else {
                b
            };
            total += self.h[segs[k].1] * (end - lo);
            if end >= b || k + 1 >= segs.len() {
                break;
            }
            lo = end;
            k += 1;
        }
        total
    }

    fn state_at_end(&self, b: f64) -> usize {
        let segs = &self.path.segments;
        let mut k = self.seg;
        while k + 1 < segs.len() && segs[k + 1].0 <= b {
            k += 1;
        }
        segs[k].1
    }
}

fn draw_increment(m: &FiniteHmm, drift: f64, dt: f64, rng: &mut PathRng) -> f64 {
    match m.obs_kind() {
        ObsKind::WhiteNoise => {
            let xi: f64 = StandardNormal.sample(rng);
            drift + m.kappa() * dt.sqrt() * xi
        }
        ObsKind::Counting => {
            if drift > 0.0 {
                Poisson::new(drift)
                    .expect("positive finite mean")
                    .sample(rng)
            } else {
                0.0
            }
        }
    }
}

/// Observation increments over the grid `times` (`times[0] = 0`, increasing).
/// White noise: `∫h(X_s)ds + κ√dt ξ`; counting: Poisson with mean `∫h(X_s)ds`.
pub fn simulate_observations(
    m: &FiniteHmm,
    path: &JumpPath,
    times: &[f64],
    rng: &mut PathRng,
) -> Vec<f64> {
    let mut integ = PathIntegrator::new(path, m.h());
    times
        .windows(2)
        .map(|w| {
            let drift = integ.integrate(w[0], w[1]);
            draw_increment(m, drift, w[1] - w[0], rng)
        })
        .collect()
}

/// Precomputed one-step filter for a fixed `dt`.
#[derive(Debug, Clone)]
pub struct FilterStepper {
    d: usize,
    /// `e^{Λᵀ dt}`, row-major.
    transition: Vec<f64>,
    h: Vec<f64>,
    kappa: f64,
    kind: ObsKind,
    dt: f64,
}

impl FilterStepper {
    pub fn new(m: &FiniteHmm, dt: f64) -> Result<Self, WonhamError> {
        if m.obs_kind() == ObsKind::WhiteNoise && m.kappa() <= 0.0 {
            return Err(WonhamError::KappaZero);
        }
        let t: DMatrix<f64> = expm(&m.generator().transpose(), dt)?;
        let d = m.d();
        let transition = (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| t[(i, j)])
            .collect();
        Ok(FilterStepper {
            d,
            transition,
            h: m.h().to_vec(),
            kappa: m.kappa(),
            kind: m.obs_kind(),
            dt,
        })
    }

    fn log_weight(&self, i: usize, dy: f64) -> f64 {
        let h = self.h[i];
        match self.kind {
            ObsKind::WhiteNoise => (h * dy - 0.5 * h * h * self.dt) / (self.kappa * self.kappa),
            ObsKind::Counting => {
                if h > 0.0 {
                    dy * h.ln() - h * self.dt
                } else if dy == 0.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// One prediction/correction step in place. `scratch` must have length `d`.
    pub fn step(&self, pi: &mut [f64], dy: f64, scratch: &mut [f64]) -> Result<(), WonhamError> {
        let d = self.d;
        for (i, out) in scratch.iter_mut().enumerate() {
            let row = &self.transition[i * d..(i + 1) * d];
            let v: f64 = row.iter().zip(pi.iter()).map(|(a, b)| a * b).sum();
            *out = v.max(0.0);
        }
        let mut max_lw = f64::NEG_INFINITY;
        for (i, &p) in scratch.iter().enumerate() {
            if p > 0.0 {
                max_lw = max_lw.max(self.log_weight(i, dy));
            }
        }
        if !max_lw.is_finite() {
            return Err(WonhamError::DegenerateWeight { time: f64::NAN });
        }
        let mut total = 0.0;
        for (i, p) in scratch.iter_mut().enumerate() {
            if *p > 0.0 {
                *p *= (self.log_weight(i, dy) - max_lw).exp();
                total += *p;
            }
        }
        for (dst, &src) in pi.iter_mut().zip(scratch.iter()) {
            *dst = src / total;
        }
        Ok(())
    }
}

/// A single filter step from scratch (computes `e^{Λᵀ dt}` on every call).
pub fn filter_step(m: &FiniteHmm, pi: &[f64], dy: f64, dt: f64) -> Result<Vec<f64>, WonhamError> {
    check_probability("pi", pi, m.d()).map_err(|e| WonhamError::InvalidPrior(e.to_string()))?;
    let stepper = FilterStepper::new(m, dt)?;
    let mut out = pi.to_vec();
    let mut scratch = vec![0.0; m.d()];
    stepper.step(&mut out, dy, &mut scratch)?;
    Ok(out)
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterPairTrajectory {
    pub times: Vec<f64>,
    pub signal_states: Vec<usize>,
    /// `Y` increment since the previous recorded time (0 at `t = 0`).
    pub obs_increments: Vec<f64>,
    pub pi_mu: Vec<Vec<f64>>,
    pub pi_nu: Vec<Vec<f64>>,
    pub tv: Vec<f64>,
}

impl FilterPairTrajectory {
    fn with_capacity(n: usize) -> Self {
        FilterPairTrajectory {
            times: Vec::with_capacity(n),
            signal_states: Vec::with_capacity(n),
            obs_increments: Vec::with_capacity(n),
            pi_mu: Vec::with_capacity(n),
            pi_nu: Vec::with_capacity(n),
            tv: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, t: f64, x: usize, dy: f64, mu: &[f64], nu: &[f64]) {
        self.times.push(t);
        self.signal_states.push(x);
        self.obs_increments.push(dy);
        self.pi_mu.push(mu.to_vec());
        self.pi_nu.push(nu.to_vec());
        self.tv.push(total_variation(mu, nu));
    }

    /// CSV with header `t,x,dY,pi_mu_1..pi_mu_d,pi_nu_1..pi_nu_d,tv`.
    /// States are written 1-based.
    pub fn to_csv(&self) -> String {
        let d = self.pi_mu.first().map_or(0, |p| p.len());
        let mut out = String::from("t,x,dY");
        for k in 1..=d {
            out.push_str(&format!(",pi_mu_{k}"));
        }
        for k in 1..=d {
            out.push_str(&format!(",pi_nu_{k}"));
        }
        out.push_str(",tv\r\n");
        for r in 0..self.times.len() {
            out.push_str(&format!(
                "{},{},{}",
                self.times[r],
                self.signal_states[r] + 1,
                self.obs_increments[r]
            ));
            for v in self.pi_mu[r].iter().chain(&self.pi_nu[r]) {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\r\n", self.tv[r]));
        }
        out
    }
}

/// Per-path result of [`run_pair`].
#[derive(Debug, Clone, PartialEq)]
pub struct PathOutcome {
    pub checkpoint_tv: Vec<f64>,
    pub terminal_pi_mu: Vec<f64>,
    pub terminal_pi_nu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairSummary {
    pub checkpoints: Vec<f64>,
    pub mean_tv: Vec<f64>,
    pub median_tv: Vec<f64>,
    pub q90_tv: Vec<f64>,
    /// Terminal total variation of every path, in path order.
    pub terminal_tv: Vec<f64>,
}

impl PairSummary {
    pub fn mean_terminal_tv(&self) -> f64 {
        *self.mean_tv.last().expect("at least one checkpoint")
    }

    pub fn median_terminal_tv(&self) -> f64 {
        *self.median_tv.last().expect("at least one checkpoint")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRun {
    pub outcomes: Vec<PathOutcome>,
    /// Full trajectories of the first `record_paths` paths.
    pub trajectories: Vec<FilterPairTrajectory>,
    pub summary: PairSummary,
}

/// Grid indices of `count` log-spaced times in `[t_max/100, t_max]`,
/// deduplicated, always ending at `n_steps`.
pub fn checkpoint_steps(n_steps: usize, count: usize) -> Vec<usize> {
    let mut steps: Vec<usize> = (0..count)
        .map(|j| {
            let frac = if count > 1 {
                j as f64 / (count - 1) as f64
            } else {
                1.0
            };
            let t_rel = 10f64.powf(-2.0 * (1.0 - frac));
            ((t_rel * n_steps as f64).round() as usize).clamp(1, n_steps)
        })
        .collect();
    steps.dedup();
    if steps.last() != Some(&n_steps) {
        steps.push(n_steps);
    }
    steps
}

/// Type-7 (linear interpolation) sample quantile.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sample_index(p: &[f64], rng: &mut PathRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.iter()
        .rposition(|&w| w > 0.0)
        .expect("probability vector has mass")
}

struct PathResult {
    outcome: PathOutcome,
    trajectory: Option<FilterPairTrajectory>,
}

fn run_one_path(
    m: &FiniteHmm,
    init: &InitialPair,
    cfg: &SimConfig,
    stepper: &FilterStepper,
    checkpoints: &[usize],
    record: bool,
    rng: &mut PathRng,
) -> Result<PathResult, WonhamError> {
    let n = cfg.n_steps();
    let dt = cfg.effective_dt();
    let d = m.d();
    let x0 = sample_index(&init.mu, rng);
    let path = simulate_signal(m, x0, cfg.t_max, rng);
    let mut integ = PathIntegrator::new(&path, m.h());

    let mut mu = init.mu.clone();
    let mut nu = init.nu.clone();
    let mut scratch = vec![0.0; d];
    let mut checkpoint_tv = Vec::with_capacity(checkpoints.len());
    let mut next_cp = 0;
    let mut traj = record.then(|| FilterPairTrajectory::with_capacity(n / cfg.record_stride + 2));
    if let Some(tr) = traj.as_mut() {
        tr.push(0.0, x0, 0.0, &mu, &nu);
    }
    let mut dy_since_record = 0.0;
    for k in 1..=n {
        let (a, b) = ((k - 1) as f64 * dt, k as f64 * dt);
        let drift = integ.integrate(a, b);
        let dy = draw_increment(m, drift, dt, rng);
        stepper
            .step(&mut mu, dy, &mut scratch)
            .and_then(|_| stepper.step(&mut nu, dy, &mut scratch))
            .map_err(|e| match e {
                WonhamError::DegenerateWeight { .. } => WonhamError::DegenerateWeight { time: b },
                other => other,
            })?;
        dy_since_record += dy;
        if next_cp < checkpoints.len() && checkpoints[next_cp] == k {
            checkpoint_tv.push(total_variation(&mu, &nu));
            next_cp += 1;
        }
        if let Some(tr) = traj.as_mut() {
            if k % cfg.record_stride == 0 || k == n {
                tr.push(b, integ.state_at_end(b), dy_since_record, &mu, &nu);
                dy_since_record = 0.0;
            }
        }
    }
    Ok(PathResult {
        outcome: PathOutcome {
            checkpoint_tv,
            terminal_pi_mu: mu,
            terminal_pi_nu: nu,
        },
        trajectory: traj,
    })
}

/// Runs `cfg.n_paths` independent paths. The signal starts from `μ`; both
/// filters see the same observation increments.
pub fn run_pair(
    m: &FiniteHmm,
    init: &InitialPair,
    cfg: &SimConfig,
) -> Result<PairRun, WonhamError> {
    cfg.validate()?;
    let d = m.d();
    check_probability("mu", &init.mu, d).map_err(|e| WonhamError::InvalidPrior(e.to_string()))?;
    check_probability("nu", &init.nu, d).map_err(|e| WonhamError::InvalidPrior(e.to_string()))?;
    let n = cfg.n_steps();
    let dt = cfg.effective_dt();
    let stepper = FilterStepper::new(m, dt)?;
    let cps = checkpoint_steps(n, DEFAULT_CHECKPOINTS);

    let results = map_paths(cfg.n_paths, cfg.seed, |i, rng| {
        run_one_path(m, init, cfg, &stepper, &cps, i < cfg.record_paths, rng)
    });
    let mut outcomes = Vec::with_capacity(cfg.n_paths);
    let mut trajectories = Vec::new();
    for r in results {
        let r = r?;
        outcomes.push(r.outcome);
        trajectories.extend(r.trajectory);
    }
    let summary = summarize(&outcomes, &cps, dt);
    Ok(PairRun {
        outcomes,
        trajectories,
        summary,
    })
}

fn summarize(outcomes: &[PathOutcome], cps: &[usize], dt: f64) -> PairSummary {
    let n_paths = outcomes.len() as f64;
    let mut mean_tv = Vec::with_capacity(cps.len());
    let mut median_tv = Vec::with_capacity(cps.len());
    let mut q90_tv = Vec::with_capacity(cps.len());
    for j in 0..cps.len() {
        let mut column: Vec<f64> = outcomes.iter().map(|o| o.checkpoint_tv[j]).collect();
        mean_tv.push(column.iter().sum::<f64>() / n_paths);
        column.sort_by(f64::total_cmp);
        median_tv.push(quantile(&column, 0.5));
        q90_tv.push(quantile(&column, 0.9));
    }
    PairSummary {
        checkpoints: cps.iter().map(|&k| k as f64 * dt).collect(),
        mean_tv,
        median_tv,
        q90_tv,
        terminal_tv: outcomes
            .iter()
            .map(|o| *o.checkpoint_tv.last().unwrap())
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub kappa: f64,
    pub mean_terminal_tv: f64,
    #[serde(skip)]
    pub summary: PairSummary,
}

/// [`run_pair`] at each noise level with the same seed, so every κ sees the
/// same signal paths and the same normal draws.
pub fn kappa_sweep(
    m: &FiniteHmm,
    init: &InitialPair,
    kappas: &[f64],
    cfg: &SimConfig,
) -> Result<Vec<SweepRow>, WonhamError> {
    kappas
        .iter()
        .map(|&kappa| {
            if !(kappa.is_finite() && kappa > 0.0) {
                return Err(WonhamError::KappaZero);
            }
            let mk = m
                .with_kappa(kappa)
                .map_err(|e| WonhamError::InvalidConfig(e.to_string()))?;
            let run = run_pair(
                &mk,
                init,
                &SimConfig {
                    record_paths: 0,
                    ..cfg.clone()
                },
            )?;
            Ok(SweepRow {
                kappa,
                mean_terminal_tv: run.summary.mean_terminal_tv(),
                summary: run.summary,
            })
        })
        .collect()
}
