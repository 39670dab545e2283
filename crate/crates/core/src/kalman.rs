//! Linear-Gaussian counterpart: Riccati flow, Hautus detectability and a
//! paired Kalman-filter experiment.
//!
//! ```text
//! dX = A X dt + B dW,    dY = C X dt + dV
//! dP/dt = A P + P Aᵀ + B Bᵀ − P Cᵀ C P
//! dX̂ = A X̂ dt + P Cᵀ (dY − C X̂ dt)
//! ```

use std::path::Path;

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numlin::{eigenvalues, expm, NumError, DEFAULT_HURWITZ_MARGIN, DEFAULT_RANK_TOL};
use crate::rng::{map_paths, PathRng};
use crate::wonham::SimConfig;

pub const SYMMETRY_TOL: f64 = 1e-12;
/// A Riccati iterate with an eigenvalue below `-PSD_LOSS_TOL` aborts the flow.
pub const PSD_LOSS_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum KalmanError {
    #[error("file not found: {0}")]
    NotFound(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema error: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("invalid linear model: {0}")]
    Invalid(String),
    #[error("(A, C) is not detectable: witness eigenvalue {}", fmt_complex(.0))]
    NotDetectable(Complex<f64>),
    #[error("Riccati iterate lost positive semidefiniteness at t = {time} (min eigenvalue {min_eig:e}); reduce dt")]
    PsdLost { time: f64, min_eig: f64 },
    #[error("invalid step configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numerical(#[from] NumError),
}

pub fn fmt_complex(z: &Complex<f64>) -> String {
    if z.im == 0.0 {
        format!("{}", z.re)
    } else if z.im > 0.0 {
        format!("{}+{}i", z.re, z.im)
    } else {
        format!("{}-{}i", z.re, -z.im)
    }
}

/// On-disk form; matrices are row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearModelSpec {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(rename = "P0")]
    pub p0: Vec<Vec<f64>>,
    #[serde(rename = "P0_alt")]
    pub p0_alt: Vec<Vec<f64>>,
    pub x0_mean: Vec<f64>,
    pub x0_mean_alt: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub p0: DMatrix<f64>,
    pub p0_alt: DMatrix<f64>,
    pub x0_mean: DVector<f64>,
    pub x0_mean_alt: DVector<f64>,
}

fn to_matrix(
    name: &str,
    rows: &[Vec<f64>],
    nrows: Option<usize>,
    ncols: Option<usize>,
) -> Result<DMatrix<f64>, KalmanError> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|row| row.len() != c) {
        return Err(KalmanError::Invalid(format!("{name}: ragged rows")));
    }
    if nrows.is_some_and(|n| n != r) || ncols.is_some_and(|n| n != c) {
        return Err(KalmanError::Invalid(format!(
            "{name}: expected {}x{}, got {r}x{c}",
            nrows.map_or("?".into(), |n| n.to_string()),
            ncols.map_or("?".into(), |n| n.to_string()),
        )));
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(KalmanError::Invalid(format!("{name}: non-finite entry")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn check_covariance(name: &str, p: &DMatrix<f64>) -> Result<(), KalmanError> {
    let asym = (p - p.transpose()).amax();
    if asym > SYMMETRY_TOL {
        return Err(KalmanError::Invalid(format!(
            "{name} not symmetric (max asymmetry {asym:e})"
        )));
    }
    let min = min_eigenvalue(p);
    if min <= 0.0 {
        return Err(KalmanError::Invalid(format!(
            "{name} not positive-definite (min eigenvalue {min:e})"
        )));
    }
    Ok(())
}

impl LinearModelSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, KalmanError> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(KalmanError::NotFound(path.display().to_string()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<LinearModel, KalmanError> {
        let a = to_matrix("A", &self.a, None, None)?;
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(KalmanError::Invalid(
                "A must be square and non-empty".into(),
            ));
        }
        let b = to_matrix("B", &self.b, Some(n), None)?;
        let c = to_matrix("C", &self.c, None, Some(n))?;
        let p0 = to_matrix("P0", &self.p0, Some(n), Some(n))?;
        let p0_alt = to_matrix("P0_alt", &self.p0_alt, Some(n), Some(n))?;
        check_covariance("P0", &p0)?;
        check_covariance("P0_alt", &p0_alt)?;
        for (name, v) in [
            ("x0_mean", &self.x0_mean),
            ("x0_mean_alt", &self.x0_mean_alt),
        ] {
            if v.len() != n {
                return Err(KalmanError::Invalid(format!(
                    "{name}: expected length {n}, got {}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(KalmanError::Invalid(format!("{name}: non-finite entry")));
            }
        }
        Ok(LinearModel {
            a,
            b,
            c,
            p0,
            p0_alt,
            x0_mean: DVector::from_column_slice(&self.x0_mean),
            x0_mean_alt: DVector::from_column_slice(&self.x0_mean_alt),
        })
    }
}

impl LinearModel {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn to_spec(&self) -> LinearModelSpec {
        let rows = |m: &DMatrix<f64>| {
            (0..m.nrows())
                .map(|i| m.row(i).iter().cloned().collect())
                .collect()
        };
        LinearModelSpec {
            a: rows(&self.a),
            b: rows(&self.b),
            c: rows(&self.c),
            p0: rows(&self.p0),
            p0_alt: rows(&self.p0_alt),
            x0_mean: self.x0_mean.iter().cloned().collect(),
            x0_mean_alt: self.x0_mean_alt.iter().cloned().collect(),
        }
    }
}

/// `A = 0, B = 0, C = 1`, priors `N(0, 1)` and `N(5, 4)`.
pub fn scalar_preset() -> LinearModel {
    LinearModelSpec {
        a: vec![vec![0.0]],
        b: vec![vec![0.0]],
        c: vec![vec![1.0]],
        p0: vec![vec![1.0]],
        p0_alt: vec![vec![4.0]],
        x0_mean: vec![0.0],
        x0_mean_alt: vec![5.0],
    }
    .validate()
    .expect("scalar preset is valid")
}

/// `A = diag(1, −1)` observed only through the stable coordinate.
pub fn nondetectable_preset() -> LinearModel {
    LinearModelSpec {
        a: vec![vec![1.0, 0.0], vec![0.0, -1.0]],
        b: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        c: vec![vec![0.0, 1.0]],
        p0: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        p0_alt: vec![vec![2.0, 0.0], vec![0.0, 2.0]],
        x0_mean: vec![0.0, 0.0],
        x0_mean_alt: vec![1.0, 1.0],
    }
    .validate()
    .expect("nondetectable preset is valid")
}

pub fn find_linear_preset(name: &str) -> Option<LinearModel> {
    match name.to_ascii_lowercase().as_str() {
        "scalar" => Some(scalar_preset()),
        "nondetectable" => Some(nondetectable_preset()),
        _ => None,
    }
}

pub fn linear_preset_names() -> &'static [&'static str] {
    &["scalar", "nondetectable"]
}

fn min_eigenvalue(p: &DMatrix<f64>) -> f64 {
    let sym = (p + p.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HautusResult {
    pub detectable: bool,
    /// First eigenvalue (largest real part first) where the rank test fails.
    pub witness: Option<Complex<f64>>,
}

/// For each eigenvalue `λ` of `A` with `Re λ ≥ −margin`, checks that the
/// complex stack `[A − λI; C]` has full column rank.
pub fn hautus_detectable(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    margin: f64,
) -> Result<HautusResult, NumError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(NumError::NotSquare {
            rows: n,
            cols: a.ncols(),
        });
    }
    if c.ncols() != n {
        return Err(NumError::DimensionMismatch {
            expected: n,
            got: c.ncols(),
        });
    }
    let mut eig = eigenvalues(a)?;
    eig.sort_by(|x, y| y.re.total_cmp(&x.re).then(y.im.total_cmp(&x.im)));
    let p = c.nrows();
    for lambda in eig.into_iter().filter(|z| z.re >= -margin) {
        let stack = DMatrix::<Complex<f64>>::from_fn(n + p, n, |i, j| {
            if i < n {
                let diag = if i == j {
                    lambda
                } else {
                    Complex::new(0.0, 0.0)
                };
                Complex::new(a[(i, j)], 0.0) - diag
            } else {
                Complex::new(c[(i - n, j)], 0.0)
            }
        });
        let sv = stack.singular_values();
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        let rank = sv
            .iter()
            .filter(|&&s| s > DEFAULT_RANK_TOL * smax.max(1.0))
            .count();
        if rank < n {
            return Ok(HautusResult {
                detectable: false,
                witness: Some(lambda),
            });
        }
    }
    Ok(HautusResult {
        detectable: true,
        witness: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiTrace {
    pub times: Vec<f64>,
    pub p_path: Vec<DMatrix<f64>>,
    pub p_alt_path: Vec<DMatrix<f64>>,
    /// `‖P_t − P'_t‖_F` at each recorded time.
    pub gap: Vec<f64>,
}

fn step_grid(t_max: f64, dt: f64) -> Result<(usize, f64), KalmanError> {
    if !(t_max.is_finite() && t_max > 0.0 && dt.is_finite() && dt > 0.0) {
        return Err(KalmanError::InvalidConfig(
            "t_max and dt must be finite and > 0".into(),
        ));
    }
    if dt > t_max {
        return Err(KalmanError::InvalidConfig(
            "dt must not exceed t_max".into(),
        ));
    }
    let n = ((t_max / dt).round() as usize).max(1);
    Ok((n, t_max / n as f64))
}

struct RiccatiRhs {
    a: DMatrix<f64>,
    bbt: DMatrix<f64>,
    ctc: DMatrix<f64>,
}

impl RiccatiRhs {
    fn new(lm: &LinearModel) -> Self {
        RiccatiRhs {
            a: lm.a.clone(),
            bbt: &lm.b * lm.b.transpose(),
            ctc: lm.c.transpose() * &lm.c,
        }
    }

    fn eval(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let ap = &self.a * p;
        &ap + ap.transpose() + &self.bbt - p * &self.ctc * p
    }

    fn rk4(&self, p: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
        let k1 = self.eval(p);
        let k2 = self.eval(&(p + &k1 * (h / 2.0)));
        let k3 = self.eval(&(p + &k2 * (h / 2.0)));
        let k4 = self.eval(&(p + &k3 * h));
        let next = p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        (&next + next.transpose()) * 0.5
    }
}

fn check_psd(p: &DMatrix<f64>, time: f64) -> Result<(), KalmanError> {
    if p.iter().any(|x| !x.is_finite()) {
        return Err(KalmanError::PsdLost {
            time,
            min_eig: f64::NAN,
        });
    }
    // Cholesky of P + εI succeeds iff min eig(P) > −ε.
    let n = p.nrows();
    let shifted = p + DMatrix::identity(n, n) * PSD_LOSS_TOL;
    if shifted.cholesky().is_none() {
        return Err(KalmanError::PsdLost {
            time,
            min_eig: min_eigenvalue(p),
        });
    }
    Ok(())
}

/// RK4 on both Riccati flows with symmetrization after every step. Every
/// grid point is recorded.
pub fn riccati_flow(lm: &LinearModel, t_max: f64, dt: f64) -> Result<RiccatiTrace, KalmanError> {
    let (n, h) = step_grid(t_max, dt)?;
    let rhs = RiccatiRhs::new(lm);
    let mut times = Vec::with_capacity(n + 1);
    let mut p_path = Vec::with_capacity(n + 1);
    let mut p_alt_path = Vec::with_capacity(n + 1);
    let mut gap = Vec::with_capacity(n + 1);
    let mut p = lm.p0.clone();
    let mut q = lm.p0_alt.clone();
    for k in 0..=n {
        let t = k as f64 * h;
        if k > 0 {
            p = rhs.rk4(&p, h);
            q = rhs.rk4(&q, h);
            check_psd(&p, t)?;
            check_psd(&q, t)?;
        }
        times.push(t);
        gap.push((&p - &q).norm());
        p_path.push(p.clone());
        p_alt_path.push(q.clone());
    }
    Ok(RiccatiTrace {
        times,
        p_path,
        p_alt_path,
        gap,
    })
}

/// Symmetric square root factor `L` with `L Lᵀ = S` (negative eigenvalues
/// from rounding are clipped).
fn sqrt_factor(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((s + s.transpose()) * 0.5);
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| x.max(0.0).sqrt()));
    &eig.eigenvectors * root
}

/// Exact one-step discretization of `dX = AX dt + B dW`:
/// `X_{k+1} = F X_k + w`, `w ~ N(0, Q)`, with `Q` from Van Loan's block
/// exponential.
fn discretize(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    h: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), NumError> {
    let n = a.nrows();
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(&(-a));
    m.view_mut((0, n), (n, n)).copy_from(&(b * b.transpose()));
    m.view_mut((n, n), (n, n)).copy_from(&a.transpose());
    let e = expm(&m, h)?;
    let g12 = e.view((0, n), (n, n)).into_owned();
    let g22 = e.view((n, n), (n, n)).into_owned();
    let f = g22.transpose();
    let q = &f * g12;
    Ok((f, (&q + q.transpose()) * 0.5))
}

fn gaussian(n: usize, rng: &mut PathRng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KalmanPairSummary {
    pub times: Vec<f64>,
    /// Monte-Carlo mean of `‖X̂_t − X̂'_t‖` at `times`.
    pub mean_xdiff: Vec<f64>,
    pub gap: Vec<f64>,
    /// Mean difference at `t_max` is below its value at `t_max / 2`.
    pub tail_decreasing: bool,
}

impl KalmanPairSummary {
    /// Recorded value of `mean_xdiff` nearest to `t`.
    pub fn mean_xdiff_at(&self, t: f64) -> f64 {
        let idx = self
            .times
            .iter()
            .enumerate()
            .min_by(|(_, x), (_, y)| (*x - t).abs().total_cmp(&(*y - t).abs()))
            .map(|(i, _)| i)
            .expect("non-empty summary");
        self.mean_xdiff[idx]
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    /// CSV with header `t,gap,mean_xdiff`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,gap,mean_xdiff\r\n");
        for i in 0..self.times.len() {
            out.push_str(&format!(
                "{},{},{}\r\n",
                self.times[i], self.gap[i], self.mean_xdiff[i]
            ));
        }
        out
    }
}

/// Runs two Kalman filters from the two priors on `cfg.n_paths` simulated
/// paths. The signal starts from `N(x0_mean, P0)`; the signal step is exact,
/// the observation drift uses the trapezoid rule, and the filters use an
/// Euler step with the RK4 covariance path. Results are kept at every
/// `cfg.record_stride`-th grid point and at `t_max`.
pub fn kalman_pair_experiment(
    lm: &LinearModel,
    cfg: &SimConfig,
) -> Result<KalmanPairSummary, KalmanError> {
    let hautus = hautus_detectable(&lm.a, &lm.c, DEFAULT_HURWITZ_MARGIN)?;
    if let Some(w) = hautus.witness {
        return Err(KalmanError::NotDetectable(w));
    }
    if cfg.n_paths == 0 || cfg.record_stride == 0 {
        return Err(KalmanError::InvalidConfig(
            "n_paths and record_stride must be >= 1".into(),
        ));
    }
    let (n_steps, h) = step_grid(cfg.t_max, cfg.dt)?;
    let trace = riccati_flow(lm, cfg.t_max, cfg.dt)?;
    let (f, q) = discretize(&lm.a, &lm.b, h)?;
    let q_root = sqrt_factor(&q);
    let p0_root = sqrt_factor(&lm.p0);
    let n = lm.n();
    let p = lm.c.nrows();
    let recorded: Vec<usize> = (0..=n_steps)
        .filter(|k| k % cfg.record_stride == 0 || *k == n_steps)
        .collect();
    let gains: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..n_steps)
        .map(|k| {
            (
                &trace.p_path[k] * lm.c.transpose(),
                &trace.p_alt_path[k] * lm.c.transpose(),
            )
        })
        .collect();

    let per_path = map_paths(cfg.n_paths, cfg.seed, |_, rng| {
        let mut x = &lm.x0_mean + &p0_root * gaussian(n, rng);
        let mut xh = lm.x0_mean.clone();
        let mut xh_alt = lm.x0_mean_alt.clone();
        let mut diffs = Vec::with_capacity(recorded.len());
        let mut next = 0;
        for (k, (k1, k2)) in gains.iter().enumerate() {
            if recorded[next] == k {
                diffs.push((&xh - &xh_alt).norm());
                next += 1;
            }
            let x_next = &f * &x + &q_root * gaussian(n, rng);
            let dy = &lm.c * (&x + &x_next) * (h / 2.0) + gaussian(p, rng) * h.sqrt();
            let innov = &dy - &lm.c * &xh * h;
            let innov_alt = &dy - &lm.c * &xh_alt * h;
            xh = &xh + &lm.a * &xh * h + k1 * innov;
            xh_alt = &xh_alt + &lm.a * &xh_alt * h + k2 * innov_alt;
            x = x_next;
        }
        // The last grid point is always recorded.
        diffs.push((&xh - &xh_alt).norm());
        diffs
    });

    let mut mean_xdiff = vec![0.0; recorded.len()];
    for diffs in &per_path {
        for (acc, d) in mean_xdiff.iter_mut().zip(diffs) {
            *acc += d;
        }
    }
    for v in &mut mean_xdiff {
        *v /= cfg.n_paths as f64;
    }
    let times: Vec<f64> = recorded.iter().map(|&k| trace.times[k]).collect();
    let gap = recorded.iter().map(|&k| trace.gap[k]).collect();
    let mid = recorded
        .iter()
        .position(|&k| 2 * k >= n_steps)
        .expect("t_max is recorded");
    let tail_decreasing = mean_xdiff[recorded.len() - 1] < mean_xdiff[mid];
    Ok(KalmanPairSummary {
        times,
        mean_xdiff,
        gap,
        tail_decreasing,
    })
}

/// Discretized `c(T) = ∫₀ᵀ e^{−λ(T−t)} f(t) dt` on the grid of `f_samples`
/// (trapezoid rule on each cell). True when the largest `|c|` over the last
/// tenth of the grid is below `1e-3 · (max |c| + 1e-12)`.
pub fn exp_decay_convolution_check(f_samples: &[f64], dt: f64, lambda: f64) -> bool {
    if f_samples.len() < 2 {
        return true;
    }
    let decay = (-lambda * dt).exp();
    let mut conv = Vec::with_capacity(f_samples.len());
    let mut c = 0.0;
    conv.push(c);
    for w in f_samples.windows(2) {
        c = decay * c + 0.5 * dt * (decay * w[0] + w[1]);
        conv.push(c);
    }
    let peak = conv.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tail_start = conv.len() - (conv.len() / 10).max(1);
    let tail = conv[tail_start..]
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()));
    tail < 1e-3 * (peak + 1e-12)
}
