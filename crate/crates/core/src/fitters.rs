//! Weighted nonlinear least squares (damped Gauss-Newton with adaptive
//! damping) and the small model library used by the analysis modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative objective change below which a fit is considered converged.
pub const DEFAULT_REL_TOL: f64 = 1e-10;
/// Iteration cap for the damped Gauss-Newton loop.
pub const DEFAULT_MAX_ITER: usize = 200;

/// A model y = f(x; p) with its parameter gradient.
pub trait Model {
    fn n_params(&self) -> usize;
    fn eval(&self, x: f64, p: &[f64]) -> f64;

    /// ∂f/∂p at x. Defaults to central differences.
    fn gradient(&self, x: f64, p: &[f64], grad: &mut [f64]) {
        let mut q = p.to_vec();
        for j in 0..p.len() {
            let h = 1e-6 * p[j].abs().max(1e-6);
            q[j] = p[j] + h;
            let up = self.eval(x, &q);
            q[j] = p[j] - h;
            let down = self.eval(x, &q);
            q[j] = p[j];
            grad[j] = (up - down) / (2.0 * h);
        }
    }
}

/// Built-in models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    /// `[slope, intercept]`
    Line,
    /// Ascending coefficients `[c0, c1, …, c_degree]`.
    Polynomial { degree: usize },
    /// y = a·x^k, `[a]`.
    Monomial { power: i32 },
    /// `[amplitude, center, sigma]`
    Gaussian,
    /// `[amplitude, center, sigma, background]`
    GaussianBackground,
    /// y = offset + amplitude·cos(ω·x + phase), `[offset, amplitude, omega, phase]`.
    Sinusoid,
    /// y = A·(1 + V·cos(harmonic·x + phase)), `[A, V, phase]`.
    Fringe { harmonic: f64 },
    /// y = amplitude·sech²((x − center)/tau), `[amplitude, center, tau]`.
    SechSquared,
}

impl Model for ModelKind {
    fn n_params(&self) -> usize {
        match self {
            ModelKind::Line => 2,
            ModelKind::Polynomial { degree } => degree + 1,
            ModelKind::Monomial { .. } => 1,
            ModelKind::Gaussian => 3,
            ModelKind::GaussianBackground => 4,
            ModelKind::Sinusoid => 4,
            ModelKind::Fringe { .. } => 3,
            ModelKind::SechSquared => 3,
        }
    }

    fn eval(&self, x: f64, p: &[f64]) -> f64 {
        match *self {
            ModelKind::Line => p[0] * x + p[1],
            ModelKind::Polynomial { .. } => p.iter().rev().fold(0.0, |acc, c| acc * x + c),
            ModelKind::Monomial { power } => p[0] * x.powi(power),
            ModelKind::Gaussian => {
                let z = (x - p[1]) / p[2];
                p[0] * (-0.5 * z * z).exp()
            }
            ModelKind::GaussianBackground => {
                let z = (x - p[1]) / p[2];
                p[0] * (-0.5 * z * z).exp() + p[3]
            }
            ModelKind::Sinusoid => p[0] + p[1] * (p[2] * x + p[3]).cos(),
            ModelKind::Fringe { harmonic } => p[0] * (1.0 + p[1] * (harmonic * x + p[2]).cos()),
            ModelKind::SechSquared => {
                let s = 1.0 / ((x - p[1]) / p[2]).cosh();
                p[0] * s * s
            }
        }
    }

    fn gradient(&self, x: f64, p: &[f64], g: &mut [f64]) {
        match *self {
            ModelKind::Line => {
                g[0] = x;
                g[1] = 1.0;
            }
            ModelKind::Polynomial { degree } => {
                let mut xp = 1.0;
                for gj in g.iter_mut().take(degree + 1) {
                    *gj = xp;
                    xp *= x;
                }
            }
            ModelKind::Monomial { power } => g[0] = x.powi(power),
            ModelKind::Gaussian | ModelKind::GaussianBackground => {
                let z = (x - p[1]) / p[2];
                let e = (-0.5 * z * z).exp();
                g[0] = e;
                g[1] = p[0] * e * z / p[2];
                g[2] = p[0] * e * z * z / p[2];
                if g.len() > 3 {
                    g[3] = 1.0;
                }
            }
            ModelKind::Sinusoid => {
                let arg = p[2] * x + p[3];
                let (s, c) = arg.sin_cos();
                g[0] = 1.0;
                g[1] = c;
                g[2] = -p[1] * s * x;
                g[3] = -p[1] * s;
            }
            ModelKind::Fringe { harmonic } => {
                let arg = harmonic * x + p[2];
                let (s, c) = arg.sin_cos();
                g[0] = 1.0 + p[1] * c;
                g[1] = p[0] * c;
                g[2] = -p[0] * p[1] * s;
            }
            ModelKind::SechSquared => {
                let z = (x - p[1]) / p[2];
                let s = 1.0 / z.cosh();
                let s2 = s * s;
                let t = z.tanh();
                g[0] = s2;
                g[1] = 2.0 * p[0] * s2 * t / p[2];
                g[2] = 2.0 * p[0] * s2 * t * z / p[2];
            }
        }
    }
}

/// Per-point weighting of residuals.
#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    Uniform,
    /// 1/√max(y, 1), for count data.
    Poisson,
    /// Explicit one-sigma uncertainties; residuals are divided by them.
    Sigma(Vec<f64>),
}

impl Weights {
    fn resolve(&self, y: &[f64]) -> Result<Vec<f64>> {
        match self {
            Weights::Uniform => Ok(vec![1.0; y.len()]),
            Weights::Poisson => Ok(y.iter().map(|v| 1.0 / v.max(1.0).sqrt()).collect()),
            Weights::Sigma(s) => {
                if s.len() != y.len() {
                    return Err(Error::InvalidArgument("sigma length differs from data length".into()));
                }
                if s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                    return Err(Error::InvalidArgument("sigmas must be positive and finite".into()));
                }
                Ok(s.iter().map(|v| 1.0 / v).collect())
            }
        }
    }
}

/// How parameter uncertainties are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorScaling {
    /// Weights are true inverse sigmas; use the curvature as is.
    Absolute,
    /// Multiply the covariance by χ²/(n − p), for data without known errors.
    ReducedChiSquare,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub error_scaling: ErrorScaling,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: DEFAULT_MAX_ITER,
            rel_tol: DEFAULT_REL_TOL,
            error_scaling: ErrorScaling::Absolute,
        }
    }
}

impl FitOptions {
    pub fn scaled() -> Self {
        Self {
            error_scaling: ErrorScaling::ReducedChiSquare,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: Vec<f64>,
    pub param_errs: Vec<f64>,
    /// Parameter covariance, row-major `n_params × n_params`.
    pub covariance: Vec<f64>,
    /// RMS of the unweighted residuals.
    pub residual_rms: f64,
    /// Σ (w·r)².
    pub chi2: f64,
    pub dof: usize,
    pub converged: bool,
    pub iterations: usize,
    pub message: Option<String>,
}

impl FitResult {
    pub fn cov(&self, i: usize, j: usize) -> f64 {
        self.covariance[i * self.params.len() + j]
    }
}

fn check_lengths(x: &[f64], y: &[f64], n_params: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "x has {} points but y has {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < n_params + 1 {
        return Err(Error::InsufficientData(format!(
            "{} points cannot constrain {} parameters",
            x.len(),
            n_params
        )));
    }
    Ok(())
}

struct Problem<'a> {
    model: &'a dyn Model,
    x: &'a [f64],
    y: &'a [f64],
    w: Vec<f64>,
}

impl Problem<'_> {
    fn residuals(&self, p: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.x.len(),
            self.x
                .iter()
                .zip(self.y)
                .zip(&self.w)
                .map(|((x, y), w)| w * (y - self.model.eval(*x, p))),
        )
    }

    /// Jacobian of the weighted model values (not of the residuals).
    fn jacobian(&self, p: &[f64]) -> DMatrix<f64> {
        let n = self.x.len();
        let m = p.len();
        let mut j = DMatrix::zeros(n, m);
        let mut g = vec![0.0; m];
        for (i, (x, w)) in self.x.iter().zip(&self.w).enumerate() {
            self.model.gradient(*x, p, &mut g);
            for k in 0..m {
                j[(i, k)] = w * g[k];
            }
        }
        j
    }
}

/// Weighted nonlinear least squares starting from `initial`.
///
/// Singular normal equations or a non-finite objective never produce a
/// silent NaN: the result comes back with `converged = false` and a
/// diagnostic message.
pub fn least_squares(
    model: &dyn Model,
    x: &[f64],
    y: &[f64],
    weights: &Weights,
    initial: &[f64],
    opts: &FitOptions,
) -> Result<FitResult> {
    let m = model.n_params();
    if initial.len() != m {
        return Err(Error::InvalidArgument(format!(
            "model takes {m} parameters, {} given",
            initial.len()
        )));
    }
    check_lengths(x, y, m)?;
    let prob = Problem {
        model,
        x,
        y,
        w: weights.resolve(y)?,
    };

    let mut p = initial.to_vec();
    let mut r = prob.residuals(&p);
    let mut cost = r.norm_squared();
    if !cost.is_finite() {
        return Ok(failed(p, x.len(), 0, "objective is not finite at the initial point"));
    }

    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    let mut message = None;

    while iterations < opts.max_iter {
        iterations += 1;
        if cost == 0.0 {
            converged = true;
            break;
        }
        let j = prob.jacobian(&p);
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * &r;

        let mut accepted = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for k in 0..m {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let r_trial = prob.residuals(&trial);
            let cost_trial = r_trial.norm_squared();
            if cost_trial.is_finite() && cost_trial <= cost {
                let rel = (cost - cost_trial) / cost;
                p = trial;
                r = r_trial;
                cost = cost_trial;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel < opts.rel_tol {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No downhill step at any damping: we sit at a minimum.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    if !converged {
        message = Some(format!("iteration limit {} reached", opts.max_iter));
    }

    finish(&prob, p, cost, converged, iterations, message, opts.error_scaling)
}

fn failed(params: Vec<f64>, n: usize, iterations: usize, why: &str) -> FitResult {
    let m = params.len();
    FitResult {
        param_errs: vec![f64::INFINITY; m],
        covariance: vec![f64::INFINITY; m * m],
        params,
        residual_rms: f64::INFINITY,
        chi2: f64::INFINITY,
        dof: n.saturating_sub(m),
        converged: false,
        iterations,
        message: Some(why.to_string()),
    }
}

fn finish(
    prob: &Problem<'_>,
    p: Vec<f64>,
    chi2: f64,
    converged: bool,
    iterations: usize,
    message: Option<String>,
    scaling: ErrorScaling,
) -> Result<FitResult> {
    let n = prob.x.len();
    let m = p.len();
    let dof = n - m;
    let j = prob.jacobian(&p);
    let jtj = j.transpose() * &j;
    let Some(inv) = invert_spd(&jtj) else {
        let mut out = failed(p, n, iterations, "singular normal equations at the solution");
        out.chi2 = chi2;
        out.residual_rms = unweighted_rms(prob.model, prob.x, prob.y, &out.params);
        return Ok(out);
    };
    let factor = match scaling {
        ErrorScaling::Absolute => 1.0,
        ErrorScaling::ReducedChiSquare => chi2 / dof as f64,
    };
    let cov: Vec<f64> = inv.iter().map(|v| v * factor).collect();
    // nalgebra is column-major; the inverse of a symmetric matrix is symmetric.
    let errs: Vec<f64> = (0..m).map(|k| (inv[(k, k)] * factor).max(0.0).sqrt()).collect();
    let rms = unweighted_rms(prob.model, prob.x, prob.y, &p);
    let converged = converged && rms.is_finite() && p.iter().all(|v| v.is_finite());
    Ok(FitResult {
        params: p,
        param_errs: errs,
        covariance: cov,
        residual_rms: rms,
        chi2,
        dof,
        converged,
        iterations,
        message,
    })
}

fn unweighted_rms(model: &dyn Model, x: &[f64], y: &[f64], p: &[f64]) -> f64 {
    let ss: f64 = x.iter().zip(y).map(|(x, y)| (y - model.eval(*x, p)).powi(2)).sum();
    (ss / x.len() as f64).sqrt()
}

fn invert_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = a
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| a.clone().try_inverse())?;
    if inv.iter().all(|v| v.is_finite()) {
        Some(inv)
    } else {
        None
    }
}

/// Closed-form weighted linear least squares y ≈ Σ_k p_k·basis_k(x).
///
/// `columns[k][i]` is basis function `k` evaluated at point `i`.
pub fn linear_least_squares(
    columns: &[Vec<f64>],
    y: &[f64],
    weights: &Weights,
    scaling: ErrorScaling,
) -> Result<FitResult> {
    let m = columns.len();
    let n = y.len();
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidArgument("basis columns differ in length from y".into()));
    }
    if n < m + 1 {
        return Err(Error::InsufficientData(format!(
            "{n} points cannot constrain {m} parameters"
        )));
    }
    let w = weights.resolve(y)?;
    let a = DMatrix::from_fn(n, m, |i, k| w[i] * columns[k][i]);
    let b = DVector::from_iterator(n, y.iter().zip(&w).map(|(y, w)| w * y));
    let ata = a.transpose() * &a;
    let atb = a.transpose() * &b;
    let Some(inv) = invert_spd(&ata) else {
        return Ok(failed(vec![0.0; m], n, 1, "singular normal equations"));
    };
    let p = &inv * atb;
    let resid = &b - &a * &p;
    let chi2 = resid.norm_squared();
    let dof = n - m;
    let factor = match scaling {
        ErrorScaling::Absolute => 1.0,
        ErrorScaling::ReducedChiSquare => chi2 / dof as f64,
    };
    let raw_rms = {
        let ss: f64 = (0..n)
            .map(|i| {
                let f: f64 = (0..m).map(|k| p[k] * columns[k][i]).sum();
                (y[i] - f).powi(2)
            })
            .sum();
        (ss / n as f64).sqrt()
    };
    Ok(FitResult {
        params: p.iter().copied().collect(),
        param_errs: (0..m).map(|k| (inv[(k, k)] * factor).max(0.0).sqrt()).collect(),
        covariance: inv.iter().map(|v| v * factor).collect(),
        residual_rms: raw_rms,
        chi2,
        dof,
        converged: raw_rms.is_finite(),
        iterations: 1,
        message: None,
    })
}

fn unavailable<T>(why: &str) -> Result<T> {
    Err(Error::InsufficientData(format!("guess unavailable: {why}")))
}

/// Deterministic starting values for a built-in model.
pub fn initial_guess(kind: ModelKind, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check_lengths(x, y, kind.n_params())?;
    match kind {
        ModelKind::Line | ModelKind::Polynomial { .. } => {
            let degree = match kind {
                ModelKind::Line => 1,
                ModelKind::Polynomial { degree } => degree,
                _ => unreachable!(),
            };
            let cols: Vec<Vec<f64>> = (0..=degree)
                .map(|k| x.iter().map(|v| v.powi(k as i32)).collect())
                .collect();
            let fit = linear_least_squares(&cols, y, &Weights::Uniform, ErrorScaling::Absolute)?;
            if !fit.converged || fit.params.iter().any(|v| !v.is_finite()) {
                return unavailable("degenerate abscissae");
            }
            if let ModelKind::Line = kind {
                Ok(vec![fit.params[1], fit.params[0]])
            } else {
                Ok(fit.params)
            }
        }
        ModelKind::Monomial { power } => {
            let num: f64 = x.iter().zip(y).map(|(x, y)| y * x.powi(power)).sum();
            let den: f64 = x.iter().map(|x| x.powi(2 * power)).sum();
            if den <= 0.0 {
                return unavailable("all abscissae zero");
            }
            Ok(vec![num / den])
        }
        ModelKind::Gaussian | ModelKind::GaussianBackground => {
            let bg = if kind == ModelKind::GaussianBackground {
                y.iter().cloned().fold(f64::INFINITY, f64::min)
            } else {
                0.0
            };
            let w: Vec<f64> = y.iter().map(|v| (v - bg).max(0.0)).collect();
            let sw: f64 = w.iter().sum();
            if !(sw > 0.0) {
                return unavailable("no positive signal above background");
            }
            let c = x.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>() / sw;
            let var = x.iter().zip(&w).map(|(x, w)| w * (x - c).powi(2)).sum::<f64>() / sw;
            if !(var > 0.0) {
                return unavailable("zero-width peak");
            }
            let amp = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - bg;
            let mut out = vec![amp, c, var.sqrt()];
            if kind == ModelKind::GaussianBackground {
                out.push(bg);
            }
            Ok(out)
        }
        ModelKind::Sinusoid => {
            let omega = dominant_angular_frequency(x, y)?;
            let (offset, a1, a2) = harmonic_projection(x, y, omega)?;
            let amp = a1.hypot(a2);
            Ok(vec![offset, amp, omega, (-a2).atan2(a1)])
        }
        ModelKind::Fringe { harmonic } => {
            let (offset, a1, a2) = harmonic_projection(x, y, harmonic)?;
            if offset == 0.0 {
                return unavailable("zero mean level");
            }
            Ok(vec![offset, a1.hypot(a2) / offset, (-a2).atan2(a1)])
        }
        ModelKind::SechSquared => {
            let (imax, amp) = y.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc },
            );
            let sw: f64 = y.iter().map(|v| v.max(0.0)).sum();
            if !(amp > 0.0) || !(sw > 0.0) {
                return unavailable("no positive peak");
            }
            let c = x[imax];
            let var = x.iter().zip(y).map(|(x, y)| y.max(0.0) * (x - c).powi(2)).sum::<f64>() / sw;
            // variance of a normalised sech² is π²τ²/12
            let tau = (12.0 * var).sqrt() / std::f64::consts::PI;
            if !(tau > 0.0) {
                return unavailable("zero-width peak");
            }
            Ok(vec![amp, c, tau])
        }
    }
}

/// Fit y ≈ c + a1·cos(ωx) + a2·sin(ωx) for a fixed ω.
fn harmonic_projection(x: &[f64], y: &[f64], omega: f64) -> Result<(f64, f64, f64)> {
    let cols = vec![
        vec![1.0; x.len()],
        x.iter().map(|v| (omega * v).cos()).collect(),
        x.iter().map(|v| (omega * v).sin()).collect(),
    ];
    let fit = linear_least_squares(&cols, y, &Weights::Uniform, ErrorScaling::Absolute)?;
    if !fit.converged || fit.message.is_some() {
        return unavailable("sampling does not resolve the harmonic");
    }
    Ok((fit.params[0], fit.params[1], fit.params[2]))
}

/// Angular frequency of the strongest periodogram peak.
///
/// Trial frequencies run from one cycle over the data span up to the
/// mean-spacing Nyquist limit, oversampled 16× relative to the natural
/// 1/span resolution.
pub fn dominant_angular_frequency(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len();
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = hi - lo;
    if !(span > 0.0) {
        return unavailable("zero abscissa span");
    }
    let mean = y.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = y.iter().map(|v| v - mean).collect();
    if dev.iter().all(|d| d.abs() <= 1e-300) {
        return unavailable("constant data");
    }
    let df = 1.0 / span;
    let f_max = 0.5 * (n as f64 - 1.0) / span;
    let oversample = 16.0;
    let mut best = (0.0, f64::NEG_INFINITY);
    let mut f = df;
    while f <= f_max + 1e-12 * f_max {
        let w = 2.0 * std::f64::consts::PI * f;
        let (mut c, mut s) = (0.0, 0.0);
        for (xi, d) in x.iter().zip(&dev) {
            let (sn, cs) = (w * xi).sin_cos();
            c += d * cs;
            s += d * sn;
        }
        let power = c * c + s * s;
        if power > best.1 {
            best = (w, power);
        }
        f += df / oversample;
    }
    if best.1 <= 0.0 {
        return unavailable("no oscillation resolved");
    }
    Ok(best.0)
}
