//! Analytic densities, exponential tilting, and exact model log-densities.
//!
//! Gaussian mixtures provide closed-form pdfs, scores, samples, and the
//! linear-reward exponential tilt. [`quadrature_tilt`] is the brute-force
//! counterpart that tilts any evaluable reward on a grid; the two must agree
//! for linear rewards. [`log_density`] computes exact marginal log-densities
//! of a velocity field by integrating the probability-flow ODE together with
//! its divergence, and [`log_density_with_grad`] differentiates that whole
//! integration with respect to the model parameters.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::net::{Gradients, VelocityField, VelocityModel};
use crate::rng;
use crate::schedule::Schedule;
use crate::types::SampleBatch;

const LN_2PI: f64 = 1.8378770664093453;

/// States outside this box abort the log-density integration.
const DOMAIN_BOUND: f64 = 50.0;

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Per-dimension variances (diagonal covariance).
    pub var: Vec<f64>,
}

impl GaussianComponent {
    fn log_pdf(&self, x: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.var)
            .zip(x)
            .map(|((&m, &v), &xi)| {
                let d = xi - m;
                -0.5 * (d * d / v + (v).ln() + LN_2PI)
            })
            .sum()
    }
}

/// Mixture of diagonal Gaussians; weights positive and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<GaussianComponent>,
    dim: usize,
}

impl GaussianMixture {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let dim = components
            .first()
            .map(|c| c.mean.len())
            .ok_or_else(|| Error::invalid("mixture", "at least one component required"))?;
        if dim == 0 || dim > 2 {
            return Err(Error::invalid("mixture", format!("dimension must be 1 or 2, got {dim}")));
        }
        let mut total = 0.0;
        for c in &components {
            if c.mean.len() != dim || c.var.len() != dim {
                return Err(Error::ShapeMismatch {
                    context: "mixture component mean/var dimensions disagree".into(),
                });
            }
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(Error::invalid("mixture", "weights must be positive"));
            }
            if c.var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::invalid("mixture", "variances must be positive"));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::NonFinite { context: "mixture mean" });
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("mixture", format!("weights sum to {total}, expected 1")));
        }
        Ok(GaussianMixture { components, dim })
    }

    /// Single 1-d component convenience constructor.
    pub fn single(mean: f64, var: f64) -> Result<Self> {
        GaussianMixture::new(vec![GaussianComponent { weight: 1.0, mean: vec![mean], var: vec![var] }])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        Ok(())
    }

    /// Stable log-density via log-sum-exp over components.
    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let terms: Vec<f64> =
            self.components.iter().map(|c| c.weight.ln() + c.log_pdf(x)).collect();
        Ok(log_sum_exp(&terms))
    }

    pub fn pdf(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_pdf(x)?.exp())
    }

    /// Gradient of the log-density.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let logs: Vec<f64> = self.components.iter().map(|c| c.weight.ln() + c.log_pdf(x)).collect();
        let lse = log_sum_exp(&logs);
        let mut out = vec![0.0; self.dim];
        for (c, lg) in self.components.iter().zip(&logs) {
            let resp = (lg - lse).exp();
            for j in 0..self.dim {
                out[j] += resp * (-(x[j] - c.mean[j]) / c.var[j]);
            }
        }
        Ok(out)
    }

    /// Draws n samples: component chosen categorically, then a Gaussian draw.
    pub fn sample(&self, n: usize, seed: u64) -> SampleBatch {
        self.sample_with_rng(n, &mut rng::rng_from(seed))
    }

    /// Like [`Self::sample`] but drawing from a caller-owned generator, so a
    /// training loop can consume one continuous stream.
    pub fn sample_with_rng<R: Rng>(&self, n: usize, r: &mut R) -> SampleBatch {
        let mut out = SampleBatch::with_capacity(self.dim, n);
        let mut row = vec![0.0; self.dim];
        for _ in 0..n {
            let u: f64 = r.random();
            let mut acc = 0.0;
            let mut k = self.components.len() - 1;
            for (i, c) in self.components.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    k = i;
                    break;
                }
            }
            let c = &self.components[k];
            for j in 0..self.dim {
                let z: f64 = StandardNormal.sample(&mut *r);
                row[j] = c.mean[j] + c.var[j].sqrt() * z;
            }
            out.push(&row);
        }
        out
    }

    /// Exponential tilt by a linear reward: p(x) -> p(x) exp(lambda . x),
    /// renormalized. Component k maps to N(mu_k + Sigma_k lambda, Sigma_k)
    /// with log-weight shift lambda.mu_k + lambda.Sigma_k lambda / 2.
    pub fn tilt(&self, lambda: &[f64]) -> Result<GaussianMixture> {
        self.check_dim(lambda)?;
        if lambda.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite { context: "tilt vector" });
        }
        let mut log_w = Vec::with_capacity(self.components.len());
        let mut tilted = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let mut shift = 0.0;
            let mut mean = c.mean.clone();
            for j in 0..self.dim {
                shift += lambda[j] * c.mean[j] + 0.5 * lambda[j] * lambda[j] * c.var[j];
                mean[j] += c.var[j] * lambda[j];
            }
            log_w.push(c.weight.ln() + shift);
            tilted.push(GaussianComponent { weight: 0.0, mean, var: c.var.clone() });
        }
        let lse = log_sum_exp(&log_w);
        if !lse.is_finite() {
            return Err(Error::DivergentTilt);
        }
        for (c, lw) in tilted.iter_mut().zip(&log_w) {
            c.weight = (lw - lse).exp();
        }
        // renormalize away rounding before the constructor's sum check
        let total: f64 = tilted.iter().map(|c| c.weight).sum();
        for c in &mut tilted {
            c.weight /= total;
        }
        GaussianMixture::new(tilted)
    }

    /// Tilt by exp(R(x)/beta_eff) for a linear reward; other reward kinds
    /// have no closed form here and must go through [`quadrature_tilt`].
    pub fn tilted_by_reward(&self, reward: &RewardFn, beta_eff: f64) -> Result<GaussianMixture> {
        if !(beta_eff > 0.0) {
            return Err(Error::invalid("tilt", format!("beta_eff must be positive, got {beta_eff}")));
        }
        match reward {
            RewardFn::Linear { coeff } => {
                let lambda: Vec<f64> = coeff.iter().map(|c| c / beta_eff).collect();
                self.tilt(&lambda)
            }
            other => Err(Error::UnsupportedReward { op: "tilt_mixture", kind: other.kind() }),
        }
    }

    /// Cumulative distribution function, 1-d mixtures only.
    pub fn cdf1(&self, x: f64) -> Result<f64> {
        if self.dim != 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: self.dim });
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.weight * std_normal_cdf((x - c.mean[0]) / c.var[0].sqrt()))
            .sum())
    }

    /// Mixture mean (1-d).
    pub fn mean1(&self) -> Result<f64> {
        if self.dim != 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: self.dim });
        }
        Ok(self.components.iter().map(|c| c.weight * c.mean[0]).sum())
    }
}

fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Reward functions evaluable on the support window.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardFn {
    /// R(x) = coeff . x
    Linear { coeff: Vec<f64> },
    /// R(x) = coeff * |x|^2
    Quadratic { coeff: f64 },
    /// Piecewise-linear table over strictly increasing abscissae (1-d).
    Table { xs: Vec<f64>, values: Vec<f64> },
}

impl RewardFn {
    pub fn linear1(coeff: f64) -> Self {
        RewardFn::Linear { coeff: vec![coeff] }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            RewardFn::Linear { .. } => "linear",
            RewardFn::Quadratic { .. } => "quadratic",
            RewardFn::Table { .. } => "custom-table",
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        match self {
            RewardFn::Linear { coeff } => coeff.iter().zip(x).map(|(c, xi)| c * xi).sum(),
            RewardFn::Quadratic { coeff } => coeff * x.iter().map(|xi| xi * xi).sum::<f64>(),
            RewardFn::Table { xs, values } => {
                let xi = x[0];
                if xi <= xs[0] {
                    return values[0];
                }
                if xi >= *xs.last().unwrap() {
                    return *values.last().unwrap();
                }
                let k = xs.partition_point(|&p| p <= xi) - 1;
                let f = (xi - xs[k]) / (xs[k + 1] - xs[k]);
                values[k] + f * (values[k + 1] - values[k])
            }
        }
    }
}

/// Uniform 1-d quadrature grid.
#[derive(Debug, Clone, Copy)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Grid { lo: -10.0, hi: 10.0, n: 4096 }
    }
}

impl Grid {
    pub fn points(&self) -> Vec<f64> {
        let step = (self.hi - self.lo) / (self.n - 1) as f64;
        (0..self.n).map(|i| self.lo + step * i as f64).collect()
    }
}

/// Normalized density tabulated on a grid, with a trapezoid CDF.
#[derive(Debug, Clone)]
pub struct TabulatedDensity {
    xs: Vec<f64>,
    pdf: Vec<f64>,
    cdf: Vec<f64>,
}

impl TabulatedDensity {
    /// Normalizes non-negative values over the grid by the trapezoid rule.
    pub fn from_values(xs: Vec<f64>, mut values: Vec<f64>) -> Result<Self> {
        if xs.len() != values.len() || xs.len() < 2 {
            return Err(Error::ShapeMismatch { context: "tabulated density grid".into() });
        }
        let z = trapezoid(&xs, &values);
        if !z.is_finite() || z <= 0.0 {
            return Err(Error::DivergentTilt);
        }
        for v in &mut values {
            *v /= z;
        }
        let mut cdf = Vec::with_capacity(xs.len());
        let mut acc = 0.0;
        cdf.push(0.0);
        for i in 1..xs.len() {
            acc += 0.5 * (values[i] + values[i - 1]) * (xs[i] - xs[i - 1]);
            cdf.push(acc);
        }
        // guard against rounding pushing the top above 1
        let top = *cdf.last().unwrap();
        for c in &mut cdf {
            *c /= top;
        }
        Ok(TabulatedDensity { xs, pdf: values, cdf })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn pdf_values(&self) -> &[f64] {
        &self.pdf
    }

    pub fn pdf_at(&self, x: f64) -> f64 {
        self.interp(&self.pdf, x, 0.0, 0.0)
    }

    pub fn cdf_at(&self, x: f64) -> f64 {
        self.interp(&self.cdf, x, 0.0, 1.0)
    }

    fn interp(&self, ys: &[f64], x: f64, below: f64, above: f64) -> f64 {
        if x < self.xs[0] {
            return below;
        }
        if x > *self.xs.last().unwrap() {
            return above;
        }
        let k = match self.xs.binary_search_by(|p| p.partial_cmp(&x).unwrap()) {
            Ok(i) => return ys[i],
            Err(i) => i - 1,
        };
        let f = (x - self.xs[k]) / (self.xs[k + 1] - self.xs[k]);
        ys[k] + f * (ys[k + 1] - ys[k])
    }

    /// Total variation distance to a pointwise-evaluable density, over this
    /// table's grid: 0.5 * integral |p - q|.
    pub fn total_variation_to(&self, q: impl Fn(f64) -> f64) -> f64 {
        let diffs: Vec<f64> = self.xs.iter().zip(&self.pdf).map(|(&x, &p)| (p - q(x)).abs()).collect();
        0.5 * trapezoid(&self.xs, &diffs)
    }

    /// Two-column CSV (x, density).
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        for (x, p) in self.xs.iter().zip(&self.pdf) {
            writeln!(out, "{x:.16e},{p:.16e}")?;
        }
        Ok(())
    }
}

fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 1..xs.len() {
        acc += 0.5 * (ys[i] + ys[i - 1]) * (xs[i] - xs[i - 1]);
    }
    acc
}

/// Brute-force tilt oracle: tabulates p(x) proportional to
/// p_ref(x) exp(R(x)/beta_eff) on the grid and normalizes by trapezoid.
pub fn quadrature_tilt(
    mixture: &GaussianMixture,
    reward: &RewardFn,
    beta_eff: f64,
    grid: &Grid,
) -> Result<TabulatedDensity> {
    if mixture.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: mixture.dim() });
    }
    if !(beta_eff > 0.0) {
        return Err(Error::invalid("quadrature_tilt", "beta_eff must be positive"));
    }
    if grid.n < 4096 || grid.lo > -10.0 || grid.hi < 10.0 {
        return Err(Error::invalid(
            "quadrature_tilt",
            format!("grid must span [-10,10] with at least 4096 points, got [{}, {}] n={}", grid.lo, grid.hi, grid.n),
        ));
    }
    let xs = grid.points();
    // work in log space, shifting by the max before exponentiating
    let logs: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let xv = [x];
            mixture.log_pdf(&xv).map(|lp| lp + reward.evaluate(&xv) / beta_eff)
        })
        .collect::<Result<_>>()?;
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::DivergentTilt);
    }
    let values: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    TabulatedDensity::from_values(xs, values)
}

/// Analytic velocity field whose marginals are exactly Gaussian: the field
/// transporting N(mean, diag(var)) data along the schedule's path from
/// standard-normal noise. Serves as an exactly-known reference field.
#[derive(Debug, Clone)]
pub struct GaussianField {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub sched: Schedule,
}

impl GaussianField {
    pub fn standard(dim: usize, sched: Schedule) -> Self {
        GaussianField { mean: vec![0.0; dim], var: vec![1.0; dim], sched }
    }

    /// Marginal parameters at time t for one coordinate.
    fn marginal(&self, j: usize, t: f64) -> (f64, f64) {
        let a = self.sched.alpha(t);
        let b = self.sched.beta(t);
        (a * self.mean[j], a * a * self.var[j] + b * b)
    }

    /// Exact marginal log-density at time t.
    pub fn log_pdf_at(&self, x: &[f64], t: f64) -> f64 {
        (0..self.mean.len())
            .map(|j| {
                let (m, v) = self.marginal(j, t);
                let d = x[j] - m;
                -0.5 * (d * d / v + v.ln() + LN_2PI)
            })
            .sum()
    }

    /// Exact marginal score at time t.
    pub fn score_at(&self, x: &[f64], t: f64) -> Vec<f64> {
        (0..self.mean.len())
            .map(|j| {
                let (m, v) = self.marginal(j, t);
                -(x[j] - m) / v
            })
            .collect()
    }
}

impl VelocityField for GaussianField {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        let a = self.sched.alpha(t);
        let b = self.sched.beta(t);
        let ad = self.sched.alpha_dot(t);
        let bd = self.sched.beta_dot(t);
        (0..self.mean.len())
            .map(|j| {
                let var_t = a * a * self.var[j] + b * b;
                let centered = x[j] - a * self.mean[j];
                let e0 = self.mean[j] + a * self.var[j] / var_t * centered;
                let e1 = b / var_t * centered;
                ad * e0 + bd * e1
            })
            .collect()
    }

    fn divergence(&self, x: &[f64], t: f64) -> f64 {
        let _ = x;
        let a = self.sched.alpha(t);
        let b = self.sched.beta(t);
        let ad = self.sched.alpha_dot(t);
        let bd = self.sched.beta_dot(t);
        (0..self.mean.len())
            .map(|j| {
                let var_t = a * a * self.var[j] + b * b;
                (ad * a * self.var[j] + bd * b) / var_t
            })
            .sum()
    }
}

fn standard_normal_log_pdf(x: &[f64]) -> f64 {
    x.iter().map(|&xi| -0.5 * (xi * xi + LN_2PI)).sum()
}

/// RK4 step of the coupled (state, accumulated divergence) system.
fn rk4_step<F: VelocityField>(field: &F, x: &mut [f64], acc: &mut f64, t: f64, h: f64) {
    let d = x.len();
    let k1 = field.velocity(x, t);
    let d1 = field.divergence(x, t);
    let mut s = vec![0.0; d];
    for j in 0..d {
        s[j] = x[j] + 0.5 * h * k1[j];
    }
    let k2 = field.velocity(&s, t + 0.5 * h);
    let d2 = field.divergence(&s, t + 0.5 * h);
    for j in 0..d {
        s[j] = x[j] + 0.5 * h * k2[j];
    }
    let k3 = field.velocity(&s, t + 0.5 * h);
    let d3 = field.divergence(&s, t + 0.5 * h);
    for j in 0..d {
        s[j] = x[j] + h * k3[j];
    }
    let k4 = field.velocity(&s, t + h);
    let d4 = field.divergence(&s, t + h);
    for j in 0..d {
        x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
    }
    *acc += h / 6.0 * (d1 + 2.0 * d2 + 2.0 * d3 + d4);
}

fn check_domain(x: &[f64], t: f64) -> Result<()> {
    if x.iter().any(|v| !v.is_finite() || v.abs() > DOMAIN_BOUND) {
        return Err(Error::Diverged { t });
    }
    Ok(())
}

/// Marginal log-density of the field's time-t distribution at x, by
/// integrating the probability-flow ODE from t to 1 while accumulating the
/// divergence, then adding the standard-normal log-density at the endpoint.
pub fn log_density_at<F: VelocityField>(
    field: &F,
    x: &[f64],
    t_start: f64,
    steps: usize,
) -> Result<f64> {
    if steps < 100 {
        return Err(Error::invalid("log_density", format!("steps must be >= 100, got {steps}")));
    }
    if !(0.0..1.0).contains(&t_start) {
        return Err(Error::invalid("log_density", format!("t must lie in [0,1), got {t_start}")));
    }
    if x.len() != field.dim() {
        return Err(Error::DimensionMismatch { expected: field.dim(), got: x.len() });
    }
    check_domain(x, t_start)?;
    let h = (1.0 - t_start) / steps as f64;
    let mut state = x.to_vec();
    let mut acc = 0.0;
    for k in 0..steps {
        let t = t_start + h * k as f64;
        rk4_step(field, &mut state, &mut acc, t, h);
        check_domain(&state, t + h)?;
    }
    Ok(acc + standard_normal_log_pdf(&state))
}

/// Marginal log-density of the generated (t=0) distribution at x.
pub fn log_density<F: VelocityField>(field: &F, x: &[f64], steps: usize) -> Result<f64> {
    log_density_at(field, x, 0.0, steps)
}

/// The implicit time-dependent reward: beta times the log-ratio of the two
/// models' time-t marginals at x.
pub fn implicit_reward<F: VelocityField, G: VelocityField>(
    theta: &F,
    reference: &G,
    x: &[f64],
    t: f64,
    beta: f64,
    steps: usize,
) -> Result<f64> {
    Ok(beta * (log_density_at(theta, x, t, steps)? - log_density_at(reference, x, t, steps)?))
}

/// [`log_density`] plus its gradient with respect to the model parameters,
/// by reverse-mode differentiation through the discrete RK4 integration.
pub fn log_density_with_grad(
    model: &VelocityModel,
    x: &[f64],
    steps: usize,
) -> Result<(f64, Gradients)> {
    if steps < 100 {
        return Err(Error::invalid("log_density", format!("steps must be >= 100, got {steps}")));
    }
    if x.len() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: x.len() });
    }
    check_domain(x, 0.0)?;
    let d = model.dim();
    let h = 1.0 / steps as f64;

    // forward, storing the state at every step boundary
    let mut states = Vec::with_capacity(steps + 1);
    let mut state = x.to_vec();
    let mut acc = 0.0;
    states.push(state.clone());
    for k in 0..steps {
        let t = h * k as f64;
        rk4_step(model, &mut state, &mut acc, t, h);
        check_domain(&state, t + h)?;
        states.push(state.clone());
    }
    let logp = acc + standard_normal_log_pdf(&state);

    // reverse: cotangent of the terminal state from the normal endpoint,
    // cotangent of the divergence accumulator is identically 1
    let mut grads = Gradients::zeros_like(model);
    let mut x_bar: Vec<f64> = states[steps].iter().map(|&v| -v).collect();
    let mut stage = vec![0.0; d];
    for k in (0..steps).rev() {
        let x_n = &states[k];
        let t = h * k as f64;
        // recompute the stage points
        let k1 = model.velocity(x_n, t);
        for j in 0..d {
            stage[j] = x_n[j] + 0.5 * h * k1[j];
        }
        let s2 = stage.clone();
        let k2 = model.velocity(&s2, t + 0.5 * h);
        for j in 0..d {
            stage[j] = x_n[j] + 0.5 * h * k2[j];
        }
        let s3 = stage.clone();
        let k3 = model.velocity(&s3, t + 0.5 * h);
        for j in 0..d {
            stage[j] = x_n[j] + h * k3[j];
        }
        let s4 = stage.clone();

        let sixth = h / 6.0;
        let third = h / 3.0;
        // stage 4
        let k4_bar: Vec<f64> = x_bar.iter().map(|&b| sixth * b).collect();
        let mut s4_bar = vec![0.0; d];
        model.vjp_velocity_divergence(&s4, t + h, &k4_bar, sixth, &mut grads, &mut s4_bar)?;
        // stage 3: k3_bar = third * x_bar + h * s4_bar
        let k3_bar: Vec<f64> =
            x_bar.iter().zip(&s4_bar).map(|(&b, &s)| third * b + h * s).collect();
        let mut s3_bar = vec![0.0; d];
        model.vjp_velocity_divergence(&s3, t + 0.5 * h, &k3_bar, third, &mut grads, &mut s3_bar)?;
        // stage 2: k2_bar = third * x_bar + h/2 * s3_bar
        let k2_bar: Vec<f64> =
            x_bar.iter().zip(&s3_bar).map(|(&b, &s)| third * b + 0.5 * h * s).collect();
        let mut s2_bar = vec![0.0; d];
        model.vjp_velocity_divergence(&s2, t + 0.5 * h, &k2_bar, third, &mut grads, &mut s2_bar)?;
        // stage 1: k1_bar = sixth * x_bar + h/2 * s2_bar
        let k1_bar: Vec<f64> =
            x_bar.iter().zip(&s2_bar).map(|(&b, &s)| sixth * b + 0.5 * h * s).collect();
        let mut s1_bar = vec![0.0; d];
        model.vjp_velocity_divergence(x_n, t, &k1_bar, sixth, &mut grads, &mut s1_bar)?;

        for j in 0..d {
            x_bar[j] += s1_bar[j] + s2_bar[j] + s3_bar[j] + s4_bar[j];
        }
    }
    Ok((logp, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::Schedule;

    fn paper_style_mixture() -> GaussianMixture {
        GaussianMixture::new(vec![
            GaussianComponent { weight: 0.7, mean: vec![-2.5], var: vec![0.25] },
            GaussianComponent { weight: 0.3, mean: vec![2.5], var: vec![0.49] },
        ])
        .unwrap()
    }

    #[test]
    fn mixture_validation() {
        assert!(GaussianMixture::new(vec![]).is_err());
        assert!(GaussianMixture::new(vec![GaussianComponent {
            weight: 0.5,
            mean: vec![0.0],
            var: vec![1.0]
        }])
        .is_err()); // weights must sum to 1
        assert!(GaussianMixture::new(vec![GaussianComponent {
            weight: 1.0,
            mean: vec![0.0],
            var: vec![-1.0]
        }])
        .is_err());
    }

    #[test]
    fn standard_normal_log_pdf_at_zero() {
        let m = GaussianMixture::single(0.0, 1.0).unwrap();
        let expected = -0.5 * LN_2PI; // -0.9189385...
        assert!((m.log_pdf(&[0.0]).unwrap() - expected).abs() < 1e-12);
        assert!((expected + 0.918939).abs() < 1e-6);
    }

    // Closed-form evaluation at the left mode of the two-component mixture,
    // frozen from 0.7*N(-2.5; -2.5, 0.25) + 0.3*N(-2.5; 2.5, 0.49).
    #[test]
    fn two_mode_log_pdf_at_left_mode() {
        let m = paper_style_mixture();
        let direct = (0.7 / (2.0 * std::f64::consts::PI * 0.25).sqrt()
            + 0.3 / (2.0 * std::f64::consts::PI * 0.49).sqrt() * (-25.0f64 / 0.98).exp())
        .ln();
        assert!((m.log_pdf(&[-2.5]).unwrap() - direct).abs() < 1e-12);
        assert!((direct - (-0.5824626485)).abs() < 1e-9);
    }

    #[test]
    fn mixture_mass_normalizes_by_quadrature() {
        let m = paper_style_mixture();
        let xs: Vec<f64> = (0..8001).map(|i| -10.0 + 20.0 * i as f64 / 8000.0).collect();
        let ps: Vec<f64> = xs.iter().map(|&x| m.pdf(&[x]).unwrap()).collect();
        let z = super::trapezoid(&xs, &ps);
        assert!((z - 1.0).abs() < 1e-8, "mass {z}");
    }

    #[test]
    fn symmetric_mixture_pdf_is_even() {
        let m = GaussianMixture::new(vec![
            GaussianComponent { weight: 0.5, mean: vec![-1.5], var: vec![0.8] },
            GaussianComponent { weight: 0.5, mean: vec![1.5], var: vec![0.8] },
        ])
        .unwrap();
        for x in [0.1, 0.8, 2.7] {
            assert!((m.pdf(&[x]).unwrap() - m.pdf(&[-x]).unwrap()).abs() < 1e-14);
        }
        assert!(m.score(&[0.0]).unwrap()[0].abs() < 1e-14);
    }

    #[test]
    fn standard_normal_score_is_negative_x() {
        let m = GaussianMixture::single(0.0, 1.0).unwrap();
        assert!((m.score(&[1.3]).unwrap()[0] + 1.3).abs() < 1e-12);
    }

    #[test]
    fn score_matches_finite_difference_of_log_pdf() {
        let m = paper_style_mixture();
        let h = 1e-6;
        for x in [-3.0, -1.0, 0.0, 1.0, 2.5] {
            let fd = (m.log_pdf(&[x + h]).unwrap() - m.log_pdf(&[x - h]).unwrap()) / (2.0 * h);
            let s = m.score(&[x]).unwrap()[0];
            assert!((s - fd).abs() <= 1e-6, "x={x}: {s} vs {fd}");
        }
    }

    #[test]
    fn sampling_respects_weights_and_moments() {
        let m = paper_style_mixture();
        let n = 100_000;
        let batch = m.sample(n, 99);
        let xs = batch.scalars().unwrap();
        let frac_left = xs.iter().filter(|&&x| x < 0.0).count() as f64 / n as f64;
        assert!((frac_left - 0.7).abs() <= 0.01, "left fraction {frac_left}");

        let g = GaussianMixture::single(3.0, 1.0).unwrap();
        let xs = g.sample(n, 7);
        let mean = xs.scalars().unwrap().iter().sum::<f64>() / n as f64;
        assert!((mean - 3.0).abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let m = paper_style_mixture();
        let a = m.sample(64, 5);
        let b = m.sample(64, 5);
        for (ra, rb) in a.rows().zip(b.rows()) {
            assert_eq!(ra[0].to_bits(), rb[0].to_bits());
        }
        assert_eq!(m.sample(0, 5).len(), 0);
    }

    #[test]
    fn zero_tilt_is_identity() {
        let m = paper_style_mixture();
        let t = m.tilt(&[0.0]).unwrap();
        for (a, b) in m.components().iter().zip(t.components()) {
            assert!((a.weight - b.weight).abs() < 1e-14);
            assert!((a.mean[0] - b.mean[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn single_gaussian_tilt_shifts_mean() {
        let m = GaussianMixture::single(0.0, 1.0).unwrap();
        let t = m.tilt(&[1.0]).unwrap();
        assert!((t.components()[0].mean[0] - 1.0).abs() < 1e-14);
        assert!((t.components()[0].var[0] - 1.0).abs() < 1e-14);
        assert!((t.components()[0].weight - 1.0).abs() < 1e-14);
    }

    #[test]
    fn tilt_then_untilt_restores_mixture() {
        let m = paper_style_mixture();
        let lambda = 1.0 / 3.0;
        let back = m.tilt(&[lambda]).unwrap().tilt(&[-lambda]).unwrap();
        for (a, b) in m.components().iter().zip(back.components()) {
            assert!((a.weight - b.weight).abs() < 1e-10);
            assert!((a.mean[0] - b.mean[0]).abs() < 1e-10);
            assert!((a.var[0] - b.var[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn tilt_matches_quadrature_for_linear_rewards() {
        let m = paper_style_mixture();
        let reward = RewardFn::linear1(0.1);
        for beta in [2.0, 0.3, 0.15] {
            let analytic = m.tilted_by_reward(&reward, beta).unwrap();
            let table = quadrature_tilt(&m, &reward, beta, &Grid::default()).unwrap();
            let tv = table.total_variation_to(|x| analytic.pdf(&[x]).unwrap());
            assert!(tv <= 1e-6, "beta={beta}: tv={tv:e}");
        }
    }

    #[test]
    fn tilted_by_reward_rejects_nonlinear() {
        let m = paper_style_mixture();
        let r = RewardFn::Quadratic { coeff: -0.5 };
        assert!(matches!(
            m.tilted_by_reward(&r, 1.0),
            Err(Error::UnsupportedReward { .. })
        ));
    }

    #[test]
    fn quadrature_zero_reward_reproduces_base() {
        let m = paper_style_mixture();
        let table = quadrature_tilt(&m, &RewardFn::linear1(0.0), 1.0, &Grid::default()).unwrap();
        let mut max_err = 0.0f64;
        for &x in table.xs() {
            let err = (table.pdf_at(x) - m.pdf(&[x]).unwrap()).abs();
            max_err = max_err.max(err);
        }
        assert!(max_err <= 1e-8, "max abs err {max_err:e}");
    }

    // Completing the square: N(0,1) tilted by exp(-x^2/2) is N(0, 1/2).
    #[test]
    fn quadrature_quadratic_reward_completes_square() {
        let base = GaussianMixture::single(0.0, 1.0).unwrap();
        let narrowed = GaussianMixture::single(0.0, 0.5).unwrap();
        let table =
            quadrature_tilt(&base, &RewardFn::Quadratic { coeff: -0.5 }, 1.0, &Grid::default())
                .unwrap();
        let tv = table.total_variation_to(|x| narrowed.pdf(&[x]).unwrap());
        assert!(tv <= 1e-8, "tv={tv:e}");
    }

    #[test]
    fn quadrature_rejects_small_grid() {
        let m = paper_style_mixture();
        let g = Grid { lo: -10.0, hi: 10.0, n: 512 };
        assert!(quadrature_tilt(&m, &RewardFn::linear1(0.1), 1.0, &g).is_err());
    }

    #[test]
    fn quadrature_divergent_tilt_is_an_error() {
        let m = paper_style_mixture();
        // exp(+x^2) overwhelms the Gaussian tails: unnormalizable
        let r = RewardFn::Quadratic { coeff: 1.0 };
        assert!(matches!(
            quadrature_tilt(&m, &r, 0.05, &Grid::default()),
            Err(Error::DivergentTilt)
        ));
    }

    #[test]
    fn gaussian_field_standard_normal_is_fixed_point() {
        // Standard-normal data: marginals stay N(0, (1-t)^2 + t^2) and the
        // log-density engine must recover log N(x; 0, 1) at t=0.
        let f = GaussianField::standard(1, Schedule::rectified_linear());
        let lp = log_density(&f, &[0.0], 1000).unwrap();
        assert!((lp + 0.5 * LN_2PI).abs() <= 1e-4, "log p(0) = {lp}");
        for x in [-1.5, 0.7, 2.0] {
            let lp = log_density(&f, &[x], 1000).unwrap();
            let want = -0.5 * (x * x + LN_2PI);
            assert!((lp - want).abs() <= 1e-4, "x={x}: {lp} vs {want}");
        }
    }

    #[test]
    fn gaussian_field_shifted_log_density() {
        let f = GaussianField {
            mean: vec![1.2],
            var: vec![0.6],
            sched: Schedule::rectified_linear(),
        };
        for x in [-0.5, 1.2, 2.5] {
            let lp = log_density(&f, &[x], 800).unwrap();
            let want = f.log_pdf_at(&[x], 0.0);
            assert!((lp - want).abs() <= 1e-4, "x={x}: {lp} vs {want}");
        }
        // and at an interior time
        let lp = log_density_at(&f, &[0.4], 0.35, 800).unwrap();
        let want = f.log_pdf_at(&[0.4], 0.35);
        assert!((lp - want).abs() <= 1e-4);
    }

    #[test]
    fn log_density_rejects_low_step_counts() {
        let f = GaussianField::standard(1, Schedule::rectified_linear());
        assert!(log_density(&f, &[0.0], 50).is_err());
    }

    #[test]
    fn implicit_reward_zero_for_identical_fields() {
        let f = GaussianField::standard(1, Schedule::rectified_linear());
        let r = implicit_reward(&f, &f, &[0.7], 0.2, 0.3, 200).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn implicit_reward_is_linear_in_beta() {
        let sched = Schedule::rectified_linear();
        let a = GaussianField::standard(1, sched);
        let b = GaussianField { mean: vec![0.8], var: vec![1.0], sched };
        let r1 = implicit_reward(&b, &a, &[0.5], 0.1, 0.3, 200).unwrap();
        let r2 = implicit_reward(&b, &a, &[0.5], 0.1, 0.6, 200).unwrap();
        assert!((r2 - 2.0 * r1).abs() < 1e-12);
    }

    #[test]
    fn log_density_grad_matches_value_and_finite_differences() {
        use rand::Rng;
        let model = VelocityModel::new(1, &[6, 5], 42).unwrap();
        let x = [0.4];
        let (lp, grads) = log_density_with_grad(&model, &x, 100).unwrap();
        let lp_plain = log_density(&model, &x, 100).unwrap();
        assert_eq!(lp.to_bits(), lp_plain.to_bits());

        let mut r = crate::rng::rng_from(9);
        let h = 1e-5;
        for _ in 0..12 {
            let layer = r.random_range(0..2usize + 1);
            let layer = layer.min(1); // probe the two hidden layers mostly
            let weight = r.random::<bool>();
            let mut plus = model.clone();
            let mut minus = model.clone();
            let (an, len);
            {
                let g = &grads.layers[layer];
                len = if weight { g.w.len() } else { g.b.len() };
            }
            let idx = r.random_range(0..len);
            an = if weight { grads.layers[layer].w[idx] } else { grads.layers[layer].b[idx] };
            if weight {
                plus.layers_mut()[layer].w[idx] += h;
                minus.layers_mut()[layer].w[idx] -= h;
            } else {
                plus.layers_mut()[layer].b[idx] += h;
                minus.layers_mut()[layer].b[idx] -= h;
            }
            let fd = (log_density(&plus, &x, 100).unwrap() - log_density(&minus, &x, 100).unwrap())
                / (2.0 * h);
            assert!(
                (an - fd).abs() / fd.abs().max(1e-4) <= 1e-3,
                "layer {layer} weight={weight} idx={idx}: {an} vs fd {fd}"
            );
        }
    }
}
