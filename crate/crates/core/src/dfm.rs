//! Single-factor dynamic factor model.
//!
//! ```text
//! y_{i,t} = β_i + γ_i x_t + u_{i,t}
//! x_t     = φ_1 x_{t-1} + … + φ_p x_{t-p} + η_t,          η_t ~ N(0, σ²_η)
//! u_{i,t} = d_{i,1} u_{i,t-1} + … + d_{i,q} u_{i,t-q} + ε_{i,t}, ε_{i,t} ~ N(0, σ²_{ε,i})
//! ```
//!
//! The latent factor and idiosyncratic terms are stacked into one state vector and
//! handled by a Kalman filter / RTS smoother. Parameters are fitted by maximizing the
//! exact Gaussian likelihood with BFGS over an unconstrained reparameterization.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calendar::Month;
use crate::error::{Error, Result};

/// Steps discarded before the first simulated observation.
pub const BURN_IN: usize = 200;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DfmSpec {
    pub beta0: Vec<f64>,
    pub gamma: Vec<f64>,
    pub phi: Vec<f64>,
    /// `d[i]` holds the q autoregressive coefficients of series i's idiosyncratic term.
    pub d: Vec<Vec<f64>>,
    pub var_eta: f64,
    pub var_eps: Vec<f64>,
}

impl DfmSpec {
    pub fn n_series(&self) -> usize {
        self.gamma.len()
    }

    pub fn p(&self) -> usize {
        self.phi.len()
    }

    pub fn q(&self) -> usize {
        self.d.first().map_or(0, Vec::len)
    }

    pub fn state_dim(&self) -> usize {
        self.p() + self.n_series() * self.q()
    }

    /// Shape, finiteness, nonnegative variances and AR stationarity.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_series();
        if n == 0 {
            return Err(Error::invalid("factor model needs at least one series"));
        }
        if self.p() == 0 {
            return Err(Error::invalid("factor AR order p must be at least 1"));
        }
        for (name, len) in [("beta0", self.beta0.len()), ("var_eps", self.var_eps.len()), ("d", self.d.len())] {
            if len != n {
                return Err(Error::invalid(format!("{name} has {len} entries for {n} series")));
            }
        }
        if self.d.iter().any(|row| row.len() != self.q()) {
            return Err(Error::invalid("every series needs the same idiosyncratic AR order"));
        }
        let all = self
            .beta0
            .iter()
            .chain(&self.gamma)
            .chain(&self.phi)
            .chain(self.d.iter().flatten())
            .chain(&self.var_eps)
            .chain(std::iter::once(&self.var_eta));
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("factor model parameters must be finite"));
        }
        if self.var_eta < 0.0 || self.var_eps.iter().any(|v| *v < 0.0) {
            return Err(Error::invalid("variances must be nonnegative"));
        }
        if ar_to_pacf(&self.phi).is_none() {
            return Err(Error::invalid(format!("factor AR polynomial {:?} is not stationary", self.phi)));
        }
        for (i, d) in self.d.iter().enumerate() {
            if ar_to_pacf(d).is_none() {
                return Err(Error::invalid(format!("idiosyncratic AR polynomial of series {i} is not stationary")));
            }
        }
        Ok(())
    }

    /// The same model with series reordered so that new series `k` is old series `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> DfmSpec {
        DfmSpec {
            beta0: order.iter().map(|&i| self.beta0[i]).collect(),
            gamma: order.iter().map(|&i| self.gamma[i]).collect(),
            phi: self.phi.clone(),
            d: order.iter().map(|&i| self.d[i].clone()).collect(),
            var_eta: self.var_eta,
            var_eps: order.iter().map(|&i| self.var_eps[i]).collect(),
        }
    }
}

/// Partial autocorrelations of an AR polynomial (step-down recursion), or `None`
/// when some |κ| ≥ 1, i.e. the process is not stationary.
pub fn ar_to_pacf(phi: &[f64]) -> Option<Vec<f64>> {
    let mut a = phi.to_vec();
    let mut pacf = vec![0.0; phi.len()];
    for k in (0..phi.len()).rev() {
        let kappa = a[k];
        if !(kappa.abs() < 1.0) {
            return None;
        }
        pacf[k] = kappa;
        let denom = 1.0 - kappa * kappa;
        a = (0..k).map(|j| (a[j] + kappa * a[k - 1 - j]) / denom).collect();
    }
    Some(pacf)
}

/// Inverse of [`ar_to_pacf`] (Durbin–Levinson step-up).
pub fn pacf_to_ar(pacf: &[f64]) -> Vec<f64> {
    let mut a: Vec<f64> = Vec::with_capacity(pacf.len());
    for (k, &kappa) in pacf.iter().enumerate() {
        let mut next: Vec<f64> = (0..k).map(|j| a[j] - kappa * a[k - 1 - j]).collect();
        next.push(kappa);
        a = next;
    }
    a
}

/// Linear-Gaussian state-space model
///
/// ```text
/// s_t = T s_{t-1} + R e_t,   e_t ~ N(0, diag(shock_var))
/// y_t = c + Z s_t + v_t,     v_t ~ N(0, diag(obs_var))
/// ```
///
/// with `s_0` drawn from `initial_cov` or, when that is absent, the stationary distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub transition: DMatrix<f64>,
    pub shock_loading: DMatrix<f64>,
    pub shock_var: DVector<f64>,
    pub loading: DMatrix<f64>,
    pub intercept: DVector<f64>,
    pub obs_var: DVector<f64>,
    pub initial_cov: Option<DMatrix<f64>>,
}

impl StateSpace {
    pub fn state_dim(&self) -> usize {
        self.transition.nrows()
    }

    pub fn n_obs(&self) -> usize {
        self.loading.nrows()
    }

    /// `R diag(shock_var) Rᵀ`.
    pub fn state_cov(&self) -> DMatrix<f64> {
        let scaled = &self.shock_loading * DMatrix::from_diagonal(&self.shock_var);
        scaled * self.shock_loading.transpose()
    }

    fn check(&self) -> Result<()> {
        let m = self.state_dim();
        let n = self.n_obs();
        let ok = self.transition.ncols() == m
            && self.shock_loading.nrows() == m
            && self.shock_loading.ncols() == self.shock_var.len()
            && self.loading.ncols() == m
            && self.intercept.len() == n
            && self.obs_var.len() == n
            && self.initial_cov.as_ref().is_none_or(|p| p.nrows() == m && p.ncols() == m);
        if !ok || m == 0 {
            return Err(Error::invalid("inconsistent state-space dimensions"));
        }
        let finite = self.transition.iter()
            .chain(self.shock_loading.iter())
            .chain(self.shock_var.iter())
            .chain(self.loading.iter())
            .chain(self.intercept.iter())
            .chain(self.obs_var.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("state-space matrices must be finite"));
        }
        Ok(())
    }

    /// Solve `P = T P Tᵀ + Q` by doubling.
    pub fn stationary_cov(&self) -> Result<DMatrix<f64>> {
        let mut p = self.state_cov();
        let mut a = self.transition.clone();
        for _ in 0..64 {
            let next = &p + &a * &p * a.transpose();
            let delta = (&next - &p).amax();
            p = next;
            if !p.iter().all(|v| v.is_finite()) {
                break;
            }
            if delta <= 1e-15 * p.amax().max(1e-300) {
                return Ok(symmetrize(p));
            }
            a = &a * &a;
        }
        Err(Error::Numerical(
            "no stationary state covariance (transition has a unit or explosive root)".into(),
        ))
    }

    fn initial_covariance(&self) -> Result<DMatrix<f64>> {
        match &self.initial_cov {
            Some(p) => Ok(p.clone()),
            None => self.stationary_cov(),
        }
    }
}

fn symmetrize(p: DMatrix<f64>) -> DMatrix<f64> {
    let t = p.transpose();
    (p + t) * 0.5
}

fn companion_block(t: &mut DMatrix<f64>, offset: usize, coef: &[f64]) {
    for (k, c) in coef.iter().enumerate() {
        t[(offset, offset + k)] = *c;
    }
    for k in 1..coef.len() {
        t[(offset + k, offset + k - 1)] = 1.0;
    }
}

/// State `(x_t … x_{t-p+1}, u_{1,t} … u_{1,t-q+1}, …, u_{N,t} … u_{N,t-q+1})`,
/// companion-form transition, shocks ordered `(η, ε_1, …, ε_N)`.
/// With q = 0 the idiosyncratic terms become measurement noise.
pub fn build_state_space(spec: &DfmSpec) -> Result<StateSpace> {
    spec.validate()?;
    let (n, p, q) = (spec.n_series(), spec.p(), spec.q());
    let m = spec.state_dim();
    let mut transition = DMatrix::zeros(m, m);
    companion_block(&mut transition, 0, &spec.phi);
    for (i, d) in spec.d.iter().enumerate() {
        companion_block(&mut transition, p + i * q, d);
    }

    let n_shocks = if q > 0 { 1 + n } else { 1 };
    let mut shock_loading = DMatrix::zeros(m, n_shocks);
    let mut shock_var = DVector::zeros(n_shocks);
    shock_loading[(0, 0)] = 1.0;
    shock_var[0] = spec.var_eta;
    let mut loading = DMatrix::zeros(n, m);
    let mut obs_var = DVector::zeros(n);
    for i in 0..n {
        loading[(i, 0)] = spec.gamma[i];
        if q > 0 {
            loading[(i, p + i * q)] = 1.0;
            shock_loading[(p + i * q, 1 + i)] = 1.0;
            shock_var[1 + i] = spec.var_eps[i];
        } else {
            obs_var[i] = spec.var_eps[i];
        }
    }
    Ok(StateSpace {
        transition,
        shock_loading,
        shock_var,
        loading,
        intercept: DVector::from_column_slice(&spec.beta0),
        obs_var,
        initial_cov: None,
    })
}

/// Simulated panel: `y[i][t]` and the latent factor path.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub y: Vec<Vec<f64>>,
    pub factor: Vec<f64>,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draw `t_len` observations directly from the three model equations, starting from
/// zero state and discarding [`BURN_IN`] steps. Each step draws η then ε_1 … ε_N.
pub fn simulate_dfm(spec: &DfmSpec, t_len: usize, seed: u64) -> Result<Simulation> {
    spec.validate()?;
    let (n, p, q) = (spec.n_series(), spec.p(), spec.q());
    if t_len < p + q + 1 {
        return Err(Error::invalid(format!("series length {t_len} is shorter than p + q + 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = BURN_IN + t_len;
    let mut x = vec![0.0; total];
    let mut u = vec![vec![0.0; total]; n];
    let mut y = vec![Vec::with_capacity(t_len); n];
    let lag = |series: &[f64], t: usize, k: usize| if t >= k { series[t - k] } else { 0.0 };
    for t in 0..total {
        let eta = spec.var_eta.sqrt() * standard_normal(&mut rng);
        x[t] = spec.phi.iter().enumerate().map(|(k, c)| c * lag(&x, t, k + 1)).sum::<f64>() + eta;
        for i in 0..n {
            let eps = spec.var_eps[i].sqrt() * standard_normal(&mut rng);
            u[i][t] = spec.d[i].iter().enumerate().map(|(k, c)| c * lag(&u[i], t, k + 1)).sum::<f64>() + eps;
            if t >= BURN_IN {
                y[i].push(spec.beta0[i] + spec.gamma[i] * x[t] + u[i][t]);
            }
        }
    }
    Ok(Simulation {
        y,
        factor: x[BURN_IN..].to_vec(),
    })
}

/// Simulate from a state-space form with the same burn-in and draw order as
/// [`simulate_dfm`]: state shocks first, then measurement noise (skipped when all
/// measurement variances are zero). The reported factor is state component 0.
pub fn simulate_state_space(ss: &StateSpace, t_len: usize, seed: u64) -> Result<Simulation> {
    ss.check()?;
    let (m, n, r) = (ss.state_dim(), ss.n_obs(), ss.shock_var.len());
    let noisy_obs = ss.obs_var.iter().any(|v| *v > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = DVector::zeros(m);
    let mut y = vec![Vec::with_capacity(t_len); n];
    let mut factor = Vec::with_capacity(t_len);
    let shock_sd = ss.shock_var.map(f64::sqrt);
    for t in 0..BURN_IN + t_len {
        let e = DVector::from_fn(r, |k, _| shock_sd[k] * standard_normal(&mut rng));
        state = &ss.transition * &state + &ss.shock_loading * e;
        let obs = &ss.intercept + &ss.loading * &state;
        for i in 0..n {
            let v = if noisy_obs { ss.obs_var[i].sqrt() * standard_normal(&mut rng) } else { 0.0 };
            if t >= BURN_IN {
                y[i].push(obs[i] + v);
            }
        }
        if t >= BURN_IN {
            factor.push(state[0]);
        }
    }
    Ok(Simulation { y, factor })
}

/// Observation panel `y[i][t]`; `None` marks a missing cell.
pub type Panel = Vec<Vec<Option<f64>>>;

pub fn complete_panel(y: &[Vec<f64>]) -> Panel {
    y.iter().map(|row| row.iter().map(|v| Some(*v)).collect()).collect()
}

fn panel_len(ss: &StateSpace, y: &[Vec<Option<f64>>]) -> Result<usize> {
    if y.len() != ss.n_obs() {
        return Err(Error::DimensionMismatch {
            expected: ss.n_obs(),
            got: y.len(),
        });
    }
    let t_len = y.first().map_or(0, Vec::len);
    if y.iter().any(|row| row.len() != t_len) {
        return Err(Error::invalid("all series must have the same length"));
    }
    if y.iter().flatten().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("observations must be finite (use blanks for missing values)"));
    }
    Ok(t_len)
}

/// Transition stored by rows as `(column, value)` pairs; the companion form is very sparse.
struct SparseRows {
    m: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    fn new(a: &DMatrix<f64>) -> Self {
        let rows = (0..a.nrows())
            .map(|i| (0..a.ncols()).filter(|&j| a[(i, j)] != 0.0).map(|j| (j, a[(i, j)])).collect())
            .collect();
        Self { m: a.nrows(), rows }
    }

    fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (i, row) in self.rows.iter().enumerate() {
            out[i] = row.iter().map(|(j, v)| v * x[*j]).sum();
        }
    }

    /// `out = T P Tᵀ` for row-major `p`; `tmp` is scratch space.
    fn sandwich(&self, p: &[f64], tmp: &mut [f64], out: &mut [f64]) {
        let m = self.m;
        for (i, row) in self.rows.iter().enumerate() {
            let dst = &mut tmp[i * m..(i + 1) * m];
            dst.fill(0.0);
            for &(k, v) in row {
                for (d, s) in dst.iter_mut().zip(&p[k * m..(k + 1) * m]) {
                    *d += v * s;
                }
            }
        }
        for i in 0..m {
            for (j, row) in self.rows.iter().enumerate() {
                out[i * m + j] = row.iter().map(|(k, v)| v * tmp[i * m + k]).sum();
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct KalmanOutput {
    pub loglik: f64,
    pub predicted_means: Vec<DVector<f64>>,
    pub predicted_covs: Vec<DMatrix<f64>>,
    pub filtered_means: Vec<DVector<f64>>,
    pub filtered_covs: Vec<DMatrix<f64>>,
    pub smoothed_means: Vec<DVector<f64>>,
    pub smoothed_covs: Vec<DMatrix<f64>>,
}

struct FilterTrace {
    predicted_means: Vec<DVector<f64>>,
    predicted_covs: Vec<DMatrix<f64>>,
    filtered_means: Vec<DVector<f64>>,
    filtered_covs: Vec<DMatrix<f64>>,
}

/// Kalman filter processing the observed components of each `y_t` one at a time
/// (valid because measurement noise is diagonal). Missing cells are skipped.
fn run_filter(ss: &StateSpace, y: &[Vec<Option<f64>>], mut trace: Option<&mut FilterTrace>) -> Result<f64> {
    ss.check()?;
    let t_len = panel_len(ss, y)?;
    let m = ss.state_dim();
    let transition = SparseRows::new(&ss.transition);
    let q = ss.state_cov();
    let loadings: Vec<Vec<(usize, f64)>> = (0..ss.n_obs())
        .map(|i| (0..m).filter(|&j| ss.loading[(i, j)] != 0.0).map(|j| (j, ss.loading[(i, j)])).collect())
        .collect();

    let mut a = vec![0.0; m];
    let p0 = ss.initial_covariance()?;
    let mut p: Vec<f64> = (0..m * m).map(|k| p0[(k / m, k % m)]).collect();
    let mut pz = vec![0.0; m];
    let mut tmp = vec![0.0; m * m];
    let mut next = vec![0.0; m * m];
    let mut a_next = vec![0.0; m];
    let mut loglik = 0.0;

    let as_matrix = |p: &[f64]| DMatrix::from_row_slice(m, m, p);
    let q: Vec<f64> = (0..m * m).map(|k| q[(k / m, k % m)]).collect();
    // Once the covariance recursion has converged under a repeating observation
    // pattern, the gains are reused and P is left untouched (likelihood only).
    let mut gains: Vec<(usize, Vec<f64>, f64)> = Vec::new();
    let mut last_pattern: Vec<bool> = Vec::new();
    let mut steady = false;
    let mut p_prev = vec![0.0; m * m];

    for t in 0..t_len {
        if let Some(tr) = trace.as_deref_mut() {
            tr.predicted_means.push(DVector::from_column_slice(&a));
            tr.predicted_covs.push(as_matrix(&p));
        }
        let pattern: Vec<bool> = y.iter().map(|row| row[t].is_some()).collect();
        if steady && pattern == last_pattern {
            for (i, gain, f) in &gains {
                let z = &loadings[*i];
                let obs = y[*i][t].expect("pattern checked");
                let v = obs - ss.intercept[*i] - z.iter().map(|(j, w)| w * a[*j]).sum::<f64>();
                for (ar, g) in a.iter_mut().zip(gain) {
                    *ar += g * v;
                }
                loglik -= 0.5 * (LN_2PI + f.ln() + v * v / f);
            }
            transition.mul_vec(&a, &mut a_next);
            std::mem::swap(&mut a, &mut a_next);
            continue;
        }
        steady = false;
        gains.clear();
        p_prev.copy_from_slice(&p);
        for (i, z) in loadings.iter().enumerate() {
            let Some(obs) = y[i][t] else { continue };
            for (r, out) in pz.iter_mut().enumerate() {
                *out = z.iter().map(|(j, v)| p[r * m + j] * v).sum();
            }
            let f = z.iter().map(|(j, v)| v * pz[*j]).sum::<f64>() + ss.obs_var[i];
            let v = obs - ss.intercept[i] - z.iter().map(|(j, w)| w * a[*j]).sum::<f64>();
            if !(f > 0.0) || !f.is_finite() {
                return Err(Error::Numerical(format!(
                    "innovation variance {f} for series {i} at t={t} is not positive"
                )));
            }
            let gain: Vec<f64> = pz.iter().map(|x| x / f).collect();
            for (ar, g) in a.iter_mut().zip(&gain) {
                *ar += g * v;
            }
            for (r, g) in gain.iter().enumerate() {
                for (pc, zc) in p[r * m..(r + 1) * m].iter_mut().zip(&pz) {
                    *pc -= g * zc;
                }
            }
            loglik -= 0.5 * (LN_2PI + f.ln() + v * v / f);
            gains.push((i, gain, f));
        }
        for r in 0..m {
            for c in r + 1..m {
                let avg = 0.5 * (p[r * m + c] + p[c * m + r]);
                p[r * m + c] = avg;
                p[c * m + r] = avg;
            }
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.filtered_means.push(DVector::from_column_slice(&a));
            tr.filtered_covs.push(as_matrix(&p));
        }
        transition.mul_vec(&a, &mut a_next);
        std::mem::swap(&mut a, &mut a_next);
        transition.sandwich(&p, &mut tmp, &mut next);
        let mut change = 0.0f64;
        let mut scale = 0.0f64;
        for (k, dst) in next.iter().enumerate() {
            let updated = dst + q[k];
            change = change.max((updated - p_prev[k]).abs());
            scale = scale.max(updated.abs());
            p[k] = updated;
        }
        if trace.is_none() && change <= 1e-14 * scale.max(1e-300) && pattern == last_pattern {
            steady = true;
        }
        last_pattern = pattern;
    }
    if !loglik.is_finite() {
        return Err(Error::Numerical("log-likelihood is not finite".into()));
    }
    Ok(loglik)
}

/// Exact Gaussian log-likelihood of `y` under `ss`.
pub fn log_likelihood(ss: &StateSpace, y: &[Vec<Option<f64>>]) -> Result<f64> {
    run_filter(ss, y, None)
}

/// Pseudo-inverse of a symmetric PSD matrix. Predicted covariances are singular
/// when some series are measured without noise.
fn pinv_psd(p: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = p.clone().symmetric_eigen();
    let cutoff = 1e-10 * eig.eigenvalues.amax().max(1e-300);
    let inv = eig.eigenvalues.map(|l| if l > cutoff { 1.0 / l } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

/// Kalman filter plus Rauch–Tung–Striebel smoother.
pub fn kalman_smooth(ss: &StateSpace, y: &[Vec<Option<f64>>]) -> Result<KalmanOutput> {
    let mut trace = FilterTrace {
        predicted_means: Vec::new(),
        predicted_covs: Vec::new(),
        filtered_means: Vec::new(),
        filtered_covs: Vec::new(),
    };
    let loglik = run_filter(ss, y, Some(&mut trace))?;
    let t_len = trace.filtered_means.len();
    let mut smoothed_means = trace.filtered_means.clone();
    let mut smoothed_covs = trace.filtered_covs.clone();
    let tt = ss.transition.transpose();
    for t in (0..t_len.saturating_sub(1)).rev() {
        let gain = &trace.filtered_covs[t] * &tt * pinv_psd(&trace.predicted_covs[t + 1]);
        smoothed_means[t] =
            &trace.filtered_means[t] + &gain * (&smoothed_means[t + 1] - &trace.predicted_means[t + 1]);
        let cov = &trace.filtered_covs[t]
            + &gain * (&smoothed_covs[t + 1] - &trace.predicted_covs[t + 1]) * gain.transpose();
        smoothed_covs[t] = symmetrize(cov);
    }
    Ok(KalmanOutput {
        loglik,
        predicted_means: trace.predicted_means,
        predicted_covs: trace.predicted_covs,
        filtered_means: trace.filtered_means,
        filtered_covs: trace.filtered_covs,
        smoothed_means,
        smoothed_covs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Converged when the largest gradient component (per observation) falls below this.
    pub grad_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            grad_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DfmFit {
    pub spec: DfmSpec,
    pub loglik: f64,
    pub filtered_factor: Vec<f64>,
    pub smoothed_factor: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Parameter packing in standardized units:
/// `[β (N), γ (N), atanh κ_φ (p), atanh κ_d (N·q), ln σ²_ε (N)]`, σ²_η fixed to 1.
struct Packing {
    n: usize,
    p: usize,
    q: usize,
}

const MAX_ATANH: f64 = 8.0;

impl Packing {
    fn len(&self) -> usize {
        3 * self.n + self.p + self.n * self.q
    }

    fn unpack(&self, theta: &[f64]) -> DfmSpec {
        let (n, p, q) = (self.n, self.p, self.q);
        let ar = |z: &[f64]| pacf_to_ar(&z.iter().map(|v| v.clamp(-MAX_ATANH, MAX_ATANH).tanh()).collect::<Vec<_>>());
        let d_start = 2 * n + p;
        let v_start = d_start + n * q;
        DfmSpec {
            beta0: theta[..n].to_vec(),
            gamma: theta[n..2 * n].to_vec(),
            phi: ar(&theta[2 * n..d_start]),
            d: (0..n).map(|i| ar(&theta[d_start + i * q..d_start + (i + 1) * q])).collect(),
            var_eta: 1.0,
            var_eps: theta[v_start..].iter().map(|v| v.clamp(-30.0, 30.0).exp()).collect(),
        }
    }

    fn pack(&self, spec: &DfmSpec) -> Vec<f64> {
        let z = |coef: &[f64]| -> Vec<f64> {
            ar_to_pacf(coef)
                .expect("stationary start")
                .into_iter()
                .map(|k| k.clamp(-0.95, 0.95).atanh())
                .collect()
        };
        let mut theta = Vec::with_capacity(self.len());
        theta.extend(&spec.beta0);
        theta.extend(&spec.gamma);
        theta.extend(z(&spec.phi));
        for d in &spec.d {
            theta.extend(z(d));
        }
        theta.extend(spec.var_eps.iter().map(|v| v.max(1e-6).ln()));
        theta
    }
}

fn autocov(x: &[f64], lags: usize) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (0..=lags)
        .map(|k| x.iter().skip(k).zip(x).map(|(a, b)| (a - mean) * (b - mean)).sum::<f64>() / n)
        .collect()
}

/// Yule–Walker AR(order) fit via Durbin–Levinson, with partial autocorrelations
/// clamped to ±0.9. Returns coefficients and innovation variance.
fn yule_walker(x: &[f64], order: usize) -> (Vec<f64>, f64) {
    let r = autocov(x, order);
    if order == 0 || r[0] <= 0.0 {
        return (vec![0.0; order], r[0].max(1e-6));
    }
    let mut a: Vec<f64> = Vec::new();
    let mut v = r[0];
    let mut pacf = Vec::with_capacity(order);
    for k in 0..order {
        let num = r[k + 1] - a.iter().enumerate().map(|(j, c)| c * r[k - j]).sum::<f64>();
        let kappa = (num / v).clamp(-0.9, 0.9);
        pacf.push(kappa);
        a = pacf_to_ar(&pacf);
        v *= 1.0 - kappa * kappa;
    }
    (a, v.max(1e-6))
}

fn start_values(y: &[Vec<Option<f64>>], p: usize, q: usize) -> DfmSpec {
    let n = y.len();
    let t_len = y[0].len();
    let filled: Vec<Vec<f64>> = y.iter().map(|row| row.iter().map(|v| v.unwrap_or(0.0)).collect()).collect();
    let data = DMatrix::from_fn(t_len, n, |t, i| filled[i][t]);
    let cov = data.transpose() * &data / t_len as f64;
    let eig = cov.symmetric_eigen();
    let top = eig.eigenvalues.imax();
    let mut v: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
    if v.iter().sum::<f64>() < 0.0 {
        v.iter_mut().for_each(|c| *c = -*c);
    }
    let proxy: Vec<f64> = (0..t_len).map(|t| (0..n).map(|i| v[i] * filled[i][t]).sum()).collect();
    let (phi, innov) = yule_walker(&proxy, p);
    let scale = innov.sqrt();
    let var_f = autocov(&proxy, 0)[0].max(1e-12);
    let mut gamma = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    let mut var_eps = Vec::with_capacity(n);
    for row in &filled {
        let g = row.iter().zip(&proxy).map(|(a, b)| a * b).sum::<f64>() / t_len as f64 / var_f;
        let resid: Vec<f64> = row.iter().zip(&proxy).map(|(a, b)| a - g * b).collect();
        let (coef, ve) = yule_walker(&resid, q);
        gamma.push(g * scale);
        d.push(coef);
        var_eps.push(ve.max(1e-3));
    }
    DfmSpec {
        beta0: vec![0.0; n],
        gamma,
        phi,
        d,
        var_eta: 1.0,
        var_eps,
    }
}

struct Objective<'a> {
    packing: Packing,
    y: &'a [Vec<Option<f64>>],
}

impl Objective<'_> {
    fn value(&self, theta: &[f64]) -> f64 {
        let spec = self.packing.unpack(theta);
        match build_state_space(&spec).and_then(|ss| log_likelihood(&ss, self.y)) {
            Ok(ll) => -ll,
            Err(_) => f64::INFINITY,
        }
    }

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut x = theta.to_vec();
        (0..theta.len())
            .map(|k| {
                let h = 1e-5 * theta[k].abs().max(1.0);
                x[k] = theta[k] + h;
                let up = self.value(&x);
                x[k] = theta[k] - h;
                let down = self.value(&x);
                x[k] = theta[k];
                (up - down) / (2.0 * h)
            })
            .collect()
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// BFGS with Armijo backtracking. Returns `(θ, iterations, final gradient ∞-norm)`.
fn bfgs(obj: &Objective<'_>, theta0: Vec<f64>, grad_tol: f64, max_iter: usize) -> Result<(Vec<f64>, usize, f64)> {
    let k = theta0.len();
    let mut x = theta0;
    let mut f = obj.value(&x);
    if !f.is_finite() {
        return Err(Error::Numerical("likelihood is not finite at the starting values".into()));
    }
    let mut g = obj.gradient(&x);
    let mut h = DMatrix::<f64>::identity(k, k);
    let mut fresh = true;
    let mut stalled = 0;
    for iter in 0..max_iter {
        let gnorm = inf_norm(&g);
        if gnorm < grad_tol {
            return Ok((x, iter, gnorm));
        }
        let gv = DVector::from_column_slice(&g);
        let mut dir = -(&h * &gv);
        if dir.dot(&gv) >= 0.0 {
            h = DMatrix::identity(k, k);
            fresh = true;
            dir = -gv.clone();
        }
        let slope = dir.dot(&gv);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + step * d).collect();
            let fc = obj.value(&cand);
            if fc.is_finite() && fc <= f + 1e-4 * step * slope {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            if !fresh {
                h = DMatrix::identity(k, k);
                fresh = true;
                continue;
            }
            // No descent possible along the steepest direction: numerically at the optimum.
            if gnorm < grad_tol * 1e4 {
                return Ok((x, iter, gnorm));
            }
            return Err(Error::NonConvergence {
                solver: "factor model BFGS",
                iterations: iter,
                gap: gnorm,
            });
        };
        let g_new = obj.gradient(&x_new);
        let s = DVector::from_iterator(k, x_new.iter().zip(&x).map(|(a, b)| a - b));
        let yv = DVector::from_iterator(k, g_new.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            if fresh {
                h = DMatrix::identity(k, k) * (sy / yv.dot(&yv));
            }
            let rho = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            h += (&s * s.transpose()) * ((1.0 + rho * yhy) * rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            fresh = false;
        }
        let improvement = f - f_new;
        stalled = if improvement <= 1e-14 * f.abs().max(1.0) { stalled + 1 } else { 0 };
        x = x_new;
        f = f_new;
        g = g_new;
        if stalled >= 5 && inf_norm(&g) < grad_tol * 1e4 {
            return Ok((x, iter + 1, inf_norm(&g)));
        }
    }
    Err(Error::NonConvergence {
        solver: "factor model BFGS",
        iterations: max_iter,
        gap: inf_norm(&g),
    })
}

/// Fit the single-factor model by maximum likelihood.
///
/// Each series is standardized first; the factor innovation variance is fixed to 1
/// and the factor sign is chosen so that `Σ γ_i > 0`. The returned spec is in the
/// original units of `y`.
pub fn fit_dfm(y: &[Vec<Option<f64>>], p: usize, q: usize, options: &FitOptions) -> Result<DfmFit> {
    let n = y.len();
    if n < 2 {
        return Err(Error::invalid("factor model fitting needs at least two series"));
    }
    if p == 0 {
        return Err(Error::invalid("factor AR order p must be at least 1"));
    }
    let t_len = y[0].len();
    if y.iter().any(|row| row.len() != t_len) {
        return Err(Error::invalid("all series must have the same length"));
    }
    if t_len < 10 * (p + q) {
        return Err(Error::invalid(format!("need at least {} observations, got {t_len}", 10 * (p + q))));
    }
    if y.iter().flatten().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("observations must be finite"));
    }

    let mut means = Vec::with_capacity(n);
    let mut sds = Vec::with_capacity(n);
    for (i, row) in y.iter().enumerate() {
        let obs: Vec<f64> = row.iter().flatten().copied().collect();
        if obs.len() < 2 {
            return Err(Error::invalid(format!("series {i} has fewer than two observations")));
        }
        let mean = obs.iter().sum::<f64>() / obs.len() as f64;
        let var = obs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / obs.len() as f64;
        if !(var > 0.0) {
            return Err(Error::invalid(format!("series {i} is constant")));
        }
        means.push(mean);
        sds.push(var.sqrt());
    }
    let standardized: Panel = y
        .iter()
        .enumerate()
        .map(|(i, row)| row.iter().map(|v| v.map(|x| (x - means[i]) / sds[i])).collect())
        .collect();

    let packing = Packing { n, p, q };
    let theta0 = packing.pack(&start_values(&standardized, p, q));
    let objective = Objective {
        packing,
        y: &standardized,
    };
    let grad_tol = options.grad_tol * (n * t_len) as f64;
    let (theta, iterations, grad_norm) = bfgs(&objective, theta0, grad_tol, options.max_iter)?;

    let mut fitted = objective.packing.unpack(&theta);
    if fitted.gamma.iter().sum::<f64>() < 0.0 {
        fitted.gamma.iter_mut().for_each(|g| *g = -*g);
    }
    let spec = DfmSpec {
        beta0: (0..n).map(|i| means[i] + sds[i] * fitted.beta0[i]).collect(),
        gamma: (0..n).map(|i| sds[i] * fitted.gamma[i]).collect(),
        phi: fitted.phi,
        d: fitted.d,
        var_eta: 1.0,
        var_eps: (0..n).map(|i| sds[i] * sds[i] * fitted.var_eps[i]).collect(),
    };
    let out = kalman_smooth(&build_state_space(&spec)?, y)?;
    Ok(DfmFit {
        loglik: out.loglik,
        filtered_factor: out.filtered_means.iter().map(|a| a[0]).collect(),
        smoothed_factor: out.smoothed_means.iter().map(|a| a[0]).collect(),
        spec,
        iterations,
        grad_norm,
    })
}

/// Monthly input panel read from `month,series1,…,seriesN`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonthlyPanel {
    pub months: Vec<Month>,
    pub names: Vec<String>,
    pub y: Panel,
}

pub fn read_panel_csv<R: Read>(reader: R) -> Result<MonthlyPanel> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 || header[0].trim() != "month" {
        return Err(Error::Record {
            line: 1,
            message: "expected header month,series1,...".into(),
        });
    }
    let names: Vec<String> = header.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let mut months = Vec::new();
    let mut y: Panel = vec![Vec::new(); names.len()];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let month: Month = rec[0].parse().map_err(|e: Error| Error::Record {
            line,
            message: e.to_string(),
        })?;
        for (k, col) in y.iter_mut().enumerate() {
            let raw = rec.get(k + 1).unwrap_or("").trim();
            col.push(if raw.is_empty() {
                None
            } else {
                Some(raw.parse().map_err(|_| Error::Record {
                    line,
                    message: format!("bad value {raw:?}"),
                })?)
            });
        }
        months.push(month);
    }
    if months.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("panel months must be strictly increasing"));
    }
    Ok(MonthlyPanel { months, names, y })
}

pub fn write_factor_csv<W: Write>(writer: W, months: &[Month], fit: &DfmFit) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["month", "filtered", "smoothed"])?;
    for ((m, f), s) in months.iter().zip(&fit.filtered_factor).zip(&fit.smoothed_factor) {
        wtr.write_record([m.to_string(), format!("{f}"), format!("{s}")])?;
    }
    wtr.flush().map_err(|e| Error::io("factor csv", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    pub(crate) fn example_spec() -> DfmSpec {
        DfmSpec {
            beta0: vec![1.0, -0.5, 2.0, 0.0],
            gamma: vec![1.0, 0.8, 1.2, 0.6],
            phi: vec![0.6, 0.2],
            d: vec![vec![0.3, 0.1], vec![-0.2, 0.1], vec![0.5, -0.2], vec![0.1, 0.0]],
            var_eta: 1.0,
            var_eps: vec![0.5, 0.4, 0.6, 0.3],
        }
    }

    #[test]
    fn pacf_round_trip_and_stationarity() {
        let phi = [0.6, 0.2];
        let pacf = ar_to_pacf(&phi).unwrap();
        let back = pacf_to_ar(&pacf);
        for (a, b) in phi.iter().zip(&back) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
        assert!(ar_to_pacf(&[1.2]).is_none());
        assert!(ar_to_pacf(&[0.5, 0.6]).is_none());
        assert_eq!(ar_to_pacf(&[]).unwrap(), Vec::<f64>::new());
    }

    #[test]
    fn state_dimension() {
        let spec = DfmSpec {
            beta0: vec![0.0],
            gamma: vec![1.0],
            phi: vec![0.5],
            d: vec![vec![0.2]],
            var_eta: 1.0,
            var_eps: vec![1.0],
        };
        let ss = build_state_space(&spec).unwrap();
        assert_eq!(ss.state_dim(), 2);
        assert_eq!(build_state_space(&example_spec()).unwrap().state_dim(), 10);
    }

    #[test]
    fn stationary_transition_has_roots_inside_unit_circle() {
        let ss = build_state_space(&example_spec()).unwrap();
        let max_modulus = ss
            .transition
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max);
        assert!(max_modulus < 1.0, "spectral radius {max_modulus}");
    }

    #[test]
    fn non_stationary_spec_rejected() {
        let mut spec = example_spec();
        spec.phi = vec![0.7, 0.4];
        assert!(simulate_dfm(&spec, 50, 1).is_err());
        assert!(build_state_space(&spec).is_err());
    }

    #[test]
    fn noiseless_simulation_is_the_intercept() {
        let mut spec = example_spec();
        spec.var_eta = 0.0;
        spec.var_eps = vec![0.0; 4];
        let sim = simulate_dfm(&spec, 30, 3).unwrap();
        for (row, b) in sim.y.iter().zip(&spec.beta0) {
            assert!(row.iter().all(|v| v == b));
        }
    }

    #[test]
    fn doubling_loadings_doubles_deviations() {
        let mut spec = example_spec();
        spec.var_eps = vec![0.0; 4];
        let base = simulate_dfm(&spec, 40, 11).unwrap();
        spec.gamma.iter_mut().for_each(|g| *g *= 2.0);
        let doubled = simulate_dfm(&spec, 40, 11).unwrap();
        for i in 0..4 {
            for t in 0..40 {
                let a = base.y[i][t] - spec.beta0[i];
                let b = doubled.y[i][t] - spec.beta0[i];
                assert_abs_diff_eq!(b, 2.0 * a, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn state_space_simulation_matches_direct() {
        let spec = example_spec();
        let a = simulate_dfm(&spec, 60, 5).unwrap();
        let b = simulate_state_space(&build_state_space(&spec).unwrap(), 60, 5).unwrap();
        for (ra, rb) in a.y.iter().zip(&b.y) {
            for (x, y) in ra.iter().zip(rb) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-10);
            }
        }
        for (x, y) in a.factor.iter().zip(&b.factor) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }

        let mut white = example_spec();
        white.d = vec![vec![]; 4];
        let a = simulate_dfm(&white, 30, 2).unwrap();
        let b = simulate_state_space(&build_state_space(&white).unwrap(), 30, 2).unwrap();
        assert_abs_diff_eq!(a.y[2][17], b.y[2][17], epsilon = 1e-10);
    }

    #[test]
    fn exact_measurement_filter_tracks_observations() {
        let ss = StateSpace {
            transition: DMatrix::from_element(1, 1, 1.0),
            shock_loading: DMatrix::from_element(1, 1, 1.0),
            shock_var: DVector::from_element(1, 1.0),
            loading: DMatrix::from_element(1, 1, 1.0),
            intercept: DVector::zeros(1),
            obs_var: DVector::zeros(1),
            initial_cov: Some(DMatrix::from_element(1, 1, 10.0)),
        };
        let obs = [0.3, -1.2, 2.5, 2.4, 0.0];
        let y = vec![obs.iter().map(|v| Some(*v)).collect::<Vec<_>>()];
        let out = kalman_smooth(&ss, &y).unwrap();
        for (a, o) in out.filtered_means.iter().zip(obs) {
            assert_abs_diff_eq!(a[0], o, epsilon = 1e-12);
        }
        assert!(matches!(ss.stationary_cov(), Err(Error::Numerical(_))));
    }

    #[test]
    fn location_shift_leaves_likelihood_unchanged() {
        let spec = example_spec();
        let sim = simulate_dfm(&spec, 25, 9).unwrap();
        let ll = log_likelihood(&build_state_space(&spec).unwrap(), &complete_panel(&sim.y)).unwrap();
        let mut shifted = spec.clone();
        shifted.beta0[1] *= 2.0;
        let delta = shifted.beta0[1] - spec.beta0[1];
        let mut y2 = sim.y.clone();
        y2[1].iter_mut().for_each(|v| *v += delta);
        let ll2 = log_likelihood(&build_state_space(&shifted).unwrap(), &complete_panel(&y2)).unwrap();
        assert_abs_diff_eq!(ll, ll2, epsilon = 1e-9);
    }

    #[test]
    fn steady_state_shortcut_matches_exact_recursion() {
        let spec = example_spec();
        let sim = simulate_dfm(&spec, 200, 13).unwrap();
        let mut y = complete_panel(&sim.y);
        y[1][150] = None;
        let ss = build_state_space(&spec).unwrap();
        let fast = log_likelihood(&ss, &y).unwrap();
        let exact = kalman_smooth(&ss, &y).unwrap().loglik;
        assert_abs_diff_eq!(fast, exact, epsilon = 1e-9);
    }

    #[test]
    fn filter_rejects_bad_input() {
        let ss = build_state_space(&example_spec()).unwrap();
        let mut y = complete_panel(&simulate_dfm(&example_spec(), 20, 1).unwrap().y);
        y[0][3] = Some(f64::NAN);
        assert!(log_likelihood(&ss, &y).is_err());
        assert!(log_likelihood(&ss, &y[..2]).is_err());
    }

    #[test]
    fn covariances_stay_psd_and_smoothing_shrinks_variance() {
        let spec = example_spec();
        let sim = simulate_dfm(&spec, 60, 21).unwrap();
        let mut y = complete_panel(&sim.y);
        for t in (5..60).step_by(7) {
            y[t % 4][t] = None;
        }
        y.iter_mut().for_each(|row| row[30] = None);
        let out = kalman_smooth(&build_state_space(&spec).unwrap(), &y).unwrap();
        for (f, s) in out.filtered_covs.iter().zip(&out.smoothed_covs) {
            let min_f = f.clone().symmetric_eigen().eigenvalues.min();
            let min_s = s.clone().symmetric_eigen().eigenvalues.min();
            assert!(min_f >= -1e-8 && min_s >= -1e-8);
            assert_eq!(f, &f.transpose());
            for k in 0..f.nrows() {
                assert!(s[(k, k)] <= f[(k, k)] + 1e-10);
            }
        }
    }

    #[test]
    fn fit_rejects_degenerate_input() {
        let sim = simulate_dfm(&example_spec(), 80, 4).unwrap();
        let y = complete_panel(&sim.y);
        assert!(fit_dfm(&y[..1], 2, 2, &FitOptions::default()).is_err());
        assert!(fit_dfm(&y, 5, 4, &FitOptions::default()).is_err());
        let mut constant = y.clone();
        constant[2] = vec![Some(1.0); 80];
        assert!(fit_dfm(&constant, 2, 2, &FitOptions::default()).is_err());
    }

    #[test]
    fn panel_csv_with_blanks() {
        let text = "month,a,b\n2020-01,1.5,\n2020-02,2,3\n";
        let panel = read_panel_csv(text.as_bytes()).unwrap();
        assert_eq!(panel.names, ["a", "b"]);
        assert_eq!(panel.y[1], [None, Some(3.0)]);
        assert!(read_panel_csv("month,a\n2020-02,1\n2020-01,2\n".as_bytes()).is_err());
        assert!(read_panel_csv("date,a\n".as_bytes()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn pacf_maps_are_inverse(k in proptest::collection::vec(-0.99f64..0.99, 0..5)) {
            let ar = pacf_to_ar(&k);
            let back = ar_to_pacf(&ar).unwrap();
            for (a, b) in k.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
