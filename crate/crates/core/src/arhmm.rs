//! Autoregressive hidden Markov model of the on-slot amplitude signal.
//!
//! `y_{t+1} = mu(X_t) + sum_l phi_l(X_t) y_{t+1-l} + sigma(X_t) eps_{t+1}`
//! with `X` a finite Markov chain and `eps` standard normal or unit
//! exponential.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, mat_serde, Mat};
use crate::map::draw;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Residual {
    Normal,
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArHmm {
    pub n_states: usize,
    #[serde(with = "mat_serde")]
    pub transition: Mat,
    pub p: usize,
    pub mu: Vec<f64>,
    /// `phi[l][i]`: coefficient of lag `l + 1` in state `i`.
    pub phi: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    pub residual: Residual,
    pub pi0: Vec<f64>,
}

const LN_FLOOR: f64 = -690.7755278982137; // ln(1e-300)

impl ArHmm {
    /// Single state, no lags.
    pub fn iid(mu: f64, sigma: f64, residual: Residual) -> Self {
        ArHmm {
            n_states: 1,
            transition: Mat::from_element(1, 1, 1.0),
            p: 0,
            mu: vec![mu],
            phi: Vec::new(),
            sigma: vec![sigma],
            residual,
            pi0: vec![1.0],
        }
    }

    /// Single-state AR(p) with normal residuals.
    pub fn ar(mu: f64, phi: &[f64], sigma: f64) -> Self {
        ArHmm {
            n_states: 1,
            transition: Mat::from_element(1, 1, 1.0),
            p: phi.len(),
            mu: vec![mu],
            phi: phi.iter().map(|x| vec![*x]).collect(),
            sigma: vec![sigma],
            residual: Residual::Normal,
            pi0: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_states;
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if n == 0 || self.transition.shape() != (n, n) {
            return bad("transition must be N x N with N >= 1");
        }
        if self.mu.len() != n || self.sigma.len() != n || self.pi0.len() != n {
            return bad("mu, sigma and pi0 must have N entries");
        }
        if self.phi.len() != self.p || self.phi.iter().any(|r| r.len() != n) {
            return bad("phi must be p x N");
        }
        if self.transition.iter().any(|x| *x < 0.0 || !x.is_finite())
            || linalg::max_row_sum_error(&self.transition) > 1e-10
        {
            return bad("transition must be row-stochastic");
        }
        if self.sigma.iter().any(|s| !(*s >= 0.0)) {
            return bad("sigma must be nonnegative");
        }
        if (self.pi0.iter().sum::<f64>() - 1.0).abs() > 1e-10 || self.pi0.iter().any(|x| *x < 0.0) {
            return bad("pi0 must be a distribution");
        }
        Ok(())
    }

    /// Companion matrix of state `i`.
    pub fn companion(&self, i: usize) -> Mat {
        let p = self.p;
        let mut a = Mat::zeros(p, p);
        for l in 0..p {
            a[(l, 0)] = self.phi[l][i];
            if l + 1 < p {
                a[(l, l + 1)] = 1.0;
            }
        }
        a
    }

    /// Mean of `y` at the state's fixed point, if finite.
    pub fn fixed_point(&self, i: usize) -> Option<f64> {
        let s: f64 = (0..self.p).map(|l| self.phi[l][i]).sum();
        let mean = self.mu[i] + self.sigma[i] * self.residual_mean();
        let v = mean / (1.0 - s);
        v.is_finite().then_some(v)
    }

    pub fn residual_mean(&self) -> f64 {
        match self.residual {
            Residual::Normal => 0.0,
            Residual::Exponential => 1.0,
        }
    }

    /// Number of free parameters.
    pub fn n_params(&self) -> usize {
        let n = self.n_states;
        n * (n - 1) + n * (self.p + 2)
    }

    /// Applies a relabeling `perm[new] = old` of hidden states.
    pub fn permuted(&self, perm: &[usize]) -> ArHmm {
        let n = self.n_states;
        let mut m = self.clone();
        for a in 0..n {
            m.mu[a] = self.mu[perm[a]];
            m.sigma[a] = self.sigma[perm[a]];
            m.pi0[a] = self.pi0[perm[a]];
            for l in 0..self.p {
                m.phi[l][a] = self.phi[l][perm[a]];
            }
            for b in 0..n {
                m.transition[(a, b)] = self.transition[(perm[a], perm[b])];
            }
        }
        m
    }
}

fn log_weight(model: &ArHmm, i: usize, y: f64, lags: &[f64]) -> f64 {
    let mut r = y - model.mu[i];
    for l in 0..model.p {
        r -= model.phi[l][i] * lags[l];
    }
    let s = model.sigma[i];
    if s == 0.0 {
        return if r == 0.0 { 0.0 } else { LN_FLOOR };
    }
    let z = r / s;
    match model.residual {
        Residual::Normal => -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln() - s.ln(),
        Residual::Exponential => {
            if z < 0.0 {
                f64::NEG_INFINITY
            } else {
                -z - s.ln()
            }
        }
    }
}

/// Conditional emission density of `y_t` in each hidden state. `lags[l]` is
/// `y_{t-1-l}`.
pub fn emission_weights(model: &ArHmm, y: f64, lags: &[f64]) -> Result<Vec<f64>> {
    if lags.len() != model.p {
        return Err(Error::InvalidArgument(format!(
            "expected {} lags, got {}",
            model.p,
            lags.len()
        )));
    }
    Ok((0..model.n_states)
        .map(|i| {
            let lw = log_weight(model, i, y, lags);
            if model.sigma[i] == 0.0 {
                if lw == 0.0 {
                    1.0
                } else {
                    1e-300
                }
            } else {
                lw.exp()
            }
        })
        .collect())
}

/// Running sufficient statistics of the online EM in normalized form.
///
/// Every statistic is stored per predicted next state `j`, so that summing
/// over `j` gives its conditional expectation given the data seen so far.
/// `o[i][j]`, `jt[i][l][j]`, `f[i][l][j]`, `h[i][l][r][j]`.
#[derive(Debug, Clone)]
pub struct EmState {
    /// Predictive distribution of the state generating the next observation.
    pub pi: Vec<f64>,
    pub o: Vec<Vec<f64>>,
    pub jt: Vec<Vec<Vec<f64>>>,
    pub f: Vec<Vec<Vec<f64>>>,
    pub h: Vec<Vec<Vec<Vec<f64>>>>,
    /// Most recent observation first.
    pub lag_buffer: Vec<f64>,
    pub steps: usize,
    pub loglik: f64,
    /// Number of M-steps whose variance had to be clamped.
    pub sigma_clamps: usize,
}

impl EmState {
    pub fn new(model: &ArHmm) -> Self {
        let n = model.n_states;
        let q = model.p + 1;
        EmState {
            pi: model.pi0.clone(),
            o: vec![vec![0.0; n]; n],
            jt: vec![vec![vec![0.0; n]; n]; n],
            f: vec![vec![vec![0.0; n]; q]; n],
            h: vec![vec![vec![vec![0.0; n]; q]; q]; n],
            lag_buffer: Vec::new(),
            steps: 0,
            loglik: 0.0,
            sigma_clamps: 0,
        }
    }

    pub fn occupancy(&self, i: usize) -> f64 {
        self.o[i].iter().sum()
    }
}

/// Burn-in length before M-steps start.
pub fn burn_in(n: usize, p: usize) -> usize {
    50usize.max(10 * n * (p + 2))
}

/// One online EM step on observation `y`. Returns the (possibly updated)
/// model. Observations that arrive before `p` lags exist only fill the lag
/// buffer.
pub fn em_step(state: &mut EmState, model: &ArHmm, y: f64) -> Result<ArHmm> {
    let n = model.n_states;
    let p = model.p;
    if state.lag_buffer.len() < p {
        state.lag_buffer.insert(0, y);
        return Ok(model.clone());
    }
    let lags: Vec<f64> = state.lag_buffer[..p].to_vec();
    // E-step with log-space rescaling.
    let lw: Vec<f64> = (0..n)
        .map(|i| {
            let v = log_weight(model, i, y, &lags);
            if v == f64::NEG_INFINITY {
                LN_FLOOR
            } else {
                v
            }
        })
        .collect();
    let mx = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(Error::Underflow { step: state.steps });
    }
    let e: Vec<f64> = lw.iter().map(|v| (v - mx).exp()).collect();
    let c: f64 = (0..n).map(|k| e[k] * state.pi[k]).sum();
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::Underflow { step: state.steps });
    }
    state.loglik += mx + c.ln();
    let b: Vec<f64> = (0..n).map(|k| e[k] * state.pi[k] / c).collect();
    let pm = &model.transition;
    let t = (state.steps + 1) as f64;
    let keep = 1.0 - 1.0 / t;
    let gain = 1.0 / t;
    let scale: Vec<f64> = e.iter().map(|x| x / c).collect();
    let propagate = |old: &mut Vec<f64>| {
        let mut next = vec![0.0; n];
        for k in 0..n {
            let w = scale[k] * old[k];
            if w == 0.0 {
                continue;
            }
            for j in 0..n {
                next[j] += pm[(k, j)] * w;
            }
        }
        for j in 0..n {
            old[j] = keep * next[j];
        }
    };
    let mut ys = Vec::with_capacity(p + 1);
    ys.push(y);
    ys.extend_from_slice(&lags);
    for i in 0..n {
        propagate(&mut state.o[i]);
        for j in 0..n {
            state.o[i][j] += gain * b[i] * pm[(i, j)];
        }
        for l in 0..n {
            propagate(&mut state.jt[i][l]);
            state.jt[i][l][l] += gain * b[i] * pm[(i, l)];
        }
        for l in 0..=p {
            propagate(&mut state.f[i][l]);
            for j in 0..n {
                state.f[i][l][j] += gain * b[i] * pm[(i, j)] * ys[l];
            }
            for r in 0..=p {
                propagate(&mut state.h[i][l][r]);
                for j in 0..n {
                    state.h[i][l][r][j] += gain * b[i] * pm[(i, j)] * ys[l] * ys[r];
                }
            }
        }
    }
    let mut pi: Vec<f64> = (0..n).map(|j| (0..n).map(|k| pm[(k, j)] * b[k]).sum()).collect();
    let s: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|x| *x /= s);
    state.pi = pi;
    state.steps += 1;
    if p > 0 {
        state.lag_buffer.insert(0, y);
        state.lag_buffer.truncate(p);
    }
    if state.steps < burn_in(n, p) {
        return Ok(model.clone());
    }
    Ok(m_step(state, model))
}

fn m_step(state: &mut EmState, model: &ArHmm) -> ArHmm {
    let n = model.n_states;
    let p = model.p;
    let mut next = model.clone();
    let sum = |v: &Vec<f64>| v.iter().sum::<f64>();
    for i in 0..n {
        let o = state.occupancy(i);
        if !(o > 1e-12) {
            continue;
        }
        let mut row: Vec<f64> = (0..n).map(|l| sum(&state.jt[i][l]) / o).collect();
        let rs: f64 = row.iter().sum();
        if rs > 0.0 {
            row.iter_mut().for_each(|x| *x /= rs);
            for l in 0..n {
                next.transition[(i, l)] = row[l];
            }
        }
        let fl: Vec<f64> = (0..=p).map(|l| sum(&state.f[i][l])).collect();
        let hl: Vec<Vec<f64>> = (0..=p)
            .map(|l| (0..=p).map(|r| sum(&state.h[i][l][r])).collect())
            .collect();
        // Weighted normal equations for (intercept, phi_1..phi_p).
        let dim = p + 1;
        let mut a = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        a[(0, 0)] = o;
        rhs[0] = fl[0];
        for l in 1..=p {
            a[(0, l)] = fl[l];
            a[(l, 0)] = fl[l];
            rhs[l] = hl[0][l];
            for r in 1..=p {
                a[(l, r)] = hl[l][r];
            }
        }
        let (intercept, phi) = match a.clone().lu().solve(&rhs) {
            Some(sol) if sol.iter().all(|x| x.is_finite()) => {
                (sol[0], (1..=p).map(|l| sol[l]).collect::<Vec<f64>>())
            }
            _ => {
                let phi: Vec<f64> = (0..p).map(|l| model.phi[l][i]).collect();
                let c = (fl[0] - (0..p).map(|l| phi[l] * fl[l + 1]).sum::<f64>()) / o;
                (c, phi)
            }
        };
        // Residual sum of squares from the moment statistics.
        let mut rss = hl[0][0] + intercept * intercept * o - 2.0 * intercept * fl[0];
        for l in 1..=p {
            rss += -2.0 * phi[l - 1] * hl[0][l] + 2.0 * intercept * phi[l - 1] * fl[l];
            for r in 1..=p {
                rss += phi[l - 1] * phi[r - 1] * hl[l][r];
            }
        }
        let mut var = rss / o;
        if var < 1e-12 {
            var = 1e-12;
            state.sigma_clamps += 1;
        }
        let sd = var.sqrt();
        for l in 0..p {
            next.phi[l][i] = phi[l];
        }
        match model.residual {
            Residual::Normal => {
                next.mu[i] = intercept;
                next.sigma[i] = sd;
            }
            Residual::Exponential => {
                next.mu[i] = intercept - sd;
                next.sigma[i] = sd;
            }
        }
    }
    next
}

/// Convenience wrapper pairing a model with its EM state.
#[derive(Debug, Clone)]
pub struct OnlineEm {
    pub model: ArHmm,
    pub state: EmState,
}

impl OnlineEm {
    pub fn new(init: ArHmm) -> Self {
        let state = EmState::new(&init);
        OnlineEm { model: init, state }
    }

    pub fn step(&mut self, y: f64) -> Result<()> {
        self.model = em_step(&mut self.state, &self.model, y)?;
        Ok(())
    }

    pub fn run(&mut self, ys: &[f64]) -> Result<()> {
        for &y in ys {
            self.step(y)?;
        }
        Ok(())
    }
}

/// Starting point for EM: state means at data quantiles, common scale,
/// sticky transitions, zero AR coefficients.
pub fn initial_model(y: &[f64], n: usize, p: usize, residual: Residual) -> Result<ArHmm> {
    if y.is_empty() || n == 0 {
        return Err(Error::InsufficientData("empty series".into()));
    }
    let mut sorted = y.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let len = sorted.len();
    let mean = y.iter().sum::<f64>() / len as f64;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64).sqrt();
    let mu: Vec<f64> = (0..n)
        .map(|k| sorted[(((k as f64 + 0.5) / n as f64) * len as f64) as usize])
        .collect();
    let scale = (sd / n as f64).max(1e-6 * mean.abs().max(1.0));
    let mut tr = Mat::from_element(n, n, if n > 1 { 0.1 / (n - 1) as f64 } else { 0.0 });
    for i in 0..n {
        tr[(i, i)] = if n > 1 { 0.9 } else { 1.0 };
    }
    let (mu, sigma) = match residual {
        Residual::Normal => (mu, vec![scale; n]),
        Residual::Exponential => (mu.iter().map(|m| m - scale).collect(), vec![scale; n]),
    };
    Ok(ArHmm {
        n_states: n,
        transition: tr,
        p,
        mu,
        phi: vec![vec![0.0; n]; p],
        sigma,
        residual,
        pi0: vec![1.0 / n as f64; n],
    })
}

/// Fits an AR(p)-HMM(N) with one online EM pass over `y`.
pub fn fit_arhmm(y: &[f64], n: usize, p: usize, residual: Residual) -> Result<ArHmm> {
    let need = burn_in(n, p) + p + 1;
    if y.len() < need {
        return Err(Error::InsufficientData(format!(
            "AR({p})-HMM({n}) needs at least {need} observations, got {}",
            y.len()
        )));
    }
    let mut em = OnlineEm::new(initial_model(y, n, p, residual)?);
    em.run(y)?;
    Ok(em.model)
}

/// Log-likelihood of `y[start..]` under a fixed model, conditioning on the
/// `p` observations before `start`.
pub fn loglik(model: &ArHmm, y: &[f64], start: usize) -> Result<f64> {
    let n = model.n_states;
    let p = model.p;
    if start < p {
        return Err(Error::InvalidArgument("start must leave room for the lags".into()));
    }
    let mut pi = model.pi0.clone();
    let mut ll = 0.0;
    let mut lags = vec![0.0; p];
    for t in start..y.len() {
        for l in 0..p {
            lags[l] = y[t - 1 - l];
        }
        let lw: Vec<f64> = (0..n).map(|i| log_weight(model, i, y[t], &lags)).collect();
        let mx = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !mx.is_finite() {
            return Ok(f64::NEG_INFINITY);
        }
        let b: Vec<f64> = (0..n).map(|k| (lw[k] - mx).exp() * pi[k]).collect();
        let c: f64 = b.iter().sum();
        if !(c > 0.0) {
            return Ok(f64::NEG_INFINITY);
        }
        ll += mx + c.ln();
        pi = (0..n)
            .map(|j| (0..n).map(|k| model.transition[(k, j)] * b[k] / c).sum())
            .collect();
    }
    Ok(ll)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Criterion {
    Aic,
    Bic,
}

#[derive(Debug, Clone)]
pub struct OrderChoice {
    pub n: usize,
    pub p: usize,
    pub model: ArHmm,
    pub score: f64,
    /// `(n, p, score)` for every candidate whose fit succeeded.
    pub table: Vec<(usize, usize, f64)>,
}

/// Picks `(N, p)` by information criterion. Ties go to the smaller pair.
pub fn select_order(
    y: &[f64],
    n_candidates: &[usize],
    p_candidates: &[usize],
    criterion: Criterion,
    residual: Residual,
) -> Result<OrderChoice> {
    if n_candidates.is_empty() || p_candidates.is_empty() {
        return Err(Error::InvalidArgument("candidate sets must be non-empty".into()));
    }
    let mut pairs: Vec<(usize, usize)> = n_candidates
        .iter()
        .flat_map(|&n| p_candidates.iter().map(move |&p| (n, p)))
        .collect();
    pairs.sort();
    pairs.dedup();
    let p_max = *p_candidates.iter().max().unwrap();
    let n_obs = y.len().saturating_sub(p_max) as f64;
    let mut best: Option<OrderChoice> = None;
    let mut table = Vec::new();
    let single = pairs.len() == 1;
    for (n, p) in pairs {
        let model = match fit_arhmm(y, n, p, residual) {
            Ok(m) => m,
            Err(e) if single => return Err(e),
            Err(_) => continue,
        };
        let ll = loglik(&model, y, p_max)?;
        if !ll.is_finite() && !single {
            continue;
        }
        let k = model.n_params() as f64;
        let score = match criterion {
            Criterion::Aic => 2.0 * k - 2.0 * ll,
            Criterion::Bic => k * n_obs.ln() - 2.0 * ll,
        };
        table.push((n, p, score));
        if best.as_ref().map(|b| score < b.score).unwrap_or(true) {
            best = Some(OrderChoice {
                n,
                p,
                model,
                score,
                table: Vec::new(),
            });
        }
    }
    let mut best = best.ok_or_else(|| Error::InsufficientData("no candidate could be fitted".into()))?;
    best.table = table;
    Ok(best)
}

/// Sufficient stationarity check: every state's companion matrix has
/// spectral radius below one.
pub fn is_stationary(model: &ArHmm) -> bool {
    if model.p == 0 {
        return true;
    }
    (0..model.n_states).all(|i| linalg::spectral_radius_eig(&model.companion(i)) < 1.0 - 1e-9)
}

/// Draws `n` observations from the model.
pub fn sample_arhmm(model: &ArHmm, n: usize, g: &mut Rng) -> Result<Vec<f64>> {
    if !is_stationary(model) {
        return Err(Error::NonStationary);
    }
    let mut x = draw(&model.pi0, g);
    let init = model.fixed_point(x).unwrap_or(0.0);
    let mut lags = vec![init; model.p];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let y = ar_next(model, x, &lags, g);
        out.push(y);
        if model.p > 0 {
            lags.rotate_right(1);
            lags[0] = y;
        }
        let row: Vec<f64> = (0..model.n_states).map(|j| model.transition[(x, j)]).collect();
        x = draw(&row, g);
    }
    Ok(out)
}

/// One AR draw in state `i`. `lags[l]` is the value `l + 1` steps back.
pub fn ar_next(model: &ArHmm, i: usize, lags: &[f64], g: &mut Rng) -> f64 {
    let mut y = model.mu[i];
    for l in 0..model.p {
        y += model.phi[l][i] * lags[l];
    }
    if model.sigma[i] > 0.0 {
        let eps: f64 = match model.residual {
            Residual::Normal => StandardNormal.sample(g),
            Residual::Exponential => Exp1.sample(g),
        };
        y += model.sigma[i] * eps;
    }
    y
}

/// Uniform draw helper used by generators.
pub fn uniform(g: &mut Rng) -> f64 {
    g.random()
}
