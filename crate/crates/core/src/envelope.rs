//! Asymptotic MGF envelope of the composed model.
//!
//! For a joint chain with transition matrix `T`, the lag weights `v` solve
//! `v_i = sum_j T_ij (b_j + A(i,j) v_j)`. The matrix
//! `Gamma(theta) = [psi_ij(theta)] ∘ T` then gives
//! `E[e^{theta A(s,t)}] ≈ pi R Gamma^{t-s} 1`, and the envelope is
//! `sigma = ln(bound on the transient factor) / theta`,
//! `rho = ln(spectral radius) / theta`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::arhmm::{self, Residual};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::map;
use crate::model::{self, breve_params, DMaparHmm};
use crate::rng;

/// Expected lag weights per joint state, `v[state][k]` for lag `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct VSolution {
    pub v: Vec<Vec<f64>>,
    pub p: usize,
}

impl VSolution {
    /// First component, or one when there are no lags.
    pub fn first(&self, state: usize) -> f64 {
        if self.p == 0 {
            1.0
        } else {
            self.v[state][0]
        }
    }

    pub fn all_ones(n: usize, p: usize) -> Self {
        VSolution {
            v: vec![vec![1.0; p]; n],
            p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaRhoPoint {
    /// 1/bytes.
    pub theta: f64,
    /// Bytes.
    pub sigma: f64,
    /// Bytes per second.
    pub rho: f64,
    pub valid: bool,
    /// Semicolon separated notes on how the point was obtained.
    pub flags: String,
}

impl SigmaRhoPoint {
    pub fn invalid(theta: f64, why: &str) -> Self {
        SigmaRhoPoint {
            theta,
            sigma: f64::INFINITY,
            rho: f64::INFINITY,
            valid: false,
            flags: why.to_string(),
        }
    }
}

/// The `p x p` matrix `A(i, j)` of the lag-weight recursion.
pub fn a_matrix(model: &DMaparHmm, i: usize, j: usize) -> Mat {
    let p = model.p();
    let o = if model.is_on(j) { 1.0 } else { 0.0 };
    let b = breve_params(model, i, j);
    let mut a = Mat::zeros(p, p);
    for k in 0..p {
        a[(k, k)] = 1.0 - o;
        a[(k, 0)] += b.phi[k];
        if k + 1 < p {
            a[(k, k + 1)] = o;
        }
    }
    a
}

/// Solves the block system for `v`.
pub fn solve_v(model: &DMaparHmm) -> Result<VSolution> {
    let s = model.n_states();
    let p = model.p();
    if p == 0 {
        return Ok(VSolution::all_ones(s, 0));
    }
    let dim = s * p;
    let mut ta = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for i in 0..s {
        for j in 0..s {
            let t = model.t[(i, j)];
            if t == 0.0 {
                continue;
            }
            let a = a_matrix(model, i, j);
            for r in 0..p {
                for c in 0..p {
                    ta[(i * p + r, j * p + c)] += t * a[(r, c)];
                }
            }
            if model.is_on(j) {
                rhs[i * p + p - 1] += t;
            }
        }
    }
    let radius = linalg::spectral_radius_eig(&ta);
    if radius >= 1.0 - 1e-9 {
        return Err(Error::Singular(format!(
            "lag recursion has spectral radius {radius}; the AR part is not stationary"
        )));
    }
    let m = DMatrix::<f64>::identity(dim, dim) - &ta;
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("I - T∘A is singular".into()))?;
    // Fixed-point check.
    let resid = (&ta * &sol + &rhs - &sol).amax();
    if !(resid <= 1e-9 * sol.amax().max(1.0)) {
        return Err(Error::Singular(format!("fixed-point residual {resid}")));
    }
    Ok(VSolution {
        v: (0..s).map(|i| (0..p).map(|k| sol[i * p + k]).collect()).collect(),
        p,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum RMethod {
    Identity,
    MonteCarlo { n: usize, seed: u64 },
}

impl Default for RMethod {
    fn default() -> Self {
        RMethod::MonteCarlo { n: 100_000, seed: 0 }
    }
}

/// Stationary `(state, lags)` samples reused across theta.
#[derive(Debug, Clone)]
pub struct RSampler {
    pub samples: Vec<(usize, Vec<f64>)>,
    pub n_states: usize,
}

impl RSampler {
    pub fn new(model: &DMaparHmm, n: usize, seed: u64) -> Result<Self> {
        if !arhmm::is_stationary(&model.arhmm) {
            return Err(Error::NonStationary);
        }
        let mut g = rng::stream(seed, 0x5a);
        let rows = model::sparse_rows(&model.t);
        let hid = model.n_hidden();
        let p = model.p();
        let mut z = map::draw(&model.pi, &mut g);
        let mut lags = vec![model.arhmm.fixed_point(z % hid).unwrap_or(0.0); p];
        let burn = 2_000;
        let mut samples = Vec::with_capacity(n);
        for step in 0..(n + burn) {
            let next = model::draw_sparse(&rows[z], &mut g);
            if model.is_on(next) {
                let y = arhmm::ar_next(&model.arhmm, z % hid, &lags, &mut g);
                if p > 0 {
                    lags.rotate_right(1);
                    lags[0] = y;
                }
            }
            z = next;
            if step >= burn {
                samples.push((z, lags.clone()));
            }
        }
        Ok(RSampler {
            samples,
            n_states: model.n_states(),
        })
    }

    /// Diagonal of `R` with Monte-Carlo standard errors.
    pub fn estimate(&self, theta: f64, v: &VSolution) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = self.n_states;
        let mut sum = vec![0.0; s];
        let mut sq = vec![0.0; s];
        let mut cnt = vec![0usize; s];
        for (z, lags) in &self.samples {
            let mut e = 0.0;
            for k in 0..v.p {
                e += theta * (v.v[*z][k] - 1.0) * lags[k];
            }
            let x = e.exp();
            sum[*z] += x;
            sq[*z] += x * x;
            cnt[*z] += 1;
        }
        let missing: Vec<usize> = (0..s).filter(|&i| cnt[i] == 0).collect();
        if !missing.is_empty() {
            return Err(Error::MissingStates(missing));
        }
        let mut r = vec![0.0; s];
        let mut se = vec![0.0; s];
        for i in 0..s {
            let n = cnt[i] as f64;
            let m = sum[i] / n;
            let var = (sq[i] / n - m * m).max(0.0);
            r[i] = m;
            se[i] = (var / n).sqrt();
        }
        Ok((r, se))
    }
}

/// Diagonal of `R`.
pub fn compute_r(model: &DMaparHmm, theta: f64, v: &VSolution, method: RMethod) -> Result<Vec<f64>> {
    let exact = v.p == 0 || v.v.iter().all(|row| row.iter().all(|x| *x == 1.0));
    match method {
        RMethod::Identity => Ok(vec![1.0; model.n_states()]),
        _ if exact => Ok(vec![1.0; model.n_states()]),
        RMethod::MonteCarlo { n, seed } => Ok(RSampler::new(model, n, seed)?.estimate(theta, v)?.0),
    }
}

/// `Gamma(theta) = [psi_ij(theta)] ∘ T`.
pub fn gamma(model: &DMaparHmm, theta: f64, v: &VSolution) -> Result<Mat> {
    let s = model.n_states();
    let mut g = model.t.clone();
    for i in 0..s {
        for j in 0..s {
            let t = model.t[(i, j)];
            if t == 0.0 || !model.is_on(j) {
                continue;
            }
            let b = breve_params(model, i, j);
            let w = theta * v.first(j);
            let psi = match model.arhmm.residual {
                Residual::Normal => (w * b.mu + 0.5 * w * w * b.sigma * b.sigma).exp(),
                Residual::Exponential => {
                    let x = w * b.sigma;
                    if x >= 1.0 {
                        return Err(Error::DivergentMgf { from: i, to: j, value: x });
                    }
                    (w * b.mu).exp() / (1.0 - x)
                }
            };
            g[(i, j)] = t * psi;
        }
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::Degenerate(format!("Gamma overflows at theta = {theta}")));
    }
    Ok(g)
}

/// Everything needed to evaluate envelope points for one model.
#[derive(Debug, Clone)]
pub struct EnvelopeContext {
    pub model: DMaparHmm,
    pub v: VSolution,
    sampler: Option<RSampler>,
    pub method: RMethod,
}

impl EnvelopeContext {
    pub fn new(model: &DMaparHmm, method: RMethod) -> Result<Self> {
        let v = solve_v(model)?;
        let exact = v.p == 0 || v.v.iter().all(|row| row.iter().all(|x| *x == 1.0));
        let sampler = match method {
            RMethod::MonteCarlo { n, seed } if !exact => Some(RSampler::new(model, n, seed)?),
            _ => None,
        };
        Ok(EnvelopeContext {
            model: model.clone(),
            v,
            sampler,
            method,
        })
    }

    pub fn r(&self, theta: f64) -> Result<Vec<f64>> {
        match &self.sampler {
            Some(s) => Ok(s.estimate(theta, &self.v)?.0),
            None => Ok(vec![1.0; self.model.n_states()]),
        }
    }

    pub fn point(&self, theta: f64) -> Result<SigmaRhoPoint> {
        if !(theta > 0.0) {
            return Err(Error::InvalidArgument("theta must be positive".into()));
        }
        let g = gamma(&self.model, theta, &self.v)?;
        let r = self.r(theta)?;
        let w: Vec<f64> = self.model.pi.iter().zip(&r).map(|(a, b)| a * b).collect();
        sigma_rho_from(&g, &w, theta, self.model.dt, self.sampler.is_some())
    }
}

/// Envelope point from `Gamma` and the weighted start vector `pi R`.
///
/// `rho` is the log Perron root; `sigma` is the smaller of two bounds on
/// `sup_t pi R Gamma^t 1 / lambda^t`: one through the right Perron vector
/// `r` (`pi R r / min r`) and one through the left Perron vector `l`
/// (`max_i (pi R)_i / l_i * sum l`).
pub fn sigma_rho_from(g: &Mat, w: &[f64], theta: f64, dt: f64, mc: bool) -> Result<SigmaRhoPoint> {
    let mut flags = vec!["perron"];
    let right = linalg::perron(g)?;
    let left = linalg::perron(&g.transpose())?;
    let lambda = right.root;
    if g.nrows() <= 300 {
        let eig = linalg::spectral_radius_eig(g);
        if (eig - lambda).abs() > 1e-8 * lambda.abs().max(1e-300) {
            flags.push("eig_mismatch");
        }
    }
    if !(lambda > 0.0) {
        return Err(Error::Degenerate("spectral radius is not positive".into()));
    }
    let rmin = right.right.iter().cloned().fold(f64::INFINITY, f64::min);
    let b1 = if rmin > 0.0 {
        w.iter().zip(&right.right).map(|(a, b)| a * b).sum::<f64>() / rmin
    } else {
        f64::INFINITY
    };
    let lsum: f64 = left.right.iter().sum();
    let b2 = if left.right.iter().all(|x| *x > 0.0) {
        w.iter()
            .zip(&left.right)
            .map(|(a, l)| a / l)
            .fold(0.0, f64::max)
            * lsum
    } else {
        f64::INFINITY
    };
    let bound = b1.min(b2);
    if !(bound > 0.0) || !bound.is_finite() {
        return Err(Error::Degenerate("transient bound is not positive".into()));
    }
    if mc {
        flags.push("r_mc");
    }
    let sigma = bound.ln() / theta;
    let rho = lambda.ln() / theta / dt;
    Ok(SigmaRhoPoint {
        theta,
        sigma: if sigma.abs() < 1e-300 { 0.0 } else { sigma },
        rho,
        valid: true,
        flags: flags.join(";"),
    })
}

/// One envelope point.
pub fn sigma_rho(model: &DMaparHmm, theta: f64, r_method: RMethod) -> Result<SigmaRhoPoint> {
    EnvelopeContext::new(model, r_method)?.point(theta)
}

/// `(1/(theta t dt)) ln(pi R Gamma^t 1)` in bytes per second.
pub fn effective_bandwidth(model: &DMaparHmm, theta: f64, t_slots: usize, r_method: RMethod) -> Result<f64> {
    if t_slots == 0 {
        return Err(Error::InvalidArgument("t must be at least 1".into()));
    }
    let ctx = EnvelopeContext::new(model, r_method)?;
    let g = gamma(model, theta, &ctx.v)?;
    let r = ctx.r(theta)?;
    let w: Vec<f64> = model.pi.iter().zip(&r).map(|(a, b)| a * b).collect();
    Ok(log_pi_r_gamma_t(&g, &w, t_slots) / (theta * t_slots as f64 * model.dt))
}

/// `ln(w Gamma^t 1)` by normalized matrix-vector products.
pub fn log_pi_r_gamma_t(g: &Mat, w: &[f64], t: usize) -> f64 {
    let mut x = vec![1.0; g.nrows()];
    let mut acc = 0.0;
    for _ in 0..t {
        x = linalg::mat_vec(g, &x);
        let s = x.iter().cloned().fold(0.0, f64::max);
        x.iter_mut().for_each(|v| *v /= s);
        acc += s.ln();
    }
    acc + w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>().ln()
}

/// Runs the full envelope computation over a theta grid. Failing points are
/// kept and marked invalid.
pub fn envelope_curve(model: &DMaparHmm, theta_grid: &[f64], r_method: RMethod) -> Result<Vec<SigmaRhoPoint>> {
    if theta_grid.is_empty() || theta_grid.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::InvalidArgument("theta grid must be positive".into()));
    }
    if theta_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("theta grid must be increasing".into()));
    }
    let ctx = EnvelopeContext::new(model, r_method)?;
    Ok(theta_grid
        .iter()
        .map(|&th| match ctx.point(th) {
            Ok(p) => p,
            Err(e) => SigmaRhoPoint::invalid(th, &e.to_string()),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationReport {
    pub epsilon: f64,
    /// Largest entry of any path's `c_{s,t}`.
    pub c_max: f64,
    pub observed_max_dev: f64,
    /// Number of `(path, s, entry)` triples where the bound failed.
    pub violations: usize,
    pub paths: usize,
}

/// Checks `|varphi(s,t) - v_{Z_s}| <= c_{s,t} eps` on sampled paths.
pub fn phi_deviation_bound(model: &DMaparHmm, horizon: usize, n_paths: usize, seed: u64) -> Result<DeviationReport> {
    let p = model.p();
    if p == 0 {
        return Err(Error::InvalidArgument("deviation bound needs p >= 1".into()));
    }
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let v = solve_v(model)?;
    let s = model.n_states();
    let mut a_cache: Vec<Vec<Option<Mat>>> = vec![vec![None; s]; s];
    let mut eps: f64 = 0.0;
    for i in 0..s {
        for j in 0..s {
            if model.t[(i, j)] == 0.0 {
                continue;
            }
            let a = a_matrix(model, i, j);
            let b = breve_params(model, i, j);
            let o = if model.is_on(j) { 1.0 } else { 0.0 };
            for k in 0..p {
                eps = eps.max((1.0 + b.phi[k] - v.v[i][k]).abs());
                let mut fixed = if k == p - 1 { o } else { 0.0 };
                for c in 0..p {
                    fixed += a[(k, c)] * v.v[j][c];
                }
                eps = eps.max((fixed - v.v[i][k]).abs());
            }
            a_cache[i][j] = Some(a);
        }
    }
    let rows = model::sparse_rows(&model.t);
    let mut g = rng::stream(seed, 0xd3);
    let mut c_max: f64 = 0.0;
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    let mut path = vec![0usize; horizon + 1];
    for _ in 0..n_paths {
        path[0] = map::draw(&model.pi, &mut g);
        for k in 1..=horizon {
            path[k] = model::draw_sparse(&rows[path[k - 1]], &mut g);
        }
        let mut phi = vec![1.0; p];
        let mut c = vec![0.0; p];
        for st in (0..horizon).rev() {
            let (zi, zj) = (path[st], path[st + 1]);
            let a = a_cache[zi][zj].as_ref().expect("feasible transition");
            let o = if model.is_on(zj) { 1.0 } else { 0.0 };
            let mut next = vec![0.0; p];
            let mut cn = vec![1.0; p];
            for r in 0..p {
                next[r] = if r == p - 1 { o } else { 0.0 };
                for col in 0..p {
                    next[r] += a[(r, col)] * phi[col];
                    if st + 1 < horizon {
                        cn[r] += a[(r, col)].abs() * c[col];
                    }
                }
            }
            phi = next;
            c = cn;
            for r in 0..p {
                let dev = (phi[r] - v.v[zi][r]).abs();
                worst = worst.max(dev);
                c_max = c_max.max(c[r]);
                if dev > c[r] * eps + 1e-12 {
                    violations += 1;
                }
            }
        }
    }
    Ok(DeviationReport {
        epsilon: eps,
        c_max,
        observed_max_dev: worst,
        violations,
        paths: n_paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{from_baseline, Baseline};

    #[test]
    fn v_is_geometric_for_ar1() {
        let m = from_baseline(&Baseline::Ar { mu: 1.0, phi: vec![0.6], sigma: 1.0, dt: 1.0 }).unwrap();
        let v = solve_v(&m).unwrap();
        assert!((v.v[0][0] - 2.5).abs() < 1e-12);
        let m1 = crate::model::build_t(&m.carrier, &crate::arhmm::ArHmm::ar(1.0, &[1.0], 1.0), 1.0).unwrap();
        assert!(matches!(solve_v(&m1), Err(Error::Singular(_))));
    }

    #[test]
    fn gamma_at_zero_is_t() {
        let m = from_baseline(&Baseline::Mmoo { alpha: 2.0, beta: 3.0, peak: 100.0, dt: 0.01 }).unwrap();
        let v = solve_v(&m).unwrap();
        assert_eq!(gamma(&m, 0.0, &v).unwrap(), m.t);
    }

    #[test]
    fn exponential_pole() {
        let m = from_baseline(&Baseline::Exponential { mean: 10.0, dt: 1.0 }).unwrap();
        let v = solve_v(&m).unwrap();
        assert!(matches!(gamma(&m, 0.1, &v), Err(Error::DivergentMgf { .. })));
        let pts = envelope_curve(&m, &[0.01, 0.05, 0.2], RMethod::Identity).unwrap();
        assert!(pts[0].valid && pts[1].valid && !pts[2].valid);
    }
}
