//! Markovian arrival processes in continuous and discrete time.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, mat_serde, Mat};
use crate::rng::{self, Rng};

/// Continuous-time MAP `(C0, C1)` with rates in 1/seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousMap {
    pub m: usize,
    #[serde(with = "mat_serde")]
    pub c0: Mat,
    #[serde(with = "mat_serde")]
    pub c1: Mat,
}

/// Discrete-time MAP `(D0, D1)` on slots of width `dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMap {
    pub m: usize,
    #[serde(with = "mat_serde")]
    pub d0: Mat,
    #[serde(with = "mat_serde")]
    pub d1: Mat,
    pub dt: f64,
}

impl ContinuousMap {
    pub fn new(c0: Mat, c1: Mat) -> Result<Self> {
        let m = c0.nrows();
        let map = ContinuousMap { m, c0, c1 };
        map.validate()?;
        Ok(map)
    }

    /// Poisson process of rate `lambda`.
    pub fn poisson(lambda: f64) -> Result<Self> {
        Self::new(
            Mat::from_element(1, 1, -lambda),
            Mat::from_element(1, 1, lambda),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m;
        if m == 0 || self.c0.shape() != (m, m) || self.c1.shape() != (m, m) {
            return Err(Error::InvalidArgument("C0 and C1 must be m x m, m >= 1".into()));
        }
        for i in 0..m {
            if !(self.c0[(i, i)] < 0.0) {
                return Err(Error::InvalidArgument(format!("C0[{i},{i}] must be negative")));
            }
            let mut s = 0.0;
            let mut scale: f64 = 0.0;
            for j in 0..m {
                let (a, b) = (self.c0[(i, j)], self.c1[(i, j)]);
                if !a.is_finite() || !b.is_finite() || b < 0.0 || (i != j && a < 0.0) {
                    return Err(Error::InvalidArgument(format!("invalid rate in row {i}")));
                }
                s += a + b;
                scale = scale.max(a.abs()).max(b);
            }
            if s.abs() > 1e-12 * scale.max(1.0) {
                return Err(Error::InvalidArgument(format!("row {i} of C0 + C1 sums to {s}")));
            }
        }
        Ok(())
    }

    /// Total outflow rate `nu_i = -C0[i,i]`.
    pub fn nu(&self, i: usize) -> f64 {
        -self.c0[(i, i)]
    }

    /// Stationary phase distribution at arrival epochs.
    pub fn embedded_stationary(&self) -> Result<Vec<f64>> {
        let inv = (-&self.c0)
            .try_inverse()
            .ok_or_else(|| Error::Singular("C0 is singular".into()))?;
        let pe = inv * &self.c1;
        linalg::stationary_ls(&pe)
    }

    /// Raw moments `E[X^k]`, k = 1..=kmax, of the stationary inter-arrival time.
    pub fn iat_moments(&self, kmax: usize) -> Result<Vec<f64>> {
        let pi = self.embedded_stationary()?;
        let inv = (-&self.c0)
            .try_inverse()
            .ok_or_else(|| Error::Singular("C0 is singular".into()))?;
        let mut v = vec![1.0; self.m];
        let mut out = Vec::with_capacity(kmax);
        let mut fact = 1.0;
        for k in 1..=kmax {
            v = linalg::mat_vec(&inv, &v);
            fact *= k as f64;
            out.push(fact * pi.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>());
        }
        Ok(out)
    }

    /// Long-run arrival rate.
    pub fn rate(&self) -> Result<f64> {
        Ok(1.0 / self.iat_moments(1)?[0])
    }
}

impl DiscreteMap {
    pub fn new(d0: Mat, d1: Mat, dt: f64) -> Result<Self> {
        let m = d0.nrows();
        let map = DiscreteMap { m, d0, d1, dt };
        map.validate()?;
        Ok(map)
    }

    /// Single-state map with event probability `q` per slot.
    pub fn bernoulli(q: f64, dt: f64) -> Result<Self> {
        Self::new(
            Mat::from_element(1, 1, 1.0 - q),
            Mat::from_element(1, 1, q),
            dt,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m;
        if m == 0 || self.d0.shape() != (m, m) || self.d1.shape() != (m, m) {
            return Err(Error::InvalidArgument("D0 and D1 must be m x m, m >= 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidArgument("dt must be positive".into()));
        }
        if self
            .d0
            .iter()
            .chain(self.d1.iter())
            .any(|x| !(0.0..=1.0).contains(x))
        {
            return Err(Error::InvalidArgument("D0/D1 entries must lie in [0,1]".into()));
        }
        let total = &self.d0 + &self.d1;
        if linalg::max_row_sum_error(&total) > 1e-12 {
            return Err(Error::InvalidArgument("rows of D0 + D1 must sum to 1".into()));
        }
        Ok(())
    }

    /// Row sums of D1.
    pub fn event_prob(&self) -> Vec<f64> {
        linalg::row_sums(&self.d1)
    }

    /// Stationary phase distribution of the slot-level chain `D0 + D1`.
    pub fn phase_stationary(&self) -> Result<Vec<f64>> {
        linalg::stationary_ls(&(&self.d0 + &self.d1))
    }

    /// Stationary phase distribution at event slots.
    pub fn embedded_stationary(&self) -> Result<Vec<f64>> {
        let i_d0 = Mat::identity(self.m, self.m) - &self.d0;
        let inv = i_d0
            .try_inverse()
            .ok_or_else(|| Error::Singular("I - D0 is singular".into()))?;
        linalg::stationary_ls(&(inv * &self.d1))
    }
}

/// `D0 = I + C0 dt`, `D1 = C1 dt`. Requires `dt < 1/nu_i` for every state.
pub fn discretize_map(cmap: &ContinuousMap, dt: f64) -> Result<DiscreteMap> {
    cmap.validate()?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    for i in 0..cmap.m {
        let nu = cmap.nu(i);
        if nu * dt >= 1.0 {
            return Err(Error::InvalidDt {
                state: i,
                rate: nu,
                dt,
                limit: 1.0 / nu,
            });
        }
    }
    let m = cmap.m;
    let d0 = Mat::identity(m, m) + &cmap.c0 * dt;
    let d1 = &cmap.c1 * dt;
    DiscreteMap::new(d0, d1, dt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 500,
            tol: 1e-7,
            restarts: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MapFit {
    pub map: ContinuousMap,
    /// Initial phase distribution estimated alongside the rates.
    pub alpha: Vec<f64>,
    pub loglik: f64,
    /// Log-likelihood after each EM iteration of the winning restart.
    pub history: Vec<f64>,
    pub iterations: usize,
}

/// EM fit of a MAP(m) to an inter-arrival sequence.
///
/// The E-step evaluates the interval integrals through the block matrix
/// exponential `exp([[C0, w g], [0, C0]] x)`, whose upper right block is
/// `∫ e^{C0 (x-u)} w g e^{C0 u} du`.
pub fn fit_map(iats: &[f64], m: usize, opts: &FitOptions) -> Result<MapFit> {
    if m == 0 {
        return Err(Error::InvalidArgument("m must be at least 1".into()));
    }
    let need = 10 * (2 * m * m - m);
    if iats.len() < need {
        return Err(Error::InsufficientData(format!(
            "MAP({m}) needs {need} inter-arrival times, got {}",
            iats.len()
        )));
    }
    if let Some(bad) = iats.iter().find(|x| !(**x > 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "inter-arrival times must be positive, found {bad}"
        )));
    }
    let mean = iats.iter().sum::<f64>() / iats.len() as f64;
    let mut best: Option<MapFit> = None;
    for r in 0..opts.restarts.max(1) {
        let mut g = rng::stream(opts.seed, r as u64);
        let (c0, c1) = random_init(m, mean, &mut g);
        let fit = em_run(iats, c0, c1, vec![1.0 / m as f64; m], opts)?;
        if best.as_ref().map(|b| fit.loglik > b.loglik).unwrap_or(true) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn random_init(m: usize, mean: f64, g: &mut Rng) -> (Mat, Mat) {
    let hi = 2.0 / mean;
    let mut c0 = Mat::zeros(m, m);
    let mut c1 = Mat::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            c1[(i, j)] = g.random_range(f64::MIN_POSITIVE..hi);
            if i != j {
                c0[(i, j)] = g.random_range(f64::MIN_POSITIVE..hi);
            }
        }
    }
    fix_diagonal(&mut c0, &c1);
    (c0, c1)
}

fn fix_diagonal(c0: &mut Mat, c1: &Mat) {
    let m = c0.nrows();
    for i in 0..m {
        let mut s = 0.0;
        for j in 0..m {
            s += c1[(i, j)];
            if i != j {
                s += c0[(i, j)];
            }
        }
        c0[(i, i)] = -s;
    }
}

/// Runs EM from a given starting point.
pub fn em_run(
    iats: &[f64],
    mut c0: Mat,
    mut c1: Mat,
    mut alpha: Vec<f64>,
    opts: &FitOptions,
) -> Result<MapFit> {
    let m = c0.nrows();
    let k = iats.len();
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        // Forward pass with per-interval exponentials.
        // Slot-quantized durations repeat, so exponentials are shared per
        // distinct interval length.
        let mut cache: BTreeMap<u64, usize> = BTreeMap::new();
        let mut uniq: Vec<f64> = Vec::new();
        let slot: Vec<usize> = iats
            .iter()
            .map(|&x| {
                *cache.entry(x.to_bits()).or_insert_with(|| {
                    uniq.push(x);
                    uniq.len() - 1
                })
            })
            .collect();
        let uexps: Vec<Mat> = uniq.iter().map(|&x| (&c0 * x).exp()).collect();
        let exps: Vec<&Mat> = slot.iter().map(|&u| &uexps[u]).collect();
        let mut fwd = Vec::with_capacity(k + 1);
        fwd.push(alpha.clone());
        let mut ll = 0.0;
        for e in exps.iter() {
            let a = fwd.last().unwrap();
            let v = linalg::vec_mat(&linalg::vec_mat(a, *e), &c1);
            let s: f64 = v.iter().sum();
            if !(s > 0.0) {
                return Err(Error::Degenerate("MAP likelihood underflow".into()));
            }
            ll += s.ln();
            fwd.push(v.into_iter().map(|x| x / s).collect());
        }
        // Backward pass.
        let mut bwd = vec![vec![1.0; m]; k + 1];
        for idx in (0..k).rev() {
            let v = linalg::mat_vec(exps[idx], &linalg::mat_vec(&c1, &bwd[idx + 1]));
            let s: f64 = v.iter().sum();
            bwd[idx] = v.into_iter().map(|x| x / s).collect();
        }
        history.push(ll);
        let converged = history.len() >= 2 && {
            let prev = history[history.len() - 2];
            (ll - prev).abs() <= opts.tol * prev.abs().max(1.0)
        };
        if converged || iterations >= opts.max_iter {
            return Ok(MapFit {
                map: ContinuousMap {
                    m,
                    c0: c0.clone(),
                    c1: c1.clone(),
                },
                alpha,
                loglik: ll,
                history,
                iterations,
            });
        }
        iterations += 1;

        // Expected statistics.
        // The upper right block of exp([[C0, W], [0, C0]] x) is linear in W,
        // so couplings are summed per distinct length before exponentiating.
        let mut z = vec![0.0; m];
        let mut n0 = Mat::zeros(m, m);
        let mut n1 = Mat::zeros(m, m);
        let mut coupling = vec![Mat::zeros(m, m); uniq.len()];
        for idx in 0..k {
            let a = &fwd[idx];
            let b = &bwd[idx + 1];
            let w = linalg::mat_vec(&c1, b);
            let ae = linalg::vec_mat(a, exps[idx]);
            let like: f64 = ae.iter().zip(&w).map(|(x, y)| x * y).sum();
            if !(like > 0.0) {
                continue;
            }
            let cw = &mut coupling[slot[idx]];
            for i in 0..m {
                for j in 0..m {
                    cw[(i, j)] += w[i] * a[j] / like;
                    n1[(i, j)] += ae[i] * c1[(i, j)] * b[j] / like;
                }
            }
        }
        for (u, &x) in uniq.iter().enumerate() {
            let mut block = Mat::zeros(2 * m, 2 * m);
            block.view_mut((0, 0), (m, m)).copy_from(&c0);
            block.view_mut((m, m), (m, m)).copy_from(&c0);
            let scale = coupling[u].amax();
            if !(scale > 0.0) {
                continue;
            }
            block.view_mut((0, m), (m, m)).copy_from(&(&coupling[u] / scale));
            let big = (block * x).exp() * scale;
            for i in 0..m {
                z[i] += big[(i, m + i)];
                for j in 0..m {
                    if i != j {
                        n0[(i, j)] += c0[(i, j)] * big[(j, m + i)];
                    }
                }
            }
        }
        // Initial phase: posterior of the first interval's starting phase.
        let first = linalg::mat_vec(exps[0], &linalg::mat_vec(&c1, &bwd[1]));
        let mut na: Vec<f64> = alpha.iter().zip(&first).map(|(a, f)| a * f).collect();
        let s: f64 = na.iter().sum();
        na.iter_mut().for_each(|x| *x /= s);
        alpha = na;

        for i in 0..m {
            if !(z[i] > 0.0) {
                continue;
            }
            for j in 0..m {
                if i != j {
                    c0[(i, j)] = n0[(i, j)] / z[i];
                }
                c1[(i, j)] = n1[(i, j)] / z[i];
            }
        }
        fix_diagonal(&mut c0, &c1);
    }
}

/// Simulates the discrete chain and returns the number of slots between
/// consecutive event transitions.
pub fn sample_map(dmap: &DiscreteMap, n_events: usize, g: &mut Rng) -> Result<Vec<usize>> {
    if dmap.d1.iter().all(|x| *x == 0.0) {
        return Err(Error::NoArrivals);
    }
    if n_events == 0 {
        return Err(Error::InvalidArgument("n_events must be at least 1".into()));
    }
    let m = dmap.m;
    let start = dmap.embedded_stationary().unwrap_or_else(|_| vec![1.0 / m as f64; m]);
    let mut state = draw(&start, g);
    let mut out = Vec::with_capacity(n_events);
    let mut slots = 0usize;
    let mut guard = 0usize;
    while out.len() < n_events {
        let stay = dmap.d0[(state, state)];
        if stay >= 1.0 {
            return Err(Error::NoArrivals);
        }
        if stay > 0.0 {
            let u: f64 = g.random();
            slots += ((1.0 - u).ln() / stay.ln()).floor() as usize;
        }
        // One non-self-loop transition.
        slots += 1;
        let total = 1.0 - stay;
        let mut x = g.random::<f64>() * total;
        let mut next = None;
        for j in 0..m {
            let p = dmap.d1[(state, j)];
            if x < p {
                next = Some((j, true));
                break;
            }
            x -= p;
        }
        if next.is_none() {
            for j in 0..m {
                if j == state {
                    continue;
                }
                let p = dmap.d0[(state, j)];
                if x < p {
                    next = Some((j, false));
                    break;
                }
                x -= p;
            }
        }
        let (j, event) = next.unwrap_or_else(|| (last_positive(dmap, state), true));
        state = j;
        if event {
            out.push(slots);
            slots = 0;
            guard = 0;
        } else {
            guard += 1;
            if guard > 100_000_000 {
                return Err(Error::NoArrivals);
            }
        }
    }
    Ok(out)
}

fn last_positive(dmap: &DiscreteMap, state: usize) -> usize {
    (0..dmap.m)
        .rev()
        .find(|&j| dmap.d1[(state, j)] > 0.0)
        .unwrap_or(state)
}

/// Draws a continuous-time inter-arrival sequence from a MAP.
pub fn sample_continuous(cmap: &ContinuousMap, n_events: usize, g: &mut Rng) -> Result<Vec<f64>> {
    let m = cmap.m;
    let start = cmap.embedded_stationary()?;
    let mut state = draw(&start, g);
    let mut out = Vec::with_capacity(n_events);
    let mut acc = 0.0;
    while out.len() < n_events {
        let nu = cmap.nu(state);
        let u: f64 = g.random();
        acc += -(1.0 - u).ln() / nu;
        let mut x = g.random::<f64>() * nu;
        let mut chosen = None;
        for j in 0..m {
            if x < cmap.c1[(state, j)] {
                chosen = Some((j, true));
                break;
            }
            x -= cmap.c1[(state, j)];
        }
        if chosen.is_none() {
            for j in 0..m {
                if j == state {
                    continue;
                }
                if x < cmap.c0[(state, j)] {
                    chosen = Some((j, false));
                    break;
                }
                x -= cmap.c0[(state, j)];
            }
        }
        let (j, event) = chosen.unwrap_or((state, true));
        state = j;
        if event {
            out.push(acc);
            acc = 0.0;
        }
    }
    Ok(out)
}

/// Categorical draw.
pub fn draw(p: &[f64], g: &mut Rng) -> usize {
    let mut x = g.random::<f64>() * p.iter().sum::<f64>();
    for (i, pi) in p.iter().enumerate() {
        if x < *pi {
            return i;
        }
        x -= pi;
    }
    p.iter().rposition(|v| *v > 0.0).unwrap_or(p.len() - 1)
}
