//! The composed dMAPAR-HMM: joint chain of carrier and hidden AR state,
//! synthetic generation, baseline reductions and the exact MGF by path
//! enumeration.

use serde::{Deserialize, Serialize};

use crate::arhmm::{self, ArHmm, Residual};
use crate::carrier::{self, CarrierChain, CarrierMode};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::map::{self, DiscreteMap};
use crate::rng::Rng;
use crate::trace::DiscretizedTrace;

#[derive(Debug, Clone)]
pub struct DMaparHmm {
    pub carrier: CarrierChain,
    pub arhmm: ArHmm,
    /// Slot width in seconds.
    pub dt: f64,
    pub t: Mat,
    pub pi: Vec<f64>,
}

/// Parameters attached to one joint transition.
#[derive(Debug, Clone, PartialEq)]
pub struct BreveParams {
    pub mu: f64,
    pub phi: Vec<f64>,
    pub sigma: f64,
}

impl DMaparHmm {
    pub fn n_states(&self) -> usize {
        self.t.nrows()
    }

    /// Hidden AR-HMM state count.
    pub fn n_hidden(&self) -> usize {
        self.arhmm.n_states
    }

    /// First on index in the joint chain.
    pub fn on_start(&self) -> usize {
        self.carrier.n_off * self.arhmm.n_states
    }

    pub fn is_on(&self, z: usize) -> bool {
        z >= self.on_start()
    }

    pub fn p(&self) -> usize {
        self.arhmm.p
    }

    /// Long-run fraction of on slots.
    pub fn on_fraction(&self) -> f64 {
        self.pi[self.on_start()..].iter().sum()
    }

    /// Mean bytes per slot for models without AR feedback; for `p > 0` the
    /// per-state fixed points are averaged, which is exact for one state.
    pub fn mean_bytes_per_slot(&self) -> f64 {
        let n = self.n_hidden();
        let mut total = 0.0;
        for z in 0..self.n_states() {
            let i = z % n;
            let amp = match self.arhmm.fixed_point(i) {
                Some(v) if self.arhmm.p > 0 => v,
                _ => self.arhmm.mu[i] + self.arhmm.sigma[i] * self.arhmm.residual_mean(),
            };
            let p_on: f64 = (self.on_start()..self.n_states()).map(|j| self.t[(z, j)]).sum();
            total += self.pi[z] * p_on * amp;
        }
        total
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            schema_version: MODEL_SCHEMA_VERSION,
            carrier: self.carrier.mode.clone(),
            arhmm: self.arhmm.clone(),
            dt: self.dt,
        }
    }
}

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// On-disk representation; the joint chain is rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub carrier: CarrierMode,
    pub arhmm: ArHmm,
    pub dt: f64,
}

impl ModelFile {
    pub fn build(&self) -> Result<DMaparHmm> {
        if self.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported model schema version {}",
                self.schema_version
            )));
        }
        let chain = carrier::build_q(self.carrier.clone())?;
        build_t(&chain, &self.arhmm, self.dt)
    }

    pub fn load(path: &std::path::Path) -> Result<DMaparHmm> {
        let text = std::fs::read_to_string(path)?;
        let f: ModelFile = serde_json::from_str(&text)?;
        f.build()
    }
}

/// Joint transition matrix
/// `[[Q_oo ⊗ I, Q_o,on ⊗ P], [Q_on,o ⊗ I, Q_on,on ⊗ P]]` and its stationary
/// vector.
pub fn build_t(carrier: &CarrierChain, arhmm: &ArHmm, dt: f64) -> Result<DMaparHmm> {
    arhmm.validate()?;
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("dt must be positive".into()));
    }
    if let Some(cdt) = carrier.dt {
        if (cdt - dt).abs() > 1e-12 * dt {
            return Err(Error::InvalidArgument(format!(
                "carrier dt {cdt} differs from model dt {dt}"
            )));
        }
    }
    let t = joint_matrix(carrier, &arhmm.transition);
    let pi = linalg::stationary(&t)?;
    Ok(DMaparHmm {
        carrier: carrier.clone(),
        arhmm: arhmm.clone(),
        dt,
        t,
        pi,
    })
}

/// The block-Kronecker joint matrix without the stationary solve.
pub fn joint_matrix(carrier: &CarrierChain, p: &Mat) -> Mat {
    let n = p.nrows();
    let h = carrier.n_states();
    let eye = Mat::identity(n, n);
    let mut t = Mat::zeros(h * n, h * n);
    for a in 0..h {
        for b in 0..h {
            let q = carrier.q[(a, b)];
            if q == 0.0 {
                continue;
            }
            let inner = if carrier.is_on(b) { p } else { &eye };
            for i in 0..n {
                for j in 0..n {
                    t[(a * n + i, b * n + j)] = q * inner[(i, j)];
                }
            }
        }
    }
    t
}

/// Stationary distribution of a row-stochastic matrix.
pub fn stationary(t: &Mat) -> Result<Vec<f64>> {
    linalg::stationary(t)
}

/// AR parameters driving the amplitude of transition `z_prev -> z_next`;
/// all zero when the target slot is off.
pub fn breve_params(model: &DMaparHmm, z_prev: usize, z_next: usize) -> BreveParams {
    let p = model.p();
    if !model.is_on(z_next) {
        return BreveParams {
            mu: 0.0,
            phi: vec![0.0; p],
            sigma: 0.0,
        };
    }
    let i = z_prev % model.n_hidden();
    BreveParams {
        mu: model.arhmm.mu[i],
        phi: (0..p).map(|l| model.arhmm.phi[l][i]).collect(),
        sigma: model.arhmm.sigma[i],
    }
}

/// Sampled slot series with the clamping count.
#[derive(Debug, Clone)]
pub struct Generated {
    pub trace: DiscretizedTrace,
    /// On slots whose AR output was negative and emitted as zero.
    pub clamped: usize,
    pub on_slots: usize,
    /// Joint state per slot.
    pub states: Vec<usize>,
}

/// Cumulative sparse rows for fast categorical draws.
pub(crate) fn sparse_rows(t: &Mat) -> Vec<Vec<(usize, f64)>> {
    (0..t.nrows())
        .map(|i| {
            let mut acc = 0.0;
            (0..t.ncols())
                .filter(|&j| t[(i, j)] > 0.0)
                .map(|j| {
                    acc += t[(i, j)];
                    (j, acc)
                })
                .collect()
        })
        .collect()
}

pub(crate) fn draw_sparse(row: &[(usize, f64)], g: &mut Rng) -> usize {
    let total = row.last().map(|x| x.1).unwrap_or(1.0);
    let u = arhmm::uniform(g) * total;
    let k = row.partition_point(|x| x.1 <= u);
    row[k.min(row.len() - 1)].0
}

/// Simulates `n_slots` slots starting from the stationary distribution.
pub fn generate(model: &DMaparHmm, n_slots: usize, g: &mut Rng) -> Result<Generated> {
    if !arhmm::is_stationary(&model.arhmm) {
        return Err(Error::NonStationary);
    }
    let rows = sparse_rows(&model.t);
    let n = model.n_hidden();
    let p = model.p();
    let mut z = map::draw(&model.pi, g);
    let mut lags = vec![model.arhmm.fixed_point(z % n).unwrap_or(0.0); p];
    let mut a = Vec::with_capacity(n_slots);
    let mut states = Vec::with_capacity(n_slots);
    let mut clamped = 0;
    let mut on_slots = 0;
    for _ in 0..n_slots {
        let next = draw_sparse(&rows[z], g);
        if model.is_on(next) {
            let y = arhmm::ar_next(&model.arhmm, z % n, &lags, g);
            if p > 0 {
                lags.rotate_right(1);
                lags[0] = y;
            }
            on_slots += 1;
            if y < 0.0 {
                clamped += 1;
                a.push(0.0);
            } else {
                a.push(y);
            }
        } else {
            a.push(0.0);
        }
        states.push(next);
        z = next;
    }
    Ok(Generated {
        trace: DiscretizedTrace { a, dt: model.dt },
        clamped,
        on_slots,
        states,
    })
}

/// Arrival models expressible as special cases of the composed model.
/// Rates are per second, amplitudes in bytes per slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "baseline", rename_all = "snake_case")]
pub enum Baseline {
    Poisson { lambda: f64, amplitude: f64, dt: f64 },
    CPoisson { lambda: f64, mean: f64, sd: f64, dt: f64 },
    Mmoo { alpha: f64, beta: f64, peak: f64, dt: f64 },
    Mmp { arhmm: ArHmm, dt: f64 },
    Ar { mu: f64, phi: Vec<f64>, sigma: f64, dt: f64 },
    Normal { mu: f64, sigma: f64, dt: f64 },
    Exponential { mean: f64, dt: f64 },
    Map { map: DiscreteMap, amplitude: f64 },
    /// Batch sizes `1..=pmf.len()` drawn i.i.d. per event.
    Bmap { map: DiscreteMap, batch_pmf: Vec<f64>, unit: f64 },
}

impl Baseline {
    pub const NAMES: [&'static str; 9] = [
        "poisson",
        "cpoisson",
        "mmoo",
        "mmp",
        "ar",
        "normal",
        "exponential",
        "map",
        "bmap",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Baseline::Poisson { .. } => "poisson",
            Baseline::CPoisson { .. } => "cpoisson",
            Baseline::Mmoo { .. } => "mmoo",
            Baseline::Mmp { .. } => "mmp",
            Baseline::Ar { .. } => "ar",
            Baseline::Normal { .. } => "normal",
            Baseline::Exponential { .. } => "exponential",
            Baseline::Map { .. } => "map",
            Baseline::Bmap { .. } => "bmap",
        }
    }

    pub fn check_name(name: &str) -> Result<&'static str> {
        Self::NAMES
            .iter()
            .find(|n| n.eq_ignore_ascii_case(name))
            .copied()
            .ok_or_else(|| Error::UnknownBaseline(name.to_string()))
    }
}

fn always_on(dt: f64) -> Result<CarrierChain> {
    let mut c = carrier::build_q(CarrierMode::AlwaysOn)?;
    c.dt = Some(dt);
    Ok(c)
}

pub fn from_baseline(spec: &Baseline) -> Result<DMaparHmm> {
    match spec {
        Baseline::Poisson { lambda, amplitude, dt } => {
            let off = DiscreteMap::bernoulli(lambda * dt, *dt)?;
            let c = carrier::build_q(CarrierMode::PointProcess { off })?;
            build_t(&c, &ArHmm::iid(*amplitude, 0.0, Residual::Normal), *dt)
        }
        Baseline::CPoisson { lambda, mean, sd, dt } => {
            let off = DiscreteMap::bernoulli(lambda * dt, *dt)?;
            let c = carrier::build_q(CarrierMode::PointProcess { off })?;
            build_t(&c, &ArHmm::iid(*mean, *sd, Residual::Normal), *dt)
        }
        Baseline::Mmoo { alpha, beta, peak, dt } => {
            let off = DiscreteMap::bernoulli(alpha * dt, *dt)?;
            let on = DiscreteMap::bernoulli(beta * dt, *dt)?;
            let c = carrier::build_q(CarrierMode::DualMap { off, on })?;
            build_t(&c, &ArHmm::iid(*peak, 0.0, Residual::Normal), *dt)
        }
        Baseline::Mmp { arhmm, dt } => {
            if arhmm.p != 0 {
                return Err(Error::InvalidArgument("mmp requires p = 0".into()));
            }
            build_t(&always_on(*dt)?, arhmm, *dt)
        }
        Baseline::Ar { mu, phi, sigma, dt } => {
            build_t(&always_on(*dt)?, &ArHmm::ar(*mu, phi, *sigma), *dt)
        }
        Baseline::Normal { mu, sigma, dt } => {
            build_t(&always_on(*dt)?, &ArHmm::iid(*mu, *sigma, Residual::Normal), *dt)
        }
        Baseline::Exponential { mean, dt } => build_t(
            &always_on(*dt)?,
            &ArHmm::iid(0.0, *mean, Residual::Exponential),
            *dt,
        ),
        Baseline::Map { map, amplitude } => {
            let c = carrier::build_q(CarrierMode::PointProcess { off: map.clone() })?;
            build_t(&c, &ArHmm::iid(*amplitude, 0.0, Residual::Normal), map.dt)
        }
        Baseline::Bmap { map, batch_pmf, unit } => {
            let b = batch_pmf.len();
            let s: f64 = batch_pmf.iter().sum();
            if b == 0 || (s - 1.0).abs() > 1e-9 || batch_pmf.iter().any(|x| *x < 0.0) {
                return Err(Error::InvalidArgument("batch_pmf must be a distribution".into()));
            }
            let c = carrier::build_q(CarrierMode::PointProcess { off: map.clone() })?;
            let tr = Mat::from_fn(b, b, |_, j| batch_pmf[j]);
            let ar = ArHmm {
                n_states: b,
                transition: tr,
                p: 0,
                mu: (1..=b).map(|k| k as f64 * unit).collect(),
                phi: Vec::new(),
                sigma: vec![0.0; b],
                residual: Residual::Normal,
                pi0: batch_pmf.clone(),
            };
            build_t(&c, &ar, map.dt)
        }
    }
}

/// Where the exact MGF starts.
#[derive(Debug, Clone)]
pub enum Initial {
    State(usize),
    Distribution(Vec<f64>),
}

/// `E[exp(theta A(0, horizon)) | Z_0, initial lags]` by enumerating every
/// joint path and running the backward lag-weight recursion on it.
///
/// `initial_lags[i]` is the on-amplitude `i + 1` observations before slot 1.
pub fn exact_conditional_mgf(
    model: &DMaparHmm,
    theta: f64,
    horizon: usize,
    initial_lags: &[f64],
    z0: &Initial,
) -> Result<f64> {
    let per = exact_conditional_mgf_all(model, theta, horizon, initial_lags)?;
    match z0 {
        Initial::State(k) => per
            .get(*k)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("state {k} out of range"))),
        Initial::Distribution(w) => {
            if w.len() != per.len() {
                return Err(Error::InvalidArgument("distribution length mismatch".into()));
            }
            Ok(w.iter().zip(&per).map(|(a, b)| a * b).sum())
        }
    }
}

/// Conditional MGF for every starting state.
pub fn exact_conditional_mgf_all(
    model: &DMaparHmm,
    theta: f64,
    horizon: usize,
    initial_lags: &[f64],
) -> Result<Vec<f64>> {
    let s = model.n_states();
    let p = model.p();
    if initial_lags.len() != p {
        return Err(Error::InvalidArgument(format!(
            "expected {p} initial lags, got {}",
            initial_lags.len()
        )));
    }
    let paths = (s as f64).powi(horizon as i32);
    if paths > 1e7 {
        return Err(Error::TooLarge(format!(
            "{s}^{horizon} paths exceed the enumeration limit of 1e7"
        )));
    }
    let rows: Vec<Vec<(usize, f64)>> = (0..s)
        .map(|i| (0..s).filter(|&j| model.t[(i, j)] > 0.0).map(|j| (j, model.t[(i, j)])).collect())
        .collect();
    let breve: Vec<Vec<BreveParams>> = (0..s)
        .map(|i| (0..s).map(|j| breve_params(model, i, j)).collect())
        .collect();
    let mut out = vec![0.0; s];
    let mut path = vec![0usize; horizon + 1];
    for k in 0..s {
        path[0] = k;
        let mut total = 0.0;
        walk(model, theta, initial_lags, &rows, &breve, &mut path, 1, 1.0, &mut total)?;
        out[k] = total;
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn walk(
    model: &DMaparHmm,
    theta: f64,
    lags: &[f64],
    rows: &[Vec<(usize, f64)>],
    breve: &[Vec<BreveParams>],
    path: &mut Vec<usize>,
    depth: usize,
    prob: f64,
    total: &mut f64,
) -> Result<()> {
    if depth == path.len() {
        *total += prob * path_mgf(model, theta, lags, breve, path)?;
        return Ok(());
    }
    let from = path[depth - 1];
    for &(j, pr) in &rows[from] {
        path[depth] = j;
        walk(model, theta, lags, rows, breve, path, depth + 1, prob * pr, total)?;
    }
    Ok(())
}

fn path_mgf(
    model: &DMaparHmm,
    theta: f64,
    lags: &[f64],
    breve: &[Vec<BreveParams>],
    path: &[usize],
) -> Result<f64> {
    let p = model.p();
    let t = path.len() - 1;
    // w[i] = varphi_{i+1}(s, t) for i = 0..=p, with w[p] = 1 throughout.
    let mut w = vec![1.0; p + 1];
    let mut log_m = 0.0;
    for s in (1..=t).rev() {
        let (zp, zn) = (path[s - 1], path[s]);
        let bp = &breve[zp][zn];
        // M(theta varphi_1(s, t); Z_{s-1}, Z_s)
        let th = theta * w[0];
        log_m += match model.arhmm.residual {
            Residual::Normal => th * bp.mu + 0.5 * th * th * bp.sigma * bp.sigma,
            Residual::Exponential => {
                let x = th * bp.sigma;
                if x >= 1.0 {
                    return Err(Error::DivergentMgf { from: zp, to: zn, value: x });
                }
                th * bp.mu - (1.0 - x).ln()
            }
        };
        if model.is_on(zn) {
            let first = w[0];
            let mut next = vec![1.0; p + 1];
            for i in 0..p {
                next[i] = first * bp.phi[i] + w[i + 1];
            }
            w = next;
        }
    }
    let mut lag_term = 0.0;
    for i in 0..p {
        lag_term += theta * (w[i] - 1.0) * lags[i];
    }
    Ok((log_m + lag_term).exp())
}
