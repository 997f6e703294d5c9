//! Trace-to-model fitting and baseline parametrization.

use serde::{Deserialize, Serialize};

use crate::arhmm::{self, ArHmm, Criterion, Residual};
use crate::carrier::{self, CarrierMode};
use crate::error::{Error, Result};
use crate::map::{self, DiscreteMap, FitOptions};
use crate::model::{self, Baseline, DMaparHmm};
use crate::rng;
use crate::trace::{self, DemodulatedTrace, DiscretizedTrace, TraceSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Slot width; the trace default is used when absent.
    pub dt: Option<f64>,
    pub m_off: usize,
    pub m_on: usize,
    pub n_candidates: Vec<usize>,
    pub p_candidates: Vec<usize>,
    pub criterion: Criterion,
    pub residual: Residual,
    pub map_opts: FitOptions,
    /// Durations beyond this count are ignored by the MAP fit.
    pub max_durations: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            dt: None,
            m_off: 2,
            m_on: 2,
            n_candidates: vec![1, 2, 3],
            p_candidates: vec![0, 1, 2],
            criterion: Criterion::Bic,
            residual: Residual::Normal,
            map_opts: FitOptions {
                max_iter: 200,
                ..FitOptions::default()
            },
            max_durations: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub dt: f64,
    pub n_slots: usize,
    pub on_fraction: f64,
    pub carrier: String,
    pub map_off_loglik: Option<f64>,
    pub map_on_loglik: Option<f64>,
    pub n: usize,
    pub p: usize,
    /// `(N, p, score)` for every fitted candidate.
    pub order_table: Vec<(usize, usize, f64)>,
    pub notes: Vec<String>,
}

/// Phase-duration law in slots. Falls back to a geometric law when the data
/// are too short for the requested order or the fitted rates are too fast
/// for the slot width.
fn fit_durations(
    taus: &[usize],
    m: usize,
    dt: f64,
    cfg: &FitConfig,
    what: &str,
    notes: &mut Vec<String>,
) -> Result<(DiscreteMap, Option<f64>)> {
    if taus.is_empty() {
        return Err(Error::InsufficientData(format!("no {what} phases")));
    }
    let mean = taus.iter().sum::<usize>() as f64 / taus.len() as f64;
    let geometric = || DiscreteMap::bernoulli(1.0 / mean, dt);
    if m <= 1 {
        return Ok((geometric()?, None));
    }
    let take = taus.len().min(cfg.max_durations);
    let x: Vec<f64> = taus[..take].iter().map(|&t| t as f64 * dt).collect();
    match map::fit_map(&x, m, &cfg.map_opts) {
        Ok(fit) => match map::discretize_map(&fit.map, dt) {
            Ok(d) => Ok((d, Some(fit.loglik))),
            Err(e) => {
                notes.push(format!("{what}: MAP({m}) rejected ({e}); geometric durations used"));
                Ok((geometric()?, None))
            }
        },
        Err(Error::InsufficientData(msg)) => {
            notes.push(format!("{what}: {msg}; geometric durations used"));
            Ok((geometric()?, None))
        }
        Err(e) => Err(e),
    }
}

/// Fits the composed model to a slot series.
pub fn fit_slots(disc: &DiscretizedTrace, cfg: &FitConfig) -> Result<(DMaparHmm, FitReport)> {
    let dt = disc.dt;
    let demod = trace::demodulate(disc);
    if demod.y.is_empty() {
        return Err(Error::NoArrivals);
    }
    let mut notes = Vec::new();
    let n_slots = disc.a.len();
    let on_fraction = demod.y.len() as f64 / n_slots as f64;
    let (mode, ll_off, ll_on) = if demod.tau_off.is_empty() {
        notes.push("no off phases; carrier is always on".into());
        (CarrierMode::AlwaysOn, None, None)
    } else {
        let (off, ll_off) = fit_durations(&demod.tau_off, cfg.m_off, dt, cfg, "off", &mut notes)?;
        let (on, ll_on) = fit_durations(&demod.tau_on, cfg.m_on, dt, cfg, "on", &mut notes)?;
        (CarrierMode::DualMap { off, on }, ll_off, ll_on)
    };
    let carrier_name = match &mode {
        CarrierMode::AlwaysOn => "always_on".to_string(),
        CarrierMode::DualMap { off, on } => format!("dual_map(m1={}, m2={})", off.m, on.m),
        CarrierMode::PointProcess { off } => format!("point_process(m={})", off.m),
    };
    let mut chain = carrier::build_q(mode)?;
    chain.dt = Some(dt);
    let choice = arhmm::select_order(&demod.y, &cfg.n_candidates, &cfg.p_candidates, cfg.criterion, cfg.residual)?;
    let mut ar = choice.model.clone();
    let (mut n, mut p) = (choice.n, choice.p);
    if !arhmm::is_stationary(&ar) {
        // Best stationary candidate by score.
        let mut table = choice.table.clone();
        table.sort_by(|a, b| a.2.total_cmp(&b.2));
        let mut found = None;
        for (cn, cp, _) in table {
            let m = arhmm::fit_arhmm(&demod.y, cn, cp, cfg.residual)?;
            if arhmm::is_stationary(&m) {
                found = Some((cn, cp, m));
                break;
            }
        }
        let (cn, cp, m) = found.ok_or(Error::NonStationary)?;
        notes.push(format!("AR({p})-HMM({n}) is not stationary; using AR({cp})-HMM({cn})"));
        ar = m;
        n = cn;
        p = cp;
    }
    let model = model::build_t(&chain, &ar, dt)?;
    let report = FitReport {
        dt,
        n_slots,
        on_fraction,
        carrier: carrier_name,
        map_off_loglik: ll_off,
        map_on_loglik: ll_on,
        n,
        p,
        order_table: choice.table,
        notes,
    };
    Ok((model, report))
}

/// Slots a packet trace and fits the composed model.
pub fn fit_trace(tr: &TraceSeries, cfg: &FitConfig) -> Result<(DMaparHmm, FitReport)> {
    let dt = match cfg.dt {
        Some(d) => d,
        None => trace::default_dt(tr)?,
    };
    fit_slots(&trace::discretize(tr, dt)?, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Burstiness {
    pub hurst: f64,
    pub cv: f64,
}

pub fn burstiness(series: &[f64]) -> Result<Burstiness> {
    Ok(Burstiness {
        hurst: trace::hurst(series)?,
        cv: trace::cv(series)?,
    })
}

/// Hurst exponent and CV of a synthetic series drawn from `model`.
pub fn synthetic_burstiness(model: &DMaparHmm, n_slots: usize, seed: u64) -> Result<Burstiness> {
    let mut g = rng::seeded(seed);
    let gen = model::generate(model, n_slots, &mut g)?;
    burstiness(&gen.trace.a)
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// OLS fit of `a_t = mu + phi a_{t-1} + e`.
pub fn ar1_ols(a: &[f64]) -> Result<(f64, f64, f64)> {
    if a.len() < 3 {
        return Err(Error::InsufficientData("AR(1) needs at least 3 samples".into()));
    }
    let x = &a[..a.len() - 1];
    let y = &a[1..];
    let (mx, _) = mean_sd(x);
    let (my, _) = mean_sd(y);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Degenerate("constant series".into()));
    }
    let phi = sxy / sxx;
    let mu = my - phi * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - mu - phi * a).powi(2)).sum();
    Ok((mu, phi, (rss / y.len() as f64).sqrt()))
}

/// Parametrizes one baseline from a slot series.
///
/// `unit` is the batch size quantum for the batch MAP.
pub fn fit_baseline(name: &str, disc: &DiscretizedTrace, unit: f64) -> Result<Baseline> {
    let name = Baseline::check_name(name)?;
    let dt = disc.dt;
    let a = &disc.a;
    if a.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let demod: DemodulatedTrace = trace::demodulate(disc);
    if demod.y.is_empty() {
        return Err(Error::NoArrivals);
    }
    let n = a.len() as f64;
    let lambda = demod.y.len() as f64 / (n * dt);
    let (ym, ysd) = mean_sd(&demod.y);
    let gaps = || -> Vec<usize> {
        let idx: Vec<usize> = (0..a.len()).filter(|&k| a[k] > 0.0).collect();
        idx.windows(2).map(|w| w[1] - w[0]).collect()
    };
    Ok(match name {
        "poisson" => Baseline::Poisson { lambda, amplitude: ym, dt },
        "cpoisson" => Baseline::CPoisson { lambda, mean: ym, sd: ysd, dt },
        "normal" => {
            let (m, s) = mean_sd(a);
            Baseline::Normal { mu: m, sigma: s, dt }
        }
        "exponential" => Baseline::Exponential { mean: mean_sd(a).0, dt },
        "ar" => {
            let (mu, phi, sigma) = ar1_ols(a)?;
            if !(phi.abs() < 1.0) {
                return Err(Error::NonStationary);
            }
            Baseline::Ar { mu, phi: vec![phi], sigma, dt }
        }
        "mmoo" => {
            if demod.tau_off.is_empty() {
                return Err(Error::InsufficientData("no off phases".into()));
            }
            let m_off = demod.tau_off.iter().sum::<usize>() as f64 / demod.tau_off.len() as f64;
            let m_on = demod.tau_on.iter().sum::<usize>() as f64 / demod.tau_on.len() as f64;
            Baseline::Mmoo {
                alpha: 1.0 / (m_off * dt),
                beta: 1.0 / (m_on * dt),
                peak: ym,
                dt,
            }
        }
        "mmp" => {
            let ar: ArHmm = arhmm::fit_arhmm(a, 2, 0, Residual::Normal)?;
            Baseline::Mmp { arhmm: ar, dt }
        }
        "map" => {
            let g = gaps();
            let cfg = FitConfig::default();
            let mut notes = Vec::new();
            let (map, _) = fit_durations(&g, 2, dt, &cfg, "event", &mut notes)?;
            Baseline::Map { map, amplitude: ym }
        }
        "bmap" => {
            if !(unit > 0.0) {
                return Err(Error::InvalidArgument("batch unit must be positive".into()));
            }
            let g = gaps();
            let cfg = FitConfig::default();
            let mut notes = Vec::new();
            let (map, _) = fit_durations(&g, 2, dt, &cfg, "event", &mut notes)?;
            let batches: Vec<usize> = demod.y.iter().map(|y| ((y / unit).ceil() as usize).max(1)).collect();
            let b = *batches.iter().max().unwrap();
            let mut pmf = vec![0.0; b];
            for k in &batches {
                pmf[k - 1] += 1.0 / batches.len() as f64;
            }
            let s: f64 = pmf.iter().sum();
            pmf.iter_mut().for_each(|x| *x /= s);
            Baseline::Bmap { map, batch_pmf: pmf, unit }
        }
        _ => unreachable!("checked name"),
    })
}
