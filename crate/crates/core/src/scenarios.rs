//! Bundled bursty traffic models, the seven-server priority network, and
//! the bound-versus-simulation comparison.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arhmm::{ArHmm, Residual};
use crate::carrier::{self, CarrierMode};
use crate::des::{self, SimConfig, Source};
use crate::envelope::RMethod;
use crate::error::{Error, Result};
use crate::pipeline;
use crate::linalg::{from_rows, Mat};
use crate::map::{discretize_map, ContinuousMap};
use crate::model::{self, DMaparHmm};
use crate::rng;
use crate::snc::{self, FlowSpec, PmooConfig, ServerSpec, SourceSpec, TopologySpec};
use crate::trace::DiscretizedTrace;

/// Slot width of the bundled models, seconds.
pub const SCENARIO_DT: f64 = 1e-3;
pub const UTILIZATIONS: [f64; 3] = [0.3, 0.6, 0.8];
pub const BOTTLENECK: &str = "s6";

/// Seven servers; flow1 crosses s1 s2 s5 s6 s7 at the top priority, flow2
/// and flow3 join at s5 and s6 one level below. All flows meet at s6, which
/// runs at `bottleneck_mbps`; every other server runs at `edge_mbps`.
pub fn fig6_topology(edge_mbps: f64, bottleneck_mbps: f64) -> TopologySpec {
    let servers = (1..=7)
        .map(|k| ServerSpec {
            id: format!("s{k}"),
            rate_mbps: if k == 6 { bottleneck_mbps } else { edge_mbps },
            queues: 2,
        })
        .collect();
    let flow = |id: &str, path: &[usize], priority| FlowSpec {
        id: id.into(),
        path: path.iter().map(|k| format!("s{k}")).collect(),
        priority,
        source: Some(SourceSpec::Model(format!("{id}.json"))),
    };
    TopologySpec {
        servers,
        flows: vec![
            flow("flow1", &[1, 2, 5, 6, 7], 0),
            flow("flow2", &[3, 5, 6], 1),
            flow("flow3", &[4, 6, 7], 1),
        ],
        max_packet_bytes: 1500.0,
    }
}

/// Renewal MAP whose inter-event times are a mixture of exponentials.
fn hyperexp(rates: &[f64], weights: &[f64]) -> Result<ContinuousMap> {
    let m = rates.len();
    let c0 = Mat::from_fn(m, m, |i, j| if i == j { -rates[i] } else { 0.0 });
    let c1 = Mat::from_fn(m, m, |i, j| rates[i] * weights[j]);
    ContinuousMap::new(c0, c1)
}

/// MAP with correlated successive durations: the phase tends to persist
/// across events.
fn sticky(rates: &[f64], stay: f64) -> Result<ContinuousMap> {
    let m = rates.len();
    let c0 = Mat::from_fn(m, m, |i, j| if i == j { -rates[i] } else { 0.0 });
    let c1 = Mat::from_fn(m, m, |i, j| {
        let w = if i == j { stay } else { (1.0 - stay) / (m - 1) as f64 };
        rates[i] * w
    });
    ContinuousMap::new(c0, c1)
}

fn chain(off: ContinuousMap, on: ContinuousMap, dt: f64) -> Result<carrier::CarrierChain> {
    let mut c = carrier::build_q(CarrierMode::DualMap {
        off: discretize_map(&off, dt)?,
        on: discretize_map(&on, dt)?,
    })?;
    c.dt = Some(dt);
    Ok(c)
}

/// The three unscaled traffic models.
pub fn bursty_models(dt: f64) -> Result<Vec<(String, DMaparHmm)>> {
    // Long-tailed off periods, short on bursts, two amplitude regimes with
    // AR(1) memory.
    let m1 = {
        let c = chain(hyperexp(&[60.0, 4.0], &[0.7, 0.3])?, hyperexp(&[120.0], &[1.0])?, dt)?;
        let ar = ArHmm {
            n_states: 2,
            transition: from_rows(&[vec![0.97, 0.03], vec![0.06, 0.94]])?,
            p: 1,
            mu: vec![1000.0, 3000.0],
            phi: vec![vec![0.5, 0.5]],
            sigma: vec![200.0, 500.0],
            residual: Residual::Normal,
            pi0: vec![0.5, 0.5],
        };
        model::build_t(&c, &ar, dt)?
    };
    // Correlated on durations, i.i.d. two-level amplitudes.
    let m2 = {
        let c = chain(hyperexp(&[25.0], &[1.0])?, sticky(&[150.0, 15.0], 0.8)?, dt)?;
        let ar = ArHmm {
            n_states: 2,
            transition: from_rows(&[vec![0.95, 0.05], vec![0.05, 0.95]])?,
            p: 0,
            mu: vec![1500.0, 6000.0],
            phi: Vec::new(),
            sigma: vec![300.0, 1200.0],
            residual: Residual::Normal,
            pi0: vec![0.5, 0.5],
        };
        model::build_t(&c, &ar, dt)?
    };
    // Both phases two-state, single AR(2) amplitude process.
    let m3 = {
        let c = chain(sticky(&[80.0, 8.0], 0.7)?, sticky(&[200.0, 30.0], 0.7)?, dt)?;
        let ar = ArHmm {
            n_states: 1,
            transition: from_rows(&[vec![1.0]])?,
            p: 2,
            mu: vec![800.0],
            phi: vec![vec![0.5], vec![0.3]],
            sigma: vec![300.0],
            residual: Residual::Normal,
            pi0: vec![1.0],
        };
        model::build_t(&c, &ar, dt)?
    };
    Ok(vec![
        ("heavy_off".into(), m1),
        ("sticky_on".into(), m2),
        ("ar2_burst".into(), m3),
    ])
}

/// Multiplies every amplitude by `factor`; AR coefficients are unchanged.
pub fn scale_model(m: &DMaparHmm, factor: f64) -> Result<DMaparHmm> {
    let mut ar = m.arhmm.clone();
    ar.mu.iter_mut().for_each(|x| *x *= factor);
    ar.sigma.iter_mut().for_each(|x| *x *= factor);
    model::build_t(&m.carrier, &ar, m.dt)
}

/// Long-run emitted bytes per second, measured on a synthetic run so that
/// clamping of negative amplitudes is included.
pub fn empirical_rate(m: &DMaparHmm, n_slots: usize, seed: u64) -> Result<f64> {
    let mut g = rng::seeded(seed);
    let gen = model::generate(m, n_slots, &mut g)?;
    Ok(gen.trace.a.iter().sum::<f64>() / (n_slots as f64 * m.dt))
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub model_name: String,
    pub utilization: f64,
    pub topology: TopologySpec,
    /// Per-flow traffic models.
    pub models: HashMap<String, DMaparHmm>,
}

/// Scales `base` so that the three flows together load the bottleneck to
/// `utilization`.
pub fn build_scenario(
    model_name: &str,
    base: &DMaparHmm,
    utilization: f64,
    topology: &TopologySpec,
) -> Result<Scenario> {
    let c = topology.rate_bits(BOTTLENECK) / 8.0;
    let per_flow = utilization * c / topology.flows.len() as f64;
    let mut factor = per_flow / empirical_rate(base, 400_000, 7)?;
    let mut scaled = scale_model(base, factor)?;
    // One correction for the clamp, whose share does not scale linearly.
    let r = empirical_rate(&scaled, 400_000, 7)?;
    factor *= per_flow / r;
    scaled = scale_model(base, factor)?;
    let models = topology
        .flows
        .iter()
        .map(|f| (f.id.clone(), scaled.clone()))
        .collect();
    Ok(Scenario {
        name: format!("{model_name}@{utilization}"),
        model_name: model_name.into(),
        utilization,
        topology: topology.clone(),
        models,
    })
}

/// Three models times three utilizations on the 100/35 Mbps network.
pub fn bundled_scenarios() -> Result<Vec<Scenario>> {
    let topo = fig6_topology(100.0, 35.0);
    let mut out = Vec::new();
    for (name, m) in bursty_models(SCENARIO_DT)? {
        for u in UTILIZATIONS {
            out.push(build_scenario(&name, &m, u, &topo)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CompareConfig {
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Simulated seconds per seed; chosen from a pilot run when absent so
    /// that every flow collects `10 / min(eps)` delays.
    pub duration: Option<f64>,
    pub baselines: Vec<String>,
    pub grid: Option<Vec<f64>>,
    pub r_method: RMethod,
    pub pmoo: PmooConfig,
    pub mtu: f64,
    pub max_duration: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            epsilons: vec![1e-3, 1e-4],
            seeds: (0..20).collect(),
            duration: None,
            baselines: vec!["normal".into(), "cpoisson".into()],
            grid: None,
            r_method: RMethod::default(),
            pmoo: PmooConfig::default(),
            mtu: 1500.0,
            max_duration: 3600.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub scenario: String,
    pub flow_id: String,
    /// `dmapar` or a baseline name.
    pub model: String,
    pub epsilon: f64,
    /// Infinite when the network is unstable for this model.
    pub bound_s: f64,
    pub seed: u64,
    pub quantile_s: f64,
    pub n: usize,
    pub reliable: bool,
    pub tightness: f64,
}

/// Grid scaled to the mean on-slot amount of the flows' slot series.
pub fn grid_for(series: &HashMap<String, DiscretizedTrace>) -> Vec<f64> {
    let (mut sum, mut cnt) = (0.0, 0usize);
    for s in series.values() {
        for a in s.a.iter().filter(|a| **a > 0.0) {
            sum += a;
            cnt += 1;
        }
    }
    snc::default_grid(if cnt > 0 { sum / cnt as f64 } else { 1.0 })
}

/// Bounds for every flow, keyed by `(model, flow, eps)`, infinite when
/// unstable.
pub fn network_bounds(
    topo: &TopologySpec,
    models: &HashMap<String, DMaparHmm>,
    series: &HashMap<String, DiscretizedTrace>,
    cfg: &CompareConfig,
) -> Result<Vec<(String, String, f64, f64)>> {
    let grid = cfg.grid.clone().unwrap_or_else(|| grid_for(series));
    let mut sets: Vec<(String, HashMap<String, snc::SigmaRhoEnvelope>)> = Vec::new();
    sets.push(("dmapar".into(), snc::arrival_envelopes(models, &grid, cfg.r_method)?));
    for b in &cfg.baselines {
        let mut env = HashMap::new();
        for f in &topo.flows {
            let s = series
                .get(&f.id)
                .ok_or_else(|| Error::InvalidArgument(format!("no slot series for `{}`", f.id)))?;
            let spec = pipeline::fit_baseline(b, s, cfg.mtu)?;
            let m = model::from_baseline(&spec)?;
            env.insert(f.id.clone(), snc::model_envelope(&m, &grid, cfg.r_method, &f.id)?);
        }
        sets.push((b.clone(), env));
    }
    let mut out = Vec::new();
    for (name, env) in &sets {
        for f in &topo.flows {
            for &eps in &cfg.epsilons {
                let v = match snc::e2e_delay_bound(topo, &f.id, env, eps, &cfg.pmoo) {
                    Ok(b) => b.value,
                    Err(Error::Unstable(_)) => f64::INFINITY,
                    Err(e) => return Err(e),
                };
                out.push((name.clone(), f.id.clone(), eps, v));
            }
        }
    }
    Ok(out)
}

/// Seconds needed for every flow to deliver `10 / min(eps)` packets,
/// estimated from a short pilot run.
pub fn auto_duration(topo: &TopologySpec, sources: &HashMap<String, Source>, cfg: &CompareConfig) -> Result<f64> {
    let eps = cfg.epsilons.iter().cloned().fold(f64::INFINITY, f64::min);
    let need = (10.0 / eps).ceil();
    let pilot = 20.0;
    let mut sc = SimConfig::new(pilot, cfg.seeds.first().copied().unwrap_or(0) ^ 0x9e37);
    sc.mtu = cfg.mtu;
    let r = des::simulate(topo, sources, &sc)?;
    let rate = r
        .flows
        .iter()
        .map(|f| f.departed as f64 / pilot)
        .fold(f64::INFINITY, f64::min);
    if !(rate > 0.0) {
        return Err(Error::NoArrivals);
    }
    Ok((1.3 * need / rate).min(cfg.max_duration))
}

/// Bound of every model against the simulated quantile of every flow and
/// seed. Seeds run in parallel.
pub fn compare_network(
    scenario: &str,
    topo: &TopologySpec,
    models: &HashMap<String, DMaparHmm>,
    sources: &HashMap<String, Source>,
    series: &HashMap<String, DiscretizedTrace>,
    cfg: &CompareConfig,
) -> Result<Vec<CompareRow>> {
    let bounds = network_bounds(topo, models, series, cfg)?;
    let duration = match cfg.duration {
        Some(d) => d,
        None => auto_duration(topo, sources, cfg)?,
    };
    let runs: Vec<Result<des::SimResult>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut sc = SimConfig::new(duration, seed);
            sc.mtu = cfg.mtu;
            des::simulate(topo, sources, &sc)
        })
        .collect();
    let mut rows = Vec::new();
    for run in runs {
        let run = run?;
        for (model, flow, eps, bound) in &bounds {
            let f = run.flow(flow).expect("flow simulated");
            let q = des::empirical_quantile(&f.delays, *eps)?;
            let c = des::compare_values(*bound, q);
            rows.push(CompareRow {
                scenario: scenario.into(),
                flow_id: flow.clone(),
                model: model.clone(),
                epsilon: *eps,
                bound_s: *bound,
                seed: run.seed,
                quantile_s: q,
                n: f.delays.len(),
                reliable: c.reliable,
                tightness: c.tightness,
            });
        }
    }
    Ok(rows)
}

/// Runs the comparison on a bundled scenario. Baselines are fitted to a
/// synthetic slot series of each flow.
pub fn compare_scenario(sc: &Scenario, cfg: &CompareConfig, fit_slots: usize) -> Result<Vec<CompareRow>> {
    let mut sources = HashMap::new();
    let mut series = HashMap::new();
    for (k, f) in sc.topology.flows.iter().enumerate() {
        let m = &sc.models[&f.id];
        sources.insert(f.id.clone(), Source::Model(m.clone()));
        let mut g = rng::stream(0x5eed, k as u64);
        series.insert(f.id.clone(), model::generate(m, fit_slots, &mut g)?.trace);
    }
    compare_network(&sc.name, &sc.topology, &sc.models, &sources, &series, cfg)
}

/// Writes comparison rows as CSV.
pub fn write_compare_csv<W: std::io::Write>(w: W, rows: &[CompareRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}
