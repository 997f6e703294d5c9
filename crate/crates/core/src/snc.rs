//! `(sigma, rho)` calculus over feed-forward networks of constant-rate,
//! strict-priority servers.
//!
//! Arrival envelopes bound `E[e^{theta A(s,t)}] <= e^{theta (sigma + rho (t-s) dt)}`;
//! service envelopes bound `E[e^{-theta S(s,t)}] <= e^{theta (sigma - rho (t-s) dt)}`.
//! `sigma` is in bytes, `rho` in bytes per second and `theta` in 1/bytes.
//! Flows are assumed independent.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::envelope::{EnvelopeContext, RMethod, SigmaRhoPoint};
use crate::error::{Error, Result};
use crate::model::DMaparHmm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvelopeKind {
    Arrival,
    Service,
}

pub type Evaluator = Arc<dyn Fn(f64) -> SigmaRhoPoint + Send + Sync>;

#[derive(Clone)]
pub struct SigmaRhoEnvelope {
    pub kind: EnvelopeKind,
    pub thetas: Vec<f64>,
    pub points: Vec<SigmaRhoPoint>,
    pub label: String,
    /// Slot width used in the geometric-sum terms, seconds.
    pub dt_ref: f64,
    /// Evaluates the same envelope at an arbitrary theta.
    pub eval: Option<Evaluator>,
}

impl fmt::Debug for SigmaRhoEnvelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigmaRhoEnvelope")
            .field("kind", &self.kind)
            .field("label", &self.label)
            .field("dt_ref", &self.dt_ref)
            .field("points", &self.points)
            .finish()
    }
}

impl SigmaRhoEnvelope {
    pub fn from_fn(kind: EnvelopeKind, label: &str, grid: &[f64], dt_ref: f64, eval: Evaluator) -> Result<Self> {
        check_grid(grid)?;
        let points = grid.iter().map(|&t| eval(t)).collect();
        Ok(SigmaRhoEnvelope {
            kind,
            thetas: grid.to_vec(),
            points,
            label: label.to_string(),
            dt_ref,
            eval: Some(eval),
        })
    }

    /// Envelope from precomputed points without an off-grid evaluator.
    pub fn from_points(kind: EnvelopeKind, label: &str, points: Vec<SigmaRhoPoint>, dt_ref: f64) -> Result<Self> {
        let thetas: Vec<f64> = points.iter().map(|p| p.theta).collect();
        check_grid(&thetas)?;
        Ok(SigmaRhoEnvelope {
            kind,
            thetas,
            points,
            label: label.to_string(),
            dt_ref,
            eval: None,
        })
    }

    pub fn at(&self, theta: f64) -> Option<SigmaRhoPoint> {
        if let Some(e) = &self.eval {
            return Some(e(theta));
        }
        self.thetas
            .iter()
            .position(|t| *t == theta)
            .map(|i| self.points[i].clone())
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.label = label.to_string();
        self
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
        return Err(Error::InvalidArgument("theta grid must be non-empty and positive".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("theta grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Log-spaced grid of `n` points over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Default grid: 64 points over `[1e-6, 10] / mean_burst_bytes`.
pub fn default_grid(mean_burst_bytes: f64) -> Vec<f64> {
    let s = 1.0 / mean_burst_bytes.max(1e-12);
    log_grid(1e-6 * s, 10.0 * s, 64)
}

fn combine(
    a: &SigmaRhoEnvelope,
    b: &SigmaRhoEnvelope,
    kind: EnvelopeKind,
    label: String,
    f: impl Fn(&SigmaRhoPoint, &SigmaRhoPoint, f64) -> SigmaRhoPoint + Send + Sync + 'static,
) -> Result<SigmaRhoEnvelope> {
    if a.thetas != b.thetas {
        return Err(Error::InvalidArgument("envelopes use different theta grids".into()));
    }
    let dt = a.dt_ref;
    let f = Arc::new(f);
    let points = a
        .points
        .iter()
        .zip(&b.points)
        .map(|(p, q)| f(p, q, dt))
        .collect();
    let eval: Option<Evaluator> = match (&a.eval, &b.eval) {
        (Some(ea), Some(eb)) => {
            let (ea, eb, f) = (ea.clone(), eb.clone(), f.clone());
            Some(Arc::new(move |t| f(&ea(t), &eb(t), dt)))
        }
        _ => None,
    };
    Ok(SigmaRhoEnvelope {
        kind,
        thetas: a.thetas.clone(),
        points,
        label,
        dt_ref: dt,
        eval,
    })
}

fn join_flags(a: &str, b: &str, extra: &str) -> String {
    let mut parts: Vec<&str> = Vec::new();
    for s in [a, b, extra] {
        for p in s.split(';') {
            if !p.is_empty() && !parts.contains(&p) {
                parts.push(p);
            }
        }
    }
    parts.join(";")
}

/// Arrival envelope of a model over a grid, with an evaluator for
/// refinement.
pub fn model_envelope(model: &DMaparHmm, grid: &[f64], r: RMethod, label: &str) -> Result<SigmaRhoEnvelope> {
    let ctx = Arc::new(EnvelopeContext::new(model, r)?);
    let eval: Evaluator = Arc::new(move |t| match ctx.point(t) {
        Ok(p) => p,
        Err(e) => SigmaRhoPoint::invalid(t, &e.to_string()),
    });
    SigmaRhoEnvelope::from_fn(EnvelopeKind::Arrival, label, grid, model.dt, eval)
}

/// `sigma = 0, rho = c` for a server of `c_bits` bits per second.
pub fn constant_rate_service(c_bits: f64, grid: &[f64], dt_ref: f64) -> Result<SigmaRhoEnvelope> {
    rate_latency_service(c_bits, 0.0, grid, dt_ref)
}

/// Rate-latency server: `S(s,t) >= R (t - s - T)`, i.e. `sigma = R T`.
pub fn rate_latency_service(c_bits: f64, latency_s: f64, grid: &[f64], dt_ref: f64) -> Result<SigmaRhoEnvelope> {
    if !(c_bits > 0.0) || !c_bits.is_finite() {
        return Err(Error::InvalidArgument(format!("service rate must be positive, got {c_bits}")));
    }
    let r = c_bits / 8.0;
    let eval: Evaluator = Arc::new(move |t| SigmaRhoPoint {
        theta: t,
        sigma: r * latency_s,
        rho: r,
        valid: true,
        flags: String::new(),
    });
    SigmaRhoEnvelope::from_fn(EnvelopeKind::Service, &format!("rate({c_bits})"), grid, dt_ref, eval)
}

/// Independent multiplexing: sigmas and rhos add.
pub fn aggregate(a1: &SigmaRhoEnvelope, a2: &SigmaRhoEnvelope) -> Result<SigmaRhoEnvelope> {
    combine(a1, a2, EnvelopeKind::Arrival, format!("{}+{}", a1.label, a2.label), |p, q, _| {
        SigmaRhoPoint {
            theta: p.theta,
            sigma: p.sigma + q.sigma,
            rho: p.rho + q.rho,
            valid: p.valid && q.valid,
            flags: join_flags(&p.flags, &q.flags, ""),
        }
    })
}

/// Service left over after serving `cross` first.
pub fn leftover(s: &SigmaRhoEnvelope, cross: &SigmaRhoEnvelope) -> Result<SigmaRhoEnvelope> {
    combine(s, cross, EnvelopeKind::Service, format!("({})-({})", s.label, cross.label), |p, q, _| {
        let rho = p.rho - q.rho;
        SigmaRhoPoint {
            theta: p.theta,
            sigma: p.sigma + q.sigma,
            rho,
            valid: p.valid && q.valid && rho > 0.0,
            flags: join_flags(&p.flags, &q.flags, if rho > 0.0 { "" } else { "unstable" }),
        }
    })
}

#[derive(Debug, Clone, Copy)]
pub struct ConcatConfig {
    /// Relative rate reduction applied when the two rates coincide.
    pub slack_rel: f64,
}

impl Default for ConcatConfig {
    fn default() -> Self {
        ConcatConfig { slack_rel: 1e-3 }
    }
}

fn concat_point(p: &SigmaRhoPoint, q: &SigmaRhoPoint, dt: f64, cfg: ConcatConfig) -> SigmaRhoPoint {
    let (mut r1, mut r2) = (p.rho, q.rho);
    let mut extra = "";
    if (r1 - r2).abs() <= cfg.slack_rel * r1.abs().max(r2.abs()) {
        let d = cfg.slack_rel * r1.max(r2);
        if r1 <= r2 {
            r1 = r2 - d;
        } else {
            r2 = r1 - d;
        }
        extra = "slack";
    }
    let diff = (r1 - r2).abs();
    let term = -(-(-p.theta * dt * diff).exp()).ln_1p() / p.theta;
    SigmaRhoPoint {
        theta: p.theta,
        sigma: p.sigma + q.sigma + term,
        rho: r1.min(r2),
        valid: p.valid && q.valid,
        flags: join_flags(&p.flags, &q.flags, extra),
    }
}

/// Min-plus convolution of two independent services.
pub fn concatenate(s1: &SigmaRhoEnvelope, s2: &SigmaRhoEnvelope, cfg: &ConcatConfig) -> Result<SigmaRhoEnvelope> {
    let cfg = *cfg;
    combine(s1, s2, EnvelopeKind::Service, format!("{}*{}", s1.label, s2.label), move |p, q, dt| {
        concat_point(p, q, dt, cfg)
    })
}

/// Output envelope of an arrival through a service.
pub fn output(a: &SigmaRhoEnvelope, s: &SigmaRhoEnvelope) -> Result<SigmaRhoEnvelope> {
    combine(a, s, EnvelopeKind::Arrival, format!("out({})", a.label), |p, q, dt| {
        let gap = p.rho - q.rho;
        if !(gap < 0.0) || !p.valid || !q.valid {
            return SigmaRhoPoint::invalid(p.theta, "unstable");
        }
        let term = -(-(p.theta * dt * gap).exp()).ln_1p() / p.theta;
        SigmaRhoPoint {
            theta: p.theta,
            sigma: p.sigma + q.sigma + term,
            rho: p.rho,
            valid: true,
            flags: join_flags(&p.flags, &q.flags, ""),
        }
    })
}

/// Adds a constant burst to an arrival envelope.
pub fn add_burst(a: &SigmaRhoEnvelope, bytes: f64) -> SigmaRhoEnvelope {
    let mut out = a.clone();
    for p in out.points.iter_mut() {
        p.sigma += bytes;
    }
    out.eval = a.eval.clone().map(|e| -> Evaluator {
        Arc::new(move |t| {
            let mut p = e(t);
            p.sigma += bytes;
            p
        })
    });
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerSpec {
    pub id: String,
    pub rate_mbps: f64,
    #[serde(default = "default_queues")]
    pub queues: usize,
}

fn default_queues() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceSpec {
    Model(String),
    Trace(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub id: String,
    pub path: Vec<String>,
    /// 0 is the highest priority.
    pub priority: usize,
    #[serde(default)]
    pub source: Option<SourceSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub servers: Vec<ServerSpec>,
    pub flows: Vec<FlowSpec>,
    /// Largest packet any flow emits.
    #[serde(default = "default_mtu")]
    pub max_packet_bytes: f64,
}

fn default_mtu() -> f64 {
    1500.0
}

impl TopologySpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let t: TopologySpec = toml::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn server(&self, id: &str) -> Option<&ServerSpec> {
        self.servers.iter().find(|s| s.id == id)
    }

    pub fn flow(&self, id: &str) -> Option<&FlowSpec> {
        self.flows.iter().find(|f| f.id == id)
    }

    /// Server rate in bits per second.
    pub fn rate_bits(&self, id: &str) -> f64 {
        self.server(id).map(|s| s.rate_mbps * 1e6).unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.servers {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate server `{}`", s.id)));
            }
            if !(s.rate_mbps > 0.0) {
                return Err(Error::InvalidArgument(format!("server `{}` needs a positive rate", s.id)));
            }
        }
        let mut fseen = std::collections::HashSet::new();
        for f in &self.flows {
            if !fseen.insert(f.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate flow `{}`", f.id)));
            }
            if f.path.is_empty() {
                return Err(Error::InvalidArgument(format!("flow `{}` has an empty path", f.id)));
            }
            let mut hops = std::collections::HashSet::new();
            for h in &f.path {
                if self.server(h).is_none() {
                    return Err(Error::InvalidArgument(format!("flow `{}` uses unknown server `{h}`", f.id)));
                }
                if !hops.insert(h) {
                    return Err(Error::NotFeedForward(format!("flow `{}` visits `{h}` twice", f.id)));
                }
            }
        }
        // Kahn's algorithm on the server graph induced by the paths.
        let mut edges: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        let mut indeg: BTreeMap<&str, usize> = self.servers.iter().map(|s| (s.id.as_str(), 0)).collect();
        for f in &self.flows {
            for w in f.path.windows(2) {
                let e = edges.entry(w[0].as_str()).or_default();
                if !e.contains(&w[1].as_str()) {
                    e.push(w[1].as_str());
                    *indeg.get_mut(w[1].as_str()).unwrap() += 1;
                }
            }
        }
        let mut ready: Vec<&str> = indeg.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
        let mut done = 0;
        while let Some(n) = ready.pop() {
            done += 1;
            for m in edges.get(n).cloned().unwrap_or_default() {
                let d = indeg.get_mut(m).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push(m);
                }
            }
        }
        if done != self.servers.len() {
            return Err(Error::NotFeedForward("server graph has a cycle".into()));
        }
        Ok(())
    }
}

/// Knobs for the network reduction.
#[derive(Debug, Clone, Copy)]
pub struct PmooConfig {
    pub concat: ConcatConfig,
    /// Per-hop latency covering the slot granularity of the arrivals.
    pub slot_latency: bool,
    /// Non-preemptive blocking and store-and-forward packetization terms.
    pub packet_terms: bool,
}

impl Default for PmooConfig {
    fn default() -> Self {
        PmooConfig {
            concat: ConcatConfig::default(),
            slot_latency: true,
            packet_terms: true,
        }
    }
}

#[derive(Debug, Clone)]
enum Piece {
    Det { rate: f64, latency: f64 },
    Stoch(SigmaRhoEnvelope),
}

struct Interval {
    lo: usize,
    hi: usize,
    flows: Vec<(String, usize)>,
}

/// End-to-end service of `flow_id` by pay-multiplexing-only-once.
///
/// Every cross flow of higher or equal priority is subtracted once over each
/// maximal run of servers it shares with the flow of interest. Interfering
/// arrivals are taken at the run's first server, i.e. after the cross flow's
/// own upstream hops. Crossing runs are widened to their union so that the
/// runs stay nested.
pub fn pmoo_e2e(
    topo: &TopologySpec,
    flow_id: &str,
    arrivals: &HashMap<String, SigmaRhoEnvelope>,
    cfg: &PmooConfig,
) -> Result<SigmaRhoEnvelope> {
    topo.validate()?;
    let flow = topo
        .flow(flow_id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown flow `{flow_id}`")))?;
    pmoo_path(topo, flow, &flow.path, arrivals, cfg, 0)
}

fn grid_of(arrivals: &HashMap<String, SigmaRhoEnvelope>, id: &str) -> Result<(Vec<f64>, f64)> {
    let a = arrivals
        .get(id)
        .ok_or_else(|| Error::InvalidArgument(format!("missing arrival envelope for `{id}`")))?;
    Ok((a.thetas.clone(), a.dt_ref))
}

fn hop_latency(topo: &TopologySpec, flow: &FlowSpec, server: &str, first: bool, dt: f64, cfg: &PmooConfig) -> f64 {
    let rate = topo.rate_bits(server) / 8.0;
    let mut lat = 0.0;
    if cfg.slot_latency {
        lat += dt;
    }
    if cfg.packet_terms {
        let lower = topo
            .flows
            .iter()
            .any(|g| g.priority > flow.priority && g.path.iter().any(|h| h == server));
        if lower {
            lat += topo.max_packet_bytes / rate;
        }
        if !first {
            lat += topo.max_packet_bytes / rate;
        }
    }
    lat
}

fn pmoo_path(
    topo: &TopologySpec,
    flow: &FlowSpec,
    path: &[String],
    arrivals: &HashMap<String, SigmaRhoEnvelope>,
    cfg: &PmooConfig,
    depth: usize,
) -> Result<SigmaRhoEnvelope> {
    if depth > topo.flows.len() + 1 {
        return Err(Error::NotFeedForward("interference recursion does not terminate".into()));
    }
    let (grid, dt) = grid_of(arrivals, &flow.id)?;
    let first_on_full = flow.path.first() == path.first();
    // Maximal shared runs.
    let mut intervals: Vec<Interval> = Vec::new();
    for g in &topo.flows {
        if g.id == flow.id || g.priority > flow.priority {
            continue;
        }
        let mut k = 0;
        while k < path.len() {
            let Some(pos) = g.path.iter().position(|h| *h == path[k]) else {
                k += 1;
                continue;
            };
            let mut end = k;
            while end + 1 < path.len()
                && pos + (end + 1 - k) < g.path.len()
                && g.path[pos + end + 1 - k] == path[end + 1]
            {
                end += 1;
            }
            intervals.push(Interval {
                lo: k,
                hi: end,
                flows: vec![(g.id.clone(), pos)],
            });
            k = end + 1;
        }
    }
    // Widen crossing runs until the family is laminar, then merge equal runs.
    loop {
        let mut changed = false;
        'outer: for a in 0..intervals.len() {
            for b in 0..intervals.len() {
                if a == b {
                    continue;
                }
                let (x, y) = (&intervals[a], &intervals[b]);
                let crossing = x.lo < y.lo && y.lo <= x.hi && x.hi < y.hi;
                if crossing {
                    let (lo, hi) = (x.lo, y.hi);
                    intervals[a].lo = lo;
                    intervals[a].hi = hi;
                    intervals[b].lo = lo;
                    intervals[b].hi = hi;
                    changed = true;
                    break 'outer;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut merged: Vec<Interval> = Vec::new();
    for iv in intervals {
        if let Some(m) = merged.iter_mut().find(|m| m.lo == iv.lo && m.hi == iv.hi) {
            m.flows.extend(iv.flows);
        } else {
            merged.push(iv);
        }
    }
    // Interfering arrivals at the start of their run.
    let mut cross: Vec<Vec<SigmaRhoEnvelope>> = Vec::new();
    for iv in &merged {
        let mut v = Vec::new();
        for (gid, pos) in &iv.flows {
            let g = topo.flow(gid).unwrap();
            let raw = arrivals
                .get(gid)
                .ok_or_else(|| Error::InvalidArgument(format!("missing arrival envelope for `{gid}`")))?;
            let at = if *pos == 0 {
                raw.clone()
            } else {
                let upstream = pmoo_path(topo, g, &g.path[..*pos], arrivals, cfg, depth + 1)?;
                let out = output(raw, &upstream)?;
                if cfg.packet_terms {
                    add_burst(&out, topo.max_packet_bytes)
                } else {
                    out
                }
            };
            v.push(at);
        }
        cross.push(v);
    }
    let ctx = Builder {
        topo,
        flow,
        path,
        cfg,
        grid: &grid,
        dt,
        first_on_full,
        intervals: &merged,
        cross: &cross,
    };
    let whole = ctx.build(0, path.len() - 1, None)?;
    Ok(whole.with_label(&format!("e2e({})", flow.id)))
}

struct Builder<'a> {
    topo: &'a TopologySpec,
    flow: &'a FlowSpec,
    path: &'a [String],
    cfg: &'a PmooConfig,
    grid: &'a [f64],
    dt: f64,
    first_on_full: bool,
    intervals: &'a [Interval],
    cross: &'a [Vec<SigmaRhoEnvelope>],
}

impl Builder<'_> {
    /// Service of positions `lo..=hi`; `own` is the interval that spans
    /// exactly this range, whose flows are subtracted at the end.
    fn build(&self, lo: usize, hi: usize, own: Option<usize>) -> Result<SigmaRhoEnvelope> {
        // Top-level children strictly inside [lo, hi] (or equal when own is None).
        let inside = |k: usize| {
            let iv = &self.intervals[k];
            Some(k) != own
                && iv.lo >= lo
                && iv.hi <= hi
                && !(own.is_some() && iv.lo == lo && iv.hi == hi)
        };
        let candidates: Vec<usize> = (0..self.intervals.len()).filter(|&k| inside(k)).collect();
        let top: Vec<usize> = candidates
            .iter()
            .cloned()
            .filter(|&k| {
                let iv = &self.intervals[k];
                !candidates.iter().any(|&m| {
                    let o = &self.intervals[m];
                    m != k && o.lo <= iv.lo && iv.hi <= o.hi && (o.hi - o.lo) > (iv.hi - iv.lo)
                })
            })
            .collect();
        let mut pieces: Vec<Piece> = Vec::new();
        let mut k = lo;
        while k <= hi {
            if let Some(&c) = top.iter().find(|&&c| self.intervals[c].lo == k) {
                let iv = &self.intervals[c];
                pieces.push(Piece::Stoch(self.build(iv.lo, iv.hi, Some(c))?));
                k = iv.hi + 1;
            } else {
                let server = &self.path[k];
                let first = k == 0 && self.first_on_full;
                let lat = hop_latency(self.topo, self.flow, server, first, self.dt, self.cfg);
                let rate = self.topo.rate_bits(server);
                match pieces.last_mut() {
                    Some(Piece::Det { rate: r, latency }) => {
                        *r = r.min(rate);
                        *latency += lat;
                    }
                    _ => pieces.push(Piece::Det { rate, latency: lat }),
                }
                k += 1;
            }
        }
        let mut acc: Option<SigmaRhoEnvelope> = None;
        for p in pieces {
            let env = match p {
                Piece::Det { rate, latency } => rate_latency_service(rate, latency, self.grid, self.dt)?,
                Piece::Stoch(e) => e,
            };
            acc = Some(match acc {
                None => env,
                Some(a) => concatenate(&a, &env, &self.cfg.concat)?,
            });
        }
        let mut s = acc.expect("non-empty segment");
        if let Some(o) = own {
            for c in &self.cross[o] {
                s = leftover(&s, c)?;
            }
        }
        Ok(s)
    }
}

/// Hop-by-hop reduction: every hop subtracts its cross traffic separately.
/// Used as the comparison point for the multiplexing-once reduction.
pub fn hop_by_hop_e2e(
    topo: &TopologySpec,
    flow_id: &str,
    arrivals: &HashMap<String, SigmaRhoEnvelope>,
    cfg: &PmooConfig,
) -> Result<SigmaRhoEnvelope> {
    topo.validate()?;
    let flow = topo
        .flow(flow_id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown flow `{flow_id}`")))?;
    let (grid, dt) = grid_of(arrivals, flow_id)?;
    let mut acc: Option<SigmaRhoEnvelope> = None;
    for (k, server) in flow.path.iter().enumerate() {
        let lat = hop_latency(topo, flow, server, k == 0, dt, cfg);
        let mut s = rate_latency_service(topo.rate_bits(server), lat, &grid, dt)?;
        for g in &topo.flows {
            if g.id == flow.id || g.priority > flow.priority {
                continue;
            }
            if let Some(pos) = g.path.iter().position(|h| h == server) {
                let raw = &arrivals[&g.id];
                let at = if pos == 0 {
                    raw.clone()
                } else {
                    let sub = FlowSpec {
                        id: g.id.clone(),
                        path: g.path[..pos].to_vec(),
                        priority: g.priority,
                        source: None,
                    };
                    let mut t2 = topo.clone();
                    t2.flows.retain(|f| f.id != g.id);
                    t2.flows.push(sub);
                    let up = hop_by_hop_e2e(&t2, &g.id, arrivals, cfg)?;
                    output(raw, &up)?
                };
                s = leftover(&s, &at)?;
            }
        }
        acc = Some(match acc {
            None => s,
            Some(a) => concatenate(&a, &s, &cfg.concat)?,
        });
    }
    Ok(acc.unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    /// Seconds for delay bounds, bytes for backlog bounds.
    pub value: f64,
    pub theta_star: f64,
    pub valid_points: usize,
}

fn delay_at(a: &SigmaRhoPoint, s: &SigmaRhoPoint, eps: f64, dt: f64) -> Option<f64> {
    if !a.valid || !s.valid || !(a.rho < s.rho) || !(s.rho > 0.0) {
        return None;
    }
    let th = a.theta;
    let geo = -(th * dt * (a.rho - s.rho)).exp();
    let v = (a.sigma + s.sigma) / s.rho - (eps.ln() + geo.ln_1p()) / (th * s.rho);
    v.is_finite().then_some(v)
}

fn backlog_at(a: &SigmaRhoPoint, s: &SigmaRhoPoint, eps: f64, dt: f64) -> Option<f64> {
    if !a.valid || !s.valid || !(a.rho < s.rho) {
        return None;
    }
    let th = a.theta;
    let geo = -(th * dt * (a.rho - s.rho)).exp();
    let v = a.sigma + s.sigma - (eps.ln() + geo.ln_1p()) / th;
    v.is_finite().then_some(v)
}

fn optimize(
    arrival: &SigmaRhoEnvelope,
    service: &SigmaRhoEnvelope,
    eps: f64,
    f: fn(&SigmaRhoPoint, &SigmaRhoPoint, f64, f64) -> Option<f64>,
) -> Result<BoundResult> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon must lie in (0,1), got {eps}")));
    }
    if arrival.thetas != service.thetas {
        return Err(Error::InvalidArgument("envelopes use different theta grids".into()));
    }
    let dt = arrival.dt_ref;
    let vals: Vec<Option<f64>> = arrival
        .points
        .iter()
        .zip(&service.points)
        .map(|(a, s)| f(a, s, eps, dt))
        .collect();
    let valid = vals.iter().filter(|v| v.is_some()).count();
    let (k, best) = vals
        .iter()
        .enumerate()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| Error::Unstable("no theta with rho_A < rho_S".into()))?;
    let mut result = BoundResult {
        value: best,
        theta_star: arrival.thetas[k],
        valid_points: valid,
    };
    if let (Some(ea), Some(es)) = (&arrival.eval, &service.eval) {
        let n = arrival.thetas.len();
        let lo = arrival.thetas[k.saturating_sub(1)].ln();
        let hi = arrival.thetas[(k + 1).min(n - 1)].ln();
        let obj = |x: f64| {
            let t = x.exp();
            f(&ea(t), &es(t), eps, dt).unwrap_or(f64::INFINITY)
        };
        let (x, v) = golden_section(obj, lo, hi, 1e-7);
        if v < result.value {
            result.value = v;
            result.theta_star = x.exp();
        }
    }
    Ok(result)
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut iters = 0;
    while (b - a).abs() > tol * (1.0 + a.abs().max(b.abs())) && iters < 200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
        iters += 1;
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Smallest `T` with `P(delay > T) <= eps`, optimized over theta.
pub fn delay_bound(arrival: &SigmaRhoEnvelope, service: &SigmaRhoEnvelope, eps: f64) -> Result<BoundResult> {
    optimize(arrival, service, eps, delay_at)
}

/// Backlog in bytes exceeded with probability at most `eps`.
pub fn backlog_bound(arrival: &SigmaRhoEnvelope, service: &SigmaRhoEnvelope, eps: f64) -> Result<BoundResult> {
    optimize(arrival, service, eps, backlog_at)
}

/// Arrival envelopes for every model on a shared grid.
pub fn arrival_envelopes(
    models: &HashMap<String, DMaparHmm>,
    grid: &[f64],
    r: RMethod,
) -> Result<HashMap<String, SigmaRhoEnvelope>> {
    let mut out = HashMap::new();
    let mut ids: Vec<&String> = models.keys().collect();
    ids.sort();
    for id in ids {
        out.insert(id.clone(), model_envelope(&models[id], grid, r, id)?);
    }
    Ok(out)
}

/// End-to-end delay bound of one flow through the network.
pub fn e2e_delay_bound(
    topo: &TopologySpec,
    flow_id: &str,
    arrivals: &HashMap<String, SigmaRhoEnvelope>,
    eps: f64,
    cfg: &PmooConfig,
) -> Result<BoundResult> {
    let service = pmoo_e2e(topo, flow_id, arrivals, cfg)?;
    delay_bound(&arrivals[flow_id], &service, eps)
}
