//! Discrete-event simulation of feed-forward networks of constant-rate,
//! non-preemptive strict-priority servers with zero propagation delay.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::io::Write;

use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, DMaparHmm};
use crate::rng;
use crate::snc::TopologySpec;
use crate::trace::TraceSeries;

/// Traffic fed into one flow.
#[derive(Debug, Clone)]
pub enum Source {
    /// Slot series drawn from the model; each slot's bytes arrive at the
    /// slot's start time.
    Model(DMaparHmm),
    /// Replayed records, shifted so the first one arrives at time 0.
    Trace(TraceSeries),
    /// Poisson packet arrivals of a fixed size.
    Poisson { rate_pps: f64, size: f64 },
    /// Explicit `(time, bytes)` arrivals.
    Packets(Vec<(f64, f64)>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Arrivals are injected on `[0, duration)`.
    pub duration: f64,
    pub seed: u64,
    /// Larger arrivals are split into packets of at most this size.
    pub mtu: f64,
    /// Sampling period of the per-server backlog series; `None` disables it.
    pub sample_period: Option<f64>,
    /// Keep simulating after `duration` until every packet has departed.
    pub drain: bool,
}

impl SimConfig {
    pub fn new(duration: f64, seed: u64) -> Self {
        SimConfig {
            duration,
            seed,
            mtu: 1500.0,
            sample_period: None,
            drain: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Packet {
    pub flow: usize,
    pub size: f64,
    pub arrival: f64,
    /// Departure time from each hop.
    pub hops: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowResult {
    pub flow_id: String,
    /// End-to-end delays of departed packets in departure order, seconds.
    pub delays: Vec<f64>,
    /// `(arrival, departure)` per departed packet.
    pub times: Vec<(f64, f64)>,
    pub injected: usize,
    pub departed: usize,
    /// Sum of transmission times along the path for the largest packet.
    pub max_path_tx: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub flows: Vec<FlowResult>,
    pub server_ids: Vec<String>,
    /// Bytes held at each server, sampled every `sample_period`.
    pub backlog: Vec<Vec<f64>>,
    pub max_backlog: Vec<f64>,
    pub seed: u64,
    pub duration: f64,
    /// Packets still in the network when the run stopped.
    pub in_flight: usize,
}

impl SimResult {
    pub fn flow(&self, id: &str) -> Option<&FlowResult> {
        self.flows.iter().find(|f| f.flow_id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Class {
    Completion = 0,
    Arrival = 1,
    TryStart = 2,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    class: Class,
    server: usize,
    priority: usize,
    seq: u64,
    /// Packet index, or flow index for fresh injections.
    packet: usize,
    fresh: bool,
}

impl PartialEq for Event {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Event {
    // Reversed for a min-heap.
    fn cmp(&self, o: &Self) -> Ordering {
        o.time
            .total_cmp(&self.time)
            .then(o.class.cmp(&self.class))
            .then(o.server.cmp(&self.server))
            .then(o.priority.cmp(&self.priority))
            .then(o.seq.cmp(&self.seq))
    }
}

/// Stable per-flow stream id so that a flow's randomness does not depend
/// on which other flows are present.
fn stream_id(flow_id: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in flow_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn arrivals_of(src: &Source, duration: f64, mtu: f64, g: &mut rng::Rng) -> Result<Vec<(f64, f64)>> {
    let mut raw: Vec<(f64, f64)> = match src {
        Source::Model(m) => {
            let n = (duration / m.dt).ceil() as usize;
            let gen = model::generate(m, n, g)?;
            gen.trace
                .a
                .iter()
                .enumerate()
                .filter(|(_, b)| **b > 0.0)
                .map(|(k, b)| (k as f64 * m.dt, *b))
                .collect()
        }
        Source::Trace(t) => {
            let t0 = t.records.first().map(|r| r.0).unwrap_or(0.0);
            t.records
                .iter()
                .map(|r| (r.0 - t0, r.1))
                .filter(|r| r.1 > 0.0)
                .collect()
        }
        Source::Poisson { rate_pps, size } => {
            let e = Exp::new(*rate_pps).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let mut t = e.sample(g);
            let mut v = Vec::new();
            while t < duration {
                v.push((t, *size));
                t += e.sample(g);
            }
            v
        }
        Source::Packets(p) => p.iter().copied().filter(|r| r.1 > 0.0).collect(),
    };
    raw.retain(|r| r.0 < duration);
    let mut out = Vec::with_capacity(raw.len());
    for (t, b) in raw {
        let mut left = b;
        while left > mtu {
            out.push((t, mtu));
            left -= mtu;
        }
        if left > 1e-9 {
            out.push((t, left));
        }
    }
    Ok(out)
}

struct Server {
    rate: f64,
    queues: Vec<VecDeque<usize>>,
    busy: Option<usize>,
    bytes: f64,
}

/// Runs one replication. Sources are keyed by flow id.
pub fn simulate(topo: &TopologySpec, sources: &HashMap<String, Source>, cfg: &SimConfig) -> Result<SimResult> {
    topo.validate()?;
    if !(cfg.duration > 0.0) || !(cfg.mtu > 0.0) {
        return Err(Error::InvalidArgument("duration and mtu must be positive".into()));
    }
    let server_index: HashMap<&str, usize> = topo
        .servers
        .iter()
        .enumerate()
        .map(|(k, s)| (s.id.as_str(), k))
        .collect();
    let n_prio = topo.flows.iter().map(|f| f.priority).max().unwrap_or(0) + 1;
    let mut servers: Vec<Server> = topo
        .servers
        .iter()
        .map(|s| Server {
            rate: s.rate_mbps * 1e6 / 8.0,
            queues: vec![VecDeque::new(); n_prio],
            busy: None,
            bytes: 0.0,
        })
        .collect();
    let paths: Vec<Vec<usize>> = topo
        .flows
        .iter()
        .map(|f| f.path.iter().map(|h| server_index[h.as_str()]).collect())
        .collect();
    let mut inputs: Vec<Vec<(f64, f64)>> = Vec::with_capacity(topo.flows.len());
    for f in &topo.flows {
        let src = sources
            .get(&f.id)
            .ok_or_else(|| Error::InvalidArgument(format!("flow `{}` has no source", f.id)))?;
        let mut g = rng::stream(cfg.seed, stream_id(&f.id));
        inputs.push(arrivals_of(src, cfg.duration, cfg.mtu, &mut g)?);
    }
    let mut cursor = vec![0usize; inputs.len()];
    let mut packets: Vec<Packet> = Vec::new();
    let mut flows: Vec<FlowResult> = topo
        .flows
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let big = inputs[k].iter().map(|r| r.1).fold(0.0, f64::max);
            FlowResult {
                flow_id: f.id.clone(),
                delays: Vec::new(),
                times: Vec::new(),
                injected: 0,
                departed: 0,
                max_path_tx: paths[k].iter().map(|&s| big / servers[s].rate).sum(),
            }
        })
        .collect();
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push = |heap: &mut BinaryHeap<Event>, time, class, server, priority, packet, fresh| {
        seq += 1;
        heap.push(Event { time, class, server, priority, seq, packet, fresh });
    };
    for (k, inp) in inputs.iter().enumerate() {
        if let Some(&(t, _)) = inp.first() {
            push(&mut heap, t, Class::Arrival, paths[k][0], topo.flows[k].priority, k, true);
        }
    }
    let sample = cfg.sample_period.filter(|p| *p > 0.0);
    let mut backlog = vec![Vec::new(); servers.len()];
    let mut max_backlog = vec![0.0f64; servers.len()];
    let mut next_sample = 0.0;
    let mut now = 0.0f64;
    while let Some(ev) = heap.pop() {
        if !cfg.drain && ev.time >= cfg.duration {
            heap.push(ev);
            break;
        }
        if ev.time > now {
            for s in &servers {
                assert!(
                    s.busy.is_some() || s.queues.iter().all(|q| q.is_empty()),
                    "idle server with queued work"
                );
            }
            now = ev.time;
        }
        if let Some(p) = sample {
            while next_sample < cfg.duration
                && (next_sample < ev.time || (next_sample == ev.time && ev.class != Class::Completion))
            {
                for (k, s) in servers.iter().enumerate() {
                    backlog[k].push(s.bytes);
                }
                next_sample += p;
            }
        }
        match ev.class {
            Class::Arrival => {
                let pk = if ev.fresh {
                    let f = ev.packet;
                    let (t, size) = inputs[f][cursor[f]];
                    cursor[f] += 1;
                    if let Some(&(tn, _)) = inputs[f].get(cursor[f]) {
                        push(&mut heap, tn, Class::Arrival, paths[f][0], topo.flows[f].priority, f, true);
                    }
                    flows[f].injected += 1;
                    packets.push(Packet { flow: f, size, arrival: t, hops: Vec::with_capacity(paths[f].len()) });
                    packets.len() - 1
                } else {
                    ev.packet
                };
                let f = packets[pk].flow;
                let s = &mut servers[ev.server];
                s.queues[topo.flows[f].priority].push_back(pk);
                s.bytes += packets[pk].size;
                max_backlog[ev.server] = max_backlog[ev.server].max(s.bytes);
                push(&mut heap, ev.time, Class::TryStart, ev.server, 0, 0, false);
            }
            Class::TryStart => {
                let s = &mut servers[ev.server];
                if s.busy.is_none() {
                    if let Some(q) = s.queues.iter_mut().find(|q| !q.is_empty()) {
                        let pk = q.pop_front().unwrap();
                        s.busy = Some(pk);
                        let done = ev.time + packets[pk].size / s.rate;
                        let prio = topo.flows[packets[pk].flow].priority;
                        push(&mut heap, done, Class::Completion, ev.server, prio, pk, false);
                    }
                }
            }
            Class::Completion => {
                let pk = ev.packet;
                let s = &mut servers[ev.server];
                s.busy = None;
                s.bytes -= packets[pk].size;
                if s.bytes.abs() < 1e-6 {
                    s.bytes = 0.0;
                }
                push(&mut heap, ev.time, Class::TryStart, ev.server, 0, 0, false);
                let f = packets[pk].flow;
                packets[pk].hops.push(ev.time);
                let hop = packets[pk].hops.len();
                if hop < paths[f].len() {
                    push(&mut heap, ev.time, Class::Arrival, paths[f][hop], topo.flows[f].priority, pk, false);
                } else {
                    let a = packets[pk].arrival;
                    flows[f].delays.push(ev.time - a);
                    flows[f].times.push((a, ev.time));
                    flows[f].departed += 1;
                }
            }
        }
    }
    if let Some(p) = sample {
        while next_sample < cfg.duration {
            for (k, s) in servers.iter().enumerate() {
                backlog[k].push(s.bytes);
            }
            next_sample += p;
        }
    }
    let injected: usize = flows.iter().map(|f| f.injected).sum();
    let departed: usize = flows.iter().map(|f| f.departed).sum();
    Ok(SimResult {
        flows,
        server_ids: topo.servers.iter().map(|s| s.id.clone()).collect(),
        backlog,
        max_backlog,
        seed: cfg.seed,
        duration: cfg.duration,
        in_flight: injected - departed,
    })
}

/// `ceil((1 - eps) n)`-th order statistic without the sample-size guard.
pub fn quantile_unchecked(values: &[f64], eps: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientSamples { required: 1, got: 0 });
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon must lie in (0,1), got {eps}")));
    }
    let n = values.len();
    let k = (((1.0 - eps) * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut v = values.to_vec();
    let (_, x, _) = v.select_nth_unstable_by(k.min(n) - 1, |a, b| a.total_cmp(b));
    Ok(*x)
}

/// Empirical `(1 - eps)`-quantile; needs at least `10 / eps` samples.
pub fn empirical_quantile(values: &[f64], eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon must lie in (0,1), got {eps}")));
    }
    let required = (10.0 / eps - 1e-9).ceil() as usize;
    if values.len() < required {
        return Err(Error::InsufficientSamples { required, got: values.len() });
    }
    quantile_unchecked(values, eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub bound: f64,
    pub quantile: f64,
    pub reliable: bool,
    pub tightness: f64,
}

pub fn compare_values(bound: f64, quantile: f64) -> Comparison {
    Comparison {
        bound,
        quantile,
        reliable: bound >= quantile,
        tightness: bound / quantile,
    }
}

/// Bound against the flow's empirical delay quantile.
pub fn compare_bound(result: &SimResult, flow_id: &str, bound: f64, eps: f64) -> Result<Comparison> {
    let f = result
        .flow(flow_id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown flow `{flow_id}`")))?;
    Ok(compare_values(bound, empirical_quantile(&f.delays, eps)?))
}

/// Per-packet rows: `flow_id,arrival_s,departure_s,delay_s`.
pub fn write_packets_csv<W: Write>(w: W, result: &SimResult) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["flow_id", "arrival_s", "departure_s", "delay_s"])?;
    for f in &result.flows {
        for (a, d) in &f.times {
            wr.write_record([f.flow_id.clone(), a.to_string(), d.to_string(), (d - a).to_string()])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Summary rows: `flow_id,n,mean,p99,p999,quantile`. Quantiles are left
/// empty when there are too few samples.
pub fn write_summary_csv<W: Write>(w: W, result: &SimResult, eps: f64) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["flow_id", "n", "mean", "p99", "p999", "quantile"])?;
    let q = |v: &[f64], e: f64| empirical_quantile(v, e).map(|x| x.to_string()).unwrap_or_default();
    for f in &result.flows {
        let n = f.delays.len();
        let mean = if n > 0 { f.delays.iter().sum::<f64>() / n as f64 } else { f64::NAN };
        wr.write_record([
            f.flow_id.clone(),
            n.to_string(),
            mean.to_string(),
            q(&f.delays, 1e-2),
            q(&f.delays, 1e-3),
            q(&f.delays, eps),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
