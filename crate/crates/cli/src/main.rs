//! `dmapar` command-line tool.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use dmapar::arhmm::{Criterion, Residual};
use dmapar::des::{self, SimConfig, Source};
use dmapar::envelope::{self, RMethod};
use dmapar::model::{self, Baseline, DMaparHmm, ModelFile};
use dmapar::pipeline::{self, FitConfig};
use dmapar::scenarios::{self, CompareConfig};
use dmapar::snc::{self, PmooConfig, SourceSpec, TopologySpec};
use dmapar::{rng, trace};

#[derive(Debug, Parser, Serialize)]
#[command(name = "dmapar", version, about = "Traffic modelling and stochastic delay bounds")]
struct Cli {
    /// Root seed for every random stream of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory receiving outputs and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Slot width in seconds, overriding the trace default.
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// Either `lo:hi:n` (log spaced) or a comma separated list, in 1/bytes.
    #[arg(long, global = true)]
    theta_grid: Option<String>,
    /// Violation probabilities.
    #[arg(long, global = true, value_delimiter = ',', default_value = "1e-3,1e-4")]
    epsilon: Vec<f64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum CritArg {
    Aic,
    Bic,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum ResidualArg {
    Normal,
    Exponential,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum RArg {
    Identity,
    Mc,
}

#[derive(Debug, Subcommand, Serialize)]
enum Cmd {
    /// Fit the composed model to a packet trace.
    Fit {
        trace: PathBuf,
        #[arg(long, default_value_t = 2)]
        m_off: usize,
        #[arg(long, default_value_t = 2)]
        m_on: usize,
        /// Candidate hidden-state counts.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        n: Vec<usize>,
        /// Candidate lag counts.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        p: Vec<usize>,
        #[arg(long, value_enum, default_value = "bic")]
        criterion: CritArg,
        #[arg(long, value_enum, default_value = "normal")]
        residual: ResidualArg,
        /// Slots synthesized to compare burstiness with the input.
        #[arg(long, default_value_t = 200_000)]
        check_slots: usize,
    },
    /// Generate a synthetic trace from a model file.
    Synth {
        model: PathBuf,
        #[arg(long)]
        slots: usize,
    },
    /// Envelope of a model over the theta grid.
    Features {
        model: PathBuf,
        #[arg(long, value_enum, default_value = "mc")]
        r_method: RArg,
        #[arg(long, default_value_t = 100_000)]
        r_samples: usize,
    },
    /// Fit the classical arrival models to a trace.
    Baselines {
        trace: PathBuf,
        /// Baselines to fit; all of them when empty.
        #[arg(long, value_delimiter = ',')]
        names: Vec<String>,
        /// Batch quantum in bytes for the batch MAP.
        #[arg(long, default_value_t = 1500.0)]
        unit: f64,
    },
    /// End-to-end delay bounds for a topology.
    Bound {
        topology: PathBuf,
        /// Only this flow; every flow when absent.
        #[arg(long)]
        flow: Option<String>,
        #[arg(long, value_enum, default_value = "mc")]
        r_method: RArg,
    },
    /// Simulate a topology.
    Simulate {
        topology: PathBuf,
        #[arg(long)]
        duration: f64,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Bounds of the composed model and baselines against simulation.
    Compare {
        /// Topology file; the bundled scenarios are used when absent.
        topology: Option<PathBuf>,
        /// Simulated seconds per seed; sized from a pilot run when absent.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, value_delimiter = ',', default_value = "normal,cpoisson")]
        baselines: Vec<String>,
        /// Synthetic slots used to fit baselines to model-driven flows.
        #[arg(long, default_value_t = 200_000)]
        fit_slots: usize,
    },
}

/// Collects outputs in memory; nothing touches the disk until the command
/// has succeeded.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Outputs { dir: dir.to_path_buf(), files: Vec::new() }
    }

    fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    fn add_json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let mut b = serde_json::to_vec_pretty(v)?;
        b.push(b'\n');
        self.add(name, b);
        Ok(())
    }

    fn commit(self, cli: &Cli) -> Result<()> {
        fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        let names: Vec<&str> = self.files.iter().map(|f| f.0.as_str()).collect();
        let manifest = json!({
            "tool": "dmapar",
            "version": env!("CARGO_PKG_VERSION"),
            "invocation": cli,
            "outputs": names,
        });
        let mut m = serde_json::to_vec_pretty(&manifest)?;
        m.push(b'\n');
        for (name, bytes) in self.files.iter().chain(std::iter::once(&("manifest.json".to_string(), m))) {
            write_atomic(&self.dir.join(name), bytes)?;
        }
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        path.file_name().unwrap_or_default().to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    parse_grid_inner(spec)
        .map_err(|e| dmapar::Error::InvalidArgument(format!("bad theta grid `{spec}`: {e}")).into())
}

fn parse_grid_inner(spec: &str) -> Result<Vec<f64>> {
    let grid = if let Some((lo, rest)) = spec.split_once(':') {
        let (hi, n) = rest
            .split_once(':')
            .ok_or_else(|| dmapar::Error::InvalidArgument(format!("bad theta grid `{spec}`")))?;
        let (lo, hi, n): (f64, f64, usize) = (lo.trim().parse()?, hi.trim().parse()?, n.trim().parse()?);
        if n == 0 || !(lo > 0.0) || !(hi >= lo) {
            return Err(dmapar::Error::InvalidArgument(format!("bad theta grid `{spec}`")).into());
        }
        snc::log_grid(lo, hi, n)
    } else {
        spec.split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()?
    };
    if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0)) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(dmapar::Error::InvalidArgument("theta grid must be positive and increasing".into()).into());
    }
    Ok(grid)
}

fn r_method(r: RArg, n: usize, seed: u64) -> RMethod {
    match r {
        RArg::Identity => RMethod::Identity,
        RArg::Mc => RMethod::MonteCarlo { n, seed },
    }
}

fn check_eps(eps: &[f64]) -> Result<()> {
    if eps.is_empty() || eps.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
        return Err(dmapar::Error::InvalidArgument("epsilon values must lie in (0,1)".into()).into());
    }
    Ok(())
}

fn model_grid(cli: &Cli, models: &[&DMaparHmm]) -> Result<Vec<f64>> {
    if let Some(g) = &cli.theta_grid {
        return parse_grid(g);
    }
    let mut burst = 0.0;
    for m in models {
        let on = m.on_fraction();
        burst += if on > 0.0 { m.mean_bytes_per_slot() / on } else { 0.0 };
    }
    Ok(snc::default_grid((burst / models.len().max(1) as f64).max(1.0)))
}

fn csv_bytes<F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> Result<()>>(f: F) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        f(&mut w)?;
        w.flush()?;
    }
    Ok(buf)
}

struct Network {
    topo: TopologySpec,
    models: HashMap<String, DMaparHmm>,
    sources: HashMap<String, Source>,
    /// Slot series per flow for baseline fitting.
    series: HashMap<String, trace::DiscretizedTrace>,
}

fn load_network(cli: &Cli, path: &Path, fit_slots: usize) -> Result<Network> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let topo = TopologySpec::from_toml(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut models = HashMap::new();
    let mut sources = HashMap::new();
    let mut series = HashMap::new();
    for (k, f) in topo.flows.iter().enumerate() {
        let src = f
            .source
            .as_ref()
            .ok_or_else(|| dmapar::Error::InvalidArgument(format!("flow `{}` has no source", f.id)))?;
        match src {
            SourceSpec::Model(p) => {
                let p = base.join(p);
                let m = ModelFile::load(&p).with_context(|| format!("flow `{}`: loading {}", f.id, p.display()))?;
                let mut g = rng::stream(cli.seed, 0x100 + k as u64);
                series.insert(f.id.clone(), model::generate(&m, fit_slots, &mut g)?.trace);
                sources.insert(f.id.clone(), Source::Model(m.clone()));
                models.insert(f.id.clone(), m);
            }
            SourceSpec::Trace(p) => {
                let p = base.join(p);
                let t = trace::load_trace(&p).with_context(|| format!("flow `{}`: loading {}", f.id, p.display()))?;
                let cfg = FitConfig { dt: cli.dt, ..FitConfig::default() };
                let (m, _) = pipeline::fit_trace(&t, &cfg).with_context(|| format!("flow `{}`: fitting", f.id))?;
                series.insert(f.id.clone(), trace::discretize(&t, m.dt)?);
                sources.insert(f.id.clone(), Source::Trace(t));
                models.insert(f.id.clone(), m);
            }
        }
    }
    Ok(Network { topo, models, sources, series })
}

fn fmt_bound(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        "inf".into()
    }
}

fn run(cli: &Cli) -> Result<()> {
    check_eps(&cli.epsilon)?;
    let mut out = Outputs::new(&cli.out_dir);
    match &cli.cmd {
        Cmd::Fit { trace: path, m_off, m_on, n, p, criterion, residual, check_slots } => {
            let t = trace::load_trace(path).with_context(|| format!("loading {}", path.display()))?;
            let mut cfg = FitConfig {
                dt: cli.dt,
                m_off: *m_off,
                m_on: *m_on,
                n_candidates: n.clone(),
                p_candidates: p.clone(),
                criterion: match criterion {
                    CritArg::Aic => Criterion::Aic,
                    CritArg::Bic => Criterion::Bic,
                },
                residual: match residual {
                    ResidualArg::Normal => Residual::Normal,
                    ResidualArg::Exponential => Residual::Exponential,
                },
                ..FitConfig::default()
            };
            cfg.map_opts.seed = cli.seed;
            let (m, report) = pipeline::fit_trace(&t, &cfg).context("fitting model")?;
            let input = trace::discretize(&t, m.dt)?;
            let source = pipeline::burstiness(&input.a).ok();
            let synth = pipeline::synthetic_burstiness(&m, *check_slots, cli.seed).ok();
            out.add_json("model.json", &m.to_file())?;
            out.add_json(
                "fit_report.json",
                &json!({
                    "fit": report,
                    "model_on_fraction": m.on_fraction(),
                    "source": source,
                    "synthetic": synth,
                }),
            )?;
        }
        Cmd::Synth { model: path, slots } => {
            let m = ModelFile::load(path).with_context(|| format!("loading {}", path.display()))?;
            let mut g = rng::seeded(cli.seed);
            let gen = model::generate(&m, *slots, &mut g)?;
            let bytes = csv_bytes(|w| {
                w.write_record(["timestamp_s", "size_bytes"])?;
                for (k, a) in gen.trace.a.iter().enumerate() {
                    if *a > 0.0 {
                        w.write_record([(k as f64 * m.dt).to_string(), a.to_string()])?;
                    }
                }
                Ok(())
            })?;
            let total: f64 = gen.trace.a.iter().sum();
            out.add("synth.csv", bytes);
            out.add_json(
                "synth_report.json",
                &json!({
                    "slots": slots,
                    "dt": m.dt,
                    "total_bytes": total,
                    "model_mean_bytes": m.mean_bytes_per_slot() * *slots as f64,
                    "clamped_slots": gen.clamped,
                    "on_slots": gen.on_slots,
                    "burstiness": pipeline::burstiness(&gen.trace.a).ok(),
                }),
            )?;
        }
        Cmd::Features { model: path, r_method: r, r_samples } => {
            let m = ModelFile::load(path).with_context(|| format!("loading {}", path.display()))?;
            let grid = model_grid(cli, &[&m])?;
            let pts = envelope::envelope_curve(&m, &grid, r_method(*r, *r_samples, cli.seed))?;
            let bytes = csv_bytes(|w| {
                w.write_record(["theta", "sigma_bytes", "rho_bytes_per_s", "valid_flag", "method_flags"])?;
                for p in &pts {
                    w.write_record([
                        p.theta.to_string(),
                        p.sigma.to_string(),
                        p.rho.to_string(),
                        (p.valid as u8).to_string(),
                        p.flags.clone(),
                    ])?;
                }
                Ok(())
            })?;
            out.add("envelope.csv", bytes);
        }
        Cmd::Baselines { trace: path, names, unit } => {
            let t = trace::load_trace(path).with_context(|| format!("loading {}", path.display()))?;
            let dt = match cli.dt {
                Some(d) => d,
                None => trace::default_dt(&t)?,
            };
            let disc = trace::discretize(&t, dt)?;
            let names: Vec<String> = if names.is_empty() {
                Baseline::NAMES.iter().map(|s| s.to_string()).collect()
            } else {
                names.clone()
            };
            let mut specs = Vec::new();
            for n in &names {
                let spec = pipeline::fit_baseline(n, &disc, *unit).with_context(|| format!("baseline `{n}`"))?;
                let m = model::from_baseline(&spec).with_context(|| format!("baseline `{n}`"))?;
                out.add_json(&format!("baseline_{}.json", spec.name()), &m.to_file())?;
                specs.push(spec);
            }
            out.add_json("baselines.json", &specs)?;
        }
        Cmd::Bound { topology, flow, r_method: r } => {
            let net = load_network(cli, topology, 1000)?;
            let mut refs: Vec<&DMaparHmm> = net.models.values().collect();
            refs.sort_by(|a, b| a.dt.total_cmp(&b.dt));
            let grid = model_grid(cli, &refs)?;
            let env = snc::arrival_envelopes(&net.models, &grid, r_method(*r, 100_000, cli.seed))?;
            let flows: Vec<String> = match flow {
                Some(f) => {
                    if net.topo.flow(f).is_none() {
                        return Err(dmapar::Error::InvalidArgument(format!("unknown flow `{f}`")).into());
                    }
                    vec![f.clone()]
                }
                None => net.topo.flows.iter().map(|f| f.id.clone()).collect(),
            };
            let mut rows = Vec::new();
            for f in &flows {
                for &eps in &cli.epsilon {
                    match snc::e2e_delay_bound(&net.topo, f, &env, eps, &PmooConfig::default()) {
                        Ok(b) => rows.push([f.clone(), eps.to_string(), fmt_bound(b.value), b.theta_star.to_string()]),
                        Err(dmapar::Error::Unstable(_)) => {
                            rows.push([f.clone(), eps.to_string(), "inf".into(), String::new()])
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            let bytes = csv_bytes(|w| {
                w.write_record(["flow_id", "epsilon", "T_eps_s", "theta_star"])?;
                for r in &rows {
                    w.write_record(r)?;
                }
                Ok(())
            })?;
            out.add("bounds.csv", bytes);
        }
        Cmd::Simulate { topology, duration, seeds } => {
            let net = load_network(cli, topology, 1000)?;
            let runs: Vec<dmapar::Result<des::SimResult>> = (0..*seeds)
                .into_par_iter()
                .map(|s| {
                    let mut cfg = SimConfig::new(*duration, cli.seed.wrapping_add(s));
                    cfg.mtu = net.topo.max_packet_bytes;
                    des::simulate(&net.topo, &net.sources, &cfg)
                })
                .collect();
            for r in runs {
                let r = r?;
                let mut p = Vec::new();
                des::write_packets_csv(&mut p, &r)?;
                out.add(&format!("packets_seed{}.csv", r.seed), p);
                let mut s = Vec::new();
                des::write_summary_csv(&mut s, &r, cli.epsilon[0])?;
                out.add(&format!("summary_seed{}.csv", r.seed), s);
            }
        }
        Cmd::Compare { topology, duration, seeds, baselines, fit_slots } => {
            for b in baselines {
                Baseline::check_name(b)?;
            }
            let mut cfg = CompareConfig {
                epsilons: cli.epsilon.clone(),
                seeds: (0..*seeds).map(|s| cli.seed.wrapping_add(s)).collect(),
                duration: *duration,
                baselines: baselines.clone(),
                r_method: RMethod::MonteCarlo { n: 100_000, seed: cli.seed },
                ..CompareConfig::default()
            };
            if let Some(g) = &cli.theta_grid {
                cfg.grid = Some(parse_grid(g)?);
            }
            let rows = match topology {
                Some(path) => {
                    let net = load_network(cli, path, *fit_slots)?;
                    cfg.mtu = net.topo.max_packet_bytes;
                    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    scenarios::compare_network(&name, &net.topo, &net.models, &net.sources, &net.series, &cfg)?
                }
                None => {
                    let mut rows = Vec::new();
                    for sc in scenarios::bundled_scenarios()? {
                        rows.extend(scenarios::compare_scenario(&sc, &cfg, *fit_slots)?);
                    }
                    rows
                }
            };
            let mut b = Vec::new();
            scenarios::write_compare_csv(&mut b, &rows)?;
            out.add("compare.csv", b);
        }
    }
    out.commit(cli)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| {
                    if let Some(d) = c.downcast_ref::<dmapar::Error>() {
                        Some(d.exit_code())
                    } else {
                        c.downcast_ref::<std::io::Error>().map(|_| 9)
                    }
                })
                .unwrap_or(1);
            ExitCode::from(code as u8)
        }
    }
}
