//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! `ACCEPTANCE=1,3` runs a subset.

mod common;

use std::collections::HashMap;
use std::time::Instant;

use dmapar::arhmm::{self, ArHmm, Residual};
use dmapar::carrier::{self, CarrierMode};
use dmapar::envelope::{self, RMethod};
use dmapar::linalg;
use dmapar::map::{self, ContinuousMap};
use dmapar::model::{self, Baseline, Initial};
use dmapar::pipeline::{self, FitConfig};
use dmapar::rng;
use dmapar::scenarios::{self, CompareConfig};
use rand::Rng as _;

use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Q entry from the closed-form transition table of the dual-MAP carrier.
/// `nu` holds the off-MAP rates and `nup` the on-MAP rates, both as
/// `(C0, C1)`; states are `(o, on phase, off phase)`.
fn q_formula(nu: &ContinuousMap, nup: &ContinuousMap, dt: f64, from: (usize, usize, usize), to: (usize, usize, usize)) -> f64 {
    let rate = |c: &ContinuousMap, i: usize, j: usize| if j < 2 { c.c0[(i, j)] } else { c.c1[(i, j - 2)] };
    let total = |c: &ContinuousMap, i: usize| -c.c0[(i, i)];
    let events = |c: &ContinuousMap, i: usize| rate(c, i, 2) + rate(c, i, 3);
    let (o, a, b) = from;
    let (o2, a2, b2) = to;
    match (o, o2) {
        (0, 0) if a2 == a => {
            if b2 == b {
                1.0 - total(nu, b) * dt
            } else {
                rate(nu, b, b2) * dt
            }
        }
        (0, 1) if b2 == b => rate(nup, a, a2 + 2) * events(nu, b) * dt / events(nup, a),
        (1, 1) if b2 == b => {
            if a2 == a {
                1.0 - total(nup, a) * dt
            } else {
                rate(nup, a, a2) * dt
            }
        }
        (1, 0) if a2 == a => rate(nu, b, b2 + 2) * events(nup, a) * dt / events(nu, b),
        _ => 0.0,
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut g = rng::seeded(101);
    let mut worst_q: f64 = 0.0;
    let mut worst_rows: f64 = 0.0;
    for _ in 0..50 {
        let off = continuous_map2(&mut g, 0.5, 40.0);
        let on = continuous_map2(&mut g, 0.5, 40.0);
        let nu_max = (0..2).map(|i| off.nu(i).max(on.nu(i))).fold(0.0, f64::max);
        let dt = unif(&mut g, 0.1, 0.9) / nu_max;
        let c = carrier::build_q(CarrierMode::DualMap {
            off: map::discretize_map(&off, dt).unwrap(),
            on: map::discretize_map(&on, dt).unwrap(),
        })
        .unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let want = q_formula(&off, &on, dt, carrier::unembed_state(i, 2, 2), carrier::unembed_state(j, 2, 2));
                worst_q = worst_q.max((c.q[(i, j)] - want).abs());
            }
        }
        worst_rows = worst_rows.max(linalg::max_row_sum_error(&c.q));
        let ar = arhmm(&mut g, 2, Vec::new(), Residual::Normal);
        let m = model::build_t(&c, &ar, dt).unwrap();
        worst_rows = worst_rows.max(linalg::max_row_sum_error(&m.t));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_q <= 1e-12 && worst_rows <= 1e-12 && secs < 1.0,
        format!("max |Q - oracle| {worst_q:.2e}, max row-sum error {worst_rows:.2e}, {secs:.3} s"),
    )
}

/// `pi Gamma^t 1` by plain matrix products.
fn pi_gamma_t(m: &model::DMaparHmm, theta: f64, t: usize) -> f64 {
    let v = envelope::solve_v(m).unwrap();
    let g = envelope::gamma(m, theta, &v).unwrap();
    let mut x = vec![1.0; m.n_states()];
    for _ in 0..t {
        x = linalg::mat_vec(&g, &x);
    }
    m.pi.iter().zip(&x).map(|(a, b)| a * b).sum()
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut g = rng::seeded(202);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for _ in 0..120 {
        let m = p0_model(&mut g, 6);
        let theta = unif(&mut g, 0.01, 0.4);
        let t = g.random_range(1..=8);
        let exact = model::exact_conditional_mgf(&m, theta, t, &[], &Initial::Distribution(m.pi.clone())).unwrap();
        worst = worst.max(rel(exact, pi_gamma_t(&m, theta, t)));
        n += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-10 && secs < 60.0,
        format!("{n} models, max relative gap {worst:.2e}, {secs:.2} s"),
    )
}

/// Dominant eigenvalue of a nonnegative 2x2 matrix by power iteration.
fn power_radius(m: [[f64; 2]; 2]) -> f64 {
    let mut x = [1.0, 1.0];
    let mut lambda = 0.0;
    for _ in 0..100_000 {
        let y = [
            m[0][0] * x[0] + m[0][1] * x[1],
            m[1][0] * x[0] + m[1][1] * x[1],
        ];
        let s = y[0].max(y[1]);
        let next = [y[0] / s, y[1] / s];
        let done = (s - lambda).abs() <= 1e-16 * s && (next[0] - x[0]).abs() < 1e-16;
        lambda = s;
        x = next;
        if done {
            break;
        }
    }
    lambda
}

fn criterion_3() -> Outcome {
    let mut g = rng::seeded(303);
    let (mut poisson, mut normal_sigma, mut normal_rho, mut mmoo): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..20 {
        let dt = unif(&mut g, 1e-4, 1e-2);
        let lambda = unif(&mut g, 0.01, 0.9) / dt;
        let theta = unif(&mut g, 0.01, 3.0);
        let m = model::from_baseline(&Baseline::Poisson { lambda, amplitude: 1.0, dt }).unwrap();
        let pt = envelope::sigma_rho(&m, theta, RMethod::Identity).unwrap();
        let q = lambda * dt;
        let want = (1.0 - q + q * theta.exp()).ln() / (theta * dt);
        poisson = poisson.max(rel(pt.rho, want));

        let (mu, sd) = (unif(&mut g, 10.0, 2000.0), unif(&mut g, 1.0, 500.0));
        let theta = unif(&mut g, 1e-5, 1e-2);
        let m = model::from_baseline(&Baseline::Normal { mu, sigma: sd, dt }).unwrap();
        let pt = envelope::sigma_rho(&m, theta, RMethod::Identity).unwrap();
        normal_sigma = normal_sigma.max(pt.sigma.abs());
        normal_rho = normal_rho.max(rel(pt.rho, (mu + theta * sd * sd / 2.0) / dt));

        let (alpha, beta) = (unif(&mut g, 0.5, 50.0), unif(&mut g, 0.5, 50.0));
        let peak = unif(&mut g, 100.0, 5000.0);
        let dt = 0.5 / alpha.max(beta) * unif(&mut g, 0.01, 1.0);
        let theta = unif(&mut g, 1e-5, 2e-3);
        let m = model::from_baseline(&Baseline::Mmoo { alpha, beta, peak, dt }).unwrap();
        let pt = envelope::sigma_rho(&m, theta, RMethod::Identity).unwrap();
        let e = (theta * peak).exp();
        let lam = power_radius([
            [1.0 - alpha * dt, alpha * dt * e],
            [beta * dt, (1.0 - beta * dt) * e],
        ]);
        mmoo = mmoo.max(rel((pt.rho * theta * dt).exp(), lam));
    }
    outcome(
        poisson <= 1e-9 && normal_sigma <= 1e-9 && normal_rho <= 1e-9 && mmoo <= 1e-9,
        format!(
            "poisson rho {poisson:.1e}, normal |sigma| {normal_sigma:.1e} rho {normal_rho:.1e}, mmoo radius {mmoo:.1e}"
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut g = rng::seeded(404);
    let mut violations = 0;
    let mut monotone = 0;
    let mut models = 0;
    let mut worst_ratio: f64 = 0.0;
    for k in 0..24 {
        let p = 1 + k % 2;
        let n = 1 + (k / 2) % 2;
        let kind = k % 3;
        let (c, ar, dir) = lagged_model(&mut g, p, n, kind);
        let mut devs = Vec::new();
        for scale in [0.5, 0.2, 0.05] {
            let m = model::build_t(&c, &with_phi(&ar, &dir, scale), 1e-3).unwrap();
            let r = envelope::phi_deviation_bound(&m, 30, 10_000, k as u64).unwrap();
            violations += r.violations;
            if r.epsilon > 0.0 {
                worst_ratio = worst_ratio.max(r.observed_max_dev / (r.c_max * r.epsilon));
            }
            devs.push(r.observed_max_dev);
        }
        models += 1;
        if devs[0] > devs[1] && devs[1] > devs[2] {
            monotone += 1;
        }
    }
    outcome(
        violations == 0 && monotone == models,
        format!(
            "{models} models x 1e4 paths, {violations} violations, monotone in {monotone}/{models}, max dev/(c eps) {worst_ratio:.3}"
        ),
    )
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
}

fn criterion_5() -> Outcome {
    let mut g = rng::seeded(505);
    let n = 100_000;
    // i.i.d. normal against the sample MLE.
    let y = arhmm::sample_arhmm(&ArHmm::iid(5.0, 2.0, Residual::Normal), n, &mut g).unwrap();
    let fit = arhmm::fit_arhmm(&y, 1, 0, Residual::Normal).unwrap();
    let (m, s) = mean_sd(&y);
    let iid = rel(fit.mu[0], m).max(rel(fit.sigma[0], s));
    // AR(1) against OLS.
    let y = arhmm::sample_arhmm(&ArHmm::ar(2.0, &[0.6], 1.0), n, &mut g).unwrap();
    let fit = arhmm::fit_arhmm(&y, 1, 1, Residual::Normal).unwrap();
    let (mu, phi, sd) = pipeline::ar1_ols(&y).unwrap();
    let ar1 = rel(fit.mu[0], mu).max(rel(fit.phi[0][0], phi)).max(rel(fit.sigma[0], sd));
    let n1 = iid <= 0.03 && ar1 <= 0.03;

    let truth = ArHmm {
        n_states: 2,
        transition: linalg::from_rows(&[vec![0.95, 0.05], vec![0.1, 0.9]]).unwrap(),
        p: 0,
        mu: vec![3.0, 10.0],
        phi: Vec::new(),
        sigma: vec![1.0, 2.0],
        residual: Residual::Normal,
        pi0: vec![2.0 / 3.0, 1.0 / 3.0],
    };
    let mut ok = 0;
    for seed in 0..10 {
        let mut g = rng::seeded(5000 + seed);
        let y = arhmm::sample_arhmm(&truth, n, &mut g).unwrap();
        let fit = arhmm::fit_arhmm(&y, 2, 0, Residual::Normal).unwrap();
        let perm: Vec<usize> = if fit.mu[0] <= fit.mu[1] { vec![0, 1] } else { vec![1, 0] };
        let means = (0..2).all(|i| rel(fit.mu[perm[i]], truth.mu[i]) <= 0.10);
        let trans = (0..2).all(|i| {
            (0..2).all(|j| (fit.transition[(perm[i], perm[j])] - truth.transition[(i, j)]).abs() <= 0.05)
        });
        if means && trans {
            ok += 1;
        }
    }
    outcome(
        n1 && ok >= 8,
        format!("iid gap {:.2}%, AR(1) gap {:.2}%, N=2 recovered in {ok}/10 seeds", iid * 100.0, ar1 * 100.0),
    )
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let cfg = CompareConfig::default();
    let mut dmapar_bad = 0;
    let mut rows_total = 0;
    let mut baseline_bad: HashMap<String, usize> = HashMap::new();
    let mut lines = Vec::new();
    for sc in scenarios::bundled_scenarios().unwrap() {
        let rows = match scenarios::compare_scenario(&sc, &cfg, 200_000) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("{}: {e}", sc.name)),
        };
        let mut tight = Vec::new();
        for r in &rows {
            if r.model == "dmapar" {
                rows_total += 1;
                if !r.reliable {
                    dmapar_bad += 1;
                }
                tight.push(r.tightness);
            } else if !r.reliable {
                *baseline_bad.entry(format!("{}@{}", r.model, sc.name)).or_default() += 1;
            }
        }
        tight.sort_by(|a, b| a.total_cmp(b));
        let bad_here: usize = baseline_bad
            .iter()
            .filter(|(k, _)| k.ends_with(&format!("@{}", sc.name)))
            .map(|(_, v)| v)
            .sum();
        lines.push(format!(
            "    {:<16} n={} tightness min {:.2} median {:.2} max {:.2}; baseline violations {}",
            sc.name,
            rows.iter().filter(|r| r.model == "dmapar").map(|r| r.n).min().unwrap_or(0),
            tight.first().copied().unwrap_or(f64::NAN),
            tight.get(tight.len() / 2).copied().unwrap_or(f64::NAN),
            tight.last().copied().unwrap_or(f64::NAN),
            bad_here,
        ));
    }
    for l in &lines {
        println!("{l}");
    }
    let secs = start.elapsed().as_secs_f64();
    let mut culprits: Vec<_> = baseline_bad.keys().cloned().collect();
    culprits.sort();
    outcome(
        dmapar_bad == 0 && !baseline_bad.is_empty() && secs < 1800.0,
        format!(
            "dmapar unreliable in {dmapar_bad}/{rows_total} (flow, eps, seed) cases; baselines unreliable in {}; {secs:.0} s",
            if culprits.is_empty() { "none".to_string() } else { culprits.join(", ") }
        ),
    )
}

fn criterion_7() -> Outcome {
    let n = 1 << 20;
    let mut all = true;
    let mut parts = Vec::new();
    for (k, (name, m)) in scenarios::bursty_models(1e-3).unwrap().into_iter().enumerate() {
        let mut g = rng::stream(707, k as u64);
        let src = model::generate(&m, n, &mut g).unwrap().trace;
        let (fitted, _) = match pipeline::fit_slots(&src, &FitConfig::default()) {
            Ok(f) => f,
            Err(e) => return outcome(false, format!("{name}: fit failed: {e}")),
        };
        let a = pipeline::burstiness(&src.a).unwrap();
        let b = pipeline::synthetic_burstiness(&fitted, n, 7070 + k as u64).unwrap();
        let ok = (a.hurst - b.hurst).abs() <= 0.01 && rel(b.cv, a.cv) <= 0.05;
        all &= ok;
        // Same comparison between two draws of the source model itself.
        let floor = pipeline::synthetic_burstiness(&m, n, 7170 + k as u64).unwrap();
        parts.push(format!(
            "{name} H {:.4}->{:.4} CV {:.3}->{:.3} (source model redrawn: H {:.4} CV {:.3})",
            a.hurst, b.hurst, a.cv, b.cv, floor.hurst, floor.cv
        ));
    }
    outcome(all, parts.join("; "))
}

fn criterion_8() -> Outcome {
    let mut g = rng::seeded(808);
    let mut worst: f64 = f64::INFINITY;
    let mut checks = 0;
    for _ in 0..30 {
        let m = p0_model(&mut g, 3);
        let scale = m.mean_bytes_per_slot().max(1e-3);
        for &th in &[0.01, 0.1, 0.4] {
            let theta = th / scale.max(1.0);
            let pt = envelope::sigma_rho(&m, theta, RMethod::Identity).unwrap();
            for t in 1..=12 {
                let exact = model::exact_conditional_mgf(&m, theta, t, &[], &Initial::Distribution(m.pi.clone())).unwrap();
                let env = (theta * (pt.sigma + pt.rho * t as f64 * m.dt)).exp();
                worst = worst.min((env - exact) / exact);
                checks += 1;
            }
        }
    }
    outcome(
        worst >= -1e-9,
        format!("{checks} (model, theta, t) checks, min (envelope - mgf)/mgf {worst:.3e}"),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "Q reproduction", criterion_1),
        (2, "MGF oracle equivalence", criterion_2),
        (3, "closed-form specials", criterion_3),
        (4, "lag-weight deviation bound", criterion_4),
        (5, "online EM correctness", criterion_5),
        (6, "bound vs DES", criterion_6),
        (7, "fit-then-synthesize burstiness", criterion_7),
        (8, "envelope validity", criterion_8),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let o = f();
        println!("{} criterion {id} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
