use std::collections::HashMap;
use std::sync::Arc;

use dmapar::envelope::SigmaRhoPoint;
use dmapar::snc::{self, EnvelopeKind, Evaluator, FlowSpec, PmooConfig, ServerSpec, SigmaRhoEnvelope, TopologySpec};
use proptest::prelude::*;

const DT: f64 = 1e-3;

/// Arrival with `sigma = s0` and `rho = r0 (1 + k theta)`, a convex
/// stand-in for a bursty source.
fn arrival(s0: f64, r0: f64, k: f64, grid: &[f64]) -> SigmaRhoEnvelope {
    let eval: Evaluator = Arc::new(move |t| SigmaRhoPoint {
        theta: t,
        sigma: s0,
        rho: r0 * (1.0 + k * t),
        valid: true,
        flags: String::new(),
    });
    SigmaRhoEnvelope::from_fn(EnvelopeKind::Arrival, "a", grid, DT, eval).unwrap()
}

fn grid() -> Vec<f64> {
    snc::log_grid(1e-7, 1e-3, 24)
}

fn tandem(rates: &[f64], cross_from: usize, cross_to: usize) -> TopologySpec {
    let servers: Vec<ServerSpec> = rates
        .iter()
        .enumerate()
        .map(|(i, r)| ServerSpec {
            id: format!("s{i}"),
            rate_mbps: *r,
            queues: 2,
        })
        .collect();
    let path: Vec<String> = servers.iter().map(|s| s.id.clone()).collect();
    TopologySpec {
        flows: vec![
            FlowSpec {
                id: "f".into(),
                path: path.clone(),
                priority: 1,
                source: None,
            },
            FlowSpec {
                id: "x".into(),
                path: path[cross_from..=cross_to].to_vec(),
                priority: 0,
                source: None,
            },
        ],
        servers,
        max_packet_bytes: 1500.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregate_is_commutative_and_pointwise(
        s1 in 0.0..5e3f64, r1 in 1e5..5e6f64, k1 in 0.0..1e3f64,
        s2 in 0.0..5e3f64, r2 in 1e5..5e6f64, k2 in 0.0..1e3f64,
    ) {
        let g = grid();
        let a = arrival(s1, r1, k1, &g);
        let b = arrival(s2, r2, k2, &g);
        let ab = snc::aggregate(&a, &b).unwrap();
        let ba = snc::aggregate(&b, &a).unwrap();
        prop_assert_eq!(&ab.thetas, &g);
        for (p, q) in ab.points.iter().zip(&ba.points) {
            prop_assert_eq!(p.sigma, q.sigma);
            prop_assert_eq!(p.rho, q.rho);
        }
        for (i, p) in ab.points.iter().enumerate() {
            prop_assert!((p.sigma - s1 - s2).abs() <= 1e-9 * (s1 + s2).max(1.0));
            prop_assert!((p.rho - a.points[i].rho - b.points[i].rho).abs() <= 1e-9 * p.rho);
        }
    }

    #[test]
    fn concatenated_rate_is_min_and_associative(
        c1 in 1.0..200.0f64, c2 in 1.0..200.0f64, c3 in 1.0..200.0f64,
    ) {
        let g = grid();
        let cfg = snc::ConcatConfig::default();
        let s: Vec<_> = [c1, c2, c3].iter().map(|c| snc::constant_rate_service(c * 1e6, &g, DT).unwrap()).collect();
        let left = snc::concatenate(&snc::concatenate(&s[0], &s[1], &cfg).unwrap(), &s[2], &cfg).unwrap();
        let right = snc::concatenate(&s[0], &snc::concatenate(&s[1], &s[2], &cfg).unwrap(), &cfg).unwrap();
        for (p, q) in left.points.iter().zip(&right.points) {
            prop_assert!((p.rho - q.rho).abs() <= 1e-2 * p.rho);
            prop_assert!(p.rho <= c1.min(c2).min(c3) * 1e6 / 8.0 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn delay_and_backlog_shrink_as_epsilon_grows(
        s0 in 0.0..5e3f64, r0 in 1e5..2e6f64, k in 0.0..1e3f64,
        e1 in 1e-8..1e-2f64, f in 1.5..50.0f64,
    ) {
        let g = grid();
        let a = arrival(s0, r0, k, &g);
        let s = snc::constant_rate_service(30e6, &g, DT).unwrap();
        let e2 = (e1 * f).min(0.5);
        let d1 = snc::delay_bound(&a, &s, e1).unwrap().value;
        let d2 = snc::delay_bound(&a, &s, e2).unwrap().value;
        prop_assert!(d1 >= d2 * (1.0 - 1e-9));
        let b1 = snc::backlog_bound(&a, &s, e1).unwrap().value;
        let b2 = snc::backlog_bound(&a, &s, e2).unwrap().value;
        prop_assert!(b1 >= b2 * (1.0 - 1e-9));
    }

    #[test]
    fn backlog_shrinks_with_service_rate(
        s0 in 0.0..5e3f64, r0 in 1e5..2e6f64, k in 0.0..1e3f64, c in 20.0..60.0f64, extra in 1.0..50.0f64,
    ) {
        let g = grid();
        let a = arrival(s0, r0, k, &g);
        let slow = snc::constant_rate_service(c * 1e6, &g, DT).unwrap();
        let fast = snc::constant_rate_service((c + extra) * 1e6, &g, DT).unwrap();
        let bs = snc::backlog_bound(&a, &slow, 1e-3).unwrap().value;
        let bf = snc::backlog_bound(&a, &fast, 1e-3).unwrap().value;
        prop_assert!(bs >= bf * (1.0 - 1e-9));
    }

    #[test]
    fn refining_the_grid_never_raises_the_bound(
        s0 in 0.0..5e3f64, r0 in 1e5..2e6f64, k in 0.0..1e3f64, n in 6usize..20,
    ) {
        let coarse = snc::log_grid(1e-7, 1e-3, n);
        let fine = snc::log_grid(1e-7, 1e-3, 2 * n - 1);
        let s = |g: &[f64]| snc::rate_latency_service(30e6, 2e-3, g, DT).unwrap();
        let dc = snc::delay_bound(&arrival(s0, r0, k, &coarse), &s(&coarse), 1e-4).unwrap().value;
        let df = snc::delay_bound(&arrival(s0, r0, k, &fine), &s(&fine), 1e-4).unwrap().value;
        prop_assert!(df <= dc * (1.0 + 1e-6), "coarse {} fine {}", dc, df);
    }

    #[test]
    fn pmoo_sigma_dominates_hop_by_hop(
        rates in proptest::collection::vec(20.0..100.0f64, 2..5),
        from in 0usize..4, len in 2usize..5,
        sx in 0.0..5e3f64, rx in 1e5..1.5e6f64,
        sf in 0.0..5e3f64, rf in 1e5..1.5e6f64,
    ) {
        let k = rates.len();
        let from = from.min(k - 2);
        let to = (from + len - 1).min(k - 1);
        let topo = tandem(&rates, from, to);
        let g = grid();
        let arrivals: HashMap<String, SigmaRhoEnvelope> = [
            ("f".to_string(), arrival(sf, rf, 0.0, &g)),
            ("x".to_string(), arrival(sx, rx, 0.0, &g)),
        ].into_iter().collect();
        let cfg = PmooConfig::default();
        let p = snc::pmoo_e2e(&topo, "f", &arrivals, &cfg).unwrap();
        let h = snc::hop_by_hop_e2e(&topo, "f", &arrivals, &cfg).unwrap();
        for (a, b) in p.points.iter().zip(&h.points) {
            if a.valid && b.valid {
                prop_assert!(a.sigma <= b.sigma * (1.0 + 1e-9) + 1e-9, "theta {} pmoo {} hop {}", a.theta, a.sigma, b.sigma);
            }
        }
    }
}

#[test]
fn ideal_server_concatenation_converges_to_identity() {
    let g = grid();
    let s = snc::rate_latency_service(50e6, 1e-3, &g, DT).unwrap();
    let cfg = snc::ConcatConfig::default();
    let gaps: Vec<f64> = [1e9, 1e10, 1e11]
        .iter()
        .map(|c| {
            let ideal = snc::constant_rate_service(*c, &g, DT).unwrap();
            let out = snc::concatenate(&s, &ideal, &cfg).unwrap();
            out.points
                .iter()
                .zip(&s.points)
                .map(|(p, q)| {
                    assert_eq!(p.rho, q.rho);
                    p.sigma - q.sigma
                })
                .fold(0.0, f64::max)
        })
        .collect();
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2] && gaps[2] >= 0.0, "{gaps:?}");
}

#[test]
fn highest_priority_flow_sees_only_path_servers() {
    let topo = tandem(&[100.0, 100.0, 35.0], 0, 1);
    let g = grid();
    let mut topo = topo;
    topo.flows[0].priority = 0;
    topo.flows[1].priority = 1;
    let arrivals: HashMap<String, SigmaRhoEnvelope> = [
        ("f".to_string(), arrival(1000.0, 1e6, 0.0, &g)),
        ("x".to_string(), arrival(1000.0, 3e6, 0.0, &g)),
    ]
    .into_iter()
    .collect();
    let cfg = PmooConfig {
        slot_latency: false,
        packet_terms: false,
        ..PmooConfig::default()
    };
    let s = snc::pmoo_e2e(&topo, "f", &arrivals, &cfg).unwrap();
    for p in &s.points {
        assert!((p.rho - 35e6 / 8.0).abs() < 1e-6, "{}", p.rho);
    }
}

#[test]
fn delay_bound_of_constant_rate_server_matches_closed_form() {
    // One flat point: the bound reduces to the closed form at that theta.
    let th = 1e-4;
    let a = arrival(2000.0, 1e6, 0.0, &[th]);
    let s = snc::constant_rate_service(40e6, &[th], DT).unwrap();
    let b = snc::delay_bound(&a, &s, 1e-3).unwrap();
    let rs = 5e6;
    let want = 2000.0 / rs - (1e-3f64.ln() + (-(th * DT * (1e6 - rs)).exp()).ln_1p()) / (th * rs);
    assert!(b.value <= want * (1.0 + 1e-9));
}
