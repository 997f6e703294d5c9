//! Random model generators shared by the integration tests.
#![allow(dead_code)]

use dmapar::arhmm::{ArHmm, Residual};
use dmapar::carrier::{self, CarrierChain, CarrierMode};
use dmapar::linalg::Mat;
use dmapar::map::{ContinuousMap, DiscreteMap};
use dmapar::model::{self, DMaparHmm};
use dmapar::rng::Rng;
use rand::Rng as _;

pub fn unif(g: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * g.random::<f64>()
}

/// Row-stochastic matrix with entries bounded away from zero.
pub fn stochastic(g: &mut Rng, n: usize) -> Mat {
    let mut m = Mat::from_fn(n, n, |_, _| unif(g, 0.05, 1.0));
    for i in 0..n {
        let s = m.row(i).sum();
        for j in 0..n {
            m[(i, j)] /= s;
        }
    }
    m
}

/// Dense discrete MAP of order `m`; every `D1` row has positive mass.
pub fn discrete_map(g: &mut Rng, m: usize, dt: f64) -> DiscreteMap {
    let mut d0 = Mat::zeros(m, m);
    let mut d1 = Mat::zeros(m, m);
    for i in 0..m {
        let stay = unif(g, 0.3, 0.9);
        let w0: Vec<f64> = (0..m).map(|_| unif(g, 0.05, 1.0)).collect();
        let w1: Vec<f64> = (0..m).map(|_| unif(g, 0.05, 1.0)).collect();
        let (s0, s1): (f64, f64) = (w0.iter().sum(), w1.iter().sum());
        for j in 0..m {
            d0[(i, j)] = stay * w0[j] / s0;
            d1[(i, j)] = (1.0 - stay) * w1[j] / s1;
        }
        // Fold rounding into the diagonal so rows sum to one exactly enough.
        let r = 1.0 - (d0.row(i).sum() + d1.row(i).sum());
        d0[(i, i)] += r;
    }
    DiscreteMap::new(d0, d1, dt).expect("valid random map")
}

/// Continuous MAP(2) with rates in `[lo, hi]`.
pub fn continuous_map2(g: &mut Rng, lo: f64, hi: f64) -> ContinuousMap {
    let mut c0 = Mat::zeros(2, 2);
    let mut c1 = Mat::zeros(2, 2);
    for i in 0..2 {
        c0[(i, 1 - i)] = unif(g, lo, hi);
        c1[(i, 0)] = unif(g, lo, hi);
        c1[(i, 1)] = unif(g, lo, hi);
        c0[(i, i)] = -(c0[(i, 1 - i)] + c1[(i, 0)] + c1[(i, 1)]);
    }
    ContinuousMap::new(c0, c1).expect("valid random MAP")
}

pub fn arhmm(g: &mut Rng, n: usize, phi: Vec<Vec<f64>>, residual: Residual) -> ArHmm {
    let p = phi.len();
    ArHmm {
        n_states: n,
        transition: stochastic(g, n),
        p,
        mu: (0..n).map(|_| unif(g, 0.5, 5.0)).collect(),
        phi,
        sigma: (0..n).map(|_| unif(g, 0.0, 2.0)).collect(),
        residual,
        pi0: vec![1.0 / n as f64; n],
    }
}

/// `kind` 0 is always on, 1 a point process on an order-`m1` MAP, 2 a dual
/// MAP of orders `m1` and `m2`.
pub fn carrier(g: &mut Rng, kind: usize, m1: usize, m2: usize, dt: f64) -> CarrierChain {
    let mode = match kind {
        0 => CarrierMode::AlwaysOn,
        1 => CarrierMode::PointProcess {
            off: discrete_map(g, m1, dt),
        },
        _ => CarrierMode::DualMap {
            off: discrete_map(g, m1, dt),
            on: discrete_map(g, m2, dt),
        },
    };
    let mut c = carrier::build_q(mode).expect("valid carrier");
    c.dt = Some(dt);
    c
}

/// Random model with `p = 0` and at most `max_states` joint states.
pub fn p0_model(g: &mut Rng, max_states: usize) -> DMaparHmm {
    let dt = 1e-3;
    loop {
        let kind = g.random_range(0..3);
        let m1 = g.random_range(1..=3);
        let m2 = g.random_range(1..=2);
        let n = g.random_range(1..=3);
        let size = match kind {
            0 => n,
            1 => 2 * m1 * n,
            _ => 2 * m1 * m2 * n,
        };
        if size > max_states {
            continue;
        }
        let residual = if g.random::<f64>() < 0.7 {
            Residual::Normal
        } else {
            Residual::Exponential
        };
        let c = carrier(g, kind, m1, m2, dt);
        let ar = arhmm(g, n, Vec::new(), residual);
        return model::build_t(&c, &ar, dt).expect("valid model");
    }
}

/// Random model with `p` lags; coefficients are `scale` times a fixed
/// direction whose largest entry is one and whose absolute row sum stays
/// below 1.6 (for `p <= 2`), so any scale up to one half keeps every state stationary.
pub fn lagged_model(g: &mut Rng, p: usize, n: usize, kind: usize) -> (CarrierChain, ArHmm, Vec<Vec<f64>>) {
    let dt = 1e-3;
    let mut dir = vec![vec![0.0; n]; p];
    for i in 0..n {
        let mut col: Vec<f64> = (0..p).map(|_| unif(g, -1.0, 1.0)).collect();
        let mx = col.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        col.iter_mut().for_each(|x| *x /= mx);
        let sum: f64 = col.iter().map(|x| x.abs()).sum();
        if sum > 1.6 {
            let k = col.iter().position(|x| x.abs() < 1.0).unwrap_or(0);
            col[k] *= 0.6 / (sum - 1.0);
        }
        for l in 0..p {
            dir[l][i] = col[l];
        }
    }
    let c = carrier(g, kind, 2, 1, dt);
    let ar = arhmm(g, n, dir.clone(), Residual::Normal);
    (c, ar, dir)
}

pub fn with_phi(ar: &ArHmm, dir: &[Vec<f64>], scale: f64) -> ArHmm {
    let mut a = ar.clone();
    a.phi = dir
        .iter()
        .map(|row| row.iter().map(|x| x * scale).collect())
        .collect();
    a
}
