use dmapar::rng;
use dmapar::trace::{self, TraceSeries};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Fractional Gaussian noise by circulant embedding (Davies-Harte).
fn fgn(n: usize, h: f64, seed: u64) -> Vec<f64> {
    let gamma = |k: f64| 0.5 * ((k + 1.0).powf(2.0 * h) - 2.0 * k.powf(2.0 * h) + (k - 1.0).abs().powf(2.0 * h));
    let m = 2 * n;
    let mut c: Vec<Complex<f64>> = (0..m)
        .map(|j| {
            let k = if j <= n { j } else { m - j };
            Complex::new(gamma(k as f64), 0.0)
        })
        .collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(m);
    fft.process(&mut c);
    let mut g = rng::seeded(seed);
    let mut z = || -> f64 { StandardNormal.sample(&mut g) };
    let mut v = vec![Complex::new(0.0, 0.0); m];
    for k in 0..=n {
        let lam = c[k].re.max(0.0);
        if k == 0 || k == n {
            v[k] = Complex::new(lam.sqrt() * z(), 0.0);
        } else {
            let s = (lam / 2.0).sqrt();
            v[k] = Complex::new(s * z(), s * z());
            v[m - k] = v[k].conj();
        }
    }
    fft.process(&mut v);
    let scale = 1.0 / (m as f64).sqrt();
    v[..n].iter().map(|x| x.re * scale).collect()
}

#[test]
fn hurst_recovers_fgn_exponent() {
    for (i, h) in [0.3, 0.5, 0.7, 0.85].into_iter().enumerate() {
        let x = fgn(100_000, h, 100 + i as u64);
        let est = trace::hurst(&x).unwrap();
        assert!((est - h).abs() <= 0.05, "H {h}: estimated {est}");
    }
}

fn records() -> impl Strategy<Value = Vec<(f64, f64)>> {
    proptest::collection::vec((0u32..2_000_000, 40u32..1500), 1..400).prop_map(|mut v| {
        v.sort();
        v.into_iter().map(|(t, s)| (t as f64 * 1e-6, s as f64)).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn discretize_conserves_bytes_and_round_trips(recs in records(), dt in 1e-5..1e-2f64) {
        let tr = TraceSeries { records: recs, flow_id: "f".into() };
        let d = trace::discretize(&tr, dt).unwrap();
        prop_assert_eq!(d.a.iter().sum::<f64>(), tr.total_bytes());
        let dm = trace::demodulate(&d);
        prop_assert_eq!(trace::remodulate(&dm, dt), d.clone());
        let again = trace::demodulate(&trace::discretize(&tr, dt).unwrap());
        prop_assert_eq!(again, dm);
    }

    #[test]
    fn csv_round_trip(recs in records()) {
        let tr = TraceSeries { records: recs, flow_id: "f".into() };
        let mut buf = Vec::new();
        trace::write_trace(&mut buf, &tr).unwrap();
        let back = trace::parse_trace(&buf[..], "f").unwrap();
        prop_assert_eq!(back, tr);
    }
}
