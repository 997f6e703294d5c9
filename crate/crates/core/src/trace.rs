//! Packet traces: ingestion, slotting, on/off demodulation and burstiness
//! statistics.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSeries {
    /// `(timestamp seconds, size bytes)`, sorted by timestamp.
    pub records: Vec<(f64, f64)>,
    pub flow_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretizedTrace {
    /// Bytes per slot. Slot `t` (1-based) covers `((t-1)dt, t dt]`.
    pub a: Vec<f64>,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemodulatedTrace {
    /// Non-zero slot amounts in order.
    pub y: Vec<f64>,
    pub tau_on: Vec<usize>,
    pub tau_off: Vec<usize>,
    /// Whether the series opens with an on run.
    pub first_on: bool,
}

impl TraceSeries {
    pub fn total_bytes(&self) -> f64 {
        self.records.iter().map(|r| r.1).sum()
    }

    /// Inter-arrival times in seconds.
    pub fn iats(&self) -> Vec<f64> {
        self.records.windows(2).map(|w| w[1].0 - w[0].0).collect()
    }
}

/// Reads a two-column `timestamp_s,size_bytes` CSV file.
pub fn load_trace(path: &Path) -> Result<TraceSeries> {
    let file = std::fs::File::open(path)?;
    let flow_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_trace(file, &flow_id)
}

/// Parses trace CSV from any reader. A first row whose fields are all
/// non-numeric is treated as a header.
pub fn parse_trace<R: Read>(reader: R, flow_id: &str) -> Result<TraceSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut records = Vec::new();
    for (idx, row) in rdr.records().enumerate() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(idx + 1);
        if row.iter().all(|f| f.is_empty()) {
            continue;
        }
        if row.len() < 2 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 2 columns, found {}", row.len()),
            });
        }
        let ts = row[0].parse::<f64>();
        let sz = row[1].parse::<f64>();
        if idx == 0 && ts.is_err() && sz.is_err() {
            continue;
        }
        let ts = ts.map_err(|_| Error::Parse {
            line,
            msg: format!("bad timestamp `{}`", &row[0]),
        })?;
        let sz = sz.map_err(|_| Error::Parse {
            line,
            msg: format!("bad size `{}`", &row[1]),
        })?;
        if !ts.is_finite() || !sz.is_finite() {
            return Err(Error::Parse {
                line,
                msg: "non-finite value".into(),
            });
        }
        if sz < 0.0 {
            return Err(Error::Parse {
                line,
                msg: format!("negative size {sz}"),
            });
        }
        records.push((ts, sz));
    }
    if records.is_empty() {
        return Err(Error::EmptyTrace);
    }
    records.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(TraceSeries {
        records,
        flow_id: flow_id.to_string(),
    })
}

/// Writes a trace as CSV with a header row.
pub fn write_trace<W: std::io::Write>(w: W, trace: &TraceSeries) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["timestamp_s", "size_bytes"])?;
    for (t, s) in &trace.records {
        wtr.write_record([format!("{t}"), format!("{s}")])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Mean inter-arrival time divided by 40.
pub fn default_dt(trace: &TraceSeries) -> Result<f64> {
    let n = trace.records.len();
    if n < 2 {
        return Err(Error::Undefined("dt needs at least 2 records".into()));
    }
    let span = trace.records[n - 1].0 - trace.records[0].0;
    if span <= 0.0 {
        return Err(Error::Undefined("all inter-arrival times are zero".into()));
    }
    Ok(span / (n - 1) as f64 / 40.0)
}

/// Bins records into slots of width `dt` relative to the first timestamp.
/// The first record lands in slot 1; the array stops at the last non-empty
/// slot.
pub fn discretize(trace: &TraceSeries, dt: f64) -> Result<DiscretizedTrace> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let t0 = match trace.records.first() {
        Some(r) => r.0,
        None => return Ok(DiscretizedTrace { a: Vec::new(), dt }),
    };
    let mut a: Vec<f64> = Vec::new();
    for &(ts, size) in &trace.records {
        let slot = slot_of(ts - t0, dt);
        if a.len() < slot {
            a.resize(slot, 0.0);
        }
        a[slot - 1] += size;
    }
    while a.last() == Some(&0.0) {
        a.pop();
    }
    Ok(DiscretizedTrace { a, dt })
}

/// 1-based slot index of a relative time.
pub fn slot_of(rel: f64, dt: f64) -> usize {
    let x = (rel / dt - 1e-9).ceil();
    if x < 1.0 {
        1
    } else {
        x as usize
    }
}

/// Splits a slot series into the amplitude signal and the on/off run lengths.
pub fn demodulate(disc: &DiscretizedTrace) -> DemodulatedTrace {
    let mut y = Vec::new();
    let mut tau_on = Vec::new();
    let mut tau_off = Vec::new();
    let first_on = disc.a.first().map(|x| *x > 0.0).unwrap_or(false);
    let mut run = 0usize;
    let mut on = first_on;
    for &x in &disc.a {
        let now_on = x > 0.0;
        if now_on != on {
            if run > 0 {
                if on {
                    tau_on.push(run);
                } else {
                    tau_off.push(run);
                }
            }
            run = 0;
            on = now_on;
        }
        run += 1;
        if now_on {
            y.push(x);
        }
    }
    if run > 0 {
        if on {
            tau_on.push(run);
        } else {
            tau_off.push(run);
        }
    }
    DemodulatedTrace {
        y,
        tau_on,
        tau_off,
        first_on,
    }
}

/// Interleaves the runs back into a slot series.
pub fn remodulate(d: &DemodulatedTrace, dt: f64) -> DiscretizedTrace {
    let mut a = Vec::with_capacity(d.tau_on.iter().sum::<usize>() + d.tau_off.iter().sum::<usize>());
    let mut yi = d.y.iter();
    let (mut i_on, mut i_off) = (0, 0);
    let mut on = d.first_on;
    loop {
        if on {
            let Some(&k) = d.tau_on.get(i_on) else { break };
            i_on += 1;
            for _ in 0..k {
                a.push(*yi.next().unwrap_or(&0.0));
            }
        } else {
            let Some(&k) = d.tau_off.get(i_off) else { break };
            i_off += 1;
            a.extend(std::iter::repeat(0.0).take(k));
        }
        on = !on;
    }
    DiscretizedTrace { a, dt }
}

/// Hurst exponent by the aggregated-variance method.
///
/// Block sizes run over powers of two while at least 8 blocks remain; the
/// slope of log variance of block means against log block size is
/// `2H - 2`.
pub fn hurst(series: &[f64]) -> Result<f64> {
    let n = series.len();
    if n < 64 {
        return Err(Error::InsufficientData(format!(
            "hurst needs at least 64 samples, got {n}"
        )));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut m = 1usize;
    while n / m >= 8 {
        let k = n / m;
        let means: Vec<f64> = (0..k)
            .map(|b| series[b * m..(b + 1) * m].iter().sum::<f64>() / m as f64)
            .collect();
        let mu = means.iter().sum::<f64>() / k as f64;
        let var = means.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / k as f64;
        if var > 0.0 {
            xs.push((m as f64).ln());
            ys.push(var.ln());
        } else if m == 1 {
            return Err(Error::InsufficientData("series has zero variance".into()));
        }
        m *= 2;
    }
    if xs.len() < 2 {
        return Err(Error::InsufficientData("too few usable block sizes".into()));
    }
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let h = 1.0 + 0.5 * sxy / sxx;
    Ok(h.clamp(1e-6, 1.0 - 1e-6))
}

/// Population standard deviation over mean.
pub fn cv(series: &[f64]) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::InsufficientData("empty series".into()));
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(Error::Undefined("cv of a zero-mean series".into()));
    }
    let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(recs: &[(f64, f64)]) -> TraceSeries {
        TraceSeries {
            records: recs.to_vec(),
            flow_id: "f".into(),
        }
    }

    #[test]
    fn parse_basic_and_header() {
        let t = parse_trace("0.0,100\n0.5,200".as_bytes(), "x").unwrap();
        assert_eq!(t.records, vec![(0.0, 100.0), (0.5, 200.0)]);
        let t = parse_trace("timestamp_s,size_bytes\r\n0.5,1\r\n0.1,2\r\n".as_bytes(), "x").unwrap();
        assert_eq!(t.records, vec![(0.1, 2.0), (0.5, 1.0)]);
    }

    #[test]
    fn parse_errors_carry_line() {
        match parse_trace("0.0,1\nabc,100\n".as_bytes(), "x") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse_trace("abc,100\n".as_bytes(), "x") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_trace("".as_bytes(), "x"), Err(Error::EmptyTrace)));
        assert!(matches!(
            parse_trace("0,-1".as_bytes(), "x"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn dt_examples() {
        assert!((default_dt(&tr(&[(0.0, 1.0), (1.0, 1.0), (2.0, 1.0)])).unwrap() - 0.025).abs() < 1e-15);
        assert!((default_dt(&tr(&[(0.0, 1.0), (4.0, 1.0)])).unwrap() - 0.1).abs() < 1e-15);
        assert!(default_dt(&tr(&[(0.0, 1.0)])).is_err());
        assert!(default_dt(&tr(&[(1.0, 1.0), (1.0, 2.0)])).is_err());
    }

    #[test]
    fn discretize_example() {
        let d = discretize(&tr(&[(0.0, 10.0), (0.03, 5.0), (0.11, 7.0)]), 0.05).unwrap();
        assert_eq!(d.a, vec![15.0, 0.0, 7.0]);
        assert!(discretize(&tr(&[(0.0, 1.0)]), 0.0).is_err());
        // boundary: 0.1 belongs to slot 2
        let d = discretize(&tr(&[(0.0, 1.0), (0.1, 1.0)]), 0.05).unwrap();
        assert_eq!(d.a, vec![1.0, 1.0]);
    }

    #[test]
    fn demodulate_examples() {
        let d = demodulate(&DiscretizedTrace {
            a: vec![0.0, 0.0, 5.0, 3.0, 0.0, 4.0],
            dt: 1.0,
        });
        assert_eq!(d.y, vec![5.0, 3.0, 4.0]);
        assert_eq!(d.tau_off, vec![2, 1]);
        assert_eq!(d.tau_on, vec![2, 1]);
        let d = demodulate(&DiscretizedTrace { a: vec![1.0; 3], dt: 1.0 });
        assert_eq!(d.tau_on, vec![3]);
        assert!(d.tau_off.is_empty());
        let d = demodulate(&DiscretizedTrace { a: vec![0.0; 2], dt: 1.0 });
        assert!(d.y.is_empty() && d.tau_on.is_empty());
        assert_eq!(d.tau_off, vec![2]);
    }

    #[test]
    fn cv_examples() {
        assert_eq!(cv(&[5.0, 5.0, 5.0]).unwrap(), 0.0);
        assert!((cv(&[0.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(cv(&[1.0, -1.0]).is_err());
    }

    #[test]
    fn hurst_guards() {
        assert!(hurst(&[1.0; 63]).is_err());
        assert!(hurst(&[2.0; 1000]).is_err());
    }
}
