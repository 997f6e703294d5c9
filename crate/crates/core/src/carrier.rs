//! The on/off carrier chain built from two discrete MAPs.
//!
//! States are `(o, s_on, s_off)` flattened as `o*m1*m2 + s_on*m1 + s_off`,
//! with `m1` the off-MAP order and `m2` the on-MAP order. While off, the
//! off-MAP moves and the on sub-state is frozen; an off-MAP event switches
//! the carrier on and the on-MAP makes a normalized event jump. The on phase
//! mirrors this.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, mat_serde, Mat};
use crate::map::DiscreteMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CarrierMode {
    DualMap { off: DiscreteMap, on: DiscreteMap },
    /// Every event of the off-MAP marks one on slot. The slot-level phase
    /// moves by `D0` into an off slot and by `D1` into an on slot.
    PointProcess { off: DiscreteMap },
    AlwaysOn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarrierChain {
    pub mode: CarrierMode,
    pub m1: usize,
    pub m2: usize,
    #[serde(with = "mat_serde")]
    pub q: Mat,
    /// Number of off states; states with index `>= n_off` are on.
    pub n_off: usize,
    pub dt: Option<f64>,
}

impl CarrierChain {
    pub fn n_states(&self) -> usize {
        self.q.nrows()
    }

    pub fn is_on(&self, idx: usize) -> bool {
        idx >= self.n_off
    }
}

/// `o*m1*m2 + s_on*m1 + s_off`.
pub fn embed_state(o: usize, s_on: usize, s_off: usize, m1: usize, m2: usize) -> Result<usize> {
    if o > 1 || s_on >= m2 || s_off >= m1 {
        return Err(Error::InvalidArgument(format!(
            "state ({o},{s_on},{s_off}) out of range for m1={m1}, m2={m2}"
        )));
    }
    Ok(o * m1 * m2 + s_on * m1 + s_off)
}

/// Inverse of [`embed_state`].
pub fn unembed_state(idx: usize, m1: usize, m2: usize) -> (usize, usize, usize) {
    let o = idx / (m1 * m2);
    let rest = idx % (m1 * m2);
    (o, rest / m1, rest % m1)
}

fn row_normalized(d1: &Mat) -> Result<(Mat, Vec<f64>)> {
    let sums = linalg::row_sums(d1);
    let mut out = d1.clone();
    for (i, s) in sums.iter().enumerate() {
        if !(*s > 0.0) {
            return Err(Error::NonNormalizable { state: i });
        }
        for j in 0..d1.ncols() {
            out[(i, j)] /= s;
        }
    }
    Ok((out, sums))
}

pub fn build_q(mode: CarrierMode) -> Result<CarrierChain> {
    match &mode {
        CarrierMode::AlwaysOn => Ok(CarrierChain {
            mode,
            m1: 1,
            m2: 1,
            q: Mat::from_element(1, 1, 1.0),
            n_off: 0,
            dt: None,
        }),
        CarrierMode::PointProcess { off } => {
            off.validate()?;
            if off.d1.iter().all(|x| *x == 0.0) {
                return Err(Error::NoArrivals);
            }
            let m1 = off.m;
            let mut q = Mat::zeros(2 * m1, 2 * m1);
            for o in 0..2 {
                for j in 0..m1 {
                    for k in 0..m1 {
                        q[(o * m1 + j, k)] = off.d0[(j, k)];
                        q[(o * m1 + j, m1 + k)] = off.d1[(j, k)];
                    }
                }
            }
            Ok(CarrierChain {
                m1,
                m2: 1,
                q,
                n_off: m1,
                dt: Some(off.dt),
                mode,
            })
        }
        CarrierMode::DualMap { off, on } => {
            off.validate()?;
            on.validate()?;
            if (off.dt - on.dt).abs() > 1e-12 * off.dt.max(on.dt) {
                return Err(Error::InvalidArgument(format!(
                    "off and on maps use different dt ({} vs {})",
                    off.dt, on.dt
                )));
            }
            let (m1, m2) = (off.m, on.m);
            let (p_off, r_off) = row_normalized(&off.d1)?;
            let (p_on, r_on) = row_normalized(&on.d1)?;
            let half = m1 * m2;
            let mut q = Mat::zeros(2 * half, 2 * half);
            let oo = linalg::kron(&Mat::identity(m2, m2), &off.d0);
            let on_ = linalg::kron(&p_on, &Mat::from_diagonal(&r_off.into()));
            let nn = linalg::kron(&on.d0, &Mat::identity(m1, m1));
            let nf = linalg::kron(&Mat::from_diagonal(&r_on.into()), &p_off);
            q.view_mut((0, 0), (half, half)).copy_from(&oo);
            q.view_mut((0, half), (half, half)).copy_from(&on_);
            q.view_mut((half, half), (half, half)).copy_from(&nn);
            q.view_mut((half, 0), (half, half)).copy_from(&nf);
            Ok(CarrierChain {
                m1,
                m2,
                q,
                n_off: half,
                dt: Some(off.dt),
                mode,
            })
        }
    }
}
