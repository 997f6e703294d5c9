//! Dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, Schur};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let n = rows.len();
    let m = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Format("ragged matrix rows".into()));
    }
    Ok(Mat::from_fn(n, m, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn row_sums(m: &Mat) -> Vec<f64> {
    (0..m.nrows()).map(|i| m.row(i).sum()).collect()
}

/// Largest deviation of a row sum from one.
pub fn max_row_sum_error(m: &Mat) -> f64 {
    row_sums(m)
        .iter()
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Moduli of the eigenvalues of a square matrix (real Schur form).
pub fn eigen_moduli(m: &Mat) -> Vec<f64> {
    if m.nrows() == 1 {
        return vec![m[(0, 0)].abs()];
    }
    match Schur::try_new(m.clone(), f64::EPSILON, 20_000) {
        Some(s) => s.complex_eigenvalues().iter().map(|z| z.norm()).collect(),
        None => vec![gelfand_radius(m)],
    }
}

/// Spectral radius from the eigenvalues. Falls back to Gelfand's formula
/// when the QR iteration does not converge.
pub fn spectral_radius_eig(m: &Mat) -> f64 {
    eigen_moduli(m).into_iter().fold(0.0, f64::max)
}

/// `lim ||A^k||^(1/k)` by repeated squaring with renormalization.
pub fn gelfand_radius(m: &Mat) -> f64 {
    let mut a = m.clone();
    let mut log_scale = 0.0;
    let mut k = 1.0;
    let mut est = a.norm();
    for _ in 0..40 {
        let n = a.norm();
        if !(n > 0.0) {
            return 0.0;
        }
        a /= n;
        log_scale += n.ln() / k;
        a = &a * &a;
        k *= 2.0;
        est = (log_scale + a.norm().ln() / k).exp();
    }
    est
}

/// Period of the closed class containing `start`, from the support graph.
pub fn period(t: &Mat, start: usize) -> usize {
    let n = t.nrows();
    let mut level = vec![usize::MAX; n];
    level[start] = 0;
    let mut queue = std::collections::VecDeque::from([start]);
    let mut g = 0usize;
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if t[(u, v)] <= 0.0 {
                continue;
            }
            if level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            } else {
                let d = (level[u] + 1).abs_diff(level[v]);
                g = gcd(g, d);
            }
        }
    }
    g.max(1)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Stationary row vector of a row-stochastic matrix.
///
/// Solves `pi (T - I) = 0, sum(pi) = 1` in the least-squares sense and
/// falls back to power iteration if the solve is inaccurate. Reducible or
/// periodic chains are rejected.
pub fn stationary(t: &Mat) -> Result<Vec<f64>> {
    let n = t.nrows();
    if n != t.ncols() || n == 0 {
        return Err(Error::InvalidArgument("transition matrix must be square".into()));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let a = t.transpose() - Mat::identity(n, n);
    let sv = a
        .clone()
        .try_svd(false, false, f64::EPSILON, 100_000)
        .ok_or_else(|| Error::Degenerate("SVD did not converge".into()))?
        .singular_values;
    let mut svs: Vec<f64> = sv.iter().cloned().collect();
    svs.sort_by(|x, y| x.partial_cmp(y).unwrap());
    if svs.len() >= 2 && svs[1] < 1e-10 {
        return Err(Error::NonErgodic(
            "eigenvalue 1 has multiplicity greater than one".into(),
        ));
    }
    let pi = stationary_ls(t)?;
    let start = (0..n).max_by(|&a, &b| pi[a].total_cmp(&pi[b])).unwrap_or(0);
    if period(t, start) > 1 {
        return Err(Error::NonErgodic("chain is periodic".into()));
    }
    Ok(pi)
}

/// Least-squares stationary vector without ergodicity checks.
pub fn stationary_ls(t: &Mat) -> Result<Vec<f64>> {
    let n = t.nrows();
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let a = t.transpose() - Mat::identity(n, n);
    let mut aug = Mat::zeros(n + 1, n);
    aug.view_mut((0, 0), (n, n)).copy_from(&a);
    for j in 0..n {
        aug[(n, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(n + 1);
    rhs[n] = 1.0;
    let mut pi: Vec<f64> = match aug.try_svd(true, true, f64::EPSILON, 100_000) {
        Some(svd) => svd
            .solve(&rhs, 1e-14)
            .map_err(|e| Error::Singular(e.to_string()))?
            .iter()
            .map(|x| x.max(0.0))
            .collect(),
        None => vec![1.0 / n as f64; n],
    };
    normalize(&mut pi);
    if stationary_residual(t, &pi) > 1e-12 {
        pi = power_stationary(t, &pi);
    }
    Ok(pi)
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
}

/// `max |pi T - pi|`.
pub fn stationary_residual(t: &Mat, pi: &[f64]) -> f64 {
    let n = pi.len();
    let mut worst: f64 = 0.0;
    for j in 0..n {
        let s: f64 = (0..n).map(|i| pi[i] * t[(i, j)]).sum();
        worst = worst.max((s - pi[j]).abs());
    }
    worst
}

fn power_stationary(t: &Mat, start: &[f64]) -> Vec<f64> {
    let n = start.len();
    let mut pi = start.to_vec();
    for _ in 0..100_000 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            if pi[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                next[j] += pi[i] * t[(i, j)];
            }
        }
        normalize(&mut next);
        let diff = next
            .iter()
            .zip(&pi)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        pi = next;
        if diff < 1e-15 {
            break;
        }
    }
    pi
}

/// Perron root and right Perron vector of a nonnegative irreducible,
/// aperiodic matrix.
#[derive(Debug, Clone)]
pub struct Perron {
    pub root: f64,
    /// Right eigenvector, positive, normalized to max entry 1.
    pub right: Vec<f64>,
}

/// Perron root via repeated squaring of the scaled matrix followed by power
/// refinement. Does not rely on an eigensolver.
pub fn perron(m: &Mat) -> Result<Perron> {
    let n = m.nrows();
    if n == 1 {
        return Ok(Perron {
            root: m[(0, 0)],
            right: vec![1.0],
        });
    }
    if m.iter().any(|x| *x < 0.0 || !x.is_finite()) {
        return Err(Error::Degenerate("matrix must be nonnegative and finite".into()));
    }
    let scale = m.max();
    if scale <= 0.0 {
        return Err(Error::Degenerate("zero matrix".into()));
    }
    let base = m / scale;
    let mut b = base.clone();
    for _ in 0..60 {
        b = &b * &b;
        let s = b.max();
        if s <= 0.0 || !s.is_finite() {
            return Err(Error::Degenerate("matrix is nilpotent".into()));
        }
        b /= s;
    }
    let mut best = 0;
    let mut best_norm = -1.0;
    for j in 0..n {
        let c = b.column(j).sum();
        if c > best_norm {
            best_norm = c;
            best = j;
        }
    }
    let mut r: DVector<f64> = b.column(best).into_owned();
    let mx = r.max();
    r /= mx;
    let mut lambda = 0.0;
    for _ in 0..200 {
        let next = &base * &r;
        let nl = next.sum() / r.sum();
        let mx = next.max();
        if mx <= 0.0 {
            return Err(Error::Degenerate("power iteration collapsed".into()));
        }
        let next = next / mx;
        let diff = (&next - &r).amax();
        r = next;
        let settled = (nl - lambda).abs() <= 1e-15 * nl.abs() && diff < 1e-15;
        lambda = nl;
        if settled {
            break;
        }
    }
    Ok(Perron {
        root: lambda * scale,
        right: r.iter().cloned().collect(),
    })
}

/// Serde adapter storing a matrix as row-major nested arrays.
pub mod mat_serde {
    use super::Mat;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        super::to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// `x^T M` for a row vector.
pub fn vec_mat(x: &[f64], m: &Mat) -> Vec<f64> {
    let n = m.ncols();
    let mut out = vec![0.0; n];
    for (i, xi) in x.iter().enumerate() {
        if *xi == 0.0 {
            continue;
        }
        for j in 0..n {
            out[j] += xi * m[(i, j)];
        }
    }
    out
}

/// `M x` for a column vector.
pub fn mat_vec(m: &Mat, x: &[f64]) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * x[j]).sum())
        .collect()
}
