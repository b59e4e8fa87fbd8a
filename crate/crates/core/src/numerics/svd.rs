//! Reduced singular value decomposition.
//!
//! Householder bidiagonalization (Golub–Kahan) followed by implicit-shift QR
//! sweeps on the bidiagonal. Works on the tall orientation internally; wide
//! inputs are transposed and the factors swapped back.

use crate::error::{Error, Result};
use crate::numerics::matrix::{dot, Matrix, Vector};

/// `A = U · diag(S) · Vᵀ` with `U: rows×r`, `V: cols×r`, `r = min(rows, cols)`.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    pub u: Matrix,
    pub s: Vector,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// Rebuilds `U · diag(S) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let (m, r) = self.u.shape();
        let n = self.v.rows();
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let row = out.row_mut(i);
            for k in 0..r {
                let w = self.u.get(i, k) * self.s[k];
                if w == 0.0 {
                    continue;
                }
                for (j, o) in row.iter_mut().enumerate() {
                    *o += w * self.v.get(j, k);
                }
            }
        }
        out
    }
}

pub fn reduced_svd(a: &Matrix) -> Result<SvdFactors> {
    let (rows, cols) = a.shape();
    if rows.min(cols) == 0 {
        return Err(Error::arg("svd of an empty matrix"));
    }
    if !a.is_finite() {
        return Err(Error::Numerical("svd input has non-finite entries".into()));
    }
    if rows >= cols {
        let cols_major = (0..cols).map(|j| a.column(j)).collect();
        let (u, s, v) = golub_kahan(cols_major, rows, cols)?;
        Ok(SvdFactors {
            u: from_columns(&u, rows),
            s,
            v: from_columns(&v, cols),
        })
    } else {
        // columns of Aᵀ are the rows of A
        let cols_major = (0..rows).map(|i| a.row(i).to_vec()).collect();
        let (u, s, v) = golub_kahan(cols_major, cols, rows)?;
        Ok(SvdFactors {
            u: from_columns(&v, rows),
            s,
            v: from_columns(&u, cols),
        })
    }
}

fn from_columns(cols: &[Vec<f64>], rows: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols.len());
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            m.set(i, j, v);
        }
    }
    m
}

fn rotate(x: &mut [f64], y: &mut [f64], cs: f64, sn: f64) {
    for (xi, yi) in x.iter_mut().zip(y.iter_mut()) {
        let t = cs * *xi + sn * *yi;
        *yi = -sn * *xi + cs * *yi;
        *xi = t;
    }
}

fn pair_mut(cols: &mut [Vec<f64>], i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(i != j);
    if i < j {
        let (lo, hi) = cols.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = cols.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    }
}

/// Tall case `m >= n`. `a` holds the n columns, each of length m.
/// Returns U columns (n of length m), singular values, V columns (n of length n).
#[allow(clippy::type_complexity)]
fn golub_kahan(
    mut a: Vec<Vec<f64>>,
    m: usize,
    n: usize,
) -> Result<(Vec<Vec<f64>>, Vector, Vec<Vec<f64>>)> {
    let nu = n;
    let mut s = vec![0.0; n];
    let mut e = vec![0.0; n];
    let mut u = vec![vec![0.0; m]; nu];
    let mut v = vec![vec![0.0; n]; n];
    let mut work = vec![0.0; m];

    let nct = (m - 1).min(n);
    let nrt = n.saturating_sub(2).min(m);

    for k in 0..nct.max(nrt) {
        if k < nct {
            // column Householder, k-th diagonal into s[k]
            let mut sk = 0.0f64;
            for i in k..m {
                sk = sk.hypot(a[k][i]);
            }
            if sk != 0.0 {
                if a[k][k] < 0.0 {
                    sk = -sk;
                }
                for i in k..m {
                    a[k][i] /= sk;
                }
                a[k][k] += 1.0;
            }
            s[k] = -sk;
        }
        for j in k + 1..n {
            if k < nct && s[k] != 0.0 {
                let (ak, aj) = pair_mut(&mut a, k, j);
                let t = -dot(&ak[k..], &aj[k..]) / ak[k];
                for i in k..m {
                    aj[i] += t * ak[i];
                }
            }
            e[j] = a[j][k];
        }
        if k < nct {
            u[k][k..m].copy_from_slice(&a[k][k..m]);
        }
        if k < nrt {
            // row Householder, k-th superdiagonal into e[k]
            let mut ek = 0.0f64;
            for &ei in &e[k + 1..n] {
                ek = ek.hypot(ei);
            }
            if ek != 0.0 {
                if e[k + 1] < 0.0 {
                    ek = -ek;
                }
                for ei in &mut e[k + 1..n] {
                    *ei /= ek;
                }
                e[k + 1] += 1.0;
            }
            e[k] = -ek;
            if k + 1 < m && e[k] != 0.0 {
                work[k + 1..m].fill(0.0);
                for j in k + 1..n {
                    let ej = e[j];
                    for i in k + 1..m {
                        work[i] += ej * a[j][i];
                    }
                }
                for j in k + 1..n {
                    let t = -e[j] / e[k + 1];
                    for i in k + 1..m {
                        a[j][i] += t * work[i];
                    }
                }
            }
            v[k][k + 1..n].copy_from_slice(&e[k + 1..n]);
        }
    }

    // final bidiagonal of order p
    let mut p = n.min(m + 1);
    if nct < n {
        s[nct] = a[nct][nct];
    }
    if m < p {
        s[p - 1] = 0.0;
    }
    if nrt + 1 < p {
        e[nrt] = a[p - 1][nrt];
    }
    e[p - 1] = 0.0;

    // generate U
    for j in nct..nu {
        u[j].fill(0.0);
        u[j][j] = 1.0;
    }
    for k in (0..nct).rev() {
        if s[k] != 0.0 {
            for j in k + 1..nu {
                let (uk, uj) = pair_mut(&mut u, k, j);
                let t = -dot(&uk[k..], &uj[k..]) / uk[k];
                for i in k..m {
                    uj[i] += t * uk[i];
                }
            }
            for i in k..m {
                u[k][i] = -u[k][i];
            }
            u[k][k] += 1.0;
            u[k][..k].fill(0.0);
        } else {
            u[k].fill(0.0);
            u[k][k] = 1.0;
        }
    }

    // generate V
    for k in (0..n).rev() {
        if k < nrt && e[k] != 0.0 {
            for j in k + 1..nu {
                let (vk, vj) = pair_mut(&mut v, k, j);
                let t = -dot(&vk[k + 1..], &vj[k + 1..]) / vk[k + 1];
                for i in k + 1..n {
                    vj[i] += t * vk[i];
                }
            }
        }
        v[k].fill(0.0);
        v[k][k] = 1.0;
    }

    // implicit-shift QR on the bidiagonal
    let pp = p - 1;
    let eps = f64::EPSILON;
    let tiny = 2f64.powi(-966);
    let cap = 100 * n;
    let mut sweeps = 0usize;
    while p > 0 {
        let mut k: isize = p as isize - 2;
        while k >= 0 {
            let ku = k as usize;
            if e[ku].abs() <= tiny + eps * (s[ku].abs() + s[ku + 1].abs()) {
                e[ku] = 0.0;
                break;
            }
            k -= 1;
        }
        let kase;
        if k == p as isize - 2 {
            kase = 4;
        } else {
            let mut ks: isize = p as isize - 1;
            while ks > k {
                let ksu = ks as usize;
                let t = if ksu != p { e[ksu].abs() } else { 0.0 }
                    + if ks != k + 1 { e[ksu - 1].abs() } else { 0.0 };
                if s[ksu].abs() <= tiny + eps * t {
                    s[ksu] = 0.0;
                    break;
                }
                ks -= 1;
            }
            if ks == k {
                kase = 3;
            } else if ks == p as isize - 1 {
                kase = 1;
            } else {
                kase = 2;
                k = ks;
            }
        }
        let k = (k + 1) as usize;

        match kase {
            1 => {
                // deflate negligible s[p-1]
                let mut f = e[p - 2];
                e[p - 2] = 0.0;
                for j in (k..=p - 2).rev() {
                    let t = s[j].hypot(f);
                    let cs = s[j] / t;
                    let sn = f / t;
                    s[j] = t;
                    if j != k {
                        f = -sn * e[j - 1];
                        e[j - 1] *= cs;
                    }
                    let (vj, vp) = pair_mut(&mut v, j, p - 1);
                    rotate(vj, vp, cs, sn);
                }
            }
            2 => {
                // split at negligible s[k-1]
                let mut f = e[k - 1];
                e[k - 1] = 0.0;
                for j in k..p {
                    let t = s[j].hypot(f);
                    let cs = s[j] / t;
                    let sn = f / t;
                    s[j] = t;
                    f = -sn * e[j];
                    e[j] *= cs;
                    let (uj, uk) = pair_mut(&mut u, j, k - 1);
                    rotate(uj, uk, cs, sn);
                }
            }
            3 => {
                sweeps += 1;
                if sweeps > cap {
                    return Err(Error::SvdNoConvergence { iterations: sweeps });
                }
                let scale = s[p - 1]
                    .abs()
                    .max(s[p - 2].abs())
                    .max(e[p - 2].abs())
                    .max(s[k].abs())
                    .max(e[k].abs());
                let sp = s[p - 1] / scale;
                let spm1 = s[p - 2] / scale;
                let epm1 = e[p - 2] / scale;
                let sk = s[k] / scale;
                let ek = e[k] / scale;
                let b = ((spm1 + sp) * (spm1 - sp) + epm1 * epm1) / 2.0;
                let c = (sp * epm1) * (sp * epm1);
                let mut shift = 0.0;
                if b != 0.0 || c != 0.0 {
                    shift = (b * b + c).sqrt();
                    if b < 0.0 {
                        shift = -shift;
                    }
                    shift = c / (b + shift);
                }
                let mut f = (sk + sp) * (sk - sp) + shift;
                let mut g = sk * ek;

                // chase the bulge
                for j in k..p - 1 {
                    let mut t = f.hypot(g);
                    let mut cs = f / t;
                    let mut sn = g / t;
                    if j != k {
                        e[j - 1] = t;
                    }
                    f = cs * s[j] + sn * e[j];
                    e[j] = cs * e[j] - sn * s[j];
                    g = sn * s[j + 1];
                    s[j + 1] *= cs;
                    {
                        let (vj, vj1) = pair_mut(&mut v, j, j + 1);
                        rotate(vj, vj1, cs, sn);
                    }
                    t = f.hypot(g);
                    cs = f / t;
                    sn = g / t;
                    s[j] = t;
                    f = cs * e[j] + sn * s[j + 1];
                    s[j + 1] = -sn * e[j] + cs * s[j + 1];
                    g = sn * e[j + 1];
                    e[j + 1] *= cs;
                    if j < m - 1 {
                        let (uj, uj1) = pair_mut(&mut u, j, j + 1);
                        rotate(uj, uj1, cs, sn);
                    }
                }
                e[p - 2] = f;
            }
            _ => {
                // converged: make s[k] nonnegative, then bubble into order
                if s[k] <= 0.0 {
                    s[k] = if s[k] < 0.0 { -s[k] } else { 0.0 };
                    for x in &mut v[k][..=pp] {
                        *x = -*x;
                    }
                }
                let mut k = k;
                while k < pp && s[k] < s[k + 1] {
                    s.swap(k, k + 1);
                    v.swap(k, k + 1);
                    u.swap(k, k + 1);
                    k += 1;
                }
                p -= 1;
            }
        }
    }
    Ok((u, s, v))
}
