//! Thin complex SVD and the rank-one FS-GCC denoisers built on it.
//!
//! The factorisation first reduces the wide `L × N` matrix to an `L × L`
//! triangular factor with Householder QR, then runs one-sided (Hestenes)
//! Jacobi rotations on that small factor.

use num_complex::Complex64;

use crate::fsgcc::{FsGccMatrix, RealMatrix};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);
const JACOBI_TOL: f64 = 1e-15;
const MAX_SWEEPS: usize = 80;

/// `A = U · diag(σ) · Vᴴ` with `r = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct SvdFactorization {
    /// `r` left singular vectors, each of length `rows`.
    pub u: Vec<Vec<Complex64>>,
    /// Descending, non-negative.
    pub singular_values: Vec<f64>,
    /// `r` right singular vectors, each of length `cols`.
    pub v: Vec<Vec<Complex64>>,
}

impl SvdFactorization {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// Dense row-major reconstruction, optionally truncated to `terms`.
    pub fn reconstruct(&self, terms: usize) -> Vec<Complex64> {
        let rows = self.u.first().map_or(0, Vec::len);
        let cols = self.v.first().map_or(0, Vec::len);
        let mut out = vec![ZERO; rows * cols];
        for i in 0..terms.min(self.rank()) {
            let s = self.singular_values[i];
            for l in 0..rows {
                let a = self.u[i][l] * s;
                for (o, v) in out[l * cols..(l + 1) * cols].iter_mut().zip(&self.v[i]) {
                    *o += a * v.conj();
                }
            }
        }
        out
    }
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    // Σ a · conj(b)
    a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
}

fn norm_sqr(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum()
}

/// Householder QR of a tall `n × m` matrix given as `m` columns.
/// Returns thin `Q` (m columns of length n) and `R` (m × m, row-major).
fn householder_qr(mut cols: Vec<Vec<Complex64>>) -> (Vec<Vec<Complex64>>, Vec<Complex64>) {
    let m = cols.len();
    let n = cols.first().map_or(0, Vec::len);
    let mut reflectors: Vec<Option<Vec<Complex64>>> = Vec::with_capacity(m);
    for j in 0..m {
        let x = &cols[j][j..];
        let norm = norm_sqr(x).sqrt();
        if norm == 0.0 {
            reflectors.push(None);
            continue;
        }
        let phase = if x[0].norm() > 0.0 { x[0] / x[0].norm() } else { ONE };
        let alpha = -phase * norm;
        let mut v: Vec<Complex64> = x.to_vec();
        v[0] -= alpha;
        let vn = norm_sqr(&v).sqrt();
        if vn == 0.0 {
            reflectors.push(None);
            continue;
        }
        v.iter_mut().for_each(|e| *e /= vn);
        for col in cols.iter_mut().skip(j) {
            let tail = &mut col[j..];
            // H = I - 2 v vᴴ
            let proj: Complex64 = v.iter().zip(tail.iter()).map(|(a, b)| a.conj() * b).sum();
            let f = proj * 2.0;
            for (t, a) in tail.iter_mut().zip(&v) {
                *t -= a * f;
            }
        }
        reflectors.push(Some(v));
    }
    let mut r = vec![ZERO; m * m];
    for j in 0..m {
        for i in 0..=j.min(m - 1) {
            r[i * m + j] = cols[j][i];
        }
    }
    // Q = H_0 … H_{m-1} [I_m; 0]
    let mut q: Vec<Vec<Complex64>> = (0..m)
        .map(|j| {
            let mut e = vec![ZERO; n];
            e[j] = ONE;
            e
        })
        .collect();
    for j in (0..m).rev() {
        if let Some(v) = &reflectors[j] {
            for col in q.iter_mut() {
                let tail = &mut col[j..];
                let proj: Complex64 = v.iter().zip(tail.iter()).map(|(a, b)| a.conj() * b).sum();
                let f = proj * 2.0;
                for (t, a) in tail.iter_mut().zip(v) {
                    *t -= a * f;
                }
            }
        }
    }
    (q, r)
}

/// One-sided Jacobi on the rows of a matrix: returns the rotation `J`
/// (rows) and the rotated, mutually orthogonal rows `J·A`.
fn jacobi_rows(mut rows: Vec<Vec<Complex64>>) -> (Vec<Vec<Complex64>>, Vec<Vec<Complex64>>) {
    let m = rows.len();
    let mut j: Vec<Vec<Complex64>> = (0..m)
        .map(|i| {
            let mut e = vec![ZERO; m];
            e[i] = ONE;
            e
        })
        .collect();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..m {
            for q in p + 1..m {
                let alpha = norm_sqr(&rows[p]);
                let beta = norm_sqr(&rows[q]);
                let gamma = dot(&rows[p], &rows[q]);
                let g = gamma.norm();
                if g == 0.0 || g <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let phase = gamma / g;
                let zeta = (beta - alpha) / (2.0 * g);
                let sign = if zeta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let rotate = |a: &mut [Complex64], b: &mut [Complex64]| {
                    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
                        let yq = phase * *y;
                        let xp = *x;
                        *x = xp * c - yq * s;
                        *y = xp * s + yq * c;
                    }
                };
                let (head, tail) = rows.split_at_mut(q);
                rotate(&mut head[p], &mut tail[0]);
                let (head, tail) = j.split_at_mut(q);
                rotate(&mut head[p], &mut tail[0]);
            }
        }
        if !rotated {
            break;
        }
    }
    (j, rows)
}

/// Extends `basis` with unit vectors orthogonal to everything already in it.
fn complete_orthonormal(basis: &mut [Vec<Complex64>], valid: &[bool]) {
    let dim = basis.first().map_or(0, Vec::len);
    let mut candidate = 0;
    for i in 0..basis.len() {
        if valid[i] {
            continue;
        }
        loop {
            let mut e = vec![ZERO; dim];
            e[candidate % dim] = ONE;
            candidate += 1;
            for k in 0..basis.len() {
                if valid[k] || k < i {
                    let proj = dot(&e, &basis[k]);
                    for (x, b) in e.iter_mut().zip(&basis[k]) {
                        *x -= proj * b;
                    }
                }
            }
            let n = norm_sqr(&e).sqrt();
            if n > 1e-6 {
                e.iter_mut().for_each(|x| *x /= n);
                basis[i] = e;
                break;
            }
        }
    }
}

/// Thin SVD of a row-major `rows × cols` complex matrix.
pub fn svd(entries: &[Complex64], rows: usize, cols: usize) -> SvdFactorization {
    assert_eq!(entries.len(), rows * cols, "entry count must equal rows*cols");
    if rows > cols {
        // A = U Σ Vᴴ  <=>  Aᴴ = V Σ Uᴴ
        let mut adj = vec![ZERO; rows * cols];
        for l in 0..rows {
            for n in 0..cols {
                adj[n * rows + l] = entries[l * cols + n].conj();
            }
        }
        let f = svd(&adj, cols, rows);
        return SvdFactorization {
            u: f.v,
            singular_values: f.singular_values,
            v: f.u,
        };
    }
    let m = rows;
    // Aᴴ = Q R, so A = Rᴴ Qᴴ
    let adj_cols: Vec<Vec<Complex64>> = (0..m)
        .map(|l| entries[l * cols..(l + 1) * cols].iter().map(|c| c.conj()).collect())
        .collect();
    let (q, r) = householder_qr(adj_cols);
    let c_rows: Vec<Vec<Complex64>> = (0..m)
        .map(|i| (0..m).map(|k| r[k * m + i].conj()).collect())
        .collect();
    // J C = W_scaled  =>  C = Jᴴ Σ W
    let (j, w) = jacobi_rows(c_rows);
    let sigma: Vec<f64> = w.iter().map(|row| norm_sqr(row).sqrt()).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let scale = sigma.iter().copied().fold(0.0, f64::max);
    let mut singular_values = Vec::with_capacity(m);
    let mut u = Vec::with_capacity(m);
    let mut w_hat = Vec::with_capacity(m);
    let mut valid = Vec::with_capacity(m);
    for &i in &order {
        let s = sigma[i];
        singular_values.push(s);
        u.push((0..m).map(|l| j[i][l].conj()).collect::<Vec<_>>());
        let ok = s > 0.0 && s > scale * 1e-300;
        valid.push(ok);
        w_hat.push(if ok {
            w[i].iter().map(|x| x / s).collect()
        } else {
            vec![ZERO; m]
        });
    }
    if valid.iter().any(|ok| !ok) {
        complete_orthonormal(&mut w_hat, &valid);
    }
    // V = Q Wᴴ
    let v = w_hat
        .iter()
        .map(|wr| {
            let mut col = vec![ZERO; cols];
            for (k, qk) in q.iter().enumerate() {
                let coef = wr[k].conj();
                if coef != ZERO {
                    for (o, x) in col.iter_mut().zip(qk) {
                        *o += x * coef;
                    }
                }
            }
            col
        })
        .collect();
    SvdFactorization {
        u,
        singular_values,
        v,
    }
}

/// SVD of an FS-GCC matrix.
pub fn svd_fsgcc(fs: &FsGccMatrix) -> SvdFactorization {
    svd(fs.entries(), fs.rows(), fs.cols())
}

/// `|σ₁ u₁ v₁ᴴ|`, optionally with per-row weights.
fn rank_one_magnitude(f: &SvdFactorization, weights: Option<&[f64]>) -> RealMatrix {
    let rows = f.u[0].len();
    let cols = f.v[0].len();
    let s = f.singular_values[0];
    let v_abs: Vec<f64> = f.v[0].iter().map(|x| x.norm()).collect();
    let mut out = RealMatrix::zeros(rows, cols);
    for l in 0..rows {
        let w = weights.map_or(1.0, |w| w[l]);
        let a = s * f.u[0][l].norm() * w;
        for (o, v) in out.row_mut(l).iter_mut().zip(&v_abs) {
            *o = a * v;
        }
    }
    out
}

/// Row weights `|u₁[l]| / max |u₁|`.
pub fn wsvd_weights(f: &SvdFactorization) -> Vec<f64> {
    let mags: Vec<f64> = f.u[0].iter().map(|x| x.norm()).collect();
    let max = mags.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return vec![1.0; mags.len()];
    }
    mags.iter().map(|m| m / max).collect()
}

/// Rank-one magnitude reconstruction from an existing factorisation.
pub fn svd_denoise_from(f: &SvdFactorization) -> RealMatrix {
    rank_one_magnitude(f, None)
}

/// Band-weighted rank-one magnitude reconstruction from a factorisation.
pub fn wsvd_denoise_from(f: &SvdFactorization) -> RealMatrix {
    let w = wsvd_weights(f);
    rank_one_magnitude(f, Some(&w))
}

/// Magnitude of the best rank-one approximation of the FS-GCC.
pub fn svd_fsgcc_denoise(fs: &FsGccMatrix) -> RealMatrix {
    svd_denoise_from(&svd_fsgcc(fs))
}

/// Rank-one magnitude with rows weighted by `|u₁[l]| / max |u₁|`.
pub fn wsvd_fsgcc_denoise(fs: &FsGccMatrix) -> RealMatrix {
    wsvd_denoise_from(&svd_fsgcc(fs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fsgcc::FsGccConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..rows * cols)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    fn frob(a: &[Complex64]) -> f64 {
        norm_sqr(a).sqrt()
    }

    #[test]
    fn rank_one_outer_product() {
        let u = random_matrix(6, 1, 1);
        let v = random_matrix(40, 1, 2);
        let a: Vec<Complex64> = (0..6)
            .flat_map(|l| v.iter().map(|vn| u[l] * vn.conj()).collect::<Vec<_>>())
            .collect();
        let f = svd(&a, 6, 40);
        let expected = frob(&u) * frob(&v);
        assert!((f.singular_values[0] - expected).abs() < 1e-12 * expected);
        assert!(f.singular_values[1..].iter().all(|s| *s < 1e-9 * expected));
        for i in 0..6 {
            for k in 0..6 {
                let d = dot(&f.v[i], &f.v[k]);
                let e = if i == k { 1.0 } else { 0.0 };
                assert!((d - e).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn diagonal_matrix_sorted_magnitudes() {
        let mut a = vec![ZERO; 3 * 5];
        a[0] = Complex64::new(0.5, 0.0);
        a[5 + 1] = Complex64::new(0.0, -3.0);
        a[10 + 2] = Complex64::new(-2.0, 0.0);
        let f = svd(&a, 3, 5);
        let expected = [3.0, 2.0, 0.5];
        for (s, e) in f.singular_values.iter().zip(expected) {
            assert!((s - e).abs() < 1e-12);
        }
    }

    #[test]
    fn tall_input_is_handled() {
        let a = random_matrix(9, 4, 3);
        let f = svd(&a, 9, 4);
        let rec = f.reconstruct(4);
        let err: Vec<Complex64> = rec.iter().zip(&a).map(|(x, y)| x - y).collect();
        assert!(frob(&err) < 1e-10 * frob(&a));
        assert_eq!(f.u[0].len(), 9);
        assert_eq!(f.v[0].len(), 4);
    }

    #[test]
    fn identical_rows_give_unit_weights() {
        let row = random_matrix(1, 64, 4);
        let a: Vec<Complex64> = (0..5).flat_map(|_| row.clone()).collect();
        let cfg = FsGccConfig {
            dft_length: 64,
            window_support: 8,
            hop: 4,
            band_count: 5,
            window_shape: Default::default(),
        };
        let fs = FsGccMatrix::from_rows(a, cfg).unwrap();
        let f = svd_fsgcc(&fs);
        assert!(wsvd_weights(&f).iter().all(|w| (w - 1.0).abs() < 1e-12));
        let s = svd_fsgcc_denoise(&fs);
        let w = wsvd_fsgcc_denoise(&fs);
        for (x, y) in s.data.iter().zip(&w.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_equivariance() {
        let cfg = FsGccConfig {
            dft_length: 128,
            window_support: 16,
            hop: 8,
            band_count: 6,
            window_shape: Default::default(),
        };
        let fs = FsGccMatrix::from_rows(random_matrix(6, 128, 9), cfg).unwrap();
        let a = svd_fsgcc_denoise(&fs);
        let b = svd_fsgcc_denoise(&fs.scaled(3.7));
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((3.7 * x - y).abs() <= 1e-9 * y.abs().max(1e-300));
        }
    }
}
