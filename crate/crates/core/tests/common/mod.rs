//! Slow, direct reference implementations used as test oracles.
#![allow(dead_code)]

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller keeps the oracle free of library sampling code
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

pub fn random_complex(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
    (0..n).map(|_| Complex64::new(gaussian(rng), gaussian(rng))).collect()
}

fn twiddle(k: usize, n: usize, len: usize, sign: f64) -> Complex64 {
    // reduce k·n first so the angle stays accurate for large products
    let phase = 2.0 * PI * ((k * n) % len) as f64 / len as f64;
    Complex64::from_polar(1.0, sign * phase)
}

/// `X[k] = Σ x[n] e^{-j2πkn/N}`; the inverse carries `1/N`.
pub fn naive_dft(x: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = x.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    (0..n)
        .map(|k| {
            let s: Complex64 = x.iter().enumerate().map(|(i, v)| v * twiddle(k, i, n, sign)).sum();
            if inverse {
                s / n as f64
            } else {
                s
            }
        })
        .collect()
}

pub fn max_abs_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

/// PHAT-weighted cross spectrum straight from the definition.
pub fn naive_phat(x1: &[f64], x2: &[f64]) -> Vec<Complex64> {
    let to_c = |x: &[f64]| x.iter().map(|v| Complex64::new(*v, 0.0)).collect::<Vec<_>>();
    let a = naive_dft(&to_c(x1), false);
    let b = naive_dft(&to_c(x2), false);
    a.iter()
        .zip(&b)
        .map(|(p, q)| {
            let c = p * q.conj();
            c / (c.norm() + 1e-12)
        })
        .collect()
}

/// FS-GCC row `l` by direct summation, lag `n - N/2` at column `n`.
///
/// `phi` is the length-`N` spectral window; bins whose absolute frequency
/// `lM + k` (with `k` signed) exceeds Nyquist are left out.
pub fn direct_fsgcc_row(psi: &[Complex64], phi: &[f64], hop: usize, l: usize) -> Vec<Complex64> {
    let n = psi.len();
    let shift = l * hop;
    (0..n)
        .map(|col| {
            let lag = (col + n - n / 2) % n;
            let mut s = Complex64::new(0.0, 0.0);
            for k in 0..n {
                if phi[k] == 0.0 {
                    continue;
                }
                let signed = if k <= n / 2 { k as i64 } else { k as i64 - n as i64 };
                if shift as i64 + signed > (n / 2) as i64 {
                    continue;
                }
                s += psi[(k + shift) % n] * phi[k] * twiddle(k, lag, n, 1.0);
            }
            s / n as f64
        })
        .collect()
}

/// "Same"-padded strided cross-correlation by explicit loops.
///
/// `x` is `(batch, cin, h, w)`, `weight` is `(cout, cin, kh, kw)`. Output
/// size is `ceil(h / s)`; the total pad is split with the extra element on
/// the high-index side.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    [batch, cin, h, w]: [usize; 4],
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
) -> (Vec<f64>, [usize; 4]) {
    let oh = h.div_ceil(sh);
    let ow = w.div_ceil(sw);
    let pad_top = ((oh - 1) * sh + kh).saturating_sub(h) / 2;
    let pad_left = ((ow - 1) * sw + kw).saturating_sub(w) / 2;
    let mut y = vec![0.0; batch * cout * oh * ow];
    for b in 0..batch {
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..cin {
                        for a in 0..kh {
                            for e in 0..kw {
                                let r = (i * sh + a) as i64 - pad_top as i64;
                                let q = (j * sw + e) as i64 - pad_left as i64;
                                if r < 0 || q < 0 || r >= h as i64 || q >= w as i64 {
                                    continue;
                                }
                                acc += weight[((o * cin + c) * kh + a) * kw + e]
                                    * x[((b * cin + c) * h + r as usize) * w + q as usize];
                            }
                        }
                    }
                    y[((b * cout + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (y, [batch, cout, oh, ow])
}

/// White noise pair where channel 1 lags channel 2 by `delay` samples
/// (negative: leads), with independent noise at `snr_db` on each channel.
pub fn delayed_noise_pair(len: usize, delay: i64, snr_db: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let pad = delay.unsigned_abs() as usize;
    let s: Vec<f64> = (0..len + 2 * pad).map(|_| gaussian(&mut r)).collect();
    let noise_std = 10f64.powf(-snr_db / 20.0);
    let x1 = (0..len)
        .map(|i| s[(pad as i64 + i as i64 - delay) as usize] + noise_std * gaussian(&mut r))
        .collect();
    let x2 = (0..len).map(|i| s[pad + i] + noise_std * gaussian(&mut r)).collect();
    (x1, x2)
}

pub fn frobenius(a: &[Complex64]) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

pub mod checks;
