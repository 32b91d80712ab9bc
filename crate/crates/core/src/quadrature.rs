//! Adaptive Gauss-Kronrod (7/15) quadrature.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728_0,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = fc * WGK[7];
    let mut g = fc * WG[3];
    for i in 0..7 {
        let x = h * XGK[i];
        let s = f(c - x) + f(c + x);
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Integrates `f` over `[a, b]` to the requested relative tolerance.
///
/// An absolute floor of `rel_tol * 1e-3 * (scale of the integrand)` keeps
/// integrals that vanish exactly from bisecting forever.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let (sign, lo, hi) = if a < b { (1.0, a, b) } else { (-1.0, b, a) };
    let mut stack = vec![(lo, hi, kronrod(&f, lo, hi))];
    let mut total = 0.0;
    let mut total_err = 0.0;
    let mut pieces: Vec<(f64, f64)> = Vec::new();
    let max_intervals = 20_000;
    let mut processed = 0;
    let (first, _) = kronrod(&|x: f64| f(x).abs(), lo, hi);
    let abs_floor = rel_tol * 1e-3 * first.abs() + f64::MIN_POSITIVE;
    let whole = stack[0].2 .0.abs().max(first.abs());
    while let Some((x0, x1, (val, err))) = stack.pop() {
        processed += 1;
        let local_tol = (rel_tol * whole).max(abs_floor) * ((x1 - x0) / (hi - lo)).max(1e-300);
        if err <= local_tol || x1 - x0 <= 1e-14 * (1.0 + x0.abs().max(x1.abs())) || processed > max_intervals {
            pieces.push((val, err));
            continue;
        }
        let mid = 0.5 * (x0 + x1);
        stack.push((mid, x1, kronrod(&f, mid, x1)));
        stack.push((x0, mid, kronrod(&f, x0, mid)));
    }
    // summation in a fixed order
    for (v, e) in pieces {
        total += v;
        total_err += e;
    }
    if !total.is_finite() {
        return Err(Error::Quadrature {
            achieved: f64::INFINITY,
            requested: rel_tol,
        });
    }
    let achieved = total_err / total.abs().max(abs_floor / rel_tol.max(1e-300));
    if processed > max_intervals && achieved > rel_tol {
        return Err(Error::Quadrature {
            achieved,
            requested: rel_tol,
        });
    }
    Ok(sign * total)
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` (Newton iteration on P_n).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { z } else { p1 };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pnm1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_polynomials_and_exponentials() {
        let v = integrate(|x| x * x, 0.0, 3.0, 1e-12).unwrap();
        assert!((v - 9.0).abs() < 1e-12);
        let e = integrate(f64::exp, 0.0, 1.0, 1e-12).unwrap();
        assert!((e - (1f64.exp() - 1.0)).abs() < 1e-13);
        let r = integrate(|x| x * x, 3.0, 0.0, 1e-12).unwrap();
        assert!((r + 9.0).abs() < 1e-12);
    }

    #[test]
    fn handles_long_tails() {
        let v = integrate(|x| 1.0 / (1.0 + x * x), 0.0, 1e6, 1e-11).unwrap();
        assert!((v - 1e6f64.atan()).abs() < 1e-9);
    }

    #[test]
    fn gauss_legendre_is_exact_to_degree() {
        let (x, w) = gauss_legendre(10);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(18)).sum();
        assert!((s - 2.0 / 19.0).abs() < 1e-14);
        let total: f64 = w.iter().sum();
        assert!((total - 2.0).abs() < 1e-14);
    }
}
