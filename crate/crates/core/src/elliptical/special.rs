//! Scalar special functions used throughout the numerical core.

use libm::erfc;
use statrs::function::erf::erfc_inv;
use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

#[inline]
pub fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// Φ⁻¹(p) for p in (0,1).
#[inline]
pub fn norm_quantile(p: f64) -> f64 {
    let x = -SQRT_2 * erfc_inv(2.0 * p);
    if !x.is_finite() {
        return x;
    }
    // One Newton step on the tail that keeps relative precision.
    let err = if x < 0.0 { norm_cdf(x) - p } else { (1.0 - p) - norm_sf(x) };
    x - err / norm_pdf(x)
}

/// log Φ(x), accurate in the far lower tail.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x > -30.0 {
        norm_cdf(x).ln()
    } else {
        // Asymptotic series for the Mills ratio.
        let z = x * x;
        let s = 1.0 - 1.0 / z + 3.0 / (z * z) - 15.0 / (z * z * z);
        -0.5 * z - LN_SQRT_2PI - (-x).ln() + s.ln()
    }
}

/// log P(a < Z < b) for standard normal Z; −∞ for an empty interval.
pub fn log_norm_interval(a: f64, b: f64) -> f64 {
    if b <= a {
        return f64::NEG_INFINITY;
    }
    if a == f64::NEG_INFINITY {
        return log_norm_cdf(b);
    }
    if b == f64::INFINITY {
        return log_norm_cdf(-a);
    }
    if a > 0.0 {
        // Both in the upper tail: use survival functions.
        return log_diff(log_norm_cdf(-a), log_norm_cdf(-b));
    }
    if b < 0.0 {
        return log_diff(log_norm_cdf(b), log_norm_cdf(a));
    }
    (norm_cdf(b) - norm_cdf(a)).max(f64::MIN_POSITIVE).ln()
}

/// log(e^x − e^y) for x ≥ y.
#[inline]
pub fn log_diff(x: f64, y: f64) -> f64 {
    if y == f64::NEG_INFINITY {
        return x;
    }
    let d = y - x;
    if d >= 0.0 {
        return f64::NEG_INFINITY;
    }
    x + (-d.exp()).ln_1p()
}

#[inline]
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GL_W: [&[f64]; 3] = [
    &[0.171_324_492_379_170_5, 0.360_761_573_048_138_4, 0.467_913_934_572_690_4],
    &[
        0.047_175_336_386_511_77,
        0.106_939_325_995_318_3,
        0.160_078_328_543_346_4,
        0.203_167_426_723_065_9,
        0.233_492_536_538_354_7,
        0.249_147_045_813_402_9,
    ],
    &[
        0.017_614_007_139_152_12,
        0.040_601_429_800_386_94,
        0.062_672_048_334_109_06,
        0.083_276_741_576_704_75,
        0.101_930_119_817_240_4,
        0.118_194_531_961_518_4,
        0.131_688_638_449_176_6,
        0.142_096_109_318_382_1,
        0.149_172_986_472_603_7,
        0.152_753_387_130_725_9,
    ],
];
const GL_X: [&[f64]; 3] = [
    &[-0.932_469_514_203_152_2, -0.661_209_386_466_264_7, -0.238_619_186_083_197],
    &[
        -0.981_560_634_246_719_1,
        -0.904_117_256_370_475,
        -0.769_902_674_194_305,
        -0.587_317_954_286_617_1,
        -0.367_831_498_998_180_2,
        -0.125_233_408_511_469_2,
    ],
    &[
        -0.993_128_599_185_094_9,
        -0.963_971_927_277_913_8,
        -0.912_234_428_251_325_9,
        -0.839_116_971_822_218_8,
        -0.746_331_906_460_150_8,
        -0.636_053_680_726_515,
        -0.510_867_001_950_827_1,
        -0.373_706_088_715_419_6,
        -0.227_785_851_141_645_1,
        -0.076_526_521_133_497_33,
    ],
];

/// P(X > h, Y > k) for a standard bivariate normal with correlation r.
pub fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    let twopi = 2.0 * PI;
    let ng = if r.abs() < 0.3 {
        0
    } else if r.abs() < 0.75 {
        1
    } else {
        2
    };
    let (w, x) = (GL_W[ng], GL_X[ng]);
    let mut k = k;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hs = (h * h + k * k) / 2.0;
        let asr = r.asin();
        for i in 0..w.len() {
            for s in [1.0, -1.0] {
                let sn = (asr * (s * x[i] + 1.0) / 2.0).sin();
                bvn += w[i] * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            }
        }
        return bvn * asr / (2.0 * twopi) + norm_cdf(-h) * norm_cdf(-k);
    }
    if r < 0.0 {
        k = -k;
        hk = -hk;
    }
    if r.abs() < 1.0 {
        let as_ = (1.0 - r) * (1.0 + r);
        let mut a = as_.sqrt();
        let bs = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        bvn = a
            * (-(bs / as_ + hk) / 2.0).exp()
            * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0);
        if hk > -160.0 {
            let b = bs.sqrt();
            bvn -= (-hk / 2.0).exp() * twopi.sqrt() * norm_cdf(-b / a) * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
        }
        a /= 2.0;
        for i in 0..w.len() {
            let xs = (a * (x[i] + 1.0)).powi(2);
            let rs = (1.0 - xs).sqrt();
            bvn += a
                * w[i]
                * ((-bs / (2.0 * xs) - hk / (1.0 + rs)).exp() / rs
                    - (-(bs / xs + hk) / 2.0).exp() * (1.0 + c * xs * (1.0 + d * xs)));
            let xs = as_ * (1.0 - x[i]).powi(2) / 4.0;
            let rs = (1.0 - xs).sqrt();
            bvn += a
                * w[i]
                * (-(bs / xs + hk) / 2.0).exp()
                * ((-hk * xs / (2.0 * (1.0 + rs).powi(2))).exp() / rs - (1.0 + c * xs * (1.0 + d * xs)));
        }
        bvn = -bvn / twopi;
    }
    if r > 0.0 {
        bvn += norm_cdf(-h.max(k));
    } else {
        bvn = -bvn;
        if k > h {
            if h < 0.0 {
                bvn += norm_cdf(k) - norm_cdf(h);
            } else {
                bvn += norm_cdf(-h) - norm_cdf(-k);
            }
        }
    }
    bvn.clamp(0.0, 1.0)
}

/// P(a1 < X < b1, a2 < Y < b2) for a standard bivariate normal with correlation r.
pub fn bvn_rect(a1: f64, b1: f64, a2: f64, b2: f64, r: f64) -> f64 {
    if b1 <= a1 || b2 <= a2 {
        return 0.0;
    }
    let up = |h: f64, k: f64| -> f64 {
        if h == f64::INFINITY || k == f64::INFINITY {
            0.0
        } else if h == f64::NEG_INFINITY {
            norm_sf(k)
        } else if k == f64::NEG_INFINITY {
            norm_sf(h)
        } else {
            bvn_upper(h, k, r)
        }
    };
    (up(a1, a2) - up(b1, a2) - up(a1, b2) + up(b1, b2)).max(0.0)
}

/// log K_ν(z) for z > 0 via the integral ∫₀^∞ exp(−z cosh t) cosh(νt) dt.
pub fn ln_bessel_k(nu: f64, z: f64) -> f64 {
    let nu = nu.abs();
    if (nu - 0.5).abs() < 1e-15 {
        return 0.5 * (PI / (2.0 * z)).ln() - z;
    }
    // Integrand after factoring out e^{-z}: exp(-z (cosh t - 1)) cosh(ν t).
    let f = |t: f64| -> f64 { -z * (t.cosh() - 1.0) + nu * t + (0.5 * (1.0 + (-2.0 * nu * t).exp())).ln() };
    let peak_t = if nu > 0.0 { (nu / z).asinh() } else { 0.0 };
    let peak = f(peak_t);
    let mut t_max = peak_t.max(1.0);
    while f(t_max) > peak - 60.0 {
        t_max *= 1.5;
    }
    let width = if nu > 0.0 { 1.0 / (z * peak_t.cosh()).sqrt() } else { 1.0 / z.sqrt() };
    let h = (width / 12.0).min(t_max / 400.0).max(t_max / 20000.0);
    let n = (t_max / h).ceil() as usize;
    let h = t_max / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let t = i as f64 * h;
        let wgt = if i == 0 || i == n { 0.5 } else { 1.0 };
        acc += wgt * (f(t) - peak).exp();
    }
    -z + peak + (acc * h).ln()
}
