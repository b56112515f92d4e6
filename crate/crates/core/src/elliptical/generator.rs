use std::f64::consts::{PI, SQRT_2};
use std::fmt;

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Exp1};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma, StudentsT};
use statrs::function::gamma::ln_gamma;

use super::special::{ln_bessel_k, norm_cdf, norm_pdf, norm_quantile, norm_sf, LN_SQRT_2PI};
use crate::error::{Error, Result};

/// Radial generator of a standard elliptical family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    Normal,
    StudentT { nu: f64 },
    Cauchy,
    Laplace,
}

/// Law of the scale variable W in ε = √W · Z, Z Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mixing {
    Degenerate,
    /// W = ν / χ²_ν.
    InverseChiSquare(f64),
    /// W ~ Exp(1).
    Exponential,
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Generator::Normal => write!(f, "normal"),
            Generator::StudentT { nu } => write!(f, "t({nu})"),
            Generator::Cauchy => write!(f, "cauchy"),
            Generator::Laplace => write!(f, "laplace"),
        }
    }
}

impl Generator {
    /// Parses `normal`, `t(ν)`, `cauchy`, `laplace`.
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let g = match t.as_str() {
            "normal" | "gaussian" => Generator::Normal,
            "cauchy" => Generator::Cauchy,
            "laplace" => Generator::Laplace,
            _ => {
                let inner = t
                    .strip_prefix("t(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| Error::Config(format!("unknown generator `{s}`")))?;
                let nu: f64 = inner.trim().parse().map_err(|_| Error::Config(format!("bad degrees of freedom in `{s}`")))?;
                Generator::student_t(nu)?
            }
        };
        Ok(g)
    }

    pub fn student_t(nu: f64) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::Config(format!("degrees of freedom must be positive, got {nu}")));
        }
        Ok(Generator::StudentT { nu })
    }

    /// Cauchy is folded into StudentT(1).
    fn nu(&self) -> Option<f64> {
        match *self {
            Generator::StudentT { nu } => Some(nu),
            Generator::Cauchy => Some(1.0),
            _ => None,
        }
    }

    pub fn mixing(&self) -> Mixing {
        match self {
            Generator::Normal => Mixing::Degenerate,
            Generator::Laplace => Mixing::Exponential,
            _ => Mixing::InverseChiSquare(self.nu().unwrap()),
        }
    }

    /// log g(u) in dimension d.
    pub fn log_g(&self, u: f64, d: usize) -> f64 {
        let df = d as f64;
        match *self {
            Generator::Normal => -df * LN_SQRT_2PI - 0.5 * u,
            Generator::StudentT { .. } | Generator::Cauchy => {
                let nu = self.nu().unwrap();
                ln_gamma((df + nu) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * df * (nu * PI).ln()
                    - 0.5 * (nu + df) * (u / nu).ln_1p()
            }
            Generator::Laplace => {
                if d == 1 {
                    return -0.5 * 2f64.ln() - (2.0 * u).sqrt();
                }
                let u = u.max(1e-300);
                let nu = 1.0 - df / 2.0;
                2f64.ln() - df * LN_SQRT_2PI + 0.5 * nu * (u / 2.0).ln() + ln_bessel_k(nu, (2.0 * u).sqrt())
            }
        }
    }

    pub fn log_pdf_1d(&self, x: f64) -> f64 {
        self.log_g(x * x, 1)
    }

    pub fn pdf_1d(&self, x: f64) -> f64 {
        match self {
            Generator::Normal => norm_pdf(x),
            _ => self.log_pdf_1d(x).exp(),
        }
    }

    pub fn cdf_1d(&self, x: f64) -> f64 {
        match *self {
            Generator::Normal => norm_cdf(x),
            Generator::Laplace => {
                if x < 0.0 {
                    0.5 * (SQRT_2 * x).exp()
                } else {
                    1.0 - 0.5 * (-SQRT_2 * x).exp()
                }
            }
            _ => {
                let nu = self.nu().unwrap();
                if x.is_infinite() {
                    return if x > 0.0 { 1.0 } else { 0.0 };
                }
                if nu == 1.0 {
                    0.5 + x.atan() / PI
                } else if nu == 2.0 {
                    0.5 + x / (2.0 * (2.0 + x * x).sqrt())
                } else {
                    StudentsT::new(0.0, 1.0, nu).unwrap().cdf(x)
                }
            }
        }
    }

    /// Upper tail 1 − F(x), accurate for large x.
    pub fn sf_1d(&self, x: f64) -> f64 {
        match self {
            Generator::Normal => norm_sf(x),
            _ => self.cdf_1d(-x),
        }
    }

    pub fn quantile_1d(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("quantile requires p in (0,1), got {p}")));
        }
        Ok(match *self {
            Generator::Normal => norm_quantile(p),
            Generator::Cauchy => (PI * (p - 0.5)).tan(),
            Generator::Laplace => {
                if p < 0.5 {
                    (2.0 * p).ln() / SQRT_2
                } else {
                    -(2.0 * (1.0 - p)).ln() / SQRT_2
                }
            }
            Generator::StudentT { .. } => self.quantile_bracketed(p),
        })
    }

    /// Monotone bracketing followed by safeguarded Newton steps on the CDF.
    fn quantile_bracketed(&self, p: f64) -> f64 {
        if p == 0.5 {
            return 0.0;
        }
        // Work in the lower tail for accuracy, reflect at the end.
        let (q, sign) = if p < 0.5 { (p, -1.0) } else { (1.0 - p, 1.0) };
        let f = |x: f64| self.cdf_1d(-x) - q;
        let mut lo = 0.0;
        let mut hi = norm_quantile(1.0 - q).max(1.0);
        while f(hi) > 0.0 {
            lo = hi;
            hi *= 2.0;
        }
        let mut x = 0.5 * (lo + hi);
        for _ in 0..200 {
            let fx = f(x);
            if fx == 0.0 {
                break;
            }
            if fx > 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let dens = self.pdf_1d(x);
            let mut nx = x + fx / dens;
            if !(nx > lo && nx < hi) {
                nx = 0.5 * (lo + hi);
            }
            if (nx - x).abs() <= 1e-15 * x.abs().max(1.0) {
                x = nx;
                break;
            }
            x = nx;
        }
        sign * x
    }

    /// One draw of the mixing variable W.
    pub fn sample_mixing<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.mixing() {
            Mixing::Degenerate => 1.0,
            Mixing::Exponential => {
                let e: f64 = Exp1.sample(rng);
                e
            }
            Mixing::InverseChiSquare(nu) => nu / ChiSquared::new(nu).unwrap().sample(rng),
        }
    }

    /// W as a function of a uniform coordinate (inverse-CDF mapping).
    pub fn mixing_from_uniform(&self, u: f64) -> f64 {
        match self.mixing() {
            Mixing::Degenerate => 1.0,
            Mixing::Exponential => -(-u).ln_1p(),
            Mixing::InverseChiSquare(nu) => {
                let g = Gamma::new(nu / 2.0, 0.5).unwrap();
                nu / g.inverse_cdf(1.0 - u)
            }
        }
    }
}

/// Quantile of Gamma(shape, 1) by safeguarded Newton on the regularized incomplete gamma.
pub fn gamma_quantile(shape: f64, p: f64) -> f64 {
    use statrs::function::gamma::gamma_lr;
    // Wilson–Hilferty start.
    let z = norm_quantile(p);
    let c = 1.0 / (9.0 * shape);
    let mut x = (shape * (1.0 - c + z * c.sqrt()).powi(3)).max(1e-8);
    let mut lo = 0.0;
    let mut hi = f64::INFINITY;
    let lg = ln_gamma(shape);
    for _ in 0..100 {
        let fx = gamma_lr(shape, x) - p;
        if fx > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let dens = ((shape - 1.0) * x.ln() - x - lg).exp();
        let mut nx = x - fx / dens;
        if !(nx > lo && nx < hi) || !nx.is_finite() {
            nx = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * x.max(lo) + 1.0 };
        }
        if (nx - x).abs() <= 1e-14 * x.max(1e-300) {
            return nx;
        }
        x = nx;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all() -> Vec<Generator> {
        vec![Generator::Normal, Generator::StudentT { nu: 5.0 }, Generator::StudentT { nu: 2.0 }, Generator::Cauchy, Generator::Laplace]
    }

    #[test]
    fn parse_menu() {
        assert_eq!(Generator::parse("t(2)").unwrap(), Generator::StudentT { nu: 2.0 });
        assert_eq!(Generator::parse("Normal").unwrap(), Generator::Normal);
        assert!(Generator::parse("t(-1)").is_err());
        assert!(Generator::parse("logistic").is_err());
        for g in all() {
            assert_eq!(Generator::parse(&g.to_string()).unwrap(), g);
        }
    }

    #[test]
    fn cdf_examples() {
        for g in all() {
            assert_eq!(g.cdf_1d(0.0), 0.5, "{g}");
        }
        assert!((Generator::StudentT { nu: 1.0 }.quantile_1d(0.75).unwrap() - 1.0).abs() < 1e-12);
        assert!((Generator::Cauchy.quantile_1d(0.75).unwrap() - 1.0).abs() < 1e-12);
        assert!((Generator::Laplace.cdf_1d(60.0) - 1.0).abs() < 1e-15);
        assert!(Generator::Normal.quantile_1d(0.0).is_err());
        assert!(Generator::Normal.quantile_1d(1.0).is_err());
    }

    #[test]
    fn quantile_round_trip() {
        let gens = [all(), vec![Generator::StudentT { nu: 0.7 }, Generator::StudentT { nu: 30.0 }]].concat();
        for g in gens {
            for i in 0..=200 {
                let p = 1e-4 + (1.0 - 2e-4) * i as f64 / 200.0;
                let x = g.quantile_1d(p).unwrap();
                assert!((g.cdf_1d(x) - p).abs() < 1e-10, "{g} p={p}");
                let back = g.quantile_1d(g.cdf_1d(x)).unwrap();
                assert!((back - x).abs() < 1e-8 * x.abs().max(1.0), "{g} x={x}");
            }
        }
    }

    #[test]
    fn generators_integrate_to_one_in_1d_and_2d() {
        for g in all() {
            // 1-d: substitution x = tan(t) handles heavy tails.
            let n = 20000;
            let mut acc = 0.0;
            for i in 0..n {
                let t = -PI / 2.0 + PI * (i as f64 + 0.5) / n as f64;
                let x = t.tan();
                acc += g.log_g(x * x, 1).exp() * (1.0 + x * x);
            }
            let one = acc * PI / n as f64;
            assert!((one - 1.0).abs() < 2e-3, "{g} 1d {one}");
            // 2-d radial: ∫ 2π r g(r²) dr with r = tan(t).
            let mut acc = 0.0;
            for i in 0..n {
                let t = PI / 2.0 * (i as f64 + 0.5) / n as f64;
                let r = t.tan();
                acc += 2.0 * PI * r * g.log_g(r * r, 2).exp() * (1.0 + r * r);
            }
            let two = acc * PI / 2.0 / n as f64;
            assert!((two - 1.0).abs() < 2e-3, "{g} 2d {two}");
        }
    }

    #[test]
    fn laplace_is_unit_variance_scale_mixture() {
        // ∫ e^{−w} N(x; 0, w) dw by quadrature versus the closed kernel, in d = 1 and d = 3.
        for &d in &[1usize, 3] {
            for &u in &[0.01, 0.5, 2.0, 9.0] {
                let n = 200000;
                let mut acc = 0.0;
                for i in 0..n {
                    let t = -12.0 + 16.0 * (i as f64 + 0.5) / n as f64;
                    let w = t.exp();
                    acc += (-w).exp() * (2.0 * PI * w).powf(-(d as f64) / 2.0) * (-u / (2.0 * w)).exp() * w;
                }
                let want = (acc * 16.0 / n as f64).ln();
                assert!((Generator::Laplace.log_g(u, d) - want).abs() < 1e-6, "d={d} u={u}");
            }
        }
    }

    #[test]
    fn gamma_quantile_inverts() {
        use statrs::function::gamma::gamma_lr;
        for &a in &[0.5, 1.0, 2.0, 11.0, 40.0] {
            for &p in &[1e-6, 0.01, 0.3, 0.5, 0.9, 0.999] {
                let x = gamma_quantile(a, p);
                assert!((gamma_lr(a, x) - p).abs() < 1e-10, "a={a} p={p}");
            }
        }
    }
}
