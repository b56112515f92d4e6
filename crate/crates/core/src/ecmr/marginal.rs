use serde::{Deserialize, Serialize};

use crate::data::{ClusterRecord, Dataset, MediatorKind};
use crate::elliptical::special::{norm_cdf, norm_pdf, norm_quantile};
use crate::elliptical::Generator;
use crate::error::{Error, Result};
use crate::nuisance::features::{CovContext, CovariateTransform, FeatureMap};
use crate::nuisance::learners::{fit_learner, Design, FittedLearner, LearnerSpec};

/// Residual law of a continuous mediator around its conditional mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    Normal,
    #[default]
    Empirical,
}

/// How mediator marginals are fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarginalSpec {
    pub learner: LearnerSpec,
    pub residual: ResidualKind,
    /// Thin the empirical CDF to about this many knots (all order statistics when absent).
    pub max_knots: Option<usize>,
    pub design: FeatureMap,
    /// Boundary clipping of F̂ before the latent quantile transform.
    pub clip: f64,
}

impl Default for MarginalSpec {
    fn default() -> Self {
        MarginalSpec {
            learner: LearnerSpec::Linear,
            residual: ResidualKind::Empirical,
            max_knots: None,
            design: FeatureMap::default().covariates_only(),
            clip: 1e-6,
        }
    }
}

impl MarginalSpec {
    pub fn with_transform(mut self, t: CovariateTransform) -> Self {
        self.design.transform = t;
        self
    }
}

/// Piecewise-linear CDF through the order statistics with exponential tails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalCdf {
    pub knots: Vec<f64>,
    pub probs: Vec<f64>,
    pub lower_scale: f64,
    pub upper_scale: f64,
}

impl EmpiricalCdf {
    pub fn new(values: &[f64], max_knots: Option<usize>) -> Result<Self> {
        let n = values.len();
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let mut knots = Vec::new();
        let mut probs = Vec::new();
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && v[j + 1] == v[i] {
                j += 1;
            }
            knots.push(v[i]);
            probs.push(((i + j) as f64 / 2.0 + 1.0) / (n as f64 + 1.0));
            i = j + 1;
        }
        if knots.len() < 2 {
            return Err(Error::Data("degenerate mediator: residuals are constant".into()));
        }
        if let Some(mk) = max_knots {
            let mk = mk.max(2);
            if knots.len() > mk {
                let len = knots.len();
                let idx: Vec<usize> = (0..mk).map(|t| (t * (len - 1)) / (mk - 1)).collect();
                knots = idx.iter().map(|&t| knots[t]).collect();
                probs = idx.iter().map(|&t| probs[t]).collect();
            }
        }
        let len = knots.len();
        let m = (len / 20).clamp(1, len - 1);
        let spread = |a: f64, b: f64, pa: f64, pb: f64| {
            let s = (b - a) / (pb / pa).ln();
            if s.is_finite() && s > 0.0 { s } else { (knots[len - 1] - knots[0]) / len as f64 }
        };
        let lower_scale = spread(knots[0], knots[m], probs[0], probs[m]);
        let upper_scale = spread(knots[len - 1 - m], knots[len - 1], 1.0 - probs[len - 1], 1.0 - probs[len - 1 - m]);
        Ok(EmpiricalCdf { knots, probs, lower_scale, upper_scale })
    }

    fn seg(&self, x: f64) -> usize {
        self.knots.partition_point(|k| *k <= x).clamp(1, self.knots.len() - 1)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let (k, p) = (&self.knots, &self.probs);
        let last = k.len() - 1;
        if x < k[0] {
            return p[0] * ((x - k[0]) / self.lower_scale).exp();
        }
        if x > k[last] {
            return 1.0 - (1.0 - p[last]) * (-(x - k[last]) / self.upper_scale).exp();
        }
        let i = self.seg(x);
        p[i - 1] + (p[i] - p[i - 1]) * (x - k[i - 1]) / (k[i] - k[i - 1])
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let (k, p) = (&self.knots, &self.probs);
        let last = k.len() - 1;
        if x < k[0] {
            return p[0] / self.lower_scale * ((x - k[0]) / self.lower_scale).exp();
        }
        if x > k[last] {
            return (1.0 - p[last]) / self.upper_scale * (-(x - k[last]) / self.upper_scale).exp();
        }
        let i = self.seg(x);
        (p[i] - p[i - 1]) / (k[i] - k[i - 1])
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let (k, p) = (&self.knots, &self.probs);
        let last = k.len() - 1;
        if u <= p[0] {
            return k[0] + self.lower_scale * (u / p[0]).ln();
        }
        if u >= p[last] {
            return k[last] - self.upper_scale * ((1.0 - u) / (1.0 - p[last])).ln();
        }
        let i = p.partition_point(|q| *q <= u).clamp(1, last);
        k[i - 1] + (k[i] - k[i - 1]) * (u - p[i - 1]) / (p[i] - p[i - 1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResidualLaw {
    Normal { sd: f64 },
    Empirical(EmpiricalCdf),
}

impl ResidualLaw {
    pub fn cdf(&self, r: f64) -> f64 {
        match self {
            ResidualLaw::Normal { sd } => norm_cdf(r / sd),
            ResidualLaw::Empirical(e) => e.cdf(r),
        }
    }

    pub fn pdf(&self, r: f64) -> f64 {
        match self {
            ResidualLaw::Normal { sd } => norm_pdf(r / sd) / sd,
            ResidualLaw::Empirical(e) => e.pdf(r),
        }
    }

    pub fn quantile(&self, u: f64) -> f64 {
        match self {
            ResidualLaw::Normal { sd } => sd * norm_quantile(u),
            ResidualLaw::Empirical(e) => e.quantile(u),
        }
    }
}

/// Fitted marginal of mediator k given (A, C, N).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalModel {
    pub k: usize,
    pub name: String,
    pub kind: MediatorKind,
    pub design: FeatureMap,
    pub learner: FittedLearner,
    pub residual: Option<ResidualLaw>,
    pub clip: f64,
}

/// Latent interval for one observed mediator value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitBounds {
    pub lower: f64,
    pub upper: f64,
    pub clipped: bool,
}

impl MarginalModel {
    pub fn n_features(&self, ctx: &CovContext) -> usize {
        self.design.dim(0, ctx.v.len(), ctx.d_x)
    }

    /// Conditional mean (continuous) or success probability (binary, clipped).
    pub fn location(&self, ctx: &CovContext, a: f64, j: usize, buf: &mut Vec<f64>) -> f64 {
        buf.resize(self.n_features(ctx), 0.0);
        self.design.write(ctx, a, j, &[], &[], &[], buf);
        let v = self.learner.predict(buf);
        match self.kind {
            MediatorKind::Continuous => v,
            MediatorKind::Binary => v.clamp(self.clip, 1.0 - self.clip),
        }
    }

    /// F̂(m) at location `loc` for continuous mediators; F̂(m⁻) and F̂(m) are used for binary ones.
    pub fn cdf(&self, m: f64, loc: f64) -> f64 {
        match self.kind {
            MediatorKind::Continuous => self.residual.as_ref().expect("continuous marginal has a residual law").cdf(m - loc),
            MediatorKind::Binary => {
                if m < 0.0 {
                    0.0
                } else if m < 1.0 {
                    1.0 - loc
                } else {
                    1.0
                }
            }
        }
    }

    /// Marginal density (continuous) or probability mass (binary).
    pub fn log_mass(&self, m: f64, loc: f64) -> f64 {
        match self.kind {
            MediatorKind::Continuous => self.residual.as_ref().expect("residual law").pdf(m - loc).ln(),
            MediatorKind::Binary => if m >= 0.5 { loc.ln() } else { (1.0 - loc).ln() },
        }
    }

    pub fn quantile(&self, u: f64, loc: f64) -> f64 {
        match self.kind {
            MediatorKind::Continuous => loc + self.residual.as_ref().expect("residual law").quantile(u),
            MediatorKind::Binary => f64::from(u > 1.0 - loc),
        }
    }

    /// Latent interval [Q_g(F̂(m⁻)), Q_g(F̂(m))]; degenerate for continuous mediators.
    pub fn pit_bounds_at(&self, g: Generator, m: f64, loc: f64) -> Result<PitBounds> {
        let d = self.clip;
        match self.kind {
            MediatorKind::Continuous => {
                let u = self.cdf(m, loc);
                let clipped = !(d..=1.0 - d).contains(&u);
                let e = g.quantile_1d(u.clamp(d, 1.0 - d))?;
                Ok(PitBounds { lower: e, upper: e, clipped })
            }
            MediatorKind::Binary => {
                let thr = g.quantile_1d(1.0 - loc)?;
                Ok(if m >= 0.5 {
                    PitBounds { lower: thr, upper: f64::INFINITY, clipped: false }
                } else {
                    PitBounds { lower: f64::NEG_INFINITY, upper: thr, clipped: false }
                })
            }
        }
    }

    pub fn pit_bounds(&self, g: Generator, m: f64, a: u8, record: &ClusterRecord, j: usize) -> Result<PitBounds> {
        let ctx = CovContext::new(record, self.design.transform);
        let loc = self.location(&ctx, a as f64, j, &mut Vec::new());
        self.pit_bounds_at(g, m, loc)
    }
}

/// Design of mediator k pooled over individuals.
pub fn marginal_design(data: &Dataset, k: usize, map: &FeatureMap) -> Design {
    let s = &data.schema;
    let names = map.names(&[], &s.cluster_covariates, &s.individual_covariates);
    let p = names.len();
    let mut x = Vec::with_capacity(data.n_individuals() * p);
    let mut y = Vec::with_capacity(data.n_individuals());
    let mut group = Vec::new();
    let mut buf = vec![0.0; p];
    for (ci, c) in data.clusters.iter().enumerate() {
        let ctx = CovContext::new(c, map.transform);
        for j in 0..c.n {
            map.write(&ctx, c.a as f64, j, &[], &[], &[], &mut buf);
            x.extend_from_slice(&buf);
            y.push(c.mediator(k, j));
            group.push(ci);
        }
    }
    Design { x, p, y, group, names }
}

pub fn fit_marginals(data: &Dataset, spec: &MarginalSpec) -> Result<Vec<MarginalModel>> {
    let design_map = spec.design.covariates_only();
    (0..data.k())
        .map(|k| {
            let meta = &data.schema.mediators[k];
            let d = marginal_design(data, k, &design_map);
            let first = d.y[0];
            if d.y.iter().all(|&v| v == first) {
                return Err(Error::Data(format!("degenerate mediator `{}`: constant column", meta.name)));
            }
            let binary = meta.kind == MediatorKind::Binary;
            let learner = fit_learner(&spec.learner, &d, binary)?;
            let residual = if binary {
                None
            } else {
                let res: Vec<f64> = (0..d.n()).map(|i| d.y[i] - learner.predict(d.row(i))).collect();
                Some(match spec.residual {
                    ResidualKind::Normal => {
                        let df = (d.n().saturating_sub(d.p + 1)).max(1) as f64;
                        let sd = (res.iter().map(|r| r * r).sum::<f64>() / df).sqrt();
                        if sd <= 0.0 {
                            return Err(Error::Data(format!("degenerate mediator `{}`: zero residual variance", meta.name)));
                        }
                        ResidualLaw::Normal { sd }
                    }
                    ResidualKind::Empirical => ResidualLaw::Empirical(
                        EmpiricalCdf::new(&res, spec.max_knots)
                            .map_err(|_| Error::Data(format!("degenerate mediator `{}`: constant residuals", meta.name)))?,
                    ),
                })
            };
            Ok(MarginalModel { k, name: meta.name.clone(), kind: meta.kind, design: design_map, learner, residual, clip: spec.clip })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empirical_cdf_interpolates_and_inverts() {
        let v: Vec<f64> = (0..99).map(|i| (i as f64 * 0.754_877_666).fract() * 6.0 - 3.0).collect();
        let e = EmpiricalCdf::new(&v, None).unwrap();
        for &u in &[1e-4, 0.005, 0.2, 0.5, 0.77, 0.999] {
            assert!((e.cdf(e.quantile(u)) - u).abs() < 1e-12, "{u}");
        }
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        assert!((e.cdf(s[49]) - 0.5).abs() < 1e-12);
        // density integrates to one
        let (a, b, n) = (-40.0, 40.0, 400_000);
        let h = (b - a) / n as f64;
        let tot: f64 = (0..n).map(|i| e.pdf(a + (i as f64 + 0.5) * h) * h).sum();
        assert!((tot - 1.0).abs() < 1e-4, "{tot}");
    }

    #[test]
    fn ties_give_strictly_increasing_knots() {
        let e = EmpiricalCdf::new(&[1.0, 1.0, 2.0, 3.0, 3.0, 3.0], None).unwrap();
        assert_eq!(e.knots, vec![1.0, 2.0, 3.0]);
        assert!(e.probs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn thinning_keeps_extremes() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let e = EmpiricalCdf::new(&v, Some(32)).unwrap();
        assert_eq!(e.knots.len(), 32);
        assert_eq!(e.knots[0], 0.0);
        assert_eq!(*e.knots.last().unwrap(), 999.0);
    }

    fn binary_marginal(p: f64) -> MarginalModel {
        MarginalModel {
            k: 0,
            name: "m".into(),
            kind: MediatorKind::Binary,
            design: FeatureMap::default().covariates_only(),
            learner: FittedLearner::Linear { beta: vec![p], se: vec![0.0], sigma: 0.0 },
            residual: None,
            clip: 1e-6,
        }
    }

    #[test]
    fn pit_bounds_examples() {
        let g = Generator::Normal;
        let m = binary_marginal(0.3);
        let q = g.quantile_1d(0.7).unwrap();
        let b0 = m.pit_bounds_at(g, 0.0, 0.3).unwrap();
        assert_eq!((b0.lower, b0.upper), (f64::NEG_INFINITY, q));
        let b1 = m.pit_bounds_at(g, 1.0, 0.3).unwrap();
        assert_eq!((b1.lower, b1.upper), (q, f64::INFINITY));
        let c = MarginalModel {
            kind: MediatorKind::Continuous,
            residual: Some(ResidualLaw::Normal { sd: 2.0 }),
            ..binary_marginal(0.0)
        };
        let b = c.pit_bounds_at(g, 1.5, 1.5).unwrap();
        assert_eq!((b.lower, b.upper), (0.0, 0.0));
        let far = c.pit_bounds_at(g, 100.0, 0.0).unwrap();
        assert!(far.clipped && (far.upper - g.quantile_1d(1.0 - 1e-6).unwrap()).abs() < 1e-12);
    }
}
