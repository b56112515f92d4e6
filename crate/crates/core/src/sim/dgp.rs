use rand::{Rng, RngExt};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ClusterRecord, Dataset, MediatorKind, MediatorMeta, Schema};
use crate::ecmr::{EcmrModel, DEFAULT_F_MIN, IccMatrices, LatentConfig, MarginalModel, ResidualLaw};
use crate::elliptical::Generator;
use crate::error::Result;
use crate::nuisance::{FeatureMap, FittedLearner, OutcomeModel};
use crate::rng::stream_rng;

/// Parameters of the two-mediator cluster trial design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpParams {
    pub n_min: usize,
    pub n_max: usize,
    pub pi: f64,
    pub q0_offdiag: f64,
    pub q1: f64,
    pub generator: Generator,
    pub m1_sd: f64,
    pub x_icc: f64,
    pub y_icc: f64,
}

impl Default for DgpParams {
    fn default() -> Self {
        DgpParams {
            n_min: 10,
            n_max: 30,
            pi: 0.5,
            q0_offdiag: 0.1,
            q1: 0.05,
            generator: Generator::Normal,
            m1_sd: 2.5,
            x_icc: 0.05,
            y_icc: 0.1,
        }
    }
}

/// Coefficients on (M¹, M², M¹M²) in the outcome mean.
pub const OUTCOME_MEDIATOR_COEFS: [f64; 3] = [0.6, 0.9, -0.8];
/// Weights of (M¹, M², M¹M²) inside the neighbour summary M*.
pub const SPILLOVER_WEIGHTS: [f64; 3] = [1.0, 2.0, 0.8];
pub const SPILLOVER_COEF: f64 = -0.7;

pub fn schema() -> Schema {
    Schema {
        cluster: "cluster".into(),
        treatment: "A".into(),
        outcome: "Y".into(),
        mediators: vec![
            MediatorMeta { name: "M1".into(), kind: MediatorKind::Continuous },
            MediatorMeta { name: "M2".into(), kind: MediatorKind::Binary },
        ],
        cluster_covariates: vec!["V".into()],
        individual_covariates: vec!["X".into()],
    }
}

impl DgpParams {
    pub fn icc(&self) -> IccMatrices {
        IccMatrices::exchangeable(2, self.q0_offdiag, self.q1).expect("valid design correlation")
    }

    /// True mediator model; features are (1, A, N, A·N, V, X).
    pub fn true_ecmr(&self) -> EcmrModel {
        let nm = self.n_max as f64;
        let design = FeatureMap::default().covariates_only();
        let m1 = MarginalModel {
            k: 0,
            name: "M1".into(),
            kind: MediatorKind::Continuous,
            design,
            learner: FittedLearner::Linear {
                beta: vec![-1.0, 0.2, 0.5 / nm, 0.5 / nm, 0.5, 0.5],
                se: vec![0.0; 6],
                sigma: self.m1_sd,
            },
            residual: Some(ResidualLaw::Normal { sd: self.m1_sd }),
            clip: 1e-6,
        };
        let m2 = MarginalModel {
            k: 1,
            name: "M2".into(),
            kind: MediatorKind::Binary,
            design,
            learner: FittedLearner::Logistic { beta: vec![0.0, 0.1, 0.2 / nm, 0.2 / nm, 0.3, -0.3], se: vec![0.0; 6] },
            residual: None,
            clip: 1e-6,
        };
        EcmrModel::new(vec![m1, m2], self.icc(), self.generator, LatentConfig::default(), DEFAULT_F_MIN)
    }

    /// True outcome mean; features follow [`FeatureMap::default`].
    pub fn true_outcome(&self) -> OutcomeModel {
        let nm = self.n_max as f64;
        let [c1, c2, c12] = OUTCOME_MEDIATOR_COEFS;
        let s = SPILLOVER_COEF;
        let [w1, w2, w12] = SPILLOVER_WEIGHTS;
        let beta = vec![0.0, 0.2, 0.5 / nm, 0.5 / nm, 0.5, 0.5, c1, c2, c12, s * w1, s * w2, s * w12];
        let map = FeatureMap::default();
        let names = map.names(&["M1".into(), "M2".into()], &["V".into()], &["X".into()]);
        OutcomeModel { map, learner: FittedLearner::Linear { se: vec![0.0; beta.len()], beta, sigma: 1.0 }, names, k: 2 }
    }
}

/// Simulator of the two-mediator trial built on the true nuisance models.
pub struct TrialGenerator {
    params: DgpParams,
    ecmr: EcmrModel,
    outcome: OutcomeModel,
}

impl TrialGenerator {
    pub fn new(params: DgpParams) -> Self {
        TrialGenerator { ecmr: params.true_ecmr(), outcome: params.true_outcome(), params }
    }

    pub fn params(&self) -> &DgpParams {
        &self.params
    }

    pub fn ecmr(&self) -> &EcmrModel {
        &self.ecmr
    }

    pub fn outcome(&self) -> &OutcomeModel {
        &self.outcome
    }

    /// Covariates and treatment of one cluster (mediators and outcome left empty).
    pub fn covariates<R: Rng + ?Sized>(&self, id: String, rng: &mut R) -> ClusterRecord {
        let p = &self.params;
        let n = rng.random_range(p.n_min..=p.n_max);
        let z: f64 = StandardNormal.sample(rng);
        let v = 2.0 * n as f64 / p.n_max as f64 + z;
        let u: f64 = StandardNormal.sample(rng);
        let x: Vec<f64> = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                2.0 * v + p.x_icc.sqrt() * u + (1.0 - p.x_icc).sqrt() * e
            })
            .collect();
        let a = u8::from(rng.random::<f64>() < p.pi);
        ClusterRecord { id, a, n, v: vec![v], x, d_x: 1, m: vec![0.0; 2 * n], k: 2, y: vec![0.0; n] }
    }

    /// Draws mediators under arm `a_med`, then the outcome at the recorded arm.
    pub fn fill<R: Rng + ?Sized>(&self, rec: &mut ClusterRecord, a_med: u8, rng: &mut R) {
        let n = rec.n;
        let locs = self.ecmr.locations(rec);
        let mut eps = vec![0.0; 2 * n];
        let dense = if self.ecmr.factor().is_none() { Some(self.ecmr.dense_chol(n).expect("valid correlation")) } else { None };
        self.ecmr.sample_latent(n, dense.as_ref(), rng, &mut eps);
        self.ecmr.latent_to_mediators(&locs.loc[a_med as usize], n, &eps, &mut rec.m);
        let rho = self.params.y_icc;
        let u: f64 = StandardNormal.sample(rng);
        for j in 0..n {
            let e: f64 = StandardNormal.sample(rng);
            rec.y[j] = self.outcome.predict_eta(rec.a, &rec.m, rec, j) + rho.sqrt() * u + (1.0 - rho).sqrt() * e;
        }
    }

    pub fn cluster<R: Rng + ?Sized>(&self, id: String, rng: &mut R) -> ClusterRecord {
        let mut rec = self.covariates(id, rng);
        let a = rec.a;
        self.fill(&mut rec, a, rng);
        rec
    }

    /// `i` clusters; cluster c uses substream c of `seed`.
    pub fn dataset(&self, i: usize, seed: u64) -> Result<Dataset> {
        let clusters = (0..i).map(|c| self.cluster(format!("c{c}"), &mut stream_rng(seed, c as u64))).collect();
        Dataset::new(clusters, schema(), self.params.pi)
    }
}
