//! Elliptical copula mediator regression: marginals, latent cluster correlation and fitting.

pub mod fit;
pub mod icc;
pub mod latent;
pub mod marginal;
pub mod model;

pub use fit::{default_starts, fit_ecmr, fit_ecmr_from, fit_icc, EcmrFit, EcmrSpec, IccFit};
pub use icc::{IccFactor, IccMatrices};
pub use latent::{Coord, LatentConfig, LatentEvaluator};
pub use marginal::{fit_marginals, EmpiricalCdf, MarginalModel, MarginalSpec, PitBounds, ResidualKind, ResidualLaw};
pub use model::{ClusterLocations, EcmrModel, DEFAULT_F_MIN};

pub(crate) mod rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(serde::de::Error::custom("ragged matrix"));
        }
        Ok(DMatrix::from_fn(n, c, |i, j| rows[i][j]))
    }
}
