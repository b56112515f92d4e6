//! Cluster-structured trial data: records, schema-driven CSV ingest and export, cluster weights.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediatorKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediatorMeta {
    pub name: String,
    pub kind: MediatorKind,
}

/// One cluster. Mediators are stored row-major as `m[k * n + j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub id: String,
    pub a: u8,
    pub n: usize,
    pub v: Vec<f64>,
    /// Individual covariates, row-major `x[j * d_x + c]`.
    pub x: Vec<f64>,
    pub d_x: usize,
    pub m: Vec<f64>,
    pub k: usize,
    pub y: Vec<f64>,
}

impl ClusterRecord {
    pub fn mediator(&self, k: usize, j: usize) -> f64 {
        self.m[k * self.n + j]
    }

    pub fn mediator_row(&self, k: usize) -> &[f64] {
        &self.m[k * self.n..(k + 1) * self.n]
    }

    pub fn x_row(&self, j: usize) -> &[f64] {
        &self.x[j * self.d_x..(j + 1) * self.d_x]
    }

    /// Checks dimensional consistency and mediator support.
    pub fn validate(&self, meta: &[MediatorMeta]) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Data(format!("cluster `{}` is empty", self.id)));
        }
        if self.a > 1 {
            return Err(Error::Data(format!("cluster `{}`: treatment must be 0 or 1", self.id)));
        }
        if self.k != meta.len() || self.m.len() != self.k * self.n {
            return Err(Error::Data(format!("cluster `{}`: mediator dimension mismatch", self.id)));
        }
        if self.y.len() != self.n || self.x.len() != self.n * self.d_x {
            return Err(Error::Data(format!("cluster `{}`: dimension mismatch", self.id)));
        }
        let all = self.v.iter().chain(&self.x).chain(&self.m).chain(&self.y);
        if all.into_iter().any(|z| !z.is_finite()) {
            return Err(Error::Data(format!("cluster `{}`: non-finite entry", self.id)));
        }
        for (k, mm) in meta.iter().enumerate() {
            if mm.kind == MediatorKind::Binary && self.mediator_row(k).iter().any(|&z| z != 0.0 && z != 1.0) {
                return Err(Error::Data(format!(
                    "cluster `{}`: binary mediator `{}` takes a value outside {{0,1}}",
                    self.id, mm.name
                )));
            }
        }
        Ok(())
    }
}

/// Column mapping for long-format input (one row per individual).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub cluster: String,
    pub treatment: String,
    pub outcome: String,
    pub mediators: Vec<MediatorMeta>,
    #[serde(default)]
    pub cluster_covariates: Vec<String>,
    #[serde(default)]
    pub individual_covariates: Vec<String>,
}

impl Schema {
    pub fn columns(&self) -> Vec<&str> {
        let mut cols = vec![self.cluster.as_str(), self.treatment.as_str(), self.outcome.as_str()];
        cols.extend(self.mediators.iter().map(|m| m.name.as_str()));
        cols.extend(self.cluster_covariates.iter().map(String::as_str));
        cols.extend(self.individual_covariates.iter().map(String::as_str));
        cols
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub clusters: Vec<ClusterRecord>,
    pub schema: Schema,
    pub pi: f64,
}

impl Dataset {
    pub fn new(clusters: Vec<ClusterRecord>, schema: Schema, pi: f64) -> Result<Self> {
        let ds = Dataset { clusters, schema, pi };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(Error::Data(format!("randomization probability {} not in (0,1)", self.pi)));
        }
        if self.clusters.len() < 2 {
            return Err(Error::Data("at least two clusters are required".into()));
        }
        let d_v = self.schema.cluster_covariates.len();
        let d_x = self.schema.individual_covariates.len();
        for c in &self.clusters {
            if c.v.len() != d_v || c.d_x != d_x {
                return Err(Error::Data(format!("cluster `{}`: covariate dimension mismatch", c.id)));
            }
            c.validate(&self.schema.mediators)?;
        }
        let treated = self.clusters.iter().filter(|c| c.a == 1).count();
        if treated == 0 || treated == self.clusters.len() {
            return Err(Error::Data("both treatment arms must be present".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.schema.mediators.len()
    }

    pub fn mediator_kinds(&self) -> Vec<MediatorKind> {
        self.schema.mediators.iter().map(|m| m.kind).collect()
    }

    pub fn n_max(&self) -> usize {
        self.clusters.iter().map(|c| c.n).max().unwrap_or(1)
    }

    pub fn n_individuals(&self) -> usize {
        self.clusters.iter().map(|c| c.n).sum()
    }

    pub fn empirical_pi(&self) -> f64 {
        self.clusters.iter().filter(|c| c.a == 1).count() as f64 / self.clusters.len() as f64
    }

    /// New dataset holding the clusters at `idx` (duplicates allowed), without re-validation of arms.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            clusters: idx.iter().map(|&i| self.clusters[i].clone()).collect(),
            schema: self.schema.clone(),
            pi: self.pi,
        }
    }

    pub fn has_both_arms(&self) -> bool {
        let t = self.clusters.iter().filter(|c| c.a == 1).count();
        t > 0 && t < self.clusters.len()
    }
}

fn parse_num(raw: &str, col: &str, row: usize) -> Result<f64> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Err(Error::Data(format!("missing value in column `{col}` at row {row}")));
    }
    let v: f64 = s
        .parse()
        .map_err(|_| Error::Data(format!("non-numeric value `{s}` in column `{col}` at row {row}")))?;
    if !v.is_finite() {
        return Err(Error::Data(format!("non-finite value in column `{col}` at row {row}")));
    }
    Ok(v)
}

struct Partial {
    id: String,
    a: u8,
    v: Vec<f64>,
    x: Vec<f64>,
    m: Vec<Vec<f64>>,
    y: Vec<f64>,
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema, pi: f64) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| Error::Data(format!("cannot open `{}`: {e}", path.as_ref().display())))?;
    read_dataset(file, schema, pi)
}

/// Parses long-format CSV; cluster order is first-appearance order.
pub fn read_dataset<R: Read>(reader: R, schema: &Schema, pi: f64) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let pos: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let col = |name: &str| -> Result<usize> { pos.get(name).copied().ok_or_else(|| Error::MissingColumn(name.to_string())) };
    let c_id = col(&schema.cluster)?;
    let c_a = col(&schema.treatment)?;
    let c_y = col(&schema.outcome)?;
    let c_m: Vec<usize> = schema.mediators.iter().map(|m| col(&m.name)).collect::<Result<_>>()?;
    let c_v: Vec<usize> = schema.cluster_covariates.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let c_x: Vec<usize> = schema.individual_covariates.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let k = schema.mediators.len();
    if k == 0 {
        return Err(Error::Config("schema declares no mediators".into()));
    }

    let mut order: Vec<Partial> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 2;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let id = get(c_id).to_string();
        if id.is_empty() {
            return Err(Error::Data(format!("missing cluster id at row {row}")));
        }
        let a_val = parse_num(get(c_a), &schema.treatment, row)?;
        if a_val != 0.0 && a_val != 1.0 {
            return Err(Error::Data(format!("treatment must be 0 or 1 (row {row})")));
        }
        let a = a_val as u8;
        let v: Vec<f64> = c_v
            .iter()
            .zip(&schema.cluster_covariates)
            .map(|(&c, n)| parse_num(get(c), n, row))
            .collect::<Result<_>>()?;
        let slot = match index.get(&id) {
            Some(&i) => {
                let p = &order[i];
                if p.a != a {
                    return Err(Error::Data(format!("treatment varies within cluster `{id}`")));
                }
                if p.v != v {
                    return Err(Error::Data(format!("cluster covariate varies within cluster `{id}`")));
                }
                i
            }
            None => {
                index.insert(id.clone(), order.len());
                order.push(Partial { id: id.clone(), a, v, x: Vec::new(), m: vec![Vec::new(); k], y: Vec::new() });
                order.len() - 1
            }
        };
        let p = &mut order[slot];
        for (&c, n) in c_x.iter().zip(&schema.individual_covariates) {
            p.x.push(parse_num(get(c), n, row)?);
        }
        for (kk, (&c, meta)) in c_m.iter().zip(&schema.mediators).enumerate() {
            let val = parse_num(get(c), &meta.name, row)?;
            if meta.kind == MediatorKind::Binary && val != 0.0 && val != 1.0 {
                return Err(Error::Data(format!(
                    "binary mediator `{}` has value {val} at row {row}",
                    meta.name
                )));
            }
            p.m[kk].push(val);
        }
        p.y.push(parse_num(get(c_y), &schema.outcome, row)?);
    }
    let d_x = c_x.len();
    let clusters = order
        .into_iter()
        .map(|p| {
            let n = p.y.len();
            ClusterRecord { id: p.id, a: p.a, n, v: p.v, x: p.x, d_x, m: p.m.concat(), k, y: p.y }
        })
        .collect();
    Dataset::new(clusters, schema.clone(), pi)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_dataset(ds, file)
}

/// Writes long-format CSV whose columns follow the dataset schema.
pub fn write_dataset<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ds.schema.columns())?;
    for c in &ds.clusters {
        for j in 0..c.n {
            let mut row = vec![c.id.clone(), c.a.to_string(), c.y[j].to_string()];
            row.extend((0..c.k).map(|k| c.mediator(k, j).to_string()));
            row.extend(c.v.iter().map(|v| v.to_string()));
            row.extend(c.x_row(j).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    #[default]
    ClusterAverage,
    IndividualAverage,
}

pub fn cluster_weight(kind: WeightKind, record: &ClusterRecord) -> f64 {
    match kind {
        WeightKind::ClusterAverage => 1.0,
        WeightKind::IndividualAverage => record.n as f64,
    }
}
