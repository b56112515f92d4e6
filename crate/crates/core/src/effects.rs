//! Symbolic effect algebra: estimands as signed (or powered) combinations of
//! mediation functionals, evaluated against one shared value map.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::WeightKind;
use crate::error::{Error, Result};

/// Subset of mediator indices (0-based bits; displayed 1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct MediatorSet(pub u32);

impl MediatorSet {
    pub const EMPTY: MediatorSet = MediatorSet(0);

    pub fn full(k: usize) -> Self {
        MediatorSet(((1u64 << k) - 1) as u32)
    }

    pub fn singleton(k: usize) -> Self {
        MediatorSet(1 << k)
    }

    pub fn from_indices(idx: &[usize]) -> Self {
        MediatorSet(idx.iter().fold(0, |acc, &i| acc | (1 << i)))
    }

    /// From 1-based labels, checking range against `k`.
    pub fn from_labels(labels: &[usize], k: usize) -> Result<Self> {
        let mut s = 0u32;
        for &l in labels {
            if l == 0 || l > k {
                return Err(Error::Config(format!("mediator index {l} out of range 1..={k}")));
            }
            s |= 1 << (l - 1);
        }
        Ok(MediatorSet(s))
    }

    pub fn contains(self, k: usize) -> bool {
        self.0 >> k & 1 == 1
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn with(self, k: usize) -> Self {
        MediatorSet(self.0 | 1 << k)
    }

    pub fn without(self, k: usize) -> Self {
        MediatorSet(self.0 & !(1 << k))
    }

    pub fn union(self, o: Self) -> Self {
        MediatorSet(self.0 | o.0)
    }

    pub fn is_subset_of(self, o: Self) -> bool {
        self.0 & !o.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..32).filter(move |&k| self.contains(k))
    }

    /// All subsets, in increasing bitmask order.
    pub fn subsets(self) -> Vec<MediatorSet> {
        let mut out = Vec::with_capacity(1 << self.len());
        let mut s = 0u32;
        loop {
            out.push(MediatorSet(s));
            if s == self.0 {
                break;
            }
            s = (s.wrapping_sub(self.0)) & self.0;
        }
        out
    }

    /// Image under the relabeling `k -> sigma[k]`.
    pub fn permute(self, sigma: &[usize]) -> Self {
        MediatorSet::from_indices(&self.iter().map(|k| sigma[k]).collect::<Vec<_>>())
    }

    pub fn label(self) -> String {
        let parts: Vec<String> = self.iter().map(|k| (k + 1).to_string()).collect();
        format!("{{{}}}", parts.join(","))
    }
}

/// Entry `k` is 0 iff `k ∈ J`.
pub fn assignment_tuple(j: MediatorSet, k: usize) -> Result<Vec<u8>> {
    if !j.is_subset_of(MediatorSet::full(k)) {
        return Err(Error::Config(format!("subset {} exceeds K={k}", j.label())));
    }
    Ok((0..k).map(|i| u8::from(!j.contains(i))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FunctionalRef {
    /// θ₁(a*, a_J): mediators in `zeros` drawn under control, the rest under treatment.
    Theta1 { a_star: u8, zeros: MediatorSet },
    /// θ₂(k, J*): neighbours' mediator k and mediators J* under control, all else under treatment.
    Theta2 { k: u8, jstar: MediatorSet },
}

impl FunctionalRef {
    pub fn theta1(a_star: u8, zeros: MediatorSet) -> Self {
        FunctionalRef::Theta1 { a_star, zeros }
    }

    pub fn theta2(k: usize, jstar: MediatorSet) -> Result<Self> {
        if jstar.contains(k) {
            return Err(Error::Config(format!("pivot {} must not belong to J*={}", k + 1, jstar.label())));
        }
        Ok(FunctionalRef::Theta2 { k: k as u8, jstar })
    }

    pub fn permute(self, sigma: &[usize]) -> Self {
        match self {
            FunctionalRef::Theta1 { a_star, zeros } => FunctionalRef::Theta1 { a_star, zeros: zeros.permute(sigma) },
            FunctionalRef::Theta2 { k, jstar } => {
                FunctionalRef::Theta2 { k: sigma[k as usize] as u8, jstar: jstar.permute(sigma) }
            }
        }
    }

    pub fn label(self, k: usize) -> String {
        match self {
            FunctionalRef::Theta1 { a_star, zeros } => {
                let t: Vec<String> = (0..k).map(|i| u8::from(!zeros.contains(i)).to_string()).collect();
                format!("theta1({a_star},({}))", t.join(","))
            }
            FunctionalRef::Theta2 { k: piv, jstar } => format!("theta2({},{})", piv + 1, jstar.label()),
        }
    }
}

pub type Term = (FunctionalRef, i32);

/// θ₁(1, a_{J*}) with sign (−1)^{|J*|} for every J* ⊆ J.
pub fn int_terms(j: MediatorSet, k: usize) -> Result<Vec<Term>> {
    if j.is_empty() {
        return Err(Error::Config("interaction set must be nonempty".into()));
    }
    assignment_tuple(j, k)?;
    Ok(j.subsets().into_iter().map(|s| (FunctionalRef::theta1(1, s), parity(s.len()))).collect())
}

fn parity(n: usize) -> i32 {
    if n % 2 == 0 {
        1
    } else {
        -1
    }
}

/// NIE = Σ_{∅≠J⊆K} (−1)^{|J|+1} INT_J.
pub fn nie_decomposition(k: usize) -> Vec<(MediatorSet, i32)> {
    MediatorSet::full(k).subsets().into_iter().filter(|s| !s.is_empty()).map(|s| (s, -parity(s.len()))).collect()
}

/// (SIME_J(k), IIME_J(k)) term lists.
pub fn sime_iime_terms(j: MediatorSet, k: usize) -> Result<(Vec<Term>, Vec<Term>)> {
    if !j.contains(k) {
        return Err(Error::Config(format!("pivot {} not in {}", k + 1, j.label())));
    }
    let mut sime = Vec::new();
    let mut iime = Vec::new();
    for s in j.without(k).subsets() {
        let sg = parity(s.len());
        let t2 = FunctionalRef::theta2(k, s)?;
        sime.push((FunctionalRef::theta1(1, s), sg));
        sime.push((t2, -sg));
        iime.push((t2, sg));
        iime.push((FunctionalRef::theta1(1, s.with(k)), -sg));
    }
    Ok((sime, iime))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EffectName {
    Te,
    Nde,
    Nie,
    Int(MediatorSet),
    Eie(u8),
    Sime(MediatorSet, u8),
    Iime(MediatorSet, u8),
    Esme(u8),
    Eime(u8),
}

impl fmt::Display for EffectName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            EffectName::Te => write!(f, "TE"),
            EffectName::Nde => write!(f, "NDE"),
            EffectName::Nie => write!(f, "NIE"),
            EffectName::Int(s) => write!(f, "INT{}", s.label()),
            EffectName::Eie(k) => write!(f, "EIE{}", k + 1),
            EffectName::Sime(s, k) => write!(f, "SIME{}|k={}", s.label(), k + 1),
            EffectName::Iime(s, k) => write!(f, "IIME{}|k={}", s.label(), k + 1),
            EffectName::Esme(k) => write!(f, "ESME{}", k + 1),
            EffectName::Eime(k) => write!(f, "EIME{}", k + 1),
        }
    }
}

impl EffectName {
    /// Parses `TE`, `NDE`, `NIE`, `EIE2`, `INT{1,3}`, `SIME{1,2}|k=1`, `IIME{1,2}|k=2`, `ESME1`, `EIME1`.
    pub fn parse(raw: &str, k: usize) -> Result<Self> {
        let s: String = raw.chars().filter(|c| !c.is_whitespace()).collect::<String>().to_ascii_uppercase();
        let bad = || Error::Config(format!("cannot parse estimand `{raw}`"));
        let index = |t: &str| -> Result<u8> {
            let v: usize = t.parse().map_err(|_| bad())?;
            if v == 0 || v > k {
                return Err(Error::Config(format!("mediator index {v} out of range 1..={k} in `{raw}`")));
            }
            Ok((v - 1) as u8)
        };
        let set = |t: &str| -> Result<MediatorSet> {
            let inner = t.strip_prefix('{').and_then(|t| t.strip_suffix('}')).ok_or_else(bad)?;
            let labels: Vec<usize> =
                inner.split(',').map(|p| p.parse::<usize>().map_err(|_| bad())).collect::<Result<_>>()?;
            let ms = MediatorSet::from_labels(&labels, k)?;
            if ms.is_empty() || ms.len() != labels.len() {
                return Err(bad());
            }
            Ok(ms)
        };
        let pivoted = |rest: &str| -> Result<(MediatorSet, u8)> {
            let (st, piv) = rest.split_once("|K=").ok_or_else(bad)?;
            let ms = set(st)?;
            let p = index(piv)?;
            if !ms.contains(p as usize) {
                return Err(Error::Config(format!("pivot not in subset in `{raw}`")));
            }
            Ok((ms, p))
        };
        Ok(match s.as_str() {
            "TE" => EffectName::Te,
            "NDE" => EffectName::Nde,
            "NIE" => EffectName::Nie,
            _ if s.starts_with("INT") => EffectName::Int(set(&s[3..])?),
            _ if s.starts_with("EIE") => EffectName::Eie(index(&s[3..])?),
            _ if s.starts_with("ESME") => EffectName::Esme(index(&s[4..])?),
            _ if s.starts_with("EIME") => EffectName::Eime(index(&s[4..])?),
            _ if s.starts_with("SIME") => {
                let (ms, p) = pivoted(&s[4..])?;
                EffectName::Sime(ms, p)
            }
            _ if s.starts_with("IIME") => {
                let (ms, p) = pivoted(&s[4..])?;
                EffectName::Iime(ms, p)
            }
            _ => return Err(bad()),
        })
    }

    /// Interaction order used only to sort output rows.
    pub fn order(&self) -> usize {
        match *self {
            EffectName::Te | EffectName::Nde | EffectName::Nie => 0,
            EffectName::Eie(_) | EffectName::Esme(_) | EffectName::Eime(_) => 1,
            EffectName::Int(s) | EffectName::Sime(s, _) | EffectName::Iime(s, _) => s.len(),
        }
    }

    pub fn terms(&self, k: usize) -> Result<Vec<Term>> {
        let all = MediatorSet::full(k);
        let empty = MediatorSet::EMPTY;
        Ok(match *self {
            EffectName::Te => vec![(FunctionalRef::theta1(1, empty), 1), (FunctionalRef::theta1(0, all), -1)],
            EffectName::Nde => vec![(FunctionalRef::theta1(1, all), 1), (FunctionalRef::theta1(0, all), -1)],
            EffectName::Nie => vec![(FunctionalRef::theta1(1, empty), 1), (FunctionalRef::theta1(1, all), -1)],
            EffectName::Int(s) => int_terms(s, k)?,
            EffectName::Eie(p) => int_terms(MediatorSet::singleton(p as usize), k)?,
            EffectName::Sime(s, p) => sime_iime_terms(s, p as usize)?.0,
            EffectName::Iime(s, p) => sime_iime_terms(s, p as usize)?.1,
            EffectName::Esme(p) => sime_iime_terms(MediatorSet::singleton(p as usize), p as usize)?.0,
            EffectName::Eime(p) => sime_iime_terms(MediatorSet::singleton(p as usize), p as usize)?.1,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Difference,
    RiskRatio,
    OddsRatio,
}

impl Scale {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_', ' '], "").as_str() {
            "difference" | "diff" | "rd" => Ok(Scale::Difference),
            "riskratio" | "rr" => Ok(Scale::RiskRatio),
            "oddsratio" | "or" => Ok(Scale::OddsRatio),
            _ => Err(Error::Config(format!("unknown scale `{s}`"))),
        }
    }

    pub fn is_ratio(self) -> bool {
        self != Scale::Difference
    }

    fn check(self, theta: f64) -> Result<()> {
        match self {
            Scale::Difference => Ok(()),
            Scale::RiskRatio if theta > 0.0 => Ok(()),
            Scale::OddsRatio if theta > 0.0 && theta < 1.0 => Ok(()),
            Scale::RiskRatio => Err(Error::Domain(format!("risk-ratio scale needs θ > 0, got {theta}"))),
            Scale::OddsRatio => Err(Error::Domain(format!("odds-ratio scale needs θ in (0,1), got {theta}"))),
        }
    }

    /// log h(θ).
    pub fn log_h(self, theta: f64) -> Result<f64> {
        self.check(theta)?;
        Ok(match self {
            Scale::Difference => theta,
            Scale::RiskRatio => theta.ln(),
            Scale::OddsRatio => theta.ln() - (1.0 - theta).ln(),
        })
    }

    /// d/dθ of the estimation-scale transform (θ itself on the difference scale, log h(θ) otherwise).
    pub fn dlog_h(self, theta: f64) -> Result<f64> {
        self.check(theta)?;
        Ok(match self {
            Scale::Difference => 1.0,
            Scale::RiskRatio => 1.0 / theta,
            Scale::OddsRatio => 1.0 / (theta * (1.0 - theta)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSpec {
    pub name: EffectName,
    pub k: usize,
    pub terms: Vec<Term>,
    pub scale: Scale,
    pub weight: WeightKind,
}

impl EffectSpec {
    pub fn new(name: EffectName, k: usize, scale: Scale, weight: WeightKind) -> Result<Self> {
        Ok(EffectSpec { name, k, terms: name.terms(k)?, scale, weight })
    }

    pub fn parse(raw: &str, k: usize, scale: Scale, weight: WeightKind) -> Result<Self> {
        Self::new(EffectName::parse(raw, k)?, k, scale, weight)
    }

    /// Net exponent per functional after merging duplicates (zero entries dropped).
    pub fn coefficients(&self) -> BTreeMap<FunctionalRef, i32> {
        let mut out = BTreeMap::new();
        for &(r, e) in &self.terms {
            *out.entry(r).or_insert(0) += e;
        }
        out.retain(|_, v| *v != 0);
        out
    }

    pub fn refs(&self) -> Vec<FunctionalRef> {
        let mut v: Vec<FunctionalRef> = self.terms.iter().map(|t| t.0).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Relabels mediators by `sigma`.
    pub fn permute(&self, sigma: &[usize]) -> Self {
        let name = match self.name {
            EffectName::Int(s) => EffectName::Int(s.permute(sigma)),
            EffectName::Eie(p) => EffectName::Eie(sigma[p as usize] as u8),
            EffectName::Sime(s, p) => EffectName::Sime(s.permute(sigma), sigma[p as usize] as u8),
            EffectName::Iime(s, p) => EffectName::Iime(s.permute(sigma), sigma[p as usize] as u8),
            EffectName::Esme(p) => EffectName::Esme(sigma[p as usize] as u8),
            EffectName::Eime(p) => EffectName::Eime(sigma[p as usize] as u8),
            other => other,
        };
        EffectSpec {
            name,
            k: self.k,
            terms: self.terms.iter().map(|&(r, e)| (r.permute(sigma), e)).collect(),
            scale: self.scale,
            weight: self.weight,
        }
    }

    /// Value on the estimation scale: the difference itself, or the log of the ratio.
    pub fn combine_log(&self, values: &BTreeMap<FunctionalRef, f64>) -> Result<f64> {
        let mut acc = 0.0;
        for r in self.refs() {
            let th = lookup(values, r, self.k)?;
            self.scale.log_h(th)?;
        }
        for (r, e) in self.coefficients() {
            acc += e as f64 * self.scale.log_h(lookup(values, r, self.k)?)?;
        }
        Ok(acc)
    }

    /// Difference → Σ eθ; ratio → Π h(θ)^e.
    pub fn combine(&self, values: &BTreeMap<FunctionalRef, f64>) -> Result<f64> {
        let v = self.combine_log(values)?;
        Ok(if self.scale.is_ratio() { v.exp() } else { v })
    }

    /// Gradient of the estimation-scale value with respect to each θ.
    pub fn gradient(&self, values: &BTreeMap<FunctionalRef, f64>) -> Result<Vec<(FunctionalRef, f64)>> {
        self.coefficients()
            .into_iter()
            .map(|(r, e)| Ok((r, e as f64 * self.scale.dlog_h(lookup(values, r, self.k)?)?)))
            .collect()
    }
}

fn lookup(values: &BTreeMap<FunctionalRef, f64>, r: FunctionalRef, k: usize) -> Result<f64> {
    values.get(&r).copied().ok_or_else(|| Error::Estimation(format!("no value for {}", r.label(k))))
}

/// Convenience wrapper over [`EffectSpec::combine`].
pub fn combine(spec: &EffectSpec, values: &BTreeMap<FunctionalRef, f64>) -> Result<f64> {
    spec.combine(values)
}

/// TE, NDE, NIE, every EIE_k and INT_J (|J| ≥ 2), then ESME_k and EIME_k.
pub fn default_estimands(k: usize) -> Vec<EffectName> {
    let mut out = vec![EffectName::Te, EffectName::Nde, EffectName::Nie];
    out.extend((0..k).map(|i| EffectName::Eie(i as u8)));
    let mut ints: Vec<MediatorSet> = MediatorSet::full(k).subsets().into_iter().filter(|s| s.len() >= 2).collect();
    ints.sort_by_key(|s| (s.len(), s.iter().collect::<Vec<_>>()));
    out.extend(ints.into_iter().map(EffectName::Int));
    out.extend((0..k).map(|i| EffectName::Esme(i as u8)));
    out.extend((0..k).map(|i| EffectName::Eime(i as u8)));
    out
}
