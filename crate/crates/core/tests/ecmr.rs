use crtmed::data::{ClusterRecord, Dataset, MediatorKind, MediatorMeta, Schema};
use crtmed::ecmr::{fit_ecmr, fit_marginals, EcmrModel, EcmrSpec, IccMatrices, LatentConfig, MarginalSpec, ResidualKind};
use crtmed::elliptical::special::{norm_cdf, norm_pdf, norm_quantile};
use crtmed::elliptical::Generator;
use crtmed::nuisance::{FeatureMap, LearnerSpec};
use crtmed::rng::stream_rng;
use crtmed::sim::{DgpParams, TrialGenerator};
use nalgebra::{DMatrix, DVector};

fn sim(i: usize, seed: u64) -> Dataset {
    TrialGenerator::new(DgpParams::default()).dataset(i, seed).unwrap()
}

fn normal_spec() -> MarginalSpec {
    MarginalSpec { residual: ResidualKind::Normal, ..MarginalSpec::default() }
}

#[test]
fn marginal_coefficients_within_three_se() {
    // no between-individual association, so the pooled model-based SEs are valid
    let p = DgpParams { q1: 0.0, ..DgpParams::default() };
    let ds = TrialGenerator::new(p.clone()).dataset(200, 1).unwrap();
    let truth = p.true_ecmr();
    let fitted = fit_marginals(&ds, &normal_spec()).unwrap();
    for k in 0..2 {
        let (b, se) = fitted[k].learner.coefficients().unwrap();
        let (t, _) = truth.marginals[k].learner.coefficients().unwrap();
        for c in 0..b.len() {
            assert!((b[c] - t[c]).abs() < 3.0 * se[c], "mediator {k} coef {c}: {} vs {} (se {})", b[c], t[c], se[c]);
        }
    }
}

#[test]
fn constant_mediator_is_degenerate() {
    let mut ds = sim(10, 2);
    for c in &mut ds.clusters {
        for j in 0..c.n {
            c.m[j] = 3.0;
        }
    }
    let err = fit_marginals(&ds, &MarginalSpec::default()).unwrap_err();
    assert!(err.to_string().contains("degenerate mediator"), "{err}");
}

fn off(icc: &IccMatrices) -> [f64; 4] {
    [icc.q0[(0, 1)], icc.q1[(0, 0)], icc.q1[(0, 1)], icc.q1[(1, 1)]]
}

#[test]
fn copula_recovers_design_correlation() {
    let fit = fit_ecmr(&sim(200, 3), &EcmrSpec { marginal: normal_spec(), ..EcmrSpec::default() }).unwrap();
    assert!(fit.icc_fit.converged);
    for (got, want) in off(&fit.model.icc).iter().zip([0.1, 0.05, 0.05, 0.05]) {
        assert!((got - want).abs() < 0.06, "{:?}", off(&fit.model.icc));
    }
}

#[test]
fn independent_mediators_give_near_zero_association() {
    let p = DgpParams { q0_offdiag: 0.0, q1: 0.0, ..DgpParams::default() };
    let ds = TrialGenerator::new(p).dataset(200, 4).unwrap();
    let fit = fit_ecmr(&ds, &EcmrSpec::default()).unwrap();
    for v in off(&fit.model.icc) {
        assert!(v.abs() < 0.05, "{:?}", off(&fit.model.icc));
    }
}

fn one_mediator_data(rho: f64, i: usize, seed: u64) -> Dataset {
    let schema = Schema {
        cluster: "c".into(),
        treatment: "a".into(),
        outcome: "y".into(),
        mediators: vec![MediatorMeta { name: "m".into(), kind: MediatorKind::Continuous }],
        cluster_covariates: vec!["v".into()],
        individual_covariates: vec![],
    };
    let clusters = (0..i)
        .map(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let n = 5 + c % 6;
            let shared: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            let m: Vec<f64> = (0..n)
                .map(|_| {
                    let e: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                    1.0 + rho.sqrt() * shared + (1.0 - rho).sqrt() * e
                })
                .collect();
            let v: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            ClusterRecord { id: c.to_string(), a: (c % 2) as u8, n, v: vec![v], x: vec![], d_x: 0, m, k: 1, y: vec![0.0; n] }
        })
        .collect();
    Dataset::new(clusters, schema, 0.5).unwrap()
}

#[test]
fn single_mediator_matches_moment_estimator() {
    let ds = one_mediator_data(0.3, 300, 5);
    let spec = EcmrSpec { marginal: normal_spec(), ..EcmrSpec::default() };
    let fit = fit_ecmr(&ds, &spec).unwrap();
    // moment oracle on the same latent pseudo-observations
    let (mut num, mut den, mut ss, mut cnt) = (0.0, 0.0, 0.0, 0.0);
    for c in &ds.clusters {
        let (coords, _) = fit.model.observed_coords(c).unwrap();
        let e: Vec<f64> = coords
            .iter()
            .map(|x| match x {
                crtmed::ecmr::Coord::Point(v) => *v,
                _ => unreachable!(),
            })
            .collect();
        let s: f64 = e.iter().sum();
        let s2: f64 = e.iter().map(|v| v * v).sum();
        num += s * s - s2;
        den += (c.n * (c.n - 1)) as f64;
        ss += s2;
        cnt += c.n as f64;
    }
    let moment = (num / den) / (ss / cnt);
    let got = fit.model.icc.q1[(0, 0)];
    assert!((got - moment).abs() < 0.03, "pseudo-likelihood {got} vs moment {moment}");
    assert!((got - 0.3).abs() < 0.08, "{got}");
}

fn intercept_only() -> FeatureMap {
    FeatureMap {
        arm: false,
        size: false,
        cluster_covariates: false,
        own_covariates: false,
        ..FeatureMap::default().covariates_only()
    }
}

#[test]
fn latent_coordinates_invariant_to_monotone_transform() {
    let ds = sim(30, 6);
    let mut cubed = ds.clone();
    for c in &mut cubed.clusters {
        for j in 0..c.n {
            c.m[j] = c.m[j].powi(3);
        }
    }
    let spec = EcmrSpec { marginal: MarginalSpec { design: intercept_only(), ..MarginalSpec::default() }, ..EcmrSpec::default() };
    let icc = IccMatrices::exchangeable(2, 0.1, 0.05).unwrap();
    let model = |d: &Dataset| EcmrModel::new(fit_marginals(d, &spec.marginal).unwrap(), icc.clone(), Generator::Normal, LatentConfig::default(), 1e-12);
    let (m0, m1) = (model(&ds), model(&cubed));
    for (a, b) in ds.clusters.iter().zip(&cubed.clusters) {
        let (ca, _) = m0.observed_coords(a).unwrap();
        let (cb, _) = m1.observed_coords(b).unwrap();
        for (x, y) in ca.iter().zip(&cb) {
            match (x, y) {
                (crtmed::ecmr::Coord::Point(u), crtmed::ecmr::Coord::Point(v)) => assert!((u - v).abs() < 1e-12),
                _ => assert_eq!(x, y),
            }
        }
    }
}

fn true_model(icc: IccMatrices) -> EcmrModel {
    let mut m = DgpParams::default().true_ecmr();
    m = EcmrModel::new(m.marginals.clone(), icc, m.generator, m.latent, m.f_min);
    m
}

#[test]
fn sampling_independence_margins_and_frequencies() {
    let ds = sim(3, 7);
    let rec = &ds.clusters[0];
    let n = rec.n;
    let model = true_model(IccMatrices::independence(2));
    let draws = model.sample_mediators(1, rec, 10_000, &mut stream_rng(8, 0)).unwrap();
    let locs = model.locations(rec);
    let loc = &locs.loc[1];
    // M1 of individual 0 versus M1 of individual 1: sample correlation near 0
    let xs: Vec<f64> = draws.iter().map(|d| d[0]).collect();
    let ys: Vec<f64> = draws.iter().map(|d| d[1]).collect();
    let corr = |a: &[f64], b: &[f64]| {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let c: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        c / (va * vb).sqrt()
    };
    assert!(corr(&xs, &ys).abs() < 3.0 / 100.0);
    let bin: Vec<f64> = draws.iter().map(|d| d[n]).collect();
    assert!(corr(&xs, &bin).abs() < 3.0 / 100.0);
    // continuous margin matches F̂: KS distance
    let mut s = xs.clone();
    s.sort_by(f64::total_cmp);
    let ks = s
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = norm_cdf((x - loc[0]) / 2.5);
            (f - i as f64 / 1e4).abs().max((f - (i + 1) as f64 / 1e4).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.02, "{ks}");
    // binary frequency
    let p = loc[n];
    let freq = bin.iter().sum::<f64>() / 1e4;
    assert!((freq - p).abs() < 3.0 * (p * (1.0 - p) / 1e4).sqrt(), "{freq} {p}");
}

#[test]
fn independence_factorizes_density() {
    let ds = sim(3, 9);
    let rec = &ds.clusters[1];
    let model = true_model(IccMatrices::independence(2));
    let cells: Vec<(usize, usize)> = (0..rec.n).map(|j| (0, j)).collect();
    let vals: Vec<f64> = (0..rec.n).map(|j| rec.m[j]).collect();
    let got = model.subset_log_density(&cells, &vals, rec.a, rec).unwrap();
    let locs = model.locations(rec);
    let want: f64 = (0..rec.n).map(|j| (norm_pdf((rec.m[j] - locs.loc[rec.a as usize][j]) / 2.5) / 2.5).ln()).sum();
    assert!((got - want).abs() < 1e-10 * want.abs(), "{got} {want}");
}

#[test]
fn single_binary_cell_is_marginal_probability() {
    let ds = sim(10, 10);
    let rec = &ds.clusters[0];
    let model = true_model(IccMatrices::exchangeable(2, 0.1, 0.05).unwrap());
    let p = model.locations(rec).loc[0][rec.n + 2];
    let l1 = model.subset_log_density(&[(1, 2)], &[1.0], 0, rec).unwrap();
    let l0 = model.subset_log_density(&[(1, 2)], &[0.0], 0, rec).unwrap();
    assert!((l1 - p.ln()).abs() < 1e-12, "{l1} {}", p.ln());
    assert!((l0 - (1.0 - p).ln()).abs() < 1e-12);
}

/// Gaussian-copula density of two continuous and two binary cells (N = 2) by conditioning the
/// latent normal on the continuous coordinates and integrating the bivariate normal rectangle
/// with composite Simpson's rule.
fn gaussian_copula_oracle(r: &DMatrix<f64>, z: [f64; 2], lo: [f64; 2], hi: [f64; 2], jac: f64) -> f64 {
    let cidx = [0usize, 1];
    let didx = [2usize, 3];
    let sub = |a: &[usize], b: &[usize]| DMatrix::from_fn(a.len(), b.len(), |i, j| r[(a[i], b[j])]);
    let rcc = sub(&cidx, &cidx);
    let rdc = sub(&didx, &cidx);
    let rdd = sub(&didx, &didx);
    let inv = rcc.clone().try_inverse().unwrap();
    let zc = DVector::from_column_slice(&z);
    let mu = &rdc * &inv * &zc;
    let cov = rdd - &rdc * &inv * rdc.transpose();
    let logf = -0.5 * zc.dot(&(&inv * &zc)) - 0.5 * rcc.determinant().ln() - (2.0f64 * std::f64::consts::PI).ln();
    let (s1, s2) = (cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt());
    let rho = cov[(0, 1)] / (s1 * s2);
    let (a1, b1) = (((lo[0] - mu[0]) / s1).max(-9.0), ((hi[0] - mu[0]) / s1).min(9.0));
    let (a2, b2) = ((lo[1] - mu[1]) / s2, (hi[1] - mu[1]) / s2);
    let sr = (1.0 - rho * rho).sqrt();
    let inner = |x: f64| {
        let up = if b2.is_finite() { norm_cdf((b2 - rho * x) / sr) } else { 1.0 };
        let dn = if a2.is_finite() { norm_cdf((a2 - rho * x) / sr) } else { 0.0 };
        norm_pdf(x) * (up - dn)
    };
    let m = 20_000;
    let h = (b1 - a1) / m as f64;
    let mut s = inner(a1) + inner(b1);
    for i in 1..m {
        s += inner(a1 + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    logf + (s * h / 3.0).ln() + jac
}

#[test]
fn mixed_cluster_matches_gaussian_copula_oracle() {
    let ds = sim(4, 11);
    let mut rec = ds.clusters[2].clone();
    rec.n = 2;
    rec.x.truncate(2);
    rec.y.truncate(2);
    let full = ds.clusters[2].clone();
    rec.m = vec![full.m[0], full.m[1], 1.0, 0.0];
    let icc = IccMatrices::exchangeable(2, 0.3, 0.15).unwrap();
    let model = true_model(icc.clone());
    let cells = [(0, 0), (0, 1), (1, 0), (1, 1)];
    let got = model.subset_log_density(&cells, &rec.m, rec.a, &rec).unwrap();
    let loc = model.locations(&rec).loc[rec.a as usize].clone();
    let z = [(rec.m[0] - loc[0]) / 2.5, (rec.m[1] - loc[1]) / 2.5];
    let jac = -2.0 * 2.5f64.ln();
    let t = [norm_quantile(1.0 - loc[2]), norm_quantile(1.0 - loc[3])];
    let want = gaussian_copula_oracle(&icc.build_r(2).unwrap(), z, [t[0], f64::NEG_INFINITY], [f64::INFINITY, t[1]], jac);
    assert!((got - want).abs() < 1e-6, "{got} {want}");
}

#[test]
fn binary_cells_marginalize_by_summation() {
    let ds = sim(4, 12);
    let rec = &ds.clusters[3];
    let model = true_model(IccMatrices::exchangeable(2, 0.2, 0.1).unwrap());
    let n = rec.n;
    // cells: M2 of individuals 0..3 and M1 of individual 0
    let base = [(0usize, 0usize), (1, 0), (1, 1), (1, 2)];
    for v0 in [0.0, 1.0] {
        for v1 in [0.0, 1.0] {
            let sub = model.subset_log_density(&base[..3], &[rec.m[0], v0, v1], rec.a, rec).unwrap().exp();
            let sum: f64 = [0.0, 1.0]
                .iter()
                .map(|&v2| model.subset_log_density(&base, &[rec.m[0], v0, v1, v2], rec.a, rec).unwrap().exp())
                .sum();
            assert!((sum - sub).abs() < 1e-6 * sub, "{sum} {sub}");
        }
    }
    // integrating out a continuous cell by quadrature
    let loc = model.locations(rec).loc[rec.a as usize][1];
    let sub = model.subset_log_density(&[(1, 0)], &[1.0], rec.a, rec).unwrap().exp();
    let (lo, hi, m) = (loc - 25.0, loc + 25.0, 4000);
    let h = (hi - lo) / m as f64;
    let integral: f64 = (0..m)
        .map(|i| {
            let x = lo + (i as f64 + 0.5) * h;
            model.subset_log_density(&[(0, 1), (1, 0)], &[x, 1.0], rec.a, rec).unwrap().exp() * h
        })
        .sum();
    assert!((integral - sub).abs() < 1e-5, "{integral} {sub} (n = {n})");
}

#[test]
fn density_floor_binds_far_in_the_tail() {
    let ds = sim(10, 13);
    let rec = &ds.clusters[0];
    let mut model = true_model(IccMatrices::exchangeable(2, 0.1, 0.05).unwrap());
    model.f_min = 1e-8;
    let l = model.subset_log_density(&[(0, 0)], &[1e4], 0, rec).unwrap();
    assert_eq!(l, 1e-8f64.ln());
}

#[test]
fn model_json_round_trip() {
    let fit = fit_ecmr(&sim(40, 14), &EcmrSpec { marginal: MarginalSpec { max_knots: Some(50), ..MarginalSpec::default() }, ..EcmrSpec::default() })
        .unwrap();
    let back = EcmrModel::from_json(&fit.model.to_json().unwrap()).unwrap();
    let ds = sim(10, 15);
    let rec = &ds.clusters[1];
    let cells: Vec<(usize, usize)> = (0..rec.n).flat_map(|j| [(0, j), (1, j)]).collect();
    let vals: Vec<f64> = cells.iter().map(|&(k, j)| rec.m[k * rec.n + j]).collect();
    let a = fit.model.subset_log_density(&cells, &vals, rec.a, rec).unwrap();
    let b = back.subset_log_density(&cells, &vals, rec.a, rec).unwrap();
    assert_eq!(a, b);
}

#[test]
fn learner_choice_is_respected() {
    let ds = sim(60, 16);
    let spec = MarginalSpec { learner: LearnerSpec::polynomial(), ..MarginalSpec::default() };
    let m = fit_marginals(&ds, &spec).unwrap();
    assert!(m[0].learner.coefficients().is_none());
}
