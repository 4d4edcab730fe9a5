use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use orthoml::dml::{dml_plm, DmlOptions};
use orthoml::learners::{make_folds, LearnerSpec};
use orthoml::linalg::{ols_fit, with_intercept};
use orthoml::rng;
use orthoml::sensitivity::*;
use orthoml::sim::{generate, SemParams, SEM};
use orthoml::Error;
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

fn rn<R: rand::Rng>(r: &mut R) -> f64 {
    StandardNormal.sample(r)
}

#[test]
fn bound_examples() {
    assert_eq!(ovb_bound(0.7, 0.4, 0.0, 3.0).unwrap().phi, 0.0);
    assert_abs_diff_eq!(ovb_bound(0.0, 0.25, 0.2, 1.0).unwrap().phi, 0.25, epsilon = 1e-12);
    let b = ovb_bound(2.0, 0.5, 0.5, 2.0).unwrap();
    assert_abs_diff_eq!(b.phi, 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(b.interval.0, 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(b.interval.1, 3.0, epsilon = 1e-12);
    for (ry, rd) in [(1.0, 0.1), (0.1, 1.0), (-0.01, 0.1), (0.1, f64::NAN)] {
        assert!(matches!(ovb_bound(0.0, ry, rd, 1.0), Err(Error::BadR2(_))));
    }
    assert!(ovb_bound(0.0, 0.1, 0.1, 0.0).is_err());
}

/// Population moments of the partialled SEM. Every variable is a linear
/// combination of independent unit shocks `(Ã, e_D, e_Y)`, so covariances
/// are dot products.
struct Population {
    beta: f64,
    r2_y: f64,
    r2_d: f64,
    s: f64,
}

fn population(p: &SemParams) -> Population {
    let a = DVector::from_vec(vec![1.0, 0.0, 0.0]);
    let d = DVector::from_vec(vec![p.gamma, p.sigma_d, 0.0]);
    let y = &d * p.alpha + &a * p.delta + DVector::from_vec(vec![0.0, 0.0, p.sigma_y]);
    let cov = |u: &DVector<f64>, v: &DVector<f64>| u.dot(v);
    let beta = cov(&y, &d) / cov(&d, &d);
    let short = &y - &d * beta;
    // Residual of Ỹ on (D̃, Ã) by the normal equations.
    let g = DMatrix::from_row_slice(2, 2, &[cov(&d, &d), cov(&d, &a), cov(&a, &d), cov(&a, &a)]);
    let rhs = DVector::from_vec(vec![cov(&y, &d), cov(&y, &a)]);
    let c = g.try_inverse().unwrap() * rhs;
    let long = &y - &d * c[0] - &a * c[1];
    let r2_y = 1.0 - cov(&long, &long) / cov(&short, &short);
    let r2_d = cov(&a, &d).powi(2) / (cov(&a, &a) * cov(&d, &d));
    let s = cov(&short, &short) / cov(&d, &d);
    Population { beta, r2_y, r2_d, s }
}

#[test]
fn sem_bias_matches_partial_r2_formula() {
    let pop = population(&SEM);
    assert_abs_diff_eq!(pop.beta - SEM.alpha, SEM.phi(), epsilon = 1e-12);
    assert_abs_diff_eq!(pop.r2_y, 1.0 / 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(pop.r2_d, 0.5, epsilon = 1e-12);
    assert_abs_diff_eq!(pop.s, 0.75, epsilon = 1e-12);
    let b = ovb_bound(pop.beta, pop.r2_y, pop.r2_d, pop.s).unwrap();
    assert_abs_diff_eq!(b.phi, SEM.phi().abs(), epsilon = 1e-10);
    assert_abs_diff_eq!(b.interval.0, SEM.alpha, epsilon = 1e-10);
}

#[test]
fn bound_from_data_covers_truth() {
    let pop = population(&SEM);
    let (n, reps) = (1000, 200);
    let ols = LearnerSpec::Ols;
    // The truth sits on the lower edge of the population bound, so the
    // widened interval misses with one tail of the CI plus the noise in S.
    let opts = DmlOptions { alpha: 0.005, ..DmlOptions::default() };
    let mut covered = 0;
    for rep in 0..reps {
        let s = generate("example_12_2_1", n, rep).unwrap();
        let plan = make_folds(n, 5, rep).unwrap();
        let b = ovb_from_data(&s.y, &s.d, &s.x, &ols, &ols, &plan, opts, pop.r2_y, pop.r2_d, 0.6).unwrap();
        let (lo, hi) = b.ci_interval.unwrap();
        covered += (lo <= s.theta && s.theta <= hi) as usize;
    }
    let rate = covered as f64 / reps as f64;
    assert!(rate >= 0.99, "coverage {rate}");
}

#[test]
fn bound_from_data_without_confounding_strength() {
    let s = generate("example_12_2_1", 400, 3).unwrap();
    let plan = make_folds(400, 5, 1).unwrap();
    let ols = LearnerSpec::Ols;
    let opts = DmlOptions { seed: 2, ..DmlOptions::default() };
    let b = ovb_from_data(&s.y, &s.d, &s.x, &ols, &ols, &plan, opts, 0.0, 0.0, 0.4).unwrap();
    let plm = dml_plm(&s.y, &s.d, &s.x, &ols, &ols, &plan, opts).unwrap();
    assert_eq!(b.beta, plm.theta);
    assert_eq!(b.interval, (plm.theta, plm.theta));
    assert_eq!(b.ci_interval, Some(plm.ci));
    let doubled = ovb_bound(b.beta, 0.2, 0.3, 2.0 * b.s).unwrap().phi;
    assert_abs_diff_eq!(doubled, 2f64.sqrt() * ovb_bound(b.beta, 0.2, 0.3, b.s).unwrap().phi, epsilon = 1e-12);
    let csv = b.contour_csv();
    assert!(csv.starts_with("r2_y,r2_d,phi_bound\n"));
    assert_eq!(csv.lines().count(), 1 + CONTOUR_POINTS * CONTOUR_POINTS);
}

/// Structural laws of a binary proxy SEM:
/// `A → Q, A → S, (A, Q) → D, (D, A, S) → Y`.
#[derive(Debug, Clone)]
struct BinarySem {
    p_a: f64,
    p_q: [f64; 2],
    p_s: [f64; 2],
    p_d: [[f64; 2]; 2],
    p_y: [[[f64; 2]; 2]; 2],
}

fn bern(p: f64, v: usize) -> f64 {
    if v == 1 {
        p
    } else {
        1.0 - p
    }
}

impl BinarySem {
    /// `P(A, Q, S, D, Y)` indexed `[a][q][s][d][y]`.
    fn joint(&self) -> [[[[[f64; 2]; 2]; 2]; 2]; 2] {
        let mut j = [[[[[0.0; 2]; 2]; 2]; 2]; 2];
        for a in 0..2 {
            for q in 0..2 {
                for s in 0..2 {
                    for d in 0..2 {
                        for y in 0..2 {
                            j[a][q][s][d][y] = bern(self.p_a, a)
                                * bern(self.p_q[a], q)
                                * bern(self.p_s[a], s)
                                * bern(self.p_d[a][q], d)
                                * bern(self.p_y[d][a][s], y);
                        }
                    }
                }
            }
        }
        j
    }

    /// g-formula: cut the arrows into `D` and set it to `d`.
    fn do_law(&self, y: usize, d: usize) -> f64 {
        let mut t = 0.0;
        for a in 0..2 {
            for s in 0..2 {
                t += bern(self.p_a, a) * bern(self.p_s[a], s) * bern(self.p_y[d][a][s], y);
            }
        }
        t
    }

    /// Observational tables in the layout `proxy_discrete` takes.
    fn tables(&self) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<f64>) {
        let j = self.joint();
        let sum = |f: &dyn Fn(usize, usize, usize, usize, usize) -> bool| {
            let mut t = 0.0;
            for a in 0..2 {
                for q in 0..2 {
                    for s in 0..2 {
                        for d in 0..2 {
                            for y in 0..2 {
                                if f(a, q, s, d, y) {
                                    t += j[a][q][s][d][y];
                                }
                            }
                        }
                    }
                }
            }
            t
        };
        let mut py = Vec::new();
        let mut ps = Vec::new();
        for d in 0..2 {
            py.push(DMatrix::from_fn(2, 2, |y, q| {
                sum(&|_, qq, _, dd, yy| qq == q && dd == d && yy == y) / sum(&|_, qq, _, dd, _| qq == q && dd == d)
            }));
            ps.push(DMatrix::from_fn(2, 2, |s, q| {
                sum(&|_, qq, ss, dd, _| qq == q && dd == d && ss == s) / sum(&|_, qq, _, dd, _| qq == q && dd == d)
            }));
        }
        let marg = (0..2).map(|s| sum(&|_, _, ss, _, _| ss == s)).collect();
        (py, ps, marg)
    }
}

fn example_sem() -> BinarySem {
    BinarySem {
        p_a: 0.4,
        p_q: [0.2, 0.75],
        p_s: [0.15, 0.8],
        p_d: [[0.3, 0.5], [0.55, 0.85]],
        p_y: [[[0.1, 0.3], [0.4, 0.6]], [[0.35, 0.5], [0.7, 0.9]]],
    }
}

#[test]
fn proxy_formula_matches_g_formula() {
    let sem = example_sem();
    let (py, ps, marg) = sem.tables();
    let out = proxy_discrete(&py, &ps, &marg).unwrap();
    assert!(!out.clipped);
    for y in 0..2 {
        for d in 0..2 {
            assert_abs_diff_eq!(out.p_do[y][d], sem.do_law(y, d), epsilon = 1e-10);
        }
    }
}

#[test]
fn proxy_formula_special_cases() {
    // S = Q = A: the proxy matrix is the identity and the formula is the
    // backdoor adjustment.
    let p_a = [0.35, 0.65];
    let p_y_da = [DMatrix::from_row_slice(2, 2, &[0.9, 0.4, 0.1, 0.6]), DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.5, 0.8])];
    let eye = vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)];
    let out = proxy_discrete(&p_y_da, &eye, &p_a).unwrap();
    for y in 0..2 {
        for d in 0..2 {
            let backdoor: f64 = (0..2).map(|a| p_y_da[d][(y, a)] * p_a[a]).sum();
            assert_abs_diff_eq!(out.p_do[y][d], backdoor, epsilon = 1e-12);
        }
    }

    // Y does not depend on D and D is pure noise: p(y : do(d)) = p(y).
    let mut sem = example_sem();
    sem.p_d = [[0.4; 2]; 2];
    for a in 0..2 {
        for s in 0..2 {
            sem.p_y[1][a][s] = sem.p_y[0][a][s];
        }
    }
    let (py, ps, marg) = sem.tables();
    let out = proxy_discrete(&py, &ps, &marg).unwrap();
    let j = sem.joint();
    let mut p_y1 = 0.0;
    for a in 0..2 {
        for q in 0..2 {
            for s in 0..2 {
                for d in 0..2 {
                    p_y1 += j[a][q][s][d][1];
                }
            }
        }
    }
    assert_abs_diff_eq!(out.p_do[1][0], p_y1, epsilon = 1e-10);
    assert_abs_diff_eq!(out.p_do[1][1], p_y1, epsilon = 1e-10);

    let flat = vec![DMatrix::from_element(2, 2, 0.5), DMatrix::identity(2, 2)];
    assert!(matches!(proxy_discrete(&p_y_da, &flat, &p_a), Err(Error::SingularProxyMatrix(0))));
    let bad = vec![DMatrix::from_row_slice(2, 2, &[0.9, 0.4, 0.2, 0.6]), p_y_da[1].clone()];
    assert!(matches!(proxy_discrete(&bad, &eye, &p_a), Err(Error::NotADistribution(_))));
    assert!(matches!(proxy_discrete(&p_y_da, &eye, &[0.5, 0.6]), Err(Error::NotADistribution(_))));
}

/// Linear proxy SEM: `Q = A + e_Q`, `S = A + s_S·e_S`, `D = A + 0.5Q + e_D`,
/// `Y = αD + δA + X + e_Y`.
fn proxy_sem(n: usize, delta: f64, s_s: f64, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, DMatrix<f64>) {
    let mut r = rng::stream(seed, "test", 0);
    let x = DMatrix::from_fn(n, 1, |_, _| rn(&mut r));
    let (mut y, mut d, mut s, mut q, mut a) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        a[i] = 0.5 * x[(i, 0)] + rn(&mut r);
        q[i] = a[i] + rn(&mut r);
        s[i] = a[i] + s_s * rn(&mut r);
        d[i] = a[i] + 0.5 * q[i] + rn(&mut r);
        y[i] = d[i] + delta * a[i] + x[(i, 0)] + rn(&mut r);
    }
    (y, d, s, q, a, x)
}

#[test]
fn proxy_iv_examples() {
    let n = 5000;
    let ols = LearnerSpec::Ols;
    let plan = make_folds(n, 5, 0).unwrap();
    let opts = DmlOptions::default();

    for delta in [0.0, 1.0] {
        let (y, d, s, q, _, x) = proxy_sem(n, delta, 1.0, 4);
        let r = proxy_linear_iv(&y, &d, &s, &q, &x, &ols, &plan, opts).unwrap();
        assert!((r.theta - 1.0).abs() < 3.0 * r.se, "delta {delta}: {} ± {}", r.theta, r.se);
    }

    // S = A exactly: agrees with OLS that controls for A.
    let (y, d, s, q, a, x) = proxy_sem(n, 1.0, 0.0, 5);
    let r = proxy_linear_iv(&y, &d, &s, &q, &x, &ols, &plan, opts).unwrap();
    let design = DMatrix::from_fn(n, 3, |i, j| [d[i], a[i], x[(i, 0)]][j]);
    let fit = ols_fit(&with_intercept(&design), &y, None).unwrap();
    assert!((r.theta - fit.coefficients[1]).abs() < 2.0 * r.se);

    // Q carries no information about S beyond D.
    let mut rr = rng::stream(6, "test", 0);
    let noise: Vec<f64> = (0..n).map(|_| rr.random::<f64>()).collect();
    let (y, d, s, _, _, x) = proxy_sem(n, 1.0, 1.0, 7);
    assert!(matches!(proxy_linear_iv(&y, &d, &s, &noise, &x, &ols, &plan, opts), Err(Error::WeakInstrument(_))));
}

/// `H = D/0.5 − (1 − D)/0.5` for a fair coin, with covariates unrelated to `D`.
fn balance_null(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>, DMatrix<f64>) {
    let mut r = rng::stream(seed, "test", 0);
    let d: Vec<f64> = (0..n).map(|_| (r.random::<f64>() < 0.5) as u8 as f64).collect();
    let h = d.iter().map(|v| v / 0.5 - (1.0 - v) / 0.5).collect();
    let w = DMatrix::from_fn(n, 3, |_, _| rn(&mut r));
    (h, d, w)
}

#[test]
fn balance_examples() {
    let (h, d, w) = balance_null(500, 1);
    let rep = balance_check(&h, &DMatrix::from_column_slice(500, 1, &d)).unwrap();
    assert!(rep.p_value < 1e-12);
    assert!(rep.r2 > 0.99);
    let constant = DMatrix::from_element(500, 2, 3.0);
    let rep = balance_check(&h, &constant).unwrap();
    assert!(rep.vacuous && rep.df == 0 && rep.p_value == 1.0);
    let rep = balance_check(&h, &w).unwrap();
    assert_eq!(rep.df, 3);
    assert_eq!(rep.t_stats.len(), 3);
    let mut bad = h.clone();
    bad[0] = f64::INFINITY;
    assert!(balance_check(&bad, &w).is_err());
}

#[test]
fn balance_null_size() {
    let reps = 2000;
    let rejections = (0..reps).filter(|rep| {
        let (h, _, w) = balance_null(1000, *rep);
        balance_check(&h, &w)
    }.unwrap().p_value < 0.05).count();
    let size = rejections as f64 / reps as f64;
    assert!((0.03..=0.07).contains(&size), "size {size}");
}

#[test]
fn balance_null_p_values_are_uniform() {
    let reps = 200;
    let mut p: Vec<f64> = (0..reps)
        .map(|rep| {
            let (h, _, w) = balance_null(300, 10_000 + rep);
            balance_check(&h, &w).unwrap().p_value
        })
        .collect();
    p.sort_by(f64::total_cmp);
    let ks = p
        .iter()
        .enumerate()
        .map(|(i, v)| ((i + 1) as f64 / reps as f64 - v).abs().max((v - i as f64 / reps as f64).abs()))
        .fold(0.0, f64::max);
    // 5% critical value of the one-sample Kolmogorov-Smirnov statistic.
    assert!(ks < 1.358 / (reps as f64).sqrt(), "ks {ks}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn proxy_conservation_and_oracle(
        p_a in 0.2f64..0.8,
        q0 in 0.05f64..0.35, q1 in 0.65f64..0.95,
        s0 in 0.05f64..0.35, s1 in 0.65f64..0.95,
        pd in proptest::array::uniform4(0.1f64..0.9),
        py in proptest::array::uniform8(0.02f64..0.98),
    ) {
        let sem = BinarySem {
            p_a,
            p_q: [q0, q1],
            p_s: [s0, s1],
            p_d: [[pd[0], pd[1]], [pd[2], pd[3]]],
            p_y: [[[py[0], py[1]], [py[2], py[3]]], [[py[4], py[5]], [py[6], py[7]]]],
        };
        let (t_y, t_s, marg) = sem.tables();
        let out = proxy_discrete(&t_y, &t_s, &marg).unwrap();
        for d in 0..2 {
            prop_assert!((out.p_do[0][d] + out.p_do[1][d] - 1.0).abs() < 1e-8);
            for y in 0..2 {
                prop_assert!((out.p_do[y][d] - sem.do_law(y, d)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sem_exactness_over_parameters(
        alpha in -2.0f64..2.0, delta in -2.0f64..2.0, gamma in 0.1f64..2.0,
        sigma_y in 0.2f64..2.0, sigma_d in 0.2f64..2.0,
    ) {
        let p = SemParams { alpha, delta, gamma, sigma_y, sigma_d };
        let pop = population(&p);
        let b = ovb_bound(pop.beta, pop.r2_y, pop.r2_d, pop.s).unwrap();
        prop_assert!((b.phi - p.phi().abs()).abs() < 1e-10);
        prop_assert!((pop.beta - alpha - p.phi()).abs() < 1e-10);
    }

    #[test]
    fn bound_is_monotone_and_nonnegative(ry in 0.0f64..0.99, rd in 0.0f64..0.98, s in 0.01f64..10.0, bump in 0.0f64..0.01) {
        let a = phi_bound(ry, rd, s).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!(phi_bound(ry, rd + bump, s).unwrap() >= a);
        prop_assert!(phi_bound(ry + bump, rd, s).unwrap() >= a);
        prop_assert!((a * a - ry * rd / (1.0 - rd) * s).abs() <= 1e-12 * (1.0 + a * a));
    }
}
