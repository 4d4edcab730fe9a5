use std::collections::BTreeMap;
use std::sync::Arc;

use approx::assert_abs_diff_eq;
use nalgebra::DMatrix;
use orthoml::learners::*;
use orthoml::rng;
use orthoml::Error;
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::stream(seed, "test", 0);
    DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut r))
}

fn col(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

fn leaf_of(t: &RegressionTree, x: &DMatrix<f64>, i: usize) -> usize {
    let mut at = 0;
    while let Node::Split { feature, threshold, left, right } = t.nodes[at] {
        at = if x[(i, feature)] <= threshold { left } else { right };
    }
    at
}

/// Remembers its training rows and returns the stored label for an exact
/// row match (zero otherwise).
struct Memorizer;

impl Learner for Memorizer {
    fn fit(&self, x: &DMatrix<f64>, y: &[f64], _w: Option<&[f64]>, _seed: u64) -> orthoml::Result<Box<dyn Predictor>> {
        let table: BTreeMap<u64, f64> = (0..x.nrows()).map(|i| (x[(i, 0)].to_bits(), y[i])).collect();
        Ok(Box::new(move |x: &DMatrix<f64>| (0..x.nrows()).map(|i| *table.get(&x[(i, 0)].to_bits()).unwrap_or(&0.0)).collect()))
    }
}

#[test]
fn fold_sizes() {
    let p = make_folds(10, 5, 1).unwrap();
    assert_eq!(p.fold_sizes(), vec![2; 5]);
    let p = make_folds(11, 5, 1).unwrap();
    let mut s = p.fold_sizes();
    s.sort_unstable();
    assert_eq!(s, vec![2, 2, 2, 2, 3]);
    let loo = make_folds(7, 7, 3).unwrap();
    assert_eq!(loo.fold_sizes(), vec![1; 7]);
    assert!(matches!(make_folds(5, 1, 0), Err(Error::BadFoldCount { .. })));
    assert!(matches!(make_folds(5, 6, 0), Err(Error::BadFoldCount { .. })));
    assert_eq!(make_folds(50, 5, 9).unwrap(), make_folds(50, 5, 9).unwrap());
}

#[test]
fn cross_fit_examples() {
    let x = col(&[0.0, 1.0, 2.0, 3.0]);
    let y = [1.0, 3.0, 5.0, 7.0];
    let plan = CrossFitPlan::from_assignment(vec![0, 0, 1, 1], 2).unwrap();
    let cf = cross_fit_predict(&LearnerSpec::Mean, &x, &y, &plan, None, 0).unwrap();
    assert_eq!(cf.predictions, vec![6.0, 6.0, 2.0, 2.0]);
    assert_eq!(cf.models.len(), 2);
    let cf = cross_fit_predict(&LearnerSpec::Zero, &x, &y, &plan, None, 0).unwrap();
    assert_eq!(cf.predictions, vec![0.0; 4]);
}

#[test]
fn memorizer_is_exposed_by_cross_fitting() {
    let n = 200;
    let x = gaussian(n, 1, 5);
    let y: Vec<f64> = gaussian(n, 1, 6).iter().cloned().collect();
    let plan = make_folds(n, 2, 7).unwrap();
    let oof = cross_fit_predict(&Memorizer, &x, &y, &plan, None, 0).unwrap();
    let insample = cross_fit_predict(&Memorizer, &x, &y, &CrossFitPlan::in_sample(n), None, 0).unwrap();
    let mse = |p: &[f64]| y.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
    assert_eq!(mse(&insample.predictions), 0.0);
    assert!(mse(&oof.predictions) > 0.5);
}

#[test]
fn fold_too_small_when_mask_empties_training() {
    let x = col(&[0.0, 1.0, 2.0, 3.0]);
    let plan = CrossFitPlan::from_assignment(vec![0, 0, 1, 1], 2).unwrap();
    let mask = [true, true, false, false];
    let r = cross_fit_masked(&LearnerSpec::Mean, &x, &[1.0; 4], &plan, None, Some(&mask), 0);
    assert!(r.is_err());
}

#[test]
fn tree_examples() {
    let x = col(&[1.0, 2.0, 3.0, 4.0]);
    let y = [0.0, 0.0, 1.0, 1.0];
    let t0 = tree_fit(&x, &y, 0, 1, None).unwrap();
    assert_eq!(t0.predict(&x), vec![0.5; 4]);
    let t1 = tree_fit(&x, &y, 1, 1, None).unwrap();
    match t1.nodes[0] {
        Node::Split { feature, threshold, .. } => {
            assert_eq!(feature, 0);
            assert_eq!(threshold, 2.5);
        }
        _ => panic!("expected a split"),
    }
    assert_eq!(t1.predict(&x), y.to_vec());
    let flat = tree_fit(&x, &[3.0; 4], 5, 1, None).unwrap();
    assert_eq!(flat.nodes.len(), 1);
}

#[test]
fn tree_split_matches_enumeration() {
    // Brute force over every midpoint of every feature; ties to the lower
    // feature and threshold.
    let x = gaussian(30, 3, 11);
    let y: Vec<f64> = (0..30).map(|i| (x[(i, 1)] > 0.3) as u8 as f64 + 0.1 * x[(i, 2)]).collect();
    let sse = |idx: &[usize]| {
        let m = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
        idx.iter().map(|&i| (y[i] - m).powi(2)).sum::<f64>()
    };
    let mut best = (f64::INFINITY, 0, 0.0);
    for f in 0..3 {
        let mut v: Vec<f64> = (0..30).map(|i| x[(i, f)]).collect();
        v.sort_by(f64::total_cmp);
        for w in v.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let (l, r): (Vec<usize>, Vec<usize>) = (0..30).partition(|&i| x[(i, f)] <= t);
            let s = sse(&l) + sse(&r);
            if s < best.0 - 1e-12 {
                best = (s, f, t);
            }
        }
    }
    let t = tree_fit(&x, &y, 1, 1, None).unwrap();
    match t.nodes[0] {
        Node::Split { feature, threshold, .. } => {
            assert_eq!(feature, best.1);
            assert_abs_diff_eq!(threshold, best.2, epsilon = 1e-12);
        }
        _ => panic!("expected a split"),
    }
}

#[test]
fn forest_examples() {
    let x = gaussian(40, 3, 2);
    let y: Vec<f64> = (0..40).map(|i| x[(i, 0)].sin() + x[(i, 1)]).collect();
    let tree = tree_fit(&x, &y, 4, 2, None).unwrap();
    let spec = ForestSpec { trees: 1, tree: TreeSpec { max_depth: 4, min_leaf: 2, mtry: None }, sample: SampleMode::Full };
    let f = forest_fit(&x, &y, spec, None, 1).unwrap();
    assert_eq!(f.predict(&x), tree.predict(&x));
    let f2 = forest_fit(&x, &y, ForestSpec { trees: 2, ..spec }, None, 1).unwrap();
    for (a, b) in f2.predict(&x).iter().zip(tree.predict(&x)) {
        assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
    }
    let forest = forest_fit(&x, &y, ForestSpec { trees: 25, ..ForestSpec::default() }, None, 3).unwrap();
    let probe = gaussian(50, 3, 4);
    let preds = forest.predict(&probe);
    for (i, p) in preds.iter().enumerate() {
        let per: Vec<f64> = forest.trees.iter().map(|t| t.predict_row(&probe, i)).collect();
        let lo = per.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = per.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo - 1e-12 <= *p && *p <= hi + 1e-12);
    }
}

#[test]
fn boosting_examples() {
    let x = col(&[1.0, 2.0, 3.0]);
    let y = [1.0, 2.0, 3.0];
    let constant = TreeSpec { max_depth: 0, min_leaf: 1, mtry: None };
    let b = boost_fit(&x, &y, BoostSpec { steps: 2, rate: 0.5, tree: constant }, None, 0).unwrap();
    for p in b.predict(&x) {
        assert_abs_diff_eq!(p, 1.5, epsilon = 1e-12);
    }
    let full = TreeSpec { max_depth: usize::MAX, min_leaf: 1, mtry: None };
    let b = boost_fit(&x, &y, BoostSpec { steps: 1, rate: 1.0, tree: full }, None, 0).unwrap();
    assert_eq!(b.predict(&x), y.to_vec());
    let b = boost_fit(&x, &y, BoostSpec { steps: 5, rate: 0.0, tree: full }, None, 0).unwrap();
    assert_eq!(b.predict(&x), vec![0.0; 3]);
}

#[test]
fn logistic_examples() {
    let x = DMatrix::zeros(4, 0);
    let f = logistic_fit(&x, &[1.0, 1.0, 1.0, 0.0], 0.01, None).unwrap();
    for p in f.predict(&x) {
        assert_abs_diff_eq!(p, 0.75, epsilon = 1e-9);
    }
    let f = logistic_fit(&x, &[1.0, 0.0, 1.0, 0.0], 0.01, None).unwrap();
    for p in f.predict(&x) {
        assert_abs_diff_eq!(p, 0.5, epsilon = 1e-12);
    }
    let x = col(&[-2.0, -1.0, 1.0, 2.0]);
    let f = logistic_fit(&x, &[0.0, 0.0, 1.0, 1.0], 0.01, None).unwrap();
    assert!(f.separation);
    assert!(f.predict(&x).iter().all(|p| (0.01..=0.99).contains(p)));
    assert!(logistic_fit(&x, &[1.0; 4], 0.01, None).is_err());
}

#[test]
fn learner_select_examples() {
    let x = gaussian(20, 1, 8);
    let y: Vec<f64> = (0..20).map(|i| 5.0 + x[(i, 0)]).collect();
    let plan = make_folds(20, 4, 1).unwrap();
    let one = learner_select(&[&LearnerSpec::Ols], &x, &y, &plan, 0).unwrap();
    assert_eq!(one.best, 0);
    let r = learner_select(&[&LearnerSpec::Zero, &LearnerSpec::Mean], &x, &y, &plan, 0).unwrap();
    assert_eq!(r.best, 1);
    let r = learner_select(&[&LearnerSpec::Mean, &LearnerSpec::Mean], &x, &y, &plan, 0).unwrap();
    assert_eq!(r.best, 0);
    assert_eq!(r.mspe[0], r.mspe[1]);
}

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in all_permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn exhaustive_importance(f: &dyn Fn(&[f64], &[f64]) -> f64, x1: &[f64], x2: &[f64], y: &[f64], permute_first: bool) -> f64 {
    let n = y.len();
    let mse = |a: &[f64], b: &[f64]| (0..n).map(|i| (y[i] - f(&a[i..=i], &b[i..=i])).powi(2)).sum::<f64>() / n as f64;
    let base = mse(x1, x2);
    let perms = all_permutations(n);
    let total: f64 = perms
        .iter()
        .map(|p| {
            let moved: Vec<f64> = p.iter().map(|&k| if permute_first { x1[k] } else { x2[k] }).collect();
            if permute_first { mse(&moved, x2) } else { mse(x1, &moved) }
        })
        .sum();
    total / perms.len() as f64 - base
}

#[test]
fn permutation_importance_examples() {
    let x = DMatrix::from_row_slice(4, 2, &[1.0, 5.0, 2.0, -1.0, 4.0, 0.0, 7.0, 2.0]);
    let y: Vec<f64> = (0..4).map(|i| x[(i, 0)]).collect();
    let model = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| m[(i, 0)]).collect::<Vec<f64>>();
    let imp = perm_importance(&model, &x, &y, 20_000, 3).unwrap();
    assert_eq!(imp[1], 0.0);
    let x1: Vec<f64> = y.clone();
    let mean = x1.iter().sum::<f64>() / 4.0;
    let var_n = x1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    let brute = exhaustive_importance(&|a, _| a[0], &x1, &x1, &y, true);
    assert_abs_diff_eq!(brute, 2.0 * var_n, epsilon = 1e-12);
    assert!((imp[0] - brute).abs() < 0.05 * brute, "{} vs {brute}", imp[0]);

    // Duplicated column: the averaging model loses a quarter as much.
    let dup = DMatrix::from_fn(4, 2, |i, _| x1[i]);
    let avg = |m: &DMatrix<f64>| (0..m.nrows()).map(|i| 0.5 * (m[(i, 0)] + m[(i, 1)])).collect::<Vec<f64>>();
    let brute_dup = exhaustive_importance(&|a, b| 0.5 * (a[0] + b[0]), &x1, &x1, &y, true);
    assert_abs_diff_eq!(brute_dup, brute / 4.0, epsilon = 1e-12);
    let imp_dup = perm_importance(&avg, &dup, &y, 20_000, 3).unwrap();
    for v in imp_dup {
        assert!(v <= imp[0]);
    }
}

#[test]
fn learner_spec_round_trip() {
    for s in ["zero", "mean", "ols", "ridge:lambda=2", "tree:depth=3,min_leaf=4", "boost:steps=50,rate=0.1,depth=1,min_leaf=20", "logistic:clip=0.05"] {
        let spec: LearnerSpec = s.parse().unwrap();
        let again: LearnerSpec = spec.to_string().parse().unwrap();
        assert_eq!(spec, again);
    }
    assert!("forest:leaves=3".parse::<LearnerSpec>().is_err());
    assert!("svm".parse::<LearnerSpec>().is_err());
    let f: LearnerSpec = "forest:trees=10,mtry=2,sample=0.5".parse().unwrap();
    assert_eq!(f.to_string().parse::<LearnerSpec>().unwrap(), f);
}

#[test]
fn fixed_learner_ignores_training_data() {
    let l = FixedLearner(Arc::new(|x: &DMatrix<f64>| vec![7.0; x.nrows()]));
    let x = gaussian(10, 2, 1);
    let cf = cross_fit_predict(&l, &x, &[0.0; 10], &make_folds(10, 2, 0).unwrap(), None, 0).unwrap();
    assert_eq!(cf.predictions, vec![7.0; 10]);
}

fn specs() -> Vec<LearnerSpec> {
    ["ols", "ridge:lambda=1", "lasso", "tree:depth=4,min_leaf=3", "forest:trees=8,mtry=2", "boost:steps=20,rate=0.2,depth=2"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn fitting_is_deterministic(seed in any::<u64>(), which in 0usize..6) {
        let x = gaussian(60, 3, seed);
        let y: Vec<f64> = (0..60).map(|i| x[(i, 0)] - x[(i, 1)].abs()).collect();
        let plan = make_folds(60, 3, seed).unwrap();
        let l = &specs()[which];
        let a = cross_fit_predict(l, &x, &y, &plan, None, seed).unwrap().predictions;
        let b = cross_fit_predict(l, &x, &y, &plan, None, seed).unwrap().predictions;
        prop_assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn corrupting_a_fold_only_moves_its_complement(seed in any::<u64>(), which in 0usize..6, k in 0usize..4) {
        // Fold k's labels feed only models that predict other folds, so
        // predictions for fold k itself must not move.
        let n = 60;
        let x = gaussian(n, 3, seed);
        let y: Vec<f64> = (0..n).map(|i| x[(i, 0)] + 0.5 * x[(i, 2)]).collect();
        let plan = make_folds(n, 4, seed ^ 1).unwrap();
        let mut bad = y.clone();
        let mut r = rng::stream(seed, "test", 1);
        for i in plan.test_indices(k) {
            bad[i] += r.random_range(-50.0..50.0);
        }
        let l = &specs()[which];
        let a = cross_fit_predict(l, &x, &y, &plan, None, seed).unwrap().predictions;
        let b = cross_fit_predict(l, &x, &bad, &plan, None, seed).unwrap().predictions;
        for i in plan.test_indices(k) {
            prop_assert_eq!(a[i].to_bits(), b[i].to_bits());
        }
    }

    #[test]
    fn tree_leaves_are_weighted_means(seed in any::<u64>(), depth in 1usize..6, min_leaf in 1usize..6, weighted in any::<bool>()) {
        let n = 50;
        let x = gaussian(n, 2, seed);
        let y: Vec<f64> = (0..n).map(|i| x[(i, 0)] * 2.0 + (x[(i, 1)] > 0.0) as u8 as f64).collect();
        let mut r = rng::stream(seed, "test", 2);
        let w: Vec<f64> = (0..n).map(|_| r.random_range(0.5..2.0)).collect();
        let wt = weighted.then_some(w.as_slice());
        let t = tree_fit(&x, &y, depth, min_leaf, wt).unwrap();
        prop_assert!(t.depth() <= depth);
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..n {
            groups.entry(leaf_of(&t, &x, i)).or_default().push(i);
        }
        for (leaf, rows) in groups {
            let (sw, swy) = rows.iter().fold((0.0, 0.0), |(a, b), &i| {
                let wi = wt.map_or(1.0, |w| w[i]);
                (a + wi, b + wi * y[i])
            });
            match t.nodes[leaf] {
                Node::Leaf { value, size } => {
                    prop_assert!((value - swy / sw).abs() <= 1e-10);
                    prop_assert_eq!(size, rows.len());
                    prop_assert!(size >= min_leaf);
                }
                _ => prop_assert!(false),
            }
        }
    }

    #[test]
    fn boosting_training_mse_non_increasing(seed in any::<u64>(), rate in 0.01f64..=1.0, depth in 1usize..4) {
        let n = 40;
        let x = gaussian(n, 2, seed);
        let y: Vec<f64> = (0..n).map(|i| x[(i, 0)].sin() + x[(i, 1)] * x[(i, 0)]).collect();
        let spec = BoostSpec { steps: 30, rate, tree: TreeSpec { max_depth: depth, min_leaf: 2, mtry: None } };
        let b = boost_fit(&x, &y, spec, None, seed).unwrap();
        let mut pred = vec![0.0; n];
        let mut last = y.iter().map(|v| v * v).sum::<f64>();
        for t in &b.trees {
            for (i, p) in pred.iter_mut().enumerate() {
                *p += rate * t.predict_row(&x, i);
            }
            let mse = y.iter().zip(&pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            prop_assert!(mse <= last * (1.0 + 1e-12) + 1e-12);
            last = mse;
        }
    }
}
