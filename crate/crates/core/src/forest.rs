//! Random-forest regression for transfer-score estimation.
//!
//! Trees are grown to purity on bootstrap resamples, splitting on squared
//! error with every feature considered at every node. Each tree draws from
//! its own ChaCha stream, so training is parallel and still reproducible.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::holdout_eval::r_squared;

pub const N_FEATURES: usize = 4;
pub type FeatureRow = [f64; N_FEATURES];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub seed: u64,
    pub min_leaf: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 300,
            seed: 0,
            min_leaf: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &FeatureRow) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub n_trees: usize,
    pub seed: u64,
}

impl Forest {
    pub fn predict(&self, x: &FeatureRow) -> f64 {
        running_mean(self.trees.iter().map(|t| t.predict(x)))
    }

    pub fn predict_many(&self, xs: &[FeatureRow]) -> Vec<f64> {
        xs.iter().map(|x| self.predict(x)).collect()
    }
}

/// Incremental mean; exact when every value is equal.
fn running_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut mean = 0.0;
    for (k, v) in values.enumerate() {
        mean += (v - mean) / (k + 1) as f64;
    }
    mean
}

struct Builder<'a> {
    x: &'a [FeatureRow],
    y: &'a [f64],
    min_leaf: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        self.nodes.push(Node::Leaf(running_mean(idx.iter().map(|&i| self.y[i]))));
        self.nodes.len() - 1
    }

    fn best_split(&self, idx: &mut [usize]) -> Option<(usize, f64)> {
        let n = idx.len();
        let total: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let total_sq: f64 = idx.iter().map(|&i| self.y[i] * self.y[i]).sum();
        let mut best: Option<(f64, usize, f64)> = None;
        for f in 0..N_FEATURES {
            idx.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let (mut sum_l, mut sq_l) = (0.0, 0.0);
            for pos in 0..n - 1 {
                let yi = self.y[idx[pos]];
                sum_l += yi;
                sq_l += yi * yi;
                let n_l = pos + 1;
                let (lo, hi) = (self.x[idx[pos]][f], self.x[idx[pos + 1]][f]);
                if lo == hi || n_l < self.min_leaf || n - n_l < self.min_leaf {
                    continue;
                }
                let n_r = (n - n_l) as f64;
                let (sum_r, sq_r) = (total - sum_l, total_sq - sq_l);
                let sse = (sq_l - sum_l * sum_l / n_l as f64) + (sq_r - sum_r * sum_r / n_r);
                if best.is_none_or(|(b, _, _)| sse < b) {
                    let mut threshold = 0.5 * (lo + hi);
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some((sse, f, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }

    fn grow(&mut self, idx: &mut [usize]) -> usize {
        let first = self.y[idx[0]];
        if idx.len() < 2 * self.min_leaf || idx.iter().all(|&i| self.y[i] == first) {
            return self.leaf(idx);
        }
        let Some((feature, threshold)) = self.best_split(idx) else {
            return self.leaf(idx);
        };
        let (mut left, mut right): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf(f64::NAN));
        let l = self.grow(&mut left);
        let r = self.grow(&mut right);
        self.nodes[me] = Node::Split {
            feature,
            threshold,
            left: l,
            right: r,
        };
        me
    }
}

fn fit_tree(x: &[FeatureRow], y: &[f64], sample: &mut [usize], min_leaf: usize) -> Tree {
    let mut b = Builder {
        x,
        y,
        min_leaf,
        nodes: Vec::new(),
    };
    b.grow(sample);
    Tree { nodes: b.nodes }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Train a forest; tree `i` samples from ChaCha stream `i` of the seed.
pub fn rf_train(x: &[FeatureRow], y: &[f64], config: &ForestConfig) -> Result<Forest> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("{} feature rows but {} labels", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::TooFewObservations { required: 2, got: x.len() });
    }
    if config.n_trees == 0 || config.min_leaf == 0 {
        return Err(Error::invalid("n_trees and min_leaf must be positive"));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("features and labels must be finite"));
    }
    let n = x.len();
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(config.seed, t as u64);
            let mut sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            fit_tree(x, y, &mut sample, config.min_leaf)
        })
        .collect();
    Ok(Forest {
        trees,
        n_trees: config.n_trees,
        seed: config.seed,
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance("constant input to rank correlation".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::TooFewObservations { required: 2, got: a.len() });
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub r2: f64,
    pub spearman: f64,
    pub k: usize,
    pub n: usize,
    pub oof_predictions: Vec<f64>,
}

/// K-fold CV with folds taken as contiguous blocks of a seeded permutation.
/// Out-of-fold predictions are pooled before scoring.
pub fn cross_validate(x: &[FeatureRow], y: &[f64], k: usize, config: &ForestConfig) -> Result<CvReport> {
    let n = y.len();
    if k < 2 {
        return Err(Error::invalid("need at least 2 folds"));
    }
    if k > n {
        return Err(Error::TooFewObservations { required: k, got: n });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let mut oof = vec![0.0; n];
    let mut start = 0;
    for fold in 0..k {
        let size = n / k + usize::from(fold < n % k);
        let test = &perm[start..start + size];
        let train: Vec<usize> = perm[..start].iter().chain(&perm[start + size..]).copied().collect();
        start += size;
        let tx: Vec<FeatureRow> = train.iter().map(|&i| x[i]).collect();
        let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let fold_config = ForestConfig {
            seed: config.seed.wrapping_add(fold as u64 + 1),
            ..config.clone()
        };
        let forest = rf_train(&tx, &ty, &fold_config)?;
        for &i in test {
            oof[i] = forest.predict(&x[i]);
        }
    }
    Ok(CvReport {
        r2: r_squared(&oof, y)?,
        spearman: spearman(&oof, y)?,
        k,
        n,
        oof_predictions: oof,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn small() -> ForestConfig {
        ForestConfig { n_trees: 50, ..Default::default() }
    }

    #[test]
    fn constant_labels_predict_constant() {
        let x: Vec<FeatureRow> = (0..20).map(|i| [i as f64, 0.0, 1.0, -(i as f64)]).collect();
        let y = vec![0.7; 20];
        let f = rf_train(&x, &y, &small()).unwrap();
        for row in &x {
            assert_eq!(f.predict(row), 0.7);
        }
        assert!(f.trees.iter().all(|t| t.nodes().len() == 1));
    }

    #[test]
    fn step_function_is_learned() {
        let x: Vec<FeatureRow> = (0..100).map(|i| [((i * 37) % 100) as f64, (i % 7) as f64, 0.0, 0.0]).collect();
        let y: Vec<f64> = x.iter().map(|r| if r[0] < 30.0 { -1.0 } else if r[0] < 70.0 { 0.5 } else { 2.0 }).collect();
        let f = rf_train(&x, &y, &ForestConfig::default()).unwrap();
        let r2 = r_squared(&f.predict_many(&x), &y).unwrap();
        assert!(r2 >= 0.95, "r2 = {r2}");
    }

    #[test]
    fn same_seed_same_forest() {
        let x: Vec<FeatureRow> = (0..30).map(|i| [i as f64, (i * i % 11) as f64, 0.0, 1.0]).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0].sin() + r[1]).collect();
        assert_eq!(rf_train(&x, &y, &small()).unwrap(), rf_train(&x, &y, &small()).unwrap());
        let other = ForestConfig { seed: 9, ..small() };
        assert_ne!(rf_train(&x, &y, &small()).unwrap(), rf_train(&x, &y, &other).unwrap());
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(rf_train(&[[0.0; 4]], &[1.0], &small()), Err(Error::TooFewObservations { .. })));
    }

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let rev = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&a, &rev).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
        assert!(spearman(&a, &[1.0; 5]).is_err());
    }

    #[test]
    fn cv_identity_relation() {
        let x: Vec<FeatureRow> = (0..300).map(|i| [i as f64 / 300.0, ((i * 7919) % 300) as f64, 0.0, 0.0]).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0]).collect();
        let cv = cross_validate(&x, &y, 5, &small()).unwrap();
        assert!(cv.r2 > 0.99 && cv.spearman > 0.99, "{cv:?}");
    }

    #[test]
    fn cv_null_relation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<FeatureRow> = (0..200).map(|_| [noise.sample(&mut rng), noise.sample(&mut rng), 0.0, 0.0]).collect();
        let y: Vec<f64> = (0..200).map(|_| noise.sample(&mut rng)).collect();
        let cv = cross_validate(&x, &y, 5, &small()).unwrap();
        assert!(cv.r2 < 0.05, "{cv:?}");
        assert!(cv.spearman.abs() < 0.2, "{cv:?}");
    }

    #[test]
    fn cv_needs_enough_samples() {
        let x = vec![[0.0; 4]; 3];
        assert!(cross_validate(&x, &[1.0, 2.0, 3.0], 5, &small()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn predictions_stay_in_label_range(
            rows in prop::collection::vec((prop::array::uniform4(-5.0f64..5.0), -10.0f64..10.0), 2..40),
            probe in prop::array::uniform4(-8.0f64..8.0),
        ) {
            let x: Vec<FeatureRow> = rows.iter().map(|r| r.0).collect();
            let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let f = rf_train(&x, &y, &ForestConfig { n_trees: 10, ..Default::default() }).unwrap();
            let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = f.predict(&probe);
            prop_assert!(p >= lo - 1e-12 && p <= hi + 1e-12);
        }

        #[test]
        fn spearman_monotone_invariance(v in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..30)) {
            let a: Vec<f64> = v.iter().map(|p| p.0).collect();
            let b: Vec<f64> = v.iter().map(|p| p.1).collect();
            if let Ok(base) = spearman(&a, &b) {
                let a2: Vec<f64> = a.iter().map(|x| (x / 50.0).exp()).collect();
                let b2: Vec<f64> = b.iter().map(|x| x * 3.0 + 1.0).collect();
                prop_assert!((spearman(&a2, &b2).unwrap() - base).abs() < 1e-12);
            }
        }
    }
}
