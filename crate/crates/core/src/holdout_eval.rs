//! Generalization suite: fit on one part of the runs, score R² on the rest.
//!
//! Five hold-out axes are supported: a seeded random fraction, the largest
//! model sizes (`n`), the most tokens (`d`), the most compute under
//! `C = 6·N·D` (`c`), and unseen mixtures (`m`).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitter::{fit, predict_runs, FitConfig};
use crate::laws::{LawParams, LawSpec, Variant};
use crate::run_data::{select_transfer_set, CorpusCatalog, Language, RunRecord, RunSet};

pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Random,
    N,
    D,
    C,
    M,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::Random, Axis::N, Axis::D, Axis::C, Axis::M];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Random => "random",
            Axis::N => "n",
            Axis::D => "d",
            Axis::C => "c",
            Axis::M => "m",
        }
    }

    pub fn column_label(self) -> &'static str {
        match self {
            Axis::Random => "R2",
            Axis::N => "R2(N)",
            Axis::D => "R2(D)",
            Axis::C => "R2(C)",
            Axis::M => "R2(M)",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::invalid(format!("unknown axis `{s}` (expected random, n, d, c, or m)")))
    }
}

/// How to carve a hold-out set along one axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub axis: Axis,
    /// Hold-out fraction for `random`, `d`, and `c`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    /// Model sizes held out on axis `n`; empty means the two largest.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub held_scales: Vec<u64>,
    /// Mixtures held out on axis `m`; empty means every mixture of three or
    /// more languages that is not a unimax mixture.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub held_mixtures: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSpec {
    /// The default split for an axis.
    pub fn for_axis(axis: Axis, seed: u64) -> Self {
        let fraction = matches!(axis, Axis::Random | Axis::D | Axis::C).then_some(DEFAULT_HOLDOUT_FRACTION);
        Self {
            axis,
            fraction,
            held_scales: Vec::new(),
            held_mixtures: Vec::new(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let needs_fraction = matches!(self.axis, Axis::Random | Axis::D | Axis::C);
        match (needs_fraction, self.fraction) {
            (true, Some(f)) if f > 0.0 && f < 1.0 => {}
            (true, Some(f)) => return Err(Error::invalid(format!("fraction must be in (0, 1), got {f}"))),
            (true, None) => return Err(Error::invalid(format!("axis {} needs a fraction", self.axis))),
            (false, Some(_)) => return Err(Error::invalid(format!("axis {} takes no fraction", self.axis))),
            (false, None) => {}
        }
        if self.axis != Axis::N && !self.held_scales.is_empty() {
            return Err(Error::invalid("held_scales only applies to axis n"));
        }
        if self.axis != Axis::M && !self.held_mixtures.is_empty() {
            return Err(Error::invalid("held_mixtures only applies to axis m"));
        }
        Ok(())
    }
}

pub fn is_unimax(mixture_id: &str) -> bool {
    mixture_id.to_ascii_lowercase().contains("unimax")
}

/// Indices of the runs whose `key` reaches the value at rank
/// `round(fraction·n)`; ties at the threshold all go to the hold-out side.
fn top_fraction(runs: &[RunRecord], fraction: f64, key: impl Fn(&RunRecord) -> f64) -> Vec<bool> {
    let n = runs.len();
    let n_test = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut values: Vec<f64> = runs.iter().map(&key).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    let threshold = values[n_test - 1];
    runs.iter().map(|r| key(r) >= threshold).collect()
}

/// Partition runs into (train, test). Both sides keep the input order.
pub fn split(runs: &RunSet, spec: &SplitSpec) -> Result<(RunSet, RunSet)> {
    spec.validate()?;
    if runs.is_empty() {
        return Err(Error::invalid("cannot split an empty run set"));
    }
    let records = runs.records();
    let held: Vec<bool> = match spec.axis {
        Axis::Random => {
            let n = records.len();
            let n_test = ((spec.fraction.unwrap_or(DEFAULT_HOLDOUT_FRACTION) * n as f64).round() as usize).min(n);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
            let mut held = vec![false; n];
            for i in &order[..n_test] {
                held[*i] = true;
            }
            held
        }
        Axis::D => top_fraction(records, spec.fraction.unwrap_or(DEFAULT_HOLDOUT_FRACTION), |r| r.total_tokens as f64),
        Axis::C => top_fraction(records, spec.fraction.unwrap_or(DEFAULT_HOLDOUT_FRACTION), RunRecord::compute),
        Axis::N => {
            let scales = if spec.held_scales.is_empty() {
                let mut sizes: Vec<u64> = records.iter().map(|r| r.n_params).collect();
                sizes.sort_unstable();
                sizes.dedup();
                sizes.into_iter().rev().take(2).collect()
            } else {
                spec.held_scales.clone()
            };
            records.iter().map(|r| scales.contains(&r.n_params)).collect()
        }
        Axis::M => {
            if spec.held_mixtures.is_empty() {
                records
                    .iter()
                    .map(|r| r.mixture_size() >= 3 && !is_unimax(&r.mixture_id))
                    .collect()
            } else {
                records.iter().map(|r| spec.held_mixtures.contains(&r.mixture_id)).collect()
            }
        }
    };
    let (test, train): (Vec<(RunRecord, bool)>, Vec<(RunRecord, bool)>) =
        records.iter().cloned().zip(held).partition(|(_, h)| *h);
    let axis = spec.axis.to_string();
    if test.is_empty() {
        return Err(Error::EmptySplit { axis, side: "test" });
    }
    if train.is_empty() {
        return Err(Error::EmptySplit { axis, side: "train" });
    }
    Ok((
        RunSet::from_validated(train.into_iter().map(|(r, _)| r).collect()),
        RunSet::from_validated(test.into_iter().map(|(r, _)| r).collect()),
    ))
}

/// Coefficient of determination; negative when worse than the mean.
pub fn r_squared(predicted: &[f64], observed: &[f64]) -> Result<f64> {
    if predicted.len() != observed.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} predictions vs {} observations",
            predicted.len(),
            observed.len()
        )));
    }
    if observed.is_empty() {
        return Err(Error::invalid("R² of an empty vector"));
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let ss_tot: f64 = observed.iter().map(|o| (o - mean).powi(2)).sum();
    if !(ss_tot > 0.0) {
        return Err(Error::ZeroVariance("observed values are constant".into()));
    }
    let ss_res: f64 = predicted.iter().zip(observed).map(|(p, o)| (o - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisResult {
    pub r2: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub params: LawParams,
}

/// One language's results across the requested axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageEval {
    pub language: Language,
    pub transfer_set: Vec<Language>,
    pub axes: BTreeMap<Axis, AxisResult>,
    #[serde(skip)]
    test_pairs: BTreeMap<Axis, (Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    /// Mean of per-language R² per axis.
    pub average: BTreeMap<Axis, f64>,
    /// R² over the concatenated hold-out predictions of all languages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooled: Option<BTreeMap<Axis, f64>>,
    pub languages: Vec<LanguageEval>,
}

/// Fit on train, score on test, for each split, for one target language.
///
/// Only runs evaluated on `spec.target_language` take part.
pub fn evaluate_suite(
    runs: &RunSet,
    spec: &LawSpec,
    catalog: &CorpusCatalog,
    fit_config: &FitConfig,
    split_specs: &[SplitSpec],
) -> Result<EvalReport> {
    let language = evaluate_language(runs, spec, catalog, fit_config, split_specs)?;
    Ok(assemble(spec.variant, vec![language], false))
}

fn evaluate_language(
    runs: &RunSet,
    spec: &LawSpec,
    catalog: &CorpusCatalog,
    fit_config: &FitConfig,
    split_specs: &[SplitSpec],
) -> Result<LanguageEval> {
    let lang_runs = runs.filter(|r| r.eval_language == spec.target_language);
    let results: Vec<(Axis, AxisResult, (Vec<f64>, Vec<f64>))> = split_specs
        .par_iter()
        .map(|s| {
            let with_axis = |e: Error| Error::Axis {
                axis: format!("{}/{}", spec.target_language, s.axis),
                source: Box::new(e),
            };
            let (train, test) = split(&lang_runs, s).map_err(with_axis)?;
            let fitted = fit(&train, spec, catalog, fit_config).map_err(with_axis)?;
            let predicted = predict_runs(&fitted.params, spec, &test, catalog).map_err(with_axis)?;
            let observed: Vec<f64> = test.iter().map(|r| r.loss).collect();
            let r2 = r_squared(&predicted, &observed).map_err(with_axis)?;
            Ok((
                s.axis,
                AxisResult {
                    r2,
                    n_train: train.len(),
                    n_test: test.len(),
                    params: fitted.params,
                },
                (predicted, observed),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut axes = BTreeMap::new();
    let mut test_pairs = BTreeMap::new();
    for (axis, result, pair) in results {
        axes.insert(axis, result);
        test_pairs.insert(axis, pair);
    }
    Ok(LanguageEval {
        language: spec.target_language.clone(),
        transfer_set: spec.transfer_set.clone(),
        axes,
        test_pairs,
    })
}

fn assemble(variant: Variant, languages: Vec<LanguageEval>, pooled: bool) -> EvalReport {
    let mut sums: BTreeMap<Axis, (f64, usize)> = BTreeMap::new();
    for l in &languages {
        for (axis, res) in &l.axes {
            let e = sums.entry(*axis).or_insert((0.0, 0));
            e.0 += res.r2;
            e.1 += 1;
        }
    }
    let average = sums.into_iter().map(|(a, (s, n))| (a, s / n as f64)).collect();
    let pooled = pooled.then(|| {
        let mut by_axis: BTreeMap<Axis, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for l in &languages {
            for (axis, (p, o)) in &l.test_pairs {
                let e = by_axis.entry(*axis).or_default();
                e.0.extend(p);
                e.1.extend(o);
            }
        }
        by_axis
            .into_iter()
            .filter_map(|(a, (p, o))| r_squared(&p, &o).ok().map(|r| (a, r)))
            .collect()
    });
    EvalReport {
        variant,
        average,
        pooled,
        languages,
    }
}

/// Run the suite for several target languages and average per axis.
///
/// For `atlas_full`, each language's transfer set is its `k` most
/// co-sampled languages.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_languages(
    runs: &RunSet,
    variant: Variant,
    languages: &[Language],
    k_transfer: usize,
    catalog: &CorpusCatalog,
    fit_config: &FitConfig,
    split_specs: &[SplitSpec],
    pooled: bool,
) -> Result<EvalReport> {
    let mut evals = Vec::with_capacity(languages.len());
    for lang in languages {
        let transfer = if variant.uses_transfer() {
            select_transfer_set(runs, lang, k_transfer)
        } else {
            Vec::new()
        };
        let spec = LawSpec::new(variant, lang.clone(), transfer)?;
        evals.push(evaluate_language(runs, &spec, catalog, fit_config, split_specs)?);
    }
    Ok(assemble(variant, evals, pooled))
}

/// Aligned text table: one averaged row per report, one column per axis.
pub fn format_table(reports: &[EvalReport]) -> String {
    let label = |v: Variant| match v {
        Variant::Bsl => "bsl (D_t)",
        Variant::AtlasTarget => "atlas (D_t only)",
        Variant::AtlasOther => "atlas (D_t+D_other)",
        Variant::AtlasFull => "atlas (D_t+D_other+transfer)",
    };
    let width = reports.iter().map(|r| label(r.variant).len()).max().unwrap_or(0).max("Scaling law".len());
    let mut out = format!("{:<width$}", "Scaling law");
    for axis in Axis::ALL {
        out.push_str(&format!("  {:>7}", axis.column_label()));
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{:<width$}", label(r.variant)));
        for axis in Axis::ALL {
            match r.average.get(&axis) {
                Some(v) => out.push_str(&format!("  {v:>7.2}")),
                None => out.push_str(&format!("  {:>7}", "--")),
            }
        }
        out.push('\n');
    }
    out
}
