//! Empirical transfer scores from learning curves.
//!
//! BTS compares how many tokens a 50/50 bilingual model needs to match a
//! monolingual model's loss; FAS averages the loss reduction on a target
//! while finetuning on a source. Pairs without a bilingual run get a forest
//! estimate from adaptation-gain and baseline-deviation features.
//!
//! Curves are interpolated piecewise-linearly in (ln tokens, loss). A segment
//! that starts at zero tokens is interpolated linearly in tokens instead.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{cross_validate, rf_train, CvReport, FeatureRow, ForestConfig};
use crate::run_data::{CurvePoint, Language, LearningCurve};

pub const TRANSFER_SCHEMA_VERSION: &str = "atlas-kit.transfer/1";

fn seg_coord(p0: &CurvePoint, x: f64) -> f64 {
    if p0.tokens == 0 {
        x
    } else {
        x.ln()
    }
}

fn seg_interp(p0: &CurvePoint, p1: &CurvePoint, x: f64) -> f64 {
    let (a, b) = (seg_coord(p0, p0.tokens as f64), seg_coord(p0, p1.tokens as f64));
    let f = (seg_coord(p0, x) - a) / (b - a);
    p0.loss + f * (p1.loss - p0.loss)
}

/// Interpolated loss at `tokens`, which must lie within the curve's range.
pub fn loss_at(curve: &LearningCurve, tokens: f64) -> Result<f64> {
    let pts = curve.points();
    let (first, last) = (curve.first_tokens() as f64, curve.last_tokens() as f64);
    if !(tokens >= first && tokens <= last) {
        return Err(Error::OutOfRange { tokens, first, last });
    }
    let i = pts.partition_point(|p| (p.tokens as f64) < tokens);
    if (pts[i].tokens as f64) == tokens {
        return Ok(pts[i].loss);
    }
    Ok(seg_interp(&pts[i - 1], &pts[i], tokens))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reach {
    Tokens(f64),
    NotReached,
}

/// Smallest token count at which the running-minimum curve is at or below
/// `target_loss`.
pub fn tokens_to_reach(curve: &LearningCurve, target_loss: f64) -> Reach {
    let smooth = curve.smoothed();
    let pts = smooth.points();
    let Some(i) = pts.iter().position(|p| p.loss <= target_loss) else {
        return Reach::NotReached;
    };
    if i == 0 || pts[i].loss == target_loss {
        return Reach::Tokens(pts[i].tokens as f64);
    }
    let (p0, p1) = (&pts[i - 1], &pts[i]);
    let f = (p0.loss - target_loss) / (p0.loss - p1.loss);
    let (a, b) = (seg_coord(p0, p0.tokens as f64), seg_coord(p0, p1.tokens as f64));
    let u = a + f * (b - a);
    Reach::Tokens(if p0.tokens == 0 { u } else { u.exp() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BtsOutcome {
    Score(f64),
    NotReached,
}

/// `−(d_bi − 2·d_mono)/d_mono`, where `d_bi` is the bilingual token count
/// reaching the monolingual loss at `d_mono`.
pub fn bts(mono: &LearningCurve, bilingual: &LearningCurve, d_mono: f64) -> Result<BtsOutcome> {
    if !(d_mono > 0.0) {
        return Err(Error::domain(format!("d_mono must be positive, got {d_mono}")));
    }
    let target = loss_at(mono, d_mono)?;
    Ok(match tokens_to_reach(bilingual, target) {
        Reach::Tokens(d_bi) => BtsOutcome::Score(bts_from_tokens(d_bi, d_mono)),
        Reach::NotReached => BtsOutcome::NotReached,
    })
}

pub fn bts_from_tokens(d_bi: f64, d_mono: f64) -> f64 {
    (2.0 * d_mono - d_bi) / d_mono
}

/// `(1/d_max)·∫₀^{d_max} (baseline − L(d)) dd` by the trapezoid rule on the
/// raw curve. The last partial segment is clipped linearly in tokens.
pub fn fas(baseline_loss: f64, curve: &LearningCurve, d_max: f64) -> Result<f64> {
    if !(d_max > 0.0) {
        return Err(Error::domain(format!("d_max must be positive, got {d_max}")));
    }
    if curve.first_tokens() != 0 || (curve.last_tokens() as f64) < d_max {
        return Err(Error::invalid(format!(
            "coverage gap: curve `{}` on `{}` spans [{}, {}] but FAS needs [0, {d_max}]",
            curve.regime_id,
            curve.eval_language,
            curve.first_tokens(),
            curve.last_tokens()
        )));
    }
    let mut area = 0.0;
    for w in curve.points().windows(2) {
        let (x0, x1) = (w[0].tokens as f64, w[1].tokens as f64);
        if x0 >= d_max {
            break;
        }
        let (end, l_end) = if x1 <= d_max {
            (x1, w[1].loss)
        } else {
            (d_max, w[0].loss + (d_max - x0) / (x1 - x0) * (w[1].loss - w[0].loss))
        };
        area += 0.5 * (w[0].loss + l_end) * (end - x0);
    }
    Ok(baseline_loss - area / d_max)
}

/// Training regime encoded in a curve's `regime_id`, with an optional
/// model size after `@`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Regime {
    Mono { lang: Language, n: Option<u64> },
    Bilingual { a: Language, b: Language, n: Option<u64> },
    Finetune { source: Language, n: Option<u64> },
    Scratch { lang: Language, n: Option<u64> },
    Unimax { n: Option<u64> },
}

impl Regime {
    pub fn n_params(&self) -> Option<u64> {
        match self {
            Regime::Mono { n, .. } | Regime::Bilingual { n, .. } | Regime::Finetune { n, .. } | Regime::Scratch { n, .. } | Regime::Unimax { n } => *n,
        }
    }
}

fn parse_size(s: &str) -> Result<u64> {
    let v: f64 = s.parse().map_err(|_| Error::invalid(format!("bad model size `{s}` in regime id")))?;
    if v >= 1.0 && v.fract() == 0.0 && v < u64::MAX as f64 {
        Ok(v as u64)
    } else {
        Err(Error::invalid(format!("bad model size `{s}` in regime id")))
    }
}

fn check_lang(l: &str, id: &str) -> Result<Language> {
    if l.is_empty() || l.contains([':', '+', '@', ',']) {
        Err(Error::invalid(format!("bad language in regime id `{id}`")))
    } else {
        Ok(l.to_string())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(id: &str) -> Result<Self> {
        let (body, n) = match id.rsplit_once('@') {
            Some((b, size)) => (b, Some(parse_size(size)?)),
            None => (id, None),
        };
        if body == "unimax" {
            return Ok(Regime::Unimax { n });
        }
        let (kind, rest) = body
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("unrecognized regime id `{id}`")))?;
        match kind {
            "mono" => Ok(Regime::Mono { lang: check_lang(rest, id)?, n }),
            "scratch" => Ok(Regime::Scratch { lang: check_lang(rest, id)?, n }),
            "finetune" => Ok(Regime::Finetune { source: check_lang(rest, id)?, n }),
            "bilingual" => {
                let (a, b) = rest
                    .split_once('+')
                    .ok_or_else(|| Error::invalid(format!("bilingual regime `{id}` needs two languages joined by `+`")))?;
                let (a, b) = (check_lang(a, id)?, check_lang(b, id)?);
                if a == b {
                    return Err(Error::invalid(format!("bilingual regime `{id}` repeats a language")));
                }
                Ok(Regime::Bilingual { a, b, n })
            }
            _ => Err(Error::invalid(format!("unrecognized regime id `{id}`"))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Mono { lang, .. } => write!(f, "mono:{lang}")?,
            Regime::Bilingual { a, b, .. } => write!(f, "bilingual:{a}+{b}")?,
            Regime::Finetune { source, .. } => write!(f, "finetune:{source}")?,
            Regime::Scratch { lang, .. } => write!(f, "scratch:{lang}")?,
            Regime::Unimax { .. } => write!(f, "unimax")?,
        }
        match self.n_params() {
            Some(n) => write!(f, "@{n}"),
            None => Ok(()),
        }
    }
}

/// Learning curves indexed by (regime, eval language).
#[derive(Debug, Clone, Default)]
pub struct CurveBank {
    curves: BTreeMap<(Regime, Language), LearningCurve>,
}

impl CurveBank {
    pub fn new(curves: Vec<LearningCurve>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for c in curves {
            let regime: Regime = c.regime_id.parse()?;
            let key = (regime, c.eval_language.clone());
            if map.contains_key(&key) {
                return Err(Error::invalid(format!(
                    "duplicate curve for regime `{}` on `{}`",
                    c.regime_id, c.eval_language
                )));
            }
            map.insert(key, c);
        }
        Ok(Self { curves: map })
    }

    pub fn get(&self, regime: &Regime, eval_language: &str) -> Option<&LearningCurve> {
        self.curves.get(&(regime.clone(), eval_language.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Regime, &LearningCurve)> {
        self.curves.iter().map(|((r, _), c)| (r, c))
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    /// Languages with a finetuning curve evaluated on themselves.
    pub fn finetune_languages(&self, n: Option<u64>) -> Vec<Language> {
        self.curves
            .keys()
            .filter_map(|(r, l)| match r {
                Regime::Finetune { source, n: rn } if source == l && *rn == n => Some(l.clone()),
                _ => None,
            })
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    fn require(&self, regime: Regime, eval_language: &str) -> Result<&LearningCurve> {
        self.get(&regime, eval_language)
            .ok_or_else(|| Error::invalid(format!("curve bank has no `{regime}` curve evaluated on `{eval_language}`")))
    }
}

/// `L^unimax_l`: the final loss of each `unimax` curve at the given size.
pub fn baselines_from_bank(bank: &CurveBank, n: Option<u64>) -> BTreeMap<Language, f64> {
    bank.iter()
        .filter(|(r, _)| **r == Regime::Unimax { n })
        .map(|(_, c)| (c.eval_language.clone(), c.points()[c.points().len() - 1].loss))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub source: Language,
    pub target: Language,
    pub reason: String,
}

/// BTS for every (source, target) with both a bilingual curve on the target
/// and a monolingual target curve of the same size.
pub fn measured_bts(bank: &CurveBank, d_mono: f64) -> Result<(BTreeMap<(Language, Language), f64>, Vec<SkippedPair>)> {
    let mut scores = BTreeMap::new();
    let mut skipped = Vec::new();
    for (regime, curve) in bank.iter() {
        let Regime::Bilingual { a, b, n } = regime else { continue };
        let target = &curve.eval_language;
        let source = if target == a {
            b
        } else if target == b {
            a
        } else {
            continue;
        };
        let Some(mono) = bank.get(&Regime::Mono { lang: target.clone(), n: *n }, target) else {
            skipped.push(SkippedPair {
                source: source.clone(),
                target: target.clone(),
                reason: "no monolingual curve".into(),
            });
            continue;
        };
        match bts(mono, curve, d_mono)? {
            BtsOutcome::Score(s) => {
                scores.insert((source.clone(), target.clone()), s);
            }
            BtsOutcome::NotReached => skipped.push(SkippedPair {
                source: source.clone(),
                target: target.clone(),
                reason: "bilingual curve never reaches the monolingual loss".into(),
            }),
        }
    }
    Ok((scores, skipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferFeatures {
    pub gain_source: f64,
    pub gain_target: f64,
    pub gain_diff: f64,
    pub deviation: f64,
}

impl TransferFeatures {
    pub fn row(&self) -> FeatureRow {
        [self.gain_source, self.gain_target, self.gain_diff, self.deviation]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    /// Raw adaptation gains `g_l`.
    pub gains: BTreeMap<Language, f64>,
    /// Raw baseline deviations `δ_{s→t}`, keyed by (source, target).
    pub deviations: BTreeMap<(Language, Language), f64>,
    pub pairs: Vec<(Language, Language)>,
    pub features: Vec<TransferFeatures>,
}

fn z_scores(values: &[f64], group: &str) -> Result<Vec<f64>> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if !(sd > 0.0) {
        return Err(Error::ZeroVariance(format!("{group} have zero standard deviation")));
    }
    Ok(values.iter().map(|v| (v - mean) / sd).collect())
}

fn baseline_of<'a>(baselines: &'a BTreeMap<Language, f64>, lang: &str) -> Result<&'a f64> {
    baselines
        .get(lang)
        .ok_or_else(|| Error::invalid(format!("no baseline loss for `{lang}`")))
}

/// Features for every ordered pair of distinct languages.
///
/// `g_l` is the FAS of finetuning on `l` evaluated on `l`, z-scored across
/// languages. `δ_{s→t} = L_{s→t}(d_max) − L^unimax_t`, z-scored per target
/// across sources.
pub fn build_features(
    bank: &CurveBank,
    baselines: &BTreeMap<Language, f64>,
    languages: &[Language],
    d_max: f64,
    n: Option<u64>,
) -> Result<FeatureTable> {
    if languages.len() < 3 {
        return Err(Error::invalid("features need at least three languages"));
    }
    let finetune = |s: &Language| Regime::Finetune { source: s.clone(), n };
    let mut raw_gains = Vec::with_capacity(languages.len());
    for l in languages {
        raw_gains.push(fas(*baseline_of(baselines, l)?, bank.require(finetune(l), l)?, d_max)?);
    }
    let g = z_scores(&raw_gains, "adaptation gains")?;
    let mut deviations = BTreeMap::new();
    let mut dev_z: BTreeMap<(Language, Language), f64> = BTreeMap::new();
    for t in languages {
        let sources: Vec<&Language> = languages.iter().filter(|s| *s != t).collect();
        let base = *baseline_of(baselines, t)?;
        let mut raw = Vec::with_capacity(sources.len());
        for s in &sources {
            let d = loss_at(bank.require(finetune(s), t)?, d_max)? - base;
            deviations.insert(((*s).clone(), t.clone()), d);
            raw.push(d);
        }
        let z = z_scores(&raw, &format!("baseline deviations for target `{t}`"))?;
        for (s, z) in sources.into_iter().zip(z) {
            dev_z.insert((s.clone(), t.clone()), z);
        }
    }
    let idx: BTreeMap<&Language, usize> = languages.iter().enumerate().map(|(i, l)| (l, i)).collect();
    let mut pairs = Vec::new();
    let mut features = Vec::new();
    for s in languages {
        for t in languages {
            if s == t {
                continue;
            }
            let (gs, gt) = (g[idx[s]], g[idx[t]]);
            pairs.push((s.clone(), t.clone()));
            features.push(TransferFeatures {
                gain_source: gs,
                gain_target: gt,
                gain_diff: gs - gt,
                deviation: dev_z[&(s.clone(), t.clone())],
            });
        }
    }
    Ok(FeatureTable {
        gains: languages.iter().cloned().zip(raw_gains).collect(),
        deviations,
        pairs,
        features,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Measured,
    Estimated,
    NotApplicable,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Measured => "measured",
            Provenance::Estimated => "estimated",
            Provenance::NotApplicable => "not_applicable",
        }
    }
}

/// Source × target scores; row = source, column = target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub languages: Vec<Language>,
    pub scores: Vec<Vec<Option<f64>>>,
    pub provenance: Vec<Vec<Provenance>>,
}

impl TransferMatrix {
    pub fn get(&self, source: &str, target: &str) -> Option<(f64, Provenance)> {
        let i = self.languages.iter().position(|l| l == source)?;
        let j = self.languages.iter().position(|l| l == target)?;
        self.scores[i][j].map(|s| (s, self.provenance[i][j]))
    }

    pub fn write_csv(&self, sink: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header = vec!["source".to_string()];
        header.extend(self.languages.iter().cloned());
        w.write_record(&header)?;
        for (s, row) in self.languages.iter().zip(&self.scores) {
            let mut rec = vec![s.clone()];
            rec.extend(row.iter().map(|v| v.map(|v| format!("{v:?}")).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long-form rows for heat-map plotting.
    pub fn write_plot_csv(&self, sink: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["source", "target", "score", "provenance"])?;
        for (i, s) in self.languages.iter().enumerate() {
            for (j, t) in self.languages.iter().enumerate() {
                if let Some(v) = self.scores[i][j] {
                    w.write_record([s.as_str(), t.as_str(), &format!("{v:?}"), self.provenance[i][j].as_str()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn provenance_json(&self) -> serde_json::Value {
        serde_json::json!({
            "schema_version": TRANSFER_SCHEMA_VERSION,
            "languages": self.languages,
            "provenance": self.provenance,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MatrixBuild {
    pub matrix: TransferMatrix,
    pub features: Option<FeatureTable>,
    pub cv: Option<CvReport>,
}

/// Keep measured cells; fill the rest with forest predictions trained on the
/// measured pairs. Cross-validation runs when at least `cv_folds` pairs are
/// measured.
pub fn transfer_matrix(
    languages: &[Language],
    measured: &BTreeMap<(Language, Language), f64>,
    bank: &CurveBank,
    baselines: &BTreeMap<Language, f64>,
    d_max: f64,
    n: Option<u64>,
    forest: &ForestConfig,
    cv_folds: usize,
) -> Result<MatrixBuild> {
    let idx: BTreeMap<&Language, usize> = languages.iter().enumerate().map(|(i, l)| (l, i)).collect();
    if idx.len() != languages.len() {
        return Err(Error::invalid("language list has duplicates"));
    }
    if measured.is_empty() {
        return Err(Error::invalid("no measured pairs to train on"));
    }
    let k = languages.len();
    let mut scores = vec![vec![None; k]; k];
    let mut provenance = vec![vec![Provenance::Estimated; k]; k];
    for (i, row) in provenance.iter_mut().enumerate() {
        row[i] = Provenance::NotApplicable;
    }
    for ((s, t), &v) in measured {
        let (Some(&i), Some(&j)) = (idx.get(s), idx.get(t)) else {
            return Err(Error::invalid(format!("measured pair ({s}, {t}) is outside the language grid")));
        };
        if i == j {
            return Err(Error::invalid(format!("measured pair ({s}, {t}) is on the diagonal")));
        }
        scores[i][j] = Some(v);
        provenance[i][j] = Provenance::Measured;
    }
    let missing = k * (k - 1) - measured.len();
    let (mut features, mut cv) = (None, None);
    if missing > 0 {
        let table = build_features(bank, baselines, languages, d_max, n)?;
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (pair, f) in table.pairs.iter().zip(&table.features) {
            if let Some(&v) = measured.get(pair) {
                x.push(f.row());
                y.push(v);
            }
        }
        let model = rf_train(&x, &y, forest)?;
        for (pair, f) in table.pairs.iter().zip(&table.features) {
            let (i, j) = (idx[&pair.0], idx[&pair.1]);
            if scores[i][j].is_none() {
                scores[i][j] = Some(model.predict(&f.row()));
            }
        }
        if cv_folds >= 2 && y.len() >= cv_folds {
            cv = Some(cross_validate(&x, &y, cv_folds, forest)?);
        }
        features = Some(table);
    }
    Ok(MatrixBuild {
        matrix: TransferMatrix {
            languages: languages.to_vec(),
            scores,
            provenance,
        },
        features,
        cv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn curve(pairs: &[(u64, f64)]) -> LearningCurve {
        LearningCurve::from_pairs("mono:en", "en", pairs).unwrap()
    }

    #[test]
    fn loss_at_examples() {
        let c = curve(&[(10, 2.0), (1000, 1.0), (5000, 0.9)]);
        assert_eq!(loss_at(&c, 1000.0).unwrap(), 1.0);
        assert!((loss_at(&c, 100.0).unwrap() - 1.5).abs() < 1e-12);
        assert!(matches!(loss_at(&c, 5.0), Err(Error::OutOfRange { .. })));
        assert!(loss_at(&c, 5001.0).is_err());
    }

    #[test]
    fn zero_start_segment_is_linear() {
        let c = curve(&[(0, 3.0), (100, 2.0)]);
        assert!((loss_at(&c, 25.0).unwrap() - 2.75).abs() < 1e-12);
        match tokens_to_reach(&c, 2.5) {
            Reach::Tokens(t) => assert!((t - 50.0).abs() < 1e-9),
            r => panic!("{r:?}"),
        }
    }

    #[test]
    fn tokens_to_reach_examples() {
        let c = curve(&[(10, 2.0), (100, 1.0)]);
        match tokens_to_reach(&c, 1.5) {
            Reach::Tokens(t) => assert!((t - 10f64.powf(1.5)).abs() < 1e-9),
            r => panic!("{r:?}"),
        }
        assert_eq!(tokens_to_reach(&c, 1.0), Reach::Tokens(100.0));
        assert_eq!(tokens_to_reach(&c, 0.5), Reach::NotReached);
        assert_eq!(tokens_to_reach(&c, 3.0), Reach::Tokens(10.0));
    }

    #[test]
    fn reach_uses_running_minimum() {
        let c = curve(&[(10, 2.0), (100, 1.0), (1000, 1.4), (10000, 0.8)]);
        // The bump at 1000 cannot delay reaching 1.0.
        assert_eq!(tokens_to_reach(&c, 1.0), Reach::Tokens(100.0));
    }

    #[test]
    fn bts_examples() {
        let d = 42e9 as u64;
        let mono = curve(&[(d / 2, 3.0), (d, 2.0), (4 * d, 1.5)]);
        let bi_at = |m: u64| LearningCurve::from_pairs("bilingual:en+fr", "en", &[(d / 2, 3.5), (m, 2.0), (8 * d, 1.0)]).unwrap();
        let score = |b: &LearningCurve| match bts(&mono, b, d as f64).unwrap() {
            BtsOutcome::Score(s) => s,
            o => panic!("{o:?}"),
        };
        assert_eq!(score(&bi_at(2 * d)), 0.0);
        assert_eq!(score(&bi_at(3 * d / 2)), 0.5);
        assert_eq!(score(&bi_at(3 * d)), -1.0);
        let never = LearningCurve::from_pairs("bilingual:en+fr", "en", &[(d, 2.5), (8 * d, 2.1)]).unwrap();
        assert_eq!(bts(&mono, &never, d as f64).unwrap(), BtsOutcome::NotReached);
    }

    #[test]
    fn fas_examples() {
        let flat = curve(&[(0, 2.0), (100, 2.0)]);
        assert_eq!(fas(2.0, &flat, 100.0).unwrap(), 0.0);
        let drop = curve(&[(0, 2.0), (100, 1.4)]);
        assert!((fas(2.0, &drop, 100.0).unwrap() - 0.3).abs() < 1e-12);
        let above = curve(&[(0, 2.5), (50, 2.2), (100, 2.1)]);
        assert!(fas(2.0, &above, 100.0).unwrap() < 0.0);
        // Clipping halfway through the drop: mean of 2.0..1.7 over [0, 50].
        assert!((fas(2.0, &drop, 50.0).unwrap() - 0.15).abs() < 1e-12);
        let late = curve(&[(10, 2.0), (100, 1.0)]);
        assert!(fas(2.0, &late, 100.0).is_err());
        assert!(fas(2.0, &drop, 200.0).is_err());
    }

    #[test]
    fn regime_ids_round_trip() {
        for id in ["mono:en", "bilingual:en+fr@2000000000", "finetune:sw", "scratch:hi@100", "unimax", "unimax@7"] {
            assert_eq!(id.parse::<Regime>().unwrap().to_string(), id);
        }
        assert_eq!("mono:en@2e9".parse::<Regime>().unwrap().to_string(), "mono:en@2000000000");
        for bad in ["mono", "duo:en", "bilingual:en", "bilingual:en+en", "mono:", "mono:en@x", "mono:en@0.5"] {
            assert!(bad.parse::<Regime>().is_err(), "{bad}");
        }
    }

    fn ft(source: &str, target: &str, end: f64) -> LearningCurve {
        LearningCurve::from_pairs(format!("finetune:{source}"), target, &[(0, 3.0), (50, 0.5 * (3.0 + end)), (100, end)]).unwrap()
    }

    fn bank3() -> (CurveBank, BTreeMap<Language, f64>, Vec<Language>) {
        let langs: Vec<Language> = ["de", "en", "fr"].iter().map(|s| s.to_string()).collect();
        // End losses for (source, target); self pairs drive the gains.
        let ends = [
            ("de", "de", 2.0),
            ("de", "en", 2.9),
            ("de", "fr", 2.7),
            ("en", "de", 2.8),
            ("en", "en", 2.2),
            ("en", "fr", 2.6),
            ("fr", "de", 2.5),
            ("fr", "en", 3.1),
            ("fr", "fr", 2.5),
        ];
        let curves = ends.iter().map(|(s, t, e)| ft(s, t, *e)).collect();
        let base = langs.iter().map(|l| (l.clone(), 3.0)).collect();
        (CurveBank::new(curves).unwrap(), base, langs)
    }

    #[test]
    fn features_match_hand_computation() {
        let (bank, base, langs) = bank3();
        let t = build_features(&bank, &base, &langs, 100.0, None).unwrap();
        // Linear drops: FAS = (3 − end)/2.
        assert!((t.gains["de"] - 0.5).abs() < 1e-12);
        assert!((t.gains["en"] - 0.4).abs() < 1e-12);
        assert!((t.gains["fr"] - 0.25).abs() < 1e-12);
        let mean: f64 = (0.5 + 0.4 + 0.25) / 3.0;
        let sd = (((0.5 - mean).powi(2) + (0.4 - mean).powi(2) + (0.25 - mean).powi(2)) / 3.0).sqrt();
        let i = t.pairs.iter().position(|p| p.0 == "de" && p.1 == "fr").unwrap();
        let f = t.features[i];
        assert!((f.gain_source - (0.5 - mean) / sd).abs() < 1e-12);
        assert!((f.gain_target - (0.25 - mean) / sd).abs() < 1e-12);
        assert!((f.gain_diff - (f.gain_source - f.gain_target)).abs() < 1e-15);
        // Two sources per target: z-scores are ±1.
        assert!((f.deviation - 1.0).abs() < 1e-12);
        assert!((t.deviations[&("de".into(), "fr".into())] + 0.3).abs() < 1e-12);
        assert_eq!(t.pairs.len(), 6);
    }

    #[test]
    fn degenerate_deviation_group_is_named() {
        let (bank, base, langs) = bank3();
        let mut curves: Vec<LearningCurve> = bank.iter().map(|(_, c)| c.clone()).collect();
        for c in curves.iter_mut() {
            if c.eval_language == "en" && c.regime_id != "finetune:en" {
                *c = ft(&c.regime_id[9..], "en", 2.9);
            }
        }
        let err = build_features(&CurveBank::new(curves).unwrap(), &base, &langs, 100.0, None).unwrap_err();
        assert!(err.to_string().contains("target `en`"), "{err}");
    }

    #[test]
    fn matrix_all_measured_and_none_measured() {
        let (bank, base, langs) = bank3();
        let mut measured = BTreeMap::new();
        for s in &langs {
            for t in &langs {
                if s != t {
                    measured.insert((s.clone(), t.clone()), s.len() as f64 + t.as_bytes()[0] as f64 / 100.0);
                }
            }
        }
        let cfg = ForestConfig { n_trees: 20, ..Default::default() };
        let m = transfer_matrix(&langs, &measured, &bank, &base, 100.0, None, &cfg, 5).unwrap();
        for ((s, t), v) in &measured {
            assert_eq!(m.matrix.get(s, t), Some((*v, Provenance::Measured)));
        }
        assert_eq!(m.matrix.get("en", "en"), None);
        assert_eq!(m.matrix.provenance[1][1], Provenance::NotApplicable);
        assert!(transfer_matrix(&langs, &BTreeMap::new(), &bank, &base, 100.0, None, &cfg, 5).is_err());
    }

    #[test]
    fn matrix_fills_missing_cells() {
        let (bank, base, langs) = bank3();
        let measured: BTreeMap<_, _> = [(("de".to_string(), "en".to_string()), 0.2), (("en".to_string(), "fr".to_string()), -0.1)].into();
        let cfg = ForestConfig { n_trees: 20, ..Default::default() };
        let m = transfer_matrix(&langs, &measured, &bank, &base, 100.0, None, &cfg, 5).unwrap();
        let (v, p) = m.matrix.get("fr", "de").unwrap();
        assert_eq!(p, Provenance::Estimated);
        assert!((-0.1..=0.2).contains(&v));
        let mut out = Vec::new();
        m.matrix.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("source,de,en,fr\nde,,0.2,"));
    }

    proptest! {
        #[test]
        fn reach_inverts_loss_at(
            steps in prop::collection::vec((1u64..1000, 0.01f64..0.5), 2..8),
            frac in 0.0f64..1.0,
        ) {
            let mut t = 100u64;
            let mut l = 5.0;
            let mut pts = vec![(t, l)];
            for (dt, dl) in steps {
                t += dt;
                l -= dl;
                pts.push((t, l));
            }
            let c = curve(&pts);
            let d = c.first_tokens() as f64 + frac * (c.last_tokens() - c.first_tokens()) as f64;
            let target = loss_at(&c, d).unwrap();
            match tokens_to_reach(&c, target) {
                Reach::Tokens(x) => prop_assert!((x - d).abs() <= 1e-9 * d),
                Reach::NotReached => prop_assert!(false),
            }
        }

        #[test]
        fn bts_decreasing_in_bilingual_tokens(d_mono in 1.0f64..1e12, a in 0.1f64..5.0, b in 0.1f64..5.0) {
            prop_assume!(a != b);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(bts_from_tokens(lo * d_mono, d_mono) > bts_from_tokens(hi * d_mono, d_mono));
        }

        #[test]
        fn fas_shifts_with_baseline(base in 0.5f64..5.0, delta in -1.0f64..1.0, mid in 0.5f64..4.0) {
            let c = curve(&[(0, 3.0), (40, mid), (100, 1.0)]);
            let a = fas(base, &c, 80.0).unwrap();
            let b = fas(base + delta, &c, 80.0).unwrap();
            prop_assert!((b - a - delta).abs() < 1e-12);
        }
    }
}
