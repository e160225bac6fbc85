//! Training-run observations, learning curves, and corpus catalogs.
//!
//! Three tabular inputs feed the toolkit:
//!
//! * runs: one row per (run checkpoint, eval language) with per-language
//!   cumulative token counts and the observed loss;
//! * curves: one row per learning-curve point, grouped by
//!   `(regime_id, eval_language)`;
//! * catalog: unique-token counts per language.
//!
//! Runs are accepted as CSV (the two token maps are JSON objects inside a
//! cell) or JSONL. Token counts are `u64`, losses `f64`.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Language = String;

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Input encoding of a runs or curves file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Jsonl,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "jsonl" | "ndjson" => Ok(Format::Jsonl),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

impl Format {
    /// Guess from a file extension; anything that is not `.csv` is JSONL.
    pub fn from_path(path: &std::path::Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

/// Whether per-language token counts were logged by the trainer or
/// reconstructed afterwards from sampling weights and step counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenProvenance {
    #[default]
    Logged,
    Reconstructed,
}

impl TokenProvenance {
    fn is_logged(&self) -> bool {
        *self == TokenProvenance::Logged
    }
}

/// One observation: a checkpoint of a training run evaluated on one language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub n_params: u64,
    pub mixture_id: String,
    pub eval_language: Language,
    pub loss: f64,
    pub total_tokens: u64,
    pub sampling_weights: BTreeMap<Language, f64>,
    pub cumulative_tokens: BTreeMap<Language, u64>,
    #[serde(default, skip_serializing_if = "TokenProvenance::is_logged")]
    pub token_provenance: TokenProvenance,
}

impl RunRecord {
    /// Tokens seen for `language`; absent languages count as zero.
    pub fn tokens_of(&self, language: &str) -> u64 {
        self.cumulative_tokens.get(language).copied().unwrap_or(0)
    }

    /// Languages with a positive sampling weight.
    pub fn mixture_languages(&self) -> impl Iterator<Item = &Language> {
        self.sampling_weights
            .iter()
            .filter(|(_, w)| **w > 0.0)
            .map(|(l, _)| l)
    }

    pub fn mixture_size(&self) -> usize {
        self.mixture_languages().count()
    }

    pub fn contains_language(&self, language: &str) -> bool {
        self.sampling_weights
            .get(language)
            .is_some_and(|w| *w > 0.0)
    }

    /// Training compute under the 6·N·D convention.
    pub fn compute(&self) -> f64 {
        6.0 * self.n_params as f64 * self.total_tokens as f64
    }

    fn validate(&self, row: usize, config: &ValidationConfig) -> Result<()> {
        if self.run_id.is_empty() {
            return Err(Error::row(row, "run_id", "must not be empty"));
        }
        if self.n_params == 0 {
            return Err(Error::row(row, "n_params", "must be positive"));
        }
        if !(self.loss.is_finite() && self.loss > 0.0) {
            return Err(Error::row(row, "loss", format!("must be positive, got {}", self.loss)));
        }
        if self.sampling_weights.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::row(row, "sampling_weights", "weights must be nonnegative"));
        }
        let sum: f64 = self.sampling_weights.values().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::row(
                row,
                "sampling_weights",
                format!("weights sum to {sum}, expected 1"),
            ));
        }
        let token_sum = self
            .cumulative_tokens
            .values()
            .try_fold(0u64, |acc, v| acc.checked_add(*v))
            .ok_or_else(|| Error::row(row, "cumulative_tokens", "token sum overflows u64"))?;
        let diff = token_sum.abs_diff(self.total_tokens) as f64;
        if diff > config.token_slack_rel * self.total_tokens as f64 {
            return Err(Error::row(
                row,
                "cumulative_tokens",
                format!(
                    "per-language tokens sum to {token_sum}, total_tokens is {}",
                    self.total_tokens
                ),
            ));
        }
        Ok(())
    }
}

/// Tolerances applied when validating records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    /// Allowed relative gap between Σ cumulative_tokens and total_tokens.
    pub token_slack_rel: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            token_slack_rel: 1e-6,
        }
    }
}

/// A validated, ordered collection of run records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RunSet {
    records: Vec<RunRecord>,
}

impl RunSet {
    pub fn new(records: Vec<RunRecord>, config: &ValidationConfig) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            r.validate(i + 1, config)?;
        }
        Ok(Self { records })
    }

    /// Build from records already known to be valid (subsets of a validated set).
    pub(crate) fn from_validated(records: Vec<RunRecord>) -> Self {
        Self { records }
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn iter(&self) -> std::slice::Iter<'_, RunRecord> {
        self.records.iter()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn filter(&self, mut keep: impl FnMut(&RunRecord) -> bool) -> RunSet {
        RunSet::from_validated(self.records.iter().filter(|r| keep(r)).cloned().collect())
    }

    pub fn eval_languages(&self) -> Vec<Language> {
        let mut langs: Vec<Language> = self.records.iter().map(|r| r.eval_language.clone()).collect();
        langs.sort();
        langs.dedup();
        langs
    }

    pub fn into_records(self) -> Vec<RunRecord> {
        self.records
    }
}

impl<'a> IntoIterator for &'a RunSet {
    type Item = &'a RunRecord;
    type IntoIter = std::slice::Iter<'a, RunRecord>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

const RUN_COLUMNS: [&str; 8] = [
    "run_id",
    "n_params",
    "mixture_id",
    "eval_language",
    "loss",
    "total_tokens",
    "sampling_weights",
    "cumulative_tokens",
];

fn column_index(headers: &csv::StringRecord, required: &[&str]) -> Result<HashMap<String, usize>> {
    let index: HashMap<String, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();
    for col in required {
        if !index.contains_key(*col) {
            return Err(Error::row(0, col, "missing column in header"));
        }
    }
    Ok(index)
}

fn cell<'r>(rec: &'r csv::StringRecord, index: &HashMap<String, usize>, row: usize, field: &str) -> Result<&'r str> {
    index
        .get(field)
        .and_then(|i| rec.get(*i))
        .map(str::trim)
        .ok_or_else(|| Error::row(row, field, "missing value"))
}

fn parse_cell<T: FromStr>(rec: &csv::StringRecord, index: &HashMap<String, usize>, row: usize, field: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = cell(rec, index, row, field)?;
    raw.parse::<T>()
        .map_err(|e| Error::row(row, field, format!("cannot parse `{raw}`: {e}")))
}

/// Integer cells may be written in float notation (`2.8e12`) by upstream loggers.
fn parse_count(raw: &str, row: usize, field: &str) -> Result<u64> {
    if let Ok(v) = raw.parse::<u64>() {
        return Ok(v);
    }
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= u64::MAX as f64 => Ok(v as u64),
        _ => Err(Error::row(row, field, format!("expected a nonnegative integer, got `{raw}`"))),
    }
}

fn parse_runs_csv(source: impl Read, config: &ValidationConfig) -> Result<RunSet> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(source);
    let headers = reader.headers()?.clone();
    let index = column_index(&headers, &RUN_COLUMNS)?;
    let mut records = Vec::new();
    for (i, result) in reader.records().enumerate() {
        let row = i + 1;
        let rec = result.map_err(|e| Error::row(row, "*", e.to_string()))?;
        let weights: BTreeMap<Language, f64> = serde_json::from_str(cell(&rec, &index, row, "sampling_weights")?)
            .map_err(|e| Error::row(row, "sampling_weights", e.to_string()))?;
        let tokens: BTreeMap<Language, u64> = serde_json::from_str(cell(&rec, &index, row, "cumulative_tokens")?)
            .map_err(|e| Error::row(row, "cumulative_tokens", e.to_string()))?;
        let token_provenance = match index.get("token_provenance").and_then(|i| rec.get(*i)).map(str::trim) {
            None | Some("") => TokenProvenance::default(),
            Some(raw) => serde_json::from_value(serde_json::Value::String(raw.to_string()))
                .map_err(|e| Error::row(row, "token_provenance", e.to_string()))?,
        };
        let record = RunRecord {
            run_id: cell(&rec, &index, row, "run_id")?.to_string(),
            n_params: parse_count(cell(&rec, &index, row, "n_params")?, row, "n_params")?,
            mixture_id: cell(&rec, &index, row, "mixture_id")?.to_string(),
            eval_language: cell(&rec, &index, row, "eval_language")?.to_string(),
            loss: parse_cell(&rec, &index, row, "loss")?,
            total_tokens: parse_count(cell(&rec, &index, row, "total_tokens")?, row, "total_tokens")?,
            sampling_weights: weights,
            cumulative_tokens: tokens,
            token_provenance,
        };
        record.validate(row, config)?;
        records.push(record);
    }
    Ok(RunSet { records })
}

/// Name the first required key missing from a JSON object, so errors can
/// point at a field rather than at serde's message.
fn first_missing_key(value: &serde_json::Value) -> Option<&'static str> {
    let obj = value.as_object()?;
    RUN_COLUMNS.iter().copied().find(|k| !obj.contains_key(*k))
}

fn parse_runs_jsonl(source: impl Read, config: &ValidationConfig) -> Result<RunSet> {
    let mut text = String::new();
    let mut source = source;
    source
        .read_to_string(&mut text)
        .map_err(|e| Error::row(0, "*", format!("input is not valid UTF-8: {e}")))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::row(row, "*", e.to_string()))?;
        if !value.is_object() {
            return Err(Error::row(row, "*", "expected a JSON object"));
        }
        if let Some(key) = first_missing_key(&value) {
            return Err(Error::row(row, key, "missing key"));
        }
        let record: RunRecord = serde_json::from_value(value).map_err(|e| {
            let msg = e.to_string();
            let field = RUN_COLUMNS
                .iter()
                .copied()
                .find(|k| msg.contains(k))
                .unwrap_or("*");
            Error::row(row, field, msg)
        })?;
        record.validate(row, config)?;
        records.push(record);
    }
    Ok(RunSet { records })
}

/// Parse and validate a runs table. Row numbers in errors are 1-based data rows.
pub fn parse_runs(source: impl Read, format: Format, config: &ValidationConfig) -> Result<RunSet> {
    match format {
        Format::Csv => parse_runs_csv(source, config),
        Format::Jsonl => parse_runs_jsonl(source, config),
    }
}

pub fn write_runs(runs: &RunSet, sink: impl Write, format: Format) -> Result<()> {
    match format {
        Format::Jsonl => {
            let mut sink = sink;
            for r in runs {
                serde_json::to_writer(&mut sink, r)?;
                sink.write_all(b"\n")?;
            }
            sink.flush()?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(sink);
            let mut header: Vec<&str> = RUN_COLUMNS.to_vec();
            header.push("token_provenance");
            w.write_record(&header)?;
            for r in runs {
                let provenance = match r.token_provenance {
                    TokenProvenance::Logged => "logged",
                    TokenProvenance::Reconstructed => "reconstructed",
                };
                w.write_record([
                    r.run_id.clone(),
                    r.n_params.to_string(),
                    r.mixture_id.clone(),
                    r.eval_language.clone(),
                    format_float(r.loss),
                    r.total_tokens.to_string(),
                    serde_json::to_string(&r.sampling_weights)?,
                    serde_json::to_string(&r.cumulative_tokens)?,
                    provenance.to_string(),
                ])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Shortest decimal that round-trips.
pub(crate) fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// Unique-token counts per language.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusCatalog {
    pub unique_tokens: BTreeMap<Language, u64>,
}

impl CorpusCatalog {
    pub fn new(unique_tokens: BTreeMap<Language, u64>) -> Result<Self> {
        if let Some((lang, _)) = unique_tokens.iter().find(|(_, u)| **u == 0) {
            return Err(Error::invalid(format!("unique_tokens for `{lang}` must be positive")));
        }
        Ok(Self { unique_tokens })
    }

    pub fn get(&self, language: &str) -> Result<u64> {
        self.unique_tokens
            .get(language)
            .copied()
            .ok_or_else(|| Error::MissingCatalogEntry(language.to_string()))
    }
}

pub fn parse_catalog(source: impl Read) -> Result<CorpusCatalog> {
    let mut reader = csv::Reader::from_reader(source);
    let headers = reader.headers()?.clone();
    let index = column_index(&headers, &["language", "unique_tokens"])?;
    let mut map = BTreeMap::new();
    for (i, result) in reader.records().enumerate() {
        let row = i + 1;
        let rec = result.map_err(|e| Error::row(row, "*", e.to_string()))?;
        let lang = cell(&rec, &index, row, "language")?.to_string();
        let u = parse_count(cell(&rec, &index, row, "unique_tokens")?, row, "unique_tokens")?;
        if u == 0 {
            return Err(Error::row(row, "unique_tokens", "must be positive"));
        }
        if map.insert(lang.clone(), u).is_some() {
            return Err(Error::row(row, "language", format!("duplicate language `{lang}`")));
        }
    }
    Ok(CorpusCatalog { unique_tokens: map })
}

pub fn write_catalog(catalog: &CorpusCatalog, sink: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["language", "unique_tokens"])?;
    for (lang, u) in &catalog.unique_tokens {
        w.write_record([lang.as_str(), &u.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tokens: u64,
    pub loss: f64,
}

/// Loss as a function of tokens for one (training regime, eval language).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub regime_id: String,
    pub eval_language: Language,
    points: Vec<CurvePoint>,
}

impl LearningCurve {
    /// Points must be strictly increasing in tokens with finite positive losses.
    pub fn new(regime_id: impl Into<String>, eval_language: impl Into<Language>, points: Vec<CurvePoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("learning curve has no points"));
        }
        for (i, w) in points.windows(2).enumerate() {
            if w[1].tokens <= w[0].tokens {
                return Err(Error::invalid(format!(
                    "curve tokens must be strictly increasing (point {} has {} after {})",
                    i + 1,
                    w[1].tokens,
                    w[0].tokens
                )));
            }
        }
        if let Some(p) = points.iter().find(|p| !(p.loss.is_finite() && p.loss > 0.0)) {
            return Err(Error::invalid(format!("curve loss must be positive, got {}", p.loss)));
        }
        Ok(Self {
            regime_id: regime_id.into(),
            eval_language: eval_language.into(),
            points,
        })
    }

    pub fn from_pairs(regime_id: impl Into<String>, eval_language: impl Into<Language>, pairs: &[(u64, f64)]) -> Result<Self> {
        let points = pairs.iter().map(|&(tokens, loss)| CurvePoint { tokens, loss }).collect();
        Self::new(regime_id, eval_language, points)
    }

    pub fn points(&self) -> &[CurvePoint] {
        &self.points
    }

    pub fn first_tokens(&self) -> u64 {
        self.points[0].tokens
    }

    pub fn last_tokens(&self) -> u64 {
        self.points[self.points.len() - 1].tokens
    }

    /// Running minimum of the losses; a non-increasing copy of the curve.
    pub fn smoothed(&self) -> LearningCurve {
        let mut best = f64::INFINITY;
        let points = self
            .points
            .iter()
            .map(|p| {
                best = best.min(p.loss);
                CurvePoint { tokens: p.tokens, loss: best }
            })
            .collect();
        LearningCurve {
            regime_id: self.regime_id.clone(),
            eval_language: self.eval_language.clone(),
            points,
        }
    }

    /// Same curve with every token count multiplied by `factor`.
    pub fn scale_tokens(&self, factor: u64) -> Result<LearningCurve> {
        let points = self
            .points
            .iter()
            .map(|p| {
                p.tokens
                    .checked_mul(factor)
                    .map(|tokens| CurvePoint { tokens, loss: p.loss })
                    .ok_or_else(|| Error::invalid("token scaling overflows u64"))
            })
            .collect::<Result<Vec<_>>>()?;
        LearningCurve::new(self.regime_id.clone(), self.eval_language.clone(), points)
    }
}

const CURVE_COLUMNS: [&str; 4] = ["regime_id", "eval_language", "tokens", "loss"];

#[derive(Deserialize)]
struct CurveRow {
    regime_id: String,
    eval_language: String,
    tokens: serde_json::Value,
    loss: f64,
}

/// Parse a curves table (one point per row). Curves come back in order of
/// first appearance; points within a curve are sorted by tokens.
pub fn parse_curves(source: impl Read, format: Format) -> Result<Vec<LearningCurve>> {
    let mut rows: Vec<(usize, String, String, u64, f64)> = Vec::new();
    match format {
        Format::Csv => {
            let mut reader = csv::Reader::from_reader(source);
            let headers = reader.headers()?.clone();
            let index = column_index(&headers, &CURVE_COLUMNS)?;
            for (i, result) in reader.records().enumerate() {
                let row = i + 1;
                let rec = result.map_err(|e| Error::row(row, "*", e.to_string()))?;
                rows.push((
                    row,
                    cell(&rec, &index, row, "regime_id")?.to_string(),
                    cell(&rec, &index, row, "eval_language")?.to_string(),
                    parse_count(cell(&rec, &index, row, "tokens")?, row, "tokens")?,
                    parse_cell(&rec, &index, row, "loss")?,
                ));
            }
        }
        Format::Jsonl => {
            let mut text = String::new();
            let mut source = source;
            source
                .read_to_string(&mut text)
                .map_err(|e| Error::row(0, "*", format!("input is not valid UTF-8: {e}")))?;
            for (i, line) in text.lines().enumerate() {
                let row = i + 1;
                if line.trim().is_empty() {
                    continue;
                }
                let r: CurveRow = serde_json::from_str(line).map_err(|e| Error::row(row, "*", e.to_string()))?;
                let tokens = parse_count(&r.tokens.to_string(), row, "tokens")?;
                rows.push((row, r.regime_id, r.eval_language, tokens, r.loss));
            }
        }
    }

    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: HashMap<(String, String), Vec<(usize, CurvePoint)>> = HashMap::new();
    for (row, regime, lang, tokens, loss) in rows {
        if !(loss.is_finite() && loss > 0.0) {
            return Err(Error::row(row, "loss", format!("must be positive, got {loss}")));
        }
        let key = (regime, lang);
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Vec::new()
        });
        entry.push((row, CurvePoint { tokens, loss }));
    }
    order
        .into_iter()
        .map(|key| {
            let mut pts = groups.remove(&key).unwrap_or_default();
            pts.sort_by_key(|(_, p)| p.tokens);
            if let Some(w) = pts.windows(2).find(|w| w[0].1.tokens == w[1].1.tokens) {
                return Err(Error::row(
                    w[1].0,
                    "tokens",
                    format!("duplicate token count {} in curve {}/{}", w[1].1.tokens, key.0, key.1),
                ));
            }
            LearningCurve::new(key.0, key.1, pts.into_iter().map(|(_, p)| p).collect())
        })
        .collect()
}

pub fn write_curves<'a>(curves: impl IntoIterator<Item = &'a LearningCurve>, sink: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(CURVE_COLUMNS)?;
    for c in curves {
        for p in c.points() {
            w.write_record([
                c.regime_id.as_str(),
                c.eval_language.as_str(),
                &p.tokens.to_string(),
                &format_float(p.loss),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-run split of total tokens into target, transfer-set, and remainder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBreakdown {
    pub target: Language,
    pub d_target: u64,
    /// In transfer-set order.
    pub d_transfer: Vec<(Language, u64)>,
    pub d_other: u64,
    /// Mixture languages outside {target} ∪ transfer set; they pool into `d_other`.
    pub other_pool: Vec<Language>,
}

impl TokenBreakdown {
    pub fn total(&self) -> u64 {
        self.d_target + self.d_transfer.iter().map(|(_, d)| d).sum::<u64>() + self.d_other
    }
}

pub fn token_accounting(record: &RunRecord, target: &str, transfer_set: &[Language]) -> Result<TokenBreakdown> {
    if transfer_set.iter().any(|l| l == target) {
        return Err(Error::invalid(format!("target `{target}` must not be in its own transfer set")));
    }
    let d_target = record.tokens_of(target);
    let d_transfer: Vec<(Language, u64)> = transfer_set
        .iter()
        .map(|l| (l.clone(), record.tokens_of(l)))
        .collect();
    let accounted = d_transfer
        .iter()
        .try_fold(d_target, |acc, (_, d)| acc.checked_add(*d))
        .ok_or_else(|| Error::invalid("token counts overflow u64"))?;
    let d_other = record.total_tokens.checked_sub(accounted).ok_or_else(|| Error::NotEvaluable {
        run_id: record.run_id.clone(),
        message: format!(
            "target and transfer tokens ({accounted}) exceed total_tokens ({})",
            record.total_tokens
        ),
    })?;
    let named = |l: &str| l == target || transfer_set.iter().any(|t| t == l);
    let mut other_pool: Vec<Language> = record
        .sampling_weights
        .iter()
        .filter(|(_, w)| **w > 0.0)
        .map(|(l, _)| l)
        .chain(record.cumulative_tokens.iter().filter(|(_, d)| **d > 0).map(|(l, _)| l))
        .filter(|l| !named(l))
        .cloned()
        .collect();
    other_pool.sort();
    other_pool.dedup();
    Ok(TokenBreakdown {
        target: target.to_string(),
        d_target,
        d_transfer,
        d_other,
        other_pool,
    })
}

/// The `k` languages most co-sampled with `target`.
///
/// Exposure of a candidate language is the sum, over runs whose mixture
/// contains the target, of the candidate's tokens at that run's last
/// recorded checkpoint. Ties go to the lexicographically smaller code.
pub fn select_transfer_set(runs: &RunSet, target: &str, k: usize) -> Vec<Language> {
    if k == 0 {
        return Vec::new();
    }
    // Last checkpoint per run: records repeat across eval languages and steps.
    let mut final_checkpoint: BTreeMap<&str, &RunRecord> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.contains_language(target)) {
        final_checkpoint
            .entry(r.run_id.as_str())
            .and_modify(|best| {
                if r.total_tokens > best.total_tokens {
                    *best = r;
                }
            })
            .or_insert(r);
    }
    let mut exposure: BTreeMap<&str, u128> = BTreeMap::new();
    for r in final_checkpoint.values() {
        for (lang, d) in &r.cumulative_tokens {
            if lang != target && *d > 0 {
                *exposure.entry(lang.as_str()).or_default() += *d as u128;
            }
        }
    }
    let mut ranked: Vec<(&str, u128)> = exposure.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().take(k).map(|(l, _)| l.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(run_id: &str, weights: &[(&str, f64)], tokens: &[(&str, u64)]) -> RunRecord {
        RunRecord {
            run_id: run_id.into(),
            n_params: 1_000_000,
            mixture_id: "m".into(),
            eval_language: "fr".into(),
            loss: 2.0,
            total_tokens: tokens.iter().map(|(_, d)| d).sum(),
            sampling_weights: weights.iter().map(|(l, w)| (l.to_string(), *w)).collect(),
            cumulative_tokens: tokens.iter().map(|(l, d)| (l.to_string(), *d)).collect(),
            token_provenance: TokenProvenance::Logged,
        }
    }

    const HEADER: &str = "run_id,n_params,mixture_id,eval_language,loss,total_tokens,sampling_weights,cumulative_tokens\n";

    #[test]
    fn empty_csv_body_gives_empty_runset() {
        let runs = parse_runs(HEADER.as_bytes(), Format::Csv, &ValidationConfig::default()).unwrap();
        assert!(runs.is_empty());
        let runs = parse_runs("".as_bytes(), Format::Jsonl, &ValidationConfig::default()).unwrap();
        assert!(runs.is_empty());
    }

    #[test]
    fn one_bilingual_jsonl_row() {
        let line = r#"{"run_id":"r1","n_params":1000,"mixture_id":"bi","eval_language":"fr","loss":2.5,"total_tokens":100,"sampling_weights":{"en":0.5,"fr":0.5},"cumulative_tokens":{"en":50,"fr":50}}"#;
        let runs = parse_runs(line.as_bytes(), Format::Jsonl, &ValidationConfig::default()).unwrap();
        assert_eq!(runs.len(), 1);
        assert_eq!(runs.records()[0].mixture_size(), 2);
        assert_eq!(runs.records()[0].tokens_of("en"), 50);
    }

    #[test]
    fn weights_not_summing_to_one_are_rejected() {
        let line = r#"{"run_id":"r1","n_params":1000,"mixture_id":"bi","eval_language":"fr","loss":2.5,"total_tokens":100,"sampling_weights":{"en":0.4,"fr":0.4},"cumulative_tokens":{"en":50,"fr":50}}"#;
        let err = parse_runs(line.as_bytes(), Format::Jsonl, &ValidationConfig::default()).unwrap_err();
        match err {
            Error::Row { row, field, .. } => {
                assert_eq!(row, 1);
                assert_eq!(field, "sampling_weights");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_csv_row_names_row_and_field() {
        let body = format!(
            "{HEADER}r1,1000,m,fr,2.0,100,\"{{\"\"fr\"\":1.0}}\",\"{{\"\"fr\"\":100}}\"\nr2,abc,m,fr,2.0,100,\"{{\"\"fr\"\":1.0}}\",\"{{\"\"fr\"\":100}}\"\n"
        );
        let err = parse_runs(body.as_bytes(), Format::Csv, &ValidationConfig::default()).unwrap_err();
        match err {
            Error::Row { row, field, .. } => {
                assert_eq!(row, 2);
                assert_eq!(field, "n_params");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_jsonl_key_is_named() {
        let line = r#"{"run_id":"r1","n_params":1000,"mixture_id":"bi","eval_language":"fr","total_tokens":100,"sampling_weights":{"fr":1.0},"cumulative_tokens":{"fr":100}}"#;
        let err = parse_runs(line.as_bytes(), Format::Jsonl, &ValidationConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Row { ref field, .. } if field == "loss"), "{err}");
    }

    #[test]
    fn unknown_format_tag() {
        assert!(matches!("parquet".parse::<Format>(), Err(Error::UnknownFormat(_))));
    }

    #[test]
    fn token_slack_is_configurable() {
        let mut r = record("r", &[("fr", 1.0)], &[("fr", 1_000_000)]);
        r.total_tokens = 1_000_001;
        assert!(RunSet::new(vec![r.clone()], &ValidationConfig::default()).is_ok());
        r.total_tokens = 1_000_100;
        assert!(RunSet::new(vec![r.clone()], &ValidationConfig::default()).is_err());
        assert!(RunSet::new(vec![r], &ValidationConfig { token_slack_rel: 1e-3 }).is_ok());
    }

    #[test]
    fn monolingual_accounting() {
        let r = record("r", &[("fr", 1.0)], &[("fr", 100)]);
        let b = token_accounting(&r, "fr", &[]).unwrap();
        assert_eq!(b.d_target, 100);
        assert!(b.d_transfer.is_empty());
        assert_eq!(b.d_other, 0);
        assert!(b.other_pool.is_empty());
    }

    #[test]
    fn bilingual_accounting() {
        let r = record("r", &[("en", 0.5), ("fr", 0.5)], &[("en", 50), ("fr", 50)]);
        let b = token_accounting(&r, "fr", &["en".into()]).unwrap();
        assert_eq!(b.d_target, 50);
        assert_eq!(b.d_transfer, vec![("en".to_string(), 50)]);
        assert_eq!(b.d_other, 0);
    }

    #[test]
    fn unimax_accounting_identity() {
        let toks = [("hi", 70), ("en", 300), ("fr", 120), ("es", 110), ("sw", 40), ("de", 160)];
        let weights: Vec<(&str, f64)> = toks.iter().map(|(l, d)| (*l, *d as f64 / 800.0)).collect();
        let r = record("u", &weights, &toks);
        let ks: Vec<Language> = ["en", "fr", "es"].iter().map(|s| s.to_string()).collect();
        let b = token_accounting(&r, "hi", &ks).unwrap();
        assert_eq!(b.d_other, 800 - 70 - 300 - 120 - 110);
        assert_eq!(b.total(), r.total_tokens);
        assert_eq!(b.other_pool, vec!["de".to_string(), "sw".to_string()]);
    }

    #[test]
    fn target_in_transfer_set_is_an_error() {
        let r = record("r", &[("fr", 1.0)], &[("fr", 100)]);
        assert!(token_accounting(&r, "fr", &["fr".into()]).is_err());
    }

    #[test]
    fn transfer_set_selection() {
        // en co-occurs with hi for 60 tokens, fr and de for 40 each.
        let runs = RunSet::new(
            vec![
                record("a", &[("hi", 0.5), ("en", 0.5)], &[("hi", 60), ("en", 60)]),
                record("b", &[("hi", 0.5), ("fr", 0.5)], &[("hi", 40), ("fr", 40)]),
                record("c", &[("hi", 0.5), ("de", 0.5)], &[("hi", 40), ("de", 40)]),
                record("d", &[("en", 1.0)], &[("en", 1000)]),
            ],
            &ValidationConfig::default(),
        )
        .unwrap();
        assert_eq!(select_transfer_set(&runs, "hi", 2), vec!["en".to_string(), "de".to_string()]);
        assert!(select_transfer_set(&runs, "hi", 0).is_empty());
        assert_eq!(select_transfer_set(&runs, "hi", 10).len(), 3);
    }

    #[test]
    fn monolingual_target_has_no_transfer_candidates() {
        let runs = RunSet::new(vec![record("a", &[("sw", 1.0)], &[("sw", 10)])], &ValidationConfig::default()).unwrap();
        assert!(select_transfer_set(&runs, "sw", 3).is_empty());
    }

    #[test]
    fn curves_group_and_sort() {
        let body = "regime_id,eval_language,tokens,loss\nmono:fr,fr,100,2.0\nmono:fr,fr,10,3.0\nmono:en,en,10,2.5\n";
        let curves = parse_curves(body.as_bytes(), Format::Csv).unwrap();
        assert_eq!(curves.len(), 2);
        assert_eq!(curves[0].regime_id, "mono:fr");
        assert_eq!(curves[0].first_tokens(), 10);
        let dup = "regime_id,eval_language,tokens,loss\nx,fr,10,2.0\nx,fr,10,3.0\n";
        assert!(matches!(parse_curves(dup.as_bytes(), Format::Csv), Err(Error::Row { row: 2, .. })));
    }

    #[test]
    fn catalog_parse() {
        let cat = parse_catalog("language,unique_tokens\nen,1000\nfr,2.5e3\n".as_bytes()).unwrap();
        assert_eq!(cat.get("fr").unwrap(), 2500);
        assert!(matches!(cat.get("sw"), Err(Error::MissingCatalogEntry(_))));
        assert!(parse_catalog("language,unique_tokens\nen,0\n".as_bytes()).is_err());
    }
}
