//! Scaling-law variants: the Chinchilla-form baseline and the three
//! repetition/transfer-aware ablations.
//!
//! All variants share `L = E + A/N^α + B/D_eff^β`. They differ only in
//! how `D_eff` is assembled from a [`TokenBreakdown`]:
//!
//! | variant        | D_eff                                                  |
//! |----------------|--------------------------------------------------------|
//! | `bsl`          | D_t (raw, no repetition discount)                      |
//! | `atlas_target` | S(D_t; U_t)                                            |
//! | `atlas_other`  | S(D_t; U_t) + τ_other·S(D_other; U_other)              |
//! | `atlas_full`   | S(D_t; U_t) + Σ τ_i·S(D_i; U_i) + τ_other·S(D_other; U_other) |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::run_data::{CorpusCatalog, Language, RunRecord, TokenBreakdown};

pub const LAW_SCHEMA_VERSION: &str = "atlas-kit.law/1";

/// Upper bound on the N and D exponents.
pub const EXPONENT_MAX: f64 = 2.0;

/// Catalog key consulted for U_other when the pooled remainder has tokens
/// but no identifiable mixture languages.
pub const OTHER_POOL_KEY: &str = "other";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Bsl,
    AtlasTarget,
    AtlasOther,
    AtlasFull,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Bsl, Variant::AtlasTarget, Variant::AtlasOther, Variant::AtlasFull];

    pub fn uses_saturation(self) -> bool {
        self != Variant::Bsl
    }

    pub fn uses_other(self) -> bool {
        matches!(self, Variant::AtlasOther | Variant::AtlasFull)
    }

    pub fn uses_transfer(self) -> bool {
        self == Variant::AtlasFull
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Bsl => "bsl",
            Variant::AtlasTarget => "atlas_target",
            Variant::AtlasOther => "atlas_other",
            Variant::AtlasFull => "atlas_full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown law variant `{s}`")))
    }
}

/// Which law to fit, for which target language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LawSpec {
    pub variant: Variant,
    pub target_language: Language,
    #[serde(default)]
    pub transfer_set: Vec<Language>,
}

impl LawSpec {
    pub fn new(variant: Variant, target_language: impl Into<Language>, transfer_set: Vec<Language>) -> Result<Self> {
        let target_language = target_language.into();
        if !variant.uses_transfer() && !transfer_set.is_empty() {
            return Err(Error::invalid(format!("variant {variant} takes no transfer set")));
        }
        if transfer_set.contains(&target_language) {
            return Err(Error::invalid(format!("target `{target_language}` is in its own transfer set")));
        }
        let mut seen = transfer_set.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != transfer_set.len() {
            return Err(Error::invalid("transfer set has duplicate languages"));
        }
        Ok(Self {
            variant,
            target_language,
            transfer_set,
        })
    }

    /// Number of free parameters when fitting this spec.
    pub fn n_free_params(&self) -> usize {
        5 + usize::from(self.variant.uses_saturation())
            + usize::from(self.variant.uses_other())
            + self.transfer_set.len()
    }

    pub fn breakdown(&self, record: &RunRecord) -> Result<TokenBreakdown> {
        crate::run_data::token_accounting(record, &self.target_language, &self.transfer_set)
    }
}

/// Fitted parameters of one law variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawParams {
    pub variant: Variant,
    pub e_irreducible: f64,
    pub log_a: f64,
    pub log_b: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tau_transfer: BTreeMap<Language, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_other: Option<f64>,
}

impl LawParams {
    /// Check bounds and that exactly the variant's fields are present.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::domain(format!("{} law: {what}", self.variant)));
        if !(self.e_irreducible.is_finite() && self.e_irreducible >= 0.0) {
            return bad("E must be >= 0");
        }
        if !self.log_a.is_finite() || !self.log_b.is_finite() {
            return bad("log_a and log_b must be finite");
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v > 0.0 && v <= EXPONENT_MAX) {
                return bad(&format!("{name} must lie in (0, {EXPONENT_MAX}], got {v}"));
            }
        }
        match (self.variant.uses_saturation(), self.lambda) {
            (true, Some(l)) if l > 0.0 && l.is_finite() => {}
            (true, _) => return bad("lambda must be present and positive"),
            (false, Some(_)) => return bad("lambda is not a parameter of this variant"),
            (false, None) => {}
        }
        match (self.variant.uses_other(), self.tau_other) {
            (true, Some(t)) if (0.0..=1.0).contains(&t) => {}
            (true, _) => return bad("tau_other must be present and in [0, 1]"),
            (false, Some(_)) => return bad("tau_other is not a parameter of this variant"),
            (false, None) => {}
        }
        if !self.variant.uses_transfer() && !self.tau_transfer.is_empty() {
            return bad("tau_transfer is not a parameter of this variant");
        }
        if let Some((lang, t)) = self.tau_transfer.iter().find(|(_, t)| !(0.0..=1.0).contains(*t)) {
            return bad(&format!("tau for `{lang}` must be in [0, 1], got {t}"));
        }
        Ok(())
    }

    pub fn a(&self) -> f64 {
        self.log_a.exp()
    }

    pub fn b(&self) -> f64 {
        self.log_b.exp()
    }
}

/// Serialized form of a fitted law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawDocument {
    pub schema_version: String,
    pub spec: LawSpec,
    pub params: LawParams,
}

impl LawDocument {
    pub fn new(spec: LawSpec, params: LawParams) -> Self {
        Self {
            schema_version: LAW_SCHEMA_VERSION.to_string(),
            spec,
            params,
        }
    }
}

/// Repetition-discounted token count.
///
/// Identity up to one epoch (`d <= u`); beyond it, each further epoch is
/// worth exponentially less, saturating at `u·(1 + 1/λ)`.
pub fn saturation(d: f64, u: f64, lambda: f64) -> Result<f64> {
    if !(u > 0.0 && u.is_finite()) {
        return Err(Error::domain(format!("unique tokens must be positive, got {u}")));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::domain(format!("lambda must be positive, got {lambda}")));
    }
    if !(d >= 0.0) {
        return Err(Error::domain(format!("token count must be nonnegative, got {d}")));
    }
    Ok(saturate(d, u, lambda))
}

#[inline]
pub(crate) fn saturate(d: f64, u: f64, lambda: f64) -> f64 {
    if d <= u {
        d
    } else {
        u * (1.0 - (-lambda * (d / u - 1.0)).exp_m1() / lambda)
    }
}

fn u_other(breakdown: &TokenBreakdown, catalog: &CorpusCatalog) -> Result<f64> {
    if breakdown.other_pool.is_empty() {
        return catalog.get(OTHER_POOL_KEY).map(|u| u as f64);
    }
    breakdown
        .other_pool
        .iter()
        .map(|l| catalog.get(l).map(|u| u as f64))
        .sum()
}

/// Effective data exposure `D_eff` for the breakdown's target language.
///
/// `bsl` uses raw target tokens; the other variants discount repetition and
/// add weighted transfer and remainder terms as their parameters allow.
pub fn effective_data(breakdown: &TokenBreakdown, catalog: &CorpusCatalog, params: &LawParams) -> Result<f64> {
    let taus = params
        .variant
        .uses_transfer()
        .then(|| {
            breakdown
                .d_transfer
                .iter()
                .map(|(lang, _)| {
                    params
                        .tau_transfer
                        .get(lang)
                        .copied()
                        .ok_or_else(|| Error::invalid(format!("no tau for transfer language `{lang}`")))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .transpose()?
        .unwrap_or_default();
    let prepared = PreparedRun::from_breakdown(breakdown, 1.0, params.variant, catalog)?;
    Ok(prepared.effective_data(
        params.variant,
        params.lambda.unwrap_or(1.0),
        &taus,
        params.tau_other.unwrap_or(0.0),
    ))
}

/// Loss from the shared functional form.
pub fn predict_loss(params: &LawParams, n: f64, d_eff: f64) -> Result<f64> {
    if !(n > 0.0) {
        return Err(Error::domain(format!("parameter count must be positive, got {n}")));
    }
    if !(d_eff > 0.0) {
        return Err(Error::domain(format!("effective data must be positive, got {d_eff}")));
    }
    Ok(chinchilla_form(params.e_irreducible, params.log_a, params.log_b, params.alpha, params.beta, n, d_eff))
}

#[inline]
pub(crate) fn chinchilla_form(e: f64, log_a: f64, log_b: f64, alpha: f64, beta: f64, n: f64, d: f64) -> f64 {
    e + (log_a - alpha * n.ln()).exp() + (log_b - beta * d.ln()).exp()
}

/// One observation reduced to the numbers a law needs, with the catalog
/// lookups already resolved. Fitting evaluates these many thousands of times.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRun {
    pub n_params: f64,
    pub d_target: f64,
    pub u_target: f64,
    /// `(D_i, U_i)` in transfer-set order.
    pub transfer: Vec<(f64, f64)>,
    pub d_other: f64,
    pub u_other: f64,
}

impl PreparedRun {
    pub fn prepare(record: &RunRecord, spec: &LawSpec, catalog: &CorpusCatalog) -> Result<Self> {
        let not_evaluable = |e: Error| Error::NotEvaluable {
            run_id: record.run_id.clone(),
            message: e.to_string(),
        };
        let breakdown = spec.breakdown(record).map_err(not_evaluable)?;
        let prepared = Self::from_breakdown(&breakdown, record.n_params as f64, spec.variant, catalog).map_err(not_evaluable)?;
        if prepared.d_target <= 0.0 && prepared.effective_data(spec.variant, 1.0, &vec![1.0; prepared.transfer.len()], 1.0) <= 0.0 {
            return Err(not_evaluable(Error::domain("no target-language tokens")));
        }
        Ok(prepared)
    }

    fn from_breakdown(breakdown: &TokenBreakdown, n_params: f64, variant: Variant, catalog: &CorpusCatalog) -> Result<Self> {
        let u_target = if variant.uses_saturation() {
            catalog.get(&breakdown.target)? as f64
        } else {
            f64::INFINITY
        };
        let transfer = if variant.uses_transfer() {
            breakdown
                .d_transfer
                .iter()
                .map(|(lang, d)| Ok((*d as f64, catalog.get(lang)? as f64)))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let (d_other, u_other) = if variant.uses_other() && breakdown.d_other > 0 {
            (breakdown.d_other as f64, u_other(breakdown, catalog)?)
        } else {
            (0.0, f64::INFINITY)
        };
        Ok(Self {
            n_params,
            d_target: breakdown.d_target as f64,
            u_target,
            transfer,
            d_other,
            u_other,
        })
    }

    /// `taus` follows transfer-set order and is ignored unless the variant
    /// uses transfer terms.
    #[inline]
    pub fn effective_data(&self, variant: Variant, lambda: f64, taus: &[f64], tau_other: f64) -> f64 {
        if !variant.uses_saturation() {
            return self.d_target;
        }
        let mut d_eff = saturate(self.d_target, self.u_target, lambda);
        if variant.uses_transfer() {
            for (&(d, u), &tau) in self.transfer.iter().zip(taus) {
                if d > 0.0 {
                    d_eff += tau * saturate(d, u, lambda);
                }
            }
        }
        if variant.uses_other() && self.d_other > 0.0 {
            d_eff += tau_other * saturate(self.d_other, self.u_other, lambda);
        }
        d_eff
    }
}

/// A law that predicts loss for a model size and a token breakdown.
///
/// Implement this to compare third-party law forms against the built-in
/// variants on the same data.
pub trait LossLaw {
    fn name(&self) -> &str;
    fn predict(&self, n_params: f64, breakdown: &TokenBreakdown) -> Result<f64>;
}

/// A built-in variant bound to fitted parameters and a catalog.
#[derive(Debug, Clone)]
pub struct AtlasLaw<'a> {
    pub params: &'a LawParams,
    pub catalog: &'a CorpusCatalog,
}

impl LossLaw for AtlasLaw<'_> {
    fn name(&self) -> &str {
        self.params.variant.as_str()
    }

    fn predict(&self, n_params: f64, breakdown: &TokenBreakdown) -> Result<f64> {
        let d_eff = effective_data(breakdown, self.catalog, self.params)?;
        predict_loss(self.params, n_params, d_eff)
    }
}
