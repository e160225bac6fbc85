//! Synthetic run and curve generator with a known ground-truth law.
//!
//! Every grid cell draws its noise from its own ChaCha stream, so output is
//! reproducible and independent of generation order.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::capacity::{predict_capacity_loss, CapacityParams};
use crate::error::{Error, Result};
use crate::laws::{effective_data, predict_loss, LawParams, LawSpec, Variant};
use crate::run_data::{CorpusCatalog, CurvePoint, Language, LearningCurve, RunRecord, RunSet, TokenProvenance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureDesign {
    pub id: String,
    pub weights: BTreeMap<Language, f64>,
}

impl MixtureDesign {
    pub fn new(id: impl Into<String>, weights: &[(&str, f64)]) -> Self {
        Self {
            id: id.into(),
            weights: weights.iter().map(|(l, w)| (l.to_string(), *w)).collect(),
        }
    }

    /// Equal weights over `languages`.
    pub fn uniform(id: impl Into<String>, languages: &[&str]) -> Self {
        let w = 1.0 / languages.len() as f64;
        Self {
            id: id.into(),
            weights: languages.iter().map(|l| (l.to_string(), w)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundTruth {
    /// Records are evaluated on the spec's target language.
    Atlas { spec: LawSpec, params: LawParams },
    /// Records are emitted for every language of each (uniform) mixture.
    Capacity { params: CapacityParams },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDesign {
    pub truth: GroundTruth,
    pub n_values: Vec<u64>,
    pub token_checkpoints: Vec<u64>,
    pub mixtures: Vec<MixtureDesign>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthDesign {
    pub fn validate(&self) -> Result<()> {
        if self.n_values.is_empty() || self.token_checkpoints.is_empty() || self.mixtures.is_empty() {
            return Err(Error::invalid("synthetic grid must have sizes, checkpoints, and mixtures"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.n_values.contains(&0) || self.token_checkpoints.contains(&0) {
            return Err(Error::invalid("model sizes and token checkpoints must be positive"));
        }
        for m in &self.mixtures {
            let sum: f64 = m.weights.values().sum();
            if m.weights.values().any(|w| !(*w > 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("mixture `{}` needs positive weights summing to 1", m.id)));
            }
            if let GroundTruth::Capacity { .. } = self.truth {
                let k = m.weights.len() as f64;
                if m.weights.values().any(|w| (w - 1.0 / k).abs() > 1e-12) {
                    return Err(Error::invalid(format!("capacity designs need uniform mixtures; `{}` is not", m.id)));
                }
            }
        }
        match &self.truth {
            GroundTruth::Atlas { params, spec } => {
                params.validate()?;
                if params.variant != spec.variant {
                    return Err(Error::invalid("law parameters and spec disagree on the variant"));
                }
            }
            GroundTruth::Capacity { params } => params.validate()?,
        }
        Ok(())
    }
}

/// RNG for one grid cell: stream `cell` of the base seed.
pub fn cell_rng(seed: u64, cell: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cell);
    rng
}

fn noise_factor(seed: u64, cell: u64, sigma: f64) -> Result<f64> {
    if sigma == 0.0 {
        return Ok(1.0);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(normal.sample(&mut cell_rng(seed, cell)).exp())
}

/// Split `total` tokens by weight with largest-remainder rounding, so the
/// counts sum to `total` exactly. Ties go to the lexicographically first
/// language.
pub fn allocate_tokens(weights: &BTreeMap<Language, f64>, total: u64) -> BTreeMap<Language, u64> {
    let mut out = BTreeMap::new();
    let mut rema = Vec::new();
    let mut used: u64 = 0;
    for (l, w) in weights {
        let exact = w * total as f64;
        let floor = exact.floor().min(total as f64) as u64;
        used += floor;
        out.insert(l.clone(), floor);
        rema.push((exact - floor as f64, l.clone()));
    }
    rema.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let mut left = total.saturating_sub(used);
    for (_, l) in rema.iter().cycle() {
        if left == 0 {
            break;
        }
        *out.get_mut(l).unwrap() += 1;
        left -= 1;
    }
    out
}

/// One record per (mixture, size, checkpoint[, eval language]) cell with
/// `loss = law × exp(ε)`, `ε ~ N(0, σ²)`.
pub fn generate_runs(design: &SynthDesign, catalog: &CorpusCatalog) -> Result<RunSet> {
    design.validate()?;
    let mut records = Vec::new();
    let mut cell: u64 = 0;
    for m in &design.mixtures {
        for &n in &design.n_values {
            for &d in &design.token_checkpoints {
                let cumulative = allocate_tokens(&m.weights, d);
                let base = RunRecord {
                    run_id: format!("{}/n{}", m.id, n),
                    n_params: n,
                    mixture_id: m.id.clone(),
                    eval_language: String::new(),
                    loss: 0.0,
                    total_tokens: d,
                    sampling_weights: m.weights.clone(),
                    cumulative_tokens: cumulative,
                    token_provenance: TokenProvenance::Logged,
                };
                let cells: Vec<(Language, f64)> = match &design.truth {
                    GroundTruth::Atlas { spec, params } => {
                        let mut r = base.clone();
                        r.eval_language = spec.target_language.clone();
                        let loss = spec
                            .breakdown(&r)
                            .and_then(|b| effective_data(&b, catalog, params))
                            .and_then(|d_eff| predict_loss(params, n as f64, d_eff))
                            .map_err(|e| cell_error(m, n, d, e))?;
                        vec![(spec.target_language.clone(), loss)]
                    }
                    GroundTruth::Capacity { params } => {
                        let k = m.weights.len() as f64;
                        let loss = predict_capacity_loss(params, k, n as f64, d as f64 / k).map_err(|e| cell_error(m, n, d, e))?;
                        m.weights.keys().map(|l| (l.clone(), loss)).collect()
                    }
                };
                for (lang, loss) in cells {
                    let mut r = base.clone();
                    r.eval_language = lang;
                    r.loss = loss * noise_factor(design.seed, cell, design.noise_sigma)?;
                    records.push(r);
                    cell += 1;
                }
            }
        }
    }
    RunSet::new(records, &Default::default())
}

fn cell_error(m: &MixtureDesign, n: u64, d: u64, e: Error) -> Error {
    Error::NotEvaluable {
        run_id: format!("{}/n{} at {} tokens", m.id, n, d),
        message: e.to_string(),
    }
}

/// A learning curve sampled from `law(tokens)` with lognormal noise, one
/// ChaCha stream per point.
pub fn generate_curve(
    regime_id: &str,
    eval_language: &str,
    law: impl Fn(f64) -> f64,
    schedule: &[u64],
    noise_sigma: f64,
    seed: u64,
) -> Result<LearningCurve> {
    if schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("token schedule must be strictly increasing"));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::invalid("noise_sigma must be >= 0"));
    }
    let points = schedule
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            Ok(CurvePoint {
                tokens: t,
                loss: law(t as f64) * noise_factor(seed, i as u64, noise_sigma)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LearningCurve::new(regime_id, eval_language, points)
}

/// `count` log-spaced integers from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<u64> {
    if count == 1 {
        return vec![lo.round() as u64];
    }
    (0..count)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (count - 1) as f64).exp().round() as u64)
        .collect()
}

pub const DESK_TARGET: &str = "fr";

/// Ground truth for the desk-scale transfer-and-repetition design.
pub fn desk_atlas_params() -> LawParams {
    LawParams {
        variant: Variant::AtlasFull,
        e_irreducible: 1.2,
        log_a: 6.5,
        log_b: 8.0,
        alpha: 0.35,
        beta: 0.38,
        lambda: Some(2.0),
        tau_transfer: [("en", 0.5), ("es", 0.3), ("de", 0.2)].iter().map(|(l, t)| (l.to_string(), *t)).collect(),
        tau_other: Some(0.1),
    }
}

pub fn desk_catalog() -> CorpusCatalog {
    let counts = [("fr", 5e9), ("en", 2e10), ("de", 1e10), ("es", 8e9), ("sw", 1e9), ("hi", 3e9)];
    CorpusCatalog::new(counts.iter().map(|(l, u)| (l.to_string(), *u as u64)).collect()).expect("static catalog")
}

/// Eight mixtures around the target: monolingual, three bilinguals, unimax,
/// and three larger blends. The transfer languages are the most co-sampled.
pub fn desk_mixtures() -> Vec<MixtureDesign> {
    vec![
        MixtureDesign::new("mono_fr", &[("fr", 1.0)]),
        MixtureDesign::new("bi_fr_en", &[("fr", 0.5), ("en", 0.5)]),
        MixtureDesign::new("bi_fr_es", &[("fr", 0.5), ("es", 0.5)]),
        MixtureDesign::new("bi_fr_de", &[("fr", 0.5), ("de", 0.5)]),
        MixtureDesign::new("unimax", &[("fr", 0.2), ("en", 0.2), ("es", 0.2), ("de", 0.2), ("sw", 0.1), ("hi", 0.1)]),
        MixtureDesign::new("tri_fr_en_sw", &[("fr", 0.4), ("en", 0.3), ("sw", 0.3)]),
        MixtureDesign::new("quad_fr_es_de_hi", &[("fr", 0.3), ("es", 0.3), ("de", 0.2), ("hi", 0.2)]),
        MixtureDesign::new("multi_fr_en_de_sw_hi", &[("fr", 0.25), ("en", 0.25), ("de", 0.2), ("sw", 0.15), ("hi", 0.15)]),
    ]
}

/// 6 sizes from 1e7 to 2e9 parameters × 12 checkpoints from 1e8 to 1e11
/// tokens × 8 mixtures.
pub fn desk_atlas_design(noise_sigma: f64, seed: u64) -> SynthDesign {
    let params = desk_atlas_params();
    let spec = LawSpec::new(
        Variant::AtlasFull,
        DESK_TARGET,
        vec!["en".to_string(), "de".to_string(), "es".to_string()],
    )
    .expect("static spec");
    SynthDesign {
        truth: GroundTruth::Atlas { spec, params },
        n_values: log_spaced(1e7, 2e9, 6),
        token_checkpoints: log_spaced(1e8, 1e11, 12),
        mixtures: desk_mixtures(),
        noise_sigma,
        seed,
    }
}

pub fn desk_capacity_params() -> CapacityParams {
    CapacityParams {
        l_inf: 1.1,
        log_a: 6.0,
        log_b: 7.5,
        alpha: 0.35,
        beta: 0.3,
        phi: 0.11,
        psi: -0.04,
    }
}

/// Uniform mixtures of 1, 2, 4 and 8 languages.
pub fn desk_capacity_design(noise_sigma: f64, seed: u64) -> SynthDesign {
    let all = ["de", "en", "es", "fr", "hi", "ja", "ru", "sw"];
    SynthDesign {
        truth: GroundTruth::Capacity {
            params: desk_capacity_params(),
        },
        n_values: log_spaced(1e7, 2e9, 6),
        token_checkpoints: log_spaced(1e8, 1e11, 12),
        mixtures: vec![
            MixtureDesign::uniform("k1_en", &["en"]),
            MixtureDesign::uniform("k1_hi", &["hi"]),
            MixtureDesign::uniform("k2_en_hi", &["en", "hi"]),
            MixtureDesign::uniform("k4_west", &["de", "en", "es", "fr"]),
            MixtureDesign::uniform("k4_east", &["hi", "ja", "ru", "sw"]),
            MixtureDesign::uniform("k8_all", &all),
        ],
        noise_sigma,
        seed,
    }
}

/// Hidden quantities behind a synthetic curve bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveBankTruth {
    pub languages: Vec<Language>,
    /// Affinity in (0, 1) for every ordered (source, target) pair.
    pub affinity: BTreeMap<String, f64>,
    /// BTS implied by the bilingual effective-data boost, for measured pairs.
    pub expected_bts: BTreeMap<String, f64>,
    /// Crossover token count per `language@n_params`.
    pub expected_crossover: BTreeMap<String, f64>,
    pub d_mono: f64,
    pub d_max: f64,
}

pub const DESK_CURVE_LANGUAGES: [&str; 6] = ["de", "en", "es", "fr", "hi", "sw"];
const FT_SCALE: f64 = 5e9;

fn pair_key(s: &str, t: &str) -> String {
    format!("{s}->{t}")
}

/// Learning curves for transfer and crossover analysis: monolingual,
/// bilingual (10 of 15 pairs), unimax, finetune on every (source, target),
/// and scratch-versus-finetune pairs at three model sizes.
pub fn desk_curve_bank(noise_sigma: f64, seed: u64) -> Result<(Vec<LearningCurve>, CurveBankTruth)> {
    use rand::Rng;
    let langs: Vec<Language> = DESK_CURVE_LANGUAGES.iter().map(|s| s.to_string()).collect();
    let west = |l: &str| ["de", "en", "es", "fr"].contains(&l);
    let mut jitter = cell_rng(seed, u64::MAX);
    let mut affinity = BTreeMap::new();
    for s in &langs {
        for t in &langs {
            if s != t {
                let base = if west(s) == west(t) { 0.7 } else { 0.2 };
                affinity.insert(pair_key(s, t), base + jitter.random_range(-0.1..0.1));
            }
        }
    }
    let mono_law = |i: usize| move |d: f64| 1.5 + 0.1 * i as f64 + 300.0 * d.powf(-0.3);
    let (d_mono, d_max) = (1e9, 1e10);
    let mut curves = Vec::new();
    let mut counter = 0u64;
    let mut next_seed = || {
        counter += 1;
        use rand::RngCore;
        cell_rng(seed, counter).next_u64()
    };
    let sched = log_spaced(1e7, 1e11, 40);
    let ft_sched: Vec<u64> = std::iter::once(0).chain(log_spaced(1e8, 2e10, 24)).collect();
    let mut expected_bts = BTreeMap::new();
    for (i, t) in langs.iter().enumerate() {
        curves.push(generate_curve(&format!("mono:{t}"), t, mono_law(i), &sched, noise_sigma, next_seed())?);
        let baseline = mono_law(i)(2e10);
        curves.push(generate_curve("unimax", t, |_| baseline, &sched[..2], 0.0, 0)?);
        for (j, s) in langs.iter().enumerate() {
            let drop = if s == t {
                0.3 + 0.05 * j as f64
            } else {
                0.25 * affinity[&pair_key(s, t)] - 0.05
            };
            let law = move |d: f64| baseline - drop * (1.0 - (-d / FT_SCALE).exp());
            curves.push(generate_curve(&format!("finetune:{s}"), t, law, &ft_sched, noise_sigma, next_seed())?);
        }
    }
    for (i, a) in langs.iter().enumerate() {
        for (j, b) in langs.iter().enumerate().skip(i + 1) {
            if (i + 2 * j) % 3 == 0 {
                continue;
            }
            for (t, s, ti) in [(a, b, i), (b, a, j)] {
                let kappa = 2.0 * affinity[&pair_key(s, t)] - 0.6;
                let law = mono_law(ti);
                curves.push(generate_curve(
                    &format!("bilingual:{a}+{b}"),
                    t,
                    move |d| law(0.5 * d * (1.0 + kappa)),
                    &sched,
                    noise_sigma,
                    next_seed(),
                )?);
                expected_bts.insert(pair_key(s, t), 2.0 - 2.0 / (1.0 + kappa));
            }
        }
    }
    let mut expected_crossover = BTreeMap::new();
    let cross_sched = log_spaced(1e8, 1e12, 30);
    for l in &langs {
        for n in [100_000_000u64, 500_000_000, 2_000_000_000] {
            let d_star = 1e10 * (n as f64 / 1e8).sqrt();
            let u_star = (d_star / 1e9).ln();
            let f0 = 2.5;
            let s0 = f0 + 0.1 * u_star;
            let scratch = move |d: f64| s0 - 0.2 * (d / 1e9).ln();
            let ft = move |d: f64| f0 - 0.1 * (d / 1e9).ln();
            curves.push(generate_curve(&format!("scratch:{l}@{n}"), l, scratch, &cross_sched, noise_sigma, next_seed())?);
            curves.push(generate_curve(&format!("finetune:{l}@{n}"), l, ft, &cross_sched, noise_sigma, next_seed())?);
            expected_crossover.insert(format!("{l}@{n}"), d_star);
        }
    }
    Ok((
        curves,
        CurveBankTruth {
            languages: langs,
            affinity,
            expected_bts,
            expected_crossover,
            d_mono,
            d_max,
        },
    ))
}
