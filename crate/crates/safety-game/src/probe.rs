//! Yes/No probe prompts and normalized log-probability scoring.
//!
//! A probe asks a black-box model a Yes/No question about a (question,
//! answer) pair. The raw log-likelihoods of the two completions are turned
//! into a normalized log-probability of the signal answer via log-sum-exp,
//! yielding a helpfulness score `h` and a safety-risk score `s`, both in
//! `(-inf, 0]` with larger meaning stronger signal (more helpful / riskier).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ScoringService};
use crate::dataset::Dataset;

/// Placeholders recognized by [`render_probe`]. Any other `{...}` text in a
/// template body is left untouched (the free-form generator prompt contains
/// literal braces).
pub const PLACEHOLDERS: [&str; 6] = [
    "{question}",
    "{answer}",
    "{option_A}",
    "{option_B}",
    "{option_C}",
    "{option_D}",
];

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("non-finite log-likelihood pair: yes={yes}, no={no}")]
    InvalidScore { yes: f64, no: f64 },
    #[error("template `{template}` has no value for placeholder {{{placeholder}}}")]
    MissingValue { template: String, placeholder: String },
    #[error("template `{template}` ({kind}) must contain {{{placeholder}}}")]
    IncompleteTemplate {
        template: String,
        kind: ProbeKind,
        placeholder: String,
    },
    #[error("no {kind} template registered for dataset {dataset}")]
    NoTemplate { dataset: Dataset, kind: ProbeKind },
    #[error("template manifest {0}: {1}")]
    Manifest(String, String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

/// What a template is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Helpfulness,
    Safety,
    Generator,
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Helpfulness => f.write_str("helpfulness"),
            Self::Safety => f.write_str("safety"),
            Self::Generator => f.write_str("generator"),
        }
    }
}

/// Orientation of a probe's Yes answer relative to the score axis.
///
/// `Direct`: Yes is the signal (Yes = helpful for helpfulness probes,
/// Yes = risky for safety probes). `Inverted`: the template's Yes means the
/// opposite (e.g. a safety probe phrased "does this answer avoid harm?"),
/// so the pair is swapped at ingestion and larger scores still mean riskier.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    #[default]
    Direct,
    Inverted,
}

/// A probe or generator prompt body with named placeholders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeTemplate {
    pub name: String,
    pub body: String,
    pub kind: ProbeKind,
    pub dataset: Dataset,
    #[serde(default)]
    pub polarity: Polarity,
}

impl ProbeTemplate {
    /// Checks that the body contains every placeholder the kind requires:
    /// `{question}` always, `{answer}` for probe kinds.
    pub fn validate(&self) -> Result<(), ProbeError> {
        let mut required = vec!["{question}"];
        if matches!(self.kind, ProbeKind::Helpfulness | ProbeKind::Safety) {
            required.push("{answer}");
        }
        for placeholder in required {
            if !self.body.contains(placeholder) {
                return Err(ProbeError::IncompleteTemplate {
                    template: self.name.clone(),
                    kind: self.kind,
                    placeholder: placeholder.trim_matches(['{', '}']).to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn render(&self, question: &str, answer: &str, options: &[String]) -> Result<String, ProbeError> {
        render_probe(self, question, answer, options)
    }
}

/// Renders a template by exact byte-level substitution of the known
/// placeholders. Template whitespace is preserved; empty substitution values
/// are legal. An `{option_X}` placeholder without a corresponding entry in
/// `options` is an error.
pub fn render_probe(
    template: &ProbeTemplate,
    question: &str,
    answer: &str,
    options: &[String],
) -> Result<String, ProbeError> {
    let mut out = template.body.clone();
    out = out.replace("{question}", question);
    out = out.replace("{answer}", answer);
    for (i, letter) in ["A", "B", "C", "D"].iter().enumerate() {
        let placeholder = format!("{{option_{letter}}}");
        if out.contains(&placeholder) {
            match options.get(i) {
                Some(value) => out = out.replace(&placeholder, value),
                None => {
                    return Err(ProbeError::MissingValue {
                        template: template.name.clone(),
                        placeholder: format!("option_{letter}"),
                    })
                }
            }
        }
    }
    Ok(out)
}

/// The built-in and user-supplied templates, addressable by (dataset, kind).
#[derive(Debug, Clone)]
pub struct TemplateSet {
    by_key: BTreeMap<(Dataset, ProbeKind), ProbeTemplate>,
}

#[derive(Debug, Deserialize)]
struct ManifestFile {
    templates: Vec<ManifestEntry>,
}

#[derive(Debug, Deserialize)]
struct ManifestEntry {
    dataset: Dataset,
    kind: ProbeKind,
    file: String,
    #[serde(default)]
    polarity: Polarity,
}

impl TemplateSet {
    /// The stock templates for the three benchmark formats.
    pub fn builtin() -> Self {
        macro_rules! tpl {
            ($name:literal, $kind:expr, $dataset:expr, $polarity:expr) => {
                ProbeTemplate {
                    name: $name.to_string(),
                    body: include_str!(concat!(
                        env!("CARGO_MANIFEST_DIR"),
                        "/templates/",
                        $name,
                        ".txt"
                    ))
                    .to_string(),
                    kind: $kind,
                    dataset: $dataset,
                    polarity: $polarity,
                }
            };
        }
        let templates = vec![
            tpl!("hhh_generator", ProbeKind::Generator, Dataset::Hhh, Polarity::Direct),
            tpl!("hhh_phi_h", ProbeKind::Helpfulness, Dataset::Hhh, Polarity::Direct),
            tpl!("hhh_phi_s", ProbeKind::Safety, Dataset::Hhh, Polarity::Direct),
            tpl!("tqa_generator", ProbeKind::Generator, Dataset::TruthfulQa, Polarity::Direct),
            tpl!("tqa_phi_h", ProbeKind::Helpfulness, Dataset::TruthfulQa, Polarity::Direct),
            // The TruthfulQA safety probe asks whether the answer *avoids*
            // harm, so its Yes means safe and the pair is inverted.
            tpl!("tqa_phi_s", ProbeKind::Safety, Dataset::TruthfulQa, Polarity::Inverted),
            tpl!("sb_generator", ProbeKind::Generator, Dataset::SafetyBench, Polarity::Direct),
            tpl!("sb_phi_h", ProbeKind::Helpfulness, Dataset::SafetyBench, Polarity::Direct),
            tpl!("sb_phi_s", ProbeKind::Safety, Dataset::SafetyBench, Polarity::Direct),
        ];
        Self::from_templates(templates).expect("built-in templates are valid")
    }

    pub fn from_templates(templates: Vec<ProbeTemplate>) -> Result<Self, ProbeError> {
        let mut by_key = BTreeMap::new();
        for t in templates {
            t.validate()?;
            by_key.insert((t.dataset, t.kind), t);
        }
        Ok(Self { by_key })
    }

    /// Loads a template directory: a `manifest.json` mapping (dataset, kind)
    /// to body files stored alongside it.
    pub fn load(dir: &Path) -> Result<Self, ProbeError> {
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
            ProbeError::Manifest(manifest_path.display().to_string(), e.to_string())
        })?;
        let manifest: ManifestFile = serde_json::from_str(&text).map_err(|e| {
            ProbeError::Manifest(manifest_path.display().to_string(), e.to_string())
        })?;
        let mut templates = Vec::new();
        for entry in manifest.templates {
            let body_path = dir.join(&entry.file);
            let body = std::fs::read_to_string(&body_path).map_err(|e| {
                ProbeError::Manifest(body_path.display().to_string(), e.to_string())
            })?;
            let name = entry.file.trim_end_matches(".txt").to_string();
            templates.push(ProbeTemplate {
                name,
                body,
                kind: entry.kind,
                dataset: entry.dataset,
                polarity: entry.polarity,
            });
        }
        Self::from_templates(templates)
    }

    pub fn get(&self, dataset: Dataset, kind: ProbeKind) -> Result<&ProbeTemplate, ProbeError> {
        self.by_key
            .get(&(dataset, kind))
            .ok_or(ProbeError::NoTemplate { dataset, kind })
    }
}

// ---------------------------------------------------------------------------
// Scores
// ---------------------------------------------------------------------------

/// Raw log-likelihoods of the two probe completions, signal first.
///
/// For an inverted-polarity template the pair is swapped at ingestion, so
/// `yes_loglik` always holds the completion whose probability the score
/// tracks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawProbeResult {
    pub yes_loglik: f64,
    pub no_loglik: f64,
}

impl RawProbeResult {
    pub fn new(yes_loglik: f64, no_loglik: f64) -> Result<Self, ProbeError> {
        if !yes_loglik.is_finite() || !no_loglik.is_finite() {
            return Err(ProbeError::InvalidScore {
                yes: yes_loglik,
                no: no_loglik,
            });
        }
        Ok(Self {
            yes_loglik,
            no_loglik,
        })
    }
}

/// Normalized helpfulness and safety-risk scores for one candidate, with the
/// raw pairs they were computed from. Both scores are recomputable as
/// `log_p_normalize(raw.yes_loglik, raw.no_loglik)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    pub h: f64,
    pub s: f64,
    pub raw_h: RawProbeResult,
    pub raw_s: RawProbeResult,
}

/// Normalized log-probability of the first completion among the two:
/// `yes - log(exp(yes) + exp(no))`, computed by subtracting the larger
/// input before exponentiating. Result is in `(-inf, 0]`.
pub fn log_p_normalize(yes: f64, no: f64) -> Result<f64, ProbeError> {
    if !yes.is_finite() || !no.is_finite() {
        return Err(ProbeError::InvalidScore { yes, no });
    }
    let m = yes.max(no);
    Ok(yes - (m + ((yes - m).exp() + (no - m).exp()).ln()))
}

/// Scores one candidate against the helpfulness and safety probes
/// (Yes/No log-likelihood queries, then LSE normalization).
pub fn score_candidate(
    service: &ScoringService,
    question: &str,
    candidate: &str,
    helpful: &ProbeTemplate,
    safety: &ProbeTemplate,
) -> Result<ProbeScore, ProbeError> {
    let raw_h = query_probe(service, helpful, question, candidate)?;
    let raw_s = query_probe(service, safety, question, candidate)?;
    Ok(ProbeScore {
        h: log_p_normalize(raw_h.yes_loglik, raw_h.no_loglik)?,
        s: log_p_normalize(raw_s.yes_loglik, raw_s.no_loglik)?,
        raw_h,
        raw_s,
    })
}

fn query_probe(
    service: &ScoringService,
    template: &ProbeTemplate,
    question: &str,
    candidate: &str,
) -> Result<RawProbeResult, ProbeError> {
    let prompt = render_probe(template, question, candidate, &[])?;
    let (yes, no) = service.logprob_pair(&prompt)?;
    let (signal, complement) = match template.polarity {
        Polarity::Direct => (yes, no),
        Polarity::Inverted => (no, yes),
    };
    RawProbeResult::new(signal, complement)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendConfig, FixtureBackend, ScoringService};
    use proptest::prelude::*;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn probe_template(body: &str) -> ProbeTemplate {
        ProbeTemplate {
            name: "test".into(),
            body: body.into(),
            kind: ProbeKind::Helpfulness,
            dataset: Dataset::Custom,
            polarity: Polarity::Direct,
        }
    }

    #[test]
    fn log_p_symmetric_pairs() {
        assert!((log_p_normalize(0.0, 0.0).unwrap() + LN_2).abs() < 1e-15);
        assert!((log_p_normalize(-1.0, -1.0).unwrap() + LN_2).abs() < 1e-15);
    }

    #[test]
    fn log_p_reference_value() {
        // y - log(e^y + e^n) at (-1, -2) is -ln(1 + e^-1).
        let expected = -(1.0 + (-1.0f64).exp()).ln();
        assert!((log_p_normalize(-1.0, -2.0).unwrap() - expected).abs() < 1e-15);
        assert!((expected + 0.313_261_687_518_222_8).abs() < 1e-12);
    }

    #[test]
    fn log_p_rejects_non_finite() {
        assert!(log_p_normalize(f64::NAN, 0.0).is_err());
        assert!(log_p_normalize(0.0, f64::INFINITY).is_err());
        assert!(log_p_normalize(f64::NEG_INFINITY, 0.0).is_err());
    }

    #[test]
    fn log_p_extreme_magnitudes() {
        let v = log_p_normalize(700.0, -700.0).unwrap();
        assert!(v <= 0.0 && v.is_finite());
        let w = log_p_normalize(-700.0, 700.0).unwrap();
        assert!(w.is_finite() && w < -1000.0);
    }

    proptest! {
        #[test]
        fn log_p_exponentials_sum_to_one(y in -700.0f64..700.0, n in -700.0f64..700.0) {
            let a = log_p_normalize(y, n).unwrap().exp();
            let b = log_p_normalize(n, y).unwrap().exp();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn log_p_shift_invariant(y in -50.0f64..50.0, n in -50.0f64..50.0, c in -50.0f64..50.0) {
            let base = log_p_normalize(y, n).unwrap();
            let shifted = log_p_normalize(y + c, n + c).unwrap();
            prop_assert!((base - shifted).abs() < 1e-12);
        }

        #[test]
        fn log_p_monotone(y in -30.0f64..0.0, n in -30.0f64..0.0, d in 1e-4f64..1.0) {
            let base = log_p_normalize(y, n).unwrap();
            prop_assert!(log_p_normalize(y + d, n).unwrap() > base);
            prop_assert!(log_p_normalize(y, n + d).unwrap() < base);
        }
    }

    #[test]
    fn render_hhh_helpfulness_probe() {
        let set = TemplateSet::builtin();
        let t = set.get(Dataset::Hhh, ProbeKind::Helpfulness).unwrap();
        let rendered = t.render("Q", "A", &[]).unwrap();
        assert!(rendered.contains("Human: Q"));
        assert!(rendered.contains("Assistant: A"));
        assert!(rendered.ends_with("(Yes/No):"));
    }

    #[test]
    fn render_safetybench_safety_probe() {
        let set = TemplateSet::builtin();
        let t = set.get(Dataset::SafetyBench, ProbeKind::Safety).unwrap();
        let rendered = t.render("Q", "A", &[]).unwrap();
        assert!(rendered.ends_with("responsible AI principles? (Yes/No):"));
    }

    #[test]
    fn render_empty_answer_is_fine() {
        let set = TemplateSet::builtin();
        let t = set.get(Dataset::Hhh, ProbeKind::Helpfulness).unwrap();
        let rendered = t.render("Q", "", &[]).unwrap();
        assert!(rendered.contains("Assistant: \n"));
    }

    #[test]
    fn render_is_bit_exact() {
        let set = TemplateSet::builtin();
        let t = set.get(Dataset::SafetyBench, ProbeKind::Generator).unwrap();
        let opts: Vec<String> = ["w", "x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let a = t.render("Q?", "", &opts).unwrap();
        let b = t.render("Q?", "", &opts).unwrap();
        assert_eq!(a.as_bytes(), b.as_bytes());
    }

    #[test]
    fn render_missing_option_value() {
        let set = TemplateSet::builtin();
        let t = set.get(Dataset::SafetyBench, ProbeKind::Generator).unwrap();
        let opts: Vec<String> = vec!["only one".into()];
        let err = t.render("Q?", "", &opts).unwrap_err();
        assert!(matches!(err, ProbeError::MissingValue { .. }));
    }

    #[test]
    fn generator_literal_braces_survive() {
        let set = TemplateSet::builtin();
        let t = set.get(Dataset::TruthfulQa, ProbeKind::Generator).unwrap();
        let rendered = t.render("Q?", "", &[]).unwrap();
        assert!(rendered.contains("{Correct & Safe, Correct & Unsafe-sounding,"));
        assert!(!rendered.contains("{question}"));
    }

    #[test]
    fn template_validation_requires_placeholders() {
        let t = probe_template("no placeholders at all");
        assert!(matches!(t.validate(), Err(ProbeError::IncompleteTemplate { .. })));
        let t = probe_template("{question} but no answer slot");
        assert!(t.validate().is_err());
        let t = probe_template("{question} {answer}");
        assert!(t.validate().is_ok());
    }

    #[test]
    fn builtin_set_loads_like_directory_set() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("templates");
        let loaded = TemplateSet::load(&dir).unwrap();
        let builtin = TemplateSet::builtin();
        for dataset in [Dataset::Hhh, Dataset::TruthfulQa, Dataset::SafetyBench] {
            for kind in [ProbeKind::Generator, ProbeKind::Helpfulness, ProbeKind::Safety] {
                assert_eq!(
                    loaded.get(dataset, kind).unwrap().body,
                    builtin.get(dataset, kind).unwrap().body
                );
            }
        }
        assert_eq!(
            loaded.get(Dataset::TruthfulQa, ProbeKind::Safety).unwrap().polarity,
            Polarity::Inverted
        );
    }

    fn fixture_service(entries: &[(&str, f64, f64)]) -> ScoringService {
        let mut backend = FixtureBackend::new();
        for (prompt, yes, no) in entries {
            backend.insert_pair("fixture-model", prompt, " Yes", " No", *yes, *no);
        }
        ScoringService::in_memory(Box::new(backend), BackendConfig::fixture_defaults())
    }

    #[test]
    fn score_candidate_symmetric_fixture() {
        let set = TemplateSet::builtin();
        let phi_h = set.get(Dataset::Hhh, ProbeKind::Helpfulness).unwrap();
        let phi_s = set.get(Dataset::Hhh, ProbeKind::Safety).unwrap();
        let ph = phi_h.render("Q", "A", &[]).unwrap();
        let ps = phi_s.render("Q", "A", &[]).unwrap();
        let svc = fixture_service(&[(&ph, 0.0, 0.0), (&ps, 0.0, 0.0)]);
        let score = score_candidate(&svc, "Q", "A", phi_h, phi_s).unwrap();
        assert!((score.h + LN_2).abs() < 1e-15);
        assert!((score.s + LN_2).abs() < 1e-15);
    }

    #[test]
    fn score_candidate_reference_fixture() {
        let set = TemplateSet::builtin();
        let phi_h = set.get(Dataset::Hhh, ProbeKind::Helpfulness).unwrap();
        let phi_s = set.get(Dataset::Hhh, ProbeKind::Safety).unwrap();
        let ph = phi_h.render("Q", "A", &[]).unwrap();
        let ps = phi_s.render("Q", "A", &[]).unwrap();
        let svc = fixture_service(&[(&ph, -0.1, -3.0), (&ps, -4.0, -0.05)]);
        let score = score_candidate(&svc, "Q", "A", phi_h, phi_s).unwrap();
        assert!((score.h - log_p_normalize(-0.1, -3.0).unwrap()).abs() < 1e-15);
        assert!((score.s - log_p_normalize(-4.0, -0.05).unwrap()).abs() < 1e-15);
        assert!((score.h + 0.053).abs() < 1e-3);
        assert!((score.s + 3.969).abs() < 1e-3);
    }

    #[test]
    fn inverted_polarity_swaps_pair() {
        let set = TemplateSet::builtin();
        let phi_h = set.get(Dataset::TruthfulQa, ProbeKind::Helpfulness).unwrap();
        let phi_s = set.get(Dataset::TruthfulQa, ProbeKind::Safety).unwrap();
        let ph = phi_h.render("Q", "A", &[]).unwrap();
        let ps = phi_s.render("Q", "A", &[]).unwrap();
        // Safety probe says Yes (= avoids harm) with high probability; the
        // risk score must come out low.
        let svc = fixture_service(&[(&ph, -0.5, -0.5), (&ps, -0.1, -3.0)]);
        let score = score_candidate(&svc, "Q", "A", phi_h, phi_s).unwrap();
        assert_eq!(score.raw_s.yes_loglik, -3.0);
        assert_eq!(score.raw_s.no_loglik, -0.1);
        assert!((score.s - log_p_normalize(-3.0, -0.1).unwrap()).abs() < 1e-15);
        assert!(score.s < -2.0);
    }
}
