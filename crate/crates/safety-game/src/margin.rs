//! Margins against the safe fallback.
//!
//! Every candidate's helpfulness lift and extra risk are its probe scores
//! minus the fallback's, so the fallback sits at the exact zero point of
//! both scales and any mixture is judged relative to always refusing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::probe::ProbeScore;

/// The designated refusal answer. Zero lift, zero extra risk by definition.
pub const SAFE_FALLBACK: &str = "I cannot provide a response to that request.";

/// Padding answers appended to short MCQ option lists, in order.
pub const SAFE_PADDING: [&str; 3] = [
    "I cannot provide advice on this topic.",
    "Please consult appropriate authorities or professionals.",
    "This requires careful consideration of safety and ethics.",
];

#[derive(Debug, Error)]
pub enum MarginError {
    #[error("fallback text must be non-empty")]
    EmptyFallback,
    #[error("candidate set has no fallback; inject one before building margins")]
    MissingFallback,
    #[error("candidate {0} is unscored")]
    Unscored(usize),
    #[error("candidate set is empty")]
    Empty,
}

/// Where a candidate pool came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateOrigin {
    DatasetOptions,
    Generated,
    Padded,
}

/// One candidate answer, scored once probes have run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub score: Option<ProbeScore>,
}

impl Candidate {
    pub fn unscored(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            score: None,
        }
    }
}

/// An ordered candidate pool for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub items: Vec<Candidate>,
    pub fallback_index: Option<usize>,
    pub origin: CandidateOrigin,
}

impl CandidateSet {
    pub fn new(texts: Vec<String>, origin: CandidateOrigin) -> Self {
        Self {
            items: texts.into_iter().map(Candidate::unscored).collect(),
            fallback_index: None,
            origin,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Lift and extra-risk vectors relative to the fallback's scores.
///
/// `fallback_index` is `Some` when the fallback occupies a row of its own
/// (selectable by the solver); `None` when margins were taken against a
/// separately scored fallback that is excluded from the mixture support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSet {
    pub lift: Vec<f64>,
    pub risk: Vec<f64>,
    pub fallback_index: Option<usize>,
}

impl MarginSet {
    pub fn len(&self) -> usize {
        self.lift.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lift.is_empty()
    }
}

/// Appends the safe fallback to the set unless an exact match is already
/// present; records its index either way. Idempotent.
pub fn inject_fallback(mut set: CandidateSet, fallback_text: &str) -> Result<CandidateSet, MarginError> {
    if fallback_text.is_empty() {
        return Err(MarginError::EmptyFallback);
    }
    if let Some(pos) = set.items.iter().position(|c| c.text == fallback_text) {
        set.fallback_index = Some(pos);
        return Ok(set);
    }
    set.items.push(Candidate::unscored(fallback_text));
    set.fallback_index = Some(set.items.len() - 1);
    Ok(set)
}

/// Builds margins for a fully scored set containing the fallback. The
/// fallback row is forced to literal zero after subtraction so no rounding
/// residue survives.
pub fn build_margins(set: &CandidateSet) -> Result<MarginSet, MarginError> {
    if set.items.is_empty() {
        return Err(MarginError::Empty);
    }
    let fallback_index = set.fallback_index.ok_or(MarginError::MissingFallback)?;
    let scores: Vec<ProbeScore> = set
        .items
        .iter()
        .enumerate()
        .map(|(i, c)| c.score.ok_or(MarginError::Unscored(i)))
        .collect::<Result<_, _>>()?;
    let mut margins = margins_against(&scores, &scores[fallback_index]);
    margins.lift[fallback_index] = 0.0;
    margins.risk[fallback_index] = 0.0;
    margins.fallback_index = Some(fallback_index);
    Ok(margins)
}

/// Margins of `scores` against an external fallback score. Used directly
/// when the fallback is scored but kept out of the selectable support.
pub fn margins_against(scores: &[ProbeScore], fallback: &ProbeScore) -> MarginSet {
    MarginSet {
        lift: scores.iter().map(|p| p.h - fallback.h).collect(),
        risk: scores.iter().map(|p| p.s - fallback.s).collect(),
        fallback_index: None,
    }
}

/// Pads an MCQ option list with the safe padding answers, in order and
/// cycling if needed, until it has `target_k` entries.
pub fn pad_options(options: &[String], target_k: usize) -> Vec<String> {
    let mut out = options.to_vec();
    let mut next = 0usize;
    while out.len() < target_k {
        out.push(SAFE_PADDING[next % SAFE_PADDING.len()].to_string());
        next += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::RawProbeResult;
    use proptest::prelude::*;

    fn score(h: f64, s: f64) -> ProbeScore {
        let raw = RawProbeResult {
            yes_loglik: 0.0,
            no_loglik: 0.0,
        };
        ProbeScore {
            h,
            s,
            raw_h: raw,
            raw_s: raw,
        }
    }

    fn scored_set(pairs: &[(f64, f64)], fallback_index: usize) -> CandidateSet {
        CandidateSet {
            items: pairs
                .iter()
                .enumerate()
                .map(|(i, &(h, s))| Candidate {
                    text: format!("candidate {i}"),
                    score: Some(score(h, s)),
                })
                .collect(),
            fallback_index: Some(fallback_index),
            origin: CandidateOrigin::DatasetOptions,
        }
    }

    #[test]
    fn margins_direct_subtraction() {
        let set = scored_set(&[(-2.0, -3.0), (-1.0, -1.0)], 0);
        let m = build_margins(&set).unwrap();
        assert_eq!(m.lift, vec![0.0, 1.0]);
        assert_eq!(m.risk, vec![0.0, 2.0]);
        assert_eq!(m.fallback_index, Some(0));
    }

    #[test]
    fn candidate_identical_to_fallback_zeroes_out() {
        let set = scored_set(&[(-2.0, -3.0), (-2.0, -3.0)], 0);
        let m = build_margins(&set).unwrap();
        assert_eq!(m.lift[1], 0.0);
        assert_eq!(m.risk[1], 0.0);
    }

    #[test]
    fn margins_case1_matches_hand_subtraction() {
        // Three candidates plus fallback; expectations recomputed by hand
        // below rather than through build_margins.
        let pairs = [
            (-0.223_143_55, -2.995_732_27),
            (-1.609_437_91, -0.105_360_52),
            (-0.693_147_18, -0.916_290_73),
            (-2.302_585_09, -3.506_557_90),
        ];
        let fallback = 3;
        let set = scored_set(&pairs, fallback);
        let m = build_margins(&set).unwrap();
        for i in 0..pairs.len() {
            let want_lift = if i == fallback { 0.0 } else { pairs[i].0 - pairs[fallback].0 };
            let want_risk = if i == fallback { 0.0 } else { pairs[i].1 - pairs[fallback].1 };
            assert!((m.lift[i] - want_lift).abs() < 1e-12, "lift[{i}]");
            assert!((m.risk[i] - want_risk).abs() < 1e-12, "risk[{i}]");
        }
    }

    #[test]
    fn fallback_rows_are_bit_zero() {
        let set = scored_set(&[(-0.1, -0.7), (-0.3, -0.2)], 1);
        let m = build_margins(&set).unwrap();
        assert_eq!(m.lift[1].to_bits(), 0.0f64.to_bits());
        assert_eq!(m.risk[1].to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn inject_appends_and_is_idempotent() {
        let set = CandidateSet::new(vec!["a".into(), "b".into()], CandidateOrigin::DatasetOptions);
        let set = inject_fallback(set, SAFE_FALLBACK).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.fallback_index, Some(2));
        let again = inject_fallback(set.clone(), SAFE_FALLBACK).unwrap();
        assert_eq!(again, set);
    }

    #[test]
    fn inject_finds_existing_fallback() {
        let set = CandidateSet::new(
            vec!["a".into(), SAFE_FALLBACK.into()],
            CandidateOrigin::DatasetOptions,
        );
        let set = inject_fallback(set, SAFE_FALLBACK).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.fallback_index, Some(1));
    }

    #[test]
    fn inject_rejects_empty_text() {
        let set = CandidateSet::new(vec!["a".into()], CandidateOrigin::DatasetOptions);
        assert!(matches!(inject_fallback(set, ""), Err(MarginError::EmptyFallback)));
    }

    #[test]
    fn build_margins_requires_fallback_and_scores() {
        let set = CandidateSet::new(vec!["a".into()], CandidateOrigin::DatasetOptions);
        assert!(matches!(build_margins(&set), Err(MarginError::MissingFallback)));
        let set = inject_fallback(set, SAFE_FALLBACK).unwrap();
        assert!(matches!(build_margins(&set), Err(MarginError::Unscored(0))));
    }

    #[test]
    fn padding_order_and_noop() {
        let three: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let padded = pad_options(&three, 4);
        assert_eq!(padded.len(), 4);
        assert_eq!(padded[3], SAFE_PADDING[0]);

        let four = pad_options(&padded, 4);
        assert_eq!(four, padded);

        let two: Vec<String> = vec!["a".into(), "b".into()];
        let padded = pad_options(&two, 4);
        assert_eq!(padded[2], SAFE_PADDING[0]);
        assert_eq!(padded[3], SAFE_PADDING[1]);
    }

    #[test]
    fn padding_cycles_when_exhausted() {
        let padded = pad_options(&[], 7);
        assert_eq!(padded[3], SAFE_PADDING[0]);
        assert_eq!(padded[6], SAFE_PADDING[0]);
    }

    proptest! {
        // Dyadic grids make the shift exact in floating point, so margins
        // must come out bit-identical.
        #[test]
        fn translation_invariance(
            hs in proptest::collection::vec((-512i32..0, -512i32..0), 1..6),
            shift in -256i32..256,
            fb in 0usize..6,
        ) {
            let fb = fb % hs.len();
            let c = f64::from(shift) / 64.0;
            let base: Vec<(f64, f64)> = hs
                .iter()
                .map(|&(h, s)| (f64::from(h) / 64.0, f64::from(s) / 64.0))
                .collect();
            let shifted: Vec<(f64, f64)> = base.iter().map(|&(h, s)| (h + c, s + c)).collect();
            let m0 = build_margins(&scored_set(&base, fb)).unwrap();
            let m1 = build_margins(&scored_set(&shifted, fb)).unwrap();
            prop_assert_eq!(m0, m1);
        }

        #[test]
        fn determinism(hs in proptest::collection::vec((-8.0f64..0.0, -8.0f64..0.0), 1..6)) {
            let set = scored_set(&hs, 0);
            let a = build_margins(&set).unwrap();
            let b = build_margins(&set).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
