//! Safety-game solvers over a margin set.
//!
//! All three formulations pick a mixture `pi` over candidates using only the
//! lift/risk margins:
//!
//! - hard cap: maximize `M(pi)` subject to `R(pi) <= T`, an LP over the
//!   simplex with a single inequality. Solved exactly by enumerating pure
//!   strategies and the cap-crossing two-point mixtures.
//! - linear penalty: maximize `M(pi) - beta * max(0, R(pi) - T)`, the inner
//!   best response of the bounded-multiplier game. Piecewise linear and
//!   concave, so pure strategies plus cap crossings again suffice.
//! - sigmoid penalty: maximize `M(pi) - beta * sigma(kappa * (R(pi) - T))`.
//!   The inner minimizer saturates at `mu = beta` because the logistic is
//!   strictly positive. The objective depends on `pi` only through
//!   `(R(pi), M(pi))`, so the search runs over the upper concave envelope of
//!   the candidate `(risk, lift)` points, densely gridded per segment and
//!   locally refined.
//!
//! The boundary diagnostics (`boundary_certificate`, `sensitivity_witness`)
//! turn the cap-hugging propositions into checkable procedures: the first
//! confirms that binding instances optimize exactly on `R = T`, the second
//! constructs a small perturbation that flips or invalidates a boundary
//! optimum and verifies it by re-solving.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::margin::MarginSet;

/// Tolerance for "sits on the boundary" checks.
const BOUNDARY_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("margin set is empty")]
    EmptyInput,
    #[error("invalid game config: {0}")]
    InvalidConfig(String),
    #[error("non-finite margin at index {0}")]
    NonFiniteMargin(usize),
    #[error("sensitivity witness not constructible: {0}")]
    WitnessNotConstructible(String),
}

// ---------------------------------------------------------------------------
// Configuration and solution records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    #[serde(rename = "hardcap")]
    HardCap,
    Linear,
    Sigmoid,
}

impl std::fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::HardCap => f.write_str("hardcap"),
            Self::Linear => f.write_str("linear"),
            Self::Sigmoid => f.write_str("sigmoid"),
        }
    }
}

/// How equal-probability candidates are ordered when picking the answer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    LowestRiskThenIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GameConfig {
    /// Risk cap `T` (any sign, finite).
    pub cap: f64,
    /// Multiplier bound `beta > 0`.
    pub beta: f64,
    /// Sigmoid steepness `kappa > 0`.
    pub kappa: f64,
    pub penalty: PenaltyKind,
    #[serde(default)]
    pub tie_break: TieBreak,
    /// Grid density per frontier segment for the sigmoid search.
    pub grid_points: usize,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            cap: 1.0,
            beta: 10.0,
            kappa: 30.0,
            penalty: PenaltyKind::Sigmoid,
            tie_break: TieBreak::LowestRiskThenIndex,
            grid_points: 2001,
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !self.cap.is_finite() {
            return Err(SolverError::InvalidConfig(format!("cap T = {}", self.cap)));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(SolverError::InvalidConfig(format!("beta = {}", self.beta)));
        }
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(SolverError::InvalidConfig(format!("kappa = {}", self.kappa)));
        }
        if self.grid_points < 101 {
            return Err(SolverError::InvalidConfig(format!(
                "grid_points = {} (minimum 101)",
                self.grid_points
            )));
        }
        Ok(())
    }
}

/// Solved game for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSolution {
    /// Mixture over candidates, in margin order.
    pub pi: Vec<f64>,
    /// Reported multiplier in `[0, beta]`.
    pub mu: f64,
    /// `mu / beta`.
    pub lambda: f64,
    /// Optimal value of the configured objective; zero for the degenerate
    /// infeasible branch.
    pub objective: f64,
    /// `M(pi)`.
    pub expected_lift: f64,
    /// `R(pi)`.
    pub expected_risk: f64,
    /// Whether the hard risk cap admits any candidate (`min_i risk_i <= T`).
    pub feasible: bool,
    /// `argmax_i pi_i` after tie-breaking.
    pub selected_index: usize,
    /// Indices with positive mass.
    pub support: Vec<usize>,
}

/// Outcome of [`select`]: the solution plus what gets emitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub solution: GameSolution,
    /// Index of the emitted candidate, when it exists in the margin set.
    pub index: Option<usize>,
    /// True when the emission is the safe fallback (either forced by
    /// infeasibility or because the argmax landed on the fallback row).
    pub is_fallback: bool,
}

// ---------------------------------------------------------------------------
// Small numeric helpers
// ---------------------------------------------------------------------------

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Saturated sigmoid penalty `beta * sigma(kappa * (risk - T))`.
pub fn sigmoid_penalty(risk: f64, config: &GameConfig) -> f64 {
    config.beta * logistic(config.kappa * (risk - config.cap))
}

/// Expected lift and risk of a mixture.
pub fn mixture_moments(pi: &[f64], margins: &MarginSet) -> (f64, f64) {
    let lift = pi.iter().zip(&margins.lift).map(|(p, m)| p * m).sum();
    let risk = pi.iter().zip(&margins.risk).map(|(p, d)| p * d).sum();
    (lift, risk)
}

/// The bounded-multiplier sigmoid objective `M(pi) - mu * sigma(kappa (R - T))`.
pub fn penalized_objective(pi: &[f64], mu: f64, margins: &MarginSet, config: &GameConfig) -> f64 {
    let (lift, risk) = mixture_moments(pi, margins);
    lift - mu * logistic(config.kappa * (risk - config.cap))
}

/// The normalized two-branch objective: the same game rescaled by
/// `1 / (beta + 1)`, with `lambda = mu / beta` interpreted as the
/// probability of entering the safety-enforcement branch.
pub fn normalized_objective(pi: &[f64], lambda: f64, margins: &MarginSet, config: &GameConfig) -> f64 {
    let (lift, risk) = mixture_moments(pi, margins);
    let penalty = lambda * logistic(config.kappa * (risk - config.cap));
    lift / (config.beta + 1.0) - (config.beta / (config.beta + 1.0)) * penalty
}

/// The chance weights of the helpfulness and safety-enforcement branches.
pub fn chance_split(beta: f64) -> (f64, f64) {
    (1.0 / (beta + 1.0), beta / (beta + 1.0))
}

fn check_margins(margins: &MarginSet) -> Result<(), SolverError> {
    if margins.is_empty() {
        return Err(SolverError::EmptyInput);
    }
    for (i, (m, d)) in margins.lift.iter().zip(&margins.risk).enumerate() {
        if !m.is_finite() || !d.is_finite() {
            return Err(SolverError::NonFiniteMargin(i));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Row deduplication
// ---------------------------------------------------------------------------

/// Rows with bit-identical `(lift, risk)` collapse to the lowest-index
/// representative; the mixture mass lands on that index.
struct Rows {
    lift: Vec<f64>,
    risk: Vec<f64>,
    /// Original index of each solved row.
    orig: Vec<usize>,
    total: usize,
}

impl Rows {
    fn dedup(margins: &MarginSet) -> Self {
        let mut seen: HashMap<(u64, u64), usize> = HashMap::new();
        let mut lift = Vec::new();
        let mut risk = Vec::new();
        let mut orig = Vec::new();
        for i in 0..margins.len() {
            let key = (margins.lift[i].to_bits(), margins.risk[i].to_bits());
            if seen.contains_key(&key) {
                continue;
            }
            seen.insert(key, orig.len());
            lift.push(margins.lift[i]);
            risk.push(margins.risk[i]);
            orig.push(i);
        }
        Self {
            lift,
            risk,
            orig,
            total: margins.len(),
        }
    }

    fn len(&self) -> usize {
        self.orig.len()
    }

    /// Expands a mixture over deduped rows back to the full index space.
    fn expand(&self, weights: &[(usize, f64)]) -> Vec<f64> {
        let mut pi = vec![0.0; self.total];
        for &(row, w) in weights {
            pi[self.orig[row]] += w;
        }
        pi
    }
}

// ---------------------------------------------------------------------------
// Pareto frontier
// ---------------------------------------------------------------------------

/// A vertex of the upper concave envelope of candidate `(risk, lift)` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierVertex {
    pub risk: f64,
    pub lift: f64,
    /// Originating candidate index.
    pub index: usize,
}

/// Upper concave envelope over the convex hull of candidate points, sorted
/// by strictly increasing risk with strictly decreasing segment slopes.
/// Any achievable `(R(pi), M(pi))` lies on or below this envelope, so the
/// sigmoid objective — which depends on `pi` only through those two moments —
/// is maximized on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoFrontier {
    pub vertices: Vec<FrontierVertex>,
}

impl ParetoFrontier {
    pub fn build(margins: &MarginSet) -> Result<Self, SolverError> {
        check_margins(margins)?;
        let mut points: Vec<FrontierVertex> = (0..margins.len())
            .map(|i| FrontierVertex {
                risk: margins.risk[i],
                lift: margins.lift[i],
                index: i,
            })
            .collect();
        points.sort_by(|a, b| {
            a.risk
                .partial_cmp(&b.risk)
                .unwrap()
                .then(b.lift.partial_cmp(&a.lift).unwrap())
                .then(a.index.cmp(&b.index))
        });
        // One point per distinct risk: the highest lift wins.
        points.dedup_by(|next, kept| next.risk == kept.risk);

        let mut hull: Vec<FrontierVertex> = Vec::with_capacity(points.len());
        for p in points {
            while hull.len() >= 2 {
                let a = hull[hull.len() - 2];
                let b = hull[hull.len() - 1];
                // Keep slopes strictly decreasing; collinear middles drop.
                let keep = (b.lift - a.lift) * (p.risk - b.risk) > (p.lift - b.lift) * (b.risk - a.risk);
                if keep {
                    break;
                }
                hull.pop();
            }
            hull.push(p);
        }
        Ok(Self { vertices: hull })
    }
}

// ---------------------------------------------------------------------------
// Solvers
// ---------------------------------------------------------------------------

/// Candidate solutions are compared by objective, then lower risk, then
/// enumeration order, so ties resolve deterministically.
struct Best {
    value: f64,
    risk: f64,
    weights: Vec<(usize, f64)>,
}

impl Best {
    fn new() -> Self {
        Self {
            value: f64::NEG_INFINITY,
            risk: f64::INFINITY,
            weights: Vec::new(),
        }
    }

    fn offer(&mut self, value: f64, risk: f64, weights: &[(usize, f64)]) {
        if value > self.value || (value == self.value && risk < self.risk) {
            self.value = value;
            self.risk = risk;
            self.weights = weights.to_vec();
        }
    }
}

fn argmax_with_tiebreak(pi: &[f64], risk: &[f64]) -> usize {
    let mut best = 0usize;
    for i in 1..pi.len() {
        let better = pi[i] > pi[best] || (pi[i] == pi[best] && risk[i] < risk[best]);
        if better {
            best = i;
        }
    }
    best
}

fn finish(
    pi: Vec<f64>,
    objective: f64,
    mu: f64,
    feasible: bool,
    margins: &MarginSet,
    config: &GameConfig,
) -> GameSolution {
    let (expected_lift, expected_risk) = mixture_moments(&pi, margins);
    let selected_index = argmax_with_tiebreak(&pi, &margins.risk);
    let support = (0..pi.len()).filter(|&i| pi[i] > 0.0).collect();
    GameSolution {
        lambda: mu / config.beta,
        mu,
        objective,
        expected_lift,
        expected_risk,
        feasible,
        selected_index,
        support,
        pi,
    }
}

/// The degenerate branch shared by all modes when not even the least risky
/// row satisfies the cap: all mass on the fallback row (or the least risky
/// row if the fallback is not selectable) with the objective pinned to zero.
fn infeasible_solution(margins: &MarginSet, config: &GameConfig) -> GameSolution {
    let anchor = margins.fallback_index.unwrap_or_else(|| {
        let mut best = 0;
        for i in 1..margins.len() {
            if margins.risk[i] < margins.risk[best] {
                best = i;
            }
        }
        best
    });
    let mut pi = vec![0.0; margins.len()];
    pi[anchor] = 1.0;
    finish(pi, 0.0, config.beta, false, margins, config)
}

fn cap_feasible(margins: &MarginSet, config: &GameConfig) -> bool {
    margins.risk.iter().any(|&d| d <= config.cap)
}

/// Exact LP optimum of the hard-cap program. The feasible polytope's
/// vertices are the feasible pure strategies and, for each pair with risks
/// straddling the cap, the two-point mixture that lands exactly on `R = T`.
pub fn solve_hardcap(margins: &MarginSet, config: &GameConfig) -> Result<GameSolution, SolverError> {
    config.validate()?;
    check_margins(margins)?;
    if !cap_feasible(margins, config) {
        return Ok(infeasible_solution(margins, config));
    }
    let rows = Rows::dedup(margins);
    let t = config.cap;
    let mut best = Best::new();
    for i in 0..rows.len() {
        if rows.risk[i] <= t {
            best.offer(rows.lift[i], rows.risk[i], &[(i, 1.0)]);
        }
    }
    for i in 0..rows.len() {
        if rows.risk[i] > t {
            continue;
        }
        for j in 0..rows.len() {
            if rows.risk[j] <= t {
                continue;
            }
            let w = (rows.risk[j] - t) / (rows.risk[j] - rows.risk[i]);
            let value = w * rows.lift[i] + (1.0 - w) * rows.lift[j];
            let risk = w * rows.risk[i] + (1.0 - w) * rows.risk[j];
            best.offer(value, risk, &[(i, w), (j, 1.0 - w)]);
        }
    }
    let pi = rows.expand(&best.weights);
    Ok(finish(pi, best.value, 0.0, true, margins, config))
}

/// Maximizes the linear-penalty value `M(pi) - beta * max(0, R(pi) - T)`,
/// the closed-form inner minimization of the bounded-multiplier game. On
/// every edge of the simplex the value is piecewise linear with its only
/// kink at the cap crossing, so pure strategies plus crossings are exhaustive.
/// The reported multiplier is the inner best response: 0 under the cap,
/// `beta` above it, 0 at equality.
pub fn solve_linear(margins: &MarginSet, config: &GameConfig) -> Result<GameSolution, SolverError> {
    config.validate()?;
    check_margins(margins)?;
    let rows = Rows::dedup(margins);
    let t = config.cap;
    let mut best = Best::new();
    for i in 0..rows.len() {
        let value = rows.lift[i] - config.beta * (rows.risk[i] - t).max(0.0);
        best.offer(value, rows.risk[i], &[(i, 1.0)]);
    }
    for i in 0..rows.len() {
        if rows.risk[i] > t {
            continue;
        }
        for j in 0..rows.len() {
            if rows.risk[j] <= t {
                continue;
            }
            let w = (rows.risk[j] - t) / (rows.risk[j] - rows.risk[i]);
            let value = w * rows.lift[i] + (1.0 - w) * rows.lift[j];
            let risk = w * rows.risk[i] + (1.0 - w) * rows.risk[j];
            best.offer(value, risk, &[(i, w), (j, 1.0 - w)]);
        }
    }
    let pi = rows.expand(&best.weights);
    let (_, risk) = mixture_moments(&pi, margins);
    let mu = if risk > t + BOUNDARY_TOL { config.beta } else { 0.0 };
    let feasible = cap_feasible(margins, config);
    Ok(finish(pi, best.value, mu, feasible, margins, config))
}

/// Maximizes the sigmoid-penalty value `M(pi) - beta * sigma(kappa (R - T))`.
/// Since the logistic is strictly positive the inner minimizer is pinned at
/// `mu = beta`. The objective is searched over the Pareto frontier: a dense
/// grid per segment followed by ternary refinement around the best cell.
pub fn solve_sigmoid(margins: &MarginSet, config: &GameConfig) -> Result<GameSolution, SolverError> {
    config.validate()?;
    check_margins(margins)?;
    let frontier = ParetoFrontier::build(margins)?;
    let value_at = |risk: f64, lift: f64| lift - sigmoid_penalty(risk, config);

    let verts = &frontier.vertices;
    let mut best_value = f64::NEG_INFINITY;
    let mut best_risk = f64::INFINITY;
    let mut best_seg = 0usize;
    let mut offer = |value: f64, risk: f64, seg: usize, bv: &mut f64, br: &mut f64, bs: &mut usize| {
        if value > *bv || (value == *bv && risk < *br) {
            *bv = value;
            *br = risk;
            *bs = seg;
        }
    };
    offer(
        value_at(verts[0].risk, verts[0].lift),
        verts[0].risk,
        0,
        &mut best_value,
        &mut best_risk,
        &mut best_seg,
    );
    for seg in 0..verts.len().saturating_sub(1) {
        let (a, b) = (verts[seg], verts[seg + 1]);
        let span = b.risk - a.risk;
        let slope = (b.lift - a.lift) / span;
        let n = config.grid_points;
        for g in 0..n {
            let r = a.risk + span * (g as f64) / ((n - 1) as f64);
            let lift = a.lift + slope * (r - a.risk);
            offer(
                value_at(r, lift),
                r,
                seg,
                &mut best_value,
                &mut best_risk,
                &mut best_seg,
            );
        }
    }

    // Ternary refinement inside the winning grid cell's neighborhood.
    if verts.len() >= 2 {
        let (a, b) = (verts[best_seg], verts[best_seg + 1]);
        let span = b.risk - a.risk;
        let slope = (b.lift - a.lift) / span;
        let step = span / ((config.grid_points - 1) as f64);
        let mut lo = (best_risk - step).max(a.risk);
        let mut hi = (best_risk + step).min(b.risk);
        let seg_value = |r: f64| value_at(r, a.lift + slope * (r - a.risk));
        for _ in 0..200 {
            if hi - lo < 1e-15 {
                break;
            }
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            let (v1, v2) = (seg_value(m1), seg_value(m2));
            if v1 < v2 {
                lo = m1;
            } else {
                hi = m2;
            }
            if (v1 - v2).abs() < 1e-12 && hi - lo < 1e-9 {
                break;
            }
        }
        let r = 0.5 * (lo + hi);
        let v = seg_value(r);
        if v > best_value {
            best_value = v;
            best_risk = r;
        }
    }

    // Reconstruct the mixture realizing (best_risk, envelope lift).
    let weights: Vec<(usize, f64)> = if verts.len() == 1 {
        vec![(verts[0].index, 1.0)]
    } else {
        let (a, b) = (verts[best_seg], verts[best_seg + 1]);
        if best_risk <= a.risk {
            vec![(a.index, 1.0)]
        } else if best_risk >= b.risk {
            vec![(b.index, 1.0)]
        } else {
            let w = (b.risk - best_risk) / (b.risk - a.risk);
            vec![(a.index, w), (b.index, 1.0 - w)]
        }
    };
    let mut pi = vec![0.0; margins.len()];
    for (idx, w) in weights {
        pi[idx] += w;
    }
    let feasible = cap_feasible(margins, config);
    Ok(finish(pi, best_value, config.beta, feasible, margins, config))
}

/// Dispatches on the configured penalty.
pub fn solve(margins: &MarginSet, config: &GameConfig) -> Result<GameSolution, SolverError> {
    match config.penalty {
        PenaltyKind::HardCap => solve_hardcap(margins, config),
        PenaltyKind::Linear => solve_linear(margins, config),
        PenaltyKind::Sigmoid => solve_sigmoid(margins, config),
    }
}

/// Runs the configured solver and decides what to emit: the fallback when
/// the cap pre-check fails, otherwise the mixture argmax with ties broken
/// toward lower risk then lower index.
pub fn select(margins: &MarginSet, config: &GameConfig) -> Result<Selection, SolverError> {
    let solution = solve(margins, config)?;
    if !solution.feasible {
        return Ok(Selection {
            index: margins.fallback_index,
            is_fallback: true,
            solution,
        });
    }
    let index = solution.selected_index;
    let is_fallback = margins.fallback_index == Some(index);
    Ok(Selection {
        solution,
        index: Some(index),
        is_fallback,
    })
}

// ---------------------------------------------------------------------------
// Boundary diagnostics
// ---------------------------------------------------------------------------

/// Checks the boundary-selection property: whenever some candidate trades
/// risk for lift and every unconstrained lift maximizer violates the cap,
/// the hard-cap optimum must sit exactly on `R = T`. When the hypothesis
/// does not hold the certificate is vacuously true. A failed certificate is
/// cross-checked by searching for the improving mass shift the proof of the
/// property constructs.
pub fn boundary_certificate(margins: &MarginSet, config: &GameConfig) -> Result<bool, SolverError> {
    if config.penalty == PenaltyKind::Sigmoid {
        return Err(SolverError::InvalidConfig(
            "boundary certificate applies to hardcap or linear mode".into(),
        ));
    }
    config.validate()?;
    check_margins(margins)?;

    let tradeoff = (0..margins.len()).any(|i| margins.lift[i] > 0.0 && margins.risk[i] > 0.0);
    let m_max = margins.lift.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unconstrained_violates = (0..margins.len())
        .filter(|&i| margins.lift[i] == m_max)
        .all(|i| margins.risk[i] > config.cap);
    let feasible = cap_feasible(margins, config);
    let hypothesis = tradeoff && unconstrained_violates && feasible;
    if !hypothesis {
        return Ok(true);
    }

    let solution = solve_hardcap(margins, config)?;
    let on_boundary = (solution.expected_risk - config.cap).abs() <= BOUNDARY_TOL;
    if !on_boundary {
        // The optimum claims slack under the cap; the proof's mass shift
        // must then produce a strictly better feasible mixture.
        debug_assert!(improving_shift(margins, config, &solution.pi).is_some());
    }
    Ok(on_boundary)
}

/// Searches for the proof's refutation: move mass from a donor in the
/// support toward a higher-lift candidate without leaving the cap.
fn improving_shift(margins: &MarginSet, config: &GameConfig, pi: &[f64]) -> Option<(usize, usize, f64)> {
    let (_, risk) = mixture_moments(pi, margins);
    let room = config.cap - risk;
    for donor in 0..pi.len() {
        if pi[donor] <= 0.0 {
            continue;
        }
        for target in 0..pi.len() {
            if margins.lift[target] <= margins.lift[donor] {
                continue;
            }
            let risk_rate = margins.risk[target] - margins.risk[donor];
            let alpha = if risk_rate <= 0.0 {
                pi[donor]
            } else {
                pi[donor].min(room / risk_rate)
            };
            if alpha > 1e-12 {
                return Some((donor, target, alpha));
            }
        }
    }
    None
}

/// The two perturbation routes of the boundary-sensitivity property.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WitnessKind {
    /// Case (i): adding `epsilon` to one lift coordinate swaps which
    /// boundary extreme point is optimal.
    LiftBump { index: usize, epsilon: f64 },
    /// Case (ii): shrinking the cap to `new_cap` makes every mixture on the
    /// old boundary infeasible.
    CapShrink { new_cap: f64, epsilon: f64 },
}

/// A constructed and re-solve-verified boundary perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityWitness {
    pub kind: WitnessKind,
    /// The lift gap `|M(pi_a) - M(pi_b)|` that makes the boundary fragile.
    pub gap: f64,
}

/// Constructs a perturbation of size at most `eta` witnessing boundary
/// sensitivity for two near-tied extreme points on `R = T`: either a lift
/// bump that swaps the optimizer (case i) or a cap shrink that invalidates
/// the whole boundary (case ii). The effect is verified by re-solving.
pub fn sensitivity_witness(
    margins: &MarginSet,
    config: &GameConfig,
    pi_a: &[f64],
    pi_b: &[f64],
    eta: f64,
) -> Result<SensitivityWitness, SolverError> {
    config.validate()?;
    check_margins(margins)?;
    if !(eta > 0.0) {
        return Err(SolverError::WitnessNotConstructible(format!(
            "perturbation bound eta = {eta} must be positive"
        )));
    }
    if pi_a.len() != margins.len() || pi_b.len() != margins.len() {
        return Err(SolverError::WitnessNotConstructible(
            "mixture length does not match margin set".into(),
        ));
    }
    let (lift_a, risk_a) = mixture_moments(pi_a, margins);
    let (lift_b, risk_b) = mixture_moments(pi_b, margins);
    for (name, risk) in [("pi_a", risk_a), ("pi_b", risk_b)] {
        if (risk - config.cap).abs() > 1e-6 {
            return Err(SolverError::WitnessNotConstructible(format!(
                "{name} is not on the boundary: R = {risk}, T = {}",
                config.cap
            )));
        }
    }
    if pi_a == pi_b {
        return Err(SolverError::WitnessNotConstructible(
            "pi_a and pi_b must be distinct extreme points".into(),
        ));
    }
    let delta = (lift_a - lift_b).abs();

    // Bump toward the currently-worse point so the preference flips.
    let (lo, lo_lift, hi_lift): (&[f64], f64, f64) = if lift_a <= lift_b {
        (pi_a, lift_a, lift_b)
    } else {
        (pi_b, lift_b, lift_a)
    };
    let hi: &[f64] = if lift_a <= lift_b { pi_b } else { pi_a };

    let mut bump_index = None;
    let mut bump_gap = 0.0;
    for k in 0..margins.len() {
        let gap = lo[k] - hi[k];
        if gap > bump_gap {
            bump_gap = gap;
            bump_index = Some(k);
        }
    }

    if let Some(k) = bump_index {
        let epsilon = if delta == 0.0 { eta / 2.0 } else { (2.0 * delta / bump_gap).min(eta) };
        if epsilon * bump_gap > delta && epsilon <= eta {
            let mut bumped = margins.clone();
            bumped.lift[k] += epsilon;
            let lo_after = lo_lift + epsilon * lo[k];
            let hi_after = hi_lift + epsilon * hi[k];
            let resolved = solve_hardcap(&bumped, config)?;
            let swapped = lo_after > hi_after;
            let attained = resolved.objective >= lo_after - BOUNDARY_TOL;
            if swapped && attained {
                return Ok(SensitivityWitness {
                    kind: WitnessKind::LiftBump { index: k, epsilon },
                    gap: delta,
                });
            }
        }
    }

    // Case (ii): shrink the cap below the shared boundary.
    if config.cap > 0.0 {
        let epsilon = eta.min(config.cap) / 2.0;
        let new_cap = config.cap - epsilon;
        let shrunk = GameConfig {
            cap: new_cap,
            ..*config
        };
        let resolved = solve_hardcap(margins, &shrunk)?;
        let old_boundary_infeasible = risk_a > new_cap && risk_b > new_cap;
        let new_optimum_ok = !resolved.feasible || resolved.expected_risk <= new_cap + BOUNDARY_TOL;
        if old_boundary_infeasible && new_optimum_ok {
            return Ok(SensitivityWitness {
                kind: WitnessKind::CapShrink { new_cap, epsilon },
                gap: delta,
            });
        }
    }

    Err(SolverError::WitnessNotConstructible(format!(
        "neither a lift bump within eta = {eta} nor a cap shrink applies (delta = {delta})"
    )))
}
