//! Endpoint-selection policies.
//!
//! The authoritative server picks one endpoint out of the healthy
//! candidates for a deployment record. Four policies: `static` (record
//! order), `geo_nearest` (great-circle distance), `least_load`, and
//! `weighted` (distance/load/cost blend). Ties are broken round-robin by a
//! per-record rotation counter owned by the server, so equal candidates
//! share load deterministically.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{haversine_km, Context, GeoPoint};
use crate::nameserver::EndpointCandidate;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TailorError {
    #[error("no candidates to select from")]
    NoCandidates,
    #[error("context is missing {0} required by the policy")]
    MissingContext(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Static,
    GeoNearest,
    LeastLoad,
    Weighted,
}

impl Policy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Policy::Static => "static",
            Policy::GeoNearest => "geo_nearest",
            Policy::LeastLoad => "least_load",
            Policy::Weighted => "weighted",
        }
    }

    /// Context field paths the policy itself reads.
    pub fn context_fields(&self, weights: &Weights) -> Vec<String> {
        match self {
            Policy::GeoNearest => vec!["geo.lat".into(), "geo.lon".into()],
            Policy::Weighted if weights.w_dist > 0.0 => vec!["geo.lat".into(), "geo.lon".into()],
            _ => Vec::new(),
        }
    }
}

/// Blend weights for the `weighted` policy. Score is
/// `w_dist * (dist / max_dist) + w_load * load + w_cost * (cost / max_cost)`
/// with per-query max normalizers; a degenerate max contributes zero for
/// every candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Weights {
    pub w_dist: f64,
    pub w_load: f64,
    pub w_cost: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self { w_dist: 0.5, w_load: 0.3, w_cost: 0.2 }
    }
}

impl Weights {
    pub fn validate(&self) -> Result<(), String> {
        let parts = [self.w_dist, self.w_load, self.w_cost];
        if parts.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err("weights must be finite and non-negative".into());
        }
        if parts.iter().sum::<f64>() <= 0.0 {
            return Err("weights must not all be zero".into());
        }
        Ok(())
    }
}

/// Inputs to a selection: healthy candidates only, plus requester context.
#[derive(Debug, Clone)]
pub struct PolicyInput<'a> {
    pub candidates: &'a [EndpointCandidate],
    pub requester_ctx: &'a Context,
    pub weights: Option<Weights>,
}

/// First candidate in record order.
pub fn select_static(input: &PolicyInput<'_>) -> Result<usize, TailorError> {
    if input.candidates.is_empty() {
        return Err(TailorError::NoCandidates);
    }
    Ok(0)
}

/// Candidate closest to the requester by great-circle distance.
pub fn select_geo_nearest(input: &PolicyInput<'_>, rotation: u64) -> Result<usize, TailorError> {
    if input.candidates.is_empty() {
        return Err(TailorError::NoCandidates);
    }
    let origin = input.requester_ctx.geo_point().ok_or(TailorError::MissingContext("geo"))?;
    let scores: Vec<f64> =
        input.candidates.iter().map(|c| haversine_km(&origin, &c.geo)).collect();
    Ok(argmin_rotated(&scores, rotation))
}

/// Candidate with the lowest current load fraction.
pub fn select_least_load(input: &PolicyInput<'_>, rotation: u64) -> Result<usize, TailorError> {
    if input.candidates.is_empty() {
        return Err(TailorError::NoCandidates);
    }
    let scores: Vec<f64> = input.candidates.iter().map(|c| c.current_load).collect();
    Ok(argmin_rotated(&scores, rotation))
}

/// Weighted blend of normalized distance, load, and normalized cost.
pub fn select_weighted(input: &PolicyInput<'_>, rotation: u64) -> Result<usize, TailorError> {
    if input.candidates.is_empty() {
        return Err(TailorError::NoCandidates);
    }
    let weights = input.weights.unwrap_or_default();
    let origin = if weights.w_dist > 0.0 {
        Some(input.requester_ctx.geo_point().ok_or(TailorError::MissingContext("geo"))?)
    } else {
        None
    };
    let scores = weighted_scores(input.candidates, origin.as_ref(), &weights);
    Ok(argmin_rotated(&scores, rotation))
}

/// Scores every candidate under the weighted formula; exposed so the
/// server can log them and tests can cross-check.
pub fn weighted_scores(
    candidates: &[EndpointCandidate],
    origin: Option<&GeoPoint>,
    weights: &Weights,
) -> Vec<f64> {
    let dists: Vec<f64> = candidates
        .iter()
        .map(|c| origin.map(|o| haversine_km(o, &c.geo)).unwrap_or(0.0))
        .collect();
    let max_dist = dists.iter().copied().fold(0.0f64, f64::max);
    let max_cost = candidates.iter().map(|c| c.cost_units_per_op).fold(0.0f64, f64::max);

    candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let dist_term = if max_dist > 0.0 { dists[i] / max_dist } else { 0.0 };
            let cost_term = if max_cost > 0.0 { c.cost_units_per_op / max_cost } else { 0.0 };
            weights.w_dist * dist_term + weights.w_load * c.current_load + weights.w_cost * cost_term
        })
        .collect()
}

/// Dispatch on the record's policy.
pub fn select(
    policy: Policy,
    input: &PolicyInput<'_>,
    rotation: u64,
) -> Result<usize, TailorError> {
    match policy {
        Policy::Static => select_static(input),
        Policy::GeoNearest => select_geo_nearest(input, rotation),
        Policy::LeastLoad => select_least_load(input, rotation),
        Policy::Weighted => select_weighted(input, rotation),
    }
}

// Indices tied for the minimum score, in candidate order, selected
// round-robin by the rotation counter.
fn argmin_rotated(scores: &[f64], rotation: u64) -> usize {
    debug_assert!(!scores.is_empty());
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let ties: Vec<usize> =
        scores.iter().enumerate().filter(|(_, s)| **s == min).map(|(i, _)| i).collect();
    ties[(rotation % ties.len() as u64) as usize]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::Geo;

    fn endpoint(url: &str, lat: f64, lon: f64, load: f64, cost: f64) -> EndpointCandidate {
        EndpointCandidate {
            url: url.into(),
            geo: GeoPoint { lat, lon },
            capacity_ops_per_s: 100.0,
            current_load: load,
            cost_units_per_op: cost,
            healthy: true,
        }
    }

    fn boston_ctx() -> Context {
        Context {
            geo: Some(Geo { lat: 42.36, lon: -71.06, city: Some("Boston".into()) }),
            ..Context::default()
        }
    }

    fn pair() -> Vec<EndpointCandidate> {
        vec![
            endpoint("https://bos.example", 42.36, -71.06, 0.9, 2.0),
            endpoint("https://fra.example", 50.11, 8.68, 0.1, 1.0),
        ]
    }

    #[test]
    fn static_takes_record_order() {
        let cands = pair();
        let ctx = Context::default();
        let input = PolicyInput { candidates: &cands, requester_ctx: &ctx, weights: None };
        assert_eq!(select_static(&input).unwrap(), 0);
        let one = &cands[..1];
        let input = PolicyInput { candidates: one, requester_ctx: &ctx, weights: None };
        assert_eq!(select_static(&input).unwrap(), 0);
        let input = PolicyInput { candidates: &[], requester_ctx: &ctx, weights: None };
        assert_eq!(select_static(&input), Err(TailorError::NoCandidates));
    }

    #[test]
    fn geo_nearest_picks_boston_for_boston() {
        let cands = pair();
        let ctx = boston_ctx();
        let input = PolicyInput { candidates: &cands, requester_ctx: &ctx, weights: None };
        assert_eq!(select_geo_nearest(&input, 0).unwrap(), 0);
    }

    #[test]
    fn geo_nearest_zero_distance_wins() {
        let cands = pair();
        let mut ctx = boston_ctx();
        ctx.geo = Some(Geo { lat: 50.11, lon: 8.68, city: None });
        let input = PolicyInput { candidates: &cands, requester_ctx: &ctx, weights: None };
        assert_eq!(select_geo_nearest(&input, 0).unwrap(), 1);
    }

    #[test]
    fn geo_nearest_needs_geo() {
        let cands = pair();
        let ctx = Context::default();
        let input = PolicyInput { candidates: &cands, requester_ctx: &ctx, weights: None };
        assert_eq!(select_geo_nearest(&input, 0), Err(TailorError::MissingContext("geo")));
    }

    #[test]
    fn least_load_prefers_idle() {
        let cands = pair();
        let ctx = Context::default();
        let input = PolicyInput { candidates: &cands, requester_ctx: &ctx, weights: None };
        assert_eq!(select_least_load(&input, 0).unwrap(), 1);
        let input = PolicyInput { candidates: &[], requester_ctx: &ctx, weights: None };
        assert_eq!(select_least_load(&input, 0), Err(TailorError::NoCandidates));
    }

    #[test]
    fn equal_loads_rotate_evenly() {
        let cands: Vec<EndpointCandidate> =
            (0..4).map(|i| endpoint(&format!("https://e{i}.example"), 0.0, 0.0, 0.25, 1.0)).collect();
        let ctx = Context::default();
        let input = PolicyInput { candidates: &cands, requester_ctx: &ctx, weights: None };
        let mut counts = [0u32; 4];
        for rotation in 0..400u64 {
            counts[select_least_load(&input, rotation).unwrap()] += 1;
        }
        assert_eq!(counts, [100; 4]);
    }

    #[test]
    fn one_hot_weights_reduce_to_single_factor_policies() {
        let cands = pair();
        let ctx = boston_ctx();
        let load_only = PolicyInput {
            candidates: &cands,
            requester_ctx: &ctx,
            weights: Some(Weights { w_dist: 0.0, w_load: 1.0, w_cost: 0.0 }),
        };
        assert_eq!(select_weighted(&load_only, 0).unwrap(), select_least_load(&load_only, 0).unwrap());

        let dist_only = PolicyInput {
            candidates: &cands,
            requester_ctx: &ctx,
            weights: Some(Weights { w_dist: 1.0, w_load: 0.0, w_cost: 0.0 }),
        };
        assert_eq!(select_weighted(&dist_only, 0).unwrap(), select_geo_nearest(&dist_only, 0).unwrap());
    }

    #[test]
    fn weighted_needs_geo_only_when_distance_counts() {
        let cands = pair();
        let ctx = Context::default();
        let input = PolicyInput {
            candidates: &cands,
            requester_ctx: &ctx,
            weights: Some(Weights { w_dist: 0.0, w_load: 0.5, w_cost: 0.5 }),
        };
        assert!(select_weighted(&input, 0).is_ok());
        let input = PolicyInput { candidates: &cands, requester_ctx: &ctx, weights: None };
        assert_eq!(select_weighted(&input, 0), Err(TailorError::MissingContext("geo")));
    }

    #[test]
    fn degenerate_max_cost_contributes_zero() {
        let cands = vec![
            endpoint("https://a.example", 0.0, 0.0, 0.5, 0.0),
            endpoint("https://b.example", 0.0, 0.0, 0.2, 0.0),
        ];
        let ctx = Context::default();
        let input = PolicyInput {
            candidates: &cands,
            requester_ctx: &ctx,
            weights: Some(Weights { w_dist: 0.0, w_load: 0.5, w_cost: 0.5 }),
        };
        // All costs zero: only load decides.
        assert_eq!(select_weighted(&input, 0).unwrap(), 1);
    }
}
