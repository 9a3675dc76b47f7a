use crate::alpha_search::CandidatePoint;

/// Smallest `alpha` at which the score falls more than `margin` below
/// `baseline` after some earlier point rose above it. `curve` must be sorted
/// by `alpha`.
pub fn detect_collapse(curve: &[CandidatePoint], baseline: f64, margin: f64) -> Option<f64> {
    let mut improved = false;
    for p in curve {
        if p.score > baseline {
            improved = true;
        } else if improved && p.score < baseline - margin {
            return Some(p.alpha);
        }
    }
    None
}
