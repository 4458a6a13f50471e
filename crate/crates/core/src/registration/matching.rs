use serde::{Deserialize, Serialize};

use super::Descriptor;

/// Default Lowe-style ratio bound.
pub const DEFAULT_RATIO: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub distance: u32,
}

/// One-to-one correspondences between two descriptor sets.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Nearest/second-nearest ratio test from `a` into `b`, then greedy
/// lowest-distance one-to-one selection.
pub fn match_descriptors(a: &[Descriptor], b: &[Descriptor], ratio: f64) -> MatchSet {
    if a.is_empty() || b.is_empty() {
        return MatchSet::default();
    }
    let candidates: Vec<Option<Match>> = crate::par::map_range(a.len(), |i| {
        let da = &a[i];
        let mut best = (u32::MAX, usize::MAX);
        let mut second = u32::MAX;
        for (j, db) in b.iter().enumerate() {
            let d = da.distance(db);
            if d < best.0 {
                second = best.0;
                best = (d, j);
            } else if d < second {
                second = d;
            }
        }
        let second = if second == u32::MAX { 256 } else { second };
        ((best.0 as f64) < ratio * second as f64).then_some(Match {
            a: i,
            b: best.1,
            distance: best.0,
        })
    });
    let mut candidates: Vec<Match> = candidates.into_iter().flatten().collect();
    candidates.sort_by_key(|m| (m.distance, m.a, m.b));
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::with_capacity(candidates.len());
    for m in candidates {
        if !used_a[m.a] && !used_b[m.b] {
            used_a[m.a] = true;
            used_b[m.b] = true;
            pairs.push(m);
        }
    }
    pairs.sort_by_key(|m| m.a);
    MatchSet { pairs }
}
