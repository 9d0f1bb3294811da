//! Brute-force Hamming matching with mutual-nearest-neighbour, ratio and
//! distance gates.

use super::brief::{Descriptor, DESCRIPTOR_BITS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchPair {
    pub index_prev: usize,
    pub index_curr: usize,
    pub hamming: u32,
    /// `1 − hamming / 256`.
    pub score: f64,
}

pub fn score_from_hamming(hamming: u32) -> f64 {
    1.0 - hamming as f64 / DESCRIPTOR_BITS as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    pub max_hamming: u32,
    /// Best distance must be strictly below `ratio × second best`.
    pub ratio: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            max_hamming: 64,
            ratio: 0.8,
        }
    }
}

#[derive(Clone, Copy)]
struct Nearest {
    index: usize,
    best: u32,
    second: u32,
}

fn nearest_each(from: &[Descriptor], to: &[Descriptor]) -> Vec<Option<Nearest>> {
    from.iter()
        .map(|a| {
            let mut n: Option<Nearest> = None;
            for (j, b) in to.iter().enumerate() {
                let d = a.hamming(b);
                match &mut n {
                    None => {
                        n = Some(Nearest {
                            index: j,
                            best: d,
                            second: u32::MAX,
                        })
                    }
                    Some(cur) => {
                        if d < cur.best {
                            cur.second = cur.best;
                            cur.best = d;
                            cur.index = j;
                        } else if d < cur.second {
                            cur.second = d;
                        }
                    }
                }
            }
            n
        })
        .collect()
}

fn passes_ratio(n: &Nearest, ratio: f64) -> bool {
    n.second == u32::MAX || (n.best as f64) < ratio * n.second as f64
}

/// Mutual nearest neighbours between two descriptor sets. Every index
/// appears at most once; output is ordered by `index_prev`.
pub fn match_descriptors(
    prev: &[Descriptor],
    curr: &[Descriptor],
    params: &MatchParams,
) -> Vec<MatchPair> {
    if prev.is_empty() || curr.is_empty() {
        return Vec::new();
    }
    let fwd = nearest_each(prev, curr);
    let bwd = nearest_each(curr, prev);
    let mut out = Vec::new();
    for (i, f) in fwd.iter().enumerate() {
        let Some(f) = f else { continue };
        let Some(b) = &bwd[f.index] else { continue };
        if b.index != i || f.best > params.max_hamming {
            continue;
        }
        if !passes_ratio(f, params.ratio) || !passes_ratio(b, params.ratio) {
            continue;
        }
        out.push(MatchPair {
            index_prev: i,
            index_curr: f.index,
            hamming: f.best,
            score: score_from_hamming(f.best),
        });
    }
    out
}
