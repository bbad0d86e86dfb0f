//! Training-pivot production: greedy induction of visually similar pairs
//! for the unsupervised setting, and probation-gated growth of the
//! training set from mutual nearest neighbours.

use std::collections::{BTreeMap, HashSet};

use crate::alignloss::SimilarityMatrix;
use crate::error::{Error, Result};

/// A proposed cross-graph pair with the similarity that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPivot {
    pub source: usize,
    pub target: usize,
    pub score: f64,
}

/// Greedy selection of the `n` highest-scoring pairs without repeating an
/// entity on either side: all entries are sorted descending (ties broken
/// by ascending row then column), then accepted in order whenever both the
/// row and the column are still unused.
pub fn induce_visual_pivots(sim: &SimilarityMatrix, n: usize) -> Result<Vec<ScoredPivot>> {
    let (rows, cols) = (sim.rows(), sim.cols());
    if n > rows.min(cols) {
        return Err(Error::Invalid(format!(
            "requested {n} pivots from a {rows}x{cols} similarity matrix"
        )));
    }
    let mut entries: Vec<(usize, usize)> = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            entries.push((i, j));
        }
    }
    entries.sort_unstable_by(|&(ai, aj), &(bi, bj)| {
        sim.get(bi, bj)
            .total_cmp(&sim.get(ai, aj))
            .then(ai.cmp(&bi))
            .then(aj.cmp(&bj))
    });

    let mut used_rows = vec![false; rows];
    let mut used_cols = vec![false; cols];
    let mut accepted = Vec::with_capacity(n);
    for (i, j) in entries {
        if accepted.len() == n {
            break;
        }
        if !used_rows[i] && !used_cols[j] {
            used_rows[i] = true;
            used_cols[j] = true;
            accepted.push(ScoredPivot {
                source: i,
                target: j,
                score: sim.get(i, j),
            });
        }
    }
    Ok(accepted)
}

/// Drop pairs scoring below `min_score`, keeping acceptance order.
pub fn threshold_pivots(pivots: &[ScoredPivot], min_score: f64) -> Vec<ScoredPivot> {
    pivots
        .iter()
        .filter(|p| p.score >= min_score)
        .copied()
        .collect()
}

/// Iterative-learning cadence: a proposal round every `k_e` epochs, and
/// `k_s` consecutive proposals before a candidate becomes permanent.
#[derive(Debug, Clone)]
pub struct ILConfig {
    pub k_e: usize,
    pub k_s: usize,
}

impl Default for ILConfig {
    fn default() -> Self {
        ILConfig { k_e: 5, k_s: 10 }
    }
}

impl ILConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_e < 1 || self.k_s < 1 {
            return Err(Error::Config("k_e and k_s must be at least 1".into()));
        }
        Ok(())
    }
}

/// Permanent training pivots plus probation candidates with their
/// consecutive-round streaks.
#[derive(Debug, Clone)]
pub struct PivotLedger {
    permanent: Vec<(usize, usize)>,
    permanent_sources: HashSet<usize>,
    permanent_targets: HashSet<usize>,
    candidates: BTreeMap<(usize, usize), usize>,
    round_counter: usize,
}

impl PivotLedger {
    /// Start from a seed set, which becomes the initial permanent pivots.
    pub fn new(seeds: &[(usize, usize)]) -> Result<Self> {
        let mut ledger = PivotLedger {
            permanent: Vec::new(),
            permanent_sources: HashSet::new(),
            permanent_targets: HashSet::new(),
            candidates: BTreeMap::new(),
            round_counter: 0,
        };
        for &(s, t) in seeds {
            ledger.insert_permanent(s, t)?;
        }
        Ok(ledger)
    }

    fn insert_permanent(&mut self, s: usize, t: usize) -> Result<()> {
        if !self.permanent_sources.insert(s) {
            return Err(Error::Invalid(format!(
                "pivot source entity {s} already aligned"
            )));
        }
        if !self.permanent_targets.insert(t) {
            self.permanent_sources.remove(&s);
            return Err(Error::Invalid(format!(
                "pivot target entity {t} already aligned"
            )));
        }
        self.permanent.push((s, t));
        Ok(())
    }

    pub fn permanent(&self) -> &[(usize, usize)] {
        &self.permanent
    }

    pub fn permanent_len(&self) -> usize {
        self.permanent.len()
    }

    pub fn is_source_aligned(&self, s: usize) -> bool {
        self.permanent_sources.contains(&s)
    }

    pub fn is_target_aligned(&self, t: usize) -> bool {
        self.permanent_targets.contains(&t)
    }

    pub fn candidates(&self) -> &BTreeMap<(usize, usize), usize> {
        &self.candidates
    }

    pub fn rounds(&self) -> usize {
        self.round_counter
    }

    /// Serialize candidates for checkpointing.
    pub fn candidate_list(&self) -> Vec<(usize, usize, usize)> {
        self.candidates
            .iter()
            .map(|(&(s, t), &streak)| (s, t, streak))
            .collect()
    }

    pub fn restore_candidates(&mut self, entries: &[(usize, usize, usize)], rounds: usize) {
        self.candidates = entries.iter().map(|&(s, t, k)| ((s, t), k)).collect();
        self.round_counter = rounds;
    }

    /// One proposal round over the similarity matrix of currently
    /// unaligned entities. `source_ids[i]` / `target_ids[j]` give the
    /// global entity ids of row `i` / column `j`; none of them may belong
    /// to a permanent pair.
    ///
    /// Mutual nearest neighbours are proposed; recurring candidates gain a
    /// streak, absent ones are evicted, and a candidate reaching `k_s`
    /// consecutive rounds is promoted to permanent.
    pub fn propose_round(
        &mut self,
        sim: &SimilarityMatrix,
        source_ids: &[usize],
        target_ids: &[usize],
        cfg: &ILConfig,
    ) -> Result<()> {
        cfg.validate()?;
        if sim.rows() != source_ids.len() || sim.cols() != target_ids.len() {
            return Err(Error::Shape(format!(
                "similarity is {}x{} for {} source / {} target ids",
                sim.rows(),
                sim.cols(),
                source_ids.len(),
                target_ids.len()
            )));
        }
        for &s in source_ids {
            if self.is_source_aligned(s) {
                return Err(Error::Invalid(format!(
                    "source entity {s} is already permanently aligned"
                )));
            }
        }
        for &t in target_ids {
            if self.is_target_aligned(t) {
                return Err(Error::Invalid(format!(
                    "target entity {t} is already permanently aligned"
                )));
            }
        }

        // Mutual nearest neighbours; argmax ties resolve to the lowest
        // index, and the ordered set keeps promotion order deterministic.
        let proposed: std::collections::BTreeSet<(usize, usize)> = mutual_nearest_neighbors(sim)
            .into_iter()
            .map(|(i, j)| (source_ids[i], target_ids[j]))
            .collect();

        let mut next = BTreeMap::new();
        let mut promoted = Vec::new();
        for pair in &proposed {
            let streak = self.candidates.get(pair).copied().unwrap_or(0) + 1;
            if streak >= cfg.k_s {
                promoted.push(*pair);
            } else {
                next.insert(*pair, streak);
            }
        }
        self.candidates = next;
        for (s, t) in promoted {
            self.insert_permanent(s, t)?;
        }
        // A promotion consumes its entities: drop candidates that now
        // collide with a permanent pair.
        self.candidates.retain(|&(s, t), _| {
            !self.permanent_sources.contains(&s) && !self.permanent_targets.contains(&t)
        });
        self.round_counter += 1;
        Ok(())
    }
}

/// Pairs `(i, j)` where `j` is the argmax of row `i` and `i` is the argmax
/// of column `j`.
pub fn mutual_nearest_neighbors(sim: &SimilarityMatrix) -> Vec<(usize, usize)> {
    let (rows, cols) = (sim.rows(), sim.cols());
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let mut row_best = vec![0usize; rows];
    for (i, best) in row_best.iter_mut().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for j in 0..cols {
            let v = sim.get(i, j);
            if v > max {
                max = v;
                *best = j;
            }
        }
    }
    let mut col_best = vec![0usize; cols];
    for (j, best) in col_best.iter_mut().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for i in 0..rows {
            let v = sim.get(i, j);
            if v > max {
                max = v;
                *best = i;
            }
        }
    }
    (0..rows)
        .filter(|&i| col_best[row_best[i]] == i)
        .map(|i| (i, row_best[i]))
        .collect()
}
