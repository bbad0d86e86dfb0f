//! Candidate ranking with CSLS rescaling and retrieval metrics, including
//! degree-stratified reporting.

use serde::{Deserialize, Serialize};

use crate::alignloss::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Retrieval quality over a set of gold pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub h1: f64,
    pub h10: f64,
    pub mrr: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strata: Option<Vec<StratumReport>>,
}

/// Metrics for one degree-sum stratum of the gold pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratumReport {
    pub degsum_min: usize,
    pub degsum_max: usize,
    pub h1: f64,
    pub h10: f64,
    pub mrr: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// CSV form for plotting: one `overall` row plus one row per stratum.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,degsum_min,degsum_max,h1,h10,mrr,n\n");
        out.push_str(&format!(
            "overall,,,{},{},{},{}\n",
            self.h1, self.h10, self.mrr, self.n
        ));
        if let Some(strata) = &self.strata {
            for (i, s) in strata.iter().enumerate() {
                out.push_str(&format!(
                    "stratum{},{},{},{},{},{},{}\n",
                    i, s.degsum_min, s.degsum_max, s.h1, s.h10, s.mrr, s.n
                ));
            }
        }
        out
    }
}

/// Cross-domain similarity local scaling: `2 * s_ij - r_row(i) - r_col(j)`
/// where the `r` terms are the means of the `k` largest entries of row `i`
/// and column `j`. Penalizes hubs that are near everything.
pub fn csls_adjust(sim: &SimilarityMatrix, k: usize) -> Result<SimilarityMatrix> {
    let (rows, cols) = (sim.rows(), sim.cols());
    if k < 1 || k > rows.min(cols) {
        return Err(Error::Invalid(format!(
            "csls neighbourhood k = {k} out of range for a {rows}x{cols} matrix"
        )));
    }
    let mut row_mean = vec![0.0f64; rows];
    for (i, slot) in row_mean.iter_mut().enumerate() {
        *slot = top_k_mean(sim.values().row(i), k);
    }
    let mut col_mean = vec![0.0f64; cols];
    let mut col_buf = vec![0.0f64; rows];
    for (j, slot) in col_mean.iter_mut().enumerate() {
        for i in 0..rows {
            col_buf[i] = sim.get(i, j);
        }
        *slot = top_k_mean(&col_buf, k);
    }
    let adjusted = Matrix::from_fn(rows, cols, |i, j| {
        2.0 * sim.get(i, j) - row_mean[i] - col_mean[j]
    });
    SimilarityMatrix::from_scores(adjusted)
}

fn top_k_mean(values: &[f64], k: usize) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable_by(|a, b| b.total_cmp(a));
    v[..k].iter().sum::<f64>() / k as f64
}

/// Target indices sorted by descending score; ties break toward the lower
/// index.
pub fn rank_targets(sim: &SimilarityMatrix, query: usize) -> Result<Vec<usize>> {
    if query >= sim.rows() {
        return Err(Error::Invalid(format!(
            "query row {query} out of {} rows",
            sim.rows()
        )));
    }
    let mut order: Vec<usize> = (0..sim.cols()).collect();
    order.sort_by(|&a, &b| {
        sim.get(query, a)
            .total_cmp(&sim.get(query, b))
            .reverse()
            .then(a.cmp(&b))
    });
    Ok(order)
}

/// 1-based rank of column `gold` among all candidates for row `query`,
/// counting strictly better scores plus equal-scored lower indices.
fn rank_of(sim: &SimilarityMatrix, query: usize, gold: usize) -> usize {
    let gold_score = sim.get(query, gold);
    let mut rank = 1;
    for j in 0..sim.cols() {
        let s = sim.get(query, j);
        if s > gold_score || (s == gold_score && j < gold) {
            rank += 1;
        }
    }
    rank
}

/// H@1, H@10 and MRR of the gold pairs, each ranked against every
/// candidate column. `gold` holds `(row, column)` indices into `sim`.
pub fn evaluate(
    sim: &SimilarityMatrix,
    gold: &[(usize, usize)],
    use_csls: bool,
    csls_k: usize,
) -> Result<EvalReport> {
    if gold.is_empty() {
        return Err(Error::Invalid("empty gold pair list".to_string()));
    }
    for &(q, t) in gold {
        if q >= sim.rows() || t >= sim.cols() {
            return Err(Error::Invalid(format!(
                "gold pair ({q}, {t}) outside a {}x{} matrix",
                sim.rows(),
                sim.cols()
            )));
        }
    }
    let adjusted;
    let scores = if use_csls {
        adjusted = csls_adjust(sim, csls_k)?;
        &adjusted
    } else {
        sim
    };
    let mut h1 = 0usize;
    let mut h10 = 0usize;
    let mut reciprocal = 0.0f64;
    for &(q, t) in gold {
        let rank = rank_of(scores, q, t);
        if rank <= 1 {
            h1 += 1;
        }
        if rank <= 10 {
            h10 += 1;
        }
        reciprocal += 1.0 / rank as f64;
    }
    let n = gold.len();
    Ok(EvalReport {
        h1: h1 as f64 / n as f64,
        h10: h10 as f64 / n as f64,
        mrr: reciprocal / n as f64,
        n,
        strata: None,
    })
}

/// Evaluate with the gold pairs additionally split into `n_strata`
/// equal-size groups by ascending degree sum (`deg_sums[i]` belongs to
/// `gold[i]`); any remainder goes to the lowest strata. Ties in degree sum
/// keep the gold list's order.
pub fn stratified_evaluate(
    sim: &SimilarityMatrix,
    gold: &[(usize, usize)],
    deg_sums: &[usize],
    n_strata: usize,
    use_csls: bool,
    csls_k: usize,
) -> Result<EvalReport> {
    if deg_sums.len() != gold.len() {
        return Err(Error::Invalid(format!(
            "{} degree sums for {} gold pairs",
            deg_sums.len(),
            gold.len()
        )));
    }
    if n_strata == 0 || gold.len() < n_strata {
        return Err(Error::Invalid(format!(
            "cannot split {} pairs into {} strata",
            gold.len(),
            n_strata
        )));
    }
    let mut report = evaluate(sim, gold, use_csls, csls_k)?;

    let mut order: Vec<usize> = (0..gold.len()).collect();
    // Stable sort: equal degree sums keep gold-list (source id) order.
    order.sort_by_key(|&i| deg_sums[i]);

    let base = gold.len() / n_strata;
    let remainder = gold.len() % n_strata;
    let mut strata = Vec::with_capacity(n_strata);
    let mut cursor = 0usize;
    for s in 0..n_strata {
        let size = base + usize::from(s < remainder);
        let members = &order[cursor..cursor + size];
        cursor += size;
        let pairs: Vec<(usize, usize)> = members.iter().map(|&i| gold[i]).collect();
        let sums: Vec<usize> = members.iter().map(|&i| deg_sums[i]).collect();
        let sub = evaluate(sim, &pairs, use_csls, csls_k)?;
        strata.push(StratumReport {
            degsum_min: sums.iter().copied().min().unwrap(),
            degsum_max: sums.iter().copied().max().unwrap(),
            h1: sub.h1,
            h10: sub.h10,
            mrr: sub.mrr,
            n: sub.n,
        });
    }
    report.strata = Some(strata);
    Ok(report)
}
