//! Cross-graph similarity and the alignment objective.
//!
//! The objective contrasts each pivot pair's similarity against every
//! other in-batch pair in both directions, with temperature-weighted
//! log-sum-exp terms, and rewards the matched-pair similarity itself. One
//! such term runs per modality on that modality's own row-normalized
//! embedding; an additional term on the fused representation trains the
//! modality weights only, enforced by a stop-gradient on the fused term's
//! embedding blocks.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kgdata::Modality;
use crate::numcore::{CustomOp, Matrix, NodeId, SparseMatrix, Tape};
use crate::{encoders, kgdata};

/// Temperatures for the loss terms. The structure term runs cooler than
/// the feature-backed and fused terms.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub alpha_structure: f64,
    pub alpha_other: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha_structure: 5.0,
            alpha_other: 15.0,
            beta: 10.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_structure <= 0.0 || self.alpha_other <= 0.0 || self.beta <= 0.0 {
            return Err(Error::Config(
                "loss temperatures must be positive".to_string(),
            ));
        }
        Ok(())
    }

    pub fn alpha(&self, modality: Modality) -> f64 {
        match modality {
            Modality::Structure => self.alpha_structure,
            _ => self.alpha_other,
        }
    }
}

/// Dense cross-graph similarity scores. Rows index source-batch entities,
/// columns target-batch entities. Cosine-valued instances stay within
/// `[-1, 1]`; CSLS-adjusted scores may leave that range.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    values: Matrix,
}

impl SimilarityMatrix {
    /// Wrap a cosine matrix, enforcing the `|S_ij| <= 1 + 1e-9` bound.
    pub fn from_cosine(values: Matrix) -> Result<Self> {
        values.ensure_finite("similarity matrix")?;
        if let Some(v) = values.data().iter().find(|v| v.abs() > 1.0 + 1e-9) {
            return Err(Error::Invalid(format!(
                "cosine similarity {v} outside [-1, 1]"
            )));
        }
        Ok(SimilarityMatrix { values })
    }

    /// Wrap scores that are not cosine-bounded (CSLS-adjusted, synthetic
    /// stress inputs).
    pub fn from_scores(values: Matrix) -> Result<Self> {
        values.ensure_finite("similarity matrix")?;
        Ok(SimilarityMatrix { values })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }
}

/// Pairwise cosine similarities between the rows of `a` and the rows of
/// `b`. Zero-norm rows yield zero similarity.
pub fn cosine_matrix(a: &Matrix, b: &Matrix) -> Result<SimilarityMatrix> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "cosine: widths {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let na = crate::numcore::row_l2_normalize(a);
    let nb = crate::numcore::row_l2_normalize(b);
    let mut values = na.matmul_nt(&nb)?;
    // Guard against last-ulp overshoot so the cosine bound holds exactly.
    for v in values.data_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    SimilarityMatrix::from_cosine(values)
}

/// Margin below which the matched-pair similarity is clamped before the
/// `log(1 + beta * s)` reward, keeping the logarithm finite. Pivot
/// similarities are positive in practice; the clamp only matters for
/// adversarial inputs and eats the gradient there.
fn diag_clamp(beta: f64) -> f64 {
    -1.0 / beta + 1e-6
}

/// Loss value and gradient with respect to the similarity entries.
pub(crate) fn nca_value_and_grad(s: &Matrix, alpha: f64, beta: f64) -> Result<(f64, Matrix)> {
    let n = s.rows();
    if n == 0 || s.cols() != n {
        return Err(Error::Shape(format!(
            "alignment loss needs a square nonempty matrix, got {}x{}",
            n,
            s.cols()
        )));
    }
    let inv_n = 1.0 / n as f64;
    let clamp = diag_clamp(beta);

    // log(1 + sum_{j != i} exp(alpha * s_ij)) per row and per column, with
    // the constant 1 folded into the log-sum-exp as exp(0).
    let mut row_max = vec![0.0f64; n];
    let mut col_max = vec![0.0f64; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = alpha * s.get(i, j);
                row_max[i] = row_max[i].max(v);
                col_max[j] = col_max[j].max(v);
            }
        }
    }
    let mut row_denom = vec![0.0f64; n];
    let mut col_denom = vec![0.0f64; n];
    for i in 0..n {
        row_denom[i] = (-row_max[i]).exp();
        col_denom[i] = (-col_max[i]).exp();
    }
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = alpha * s.get(i, j);
                row_denom[i] += (v - row_max[i]).exp();
                col_denom[j] += (v - col_max[j]).exp();
            }
        }
    }

    let mut loss = 0.0;
    for i in 0..n {
        let row_lse = row_max[i] + row_denom[i].ln();
        let col_lse = col_max[i] + col_denom[i].ln();
        let sii = s.get(i, i).max(clamp);
        loss += (row_lse + col_lse) / alpha - (beta * sii).ln_1p();
    }
    loss *= inv_n;

    let mut grad = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                let sii = s.get(i, i);
                let g = if sii > clamp {
                    -inv_n * beta / (1.0 + beta * sii)
                } else {
                    0.0
                };
                grad.set(i, i, g);
            } else {
                let v = alpha * s.get(i, j);
                let from_row = (v - row_max[i]).exp() / row_denom[i];
                let from_col = (v - col_max[j]).exp() / col_denom[j];
                grad.set(i, j, inv_n * (from_row + from_col));
            }
        }
    }
    Ok((loss, grad))
}

/// Alignment loss over an `N x N` batch similarity matrix whose i-th row
/// and column belong to the i-th pivot pair.
pub fn nca_loss(s: &SimilarityMatrix, alpha: f64, beta: f64) -> Result<f64> {
    if alpha <= 0.0 || beta <= 0.0 {
        return Err(Error::Config("temperatures must be positive".into()));
    }
    Ok(nca_value_and_grad(s.values(), alpha, beta)?.0)
}

/// Tape op wrapping [`nca_value_and_grad`].
struct NcaLossOp {
    alpha: f64,
    beta: f64,
}

impl CustomOp for NcaLossOp {
    fn name(&self) -> &'static str {
        "nca_loss"
    }

    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        let (loss, _) = nca_value_and_grad(inputs[0], self.alpha, self.beta)?;
        Matrix::from_vec(1, 1, vec![loss])
    }

    fn backward(&self, inputs: &[&Matrix], grad_out: &Matrix, input_grads: &mut [Matrix]) {
        let g = grad_out.get(0, 0);
        let (_, grad) = nca_value_and_grad(inputs[0], self.alpha, self.beta)
            .expect("forward already validated the shape");
        for (d, &gv) in input_grads[0].data_mut().iter_mut().zip(grad.data()) {
            *d += g * gv;
        }
    }
}

/// Which loss terms to evaluate. The full objective uses both; dropping
/// the per-modality terms isolates the weight-training fused term.
#[derive(Debug, Clone, Copy)]
pub struct TermSelection {
    pub per_modality: bool,
    pub fused: bool,
}

impl Default for TermSelection {
    fn default() -> Self {
        TermSelection {
            per_modality: true,
            fused: true,
        }
    }
}

/// Handles to the assembled loss terms on a tape.
pub struct JointLossNodes {
    pub total: NodeId,
    pub per_modality: Vec<(Modality, NodeId)>,
    pub fused: Option<NodeId>,
}

/// Append the joint objective to a recorded forward pass.
///
/// `batch` holds global row indices (source entity rows and offset target
/// rows) of the in-batch pivots. Per-modality terms score each modality's
/// own normalized embedding; the fused term concatenates
/// weight-scaled *detached* blocks so its gradient reaches the modality
/// logits only.
///
/// `frozen_fused`, when given, replaces the live detached blocks of the
/// fused term by the supplied constants. Finite differences cannot see a
/// stop-gradient, so gradient checks probe the loss with the blocks
/// frozen at the base point, where the two forms agree in value and
/// gradient.
pub fn joint_loss_on_tape(
    tape: &mut Tape,
    forward: &encoders::TapeForward,
    batch: &[(usize, usize)],
    cfg: &LossConfig,
    terms: TermSelection,
    frozen_fused: Option<&[(Matrix, Matrix)]>,
) -> Result<JointLossNodes> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Invalid("empty pivot batch".to_string()));
    }
    let source_rows = Rc::new(batch.iter().map(|&(s, _)| s).collect::<Vec<_>>());
    let target_rows = Rc::new(batch.iter().map(|&(_, t)| t).collect::<Vec<_>>());

    let mut normalized_pairs = Vec::new();
    let mut per_modality = Vec::new();
    for &(modality, emb) in &forward.modality_embeddings {
        let gs = tape.gather_rows(emb, source_rows.clone())?;
        let gt = tape.gather_rows(emb, target_rows.clone())?;
        let ns = tape.row_l2_normalize(gs);
        let nt = tape.row_l2_normalize(gt);
        normalized_pairs.push((modality, ns, nt));
        if terms.per_modality {
            let sim = tape.matmul_nt(ns, nt)?;
            let loss = tape.custom(
                &[sim],
                Rc::new(NcaLossOp {
                    alpha: cfg.alpha(modality),
                    beta: cfg.beta,
                }),
            )?;
            per_modality.push((modality, loss));
        }
    }

    let fused = if terms.fused {
        if let Some(frozen) = frozen_fused {
            if frozen.len() != normalized_pairs.len() {
                return Err(Error::Shape(format!(
                    "{} frozen fused blocks for {} modalities",
                    frozen.len(),
                    normalized_pairs.len()
                )));
            }
        }
        let mut blocks_s = Vec::new();
        let mut blocks_t = Vec::new();
        for (i, &(_, ns, nt)) in normalized_pairs.iter().enumerate() {
            let (ds, dt) = match frozen_fused {
                Some(frozen) => {
                    let (fs, ft) = &frozen[i];
                    (tape.leaf(fs.clone()), tape.leaf(ft.clone()))
                }
                None => (tape.detach(ns), tape.detach(nt)),
            };
            blocks_s.push(tape.scale_entry(ds, forward.weights, i)?);
            blocks_t.push(tape.scale_entry(dt, forward.weights, i)?);
        }
        let fused_s = tape.concat_cols(&blocks_s)?;
        let fused_t = tape.concat_cols(&blocks_t)?;
        let nfs = tape.row_l2_normalize(fused_s);
        let nft = tape.row_l2_normalize(fused_t);
        let sim = tape.matmul_nt(nfs, nft)?;
        Some(tape.custom(
            &[sim],
            Rc::new(NcaLossOp {
                alpha: cfg.alpha_other,
                beta: cfg.beta,
            }),
        )?)
    } else {
        None
    };

    let mut term_ids: Vec<NodeId> = per_modality.iter().map(|&(_, id)| id).collect();
    term_ids.extend(fused);
    let mut total = *term_ids
        .first()
        .ok_or_else(|| Error::Invalid("no loss terms selected".to_string()))?;
    for &t in &term_ids[1..] {
        total = tape.add(total, t)?;
    }
    Ok(JointLossNodes {
        total,
        per_modality,
        fused,
    })
}

/// One full loss evaluation: forward, objective, backward.
pub struct JointLossEval {
    pub loss: f64,
    /// Term values keyed by modality name plus `"fused"`.
    pub terms: Vec<(String, f64)>,
    /// Gradients parallel to [`encoders::ModelParams::named`].
    pub grads: Vec<(String, Matrix)>,
}

/// The row-normalized per-modality batch blocks the fused term consumes,
/// evaluated at the given parameters. Feed these back through
/// `joint_loss_with_frozen_fused` to probe the loss with finite
/// differences under stop-gradient semantics.
pub fn fused_input_blocks(
    params: &encoders::ModelParams,
    adjacency: Option<&Rc<SparseMatrix>>,
    features: &[(kgdata::Modality, Matrix)],
    batch: &[(usize, usize)],
) -> Result<Vec<(Matrix, Matrix)>> {
    let embeddings = encoders::embed_entities(params, adjacency.map(Rc::as_ref), features)?;
    let mut out = Vec::new();
    for per in &embeddings.per_modality {
        let take = |rows: &dyn Fn(&(usize, usize)) -> usize| -> Result<Matrix> {
            let picked: Vec<Vec<f64>> = batch.iter().map(|p| per.row(rows(p)).to_vec()).collect();
            Matrix::from_rows(&picked)
        };
        let gs = take(&|&(s, _)| s)?;
        let gt = take(&|&(_, t)| t)?;
        out.push((
            crate::numcore::row_l2_normalize(&gs),
            crate::numcore::row_l2_normalize(&gt),
        ));
    }
    Ok(out)
}

/// Evaluate the joint objective and its parameter gradients for one batch
/// of pivots given in global row indices.
pub fn joint_loss(
    params: &encoders::ModelParams,
    adjacency: Option<&Rc<SparseMatrix>>,
    features: &[(kgdata::Modality, Matrix)],
    batch: &[(usize, usize)],
    cfg: &LossConfig,
    terms: TermSelection,
) -> Result<JointLossEval> {
    joint_loss_impl(params, adjacency, features, batch, cfg, terms, None)
}

/// [`joint_loss`] with the fused term's embedding blocks pinned to
/// constants, exposing the stop-gradient semantics to finite differences.
pub fn joint_loss_with_frozen_fused(
    params: &encoders::ModelParams,
    adjacency: Option<&Rc<SparseMatrix>>,
    features: &[(kgdata::Modality, Matrix)],
    batch: &[(usize, usize)],
    cfg: &LossConfig,
    terms: TermSelection,
    frozen_fused: &[(Matrix, Matrix)],
) -> Result<JointLossEval> {
    joint_loss_impl(
        params,
        adjacency,
        features,
        batch,
        cfg,
        terms,
        Some(frozen_fused),
    )
}

fn joint_loss_impl(
    params: &encoders::ModelParams,
    adjacency: Option<&Rc<SparseMatrix>>,
    features: &[(kgdata::Modality, Matrix)],
    batch: &[(usize, usize)],
    cfg: &LossConfig,
    terms: TermSelection,
    frozen_fused: Option<&[(Matrix, Matrix)]>,
) -> Result<JointLossEval> {
    let mut tape = Tape::new();
    let forward = encoders::build_tape_forward(&mut tape, params, adjacency, features)?;
    let nodes = joint_loss_on_tape(&mut tape, &forward, batch, cfg, terms, frozen_fused)?;
    let grads = tape.backward(nodes.total)?;

    let mut term_values = Vec::new();
    for &(m, id) in &nodes.per_modality {
        term_values.push((m.name().to_string(), tape.scalar(id)));
    }
    if let Some(f) = nodes.fused {
        term_values.push(("fused".to_string(), tape.scalar(f)));
    }
    let named_grads = forward
        .param_leaves
        .iter()
        .map(|(name, id)| (name.clone(), grads.get(*id).clone()))
        .collect();
    Ok(JointLossEval {
        loss: tape.scalar(nodes.total),
        terms: term_values,
        grads: named_grads,
    })
}
