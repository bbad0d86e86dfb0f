//! Training orchestration: batching, optimization, the base phase plus the
//! iterative-learning phase, ablations, and trained-model evaluation.

pub mod adamw;
pub mod checkpoint;

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::seq::SliceRandom;

use crate::alignloss::{cosine_matrix, joint_loss, LossConfig, TermSelection};
use crate::encoders::{
    embed_entities, sparse_adjacency, stacked_features, EmbeddingSet, ModelDims, ModelParams,
};
use crate::error::{Error, Result};
use crate::inference::{csls_adjust, evaluate, stratified_evaluate, EvalReport};
use crate::kgdata::{AlignmentTask, Modality};
use crate::numcore::{Matrix, SparseMatrix};
use crate::rng::stream_rng;
use crate::seeding::{induce_visual_pivots, threshold_pivots, ILConfig, PivotLedger, ScoredPivot};

pub use adamw::{adamw_step, AdamWConfig, Moments};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub base_epochs: usize,
    pub il_epochs: usize,
    pub rng_seed: u64,
    pub il: ILConfig,
    pub loss: LossConfig,
    pub dims: ModelDims,
    /// Modalities removed from the model before training.
    pub disabled: Vec<Modality>,
    pub unsupervised: bool,
    /// Number of visual pivots to induce (unsupervised only).
    pub visual_pivot_count: Option<usize>,
    /// Similarity cut-off applied to induced pivots (unsupervised only).
    pub visual_pivot_threshold: Option<f64>,
    /// Score pivot proposals with CSLS instead of plain cosine.
    pub il_use_csls: bool,
    pub csls_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            batch_size: 7500,
            base_epochs: 500,
            il_epochs: 500,
            rng_seed: 0,
            il: ILConfig::default(),
            loss: LossConfig::default(),
            dims: ModelDims::default(),
            disabled: Vec::new(),
            unsupervised: false,
            visual_pivot_count: None,
            visual_pivot_threshold: None,
            il_use_csls: false,
            csls_k: 3,
        }
    }
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub pivot_count: usize,
    pub weights: Vec<f64>,
}

#[derive(Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub moments: Vec<Moments>,
    pub step: usize,
    pub epoch: usize,
    pub ledger: PivotLedger,
    pub history: Vec<EpochRecord>,
    /// Induced seeds (with scores) when training ran unsupervised.
    pub induced_seeds: Option<Vec<ScoredPivot>>,
}

impl TrainState {
    /// `epoch,loss,pivot_count,weight_<modality>...` rows.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,loss,pivot_count");
        for m in &self.params.modalities {
            out.push_str(&format!(",weight_{}", m.name()));
        }
        out.push('\n');
        for r in &self.history {
            out.push_str(&format!("{},{},{}", r.epoch, r.loss, r.pivot_count));
            for w in &r.weights {
                out.push_str(&format!(",{w}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Active modalities for a task under a config: structure plus every
/// feature-backed channel the task carries, minus the disabled ones.
pub fn active_modalities(task: &AlignmentTask, disabled: &[Modality]) -> Vec<Modality> {
    let mut out = vec![Modality::Structure];
    out.extend(task.feature_modalities());
    out.retain(|m| !disabled.contains(m));
    out
}

fn feature_dims(task: &AlignmentTask) -> BTreeMap<Modality, usize> {
    task.source_features
        .iter()
        .map(|f| (f.modality, f.matrix.cols()))
        .collect()
}

/// Raw image-feature similarity across the two graphs, the signal that
/// seeds unsupervised training.
pub fn visual_similarity(task: &AlignmentTask) -> Result<crate::alignloss::SimilarityMatrix> {
    let (sf, tf) = task
        .features(Modality::Image)
        .ok_or_else(|| Error::Invalid("no image features on this task".to_string()))?;
    cosine_matrix(&sf.matrix, &tf.matrix)
}

/// Induce the unsupervised seed pivots from raw visual similarity.
pub fn induce_seeds(task: &AlignmentTask, cfg: &TrainConfig) -> Result<Vec<ScoredPivot>> {
    let sim = visual_similarity(task)?;
    let n = match cfg.visual_pivot_count {
        Some(n) => n,
        None => {
            if cfg.visual_pivot_threshold.is_none() {
                return Err(Error::Config(
                    "unsupervised training needs a visual pivot count or threshold".to_string(),
                ));
            }
            sim.rows().min(sim.cols())
        }
    };
    let mut pivots = induce_visual_pivots(&sim, n)?;
    if let Some(t) = cfg.visual_pivot_threshold {
        pivots = threshold_pivots(&pivots, t);
    }
    Ok(pivots)
}

struct ModelInputs {
    adjacency: Option<Rc<SparseMatrix>>,
    features: Vec<(Modality, Matrix)>,
    source_count: usize,
}

impl ModelInputs {
    fn build(task: &AlignmentTask, modalities: &[Modality]) -> Self {
        let adjacency = modalities
            .contains(&Modality::Structure)
            .then(|| Rc::new(sparse_adjacency(&task.source, &task.target)));
        let features = stacked_features(task)
            .into_iter()
            .filter(|(m, _)| modalities.contains(m))
            .collect();
        ModelInputs {
            adjacency,
            features,
            source_count: task.source.entity_count(),
        }
    }

    fn global_pair(&self, pivot: (usize, usize)) -> (usize, usize) {
        (pivot.0, self.source_count + pivot.1)
    }

    fn embed(&self, params: &ModelParams) -> Result<EmbeddingSet> {
        embed_entities(params, self.adjacency.as_deref(), &self.features)
    }
}

/// Train a model on the task. Unsupervised runs seed the pivot ledger from
/// induced visual pivots before the first epoch; both settings then run
/// `base_epochs` over shuffled pivot batches followed by `il_epochs` with a
/// proposal round every `k_e` epochs. Deterministic given the seed.
pub fn train(task: &AlignmentTask, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.loss.validate()?;
    cfg.il.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".to_string()));
    }
    task.validate()?;

    let modalities = active_modalities(task, &cfg.disabled);
    if modalities.is_empty() {
        return Err(Error::Config("all modalities disabled".to_string()));
    }

    let seeds;
    let mut induced_seeds = None;
    if cfg.unsupervised {
        let scored = induce_seeds(task, cfg)?;
        seeds = scored.iter().map(|p| (p.source, p.target)).collect::<Vec<_>>();
        induced_seeds = Some(scored);
        if seeds.is_empty() {
            return Err(Error::Invalid(
                "visual pivot induction produced no seeds".to_string(),
            ));
        }
    } else {
        if task.train_pivots.is_empty() {
            return Err(Error::Invalid(
                "semi-supervised training needs a nonempty train pivot set".to_string(),
            ));
        }
        seeds = task.train_pivots.clone();
    }

    let inputs = ModelInputs::build(task, &modalities);
    let params = ModelParams::init(
        &cfg.dims,
        &modalities,
        &feature_dims(task),
        task.source.entity_count() + task.target.entity_count(),
        cfg.rng_seed,
    )?;
    let moments = params
        .named()
        .iter()
        .map(|(_, p)| Moments::zeros_like(&p.value))
        .collect();
    let ledger = PivotLedger::new(&seeds)?;

    let mut state = TrainState {
        params,
        moments,
        step: 0,
        epoch: 0,
        ledger,
        history: Vec::new(),
        induced_seeds,
    };
    let total_epochs = cfg.base_epochs + cfg.il_epochs;
    let mut shuffle_rng = stream_rng(cfg.rng_seed, "shuffle");

    for epoch in 0..total_epochs {
        let mut pivots: Vec<(usize, usize)> = state.ledger.permanent().to_vec();
        pivots.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        for chunk in pivots.chunks(cfg.batch_size) {
            let batch: Vec<(usize, usize)> =
                chunk.iter().map(|&p| inputs.global_pair(p)).collect();
            let eval = joint_loss(
                &state.params,
                inputs.adjacency.as_ref(),
                &inputs.features,
                &batch,
                &cfg.loss,
                TermSelection::default(),
            )?;
            epoch_loss += eval.loss * chunk.len() as f64;

            state.step += 1;
            let named_grads = eval.grads;
            for ((name, param), (gname, grad)) in
                state.params.named_mut().into_iter().zip(&named_grads)
            {
                debug_assert_eq!(&name, gname);
                param.grad = grad.clone();
            }
            for ((_, param), moments) in state
                .params
                .named_mut()
                .into_iter()
                .zip(state.moments.iter_mut())
            {
                adamw_step(
                    &mut param.value,
                    &param.grad,
                    moments,
                    state.step,
                    &cfg.optimizer,
                )?;
            }
        }
        epoch_loss /= pivots.len().max(1) as f64;

        // Proposal rounds run during the IL phase, every k_e epochs.
        let in_il_phase = epoch >= cfg.base_epochs;
        if in_il_phase && (epoch - cfg.base_epochs + 1) % cfg.il.k_e == 0 {
            propose_from_current_model(task, cfg, &inputs, &mut state)?;
        }

        state.epoch = epoch + 1;
        state.history.push(EpochRecord {
            epoch,
            loss: epoch_loss,
            pivot_count: state.ledger.permanent_len(),
            weights: state.params.modality_weights(),
        });
    }
    Ok(state)
}

fn propose_from_current_model(
    task: &AlignmentTask,
    cfg: &TrainConfig,
    inputs: &ModelInputs,
    state: &mut TrainState,
) -> Result<()> {
    let source_ids: Vec<usize> = (0..task.source.entity_count())
        .filter(|&s| !state.ledger.is_source_aligned(s))
        .collect();
    let target_ids: Vec<usize> = (0..task.target.entity_count())
        .filter(|&t| !state.ledger.is_target_aligned(t))
        .collect();
    if source_ids.is_empty() || target_ids.is_empty() {
        return Ok(());
    }
    let embeddings = inputs.embed(&state.params)?;
    let fused = &embeddings.fused;
    let take = |ids: &[usize], offset: usize| -> Matrix {
        let rows: Vec<Vec<f64>> = ids.iter().map(|&i| fused.row(offset + i).to_vec()).collect();
        Matrix::from_rows(&rows).expect("uniform widths")
    };
    let source_rows = take(&source_ids, 0);
    let target_rows = take(&target_ids, inputs.source_count);
    let mut sim = cosine_matrix(&source_rows, &target_rows)?;
    if cfg.il_use_csls {
        sim = csls_adjust(&sim, cfg.csls_k.min(sim.rows()).min(sim.cols()).max(1))?;
    }
    state
        .ledger
        .propose_round(&sim, &source_ids, &target_ids, &cfg.il)
}

/// How a trained model is scored.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub use_csls: bool,
    pub csls_k: usize,
    /// Rank against all target entities instead of the test-set pool.
    pub all_candidates: bool,
    /// Split the report into this many degree-sum strata.
    pub strata: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            use_csls: true,
            csls_k: 3,
            all_candidates: false,
            strata: None,
        }
    }
}

/// Score a trained model on the task's held-out pivots.
pub fn evaluate_trained(
    task: &AlignmentTask,
    params: &ModelParams,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if task.test_pivots.is_empty() {
        return Err(Error::Invalid("no test pivots to evaluate".to_string()));
    }
    let inputs = ModelInputs::build(task, &params.modalities);
    let embeddings = inputs.embed(params)?;
    let fused = &embeddings.fused;

    let source_rows: Vec<Vec<f64>> = task
        .test_pivots
        .iter()
        .map(|&(s, _)| fused.row(s).to_vec())
        .collect();
    let (target_rows, gold): (Vec<Vec<f64>>, Vec<(usize, usize)>) = if opts.all_candidates {
        let rows: Vec<Vec<f64>> = (0..task.target.entity_count())
            .map(|t| fused.row(inputs.source_count + t).to_vec())
            .collect();
        let gold = task
            .test_pivots
            .iter()
            .enumerate()
            .map(|(i, &(_, t))| (i, t))
            .collect();
        (rows, gold)
    } else {
        let rows: Vec<Vec<f64>> = task
            .test_pivots
            .iter()
            .map(|&(_, t)| fused.row(inputs.source_count + t).to_vec())
            .collect();
        let gold = (0..task.test_pivots.len()).map(|i| (i, i)).collect();
        (rows, gold)
    };
    let sim = cosine_matrix(
        &Matrix::from_rows(&source_rows)?,
        &Matrix::from_rows(&target_rows)?,
    )?;
    let k = opts.csls_k;
    match opts.strata {
        None => evaluate(&sim, &gold, opts.use_csls, k),
        Some(n_strata) => {
            let deg_sums: Vec<usize> = task
                .test_pivots
                .iter()
                .map(|&p| task.degree_sum(p))
                .collect::<Result<_>>()?;
            stratified_evaluate(&sim, &gold, &deg_sums, n_strata, opts.use_csls, k)
        }
    }
}

/// Train with the listed modalities removed and evaluate. The modality
/// weights renormalize over the remaining channels.
pub fn ablate(
    task: &AlignmentTask,
    cfg: &TrainConfig,
    disabled: &[Modality],
    eval_opts: &EvalOptions,
) -> Result<(TrainState, EvalReport)> {
    let mut cfg = cfg.clone();
    for &m in disabled {
        if !cfg.disabled.contains(&m) {
            cfg.disabled.push(m);
        }
    }
    if active_modalities(task, &cfg.disabled).is_empty() {
        return Err(Error::Config("ablation disables every modality".to_string()));
    }
    let state = train(task, &cfg)?;
    let report = evaluate_trained(task, &state.params, eval_opts)?;
    Ok((state, report))
}
