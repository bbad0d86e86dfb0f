//! Entity encoders: the graph-convolutional structure channel, linear
//! projections for feature-backed channels, and softmax-weighted fusion.
//!
//! Both graphs share one block-diagonal adjacency (no cross-graph edges);
//! the alignment signal comes entirely from the loss. Entity rows are
//! indexed source-first: source entity `i` is row `i`, target entity `j`
//! is row `Ns + j`.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kgdata::{AlignmentTask, KnowledgeGraph, Modality};
use crate::numcore::{row_l2_normalize, Matrix, NodeId, Param, SparseMatrix, Tape};
use crate::rng::stream_rng;

/// Layer widths. Defaults follow the full-scale configuration; tests use
/// scaled-down widths.
#[derive(Debug, Clone)]
pub struct ModelDims {
    pub entity_dim: usize,
    pub gcn_hidden: usize,
    pub gcn_out: usize,
    pub proj_out: BTreeMap<Modality, usize>,
}

impl Default for ModelDims {
    fn default() -> Self {
        let mut proj_out = BTreeMap::new();
        proj_out.insert(Modality::Image, 200);
        proj_out.insert(Modality::Relation, 100);
        proj_out.insert(Modality::Attribute, 100);
        proj_out.insert(Modality::Surface, 100);
        ModelDims {
            entity_dim: 400,
            gcn_hidden: 400,
            gcn_out: 200,
            proj_out,
        }
    }
}

impl ModelDims {
    pub fn proj_dim(&self, modality: Modality) -> usize {
        *self.proj_out.get(&modality).unwrap_or(&100)
    }
}

/// Structure-channel parameters: the trainable input table and the GCN
/// layer weights chained `entity_dim -> hidden -> out`.
#[derive(Debug, Clone)]
pub struct GcnParams {
    pub entity_table: Param,
    pub layer_weights: Vec<Param>,
}

/// Affine projection for one feature-backed modality.
#[derive(Debug, Clone)]
pub struct ModalityProjection {
    pub modality: Modality,
    pub weight: Param,
    pub bias: Param,
}

/// Every trainable quantity of the model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    /// Active modalities in canonical order; `modality_logits` is parallel
    /// to this list.
    pub modalities: Vec<Modality>,
    pub structure: Option<GcnParams>,
    pub projections: Vec<ModalityProjection>,
    pub modality_logits: Param,
}

impl ModelParams {
    /// Initialize for the given active modalities. `feature_dims` maps each
    /// feature-backed modality to its input width. Every parameter draws
    /// from its own named stream, so dropping a modality leaves the
    /// remaining parameters bit-identical.
    pub fn init(
        dims: &ModelDims,
        modalities: &[Modality],
        feature_dims: &BTreeMap<Modality, usize>,
        total_entities: usize,
        seed: u64,
    ) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::Invalid("no active modalities".into()));
        }
        let mut sorted = modalities.to_vec();
        sorted.sort();
        sorted.dedup();

        let structure = if sorted.contains(&Modality::Structure) {
            let mut rng = stream_rng(seed, "init.entity_table");
            let scale = 1.0 / (dims.entity_dim as f64).sqrt();
            let normal = Normal::new(0.0, scale).unwrap();
            let entity_table = Param::new(Matrix::from_fn(total_entities, dims.entity_dim, |_, _| {
                normal.sample(&mut rng)
            }));
            let shapes = [
                (dims.entity_dim, dims.gcn_hidden),
                (dims.gcn_hidden, dims.gcn_out),
            ];
            let layer_weights = shapes
                .iter()
                .enumerate()
                .map(|(l, &(fan_in, fan_out))| {
                    let mut rng = stream_rng(seed, &format!("init.gcn.{l}"));
                    Param::new(glorot(fan_in, fan_out, &mut rng))
                })
                .collect();
            Some(GcnParams {
                entity_table,
                layer_weights,
            })
        } else {
            None
        };

        let mut projections = Vec::new();
        for &m in &sorted {
            if m == Modality::Structure {
                continue;
            }
            let &in_dim = feature_dims.get(&m).ok_or_else(|| {
                Error::Invalid(format!("modality {m} active but no feature width known"))
            })?;
            let out_dim = dims.proj_dim(m);
            let mut rng = stream_rng(seed, &format!("init.proj.{}", m.name()));
            projections.push(ModalityProjection {
                modality: m,
                weight: Param::new(glorot(in_dim, out_dim, &mut rng)),
                bias: Param::new(Matrix::zeros(1, out_dim)),
            });
        }

        // Zero logits: every modality starts at weight 1/n.
        let modality_logits = Param::new(Matrix::zeros(sorted.len(), 1));

        Ok(ModelParams {
            modalities: sorted,
            structure,
            projections,
            modality_logits,
        })
    }

    /// Stable `(name, param)` listing; the optimizer and checkpoints rely
    /// on this order.
    pub fn named(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        if let Some(s) = &self.structure {
            out.push(("entity_table".to_string(), &s.entity_table));
            for (l, w) in s.layer_weights.iter().enumerate() {
                out.push((format!("gcn.{l}"), w));
            }
        }
        for p in &self.projections {
            out.push((format!("proj.{}.weight", p.modality.name()), &p.weight));
            out.push((format!("proj.{}.bias", p.modality.name()), &p.bias));
        }
        out.push(("modality_logits".to_string(), &self.modality_logits));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out: Vec<(String, &mut Param)> = Vec::new();
        if let Some(s) = &mut self.structure {
            out.push(("entity_table".to_string(), &mut s.entity_table));
            for (l, w) in s.layer_weights.iter_mut().enumerate() {
                out.push((format!("gcn.{l}"), w));
            }
        }
        for p in &mut self.projections {
            out.push((format!("proj.{}.weight", p.modality.name()), &mut p.weight));
            out.push((format!("proj.{}.bias", p.modality.name()), &mut p.bias));
        }
        out.push(("modality_logits".to_string(), &mut self.modality_logits));
        out
    }

    /// Softmax-normalized modality weights at the current logits.
    pub fn modality_weights(&self) -> Vec<f64> {
        softmax(self.modality_logits.value.data())
    }
}

fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix {
    let scale = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, scale).unwrap();
    Matrix::from_fn(fan_in, fan_out, |_, _| normal.sample(rng))
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Symmetrically normalized adjacency `D^-1/2 (M + I) D^-1/2` over the
/// union of both graphs as one undirected node set with self-loops.
/// Relation types are ignored; duplicate edges collapse to weight 1.
pub fn sparse_adjacency(source: &KnowledgeGraph, target: &KnowledgeGraph) -> SparseMatrix {
    let ns = source.entity_count();
    let n = ns + target.entity_count();
    let mut neighbors: Vec<std::collections::BTreeSet<usize>> =
        (0..n).map(|i| std::collections::BTreeSet::from([i])).collect();
    let mut add_edges = |kg: &KnowledgeGraph, offset: usize| {
        for t in kg.triples() {
            let (a, b) = (offset + t.head, offset + t.tail);
            neighbors[a].insert(b);
            neighbors[b].insert(a);
        }
    };
    add_edges(source, 0);
    add_edges(target, ns);

    let degrees: Vec<f64> = neighbors.iter().map(|s| s.len() as f64).collect();
    let mut entries = Vec::new();
    for (i, adj) in neighbors.iter().enumerate() {
        for &j in adj {
            entries.push((i, j, 1.0 / (degrees[i] * degrees[j]).sqrt()));
        }
    }
    SparseMatrix::from_entries(n, n, entries).expect("entries are in range by construction")
}

/// Dense form of [`sparse_adjacency`].
pub fn normalize_adjacency(source: &KnowledgeGraph, target: &KnowledgeGraph) -> Matrix {
    sparse_adjacency(source, target).to_dense()
}

/// Two GCN layers `relu(A H W)` over a dense normalized adjacency; returns
/// the last layer's output.
pub fn gcn_forward(gcn: &GcnParams, adjacency: &Matrix) -> Result<Matrix> {
    let n = gcn.entity_table.value.rows();
    if adjacency.rows() != n || adjacency.cols() != n {
        return Err(Error::Shape(format!(
            "adjacency is {}x{} for {} entities",
            adjacency.rows(),
            adjacency.cols(),
            n
        )));
    }
    let mut h = gcn.entity_table.value.clone();
    for w in &gcn.layer_weights {
        h = adjacency.matmul(&h)?.matmul(&w.value)?.relu();
    }
    Ok(h)
}

/// Row-wise affine map `x W + b`; no activation.
pub fn project_modality(features: &Matrix, weight: &Param, bias: &Param) -> Result<Matrix> {
    if bias.value.rows() != 1 || bias.value.cols() != weight.value.cols() {
        return Err(Error::Shape(format!(
            "bias is {}x{} for weight {}x{}",
            bias.value.rows(),
            bias.value.cols(),
            weight.value.rows(),
            weight.value.cols()
        )));
    }
    let mut out = features.matmul(&weight.value)?;
    for i in 0..out.rows() {
        for (o, &b) in out.row_mut(i).iter_mut().zip(bias.value.row(0)) {
            *o += b;
        }
    }
    Ok(out)
}

/// Row-normalize each embedding, scale by its softmax weight, and
/// concatenate along the feature axis. Returns the fused matrix and the
/// normalized weights.
pub fn fuse(embeddings: &[Matrix], modality_logits: &Param) -> Result<(Matrix, Vec<f64>)> {
    if embeddings.is_empty() {
        return Err(Error::Invalid("fuse: empty modality list".into()));
    }
    if modality_logits.value.rows() != embeddings.len() || modality_logits.value.cols() != 1 {
        return Err(Error::Shape(format!(
            "fuse: {} logits for {} modalities",
            modality_logits.value.rows() * modality_logits.value.cols(),
            embeddings.len()
        )));
    }
    let rows = embeddings[0].rows();
    if embeddings.iter().any(|e| e.rows() != rows) {
        return Err(Error::Shape("fuse: embedding row counts differ".into()));
    }
    let weights = softmax(modality_logits.value.data());
    let total_cols: usize = embeddings.iter().map(Matrix::cols).sum();
    let mut fused = Matrix::zeros(rows, total_cols);
    let mut offset = 0;
    for (e, &w) in embeddings.iter().zip(&weights) {
        let block = row_l2_normalize(e);
        for i in 0..rows {
            for (j, &v) in block.row(i).iter().enumerate() {
                fused.set(i, offset + j, w * v);
            }
        }
        offset += e.cols();
    }
    Ok((fused, weights))
}

/// Per-modality embeddings plus the fused representation for all entities.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub modalities: Vec<Modality>,
    pub per_modality: Vec<Matrix>,
    pub fused: Matrix,
    pub weights: Vec<f64>,
}

impl EmbeddingSet {
    pub fn modality(&self, m: Modality) -> Option<&Matrix> {
        self.modalities
            .iter()
            .position(|&x| x == m)
            .map(|i| &self.per_modality[i])
    }
}

/// Stacked source-over-target feature matrices for the active
/// feature-backed modalities, in canonical order.
pub fn stacked_features(task: &AlignmentTask) -> Vec<(Modality, Matrix)> {
    task.source_features
        .iter()
        .zip(&task.target_features)
        .map(|(sf, tf)| {
            let mut rows = Vec::with_capacity(sf.matrix.rows() + tf.matrix.rows());
            for i in 0..sf.matrix.rows() {
                rows.push(sf.matrix.row(i).to_vec());
            }
            for i in 0..tf.matrix.rows() {
                rows.push(tf.matrix.row(i).to_vec());
            }
            (sf.modality, Matrix::from_rows(&rows).expect("widths validated"))
        })
        .collect()
}

/// Forward pass over all entities, without a tape. Used for inference and
/// pivot proposal.
pub fn embed_entities(
    params: &ModelParams,
    adjacency: Option<&SparseMatrix>,
    features: &[(Modality, Matrix)],
) -> Result<EmbeddingSet> {
    let mut per_modality = Vec::new();
    for &m in &params.modalities {
        if m == Modality::Structure {
            let gcn = params
                .structure
                .as_ref()
                .ok_or_else(|| Error::Invalid("structure active but no GCN params".into()))?;
            let adj = adjacency
                .ok_or_else(|| Error::Invalid("structure active but no adjacency".into()))?;
            let mut h = gcn.entity_table.value.clone();
            for w in &gcn.layer_weights {
                h = adj.mul_dense(&h)?.matmul(&w.value)?.relu();
            }
            per_modality.push(h);
        } else {
            let proj = params
                .projections
                .iter()
                .find(|p| p.modality == m)
                .ok_or_else(|| Error::Invalid(format!("no projection for modality {m}")))?;
            let feat = features
                .iter()
                .find(|(fm, _)| *fm == m)
                .map(|(_, f)| f)
                .ok_or_else(|| Error::Invalid(format!("no features for modality {m}")))?;
            per_modality.push(project_modality(feat, &proj.weight, &proj.bias)?);
        }
    }
    let (fused, weights) = fuse(&per_modality, &params.modality_logits)?;
    Ok(EmbeddingSet {
        modalities: params.modalities.clone(),
        per_modality,
        fused,
        weights,
    })
}

/// Handles into a tape-recorded forward pass.
pub struct TapeForward {
    /// Leaf node per parameter, parallel to [`ModelParams::named`].
    pub param_leaves: Vec<(String, NodeId)>,
    /// Full-graph embedding node per active modality.
    pub modality_embeddings: Vec<(Modality, NodeId)>,
    /// Softmax of the logits leaf.
    pub weights: NodeId,
}

/// Record the full forward pass on `tape` so losses can be appended and
/// differentiated. Parameter values are copied onto the tape as leaves.
pub fn build_tape_forward(
    tape: &mut Tape,
    params: &ModelParams,
    adjacency: Option<&Rc<SparseMatrix>>,
    features: &[(Modality, Matrix)],
) -> Result<TapeForward> {
    let named = params.named();
    let mut param_leaves = Vec::with_capacity(named.len());
    for (name, p) in &named {
        param_leaves.push((name.clone(), tape.leaf(p.value.clone())));
    }
    let leaf = |name: &str, leaves: &[(String, NodeId)]| -> NodeId {
        leaves
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
            .expect("named leaf exists")
    };

    let mut modality_embeddings = Vec::new();
    for &m in &params.modalities {
        if m == Modality::Structure {
            let gcn = params
                .structure
                .as_ref()
                .ok_or_else(|| Error::Invalid("structure active but no GCN params".into()))?;
            let adj = adjacency
                .ok_or_else(|| Error::Invalid("structure active but no adjacency".into()))?;
            let mut h = leaf("entity_table", &param_leaves);
            for l in 0..gcn.layer_weights.len() {
                let w = leaf(&format!("gcn.{l}"), &param_leaves);
                let prop = tape.spmm(adj.clone(), h)?;
                let lin = tape.matmul(prop, w)?;
                h = tape.relu(lin);
            }
            modality_embeddings.push((m, h));
        } else {
            let feat = features
                .iter()
                .find(|(fm, _)| *fm == m)
                .map(|(_, f)| f)
                .ok_or_else(|| Error::Invalid(format!("no features for modality {m}")))?;
            let x = tape.leaf(feat.clone());
            let w = leaf(&format!("proj.{}.weight", m.name()), &param_leaves);
            let b = leaf(&format!("proj.{}.bias", m.name()), &param_leaves);
            let prod = tape.matmul(x, w)?;
            let emb = tape.add_row_vec(prod, b)?;
            modality_embeddings.push((m, emb));
        }
    }
    let logits = leaf("modality_logits", &param_leaves);
    let weights = tape.softmax_column(logits)?;
    Ok(TapeForward {
        param_leaves,
        modality_embeddings,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgdata::Triple;

    fn graph(n: usize, edges: &[(usize, usize)]) -> KnowledgeGraph {
        KnowledgeGraph::new(
            (0..n).map(|i| format!("e{i}")).collect(),
            vec!["r".to_string()],
            edges
                .iter()
                .map(|&(h, t)| Triple {
                    head: h,
                    relation: 0,
                    tail: t,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_node_adjacency_is_identity() {
        let a = normalize_adjacency(&graph(1, &[]), &graph(0, &[]));
        assert_eq!(a.rows(), 1);
        assert_eq!(a.get(0, 0), 1.0);
    }

    #[test]
    fn two_node_edge_adjacency() {
        let a = normalize_adjacency(&graph(2, &[(0, 1)]), &graph(0, &[]));
        for i in 0..2 {
            for j in 0..2 {
                assert!((a.get(i, j) - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn regular_graph_entries_are_uniform() {
        // 4-cycle: every node has degree 2, so every nonzero entry of the
        // normalized operator is 1/(d+1) = 1/3.
        let a = normalize_adjacency(&graph(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]), &graph(0, &[]));
        for i in 0..4 {
            for j in 0..4 {
                let v = a.get(i, j);
                if v != 0.0 {
                    assert!((v - 1.0 / 3.0).abs() < 1e-15, "entry ({i},{j}) = {v}");
                }
            }
        }
    }

    #[test]
    fn duplicate_and_reversed_edges_collapse() {
        let a = normalize_adjacency(&graph(2, &[(0, 1), (0, 1), (1, 0)]), &graph(0, &[]));
        let b = normalize_adjacency(&graph(2, &[(0, 1)]), &graph(0, &[]));
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn adjacency_is_block_diagonal_and_symmetric() {
        let a = normalize_adjacency(&graph(2, &[(0, 1)]), &graph(2, &[(0, 1)]));
        assert_eq!(a.rows(), 4);
        for i in 0..2 {
            for j in 2..4 {
                assert_eq!(a.get(i, j), 0.0);
                assert_eq!(a.get(j, i), 0.0);
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(a.get(i, j), a.get(j, i));
            }
        }
    }

    #[test]
    fn spectral_radius_at_most_one() {
        use rand::Rng;
        let mut rng = stream_rng(11, "test.spectral");
        for _ in 0..10 {
            let n = rng.gen_range(2..8);
            let mut edges = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    if rng.gen_bool(0.4) {
                        edges.push((i, j));
                    }
                }
            }
            let a = normalize_adjacency(&graph(n, &edges), &graph(0, &[]));
            // Power iteration.
            let mut v = Matrix::from_fn(n, 1, |_, _| rng.gen_range(0.1..1.0));
            let mut radius = 0.0;
            for _ in 0..200 {
                let av = a.matmul(&v).unwrap();
                radius = av.frobenius_norm() / v.frobenius_norm();
                let norm = av.frobenius_norm();
                v = av.scale(1.0 / norm.max(1e-300));
            }
            assert!(radius <= 1.0 + 1e-9, "spectral radius {radius}");
        }
    }

    fn gcn_with(entity: Matrix, weights: Vec<Matrix>) -> GcnParams {
        GcnParams {
            entity_table: Param::new(entity),
            layer_weights: weights.into_iter().map(Param::new).collect(),
        }
    }

    #[test]
    fn identity_weights_pass_nonnegative_input_through() {
        let h0 = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, 0.0]]).unwrap();
        let gcn = gcn_with(h0.clone(), vec![Matrix::identity(2), Matrix::identity(2)]);
        let out = gcn_forward(&gcn, &Matrix::identity(2)).unwrap();
        assert!(out.max_abs_diff(&h0) < 1e-15);
    }

    #[test]
    fn relu_clamps_negative_input() {
        let h0 = Matrix::from_rows(&[vec![-1.0, -2.0], vec![-0.5, -3.0]]).unwrap();
        let gcn = gcn_with(h0, vec![Matrix::identity(2), Matrix::identity(2)]);
        let out = gcn_forward(&gcn, &Matrix::identity(2)).unwrap();
        assert_eq!(out, Matrix::zeros(2, 2));
    }

    #[test]
    fn gcn_matches_stepwise_evaluation() {
        let mut rng = stream_rng(5, "test.gcn");
        let g = graph(3, &[(0, 1), (1, 2)]);
        let adj = normalize_adjacency(&g, &graph(0, &[]));
        let h0 = Matrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));
        let w1 = Matrix::from_fn(2, 3, |_, _| rng.gen_range(-1.0..1.0));
        let w2 = Matrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));
        let gcn = gcn_with(h0.clone(), vec![w1.clone(), w2.clone()]);
        let out = gcn_forward(&gcn, &adj).unwrap();

        // Independent step-by-step evaluation.
        let layer1 = adj.matmul(&h0).unwrap().matmul(&w1).unwrap().relu();
        let layer2 = adj.matmul(&layer1).unwrap().matmul(&w2).unwrap().relu();
        assert!(out.max_abs_diff(&layer2) < 1e-12);
    }

    #[test]
    fn disconnected_components_stay_independent() {
        // Two components: {0,1} and {2}. Changing H0 row 2 must not move
        // rows 0-1.
        let g = graph(3, &[(0, 1)]);
        let adj = normalize_adjacency(&g, &graph(0, &[]));
        let mut rng = stream_rng(6, "test.components");
        let h0 = Matrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));
        let w = vec![
            Matrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0)),
            Matrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0)),
        ];
        let out_a = gcn_forward(&gcn_with(h0.clone(), w.clone()), &adj).unwrap();
        let mut h0_b = h0.clone();
        h0_b.set(2, 0, 5.0);
        h0_b.set(2, 1, -5.0);
        let out_b = gcn_forward(&gcn_with(h0_b, w), &adj).unwrap();
        for j in 0..2 {
            assert_eq!(out_a.get(0, j), out_b.get(0, j));
            assert_eq!(out_a.get(1, j), out_b.get(1, j));
        }
    }

    #[test]
    fn projection_identity_and_constant() {
        let x = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0]]).unwrap();
        let id = Param::new(Matrix::identity(2));
        let zero_b = Param::new(Matrix::zeros(1, 2));
        assert_eq!(project_modality(&x, &id, &zero_b).unwrap(), x);

        let zero_w = Param::new(Matrix::zeros(2, 2));
        let c = Param::new(Matrix::from_rows(&[vec![0.7, -0.3]]).unwrap());
        let out = project_modality(&x, &zero_w, &c).unwrap();
        for i in 0..2 {
            assert_eq!(out.row(i), &[0.7, -0.3]);
        }
    }

    #[test]
    fn projection_matches_affine_oracle() {
        let mut rng = stream_rng(9, "test.proj");
        let x = Matrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
        let w = Matrix::from_fn(4, 2, |_, _| rng.gen_range(-1.0..1.0));
        let b = Matrix::from_fn(1, 2, |_, _| rng.gen_range(-1.0..1.0));
        let out = project_modality(&x, &Param::new(w.clone()), &Param::new(b.clone())).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut expect = b.get(0, j);
                for k in 0..4 {
                    expect += x.get(i, k) * w.get(k, j);
                }
                assert!((out.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_single_modality() {
        let e = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let logits = Param::new(Matrix::from_vec(1, 1, vec![2.5]).unwrap());
        let (fused, weights) = fuse(&[e], &logits).unwrap();
        assert_eq!(weights, vec![1.0]);
        assert!((fused.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((fused.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn fuse_equal_logits_gives_quarter_weights() {
        let blocks: Vec<Matrix> = (0..4)
            .map(|k| Matrix::from_rows(&[vec![k as f64 + 1.0, 0.0]]).unwrap())
            .collect();
        let logits = Param::new(Matrix::zeros(4, 1));
        let (fused, weights) = fuse(&blocks, &logits).unwrap();
        for w in &weights {
            assert!((w - 0.25).abs() < 1e-12);
        }
        // Each normalized block is [1, 0]; scaled copies land at 0.25.
        for k in 0..4 {
            assert!((fused.get(0, 2 * k) - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_log_two_logits() {
        let blocks = vec![
            Matrix::from_rows(&[vec![1.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0]]).unwrap(),
        ];
        let logits = Param::new(Matrix::from_vec(2, 1, vec![2.0f64.ln(), 0.0]).unwrap());
        let (_, weights) = fuse(&blocks, &logits).unwrap();
        assert!((weights[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((weights[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn fuse_weights_sum_to_one() {
        let mut rng = stream_rng(10, "test.fuse");
        for _ in 0..20 {
            let n = rng.gen_range(1..6);
            let blocks: Vec<Matrix> = (0..n)
                .map(|_| Matrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            let logits =
                Param::new(Matrix::from_fn(n, 1, |_, _| rng.gen_range(-3.0..3.0)));
            let (_, weights) = fuse(&blocks, &logits).unwrap();
            assert!(weights.iter().all(|&w| w > 0.0));
            assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fuse_is_shift_invariant_bitwise() {
        // Dyadic logits so that adding the shift is exact in binary
        // floating point.
        let blocks = vec![
            Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap(),
            Matrix::from_rows(&[vec![-3.0, 0.25], vec![2.0, 2.0]]).unwrap(),
            Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
        ];
        let base = [0.5, -1.25, 2.0];
        for shift in [1.0, 4.0, -2.5] {
            let l0 = Param::new(Matrix::from_vec(3, 1, base.to_vec()).unwrap());
            let l1 = Param::new(
                Matrix::from_vec(3, 1, base.iter().map(|v| v + shift).collect()).unwrap(),
            );
            let (f0, _) = fuse(&blocks, &l0).unwrap();
            let (f1, _) = fuse(&blocks, &l1).unwrap();
            assert_eq!(f0, f1, "shift {shift} changed the fused output");
        }
    }

    #[test]
    fn fuse_rejects_empty_list() {
        let logits = Param::new(Matrix::zeros(0, 1));
        assert!(fuse(&[], &logits).is_err());
    }

    #[test]
    fn tape_forward_matches_pure_forward() {
        let mut rng = stream_rng(12, "test.forward");
        let source = graph(3, &[(0, 1), (1, 2)]);
        let target = graph(3, &[(0, 2)]);
        let adj = Rc::new(sparse_adjacency(&source, &target));
        let feats = vec![(
            Modality::Image,
            Matrix::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0)),
        )];
        let mut dims = ModelDims::default();
        dims.entity_dim = 3;
        dims.gcn_hidden = 3;
        dims.gcn_out = 2;
        dims.proj_out.insert(Modality::Image, 2);
        let mut fdims = BTreeMap::new();
        fdims.insert(Modality::Image, 4);
        let params = ModelParams::init(
            &dims,
            &[Modality::Structure, Modality::Image],
            &fdims,
            6,
            99,
        )
        .unwrap();

        let pure = embed_entities(&params, Some(&adj), &feats).unwrap();
        let mut tape = Tape::new();
        let fwd = build_tape_forward(&mut tape, &params, Some(&adj), &feats).unwrap();
        for ((m, id), pure_m) in fwd.modality_embeddings.iter().zip(&pure.per_modality) {
            assert!(
                tape.value(*id).max_abs_diff(pure_m) < 1e-12,
                "modality {m} diverges between tape and pure forward"
            );
        }
        let w = tape.value(fwd.weights);
        for (i, &pw) in pure.weights.iter().enumerate() {
            assert!((w.get(i, 0) - pw).abs() < 1e-15);
        }
    }
}
