//! Knowledge graphs, per-modality features, and alignment task assembly.

pub mod formats;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::rng::stream_rng;

use formats::KeyValueFile;

/// The feature channels a task may carry. `Structure` has no stored
/// feature matrix; it is computed by the graph encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Structure,
    Image,
    Relation,
    Attribute,
    Surface,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Structure,
        Modality::Image,
        Modality::Relation,
        Modality::Attribute,
        Modality::Surface,
    ];

    /// Feature-backed modalities, in canonical order.
    pub const FEATURE: [Modality; 4] = [
        Modality::Image,
        Modality::Relation,
        Modality::Attribute,
        Modality::Surface,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Structure => "structure",
            Modality::Image => "image",
            Modality::Relation => "relation",
            Modality::Attribute => "attribute",
            Modality::Surface => "surface",
        }
    }

    pub fn from_name(name: &str) -> Option<Modality> {
        Modality::ALL.into_iter().find(|m| m.name() == name)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

/// One knowledge graph: vocabularies, triples, and per-entity degrees.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    entity_labels: Vec<String>,
    relation_labels: Vec<String>,
    triples: Vec<Triple>,
    degrees: Vec<usize>,
}

impl KnowledgeGraph {
    pub fn new(
        entity_labels: Vec<String>,
        relation_labels: Vec<String>,
        triples: Vec<Triple>,
    ) -> Result<Self> {
        let ne = entity_labels.len();
        let nr = relation_labels.len();
        let mut degrees = vec![0usize; ne];
        for t in &triples {
            if t.head >= ne || t.tail >= ne {
                return Err(Error::Invalid(format!(
                    "triple ({}, {}, {}) references an entity outside 0..{}",
                    t.head, t.relation, t.tail, ne
                )));
            }
            if t.relation >= nr {
                return Err(Error::Invalid(format!(
                    "triple ({}, {}, {}) references a relation outside 0..{}",
                    t.head, t.relation, t.tail, nr
                )));
            }
            degrees[t.head] += 1;
            degrees[t.tail] += 1;
        }
        Ok(KnowledgeGraph {
            entity_labels,
            relation_labels,
            triples,
            degrees,
        })
    }

    pub fn entity_count(&self) -> usize {
        self.entity_labels.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relation_labels.len()
    }

    pub fn entity_label(&self, id: usize) -> &str {
        &self.entity_labels[id]
    }

    pub fn entity_labels(&self) -> &[String] {
        &self.entity_labels
    }

    pub fn relation_labels(&self) -> &[String] {
        &self.relation_labels
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// Number of triple slots (head or tail) mentioning the entity.
    pub fn degree(&self, entity: usize) -> Result<usize> {
        self.degrees
            .get(entity)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("entity id {entity} out of range")))
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }
}

/// One modality's feature matrix plus its observation mask.
#[derive(Debug, Clone)]
pub struct ModalityFeatures {
    pub modality: Modality,
    pub matrix: Matrix,
    /// true = observed, false = imputed.
    pub present: Vec<bool>,
}

impl ModalityFeatures {
    pub fn fully_observed(modality: Modality, matrix: Matrix) -> Self {
        let present = vec![true; matrix.rows()];
        ModalityFeatures {
            modality,
            matrix,
            present,
        }
    }

    pub fn observed_rows(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn coverage(&self) -> f64 {
        if self.present.is_empty() {
            0.0
        } else {
            self.observed_rows() as f64 / self.present.len() as f64
        }
    }
}

/// Replace every absent row by a vector drawn per-dimension from
/// `Normal(mu_d, sigma_d)`, where the moments come from the observed rows
/// (population standard deviation). Deterministic given the seed; observed
/// rows are untouched. Errors when no row is observed.
pub fn impute_missing(features: &ModalityFeatures, rng_seed: u64) -> Result<ModalityFeatures> {
    let n_present = features.observed_rows();
    if n_present == 0 {
        return Err(Error::Invalid(format!(
            "cannot impute {}: no observed rows",
            features.modality
        )));
    }
    if n_present == features.present.len() {
        return Ok(features.clone());
    }
    let cols = features.matrix.cols();
    let mut mean = vec![0.0f64; cols];
    for (i, &present) in features.present.iter().enumerate() {
        if present {
            for (m, &v) in mean.iter_mut().zip(features.matrix.row(i)) {
                *m += v;
            }
        }
    }
    for m in &mut mean {
        *m /= n_present as f64;
    }
    let mut var = vec![0.0f64; cols];
    for (i, &present) in features.present.iter().enumerate() {
        if present {
            for ((s, &v), &m) in var.iter_mut().zip(features.matrix.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / n_present as f64).sqrt()).collect();

    let mut rng = stream_rng(rng_seed, &format!("impute.{}", features.modality));
    let mut out = features.clone();
    for i in 0..out.present.len() {
        if !out.present[i] {
            for (d, v) in out.matrix.row_mut(i).iter_mut().enumerate() {
                *v = if std[d] > 0.0 {
                    Normal::new(mean[d], std[d]).unwrap().sample(&mut rng)
                } else {
                    mean[d]
                };
            }
        }
    }
    Ok(out)
}

/// Count-of-incident-relation vectors over the `dim` most frequent
/// relations; a stand-in feature builder for graphs shipped without
/// precomputed relation features.
pub fn relation_count_features(kg: &KnowledgeGraph, dim: usize) -> ModalityFeatures {
    let mut freq: Vec<(usize, usize)> = vec![(0, 0); kg.relation_count()];
    for (r, slot) in freq.iter_mut().enumerate() {
        slot.1 = r;
    }
    for t in kg.triples() {
        freq[t.relation].0 += 1;
    }
    freq.sort_unstable_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let top: Vec<usize> = freq.iter().take(dim).map(|&(_, r)| r).collect();
    let col_of: HashMap<usize, usize> = top.iter().enumerate().map(|(c, &r)| (r, c)).collect();

    let mut matrix = Matrix::zeros(kg.entity_count(), dim);
    for t in kg.triples() {
        if let Some(&c) = col_of.get(&t.relation) {
            for e in [t.head, t.tail] {
                let v = matrix.get(e, c);
                matrix.set(e, c, v + 1.0);
            }
        }
    }
    ModalityFeatures::fully_observed(Modality::Relation, matrix)
}

/// A pair of graphs, their per-modality features, and pivot sets.
#[derive(Debug, Clone)]
pub struct AlignmentTask {
    pub source: KnowledgeGraph,
    pub target: KnowledgeGraph,
    /// Same modality set on both sides, in canonical modality order.
    pub source_features: Vec<ModalityFeatures>,
    pub target_features: Vec<ModalityFeatures>,
    pub train_pivots: Vec<(usize, usize)>,
    pub test_pivots: Vec<(usize, usize)>,
    pub seed: u64,
}

impl AlignmentTask {
    pub fn validate(&self) -> Result<()> {
        check_one_to_one(&self.train_pivots, "train")?;
        check_one_to_one(&self.test_pivots, "test")?;
        let train: HashSet<(usize, usize)> = self.train_pivots.iter().copied().collect();
        if self.test_pivots.iter().any(|p| train.contains(p)) {
            return Err(Error::Invalid(
                "train and test pivot sets overlap".to_string(),
            ));
        }
        for &(s, t) in self.train_pivots.iter().chain(&self.test_pivots) {
            if s >= self.source.entity_count() || t >= self.target.entity_count() {
                return Err(Error::Invalid(format!("pivot id out of range: ({s}, {t})")));
            }
        }
        let modalities: Vec<Modality> = self.source_features.iter().map(|f| f.modality).collect();
        let target_modalities: Vec<Modality> =
            self.target_features.iter().map(|f| f.modality).collect();
        if modalities != target_modalities {
            return Err(Error::Invalid(format!(
                "modality sets differ between graphs: {modalities:?} vs {target_modalities:?}"
            )));
        }
        for (sf, tf) in self.source_features.iter().zip(&self.target_features) {
            if sf.matrix.rows() != self.source.entity_count() {
                return Err(Error::Invalid(format!(
                    "{} features: {} rows for {} source entities",
                    sf.modality,
                    sf.matrix.rows(),
                    self.source.entity_count()
                )));
            }
            if tf.matrix.rows() != self.target.entity_count() {
                return Err(Error::Invalid(format!(
                    "{} features: {} rows for {} target entities",
                    tf.modality,
                    tf.matrix.rows(),
                    self.target.entity_count()
                )));
            }
            if sf.matrix.cols() != tf.matrix.cols() {
                return Err(Error::Invalid(format!(
                    "{} features: width {} on source vs {} on target",
                    sf.modality,
                    sf.matrix.cols(),
                    tf.matrix.cols()
                )));
            }
            if sf.present.len() != sf.matrix.rows() || tf.present.len() != tf.matrix.rows() {
                return Err(Error::Invalid(format!(
                    "{} features: mask length does not match rows",
                    sf.modality
                )));
            }
        }
        Ok(())
    }

    pub fn feature_modalities(&self) -> Vec<Modality> {
        self.source_features.iter().map(|f| f.modality).collect()
    }

    pub fn features(&self, modality: Modality) -> Option<(&ModalityFeatures, &ModalityFeatures)> {
        let i = self
            .source_features
            .iter()
            .position(|f| f.modality == modality)?;
        Some((&self.source_features[i], &self.target_features[i]))
    }

    /// `deg(e_s) + deg(e_t)` for a cross-graph pair.
    pub fn degree_sum(&self, pair: (usize, usize)) -> Result<usize> {
        Ok(self.source.degree(pair.0)? + self.target.degree(pair.1)?)
    }

    /// Per-modality `(source coverage, target coverage)` fractions.
    pub fn coverage(&self) -> Vec<(Modality, f64, f64)> {
        self.source_features
            .iter()
            .zip(&self.target_features)
            .map(|(s, t)| (s.modality, s.coverage(), t.coverage()))
            .collect()
    }
}

fn check_one_to_one(pivots: &[(usize, usize)], name: &str) -> Result<()> {
    let mut sources = HashSet::new();
    let mut targets = HashSet::new();
    for &(s, t) in pivots {
        if !sources.insert(s) {
            return Err(Error::Invalid(format!(
                "{name} pivots: source entity {s} appears twice"
            )));
        }
        if !targets.insert(t) {
            return Err(Error::Invalid(format!(
                "{name} pivots: target entity {t} appears twice"
            )));
        }
    }
    Ok(())
}

/// Load triples, resolving each token first as a vocabulary label and
/// otherwise as an integer id.
fn load_triples(path: &Path, entities: &[String], relations: &[String]) -> Result<Vec<Triple>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entity_ids: HashMap<&str, usize> = entities
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let relation_ids: HashMap<&str, usize> = relations
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let resolve = |tok: &str, table: &HashMap<&str, usize>, n: usize| -> Option<usize> {
        if let Some(&id) = table.get(tok) {
            return Some(id);
        }
        tok.parse::<usize>().ok().filter(|&id| id < n)
    };
    let mut triples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::format(
                path,
                format!("line {}: expected head<TAB>relation<TAB>tail", lineno + 1),
            ));
        }
        let head = resolve(parts[0], &entity_ids, entities.len());
        let relation = resolve(parts[1], &relation_ids, relations.len());
        let tail = resolve(parts[2], &entity_ids, entities.len());
        match (head, relation, tail) {
            (Some(head), Some(relation), Some(tail)) => triples.push(Triple {
                head,
                relation,
                tail,
            }),
            _ => {
                return Err(Error::format(
                    path,
                    format!("line {}: unresolvable entity or relation", lineno + 1),
                ))
            }
        }
    }
    Ok(triples)
}

fn load_side(manifest: &KeyValueFile, side: &str) -> Result<KnowledgeGraph> {
    let entities = formats::read_vocab(&manifest.path_value(&format!("{side}.entity_vocab"))?)?;
    let relations =
        formats::read_vocab(&manifest.path_value(&format!("{side}.relation_vocab"))?)?;
    let triples = load_triples(
        &manifest.path_value(&format!("{side}.triples"))?,
        &entities,
        &relations,
    )?;
    KnowledgeGraph::new(entities, relations, triples)
}

fn load_features(
    manifest: &KeyValueFile,
    modality: Modality,
    side: &str,
    entity_count: usize,
) -> Result<Option<ModalityFeatures>> {
    let key = format!("feature.{}.{}", modality.name(), side);
    let Some(path) = manifest.opt_path_value(&key) else {
        return Ok(None);
    };
    let matrix = formats::read_matrix(&path)?;
    if matrix.rows() != entity_count {
        return Err(Error::format(
            &path,
            format!(
                "{} rows for {} {} entities",
                matrix.rows(),
                entity_count,
                side
            ),
        ));
    }
    if let Some(declared) = manifest.parsed::<usize>(&format!("feature.{}.dim", modality.name()))? {
        if matrix.cols() != declared {
            return Err(Error::format(
                &path,
                format!(
                    "declared {} dim {} but file has width {}",
                    modality,
                    declared,
                    matrix.cols()
                ),
            ));
        }
    }
    let present = match manifest.opt_path_value(&format!("{key}_mask")) {
        Some(mask_path) => formats::read_mask(&mask_path, entity_count)?,
        None => vec![true; entity_count],
    };
    Ok(Some(ModalityFeatures {
        modality,
        matrix,
        present,
    }))
}

/// Assemble and validate a task from a manifest file. Missing feature rows
/// are imputed from observed-row statistics; the returned masks record
/// which rows were imputed.
pub fn load_task(manifest_path: &Path) -> Result<AlignmentTask> {
    let manifest = KeyValueFile::parse(manifest_path)?;
    load_task_from_manifest(&manifest)
}

pub fn load_task_from_manifest(manifest: &KeyValueFile) -> Result<AlignmentTask> {
    let seed: u64 = manifest.parsed_or("seed", 0)?;
    let source = load_side(manifest, "source")?;
    let target = load_side(manifest, "target")?;

    let mut source_features = Vec::new();
    let mut target_features = Vec::new();
    for modality in Modality::FEATURE {
        let sf = load_features(manifest, modality, "source", source.entity_count())?;
        let tf = load_features(manifest, modality, "target", target.entity_count())?;
        match (sf, tf) {
            (Some(sf), Some(tf)) => {
                source_features.push(impute_missing(&sf, seed)?);
                target_features.push(impute_missing(&tf, seed ^ 1)?);
            }
            (None, None) => {}
            _ => {
                return Err(Error::format(
                    &manifest.path,
                    format!("{modality} features supplied for only one graph"),
                ));
            }
        }
    }
    // Fall back to relation-count features when none were supplied but a
    // width was requested.
    if !source_features.iter().any(|f| f.modality == Modality::Relation) {
        if let Some(dim) = manifest.parsed::<usize>("feature.relation.dim")? {
            source_features.push(relation_count_features(&source, dim));
            target_features.push(relation_count_features(&target, dim));
            source_features.sort_by_key(|f| f.modality);
            target_features.sort_by_key(|f| f.modality);
        }
    }

    let train_pivots = formats::read_pivots(&manifest.path_value("pivots.train")?)?;
    let test_pivots = formats::read_pivots(&manifest.path_value("pivots.test")?)?;

    let task = AlignmentTask {
        source,
        target,
        source_features,
        target_features,
        train_pivots,
        test_pivots,
        seed,
    };
    task.validate()?;
    Ok(task)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_graph(n: usize, triples: &[(usize, usize, usize)]) -> KnowledgeGraph {
        KnowledgeGraph::new(
            (0..n).map(|i| format!("e{i}")).collect(),
            vec!["r0".to_string(), "r1".to_string()],
            triples
                .iter()
                .map(|&(h, r, t)| Triple {
                    head: h,
                    relation: r,
                    tail: t,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn degrees_sum_to_twice_triples() {
        let kg = toy_graph(4, &[(0, 0, 1), (1, 1, 2), (0, 0, 3)]);
        let total: usize = kg.degrees().iter().sum();
        assert_eq!(total, 2 * kg.triples().len());
        assert_eq!(kg.degree(0).unwrap(), 2);
        assert_eq!(kg.degree(3).unwrap(), 1);
    }

    #[test]
    fn triple_outside_vocab_is_rejected() {
        let result = KnowledgeGraph::new(
            vec!["a".into()],
            vec!["r".into()],
            vec![Triple {
                head: 0,
                relation: 0,
                tail: 5,
            }],
        );
        assert!(result.is_err());
    }

    #[test]
    fn degree_sum_cases() {
        let source = toy_graph(3, &[(0, 0, 1), (0, 1, 2), (1, 0, 0)]);
        let target = toy_graph(3, &[(0, 0, 1), (2, 1, 0)]);
        let task = AlignmentTask {
            source,
            target,
            source_features: vec![],
            target_features: vec![],
            train_pivots: vec![],
            test_pivots: vec![],
            seed: 0,
        };
        // source entity 0 sits in 3 triple slots, target entity 0 in 2.
        assert_eq!(task.degree_sum((0, 0)).unwrap(), 5);
        assert!(task.degree_sum((9, 0)).is_err());
    }

    #[test]
    fn degree_sum_of_isolated_pair_is_zero() {
        let source = toy_graph(2, &[]);
        let target = toy_graph(2, &[]);
        let task = AlignmentTask {
            source,
            target,
            source_features: vec![],
            target_features: vec![],
            train_pivots: vec![],
            test_pivots: vec![],
            seed: 0,
        };
        assert_eq!(task.degree_sum((0, 1)).unwrap(), 0);
    }

    fn features_with_mask(rows: &[Vec<f64>], present: Vec<bool>) -> ModalityFeatures {
        ModalityFeatures {
            modality: Modality::Image,
            matrix: Matrix::from_rows(rows).unwrap(),
            present,
        }
    }

    #[test]
    fn imputation_draws_from_observed_statistics() {
        let f = features_with_mask(
            &[vec![1.0, 1.0], vec![3.0, 3.0], vec![0.0, 0.0]],
            vec![true, true, false],
        );
        let imputed = impute_missing(&f, 7).unwrap();
        // Observed rows untouched.
        assert_eq!(imputed.matrix.row(0), f.matrix.row(0));
        assert_eq!(imputed.matrix.row(1), f.matrix.row(1));
        // mu = 2, population sigma = 1 per dimension; a draw within 6
        // sigma of the mean is a sanity bound, exactness is covered by
        // the moment test below.
        for &v in imputed.matrix.row(2) {
            assert!((v - 2.0).abs() < 6.0);
        }
        // Deterministic under the same seed.
        let again = impute_missing(&f, 7).unwrap();
        assert_eq!(imputed.matrix, again.matrix);
        // Different seed changes only the absent row.
        let other = impute_missing(&f, 8).unwrap();
        assert_eq!(other.matrix.row(0), f.matrix.row(0));
        assert_ne!(other.matrix.row(2), imputed.matrix.row(2));
    }

    #[test]
    fn imputation_moments_match_observed_rows() {
        // Wide row so sample statistics concentrate: mu = 2, sigma = 1.
        let dims = 20_000;
        let mut rows = vec![vec![1.0; dims], vec![3.0; dims], vec![0.0; dims]];
        rows[2] = vec![0.0; dims];
        let f = features_with_mask(&rows, vec![true, true, false]);
        let imputed = impute_missing(&f, 3).unwrap();
        let row = imputed.matrix.row(2);
        let mean = row.iter().sum::<f64>() / dims as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dims as f64;
        assert!((mean - 2.0).abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn imputation_is_noop_when_all_present() {
        let f = features_with_mask(&[vec![1.0, 2.0], vec![3.0, 4.0]], vec![true, true]);
        let imputed = impute_missing(&f, 1).unwrap();
        assert_eq!(imputed.matrix, f.matrix);
    }

    #[test]
    fn degenerate_variance_copies_the_common_row() {
        let f = features_with_mask(
            &[vec![5.0, -1.0], vec![5.0, -1.0], vec![0.0, 0.0]],
            vec![true, true, false],
        );
        let imputed = impute_missing(&f, 1).unwrap();
        assert_eq!(imputed.matrix.row(2), &[5.0, -1.0]);
    }

    #[test]
    fn imputation_without_observed_rows_fails() {
        let f = features_with_mask(&[vec![0.0, 0.0]], vec![false]);
        assert!(impute_missing(&f, 1).is_err());
    }

    #[test]
    fn relation_count_features_count_incident_slots() {
        let kg = toy_graph(3, &[(0, 0, 1), (0, 0, 2), (1, 1, 2)]);
        let f = relation_count_features(&kg, 2);
        // r0 occurs twice (column 0), r1 once (column 1).
        assert_eq!(f.matrix.get(0, 0), 2.0);
        assert_eq!(f.matrix.get(1, 0), 1.0);
        assert_eq!(f.matrix.get(2, 1), 1.0);
        assert_eq!(f.matrix.get(0, 1), 0.0);
    }

    fn write_toy_task(dir: &std::path::Path, image_dim_key: usize) -> std::path::PathBuf {
        use std::fmt::Write as _;
        let vocab = |n: usize, prefix: &str| {
            let mut s = String::new();
            for i in 0..n {
                writeln!(s, "{prefix}{i}\t{i}").unwrap();
            }
            s
        };
        std::fs::write(dir.join("se.tsv"), vocab(3, "s")).unwrap();
        std::fs::write(dir.join("te.tsv"), vocab(3, "t")).unwrap();
        std::fs::write(dir.join("sr.tsv"), "r0\t0\n").unwrap();
        std::fs::write(dir.join("tr.tsv"), "r0\t0\n").unwrap();
        std::fs::write(dir.join("st.tsv"), "0\t0\t1\ns1\tr0\ts2\n").unwrap();
        std::fs::write(dir.join("tt.tsv"), "0\t0\t2\n").unwrap();
        let features = Matrix::from_fn(3, 2, |i, j| (i + j) as f64);
        formats::write_matrix(&dir.join("img_s.mmea"), &features).unwrap();
        formats::write_matrix(&dir.join("img_t.mmea"), &features).unwrap();
        formats::write_mask(&dir.join("img_t.mask"), &[true, true, false]).unwrap();
        std::fs::write(dir.join("train.tsv"), "0\t0\n").unwrap();
        std::fs::write(dir.join("test.tsv"), "1\t1\n2\t2\n").unwrap();
        let manifest = dir.join("task.cfg");
        std::fs::write(
            &manifest,
            format!(
                "seed = 1\n\
                 source.entity_vocab = se.tsv\nsource.relation_vocab = sr.tsv\nsource.triples = st.tsv\n\
                 target.entity_vocab = te.tsv\ntarget.relation_vocab = tr.tsv\ntarget.triples = tt.tsv\n\
                 feature.image.dim = {image_dim_key}\n\
                 feature.image.source = img_s.mmea\nfeature.image.target = img_t.mmea\n\
                 feature.image.target_mask = img_t.mask\n\
                 pivots.train = train.tsv\npivots.test = test.tsv\n"
            ),
        )
        .unwrap();
        manifest
    }

    #[test]
    fn load_task_resolves_labels_masks_and_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_toy_task(dir.path(), 2);
        let task = load_task(&manifest).unwrap();
        assert_eq!(task.source.entity_count(), 3);
        // Mixed id/label triples resolved.
        assert_eq!(task.source.triples().len(), 2);
        let (sf, tf) = task.features(Modality::Image).unwrap();
        assert_eq!(sf.coverage(), 1.0);
        assert!((tf.coverage() - 2.0 / 3.0).abs() < 1e-12);
        // The masked row was imputed away from its stored zeros.
        assert!(tf.matrix.row(2).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn load_task_rejects_declared_width_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_toy_task(dir.path(), 5);
        let err = load_task(&manifest).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn load_task_rejects_unknown_pivot_entities() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_toy_task(dir.path(), 2);
        std::fs::write(dir.path().join("train.tsv"), "0\t9\n").unwrap();
        let err = load_task(&manifest).unwrap_err();
        assert!(err.to_string().contains("pivot id out of range"), "{err}");
    }

    #[test]
    fn duplicate_pivot_entity_is_rejected() {
        let task = AlignmentTask {
            source: toy_graph(3, &[]),
            target: toy_graph(3, &[]),
            source_features: vec![],
            target_features: vec![],
            train_pivots: vec![(0, 0), (0, 1)],
            test_pivots: vec![],
            seed: 0,
        };
        assert!(task.validate().is_err());
    }

    #[test]
    fn out_of_range_pivot_is_rejected() {
        let task = AlignmentTask {
            source: toy_graph(3, &[]),
            target: toy_graph(3, &[]),
            source_features: vec![],
            target_features: vec![],
            train_pivots: vec![(0, 7)],
            test_pivots: vec![],
            seed: 0,
        };
        let err = task.validate().unwrap_err();
        assert!(err.to_string().contains("pivot id out of range"));
    }
}
