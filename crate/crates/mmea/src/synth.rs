//! Synthetic alignment tasks for desk-scale verification.
//!
//! The target graph is an entity-permuted copy of the source with edge
//! dropout. Every entity carries a shared latent vector; each modality
//! observes that latent plus Gaussian noise, so feature channels agree
//! across graphs up to noise. A configurable fraction of entities comes in
//! near-duplicate pairs whose latents almost coincide: feature channels
//! confuse them while the graph neighbourhoods stay distinct, which gives
//! the structure channel signal no other channel carries. Triple endpoints
//! are drawn from a power law, producing the long-tailed degree
//! distributions real graphs show.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kgdata::{
    formats, impute_missing, AlignmentTask, KnowledgeGraph, Modality, ModalityFeatures, Triple,
};
use crate::numcore::Matrix;
use crate::rng::stream_rng;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub entities: usize,
    pub triples: usize,
    pub relations: usize,
    pub latent_dim: usize,
    /// Per-modality feature noise, in units of the latent's per-dimension
    /// standard deviation.
    pub noise_image: f64,
    pub noise_relation: f64,
    pub noise_attribute: f64,
    pub noise_surface: f64,
    pub include_surface: bool,
    /// Zipf exponent weighting which hubs attract spokes and core edges.
    pub power_law_exponent: f64,
    /// Entities `0..hub_core_size` form the hub core; everything else is
    /// periphery attached to the core by spokes. Real KGs are
    /// core-periphery: popular entities interlink, tail entities hang off
    /// them.
    pub hub_core_size: usize,
    /// Spoke count per periphery entity is drawn from a zipf over
    /// `1..=max_spokes` with this exponent, keeping the degree sequence
    /// long-tailed while guaranteeing every entity at least one edge.
    pub spoke_exponent: f64,
    pub max_spokes: usize,
    /// Probability that a source triple is absent from the target graph.
    pub edge_dropout: f64,
    /// Fraction of entities used as training pivots; the rest are held
    /// out as test pivots.
    pub seed_fraction: f64,
    /// Degree bias of the train-pivot draw: entities are sampled with
    /// weight `(degree + 1)^bias`. Zero is uniform; positive values make
    /// well-connected entities likelier to be labelled, mirroring how
    /// popular entities are the ones with known alignments.
    pub pivot_degree_bias: f64,
    /// Fraction of entities that belong to a near-duplicate pair. Twins
    /// are drawn outside the hub core, so they differ in graph position
    /// but (at zero jitter) in nothing else.
    pub duplicate_fraction: f64,
    /// Latent-space offset of a duplicate from its twin.
    pub duplicate_jitter: f64,
    /// Image-noise multiplier for twin entities. Visually ambiguous
    /// entities tend to have unstable image representations; inflating
    /// their noise keeps them out of the confident visual-pivot range.
    pub twin_image_noise_factor: f64,
    /// Relation/attribute-noise multiplier for twin entities. Twins share
    /// a latent, so their feature margins are pure noise either way;
    /// shrinking the noise keeps those spurious margins small relative to
    /// the graph signal without telling the channels anything new.
    pub twin_feature_noise_factor: f64,
    /// Fraction of entities with an observed image feature.
    pub image_coverage: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            entities: 200,
            triples: 600,
            relations: 10,
            latent_dim: 16,
            noise_image: 0.3,
            noise_relation: 0.3,
            noise_attribute: 0.3,
            noise_surface: 0.3,
            include_surface: false,
            power_law_exponent: 0.6,
            hub_core_size: 60,
            spoke_exponent: 0.7,
            max_spokes: 8,
            edge_dropout: 0.1,
            seed_fraction: 0.3,
            pivot_degree_bias: 6.0,
            duplicate_fraction: 0.30,
            duplicate_jitter: 0.0,
            twin_image_noise_factor: 3.5,
            twin_feature_noise_factor: 0.5,
            image_coverage: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Uniform noise setter covering every modality.
    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_image = sigma;
        self.noise_relation = sigma;
        self.noise_attribute = sigma;
        self.noise_surface = sigma;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.entities == 0 {
            return Err(Error::Config("entities must be positive".into()));
        }
        if self.relations == 0 {
            return Err(Error::Config("relations must be positive".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        for (name, v) in [
            ("edge_dropout", self.edge_dropout),
            ("seed_fraction", self.seed_fraction),
            ("duplicate_fraction", self.duplicate_fraction),
            ("image_coverage", self.image_coverage),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.entities >= 2 && self.triples > 0 {
            let max_distinct = self.entities * (self.entities - 1) * self.relations;
            if self.triples > max_distinct {
                return Err(Error::Config(format!(
                    "cannot draw {} distinct triples from {} possible",
                    self.triples, max_distinct
                )));
            }
        }
        if self.entities < 2 && self.triples > 0 {
            return Err(Error::Config(
                "need at least 2 entities to form triples".into(),
            ));
        }
        Ok(())
    }

    fn modalities(&self) -> Vec<(Modality, f64)> {
        let mut out = vec![
            (Modality::Image, self.noise_image),
            (Modality::Relation, self.noise_relation),
            (Modality::Attribute, self.noise_attribute),
        ];
        if self.include_surface {
            out.push((Modality::Surface, self.noise_surface));
        }
        out
    }
}

pub struct SynthOutput {
    pub task: AlignmentTask,
    /// Full ground-truth alignment (source id, target id).
    pub gold: Vec<(usize, usize)>,
    /// `permutation[e]` is the target id of source entity `e`.
    pub permutation: Vec<usize>,
}

struct RawSynth {
    source: KnowledgeGraph,
    target: KnowledgeGraph,
    /// Pre-imputation features: absent rows are zero.
    source_features: Vec<ModalityFeatures>,
    target_features: Vec<ModalityFeatures>,
    train_pivots: Vec<(usize, usize)>,
    test_pivots: Vec<(usize, usize)>,
    gold: Vec<(usize, usize)>,
    permutation: Vec<usize>,
}

fn zipf_cumulative(n: usize, exponent: f64) -> Vec<f64> {
    let mut cum = Vec::with_capacity(n);
    let mut total = 0.0;
    for i in 0..n {
        total += ((i + 1) as f64).powf(-exponent);
        cum.push(total);
    }
    cum
}

fn sample_zipf(cum: &[f64], rng: &mut impl Rng) -> usize {
    let total = *cum.last().unwrap();
    let u = rng.gen_range(0.0..total);
    cum.partition_point(|&c| c <= u)
}

fn build(cfg: &SynthConfig) -> Result<RawSynth> {
    cfg.validate()?;
    let n = cfg.entities;

    // Permutation mapping source ids to target ids.
    let mut permutation: Vec<usize> = (0..n).collect();
    permutation.shuffle(&mut stream_rng(cfg.seed, "synth.permutation"));

    // Twin membership is fixed before the graph draw so twin entities can
    // be guaranteed enough spokes for the graph to tell them apart.
    let core = cfg.hub_core_size.min(n).max(2);
    let mut twin = vec![false; n];
    let n_twin_pairs = (cfg.duplicate_fraction * n as f64 / 2.0).floor() as usize;
    let mut twin_ids: Vec<usize> = (core.min(n)..n).collect();
    twin_ids.shuffle(&mut stream_rng(cfg.seed, "synth.twins"));
    let twin_pairs: Vec<(usize, usize)> = (0..n_twin_pairs.min(twin_ids.len() / 2))
        .map(|p| (twin_ids[2 * p], twin_ids[2 * p + 1]))
        .collect();
    let mut twin_partner: Vec<Option<usize>> = vec![None; n];
    for &(a, b) in &twin_pairs {
        twin[a] = true;
        twin[b] = true;
        twin_partner[a] = Some(b);
        twin_partner[b] = Some(a);
    }

    // Source triples: every periphery entity hangs off the hub core by a
    // zipf-distributed number of spokes; the remaining budget interlinks
    // the core. Endpoint draws are zipf-weighted so hub degrees spread
    // into a long tail.
    let mut triple_rng = stream_rng(cfg.seed, "synth.triples");
    let core_cum = zipf_cumulative(core, cfg.power_law_exponent);
    let spoke_cum = zipf_cumulative(cfg.max_spokes.max(1), cfg.spoke_exponent);
    let mut seen = HashSet::new();
    let mut source_triples = Vec::with_capacity(cfg.triples);
    let push_edge = |a: usize,
                         b: usize,
                         rng: &mut rand::rngs::StdRng,
                         seen: &mut HashSet<(usize, usize)>,
                         triples: &mut Vec<Triple>| {
        let (head, tail) = if rng.gen_range(0.0..1.0) < 0.5 {
            (a, b)
        } else {
            (b, a)
        };
        // One edge per unordered pair; the adjacency collapses duplicates
        // anyway and distinct pairs keep spoke counts meaningful.
        let key = (head.min(tail), head.max(tail));
        if seen.insert(key) {
            triples.push(Triple {
                head,
                relation: rng.gen_range(0..cfg.relations),
                tail,
            });
            true
        } else {
            false
        }
    };

    let mut spoke_hubs: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in core..n {
        if source_triples.len() >= cfg.triples {
            break;
        }
        let mut n_spokes = 1 + sample_zipf(&spoke_cum, &mut triple_rng);
        if twin[e] {
            // Twins are indistinguishable in feature space; give them
            // enough graph context to be separable at all.
            n_spokes = n_spokes.max(4);
        }
        // A twin avoids its partner's hubs so the two graphs actually
        // differ where the features cannot.
        let forbidden: Vec<usize> = twin_partner[e]
            .map(|p| spoke_hubs[p].clone())
            .unwrap_or_default();
        let mut placed = 0;
        let mut attempts = 0;
        while placed < n_spokes && attempts < 80 {
            attempts += 1;
            let hub = sample_zipf(&core_cum, &mut triple_rng);
            if forbidden.contains(&hub) {
                continue;
            }
            if push_edge(e, hub, &mut triple_rng, &mut seen, &mut source_triples) {
                spoke_hubs[e].push(hub);
                placed += 1;
            }
            if source_triples.len() >= cfg.triples {
                break;
            }
        }
    }
    let mut attempts = 0usize;
    while source_triples.len() < cfg.triples {
        attempts += 1;
        if attempts > 400 * cfg.triples.max(1) {
            return Err(Error::Config(
                "triple sampling did not converge; lower the triple count".into(),
            ));
        }
        let a = sample_zipf(&core_cum, &mut triple_rng);
        let b = sample_zipf(&core_cum, &mut triple_rng);
        if a != b {
            push_edge(a, b, &mut triple_rng, &mut seen, &mut source_triples);
        }
    }

    // Target graph: permuted copy with edge dropout.
    let mut dropout_rng = stream_rng(cfg.seed, "synth.dropout");
    let target_triples: Vec<Triple> = source_triples
        .iter()
        .filter(|_| dropout_rng.gen_range(0.0..1.0) >= cfg.edge_dropout)
        .map(|t| Triple {
            head: permutation[t.head],
            relation: t.relation,
            tail: permutation[t.tail],
        })
        .collect();

    let source = KnowledgeGraph::new(
        (0..n).map(|i| format!("s{i}")).collect(),
        (0..cfg.relations).map(|r| format!("r{r}")).collect(),
        source_triples,
    )?;
    let target = KnowledgeGraph::new(
        (0..n).map(|i| format!("t{i}")).collect(),
        (0..cfg.relations).map(|r| format!("r{r}")).collect(),
        target_triples,
    )?;

    // Shared latents, with a slice of entities paired into near-twins.
    let mut latent_rng = stream_rng(cfg.seed, "synth.latents");
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut latents: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..cfg.latent_dim).map(|_| unit.sample(&mut latent_rng)).collect())
        .collect();
    let mut jitter_rng = stream_rng(cfg.seed, "synth.twin_jitter");
    for &(a, b) in &twin_pairs {
        latents[b] = latents[a]
            .iter()
            .map(|&v| v + cfg.duplicate_jitter * unit.sample(&mut jitter_rng))
            .collect();
    }

    // Per-modality observations of the latents.
    let mut source_features = Vec::new();
    let mut target_features = Vec::new();
    for (modality, sigma) in cfg.modalities() {
        let mut noise_rng = stream_rng(cfg.seed, &format!("synth.noise.{modality}"));
        let mut observe = |latent: &[f64], e: usize| -> Vec<f64> {
            let s = if twin[e] {
                if modality == Modality::Image {
                    sigma * cfg.twin_image_noise_factor
                } else {
                    sigma * cfg.twin_feature_noise_factor
                }
            } else {
                sigma
            };
            latent
                .iter()
                .map(|&v| v + s * unit.sample(&mut noise_rng))
                .collect()
        };
        let mut src = Matrix::zeros(n, cfg.latent_dim);
        for e in 0..n {
            let row = observe(&latents[e], e);
            src.row_mut(e).copy_from_slice(&row);
        }
        let mut tgt = Matrix::zeros(n, cfg.latent_dim);
        for e in 0..n {
            let row = observe(&latents[e], e);
            tgt.row_mut(permutation[e]).copy_from_slice(&row);
        }

        let coverage = if modality == Modality::Image {
            cfg.image_coverage
        } else {
            1.0
        };
        let make_mask = |matrix: &mut Matrix, stream: &str| -> Vec<bool> {
            let mut present = vec![true; n];
            if coverage < 1.0 {
                let missing = ((1.0 - coverage) * n as f64).round() as usize;
                let mut ids: Vec<usize> = (0..n).collect();
                ids.shuffle(&mut stream_rng(cfg.seed, stream));
                for &e in ids.iter().take(missing) {
                    present[e] = false;
                    for v in matrix.row_mut(e) {
                        *v = 0.0;
                    }
                }
            }
            present
        };
        let src_present = make_mask(&mut src, &format!("synth.mask.{modality}.source"));
        let tgt_present = make_mask(&mut tgt, &format!("synth.mask.{modality}.target"));
        source_features.push(ModalityFeatures {
            modality,
            matrix: src,
            present: src_present,
        });
        target_features.push(ModalityFeatures {
            modality,
            matrix: tgt,
            present: tgt_present,
        });
    }

    // Pivots: a (possibly degree-biased) slice of entities trains, the
    // rest are held out.
    let mut pivot_rng = stream_rng(cfg.seed, "synth.pivots");
    let n_train = (cfg.seed_fraction * n as f64).ceil() as usize;
    let mut pool: Vec<usize> = (0..n).collect();
    pool.shuffle(&mut pivot_rng);
    let mut train_ids = Vec::with_capacity(n_train.min(n));
    if cfg.pivot_degree_bias == 0.0 {
        train_ids.extend_from_slice(&pool[..n_train.min(n)]);
    } else {
        // Weighted draw without replacement.
        let mut weights: Vec<f64> = pool
            .iter()
            .map(|&e| ((source.degree(e).unwrap() + 1) as f64).powf(cfg.pivot_degree_bias))
            .collect();
        while train_ids.len() < n_train.min(n) {
            let total: f64 = weights.iter().sum();
            let mut u = pivot_rng.gen_range(0.0..total);
            let mut chosen = 0;
            for (k, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    if u < w {
                        chosen = k;
                        break;
                    }
                    u -= w;
                }
            }
            train_ids.push(pool[chosen]);
            weights[chosen] = 0.0;
        }
    }
    let train_set: HashSet<usize> = train_ids.iter().copied().collect();
    let train_pivots: Vec<(usize, usize)> =
        train_ids.iter().map(|&e| (e, permutation[e])).collect();
    let test_pivots: Vec<(usize, usize)> = pool
        .iter()
        .filter(|e| !train_set.contains(e))
        .map(|&e| (e, permutation[e]))
        .collect();
    let gold: Vec<(usize, usize)> = (0..n).map(|e| (e, permutation[e])).collect();

    Ok(RawSynth {
        source,
        target,
        source_features,
        target_features,
        train_pivots,
        test_pivots,
        gold,
        permutation,
    })
}

/// Generate a task in memory. Missing image rows are imputed exactly the
/// way the loader imputes them.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    let raw = build(cfg)?;
    let source_features = raw
        .source_features
        .iter()
        .map(|f| impute_missing(f, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let target_features = raw
        .target_features
        .iter()
        .map(|f| impute_missing(f, cfg.seed ^ 1))
        .collect::<Result<Vec<_>>>()?;
    let task = AlignmentTask {
        source: raw.source,
        target: raw.target,
        source_features,
        target_features,
        train_pivots: raw.train_pivots,
        test_pivots: raw.test_pivots,
        seed: cfg.seed,
    };
    task.validate()?;
    Ok(SynthOutput {
        task,
        gold: raw.gold,
        permutation: raw.permutation,
    })
}

/// Write a complete on-disk task (vocabularies, triples, features, masks,
/// pivots, gold alignment, manifest with desk-scale training defaults).
/// Returns the manifest path.
pub fn write_to_dir(cfg: &SynthConfig, dir: &Path) -> Result<PathBuf> {
    let raw = build(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let write_graph = |kg: &KnowledgeGraph, side: &str| -> Result<()> {
        formats::write_vocab(&dir.join(format!("{side}_entities.tsv")), kg.entity_labels())?;
        formats::write_vocab(
            &dir.join(format!("{side}_relations.tsv")),
            kg.relation_labels(),
        )?;
        let mut text = String::new();
        for t in kg.triples() {
            text.push_str(&format!("{}\t{}\t{}\n", t.head, t.relation, t.tail));
        }
        std::fs::write(dir.join(format!("{side}_triples.tsv")), text)
            .map_err(|e| Error::io(dir.join(format!("{side}_triples.tsv")), e))
    };
    write_graph(&raw.source, "source")?;
    write_graph(&raw.target, "target")?;

    let mut keys: Vec<(String, String)> = vec![
        ("seed".into(), cfg.seed.to_string()),
        ("source.entity_vocab".into(), "source_entities.tsv".into()),
        ("source.relation_vocab".into(), "source_relations.tsv".into()),
        ("source.triples".into(), "source_triples.tsv".into()),
        ("target.entity_vocab".into(), "target_entities.tsv".into()),
        ("target.relation_vocab".into(), "target_relations.tsv".into()),
        ("target.triples".into(), "target_triples.tsv".into()),
        ("pivots.train".into(), "train_pivots.tsv".into()),
        ("pivots.test".into(), "test_pivots.tsv".into()),
        ("pivots.gold".into(), "gold_pivots.tsv".into()),
    ];
    for (sf, tf) in raw.source_features.iter().zip(&raw.target_features) {
        let m = sf.modality.name();
        formats::write_matrix(&dir.join(format!("{m}_source.mmea")), &sf.matrix)?;
        formats::write_matrix(&dir.join(format!("{m}_target.mmea")), &tf.matrix)?;
        keys.push((format!("feature.{m}.dim"), sf.matrix.cols().to_string()));
        keys.push((format!("feature.{m}.source"), format!("{m}_source.mmea")));
        keys.push((format!("feature.{m}.target"), format!("{m}_target.mmea")));
        if sf.present.iter().any(|&p| !p) {
            formats::write_mask(&dir.join(format!("{m}_source.mask")), &sf.present)?;
            keys.push((format!("feature.{m}.source_mask"), format!("{m}_source.mask")));
        }
        if tf.present.iter().any(|&p| !p) {
            formats::write_mask(&dir.join(format!("{m}_target.mask")), &tf.present)?;
            keys.push((format!("feature.{m}.target_mask"), format!("{m}_target.mask")));
        }
    }
    formats::write_pivots(&dir.join("train_pivots.tsv"), &raw.train_pivots)?;
    formats::write_pivots(&dir.join("test_pivots.tsv"), &raw.test_pivots)?;
    formats::write_pivots(&dir.join("gold_pivots.tsv"), &raw.gold)?;

    // Desk-scale training defaults so the manifest is runnable as-is:
    // layer widths and step size scaled down with the task.
    keys.push(("train.gcn_dims".into(), "32,32,16".into()));
    keys.push(("train.proj_dim".into(), "16".into()));
    keys.push(("train.learning_rate".into(), "2e-3".into()));

    keys.sort();
    let manifest_path = dir.join("task.cfg");
    formats::write_key_values(&manifest_path, &keys)?;
    Ok(manifest_path)
}
