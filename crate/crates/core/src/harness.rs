//! File-level operations behind each `fairrag` subcommand, plus the
//! selection ablation demo. Everything here is deterministic given its
//! inputs and seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::{export_bundles, ConditioningError, ProjectorWeights};
use crate::config::{ConfigError, RunConfig};
use crate::demographics::{
    classify_face, DemographicsError, FaceObservation, GenderPrompts, IntersectionalGroup,
    MstPalette,
};
use crate::fixtures::{
    synth_population, synth_skewed_pool, FixtureError, PopulationSpec, SkewedPool,
};
use crate::metrics::{
    diversity_of_counts, evaluate_prompt_set, ClipInput, EvalConfig, EvalInput, EvalReport,
    FidInput, GroupHistogram, MetricsError,
};
use crate::retrieval::{
    balanced_select_with, fair_retrieve, make_debiased_query, top_k_select, Cardinalities,
    RetrievalError, SelectionResult,
};
use crate::store::{read_matrix, read_meta_jsonl, Candidate, EmbeddingStore, StoreError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: {msg}")]
    BadInput { path: String, msg: String },
    #[error("no query embedding for {0:?}")]
    MissingQueryEmbedding(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Demographics(#[from] DemographicsError),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}

fn normalized(mut v: Vec<f32>) -> Vec<f32> {
    let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in &mut v {
            *x = (*x as f64 / n) as f32;
        }
    }
    v
}

#[derive(Debug, Deserialize)]
struct EmbeddingLine {
    id: String,
    embedding: Vec<f32>,
}

/// Reads `{"id": ..., "embedding": [...]}` lines.
pub fn read_embeddings_jsonl(path: &Path) -> Result<Vec<(String, Vec<f32>)>, HarnessError> {
    let reader = BufReader::new(fs::File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingLine = serde_json::from_str(&line).map_err(|e| HarnessError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((rec.id, rec.embedding));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexSummary {
    pub path: PathBuf,
    pub sidecar: PathBuf,
    pub count: usize,
    pub dim: usize,
    pub annotated: usize,
}

/// `index build`: embeddings JSONL + annotation JSONL -> store files.
pub fn index_build(
    embeddings: &Path,
    annotations: &Path,
    out: &Path,
) -> Result<IndexSummary, HarnessError> {
    let rows = read_embeddings_jsonl(embeddings)?;
    let anns = read_meta_jsonl(annotations)?;
    let store = EmbeddingStore::build(rows, anns)?;
    store.save(out)?;
    Ok(IndexSummary {
        path: out.to_path_buf(),
        sidecar: crate::store::sidecar_path(out),
        count: store.len(),
        dim: store.dim(),
        annotated: store
            .annotations()
            .iter()
            .filter(|a| a.group.is_some())
            .count(),
    })
}

/// Text embeddings keyed by the exact text they encode.
pub type TextEmbeddings = BTreeMap<String, Vec<f32>>;

/// `retrieve`: looks up the (debiased) query text in the text-embedding
/// table, then runs Top-N retrieval and selection.
pub fn retrieve(
    store_path: &Path,
    query_embeddings: &Path,
    prompt: &str,
    config: &RunConfig,
) -> Result<SelectionResult, HarnessError> {
    config.validate()?;
    let store = EmbeddingStore::load(store_path)?;
    let table: TextEmbeddings = read_json(query_embeddings)?;
    retrieve_with(&store, &table, prompt, config)
}

pub fn retrieve_with(
    store: &EmbeddingStore,
    table: &TextEmbeddings,
    prompt: &str,
    config: &RunConfig,
) -> Result<SelectionResult, HarnessError> {
    let query = make_debiased_query(prompt, config.effective_suffix())?;
    let emb = table
        .get(&query.debiased_text)
        .ok_or_else(|| HarnessError::MissingQueryEmbedding(query.debiased_text.clone()))?;
    let query = query.with_embedding(normalized(emb.clone()));
    Ok(fair_retrieve(
        store,
        &query,
        &config.retrieval_params(),
        config.seed,
    )?)
}

/// `select`: selection over an already-ranked candidate list.
pub fn select(candidates_path: &Path, config: &RunConfig) -> Result<SelectionResult, HarnessError> {
    let candidates: Vec<Candidate> = read_json(candidates_path)?;
    select_candidates(&candidates, config)
}

pub fn select_candidates(
    candidates: &[Candidate],
    config: &RunConfig,
) -> Result<SelectionResult, HarnessError> {
    config.validate()?;
    let mut ranked: Vec<Candidate> = candidates.to_vec();
    for (i, c) in ranked.iter_mut().enumerate() {
        c.row = i;
    }
    ranked.sort_by(|a, b| crate::store::rank_order((a.score, a.row), (b.score, b.row)));
    ranked.truncate(config.n);
    let result = if config.balanced_sampling {
        balanced_select_with(&ranked, config.k, config.seed, config.cardinalities)?
    } else {
        top_k_select(&ranked, config.k, config.seed)?
    };
    Ok(result)
}

/// `bundle`: writes one bundle JSON per selected reference into `out_dir`
/// as `bundle-<index>.json`.
pub fn bundle(
    selection_path: &Path,
    store_path: &Path,
    projector_path: &Path,
    prompt: &str,
    out_dir: &Path,
    config: &RunConfig,
) -> Result<Vec<PathBuf>, HarnessError> {
    let selection: SelectionResult = read_json(selection_path)?;
    let store = EmbeddingStore::load(store_path)?;
    let weights = ProjectorWeights::load(projector_path)?;
    let bundles = export_bundles(
        prompt,
        &selection,
        &store,
        &weights,
        &config.bundle_options(),
    )?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut paths = Vec::with_capacity(bundles.len());
    for (i, b) in bundles.iter().enumerate() {
        let p = out_dir.join(format!("bundle-{i:03}.json"));
        fs::write(&p, b.to_json() + "\n").map_err(io_err(&p))?;
        paths.push(p);
    }
    Ok(paths)
}

/// One generated image as handed to `eval`: nothing detected, an already
/// classified group, or raw face measurements to classify here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageRecord {
    Group(IntersectionalGroup),
    Face(FaceObservation),
}

#[derive(Debug, Clone, Default)]
pub struct EvalPaths {
    pub classifications: PathBuf,
    pub image_embeddings: Option<PathBuf>,
    pub text_embeddings: Option<PathBuf>,
    pub gen_features: Option<PathBuf>,
    pub real_features: Option<PathBuf>,
    pub gender_prompts: Option<PathBuf>,
    pub palette: Option<PathBuf>,
}

/// `eval`: loads all inputs, classifies raw faces, computes the report.
pub fn eval(paths: &EvalPaths, cardinalities: Cardinalities) -> Result<EvalReport, HarnessError> {
    let raw: BTreeMap<String, Vec<Option<ImageRecord>>> = read_json(&paths.classifications)?;
    let palette = match &paths.palette {
        Some(p) => MstPalette::load(p)?,
        None => MstPalette::bundled(),
    };
    let prompts: Option<GenderPrompts> =
        paths.gender_prompts.as_deref().map(read_json).transpose()?;

    let mut classifications = BTreeMap::new();
    for (prompt, images) in raw {
        let mut groups = Vec::with_capacity(images.len());
        for img in images {
            groups.push(match img {
                None => None,
                Some(ImageRecord::Group(g)) => Some(g),
                Some(ImageRecord::Face(face)) => {
                    let gp = prompts.as_ref().ok_or_else(|| {
                        HarnessError::Usage("raw face records need --gender-prompts".into())
                    })?;
                    classify_face(&face, gp, &palette)?
                }
            });
        }
        classifications.insert(prompt, groups);
    }

    let clip = match (&paths.image_embeddings, &paths.text_embeddings) {
        (Some(i), Some(t)) => Some(ClipInput {
            image_embs: read_json(i)?,
            text_embs: read_json(t)?,
        }),
        (None, None) => None,
        _ => {
            return Err(HarnessError::Usage(
                "image and text embeddings must be given together".into(),
            ))
        }
    };

    let fid = match (&paths.gen_features, &paths.real_features) {
        (Some(g), Some(r)) => FidInput::Pooled {
            generated: read_matrix(g)?.rows().map(<[f32]>::to_vec).collect(),
            real: read_matrix(r)?.rows().map(<[f32]>::to_vec).collect(),
        },
        (None, None) => FidInput::None,
        _ => {
            return Err(HarnessError::Usage(
                "generated and real features must be given together".into(),
            ))
        }
    };

    let input = EvalInput {
        classifications,
        clip,
        fid,
    };
    Ok(evaluate_prompt_set(&input, &EvalConfig { cardinalities })?)
}

/// `synth`: writes a synthetic population as a store.
pub fn synth(spec: &PopulationSpec, out: &Path) -> Result<IndexSummary, HarnessError> {
    let pop = synth_population(spec)?;
    let store = pop.into_store()?;
    store.save(out)?;
    Ok(IndexSummary {
        path: out.to_path_buf(),
        sidecar: crate::store::sidecar_path(out),
        count: store.len(),
        dim: store.dim(),
        annotated: store.len(),
    })
}

/// Intersectional diversity of a set of selected references; unannotated
/// references count as no-face images.
pub fn selection_diversity(
    groups: &[Option<IntersectionalGroup>],
    cardinalities: Cardinalities,
) -> f64 {
    crate::metrics::prompt_diversity(groups, cardinalities)
        .map(|s| s.intersectional)
        .unwrap_or(0.0)
}

fn chosen_diversity(groups: &[Option<IntersectionalGroup>]) -> f64 {
    let hist = GroupHistogram::from_items(groups.iter().flatten().copied(), 120);
    diversity_of_counts(hist.counts.values().copied(), hist.n_possible).unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub pool_count: usize,
    pub dim: usize,
    pub majority_fraction: f64,
    pub n: usize,
    pub k: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            pool_count: 1000,
            dim: 64,
            majority_fraction: 0.8,
            n: 250,
            k: 20,
            trials: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub debiased_query: bool,
    pub balanced_sampling: bool,
    pub skewed_pool: f64,
    pub uniform_pool: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config: AblationConfig,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes") + "\n"
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(
            s,
            "mean intersectional diversity of K={} references, N={}, {} trials, pool of {} (majority {:.2})",
            c.k, c.n, c.trials, c.pool_count, c.majority_fraction
        );
        let _ = writeln!(
            s,
            "{:<22} {:>9} {:>9} {:>8} {:>8}",
            "variant", "debiased", "balanced", "skewed", "uniform"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<22} {:>9} {:>9} {:>8.4} {:>8.4}",
                r.variant,
                if r.debiased_query { "yes" } else { "no" },
                if r.balanced_sampling { "yes" } else { "no" },
                r.skewed_pool,
                r.uniform_pool
            );
        }
        s
    }
}

const VARIANTS: [(&str, bool, bool); 4] = [
    ("plain top-k", false, false),
    ("no debiased query", false, true),
    ("no balanced sampling", true, false),
    ("full", true, true),
];

fn trial_diversities(pool: &SkewedPool, n: usize, k: usize, seed: u64) -> [f64; 4] {
    let store = pool.population.to_store().expect("pool rows are valid");
    let neutral = store
        .top_n(&pool.neutral_query(), n)
        .expect("query matches pool");
    let biased = store
        .top_n(&pool.biased_query(), n)
        .expect("query matches pool");
    VARIANTS.map(|(_, debiased, balanced)| {
        let cands = if debiased { &neutral } else { &biased };
        let sel = if balanced {
            balanced_select_with(cands, k, seed, Cardinalities::default())
        } else {
            top_k_select(cands, k, seed)
        }
        .expect("pool is fully annotated");
        chosen_diversity(&sel.chosen_groups())
    })
}

/// Compares the four selection variants on skewed and near-uniform pools,
/// averaging intersectional diversity over independent trials.
pub fn ablation_demo(config: &AblationConfig) -> Result<AblationTable, HarnessError> {
    if config.k == 0 || config.n < config.k || config.trials == 0 {
        return Err(HarnessError::Usage(format!(
            "need n >= k >= 1 and trials >= 1 (n={}, k={}, trials={})",
            config.n, config.k, config.trials
        )));
    }
    // validate both pool shapes before fanning out
    synth_skewed_pool(config.majority_fraction, config.pool_count, config.dim, 0)?;
    let mut master = ChaCha20Rng::seed_from_u64(config.seed);
    let seeds: Vec<(u64, u64)> = (0..config.trials)
        .map(|_| (master.next_u64(), master.next_u64()))
        .collect();

    let per_trial: Vec<([f64; 4], [f64; 4])> = seeds
        .par_iter()
        .map(|&(pool_seed, sel_seed)| {
            let skewed = synth_skewed_pool(
                config.majority_fraction,
                config.pool_count,
                config.dim,
                pool_seed,
            )
            .expect("validated above");
            let uniform = synth_skewed_pool(1.0 / 120.0, config.pool_count, config.dim, pool_seed)
                .expect("valid fraction");
            (
                trial_diversities(&skewed, config.n, config.k, sel_seed),
                trial_diversities(&uniform, config.n, config.k, sel_seed),
            )
        })
        .collect();

    let t = config.trials as f64;
    let rows = VARIANTS
        .iter()
        .enumerate()
        .map(|(i, (name, debiased, balanced))| AblationRow {
            variant: name.to_string(),
            debiased_query: *debiased,
            balanced_sampling: *balanced,
            skewed_pool: per_trial.iter().map(|(s, _)| s[i]).sum::<f64>() / t,
            uniform_pool: per_trial.iter().map(|(_, u)| u[i]).sum::<f64>() / t,
        })
        .collect();
    Ok(AblationTable {
        config: config.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_direction_small() {
        let cfg = AblationConfig {
            trials: 10,
            pool_count: 400,
            ..Default::default()
        };
        let t = ablation_demo(&cfg).unwrap();
        let full = t.row("full").unwrap();
        let plain = t.row("plain top-k").unwrap();
        assert!(full.skewed_pool > plain.skewed_pool);
        assert_eq!(t, ablation_demo(&cfg).unwrap());
        assert!(t.render().contains("no balanced sampling"));
    }

    #[test]
    fn ablation_rejects_bad_config() {
        let cfg = AblationConfig {
            k: 0,
            ..Default::default()
        };
        assert!(ablation_demo(&cfg).is_err());
        let cfg = AblationConfig {
            majority_fraction: 1.5,
            ..Default::default()
        };
        assert!(matches!(ablation_demo(&cfg), Err(HarnessError::Fixture(_))));
    }

    #[test]
    fn image_record_variants() {
        let g: Option<ImageRecord> =
            serde_json::from_str(r#"{"age_group":"<20","gender":"female","skin_tone":4}"#).unwrap();
        assert!(matches!(g, Some(ImageRecord::Group(_))));
        let f: Option<ImageRecord> = serde_json::from_str(
            r#"{"age_years":41,"image_emb":[1.0,0.0],"face_pixels":[[200,150,120]]}"#,
        )
        .unwrap();
        assert!(matches!(f, Some(ImageRecord::Face(_))));
        let n: Option<ImageRecord> = serde_json::from_str("null").unwrap();
        assert!(n.is_none());
    }

    #[test]
    fn select_respects_modes() {
        let g = IntersectionalGroup::all();
        let cands: Vec<Candidate> = (0..30)
            .map(|i| Candidate {
                row: 0,
                id: format!("c{i}"),
                score: 1.0 - i as f64 / 100.0,
                group: Some(g[i % 3]),
            })
            .collect();
        let cfg = RunConfig {
            n: 30,
            k: 4,
            balanced_sampling: false,
            ..Default::default()
        };
        let sel = select_candidates(&cands, &cfg).unwrap();
        assert_eq!(
            sel.chosen.iter().map(|c| c.id.as_str()).collect::<Vec<_>>(),
            ["c0", "c1", "c2", "c3"]
        );
        let sel = select_candidates(
            &cands,
            &RunConfig {
                balanced_sampling: true,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(sel.chosen.len(), 4);
        assert_eq!(sel.weights.len(), 3);
    }
}
