//! Fair retrieval: debiased query text, Top-N candidates, group weights and
//! seeded balanced selection of the Top-K references.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demographics::{Attribute, IndividualGroup, IntersectionalGroup};
use crate::store::{rank_order, Candidate, EmbeddingStore, StoreError};

pub const DEFAULT_SUFFIX: &str = "with any age, gender, skin tone";
pub const DEFAULT_N: usize = 250;
pub const DEFAULT_K: usize = 20;
/// Identifier written into every [`SelectionResult`].
pub const RNG_ALGORITHM: &str = "chacha20";

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("no demographic groups to weight")]
    EmptyGroupSet,
    #[error("no annotated candidates among {0} retrieved")]
    NoAnnotatedCandidates(usize),
    #[error("k must be positive")]
    NonPositiveK,
    #[error("n must be at least k (n={n}, k={k})")]
    InvalidN { n: usize, k: usize },
    #[error("query has no embedding")]
    MissingEmbedding,
    #[error("attribute cardinality must be positive")]
    InvalidCardinality,
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// A prompt plus the debiasing suffix used to retrieve references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasedQuery {
    pub original: String,
    pub debiased_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
}

impl DebiasedQuery {
    pub fn new(prompt: &str) -> Result<Self, RetrievalError> {
        make_debiased_query(prompt, DEFAULT_SUFFIX)
    }

    pub fn with_embedding(mut self, embedding: Vec<f32>) -> Self {
        self.embedding = Some(embedding);
        self
    }
}

/// `"<prompt> <suffix>"`; an empty suffix leaves the prompt unchanged.
pub fn make_debiased_query(prompt: &str, suffix: &str) -> Result<DebiasedQuery, RetrievalError> {
    if prompt.trim().is_empty() {
        return Err(RetrievalError::EmptyPrompt);
    }
    let debiased_text = if suffix.is_empty() {
        prompt.to_string()
    } else {
        format!("{prompt} {suffix}")
    };
    Ok(DebiasedQuery {
        original: prompt.to_string(),
        debiased_text,
        embedding: None,
    })
}

/// Number of possible values per attribute (`n_a`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Cardinalities {
    pub age: u32,
    pub gender: u32,
    pub skin: u32,
}

impl Default for Cardinalities {
    fn default() -> Self {
        Self {
            age: 6,
            gender: 2,
            skin: 10,
        }
    }
}

impl Cardinalities {
    pub fn get(&self, attribute: Attribute) -> u32 {
        match attribute {
            Attribute::Age => self.age,
            Attribute::Gender => self.gender,
            Attribute::Skin => self.skin,
        }
    }

    pub fn intersectional(&self) -> u32 {
        self.age * self.gender * self.skin
    }

    fn validate(&self) -> Result<(), RetrievalError> {
        if self.age == 0 || self.gender == 0 || self.skin == 0 {
            return Err(RetrievalError::InvalidCardinality);
        }
        Ok(())
    }
}

/// Unique groups among the candidates and how often each individual
/// attribute value occurs across that unique set.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub groups: BTreeSet<IntersectionalGroup>,
    pub counts: BTreeMap<IndividualGroup, u32>,
    pub cardinalities: Cardinalities,
}

impl GroupStats {
    pub fn from_groups<I>(groups: I, cardinalities: Cardinalities) -> Self
    where
        I: IntoIterator<Item = IntersectionalGroup>,
    {
        let groups: BTreeSet<_> = groups.into_iter().collect();
        let mut counts = BTreeMap::new();
        for g in &groups {
            for a in Attribute::ALL {
                *counts.entry(g.get(a)).or_insert(0) += 1;
            }
        }
        Self {
            groups,
            counts,
            cardinalities,
        }
    }

    pub fn count(&self, individual: IndividualGroup) -> u32 {
        self.counts.get(&individual).copied().unwrap_or(0)
    }
}

/// `w_g = 1 / Σ_a m_{g[a]} / n_a` for every group in `stats`.
pub fn compute_weights(
    stats: &GroupStats,
) -> Result<BTreeMap<IntersectionalGroup, f64>, RetrievalError> {
    if stats.groups.is_empty() {
        return Err(RetrievalError::EmptyGroupSet);
    }
    stats.cardinalities.validate()?;
    Ok(stats
        .groups
        .iter()
        .map(|g| {
            let denom: f64 = Attribute::ALL
                .iter()
                .map(|&a| stats.count(g.get(a)) as f64 / stats.cardinalities.get(a) as f64)
                .sum();
            (*g, 1.0 / denom)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Balanced,
    TopK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeight {
    pub group: IntersectionalGroup,
    pub w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChosenReference {
    pub id: String,
    pub score: f64,
    pub group: Option<IntersectionalGroup>,
}

impl From<&Candidate> for ChosenReference {
    fn from(c: &Candidate) -> Self {
        Self {
            id: c.id.clone(),
            score: c.score,
            group: c.group,
        }
    }
}

/// The K selected references and everything needed to audit or replay the
/// selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub seed: u64,
    pub rng: String,
    pub mode: SelectionMode,
    pub n: u32,
    pub k: u32,
    pub skipped_unannotated: u32,
    pub weights: Vec<GroupWeight>,
    pub chosen: Vec<ChosenReference>,
}

impl SelectionResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("selection serializes")
    }

    pub fn weight_of(&self, group: &IntersectionalGroup) -> Option<f64> {
        self.weights
            .iter()
            .find(|gw| &gw.group == group)
            .map(|gw| gw.w)
    }

    pub fn chosen_groups(&self) -> Vec<Option<IntersectionalGroup>> {
        self.chosen.iter().map(|c| c.group).collect()
    }
}

/// Draws one key with probability proportional to its weight.
fn draw_weighted<R: Rng>(
    rng: &mut R,
    pool: &BTreeMap<IntersectionalGroup, (f64, VecDeque<usize>)>,
) -> IntersectionalGroup {
    let total: f64 = pool.values().map(|(w, _)| w).sum();
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (g, (w, _)) in pool {
        acc += w;
        last = Some(*g);
        if target < acc {
            return *g;
        }
    }
    last.expect("pool is non-empty")
}

/// Balanced sampling with the default 6/2/10 attribute cardinalities.
pub fn balanced_select(
    candidates: &[Candidate],
    k: usize,
    seed: u64,
) -> Result<SelectionResult, RetrievalError> {
    balanced_select_with(candidates, k, seed, Cardinalities::default())
}

/// Selects up to `k` annotated candidates.
///
/// Each draw picks a group among those with unused candidates, with
/// probability `w_g / Σ w` over that set, then takes the group's best
/// remaining candidate. Weights are computed once from the full candidate
/// set. Unannotated candidates are skipped and counted.
pub fn balanced_select_with(
    candidates: &[Candidate],
    k: usize,
    seed: u64,
    cardinalities: Cardinalities,
) -> Result<SelectionResult, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::NonPositiveK);
    }
    let mut order: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].group.is_some())
        .collect();
    let skipped = candidates.len() - order.len();
    if order.is_empty() {
        return Err(RetrievalError::NoAnnotatedCandidates(candidates.len()));
    }
    order.sort_by(|&a, &b| {
        rank_order(
            (candidates[a].score, candidates[a].row),
            (candidates[b].score, candidates[b].row),
        )
        .then(a.cmp(&b))
    });

    let stats = GroupStats::from_groups(
        order.iter().filter_map(|&i| candidates[i].group),
        cardinalities,
    );
    let weights = compute_weights(&stats)?;

    let mut pool: BTreeMap<IntersectionalGroup, (f64, VecDeque<usize>)> = weights
        .iter()
        .map(|(g, w)| (*g, (*w, VecDeque::new())))
        .collect();
    for &i in &order {
        let g = candidates[i].group.expect("filtered to annotated");
        pool.get_mut(&g).expect("group has a weight").1.push_back(i);
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(k.min(order.len()));
    while chosen.len() < k && !pool.is_empty() {
        let g = draw_weighted(&mut rng, &pool);
        let queue = &mut pool.get_mut(&g).expect("drawn from pool").1;
        let idx = queue.pop_front().expect("pool holds only non-empty groups");
        if queue.is_empty() {
            pool.remove(&g);
        }
        chosen.push(ChosenReference::from(&candidates[idx]));
    }

    Ok(SelectionResult {
        seed,
        rng: RNG_ALGORITHM.to_string(),
        mode: SelectionMode::Balanced,
        n: candidates.len() as u32,
        k: k as u32,
        skipped_unannotated: skipped as u32,
        weights: weights
            .into_iter()
            .map(|(group, w)| GroupWeight { group, w })
            .collect(),
        chosen,
    })
}

/// Plain relevance selection: the first `k` candidates as ranked.
pub fn top_k_select(
    candidates: &[Candidate],
    k: usize,
    seed: u64,
) -> Result<SelectionResult, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::NonPositiveK);
    }
    Ok(SelectionResult {
        seed,
        rng: RNG_ALGORITHM.to_string(),
        mode: SelectionMode::TopK,
        n: candidates.len() as u32,
        k: k as u32,
        skipped_unannotated: 0,
        weights: Vec::new(),
        chosen: candidates
            .iter()
            .take(k)
            .map(ChosenReference::from)
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalParams {
    pub n: usize,
    pub k: usize,
    pub cardinalities: Cardinalities,
    pub balanced_sampling: bool,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            n: DEFAULT_N,
            k: DEFAULT_K,
            cardinalities: Cardinalities::default(),
            balanced_sampling: true,
        }
    }
}

/// Top-N retrieval for the query embedding followed by selection of K.
/// `n` and `k` are recorded as requested, even when the store is smaller.
pub fn fair_retrieve(
    store: &EmbeddingStore,
    query: &DebiasedQuery,
    params: &RetrievalParams,
    seed: u64,
) -> Result<SelectionResult, RetrievalError> {
    if params.k == 0 {
        return Err(RetrievalError::NonPositiveK);
    }
    if params.n < params.k {
        return Err(RetrievalError::InvalidN {
            n: params.n,
            k: params.k,
        });
    }
    let embedding = query
        .embedding
        .as_deref()
        .ok_or(RetrievalError::MissingEmbedding)?;
    let candidates = store.top_n(embedding, params.n)?;
    let mut result = if params.balanced_sampling {
        balanced_select_with(&candidates, params.k, seed, params.cardinalities)?
    } else {
        top_k_select(&candidates, params.k, seed)?
    };
    result.n = params.n as u32;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demographics::{AgeGroup, Gender, SkinTone};

    fn grp(age: AgeGroup, gender: Gender, mst: u8) -> IntersectionalGroup {
        IntersectionalGroup::new(age, gender, SkinTone::new(mst).unwrap())
    }

    fn cand(row: usize, score: f64, group: Option<IntersectionalGroup>) -> Candidate {
        Candidate {
            row,
            id: format!("r{row}"),
            score,
            group,
        }
    }

    #[test]
    fn debiased_query_text() {
        let q = DebiasedQuery::new("Photo of a doctor").unwrap();
        assert_eq!(
            q.debiased_text,
            "Photo of a doctor with any age, gender, skin tone"
        );
        assert_eq!(q.original, "Photo of a doctor");
        let q = DebiasedQuery::new("Photo of an engineer").unwrap();
        assert_eq!(
            q.debiased_text,
            "Photo of an engineer with any age, gender, skin tone"
        );
        let q = make_debiased_query("Photo of a nurse", "").unwrap();
        assert_eq!(q.debiased_text, "Photo of a nurse");
        assert!(matches!(
            DebiasedQuery::new("  "),
            Err(RetrievalError::EmptyPrompt)
        ));
    }

    #[test]
    fn worked_weights() {
        let g1 = grp(AgeGroup::A20_29, Gender::Male, 5);
        let g2 = grp(AgeGroup::A20_29, Gender::Female, 5);
        let g3 = grp(AgeGroup::A30_39, Gender::Male, 2);
        let stats = GroupStats::from_groups([g1, g2, g3], Cardinalities::default());
        assert_eq!(stats.count(IndividualGroup::Age(AgeGroup::A20_29)), 2);
        assert_eq!(stats.count(IndividualGroup::Gender(Gender::Female)), 1);
        let w = compute_weights(&stats).unwrap();
        // 1/(2/6 + 2/2 + 2/10) and 1/(2/6 + 1/2 + 2/10)
        assert!((w[&g1] - 0.652174).abs() < 1e-6);
        assert!((w[&g2] - 0.967742).abs() < 1e-6);
        assert!((w[&g3] - 1.0 / (1.0 / 6.0 + 2.0 / 2.0 + 1.0 / 10.0)).abs() < 1e-12);

        let single = GroupStats::from_groups([g1], Cardinalities::default());
        let w = compute_weights(&single).unwrap();
        assert!((w[&g1] - 1.304348).abs() < 1e-6);
    }

    #[test]
    fn empty_group_set() {
        let stats = GroupStats::from_groups([], Cardinalities::default());
        assert!(matches!(
            compute_weights(&stats),
            Err(RetrievalError::EmptyGroupSet)
        ));
    }

    #[test]
    fn single_group_takes_best_in_order() {
        let g = grp(AgeGroup::A40_49, Gender::Female, 7);
        let cands: Vec<_> = (0..6)
            .map(|i| cand(i, 1.0 - i as f64 * 0.1, Some(g)))
            .collect();
        let sel = balanced_select(&cands, 3, 99).unwrap();
        let ids: Vec<_> = sel.chosen.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["r0", "r1", "r2"]);
    }

    #[test]
    fn exhaustion_and_skips() {
        let g1 = grp(AgeGroup::A20_29, Gender::Male, 5);
        let g2 = grp(AgeGroup::A60Plus, Gender::Female, 9);
        let cands = vec![
            cand(0, 0.9, Some(g1)),
            cand(1, 0.8, None),
            cand(2, 0.7, Some(g2)),
        ];
        let sel = balanced_select(&cands, 10, 1).unwrap();
        assert_eq!(sel.chosen.len(), 2);
        assert_eq!(sel.skipped_unannotated, 1);
        assert_eq!(sel.k, 10);
        assert_eq!(sel.rng, RNG_ALGORITHM);
    }

    #[test]
    fn selection_errors() {
        let g = grp(AgeGroup::A20_29, Gender::Male, 5);
        assert!(matches!(
            balanced_select(&[cand(0, 0.1, Some(g))], 0, 0),
            Err(RetrievalError::NonPositiveK)
        ));
        assert!(matches!(
            balanced_select(&[cand(0, 0.1, None)], 1, 0),
            Err(RetrievalError::NoAnnotatedCandidates(1))
        ));
    }

    #[test]
    fn same_seed_same_output() {
        let groups = IntersectionalGroup::all();
        let cands: Vec<_> = (0..250)
            .map(|i| cand(i, 1.0 - i as f64 / 1000.0, Some(groups[(i * 7) % 40])))
            .collect();
        let a = balanced_select(&cands, 20, 42).unwrap();
        let b = balanced_select(&cands, 20, 42).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = balanced_select(&cands, 20, 43).unwrap();
        assert_ne!(a.chosen, c.chosen);
    }

    #[test]
    fn top_k_is_prefix() {
        let cands: Vec<_> = (0..5)
            .map(|i| cand(i, 1.0 - i as f64 * 0.1, None))
            .collect();
        let sel = top_k_select(&cands, 3, 0).unwrap();
        assert_eq!(sel.mode, SelectionMode::TopK);
        assert_eq!(
            sel.chosen.iter().map(|c| c.id.as_str()).collect::<Vec<_>>(),
            ["r0", "r1", "r2"]
        );
    }

    #[test]
    fn fair_retrieve_defaults_and_exhaustion() {
        let g = [
            grp(AgeGroup::A20_29, Gender::Male, 5),
            grp(AgeGroup::A30_39, Gender::Female, 2),
            grp(AgeGroup::A60Plus, Gender::Male, 8),
        ];
        let store = EmbeddingStore::build(
            vec![
                ("a", vec![1.0, 0.0]),
                ("b", vec![0.0, 1.0]),
                ("c", vec![0.6, 0.8]),
            ],
            vec![
                crate::store::Annotation::with_group("a", g[0]),
                crate::store::Annotation::with_group("b", g[1]),
                crate::store::Annotation::with_group("c", g[2]),
            ],
        )
        .unwrap();
        let q = DebiasedQuery::new("Photo of a judge")
            .unwrap()
            .with_embedding(vec![1.0, 0.0]);
        let sel = fair_retrieve(&store, &q, &RetrievalParams::default(), 5).unwrap();
        assert_eq!((sel.n, sel.k), (250, 20));
        assert_eq!(sel.chosen.len(), 3);

        let params = RetrievalParams {
            n: 3,
            k: 3,
            ..Default::default()
        };
        let sel = fair_retrieve(&store, &q, &params, 5).unwrap();
        let mut ids: Vec<_> = sel.chosen.iter().map(|c| c.id.clone()).collect();
        ids.sort();
        assert_eq!(ids, ["a", "b", "c"]);

        let params = RetrievalParams {
            n: 1,
            k: 1,
            ..Default::default()
        };
        let sel = fair_retrieve(&store, &q, &params, 5).unwrap();
        assert_eq!(sel.chosen.len(), 1);
        assert_eq!(sel.chosen[0].id, "a");

        let bare = DebiasedQuery::new("Photo of a judge").unwrap();
        assert!(matches!(
            fair_retrieve(&store, &bare, &params, 5),
            Err(RetrievalError::MissingEmbedding)
        ));
    }
}
