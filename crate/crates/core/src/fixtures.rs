//! Deterministic synthetic populations for exercising retrieval, selection
//! and metrics without real image data.
//!
//! Every record draws from its own ChaCha stream (stream = record index), so
//! output does not depend on generation order.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::demographics::IntersectionalGroup;
use crate::store::{Annotation, Candidate, EmbeddingStore, StoreError};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("majority fraction must be in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

const CENTROID_STREAM: u64 = u64::MAX;
const AUX_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSpec {
    pub count: usize,
    pub dim: usize,
    pub group_prior: BTreeMap<IntersectionalGroup, f64>,
    /// Expected L2 norm of the noise added to each centroid.
    pub cluster_noise: f64,
    pub seed: u64,
}

impl PopulationSpec {
    pub fn uniform(
        groups: &[IntersectionalGroup],
        count: usize,
        dim: usize,
        cluster_noise: f64,
        seed: u64,
    ) -> Self {
        let p = 1.0 / groups.len() as f64;
        Self {
            count,
            dim,
            group_prior: groups.iter().map(|g| (*g, p)).collect(),
            cluster_noise,
            seed,
        }
    }

    fn validate(&self) -> Result<(), FixtureError> {
        if self.count == 0 || self.dim < 2 {
            return Err(FixtureError::InvalidShape(format!(
                "count={} dim={}",
                self.count, self.dim
            )));
        }
        if self.group_prior.is_empty() {
            return Err(FixtureError::InvalidPrior("no groups".into()));
        }
        if self
            .group_prior
            .values()
            .any(|&p| !(p >= 0.0) || !p.is_finite())
        {
            return Err(FixtureError::InvalidPrior(
                "negative or non-finite probability".into(),
            ));
        }
        let total: f64 = self.group_prior.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(FixtureError::InvalidPrior(format!(
                "probabilities sum to {total}"
            )));
        }
        if !(self.cluster_noise >= 0.0) {
            return Err(FixtureError::InvalidShape(format!(
                "cluster_noise={}",
                self.cluster_noise
            )));
        }
        Ok(())
    }
}

/// Synthetic embeddings (flat, row-major, unit rows) with true groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub dim: usize,
    pub ids: Vec<String>,
    pub matrix: Vec<f32>,
    pub annotations: Vec<Annotation>,
    pub centroids: BTreeMap<IntersectionalGroup, Vec<f32>>,
}

impl Population {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn into_store(self) -> Result<EmbeddingStore, StoreError> {
        EmbeddingStore::from_matrix(self.ids, self.dim, self.matrix, self.annotations)
    }

    pub fn to_store(&self) -> Result<EmbeddingStore, StoreError> {
        self.clone().into_store()
    }

    /// Group whose centroid has the largest dot product with row `i`.
    pub fn nearest_centroid(&self, i: usize) -> IntersectionalGroup {
        let row = self.row(i);
        let mut best = (f64::NEG_INFINITY, None);
        for (g, c) in &self.centroids {
            let s: f64 = row.iter().zip(c).map(|(&a, &b)| a as f64 * b as f64).sum();
            if s > best.0 {
                best = (s, Some(*g));
            }
        }
        best.1.expect("at least one centroid")
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normalize(v: &mut [f32]) {
    let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v {
            *x = (*x as f64 / n) as f32;
        }
    }
}

/// Random unit vector.
pub fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f32> {
    let mut v: Vec<f32> = (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    normalize(&mut v);
    v
}

/// One centroid per group of the full 120-group space, so a group's
/// centroid depends only on the seed.
pub fn group_centroids(seed: u64, dim: usize) -> BTreeMap<IntersectionalGroup, Vec<f32>> {
    let mut rng = rng_for(seed, CENTROID_STREAM);
    IntersectionalGroup::all()
        .into_iter()
        .map(|g| (g, random_unit(&mut rng, dim)))
        .collect()
}

fn draw_group<R: Rng>(rng: &mut R, prior: &[(IntersectionalGroup, f64)]) -> IntersectionalGroup {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (g, p) in prior {
        acc += p;
        if u < acc {
            return *g;
        }
    }
    prior
        .iter()
        .rev()
        .find(|(_, p)| *p > 0.0)
        .expect("prior has mass")
        .0
}

/// Writes `normalize(base + noise)` into `out`, noise ~ N(0, sigma^2 I).
fn noisy_unit<R: Rng>(rng: &mut R, base: &[f32], sigma: f64, out: &mut [f32]) {
    for (o, &b) in out.iter_mut().zip(base) {
        let z: f64 = rng.sample(StandardNormal);
        *o = (b as f64 + sigma * z) as f32;
    }
    normalize(out);
}

/// Draws `count` records: group from the prior, embedding from the group's
/// centroid plus isotropic Gaussian noise, renormalized to unit length.
pub fn synth_population(spec: &PopulationSpec) -> Result<Population, FixtureError> {
    spec.validate()?;
    let dim = spec.dim;
    let centroids = group_centroids(spec.seed, dim);
    let prior: Vec<(IntersectionalGroup, f64)> =
        spec.group_prior.iter().map(|(g, p)| (*g, *p)).collect();
    let sigma = spec.cluster_noise / (dim as f64).sqrt();

    let mut matrix = vec![0.0f32; spec.count * dim];
    let groups: Vec<IntersectionalGroup> = matrix
        .par_chunks_mut(dim)
        .enumerate()
        .map(|(i, row)| {
            let mut rng = rng_for(spec.seed, i as u64);
            let g = draw_group(&mut rng, &prior);
            noisy_unit(&mut rng, &centroids[&g], sigma, row);
            g
        })
        .collect();

    let ids: Vec<String> = (0..spec.count).map(|i| format!("synth-{i:07}")).collect();
    let annotations = ids
        .iter()
        .zip(&groups)
        .map(|(id, g)| Annotation::with_group(id.clone(), *g))
        .collect();
    Ok(Population {
        dim,
        ids,
        matrix,
        annotations,
        centroids,
    })
}

/// A candidate pool in which one intersectional group is over-represented.
#[derive(Debug, Clone)]
pub struct SkewedPool {
    pub population: Population,
    pub majority: IntersectionalGroup,
    /// Demographically neutral relevance direction (the debiased query).
    pub relevance: Vec<f32>,
}

impl SkewedPool {
    pub fn neutral_query(&self) -> Vec<f32> {
        self.relevance.clone()
    }

    /// Relevance direction pulled toward the majority group's centroid,
    /// standing in for a prompt whose wording carries demographic bias.
    pub fn biased_query(&self) -> Vec<f32> {
        let c = &self.population.centroids[&self.majority];
        let mut q: Vec<f32> = self.relevance.iter().zip(c).map(|(a, b)| a + b).collect();
        normalize(&mut q);
        q
    }

    /// Every pool member ranked against the neutral query.
    pub fn candidates(&self) -> Vec<Candidate> {
        self.candidates_for(&self.relevance)
    }

    pub fn candidates_for(&self, query: &[f32]) -> Vec<Candidate> {
        let store = self.population.to_store().expect("pool rows are valid");
        store.top_n(query, store.len()).expect("query matches pool")
    }

    pub fn group_count(&self, group: &IntersectionalGroup) -> usize {
        self.population
            .annotations
            .iter()
            .filter(|a| a.group.as_ref() == Some(group))
            .count()
    }
}

/// `floor(majority_fraction * count)` records go to one group chosen from
/// the seed; the rest are dealt round-robin over the other 119 groups in a
/// seeded shuffled order. Embeddings mix a shared relevance direction with
/// the group centroid, so similarity to the neutral query carries no
/// demographic signal.
pub fn synth_skewed_pool(
    majority_fraction: f64,
    count: usize,
    dim: usize,
    seed: u64,
) -> Result<SkewedPool, FixtureError> {
    if !(majority_fraction > 0.0 && majority_fraction < 1.0) {
        return Err(FixtureError::InvalidFraction(majority_fraction));
    }
    if count == 0 || dim < 2 {
        return Err(FixtureError::InvalidShape(format!(
            "count={count} dim={dim}"
        )));
    }
    let centroids = group_centroids(seed, dim);
    let mut aux = rng_for(seed, AUX_STREAM);
    let relevance = random_unit(&mut aux, dim);
    let mut groups = IntersectionalGroup::all();
    groups.shuffle(&mut aux);
    let majority = groups[0];
    let others = &groups[1..];

    let n_major = (majority_fraction * count as f64).floor() as usize;
    let assignment: Vec<IntersectionalGroup> = (0..count)
        .map(|i| {
            if i < n_major {
                majority
            } else {
                others[(i - n_major) % others.len()]
            }
        })
        .collect();

    const GROUP_WEIGHT: f32 = 0.5;
    let sigma = 0.5 / (dim as f64).sqrt();
    // group directions with the relevance component removed
    let offsets: BTreeMap<IntersectionalGroup, Vec<f32>> = centroids
        .iter()
        .map(|(g, c)| {
            let along: f64 = c
                .iter()
                .zip(&relevance)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            let mut o: Vec<f32> = c
                .iter()
                .zip(&relevance)
                .map(|(&a, &r)| (a as f64 - along * r as f64) as f32)
                .collect();
            normalize(&mut o);
            (*g, o)
        })
        .collect();
    let mut matrix = vec![0.0f32; count * dim];
    matrix.par_chunks_mut(dim).enumerate().for_each(|(i, row)| {
        let c = &offsets[&assignment[i]];
        let base: Vec<f32> = relevance
            .iter()
            .zip(c)
            .map(|(r, c)| r + GROUP_WEIGHT * c)
            .collect();
        let mut rng = rng_for(seed, i as u64);
        noisy_unit(&mut rng, &base, sigma, row);
    });

    let ids: Vec<String> = (0..count).map(|i| format!("pool-{i:05}")).collect();
    let annotations = ids
        .iter()
        .zip(&assignment)
        .map(|(id, g)| Annotation::with_group(id.clone(), *g))
        .collect();
    Ok(SkewedPool {
        population: Population {
            dim,
            ids,
            matrix,
            annotations,
            centroids,
        },
        majority,
        relevance,
    })
}
