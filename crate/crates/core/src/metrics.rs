//! Evaluation metrics: normalized-entropy diversity with the no-face
//! penalty, CLIP score and Fréchet distance between feature Gaussians.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demographics::{AgeGroup, Gender, IntersectionalGroup, SkinTone, UNIT_NORM_TOL};
use crate::retrieval::Cardinalities;

/// Eigenvalues in `[-EIG_CLAMP, 0)` are treated as zero.
pub const EIG_CLAMP: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("need at least 2 possible groups, got {0}")]
    TooFewGroups(u32),
    #[error("{distinct} distinct groups exceed the {n_possible} possible")]
    TooManyDistinct { distinct: usize, n_possible: u32 },
    #[error("empty list")]
    EmptyList,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector is not unit length (norm {0})")]
    NotNormalized(f64),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("eigendecomposition did not converge")]
    NonConvergedEigen,
    #[error("covariance has eigenvalue {0} below tolerance")]
    NegativeEigenvalue(f64),
    #[error("prompt keys differ between inputs: {0}")]
    KeyMismatch(String),
}

/// Counts per group plus the number of groups that were possible.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupHistogram<K: Ord> {
    pub counts: BTreeMap<K, u64>,
    pub n_possible: u32,
}

impl<K: Ord> GroupHistogram<K> {
    pub fn new(n_possible: u32) -> Self {
        Self {
            counts: BTreeMap::new(),
            n_possible,
        }
    }

    pub fn from_items<I: IntoIterator<Item = K>>(items: I, n_possible: u32) -> Self {
        let mut h = Self::new(n_possible);
        for k in items {
            h.add(k, 1);
        }
        h
    }

    pub fn add(&mut self, key: K, count: u64) {
        *self.counts.entry(key).or_insert(0) += count;
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn diversity(&self) -> Result<f64, MetricsError> {
        diversity_of_counts(self.counts.values().copied(), self.n_possible)
    }
}

/// Normalized entropy of a histogram: `Σ p ln p / ln(1/n)`, in `[0, 1]`.
pub fn diversity<K: Ord>(hist: &GroupHistogram<K>) -> Result<f64, MetricsError> {
    hist.diversity()
}

pub fn diversity_of_counts<I: IntoIterator<Item = u64>>(
    counts: I,
    n_possible: u32,
) -> Result<f64, MetricsError> {
    if n_possible < 2 {
        return Err(MetricsError::TooFewGroups(n_possible));
    }
    let counts: Vec<u64> = counts.into_iter().filter(|&c| c > 0).collect();
    if counts.len() > n_possible as usize {
        return Err(MetricsError::TooManyDistinct {
            distinct: counts.len(),
            n_possible,
        });
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(MetricsError::EmptyHistogram);
    }
    let total = total as f64;
    let plogp: f64 = counts
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            p * p.ln()
        })
        .sum();
    let d = plogp / (1.0 / n_possible as f64).ln();
    Ok(d.clamp(0.0, 1.0) + 0.0)
}

/// Diversity of one prompt's images per attribute and intersectionally.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DiversityScores {
    pub age: f64,
    pub gender: f64,
    pub skin: f64,
    pub intersectional: f64,
}

impl DiversityScores {
    pub fn mean<'a, I: IntoIterator<Item = &'a DiversityScores>>(items: I) -> DiversityScores {
        let mut sum = DiversityScores::default();
        let mut n = 0usize;
        for s in items {
            sum.age += s.age;
            sum.gender += s.gender;
            sum.skin += s.skin;
            sum.intersectional += s.intersectional;
            n += 1;
        }
        if n == 0 {
            return sum;
        }
        let n = n as f64;
        DiversityScores {
            age: sum.age / n,
            gender: sum.gender / n,
            skin: sum.skin / n,
            intersectional: sum.intersectional / n,
        }
    }
}

/// Histograms after no-face images have been folded into the most frequent
/// group.
#[derive(Debug, Clone, PartialEq)]
pub struct PenalizedHistograms {
    pub intersectional: GroupHistogram<IntersectionalGroup>,
    pub age: GroupHistogram<AgeGroup>,
    pub gender: GroupHistogram<Gender>,
    pub skin: GroupHistogram<SkinTone>,
    pub no_face: u64,
}

impl PenalizedHistograms {
    pub fn scores(&self) -> Result<DiversityScores, MetricsError> {
        Ok(DiversityScores {
            age: self.age.diversity()?,
            gender: self.gender.diversity()?,
            skin: self.skin.diversity()?,
            intersectional: self.intersectional.diversity()?,
        })
    }
}

/// Assigns every `None` (no face found) to the most frequent classified
/// group, ties going to the smallest group. Returns `None` when nothing in
/// the list was classified.
pub fn apply_no_face_penalty(
    classified: &[Option<IntersectionalGroup>],
    cardinalities: Cardinalities,
) -> Option<PenalizedHistograms> {
    let mut inter = GroupHistogram::from_items(
        classified.iter().flatten().copied(),
        cardinalities.intersectional(),
    );
    let no_face = classified.iter().filter(|g| g.is_none()).count() as u64;
    // max_by_key keeps the last maximum, so scan in reverse for the smallest key
    let (&mode, _) = inter.counts.iter().rev().max_by_key(|(_, &c)| c)?;
    if no_face > 0 {
        inter.add(mode, no_face);
    }
    let mut age = GroupHistogram::new(cardinalities.age);
    let mut gender = GroupHistogram::new(cardinalities.gender);
    let mut skin = GroupHistogram::new(cardinalities.skin);
    for (g, &c) in &inter.counts {
        age.add(g.age, c);
        gender.add(g.gender, c);
        skin.add(g.skin, c);
    }
    Some(PenalizedHistograms {
        intersectional: inter,
        age,
        gender,
        skin,
        no_face,
    })
}

/// Diversity scores for one prompt; all zero if no image had a face.
pub fn prompt_diversity(
    classified: &[Option<IntersectionalGroup>],
    cardinalities: Cardinalities,
) -> Result<DiversityScores, MetricsError> {
    if classified.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    match apply_no_face_penalty(classified, cardinalities) {
        Some(h) => h.scores(),
        None => Ok(DiversityScores::default()),
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Mean cosine similarity between a prompt's text embedding and its images.
pub fn clip_score<V: AsRef<[f32]>>(
    image_embs: &[V],
    text_emb: &[f32],
) -> Result<f64, MetricsError> {
    if image_embs.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    let tn = norm(text_emb);
    if (tn - 1.0).abs() > UNIT_NORM_TOL {
        return Err(MetricsError::NotNormalized(tn));
    }
    let mut sum = 0.0;
    for img in image_embs {
        let img = img.as_ref();
        if img.len() != text_emb.len() {
            return Err(MetricsError::DimensionMismatch {
                expected: text_emb.len(),
                got: img.len(),
            });
        }
        let n = norm(img);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(MetricsError::NotNormalized(n));
        }
        sum += img
            .iter()
            .zip(text_emb)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum::<f64>();
    }
    Ok(sum / image_embs.len() as f64)
}

/// Gaussian moments of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSetStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n_samples: usize,
}

impl FeatureSetStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Mean and unbiased (n-1) covariance, symmetrized.
pub fn feature_stats<V: AsRef<[f32]>>(features: &[V]) -> Result<FeatureSetStats, MetricsError> {
    let n = features.len();
    if n < 2 {
        return Err(MetricsError::TooFewSamples(n));
    }
    let d = features[0].as_ref().len();
    let mut x = DMatrix::<f64>::zeros(n, d);
    for (i, f) in features.iter().enumerate() {
        let f = f.as_ref();
        if f.len() != d {
            return Err(MetricsError::DimensionMismatch {
                expected: d,
                got: f.len(),
            });
        }
        for (j, &v) in f.iter().enumerate() {
            x[(i, j)] = v as f64;
        }
    }
    let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.sum() / n as f64));
    for mut row in x.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(FeatureSetStats {
        mean,
        cov,
        n_samples: n,
    })
}

fn eigenvalues(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, MetricsError> {
    SymmetricEigen::try_new(m.clone(), f64::EPSILON, 100_000).ok_or(MetricsError::NonConvergedEigen)
}

fn clamp_eigenvalue(l: f64, scale: f64) -> Result<f64, MetricsError> {
    let tol = EIG_CLAMP * scale.max(1.0);
    if l >= 0.0 {
        Ok(l)
    } else if l >= -tol {
        Ok(0.0)
    } else {
        Err(MetricsError::NegativeEigenvalue(l))
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricsError> {
    let eig = eigenvalues(m)?;
    let scale = eig.eigenvalues.amax();
    let mut roots = eig.eigenvalues.clone();
    for l in roots.iter_mut() {
        *l = clamp_eigenvalue(*l, scale)?.sqrt();
    }
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// Fréchet distance between two Gaussians:
/// `‖μa-μb‖² + tr(Σa + Σb - 2 (Σa^½ Σb Σa^½)^½)`.
pub fn fid(a: &FeatureSetStats, b: &FeatureSetStats) -> Result<f64, MetricsError> {
    if a.dim() != b.dim() {
        return Err(MetricsError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let sqrt_a = psd_sqrt(&a.cov)?;
    let inner = &sqrt_a * &b.cov * &sqrt_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = eigenvalues(&inner)?;
    let scale = eig.eigenvalues.amax();
    let mut tr_covmean = 0.0;
    for &l in eig.eigenvalues.iter() {
        tr_covmean += clamp_eigenvalue(l, scale)?.sqrt();
    }
    let d = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * tr_covmean;
    Ok(d.max(0.0))
}

/// How FID pools features across prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidMode {
    #[default]
    Pooled,
    PerPrompt,
}

#[derive(Debug, Clone, Default)]
pub enum FidInput {
    #[default]
    None,
    Pooled {
        generated: Vec<Vec<f32>>,
        real: Vec<Vec<f32>>,
    },
    /// Per prompt `(generated, real)`; the reported value is the mean.
    PerPrompt(BTreeMap<String, (Vec<Vec<f32>>, Vec<Vec<f32>>)>),
}

impl FidInput {
    pub fn mode(&self) -> Option<FidMode> {
        match self {
            FidInput::None => None,
            FidInput::Pooled { .. } => Some(FidMode::Pooled),
            FidInput::PerPrompt(_) => Some(FidMode::PerPrompt),
        }
    }
}

/// Per-prompt CLIP inputs: image embeddings and the prompt's text embedding.
#[derive(Debug, Clone, Default)]
pub struct ClipInput {
    pub image_embs: BTreeMap<String, Vec<Vec<f32>>>,
    pub text_embs: BTreeMap<String, Vec<f32>>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalInput {
    pub classifications: BTreeMap<String, Vec<Option<IntersectionalGroup>>>,
    pub clip: Option<ClipInput>,
    pub fid: FidInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default)]
    pub cardinalities: Cardinalities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_prompt: BTreeMap<String, DiversityScores>,
    pub aggregate: DiversityScores,
    pub no_face_counts: BTreeMap<String, u64>,
    pub clip_score: Option<f64>,
    pub fid: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fid_mode: Option<FidMode>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn same_keys<A, B>(
    what: &str,
    a: &BTreeMap<String, A>,
    b: &BTreeMap<String, B>,
) -> Result<(), MetricsError> {
    if a.keys().ne(b.keys()) {
        let missing: Vec<_> = a.keys().filter(|k| !b.contains_key(*k)).cloned().collect();
        let extra: Vec<_> = b.keys().filter(|k| !a.contains_key(*k)).cloned().collect();
        return Err(MetricsError::KeyMismatch(format!(
            "{what}: missing {missing:?}, unexpected {extra:?}"
        )));
    }
    Ok(())
}

/// Computes every metric per prompt and averages across prompts in key
/// order.
pub fn evaluate_prompt_set(
    input: &EvalInput,
    config: &EvalConfig,
) -> Result<EvalReport, MetricsError> {
    let mut per_prompt = BTreeMap::new();
    let mut no_face_counts = BTreeMap::new();
    for (prompt, classified) in &input.classifications {
        per_prompt.insert(
            prompt.clone(),
            prompt_diversity(classified, config.cardinalities)?,
        );
        no_face_counts.insert(
            prompt.clone(),
            classified.iter().filter(|g| g.is_none()).count() as u64,
        );
    }
    let aggregate = DiversityScores::mean(per_prompt.values());

    let clip_score = match &input.clip {
        None => None,
        Some(clip) => {
            same_keys("image embeddings", &input.classifications, &clip.image_embs)?;
            same_keys("text embeddings", &input.classifications, &clip.text_embs)?;
            let mut sum = 0.0;
            for (prompt, imgs) in &clip.image_embs {
                sum += clip_score(imgs, &clip.text_embs[prompt])?;
            }
            Some(sum / clip.image_embs.len().max(1) as f64)
        }
    };

    let fid_value = match &input.fid {
        FidInput::None => None,
        FidInput::Pooled { generated, real } => {
            Some(fid(&feature_stats(generated)?, &feature_stats(real)?)?)
        }
        FidInput::PerPrompt(sets) => {
            same_keys("fid features", &input.classifications, sets)?;
            let mut sum = 0.0;
            for (generated, real) in sets.values() {
                sum += fid(&feature_stats(generated)?, &feature_stats(real)?)?;
            }
            Some(sum / sets.len().max(1) as f64)
        }
    };

    Ok(EvalReport {
        per_prompt,
        aggregate,
        no_face_counts,
        clip_score,
        fid: fid_value,
        fid_mode: input.fid.mode(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demographics::{AgeGroup, Gender, SkinTone};

    fn grp(age: AgeGroup, gender: Gender, mst: u8) -> IntersectionalGroup {
        IntersectionalGroup::new(age, gender, SkinTone::new(mst).unwrap())
    }

    #[test]
    fn diversity_examples() {
        assert!((diversity_of_counts([5, 5, 5, 5], 4).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(diversity_of_counts([17], 120).unwrap(), 0.0);
        let want = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln()) / 2f64.ln();
        let got = diversity_of_counts([3, 1], 2).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.811278).abs() < 1e-6);
    }

    #[test]
    fn diversity_errors() {
        assert_eq!(
            diversity_of_counts([], 4),
            Err(MetricsError::EmptyHistogram)
        );
        assert_eq!(
            diversity_of_counts([0, 0], 4),
            Err(MetricsError::EmptyHistogram)
        );
        assert_eq!(
            diversity_of_counts([1], 1),
            Err(MetricsError::TooFewGroups(1))
        );
        assert!(matches!(
            diversity_of_counts([1, 1, 1], 2),
            Err(MetricsError::TooManyDistinct { .. })
        ));
    }

    #[test]
    fn penalty_goes_to_mode() {
        let (a, b) = (
            grp(AgeGroup::A20_29, Gender::Male, 3),
            grp(AgeGroup::A50_59, Gender::Female, 8),
        );
        let h = apply_no_face_penalty(&[Some(a), Some(a), Some(b), None], Cardinalities::default())
            .unwrap();
        assert_eq!(h.intersectional.counts[&a], 3);
        assert_eq!(h.intersectional.counts[&b], 1);
        assert_eq!(h.no_face, 1);
        assert_eq!(h.age.total(), 4);

        let h = apply_no_face_penalty(&[Some(b), Some(a), None], Cardinalities::default()).unwrap();
        assert_eq!(h.intersectional.counts[&a.min(b)], 2);
        assert_eq!(h.intersectional.counts[&a.max(b)], 1);
    }

    #[test]
    fn all_no_face_is_zero() {
        assert!(apply_no_face_penalty(&[None, None], Cardinalities::default()).is_none());
        assert_eq!(
            prompt_diversity(&[None, None], Cardinalities::default()).unwrap(),
            DiversityScores::default()
        );
    }

    #[test]
    fn clip_examples() {
        let t = vec![1.0f32, 0.0];
        assert!((clip_score(std::slice::from_ref(&t), &t).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(clip_score(&[vec![0.0f32, 1.0]], &t).unwrap(), 0.0);
        let c = |x: f32| vec![x, (1.0 - x * x).sqrt()];
        assert!((clip_score(&[c(0.2), c(0.1)], &t).unwrap() - 0.15).abs() < 1e-7);
        assert_eq!(
            clip_score::<Vec<f32>>(&[], &t),
            Err(MetricsError::EmptyList)
        );
        assert!(matches!(
            clip_score(&[vec![1.0f32]], &t),
            Err(MetricsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn feature_stats_examples() {
        let s = feature_stats(&[vec![0.0f32], vec![2.0]]).unwrap();
        assert_eq!(s.mean[0], 1.0);
        assert_eq!(s.cov[(0, 0)], 2.0);
        let s = feature_stats(&vec![vec![1.5f32, -2.0, 3.0]; 5]).unwrap();
        assert!(s.cov.iter().all(|&c| c == 0.0));
        assert_eq!(
            feature_stats(&[vec![1.0f32]]),
            Err(MetricsError::TooFewSamples(1))
        );
    }

    #[test]
    fn fid_examples() {
        let a = feature_stats(&[vec![0.0f32], vec![2.0]]).unwrap();
        let b = feature_stats(&[vec![1.0f32], vec![3.0]]).unwrap();
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-9);
        assert!(fid(&a, &a).unwrap() <= 1e-8);

        let diag = |x: f64, y: f64| FeatureSetStats {
            mean: DVector::zeros(2),
            cov: DMatrix::from_diagonal(&DVector::from_vec(vec![x, y])),
            n_samples: 10,
        };
        assert!((fid(&diag(1.0, 4.0), &diag(4.0, 1.0)).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn fid_rejects_bad_covariance() {
        let bad = FeatureSetStats {
            mean: DVector::zeros(2),
            cov: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5])),
            n_samples: 10,
        };
        let ok = FeatureSetStats {
            cov: DMatrix::identity(2, 2),
            ..bad.clone()
        };
        assert!(matches!(
            fid(&bad, &ok),
            Err(MetricsError::NegativeEigenvalue(_))
        ));
        let small = FeatureSetStats {
            mean: DVector::zeros(3),
            cov: DMatrix::identity(3, 3),
            n_samples: 4,
        };
        assert!(matches!(
            fid(&ok, &small),
            Err(MetricsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn evaluate_means_and_keys() {
        let (a, b) = (
            grp(AgeGroup::A20_29, Gender::Male, 3),
            grp(AgeGroup::A50_59, Gender::Female, 8),
        );
        let mut input = EvalInput::default();
        input
            .classifications
            .insert("p1".into(), vec![Some(a), Some(b)]);
        input
            .classifications
            .insert("p2".into(), vec![Some(a), Some(a)]);
        let r = evaluate_prompt_set(&input, &EvalConfig::default()).unwrap();
        let p1 = r.per_prompt["p1"].intersectional;
        assert!((p1 - 2f64.ln() / 120f64.ln()).abs() < 1e-12);
        assert_eq!(r.per_prompt["p2"].intersectional, 0.0);
        assert!((r.aggregate.intersectional - p1 / 2.0).abs() < 1e-12);
        assert_eq!(r.aggregate.gender, 0.5);

        let mut clip = ClipInput::default();
        clip.image_embs.insert("p1".into(), vec![vec![1.0, 0.0]]);
        clip.text_embs.insert("p1".into(), vec![1.0, 0.0]);
        input.clip = Some(clip);
        assert!(matches!(
            evaluate_prompt_set(&input, &EvalConfig::default()),
            Err(MetricsError::KeyMismatch(_))
        ));
    }
}
