use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fairrag::conditioning::{export_bundles, BundleOptions, ProjectorWeights};
use fairrag::demographics::{
    bucket_age, gender_from_scores, AgeGroup, Gender, IntersectionalGroup, SkinTone,
};
use fairrag::fixtures::{synth_population, PopulationSpec};
use fairrag::metrics::{diversity_of_counts, prompt_diversity};
use fairrag::retrieval::{
    balanced_select, compute_weights, Cardinalities, GroupStats, SelectionResult,
};
use fairrag::store::{Annotation, Candidate, EmbeddingStore};

fn all_groups() -> Vec<IntersectionalGroup> {
    IntersectionalGroup::all()
}

fn group_strategy() -> impl Strategy<Value = IntersectionalGroup> {
    (0..120usize).prop_map(|i| all_groups()[i])
}

fn entropy_bits(counts: &[u64], n: u32) -> f64 {
    let total: u64 = counts.iter().sum();
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.log2()
        })
        .sum();
    h / (n as f64).log2()
}

/// Candidates ranked by score, score strictly decreasing in index.
fn ranked(groups: &[IntersectionalGroup]) -> Vec<Candidate> {
    groups
        .iter()
        .enumerate()
        .map(|(i, g)| Candidate {
            row: i,
            id: format!("c{i}"),
            score: 1.0 - i as f64 * 1e-3,
            group: Some(*g),
        })
        .collect()
}

fn chosen_ids(sel: &SelectionResult) -> Vec<String> {
    sel.chosen.iter().map(|c| c.id.clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn age_bucketing_is_monotone(a in 0u32..150, b in 0u32..150) {
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(bucket_age(lo) <= bucket_age(hi));
    }

    #[test]
    fn gender_ignores_positive_rescaling(m in -1.0f64..1.0, f in -1.0f64..1.0, s in 1e-3f64..1e3) {
        prop_assert_eq!(gender_from_scores(m, f), gender_from_scores(s * m, s * f));
    }

    #[test]
    fn diversity_permutation_and_scale_invariant(
        counts in prop::collection::vec(0u64..40, 1..30),
        extra in 0u32..30,
        seed in any::<u64>(),
    ) {
        prop_assume!(counts.iter().any(|&c| c > 0));
        let n = counts.len() as u32 + extra + 1;
        let base = diversity_of_counts(counts.iter().copied(), n).unwrap();
        let mut shuffled = counts.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let perm = diversity_of_counts(shuffled, n).unwrap();
        let doubled = diversity_of_counts(counts.iter().map(|c| 2 * c), n).unwrap();
        prop_assert!((base - perm).abs() <= 1e-12);
        prop_assert!((base - doubled).abs() <= 1e-12);
        prop_assert!((base - entropy_bits(&counts, n)).abs() <= 1e-9);
    }

    #[test]
    fn moving_mass_to_the_rarest_raises_diversity(
        counts in prop::collection::vec(1u64..40, 2..30),
        extra in 0u32..30,
    ) {
        let n = counts.len() as u32 + extra;
        let (imax, &max) = counts.iter().enumerate().max_by_key(|(i, &c)| (c, std::cmp::Reverse(*i))).unwrap();
        let (imin, &min) = counts.iter().enumerate().min_by_key(|(_, &c)| c).unwrap();
        // a non-uniform distribution where the move does not just swap the two extremes
        prop_assume!(max >= min + 2);
        let mut moved = counts.clone();
        moved[imax] -= 1;
        moved[imin] += 1;
        let before = diversity_of_counts(counts.iter().copied(), n).unwrap();
        let after = diversity_of_counts(moved.iter().copied(), n).unwrap();
        prop_assert!(after > before, "{before} -> {after}");
        prop_assert!(entropy_bits(&moved, n) > entropy_bits(&counts, n));
    }

    #[test]
    fn no_face_never_raises_diversity(
        groups in prop::collection::vec(prop::option::weighted(0.8, group_strategy()), 1..40),
    ) {
        let card = Cardinalities::default();
        let before = prompt_diversity(&groups, card).unwrap();
        let mut more = groups.clone();
        more.push(None);
        let after = prompt_diversity(&more, card).unwrap();
        // single-attribute scores share the intersectional reassignment, so
        // only the intersectional score is guaranteed not to rise
        prop_assert!(after.intersectional <= before.intersectional + 1e-12);
    }

    #[test]
    fn weights_depend_only_on_attribute_counts(
        groups in prop::collection::vec(group_strategy(), 1..30),
    ) {
        let stats = GroupStats::from_groups(groups.iter().copied(), Cardinalities::default());
        let w = compute_weights(&stats).unwrap();
        // equal marginal counts give equal weights
        let key = |g: &IntersectionalGroup| {
            (
                stats.groups.iter().filter(|h| h.age == g.age).count(),
                stats.groups.iter().filter(|h| h.gender == g.gender).count(),
                stats.groups.iter().filter(|h| h.skin == g.skin).count(),
            )
        };
        for a in &stats.groups {
            for b in &stats.groups {
                if key(a) == key(b) {
                    prop_assert!((w[a] - w[b]).abs() <= 1e-12);
                }
            }
        }
        let mut rev = groups.clone();
        rev.reverse();
        prop_assert_eq!(compute_weights(&GroupStats::from_groups(rev, Cardinalities::default())).unwrap(), w);
    }

    #[test]
    fn selection_is_a_reproducible_subset(
        groups in prop::collection::vec(group_strategy(), 1..80),
        k in 1usize..30,
        seed in any::<u64>(),
    ) {
        let cands = ranked(&groups);
        let sel = balanced_select(&cands, k, seed).unwrap();
        let ids = chosen_ids(&sel);
        prop_assert_eq!(ids.len(), k.min(cands.len()));
        let unique: BTreeSet<_> = ids.iter().collect();
        prop_assert_eq!(unique.len(), ids.len());
        let pool: BTreeSet<_> = cands.iter().map(|c| c.id.clone()).collect();
        prop_assert!(ids.iter().all(|id| pool.contains(id)));
        prop_assert_eq!(balanced_select(&cands, k, seed).unwrap(), sel);
    }

    #[test]
    fn selection_ignores_input_order(
        groups in prop::collection::vec(group_strategy(), 1..60),
        k in 1usize..20,
        seed in any::<u64>(),
        shuffle_seed in any::<u64>(),
    ) {
        let cands = ranked(&groups);
        let mut shuffled = cands.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let a = balanced_select(&cands, k, seed).unwrap();
        let b = balanced_select(&shuffled, k, seed).unwrap();
        prop_assert_eq!(chosen_ids(&a), chosen_ids(&b));
    }

    #[test]
    fn projector_is_affine(
        seed in any::<u64>(),
        alpha in -3.0f32..3.0,
        beta in -3.0f32..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dv, dt) = (rng.random_range(1..24), rng.random_range(1..24));
        let w: Vec<f32> = (0..dv * dt).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..dt).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = ProjectorWeights::new(dv, dt, w, b.clone()).unwrap();
        let u: Vec<f32> = (0..dv).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f32> = (0..dv).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mix: Vec<f32> = u.iter().zip(&v).map(|(x, y)| alpha * x + beta * y).collect();
        let (hu, hv, hm) = (h.apply(&u).unwrap(), h.apply(&v).unwrap(), h.apply(&mix).unwrap());
        for i in 0..dt {
            let want = alpha as f64 * hu[i] as f64 + beta as f64 * hv[i] as f64
                - (alpha as f64 + beta as f64 - 1.0) * b[i] as f64;
            let scale = want.abs().max(1.0);
            prop_assert!((hm[i] as f64 - want).abs() <= 1e-4 * scale, "{} vs {want}", hm[i]);
        }
    }

    #[test]
    fn one_bundle_per_chosen_reference(
        groups in prop::collection::vec(group_strategy(), 1..25),
        k in 1usize..10,
        seed in any::<u64>(),
    ) {
        let dim = 4;
        let store = EmbeddingStore::build(
            (0..groups.len()).map(|i| (format!("c{i}"), vec![1.0, i as f32, 0.5, -1.0])),
            groups.iter().enumerate().map(|(i, g)| Annotation::with_group(format!("c{i}"), *g)).collect(),
        ).unwrap();
        let sel = balanced_select(&ranked(&groups), k, seed).unwrap();
        let bundles = export_bundles("Photo of a nurse", &sel, &store, &ProjectorWeights::identity(dim), &BundleOptions::default()).unwrap();
        prop_assert_eq!(bundles.len(), sel.chosen.len());
        let ids: Vec<String> = bundles.iter().map(|b| b.reference_id.clone()).collect();
        prop_assert_eq!(ids, chosen_ids(&sel));
    }

    #[test]
    fn store_round_trips(
        rows in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 3), 1..20),
        seed in any::<u64>(),
    ) {
        prop_assume!(rows.iter().all(|r| r.iter().any(|x| x.abs() > 1e-3)));
        let g = all_groups()[(seed % 120) as usize];
        let store = EmbeddingStore::build(
            rows.iter().enumerate().map(|(i, r)| (format!("r{i}"), r.clone())),
            vec![Annotation::with_group("r0", g)],
        ).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.frg");
        store.save(&p).unwrap();
        let back = EmbeddingStore::load(&p).unwrap();
        prop_assert_eq!(back.matrix(), store.matrix());
        prop_assert_eq!(back.annotations(), store.annotations());
    }
}

#[test]
fn first_draw_matches_normalized_weights() {
    let g = |a, s, m| IntersectionalGroup::new(a, s, SkinTone::new(m).unwrap());
    let groups = [
        g(AgeGroup::A20_29, Gender::Male, 5),
        g(AgeGroup::A20_29, Gender::Female, 5),
        g(AgeGroup::A30_39, Gender::Male, 2),
        g(AgeGroup::A60Plus, Gender::Female, 9),
    ];
    // several candidates per group so every group is available on draw one
    let pool: Vec<IntersectionalGroup> = (0..12).map(|i| groups[i % groups.len()]).collect();
    let cands = ranked(&pool);
    let w = compute_weights(&GroupStats::from_groups(
        pool.iter().copied(),
        Cardinalities::default(),
    ))
    .unwrap();
    let total: f64 = w.values().sum();
    let seeds = 20_000u64;
    let mut hits: BTreeMap<IntersectionalGroup, u64> = BTreeMap::new();
    for seed in 0..seeds {
        let sel = balanced_select(&cands, 1, seed).unwrap();
        *hits.entry(sel.chosen[0].group.unwrap()).or_default() += 1;
    }
    for (grp, wg) in &w {
        let p = wg / total;
        let se = (p * (1.0 - p) / seeds as f64).sqrt();
        let freq = hits.get(grp).copied().unwrap_or(0) as f64 / seeds as f64;
        assert!(
            (freq - p).abs() <= 3.0 * se,
            "{grp}: {freq} vs {p} (se {se})"
        );
    }
}

/// Probability that the B candidate is selected, by enumerating draw
/// sequences over remaining-candidate counts.
fn inclusion_oracle(a: usize, b: usize, wa: f64, wb: f64, k: usize) -> f64 {
    if k == 0 || b == 0 {
        return 0.0;
    }
    if a == 0 {
        return 1.0;
    }
    let pb = wb / (wa + wb);
    pb + (1.0 - pb) * inclusion_oracle(a - 1, b, wa, wb, k - 1)
}

#[test]
fn minority_candidate_is_picked_often() {
    let ga = IntersectionalGroup::new(AgeGroup::A30_39, Gender::Male, SkinTone::new(3).unwrap());
    let gb = IntersectionalGroup::new(AgeGroup::A40_49, Gender::Female, SkinTone::new(8).unwrap());
    let mut pool = vec![ga; 9];
    pool.push(gb);
    let cands = ranked(&pool);
    let w = compute_weights(&GroupStats::from_groups(
        pool.iter().copied(),
        Cardinalities::default(),
    ))
    .unwrap();
    let expected = inclusion_oracle(9, 1, w[&ga], w[&gb], 2);
    assert!((expected - 0.75).abs() < 1e-12);
    let seeds = 10_000;
    let hits = (0..seeds)
        .filter(|&s| {
            balanced_select(&cands, 2, s)
                .unwrap()
                .chosen
                .iter()
                .any(|c| c.id == "c9")
        })
        .count();
    let freq = hits as f64 / seeds as f64;
    assert!(freq >= 0.45, "B chosen in {freq}");
    let se = (expected * (1.0 - expected) / seeds as f64).sqrt();
    assert!((freq - expected).abs() <= 4.0 * se, "{freq} vs {expected}");
}

#[test]
fn projector_file_reproduces_golden_output() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/projector");
    let h = ProjectorWeights::load(dir.join("weights.frgw")).unwrap();
    let golden: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("golden.json")).unwrap()).unwrap();
    let input: Vec<f32> = serde_json::from_value(golden["input"].clone()).unwrap();
    let want: Vec<f64> = serde_json::from_value(golden["output"].clone()).unwrap();
    let got = h.apply(&input).unwrap();
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        assert!((*g as f64 - w).abs() <= 1e-6, "{g} vs {w}");
    }
}

#[test]
fn synthetic_groups_are_recoverable() {
    for noise in [0.0, 0.02, 0.05] {
        let spec = PopulationSpec::uniform(&all_groups(), 2000, 64, noise, 11);
        let pop = synth_population(&spec).unwrap();
        let correct = (0..pop.len())
            .filter(|&i| Some(pop.nearest_centroid(i)) == pop.annotations[i].group)
            .count();
        let acc = correct as f64 / pop.len() as f64;
        assert!(acc >= 0.99, "noise {noise}: accuracy {acc}");
    }
}

#[test]
fn uniform_prior_frequencies_are_concentrated() {
    let groups: Vec<_> = all_groups().into_iter().take(12).collect();
    let spec = PopulationSpec::uniform(&groups, 1000, 16, 0.05, 3);
    let pop = synth_population(&spec).unwrap();
    let mut counts: BTreeMap<IntersectionalGroup, u64> = BTreeMap::new();
    for a in &pop.annotations {
        *counts.entry(a.group.unwrap()).or_default() += 1;
    }
    let (n, p) = (1000.0f64, 1.0 / 12.0);
    let sigma = (n * p * (1.0 - p)).sqrt();
    for g in &groups {
        let c = counts.get(g).copied().unwrap_or(0) as f64;
        assert!((c - n * p).abs() <= 3.0 * sigma, "{g}: {c}");
    }
    assert_eq!(synth_population(&spec).unwrap().matrix, pop.matrix);
}

#[test]
fn point_mass_prior_gives_one_group() {
    let g = all_groups()[77];
    let spec = PopulationSpec::uniform(&[g], 50, 8, 0.1, 0);
    let pop = synth_population(&spec).unwrap();
    assert!(pop.annotations.iter().all(|a| a.group == Some(g)));
    for i in 0..pop.len() {
        let n: f64 = pop
            .row(i)
            .iter()
            .map(|&x| x as f64 * x as f64)
            .sum::<f64>()
            .sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
}
