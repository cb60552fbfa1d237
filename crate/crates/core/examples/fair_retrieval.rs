//! Debiased query, exact Top-N search and balanced selection of K
//! references over a synthetic store where one group dominates.
//!
//! cargo run --release --example fair_retrieval

use std::collections::BTreeMap;

use fairrag::fixtures::synth_skewed_pool;
use fairrag::retrieval::{fair_retrieve, DebiasedQuery, RetrievalParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // 2000 rows, 80% of them in a single demographic group
    let pool = synth_skewed_pool(0.8, 2000, 64, 42)?;
    let store = pool.population.to_store()?;

    let query = DebiasedQuery::new("Photo of a firefighter")?;
    println!("query text: {:?}", query.debiased_text);
    // a real deployment embeds the text with a CLIP text encoder
    let query = query.with_embedding(pool.neutral_query());

    for balanced in [false, true] {
        let params = RetrievalParams {
            balanced_sampling: balanced,
            ..Default::default()
        };
        let sel = fair_retrieve(&store, &query, &params, 7)?;
        let mut hist: BTreeMap<String, usize> = BTreeMap::new();
        for g in sel.chosen_groups().into_iter().flatten() {
            *hist.entry(g.to_string()).or_default() += 1;
        }
        let majority = hist.get(&pool.majority.to_string()).copied().unwrap_or(0);
        println!(
            "{:>9}: {} references, {} distinct groups, {} from the majority group",
            if balanced { "balanced" } else { "top-k" },
            sel.chosen.len(),
            hist.len(),
            majority
        );
    }
    Ok(())
}
