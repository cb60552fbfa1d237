//! Projects selected reference embeddings into the text-token space and
//! packages one bundle per reference for an image generation backend.
//!
//! cargo run --example conditioning_bundles

use fairrag::conditioning::{export_bundles, BundleOptions, ProjectorWeights};
use fairrag::fixtures::synth_skewed_pool;
use fairrag::retrieval::balanced_select;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pool = synth_skewed_pool(0.5, 300, 16, 1)?;
    let store = pool.population.to_store()?;
    let selection = balanced_select(&pool.candidates(), 3, 11)?;

    // stand-in for trained weights: a 16 -> 8 projector
    let w: Vec<f32> = (0..8 * 16)
        .map(|i| ((i * 37 % 17) as f32 - 8.0) / 40.0)
        .collect();
    let projector = ProjectorWeights::new(16, 8, w, vec![0.01; 8])?;

    let prompt = "Photo of a lawyer";
    for (label, options) in [
        ("with instruction", BundleOptions::default()),
        (
            "prompt only",
            BundleOptions {
                instruction: String::new(),
                ..Default::default()
            },
        ),
    ] {
        let bundles = export_bundles(prompt, &selection, &store, &projector, &options)?;
        println!("{label}: {} bundles", bundles.len());
        for b in &bundles {
            println!(
                "  {} <- {:?} token[..3] = {:.3?}",
                b.reference_id,
                b.full_text,
                &b.token[..3]
            );
        }
    }
    println!(
        "\nfirst bundle as JSON:\n{}",
        export_bundles(
            prompt,
            &selection,
            &store,
            &projector,
            &BundleOptions::default()
        )?[0]
            .to_json()
    );
    Ok(())
}
