//! Normalized-entropy diversity for a generated set, including images in
//! which no face was found.
//!
//! cargo run --example diversity_metrics

use fairrag::metrics::{diversity_of_counts, prompt_diversity};
use fairrag::retrieval::Cardinalities;
use fairrag::{AgeGroup, Gender, IntersectionalGroup, SkinTone};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!(
        "gender counts (3, 1):   {:.6}",
        diversity_of_counts([3, 1], 2)?
    );
    println!(
        "uniform over 6 ages:    {:.6}",
        diversity_of_counts([5; 6], 6)?
    );
    println!(
        "one skin tone only:     {:.6}",
        diversity_of_counts([9], 10)?
    );

    let g = |age, gender, mst| IntersectionalGroup::new(age, gender, SkinTone::new(mst).unwrap());
    let images = vec![
        Some(g(AgeGroup::A20_29, Gender::Male, 4)),
        Some(g(AgeGroup::A20_29, Gender::Male, 4)),
        Some(g(AgeGroup::A40_49, Gender::Female, 7)),
        Some(g(AgeGroup::A60Plus, Gender::Female, 2)),
        None, // no face: counted as the most prevalent group
    ];
    let card = Cardinalities::default();
    let with_penalty = prompt_diversity(&images, card)?;
    let without = prompt_diversity(&images[..4], card)?;
    println!("\n             age    gender  skin   intersectional");
    for (label, d) in [("4 faces", without), ("+ no face", with_penalty)] {
        println!(
            "{label:>10}  {:.4} {:.4}  {:.4} {:.4}",
            d.age, d.gender, d.skin, d.intersectional
        );
    }
    Ok(())
}
