//! Mean intersectional diversity of the selected references for each
//! pipeline variant, on a skewed pool and on a uniform pool.
//!
//! cargo run --release --example ablation [trials]

use fairrag::harness::{ablation_demo, AblationConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let trials = std::env::args()
        .nth(1)
        .map(|t| t.parse())
        .transpose()?
        .unwrap_or(100);
    let table = ablation_demo(&AblationConfig {
        trials,
        ..Default::default()
    })?;
    print!("{}", table.render());
    Ok(())
}
