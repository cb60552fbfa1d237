//! Fréchet distance between two feature sets, computed from precomputed
//! feature vectors (for example Inception pool features).
//!
//! cargo run --release --example fid_from_features

use fairrag::metrics::{feature_stats, fid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn sample(rng: &mut ChaCha8Rng, n: usize, dim: usize, shift: f32, scale: f32) -> Vec<Vec<f32>> {
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| shift + scale * normal.sample(rng))
                .collect()
        })
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dim = 32;
    let real = feature_stats(&sample(&mut rng, 2000, dim, 0.0, 1.0))?;
    for (label, shift, scale) in [
        ("same distribution", 0.0, 1.0),
        ("mean shift 0.5", 0.5, 1.0),
        ("scale 1.5", 0.0, 1.5),
    ] {
        let gen = feature_stats(&sample(&mut rng, 2000, dim, shift, scale))?;
        // closed form for isotropic Gaussians: d*shift^2 + d*(scale-1)^2
        let expected = dim as f32 * (shift * shift + (scale - 1.0) * (scale - 1.0));
        println!(
            "{label:>18}: fid {:.3} (population value {expected:.3})",
            fid(&gen, &real)?
        );
    }
    Ok(())
}
