//! Building an annotated embedding store, writing it to disk as a matrix
//! file plus JSONL sidecar, and reading it back.
//!
//! cargo run --example store_files

use fairrag::store::{read_matrix, sidecar_path, Annotation, EmbeddingStore};
use fairrag::{AgeGroup, Gender, IntersectionalGroup, SkinTone};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let group = IntersectionalGroup::new(AgeGroup::A30_39, Gender::Female, SkinTone::new(6)?);
    let store = EmbeddingStore::build(
        vec![
            ("img-001", vec![0.2, 0.9, 0.1, 0.0]),
            ("img-002", vec![0.8, 0.1, 0.0, 0.3]),
            ("img-003", vec![0.5, 0.5, 0.5, 0.5]),
        ],
        vec![
            Annotation::with_group("img-001", group),
            Annotation::unannotated("img-002"),
        ],
    )?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("refs.frg");
    store.save(&path)?;
    let bytes = std::fs::read(&path)?;
    println!("{} bytes, header {:02x?}", bytes.len(), &bytes[..18]);
    println!(
        "sidecar:\n{}",
        std::fs::read_to_string(sidecar_path(&path))?
    );

    let matrix = read_matrix(&path)?;
    println!("matrix: {} rows x {} dims", matrix.count, matrix.dim);

    let back = EmbeddingStore::load(&path)?;
    for c in back.top_n(back.row(2), 3)? {
        println!(
            "{:>8} score {:.4} group {:?}",
            c.id,
            c.score,
            c.group.map(|g| g.to_string())
        );
    }
    Ok(())
}
