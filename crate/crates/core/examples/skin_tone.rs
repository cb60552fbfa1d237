//! Skin-pixel filtering and Monk Skin Tone assignment, plus gender and age
//! bucketing for a single detected face.
//!
//! cargo run --example skin_tone

use fairrag::demographics::{
    bucket_age, classify_face, classify_skin_tone, is_skin_pixel, FaceObservation, GenderPrompts,
};
use fairrag::{MstPalette, SkinTone};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let palette = MstPalette::bundled();
    for tone in SkinTone::all() {
        let sw = palette.swatch(tone);
        let verdict = match classify_skin_tone(&[sw; 16], &palette) {
            Ok(t) => format!("classified as {t}"),
            Err(e) => format!("{e}"),
        };
        println!("{tone:<5} {sw:?} skin={:<5} {verdict}", is_skin_pixel(sw));
    }

    // a face crop: mostly skin around MST 6, some hair and background
    let mut pixels = vec![[158, 124, 88]; 60];
    pixels.extend([[20, 20, 20]; 25]);
    pixels.extend([[200, 220, 255]; 15]);
    let face = FaceObservation {
        age_years: 37,
        image_emb: vec![0.6, 0.8, 0.0],
        face_pixels: pixels,
    };
    let prompts = GenderPrompts {
        male: vec![1.0, 0.0, 0.0],
        female: vec![0.0, 1.0, 0.0],
    };
    let group = classify_face(&face, &prompts, &palette)?.expect("skin pixels present");
    println!("\nage 37 -> {}; face -> {group}", bucket_age(37));
    Ok(())
}
