//! Demographic attributes, intersectional groups and the three classifiers
//! (age bucketing, gender prompt argmax, skin tone from face pixels).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `|‖v‖ - 1|` for vectors that must be unit length.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum DemographicsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector is not unit length (norm {norm})")]
    NotNormalized { norm: f64 },
    #[error("no skin pixels in face region")]
    NoSkinPixels,
    #[error("empty face region")]
    EmptyFace,
    #[error("invalid palette: {0}")]
    InvalidPalette(String),
    #[error("unknown {attribute} value {value:?}")]
    UnknownValue {
        attribute: &'static str,
        value: String,
    },
    #[error("palette io: {0}")]
    Io(String),
}

/// One of the three demographic attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Attribute {
    Age,
    Gender,
    Skin,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Age, Attribute::Gender, Attribute::Skin];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AgeGroup {
    Under20,
    A20_29,
    A30_39,
    A40_49,
    A50_59,
    A60Plus,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 6] = [
        AgeGroup::Under20,
        AgeGroup::A20_29,
        AgeGroup::A30_39,
        AgeGroup::A40_49,
        AgeGroup::A50_59,
        AgeGroup::A60Plus,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AgeGroup::Under20 => "<20",
            AgeGroup::A20_29 => "20-29",
            AgeGroup::A30_39 => "30-39",
            AgeGroup::A40_49 => "40-49",
            AgeGroup::A50_59 => "50-59",
            AgeGroup::A60Plus => "60+",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AgeGroup {
    type Err = DemographicsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AgeGroup::ALL
            .into_iter()
            .find(|g| g.label() == s)
            .ok_or_else(|| DemographicsError::UnknownValue {
                attribute: "age_group",
                value: s.to_string(),
            })
    }
}

impl Serialize for AgeGroup {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for AgeGroup {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Maps an integer age onto its bucket. Total over all non-negative ages.
pub fn bucket_age(years: u32) -> AgeGroup {
    match years {
        0..=19 => AgeGroup::Under20,
        20..=29 => AgeGroup::A20_29,
        30..=39 => AgeGroup::A30_39,
        40..=49 => AgeGroup::A40_49,
        50..=59 => AgeGroup::A50_59,
        _ => AgeGroup::A60Plus,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Male, Gender::Female];

    pub fn label(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Monk Skin Tone index, 1 through 10.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct SkinTone(u8);

impl SkinTone {
    pub const MIN: u8 = 1;
    pub const MAX: u8 = 10;

    pub fn new(mst: u8) -> Result<Self, DemographicsError> {
        if (Self::MIN..=Self::MAX).contains(&mst) {
            Ok(SkinTone(mst))
        } else {
            Err(DemographicsError::UnknownValue {
                attribute: "skin_tone",
                value: mst.to_string(),
            })
        }
    }

    pub fn mst(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = SkinTone> {
        (Self::MIN..=Self::MAX).map(SkinTone)
    }
}

impl<'de> Deserialize<'de> for SkinTone {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        SkinTone::new(v).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for SkinTone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MST{}", self.0)
    }
}

/// The value a group takes for a single attribute, i.e. `g[a]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IndividualGroup {
    Age(AgeGroup),
    Gender(Gender),
    Skin(SkinTone),
}

impl IndividualGroup {
    pub fn attribute(self) -> Attribute {
        match self {
            IndividualGroup::Age(_) => Attribute::Age,
            IndividualGroup::Gender(_) => Attribute::Gender,
            IndividualGroup::Skin(_) => Attribute::Skin,
        }
    }
}

impl fmt::Display for IndividualGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IndividualGroup::Age(a) => a.fmt(f),
            IndividualGroup::Gender(g) => g.fmt(f),
            IndividualGroup::Skin(s) => s.fmt(f),
        }
    }
}

/// Full demographic tuple for one person. Ordered lexicographically by
/// (age, gender, skin), which is also the tie-break order everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct IntersectionalGroup {
    #[serde(rename = "age_group")]
    pub age: AgeGroup,
    pub gender: Gender,
    #[serde(rename = "skin_tone")]
    pub skin: SkinTone,
}

impl IntersectionalGroup {
    pub fn new(age: AgeGroup, gender: Gender, skin: SkinTone) -> Self {
        Self { age, gender, skin }
    }

    pub fn get(&self, attribute: Attribute) -> IndividualGroup {
        match attribute {
            Attribute::Age => IndividualGroup::Age(self.age),
            Attribute::Gender => IndividualGroup::Gender(self.gender),
            Attribute::Skin => IndividualGroup::Skin(self.skin),
        }
    }

    /// Every group of the default 6 x 2 x 10 space, in sort order.
    pub fn all() -> Vec<IntersectionalGroup> {
        let mut out = Vec::with_capacity(120);
        for age in AgeGroup::ALL {
            for gender in Gender::ALL {
                for skin in SkinTone::all() {
                    out.push(IntersectionalGroup::new(age, gender, skin));
                }
            }
        }
        out
    }
}

impl fmt::Display for IntersectionalGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.age, self.gender, self.skin)
    }
}

fn cosine_unit(a: &[f32], b: &[f32]) -> Result<f64, DemographicsError> {
    if a.len() != b.len() {
        return Err(DemographicsError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum())
}

pub(crate) fn check_unit(v: &[f32]) -> Result<(), DemographicsError> {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(DemographicsError::NotNormalized { norm });
    }
    Ok(())
}

/// Picks the gender whose prompt embedding scores higher against the image.
/// An exact tie goes to `Male`.
pub fn classify_gender(
    image_emb: &[f32],
    male_prompt_emb: &[f32],
    female_prompt_emb: &[f32],
) -> Result<Gender, DemographicsError> {
    for v in [image_emb, male_prompt_emb, female_prompt_emb] {
        check_unit(v)?;
    }
    let male = cosine_unit(image_emb, male_prompt_emb)?;
    let female = cosine_unit(image_emb, female_prompt_emb)?;
    Ok(gender_from_scores(male, female))
}

/// Argmax over the two prompt scores; ties resolve to `Male`.
pub fn gender_from_scores(male: f64, female: f64) -> Gender {
    if female > male {
        Gender::Female
    } else {
        Gender::Male
    }
}

pub type Rgb = [u8; 3];

/// Uniform-daylight RGB skin rule.
pub fn is_skin_pixel([r, g, b]: Rgb) -> bool {
    let (r, g, b) = (r as i32, g as i32, b as i32);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    r > 95 && g > 40 && b > 20 && (max - min) > 15 && (r - g).abs() > 15 && r > g && r > b
}

/// Ten reference colors, index `i` holding MST `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MstPalette {
    swatches: [Rgb; 10],
}

#[derive(Debug, Serialize, Deserialize)]
struct PaletteEntry {
    mst: u8,
    rgb: Rgb,
}

impl MstPalette {
    pub fn new(swatches: [Rgb; 10]) -> Self {
        Self { swatches }
    }

    pub fn swatch(&self, tone: SkinTone) -> Rgb {
        self.swatches[tone.mst() as usize - 1]
    }

    pub fn swatches(&self) -> &[Rgb; 10] {
        &self.swatches
    }

    /// Parses the JSON array `[{"mst": 1, "rgb": [r, g, b]}, ...]`.
    /// Every index 1..=10 must appear exactly once.
    pub fn from_json(text: &str) -> Result<Self, DemographicsError> {
        let entries: Vec<PaletteEntry> = serde_json::from_str(text)
            .map_err(|e| DemographicsError::InvalidPalette(e.to_string()))?;
        if entries.len() != 10 {
            return Err(DemographicsError::InvalidPalette(format!(
                "expected 10 entries, got {}",
                entries.len()
            )));
        }
        let mut slots: [Option<Rgb>; 10] = [None; 10];
        for e in entries {
            let tone = SkinTone::new(e.mst).map_err(|_| {
                DemographicsError::InvalidPalette(format!("mst {} out of range", e.mst))
            })?;
            let slot = &mut slots[tone.mst() as usize - 1];
            if slot.is_some() {
                return Err(DemographicsError::InvalidPalette(format!(
                    "mst {} listed twice",
                    e.mst
                )));
            }
            *slot = Some(e.rgb);
        }
        let mut swatches = [[0u8; 3]; 10];
        for (dst, src) in swatches.iter_mut().zip(slots) {
            *dst = src.expect("all ten slots filled");
        }
        Ok(Self { swatches })
    }

    pub fn to_json(&self) -> String {
        let entries: Vec<PaletteEntry> = self
            .swatches
            .iter()
            .enumerate()
            .map(|(i, &rgb)| PaletteEntry {
                mst: i as u8 + 1,
                rgb,
            })
            .collect();
        serde_json::to_string_pretty(&entries).expect("palette serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DemographicsError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| DemographicsError::Io(e.to_string()))?;
        Self::from_json(&text)
    }

    /// The palette shipped with the crate (`data/mst_palette.json`), taken
    /// from the published Monk Skin Tone swatches.
    pub fn bundled() -> Self {
        Self::from_json(include_str!("../data/mst_palette.json")).expect("bundled palette is valid")
    }
}

impl Default for MstPalette {
    fn default() -> Self {
        Self::bundled()
    }
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_rgb(rgb: Rgb) -> [f64; 3] {
    rgb.map(|c| srgb_to_linear(c as f64 / 255.0))
}

/// CIELAB (D65 white) of a linear-light sRGB triple.
pub fn linear_rgb_to_lab([r, g, b]: [f64; 3]) -> [f64; 3] {
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];
    let f = |t: f64| {
        const EPS: f64 = 216.0 / 24389.0;
        const KAPPA: f64 = 24389.0 / 27.0;
        if t > EPS {
            t.cbrt()
        } else {
            (KAPPA * t + 16.0) / 116.0
        }
    };
    let fx = f(x / WHITE[0]);
    let fy = f(y / WHITE[1]);
    let fz = f(z / WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

pub fn srgb_to_lab(rgb: Rgb) -> [f64; 3] {
    linear_rgb_to_lab(linear_rgb(rgb))
}

pub fn delta_e76(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Nearest MST swatch (ΔE76 in CIELAB) to the mean skin color of a face crop.
///
/// Pixels failing [`is_skin_pixel`] are discarded, the rest are averaged in
/// linear light. Equal distances resolve to the lower MST index.
pub fn classify_skin_tone(
    face_pixels: &[Rgb],
    palette: &MstPalette,
) -> Result<SkinTone, DemographicsError> {
    if face_pixels.is_empty() {
        return Err(DemographicsError::EmptyFace);
    }
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for &px in face_pixels.iter().filter(|&&px| is_skin_pixel(px)) {
        let lin = linear_rgb(px);
        for c in 0..3 {
            sum[c] += lin[c];
        }
        n += 1;
    }
    if n == 0 {
        return Err(DemographicsError::NoSkinPixels);
    }
    let mean = sum.map(|s| s / n as f64);
    let lab = linear_rgb_to_lab(mean);
    let mut best = (f64::INFINITY, SkinTone(1));
    for tone in SkinTone::all() {
        let d = delta_e76(lab, srgb_to_lab(palette.swatch(tone)));
        if d < best.0 {
            best = (d, tone);
        }
    }
    Ok(best.1)
}

/// Text-prompt embeddings used for gender classification, in the order
/// male prompt, female prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenderPrompts {
    pub male: Vec<f32>,
    pub female: Vec<f32>,
}

impl GenderPrompts {
    pub const MALE_TEXT: &'static str = "photo of a male or a man or a boy";
    pub const FEMALE_TEXT: &'static str = "photo of a female or a woman or a girl";
}

/// Upstream detector output for one generated image with a detected face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceObservation {
    pub age_years: u32,
    pub image_emb: Vec<f32>,
    pub face_pixels: Vec<Rgb>,
}

/// Runs all three classifiers on one face. A face without any skin pixels
/// is reported as `Ok(None)`, the same as an image with no face at all.
pub fn classify_face(
    face: &FaceObservation,
    prompts: &GenderPrompts,
    palette: &MstPalette,
) -> Result<Option<IntersectionalGroup>, DemographicsError> {
    let age = bucket_age(face.age_years);
    let gender = classify_gender(&face.image_emb, &prompts.male, &prompts.female)?;
    match classify_skin_tone(&face.face_pixels, palette) {
        Ok(skin) => Ok(Some(IntersectionalGroup::new(age, gender, skin))),
        Err(DemographicsError::NoSkinPixels) | Err(DemographicsError::EmptyFace) => Ok(None),
        Err(e) => Err(e),
    }
}
