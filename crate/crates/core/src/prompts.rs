//! The bundled 80-prompt profession evaluation set.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "artists")]
    Artists,
    #[serde(rename = "f&b")]
    FoodAndBeverage,
    #[serde(rename = "musicians")]
    Musicians,
    #[serde(rename = "security")]
    Security,
    #[serde(rename = "sports")]
    Sports,
    #[serde(rename = "stem")]
    Stem,
    #[serde(rename = "workers")]
    Workers,
    #[serde(rename = "others")]
    Others,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Artists,
        Category::FoodAndBeverage,
        Category::Musicians,
        Category::Security,
        Category::Sports,
        Category::Stem,
        Category::Workers,
        Category::Others,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Category::Artists => "artists",
            Category::FoodAndBeverage => "f&b",
            Category::Musicians => "musicians",
            Category::Security => "security",
            Category::Sports => "sports",
            Category::Stem => "stem",
            Category::Workers => "workers",
            Category::Others => "others",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Leading words of a prompt, e.g. `"Photo of"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate(pub String);

impl PromptTemplate {
    pub const PHOTO: &'static str = "Photo of";
    pub const HEADSHOT: &'static str = "Headshot of";
    pub const FULL_BODY: &'static str = "Full body of";

    pub fn new(prefix: impl Into<String>) -> Self {
        Self(prefix.into())
    }

    /// `"Photo of" + "engineer"` -> `"Photo of an engineer"`.
    pub fn render(&self, profession: &str) -> String {
        format!(
            "{} {} {}",
            self.0,
            indefinite_article(profession),
            profession
        )
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::new(Self::PHOTO)
    }
}

fn indefinite_article(word: &str) -> &'static str {
    match word.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub text: String,
    pub profession: String,
    pub category: Category,
    pub template: String,
}

#[derive(Debug, Deserialize)]
struct CategoryBlock {
    category: Category,
    professions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptSet {
    pub entries: Vec<PromptEntry>,
}

impl PromptSet {
    pub fn bundled() -> Self {
        Self::bundled_with(&PromptTemplate::default())
    }

    pub fn bundled_with(template: &PromptTemplate) -> Self {
        let blocks: Vec<CategoryBlock> =
            serde_json::from_str(include_str!("../data/eval_prompts.json"))
                .expect("bundled prompt list parses");
        let entries = blocks
            .into_iter()
            .flat_map(|b| {
                let category = b.category;
                b.professions.into_iter().map(move |p| PromptEntry {
                    text: template.render(&p),
                    profession: p,
                    category,
                    template: template.0.clone(),
                })
            })
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn in_category(&self, category: Category) -> impl Iterator<Item = &PromptEntry> {
        self.entries.iter().filter(move |e| e.category == category)
    }

    pub fn texts(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.text.as_str()).collect()
    }
}
