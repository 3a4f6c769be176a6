//! Closed vocabularies, prompt types and the fixed prompt grammar.
//!
//! Every word belongs to exactly one vocabulary, so a generated prompt can
//! be parsed back into its attribute-object pairs without ambiguity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeCategory {
    Material,
    Color,
    Shape,
    Size,
    Count,
}

impl AttributeCategory {
    pub const ALL: [AttributeCategory; 5] = [
        AttributeCategory::Material,
        AttributeCategory::Color,
        AttributeCategory::Shape,
        AttributeCategory::Size,
        AttributeCategory::Count,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AttributeCategory::Material => "material",
            AttributeCategory::Color => "color",
            AttributeCategory::Shape => "shape",
            AttributeCategory::Size => "size",
            AttributeCategory::Count => "count",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    /// Position in the noun-phrase word order.
    pub fn phrase_order(&self) -> usize {
        match self {
            AttributeCategory::Count => 0,
            AttributeCategory::Size => 1,
            AttributeCategory::Shape => 2,
            AttributeCategory::Color => 3,
            AttributeCategory::Material => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectCategory {
    Common,
    Rare,
    TextRendering,
}

impl ObjectCategory {
    pub const ALL: [ObjectCategory; 3] = [
        ObjectCategory::Common,
        ObjectCategory::Rare,
        ObjectCategory::TextRendering,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectCategory::Common => "common",
            ObjectCategory::Rare => "rare",
            ObjectCategory::TextRendering => "text_rendering",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    pub fn objects(&self) -> &'static [&'static str] {
        match self {
            ObjectCategory::Common => COMMON_OBJECTS,
            ObjectCategory::Rare => RARE_OBJECTS,
            ObjectCategory::TextRendering => TEXT_OBJECTS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneTag {
    Indoor,
    Outdoor,
    Realistic,
    Painting,
}

impl SceneTag {
    pub const ALL: [SceneTag; 4] = [
        SceneTag::Indoor,
        SceneTag::Outdoor,
        SceneTag::Realistic,
        SceneTag::Painting,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SceneTag::Indoor => "indoor",
            SceneTag::Outdoor => "outdoor",
            SceneTag::Realistic => "realistic",
            SceneTag::Painting => "painting",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    fn phrase(&self) -> &'static str {
        match self {
            SceneTag::Indoor => "an indoor scene",
            SceneTag::Outdoor => "an outdoor scene",
            SceneTag::Realistic => "a realistic scene",
            SceneTag::Painting => "a painting",
        }
    }
}

pub const COMMON_OBJECTS: &[&str] = &["cat", "cup", "tree", "car", "house", "fish"];
pub const RARE_OBJECTS: &[&str] = &["anchor", "cactus", "crown", "kite", "key", "bell"];
pub const TEXT_OBJECTS: &[&str] = &["OK", "HI", "GO", "ZAP", "YES", "MOON"];

/// Color names with their rendered hue in degrees.
pub const COLORS: &[(&str, f32)] = &[
    ("red", 0.0),
    ("orange", 30.0),
    ("yellow", 58.0),
    ("green", 120.0),
    ("cyan", 185.0),
    ("blue", 230.0),
    ("purple", 275.0),
    ("pink", 325.0),
];
pub const MATERIALS: &[&str] = &["plastic", "metal", "wood", "stone", "fabric"];
pub const SHAPES: &[&str] = &["regular", "tall", "wide"];
pub const SIZES: &[&str] = &["small", "medium", "large"];
pub const COUNT_WORDS: &[(&str, u32)] = &[("two", 2), ("three", 3)];

pub fn object_category(object: &str) -> Option<ObjectCategory> {
    ObjectCategory::ALL
        .into_iter()
        .find(|c| c.objects().contains(&object))
}

pub fn color_hue(name: &str) -> Option<f32> {
    COLORS.iter().find(|(n, _)| *n == name).map(|(_, h)| *h)
}

pub fn attribute_category(word: &str) -> Option<AttributeCategory> {
    if MATERIALS.contains(&word) {
        Some(AttributeCategory::Material)
    } else if color_hue(word).is_some() {
        Some(AttributeCategory::Color)
    } else if SHAPES.contains(&word) {
        Some(AttributeCategory::Shape)
    } else if SIZES.contains(&word) {
        Some(AttributeCategory::Size)
    } else if COUNT_WORDS.iter().any(|(w, _)| *w == word) {
        Some(AttributeCategory::Count)
    } else {
        None
    }
}

pub fn count_word(n: u32) -> Option<&'static str> {
    COUNT_WORDS.iter().find(|(_, c)| *c == n).map(|(w, _)| *w)
}

pub fn count_value(word: &str) -> Option<u32> {
    COUNT_WORDS.iter().find(|(w, _)| *w == word).map(|(_, c)| *c)
}

fn plural(noun: &str) -> String {
    match noun {
        "fish" => "fish".into(),
        "cactus" => "cacti".into(),
        n => format!("{n}s"),
    }
}

fn singular(word: &str) -> Option<&'static str> {
    COMMON_OBJECTS
        .iter()
        .chain(RARE_OBJECTS)
        .find(|&&n| n == word || plural(n) == word)
        .copied()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptKind {
    Full,
    MaskSimple,
    MaskRich,
}

impl PromptKind {
    pub const ALL: [PromptKind; 3] = [PromptKind::Full, PromptKind::MaskSimple, PromptKind::MaskRich];

    pub fn as_str(&self) -> &'static str {
        match self {
            PromptKind::Full => "Full",
            PromptKind::MaskSimple => "Mask-Simple",
            PromptKind::MaskRich => "Mask-Rich",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let norm: String = s.chars().filter(|c| c.is_alphanumeric()).collect();
        Self::ALL.into_iter().find(|k| {
            k.as_str()
                .chars()
                .filter(|c| c.is_alphanumeric())
                .collect::<String>()
                .eq_ignore_ascii_case(&norm)
        })
    }

    pub fn is_mask(&self) -> bool {
        !matches!(self, PromptKind::Full)
    }
}

/// One attribute applied to one object.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributePair {
    pub attribute: String,
    pub attribute_category: AttributeCategory,
    pub object: String,
    pub object_category: ObjectCategory,
}

impl AttributePair {
    pub fn new(attribute: &str, object: &str) -> Result<Self> {
        let attribute_category = attribute_category(attribute)
            .ok_or_else(|| Error::Config(format!("unknown attribute {attribute:?}")))?;
        let object_category = object_category(object)
            .ok_or_else(|| Error::Config(format!("unknown object {object:?}")))?;
        Ok(Self {
            attribute: attribute.to_string(),
            attribute_category,
            object: object.to_string(),
            object_category,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub kind: PromptKind,
    pub text: String,
    pub pairs: Vec<AttributePair>,
}

impl Prompt {
    pub fn new(kind: PromptKind, text: String, pairs: Vec<AttributePair>) -> Result<Self> {
        let ok = match kind {
            PromptKind::Full => !pairs.is_empty(),
            PromptKind::MaskSimple => pairs.len() == 1,
            PromptKind::MaskRich => pairs.len() == 3,
        };
        if !ok {
            return Err(Error::Config(format!(
                "{} prompt cannot carry {} pairs",
                kind.as_str(),
                pairs.len()
            )));
        }
        if text.trim().is_empty() {
            return Err(Error::Config("empty prompt text".into()));
        }
        Ok(Self { kind, text, pairs })
    }

    /// Builds a prompt from free text by parsing it with the grammar.
    pub fn parse(kind: PromptKind, text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        Self::new(kind, text.to_string(), pairs)
    }
}

/// Noun phrase for one object, e.g. `two small red metal cats` or
/// `a wide blue sign reading "MOON"`.
pub fn noun_phrase(object: &str, attributes: &[(AttributeCategory, String)]) -> String {
    let mut attrs: Vec<&(AttributeCategory, String)> = attributes.iter().collect();
    attrs.sort_by_key(|(c, _)| c.phrase_order());
    let count = attrs
        .iter()
        .find(|(c, _)| *c == AttributeCategory::Count)
        .map(|(_, w)| w.clone());
    let mut words: Vec<String> = vec![count.clone().unwrap_or_else(|| "a".into())];
    words.extend(
        attrs
            .iter()
            .filter(|(c, _)| *c != AttributeCategory::Count)
            .map(|(_, w)| w.clone()),
    );
    let many = count.is_some();
    if object_category(object) == Some(ObjectCategory::TextRendering) {
        words.push(if many { "signs" } else { "sign" }.into());
        words.push("reading".into());
        words.push(format!("\"{object}\""));
    } else if many {
        words.push(plural(object));
    } else {
        words.push(object.to_string());
    }
    words.join(" ")
}

/// Whole-scene caption joining one noun phrase per object.
pub fn scene_caption(scene: SceneTag, phrases: &[String]) -> String {
    let list = match phrases {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {}", init.join(", "), last),
    };
    if list.is_empty() {
        scene.phrase().to_string()
    } else {
        format!("{} with {}", scene.phrase(), list)
    }
}

/// Inverts the grammar: recovers the ordered pair list of a prompt.
pub fn parse_pairs(text: &str) -> Result<Vec<AttributePair>> {
    let body = SceneTag::ALL
        .iter()
        .find_map(|s| text.strip_prefix(s.phrase()))
        .map(|rest| rest.strip_prefix(" with ").unwrap_or(rest))
        .unwrap_or(text);
    let mut pairs = Vec::new();
    let mut pending: Vec<(AttributeCategory, String)> = Vec::new();
    let mut words = body
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|w| !w.is_empty())
        .peekable();
    while let Some(word) = words.next() {
        if word == "a" || word == "and" {
            continue;
        }
        if let Some(cat) = attribute_category(word) {
            pending.push((cat, word.to_string()));
            continue;
        }
        let object = if word == "sign" || word == "signs" {
            if words.next() != Some("reading") {
                return Err(Error::Config(format!("malformed sign phrase in {text:?}")));
            }
            let quoted = words
                .next()
                .ok_or_else(|| Error::Config(format!("missing sign text in {text:?}")))?;
            let inner = quoted.trim_matches('"');
            if !TEXT_OBJECTS.contains(&inner) {
                return Err(Error::Config(format!("unknown sign text {inner:?}")));
            }
            inner.to_string()
        } else if let Some(noun) = singular(word) {
            noun.to_string()
        } else {
            return Err(Error::Config(format!("unknown word {word:?} in {text:?}")));
        };
        for (_, attr) in pending.drain(..) {
            pairs.push(AttributePair::new(&attr, &object)?);
        }
    }
    if !pending.is_empty() {
        return Err(Error::Config(format!("dangling attributes in {text:?}")));
    }
    Ok(pairs)
}

/// Word-level tokenizer over the closed grammar.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    words: Vec<String>,
    max_len: usize,
}

pub const PAD: u32 = 0;
pub const NULL: u32 = 1;
pub const UNK: u32 = 2;

impl Tokenizer {
    pub fn new(max_len: usize) -> Self {
        let mut words: Vec<String> = ["<pad>", "<null>", "<unk>", "a", "an", "and", "with", "sign", "signs", "reading", "scene"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        words.extend(SceneTag::ALL.iter().map(|s| s.as_str().to_string()));
        words.push("painting".into());
        for &n in COMMON_OBJECTS.iter().chain(RARE_OBJECTS) {
            words.push(n.to_string());
            words.push(plural(n));
        }
        words.extend(TEXT_OBJECTS.iter().map(|s| s.to_string()));
        words.extend(COLORS.iter().map(|(c, _)| c.to_string()));
        words.extend(MATERIALS.iter().map(|s| s.to_string()));
        words.extend(SHAPES.iter().map(|s| s.to_string()));
        words.extend(SIZES.iter().map(|s| s.to_string()));
        words.extend(COUNT_WORDS.iter().map(|(s, _)| s.to_string()));
        let mut seen = std::collections::HashSet::new();
        words.retain(|w| seen.insert(w.clone()));
        Self { words, max_len }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Token ids padded (or truncated) to `max_len`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|w| !w.is_empty())
            .map(|w| {
                let w = w.trim_matches('"');
                self.words
                    .iter()
                    .position(|v| v == w)
                    .map_or(UNK, |i| i as u32)
            })
            .take(self.max_len)
            .collect();
        ids.resize(self.max_len, PAD);
        ids
    }

    /// The reserved sequence standing for "no text".
    pub fn null_sequence(&self) -> Vec<u32> {
        let mut ids = vec![PAD; self.max_len];
        ids[0] = NULL;
        ids
    }
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new(64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabularies_are_disjoint() {
        let mut all: Vec<&str> = Vec::new();
        all.extend(MATERIALS);
        all.extend(COLORS.iter().map(|(c, _)| *c));
        all.extend(SHAPES);
        all.extend(SIZES);
        all.extend(COUNT_WORDS.iter().map(|(c, _)| *c));
        all.extend(COMMON_OBJECTS);
        all.extend(RARE_OBJECTS);
        all.extend(TEXT_OBJECTS);
        let set: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(set.len(), all.len());
    }

    #[test]
    fn noun_phrase_round_trips() {
        let attrs = vec![
            (AttributeCategory::Material, "metal".to_string()),
            (AttributeCategory::Count, "three".to_string()),
            (AttributeCategory::Color, "red".to_string()),
        ];
        let text = noun_phrase("cat", &attrs);
        assert_eq!(text, "three red metal cats");
        let pairs = parse_pairs(&text).unwrap();
        let mut got: Vec<_> = pairs.iter().map(|p| p.attribute.as_str()).collect();
        got.sort();
        assert_eq!(got, vec!["metal", "red", "three"]);
        assert!(pairs.iter().all(|p| p.object == "cat"));
    }

    #[test]
    fn sign_phrase_round_trips() {
        let text = noun_phrase("MOON", &[(AttributeCategory::Shape, "wide".into())]);
        assert_eq!(text, "a wide sign reading \"MOON\"");
        let pairs = parse_pairs(&text).unwrap();
        assert_eq!(pairs, vec![AttributePair::new("wide", "MOON").unwrap()]);
    }

    #[test]
    fn caption_parses_all_objects() {
        let a = noun_phrase("cat", &[(AttributeCategory::Color, "red".into())]);
        let b = noun_phrase("kite", &[(AttributeCategory::Size, "small".into())]);
        let text = scene_caption(SceneTag::Outdoor, &[a, b]);
        assert_eq!(text, "an outdoor scene with a red cat and a small kite");
        assert_eq!(parse_pairs(&text).unwrap().len(), 2);
    }

    #[test]
    fn prompt_pair_counts_enforced() {
        assert!(Prompt::parse(PromptKind::MaskSimple, "a red cat").is_ok());
        assert!(Prompt::parse(PromptKind::MaskRich, "a red cat").is_err());
        assert!(Prompt::parse(PromptKind::MaskRich, "a small tall red cat").is_ok());
        assert!(Prompt::new(PromptKind::Full, " ".into(), vec![AttributePair::new("red", "cat").unwrap()]).is_err());
    }

    #[test]
    fn tokenizer_pads_and_reserves_null() {
        let tok = Tokenizer::new(8);
        let ids = tok.encode("a red cat");
        assert_eq!(ids.len(), 8);
        assert!(ids[..3].iter().all(|&i| i > UNK));
        assert_eq!(&ids[3..], &[PAD; 5]);
        assert_eq!(tok.encode("a \"MOON\"")[1], tok.encode("MOON")[0]);
        assert_eq!(tok.null_sequence()[0], NULL);
        assert_eq!(tok.encode("zebra")[0], UNK);
    }

    #[test]
    fn prompt_kind_parse_accepts_variants() {
        assert_eq!(PromptKind::parse("mask_simple"), Some(PromptKind::MaskSimple));
        assert_eq!(PromptKind::parse("Mask-Rich"), Some(PromptKind::MaskRich));
        assert_eq!(PromptKind::parse("full"), Some(PromptKind::Full));
    }
}
