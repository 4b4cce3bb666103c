//! Built-in word lists: the semantic groups used to categorize homogeneous
//! dimensions, the finer facets the mock generator and the preference
//! summaries work with, and the general vocabulary of the synthetic scorer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The five semantic groups homogeneous dimensions are sorted into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Subjects,
    Attributes,
    ContextualSettings,
    Actions,
    Relationships,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Subjects,
        Category::Attributes,
        Category::ContextualSettings,
        Category::Actions,
        Category::Relationships,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Subjects => "subjects",
            Category::Attributes => "attributes",
            Category::ContextualSettings => "contextual_settings",
            Category::Actions => "actions",
            Category::Relationships => "relationships",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == key)
            .ok_or_else(|| format!("unknown category `{s}`"))
    }
}

/// A finer-grained visual facet. Each facet belongs to one [`Category`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Facet {
    Subject,
    Gender,
    Age,
    Ethnicity,
    Appearance,
    Tone,
    Composition,
    Style,
    Setting,
    Time,
    Action,
    Relationship,
}

impl Facet {
    pub const ALL: [Facet; 12] = [
        Facet::Subject,
        Facet::Gender,
        Facet::Age,
        Facet::Ethnicity,
        Facet::Appearance,
        Facet::Tone,
        Facet::Composition,
        Facet::Style,
        Facet::Setting,
        Facet::Time,
        Facet::Action,
        Facet::Relationship,
    ];

    /// Facets a text-to-image model fills in on its own when the prompt is
    /// silent about them. The mock generator uses these to plant homogeneity.
    pub const IMPLICIT: [Facet; 5] = [
        Facet::Gender,
        Facet::Age,
        Facet::Ethnicity,
        Facet::Setting,
        Facet::Tone,
    ];

    pub fn category(self) -> Category {
        match self {
            Facet::Subject => Category::Subjects,
            Facet::Gender
            | Facet::Age
            | Facet::Ethnicity
            | Facet::Appearance
            | Facet::Tone
            | Facet::Composition
            | Facet::Style => Category::Attributes,
            Facet::Setting | Facet::Time => Category::ContextualSettings,
            Facet::Action => Category::Actions,
            Facet::Relationship => Category::Relationships,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Facet::Subject => "subject",
            Facet::Gender => "gender",
            Facet::Age => "age",
            Facet::Ethnicity => "ethnicity",
            Facet::Appearance => "appearance",
            Facet::Tone => "tone",
            Facet::Composition => "composition",
            Facet::Style => "style",
            Facet::Setting => "setting",
            Facet::Time => "time",
            Facet::Action => "action",
            Facet::Relationship => "relationship",
        }
    }

    /// Words of this facet. The first entries double as the mock generator's
    /// implicit defaults.
    pub fn words(self) -> &'static [&'static str] {
        match self {
            Facet::Subject => &[
                "person", "man", "woman", "child", "artist", "sculptor", "painter", "apostle",
                "monk", "scholar", "scientist", "chef", "farmer", "robot", "knight", "dancer",
                "musician", "athlete", "teacher", "nurse", "doctor", "engineer", "astronaut",
                "superhero", "student", "traveler", "writer", "designer", "barista", "hiker",
            ],
            Facet::Gender => &["male", "female", "androgynous", "nonbinary"],
            Facet::Age => &[
                "elderly", "young", "old", "teenage", "adult", "senior", "toddler", "youthful",
                "aged",
            ],
            Facet::Ethnicity => &[
                "european", "asian", "african", "egyptian", "indian", "latino", "arab",
                "nordic", "indigenous", "polynesian",
            ],
            Facet::Appearance => &[
                "bearded", "experienced", "tattooed", "freckled", "muscular", "slender",
                "bald", "curly",
            ],
            Facet::Tone => &[
                "dramatic", "bright", "muted", "warm", "cold", "vibrant", "moody", "pastel",
                "cheerful", "friendly",
            ],
            Facet::Composition => &[
                "portrait", "closeup", "wide", "aerial", "symmetrical", "candid",
            ],
            Facet::Style => &[
                "photorealistic", "watercolor", "cartoon", "sketch", "anime", "oil",
                "minimalist", "baroque",
            ],
            Facet::Setting => &[
                "studio", "city", "forest", "beach", "desert", "mountain", "kitchen", "office",
                "library", "temple", "village", "market", "park", "cafe", "museum", "space",
                "underwater", "workshop", "garden",
            ],
            Facet::Time => &[
                "night", "sunset", "dawn", "winter", "summer", "medieval", "futuristic",
            ],
            Facet::Action => &[
                "writing", "painting", "chiseling", "composing", "reading", "cooking",
                "dancing", "running", "singing", "building", "teaching", "meditating",
                "considering", "praying", "laughing", "flying", "drinking", "operating",
            ],
            Facet::Relationship => &[
                "alone", "together", "couple", "crowd", "team", "mentor", "siblings",
                "strangers", "group", "partners",
            ],
        }
    }

    /// Extra keywords that point at a facet in free text (feedback notes,
    /// revision diffs) without being generator vocabulary.
    fn keywords(self) -> &'static [&'static str] {
        match self {
            Facet::Age => &["age", "ages", "older", "younger", "kid", "kids", "teen", "teens"],
            Facet::Gender => &["gender", "men", "women", "masculine", "feminine"],
            Facet::Ethnicity => &["ethnicity", "ethnic", "race", "skin", "cultural", "culture"],
            Facet::Setting => &["setting", "background", "location", "place", "scene", "outdoor", "indoor"],
            Facet::Tone => &["tone", "mood", "lighting", "light", "color", "colors", "aggressive", "calm", "friendlier"],
            Facet::Composition => &["composition", "framing", "pose", "angle", "layout"],
            Facet::Style => &["style", "realistic", "artistic"],
            Facet::Relationship => &["relationship", "interaction", "people"],
            Facet::Action => &["activity", "activities", "doing"],
            Facet::Subject => &["character", "subject", "species"],
            Facet::Appearance => &["beard", "hair", "clothing", "outfit", "costume"],
            Facet::Time => &["era", "season", "time"],
        }
    }
}

impl fmt::Display for Facet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Facet of a generator-vocabulary word, exact match only.
pub fn facet_of_word(word: &str) -> Option<Facet> {
    let w = word.to_ascii_lowercase();
    Facet::ALL
        .into_iter()
        .find(|f| f.words().contains(&w.as_str()))
}

/// Facet mentioned by a free-text word, allowing keywords and a plural `s`.
pub fn facet_of_keyword(word: &str) -> Option<Facet> {
    let w = word.to_ascii_lowercase();
    let stem = w.strip_suffix('s').unwrap_or(&w);
    for f in Facet::ALL {
        for candidate in [w.as_str(), stem] {
            if f.words().contains(&candidate) || f.keywords().contains(&candidate) {
                return Some(f);
            }
        }
    }
    None
}

/// Plain words for the synthetic vocabulary on top of the facet words.
pub const GENERAL_WORDS: &[&str] = &[
    "a", "an", "the", "is", "are", "was", "of", "in", "on", "with", "and", "or", "for", "to",
    "at", "by", "from", "into", "under", "over", "near", "its", "their", "his", "her", "that",
    "this", "some", "many", "new", "set", "piece", "work", "design", "image", "photo",
    "picture", "showcasing", "showing", "range", "users", "user", "operating", "coffee",
    "machine", "machines", "advertisement", "advertising", "campaign", "promotional", "poster",
    "attract", "variety", "visitors", "tourist", "destination", "video", "game", "character",
    "relatable", "interior", "apartment", "appealing", "potential", "tenants", "furniture",
    "room", "bedroom", "living", "dog", "cat", "horse", "bird", "car", "house", "street",
    "table", "chair", "book", "bible", "manuscript", "prosperity", "light", "shadow", "sky",
    "water", "tree", "flower", "food", "meal", "music", "instrument", "canvas", "stone",
    "marble", "wood", "paper", "pen", "brush", "sword", "cape", "mask", "costume", "hero",
    "villain", "ancient", "modern", "classic", "traditional", "unique", "diverse", "different",
    "beautiful", "large", "small", "tall", "happy", "sad", "quiet", "busy", "crowded", "empty",
    "red", "blue", "green", "yellow", "black", "white", "golden", "silver", "wearing", "holding",
    "standing", "sitting", "walking", "looking", "smiling", "playing", "working", "making",
    "drawing", "carving", "sculpting", "photographing", "exploring", "relaxing", "eating",
    "day", "morning", "evening", "sun", "moon", "rain", "snow", "wind", "ocean", "river",
    "lake", "island", "hill", "valley", "road", "bridge", "tower", "castle", "church",
    "school", "hospital", "laboratory", "restaurant", "hotel", "airport", "station",
    "background", "foreground", "scene", "style", "art", "artwork", "render", "illustration",
    "detailed", "realistic", "colorful", "soft", "sharp", "high", "quality", "cinematic",
];

/// Single characters and digits, usable as standalone tokens and as `##`
/// continuation pieces so any ASCII word can be tokenized.
pub const CHARACTERS: &str = "abcdefghijklmnopqrstuvwxyz0123456789";

pub const PUNCTUATION: &[&str] = &[".", ",", "!", "?", "'", "-", ":", ";", "(", ")"];

/// Short suffix pieces that make subword splits of common inflections
/// compact.
pub const SUFFIX_PIECES: &[&str] = &["s", "es", "ed", "ing", "er", "ers", "ly", "ist", "ness"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_parse_roundtrip() {
        for c in Category::ALL {
            assert_eq!(c.as_str().parse::<Category>().unwrap(), c);
        }
        assert_eq!(
            "Contextual Settings".parse::<Category>().unwrap(),
            Category::ContextualSettings
        );
        assert!("colors".parse::<Category>().is_err());
    }

    #[test]
    fn facet_words_are_unique_across_facets() {
        let mut seen = std::collections::HashSet::new();
        for f in Facet::ALL {
            for w in f.words() {
                assert!(seen.insert(*w), "duplicate facet word {w}");
            }
        }
    }

    #[test]
    fn keyword_lookup_handles_plurals() {
        assert_eq!(facet_of_keyword("ages"), Some(Facet::Age));
        assert_eq!(facet_of_keyword("Deserts"), Some(Facet::Setting));
        assert_eq!(facet_of_keyword("zzz"), None);
        assert_eq!(facet_of_word("beard"), None);
        assert_eq!(facet_of_word("bearded"), Some(Facet::Appearance));
    }
}
