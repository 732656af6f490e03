//! Closed vocabulary: color words, glyph words grouped into categories,
//! referring-expression styles, and the fixed prompt words.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::world::{RenderConfig, NUM_CUBES, NUM_MARKS};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self, Error> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// How a cube is referred to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CubeStyle {
    /// "{color} cube"
    ColorCube,
    /// "{ordinal} cube from the left"
    FromLeft,
    /// "object colored {color}"
    ColoredObject,
    /// "{ordinal} cube from the right"
    FromRight,
}

/// How a mark is referred to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MarkStyle {
    /// "{word} mark"
    WordMark,
    /// "{left|middle|right} mark"
    Side,
    /// "picture of {word}"
    Picture,
    /// "{west|central|east} mark"
    Compass,
}

impl CubeStyle {
    pub fn for_split(split: Split) -> [CubeStyle; 2] {
        match split {
            Split::Train => [CubeStyle::ColorCube, CubeStyle::FromLeft],
            Split::Test => [CubeStyle::ColoredObject, CubeStyle::FromRight],
        }
    }
}

impl MarkStyle {
    pub fn for_split(split: Split) -> [MarkStyle; 2] {
        match split {
            Split::Train => [MarkStyle::WordMark, MarkStyle::Side],
            Split::Test => [MarkStyle::Picture, MarkStyle::Compass],
        }
    }
}

pub const ORDINALS: [&str; NUM_CUBES] = ["first", "second", "third", "fourth"];
pub const SIDES: [&str; NUM_MARKS] = ["left", "middle", "right"];
pub const COMPASS: [&str; NUM_MARKS] = ["west", "central", "east"];

pub const SYSTEM_PROMPT: &str = "Retrieve the video which can best finish the manipulation task specified by the user, given the layout of the workspace and the current frame observation.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorWord {
    pub name: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryWords {
    pub name: String,
    /// Three train words then three test words; glyph id = category * 6 + position.
    pub words: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// Indexed by palette color id.
    pub colors: Vec<ColorWord>,
    pub categories: Vec<CategoryWords>,
}

pub const GLYPHS_PER_CATEGORY: usize = 6;
pub const GLYPHS_PER_SPLIT: usize = 3;

const COLOR_NAMES: [&str; 16] = [
    "red", "vermilion", "orange", "amber", "yellow", "chartreuse", "green", "jade", "teal", "cyan", "azure", "blue",
    "indigo", "violet", "magenta", "rose",
];

const CATEGORIES: [(&str, [&str; 6]); 24] = [
    ("numbers", ["seven", "eight", "nine", "ten", "eleven", "twelve"]),
    ("fruits", ["apple", "banana", "cherry", "grape", "lemon", "mango"]),
    ("animals", ["cat", "dog", "horse", "lion", "tiger", "zebra"]),
    ("vehicles", ["car", "bus", "truck", "train", "boat", "plane"]),
    ("tools", ["hammer", "wrench", "saw", "drill", "pliers", "shovel"]),
    ("instruments", ["piano", "guitar", "drum", "violin", "flute", "trumpet"]),
    ("weather", ["sun", "rain", "snow", "cloud", "storm", "wind"]),
    ("shapes", ["circle", "square", "triangle", "star", "heart", "diamond"]),
    ("greek", ["alpha", "beta", "gamma", "delta", "sigma", "omega"]),
    ("planets", ["mercury", "venus", "mars", "jupiter", "saturn", "neptune"]),
    ("furniture", ["chair", "sofa", "bed", "desk", "lamp", "shelf"]),
    ("clothing", ["shirt", "hat", "shoe", "coat", "sock", "glove"]),
    ("sports", ["soccer", "tennis", "golf", "hockey", "rugby", "boxing"]),
    ("food", ["bread", "cheese", "pizza", "soup", "rice", "cake"]),
    ("birds", ["eagle", "owl", "parrot", "swan", "crow", "duck"]),
    ("insects", ["ant", "bee", "moth", "wasp", "beetle", "spider"]),
    ("flowers", ["tulip", "lily", "daisy", "orchid", "lotus", "poppy"]),
    ("trees", ["oak", "pine", "maple", "birch", "cedar", "palm"]),
    ("landmarks", ["tower", "bridge", "castle", "temple", "pyramid", "arch"]),
    ("kitchen", ["cup", "fork", "spoon", "knife", "plate", "bowl"]),
    ("music", ["jazz", "blues", "rock", "opera", "disco", "reggae"]),
    ("sea", ["fish", "whale", "shark", "crab", "octopus", "seal"]),
    ("body", ["hand", "foot", "eye", "ear", "nose", "mouth"]),
    ("office", ["pen", "book", "clock", "key", "phone", "scissors"]),
];

/// Words outside the attribute vocabulary that any prompt may use.
const FIXED_WORDS: &str = "pick up the and place it onto cube from left right mark object colored picture of \
    grasped to on table first second third fourth middle west central east";

impl Vocabulary {
    /// 16 colors (even hues train, odd hues test) and 24 categories of 6 glyph words.
    pub fn standard() -> Self {
        Self {
            colors: COLOR_NAMES
                .iter()
                .enumerate()
                .map(|(i, n)| ColorWord { name: n.to_string(), split: if i % 2 == 0 { Split::Train } else { Split::Test } })
                .collect(),
            categories: CATEGORIES
                .iter()
                .map(|(n, w)| CategoryWords { name: n.to_string(), words: w.iter().map(|s| s.to_string()).collect() })
                .collect(),
        }
    }

    pub fn glyph_count(&self) -> usize {
        self.categories.len() * GLYPHS_PER_CATEGORY
    }

    pub fn glyph_word(&self, glyph: u16) -> &str {
        let g = glyph as usize;
        &self.categories[g / GLYPHS_PER_CATEGORY].words[g % GLYPHS_PER_CATEGORY]
    }

    pub fn glyph_split(glyph: u16) -> Split {
        if (glyph as usize % GLYPHS_PER_CATEGORY) < GLYPHS_PER_SPLIT {
            Split::Train
        } else {
            Split::Test
        }
    }

    pub fn glyphs_for(&self, category: usize, split: Split) -> [u16; GLYPHS_PER_SPLIT] {
        let base = category * GLYPHS_PER_CATEGORY + if split == Split::Train { 0 } else { GLYPHS_PER_SPLIT };
        [base as u16, base as u16 + 1, base as u16 + 2]
    }

    pub fn colors_for(&self, split: Split) -> Vec<u8> {
        (0..self.colors.len() as u8).filter(|&c| self.colors[c as usize].split == split).collect()
    }

    pub fn color_name(&self, color: u8) -> &str {
        &self.colors[color as usize].name
    }

    pub fn color_by_name(&self, name: &str) -> Option<u8> {
        self.colors.iter().position(|c| c.name == name).map(|i| i as u8)
    }

    pub fn glyph_by_word(&self, word: &str) -> Option<u16> {
        self.categories
            .iter()
            .enumerate()
            .find_map(|(ci, c)| c.words.iter().position(|w| w == word).map(|wi| (ci * GLYPHS_PER_CATEGORY + wi) as u16))
    }

    /// Every token any prompt may contain, sorted.
    pub fn tokens(&self) -> Vec<String> {
        let mut set: BTreeSet<String> = FIXED_WORDS.split_whitespace().map(str::to_string).collect();
        set.extend(tokenize(SYSTEM_PROMPT));
        set.extend(self.colors.iter().map(|c| c.name.clone()));
        for c in &self.categories {
            set.extend(c.words.iter().cloned());
        }
        set.into_iter().collect()
    }

    /// Checks word uniqueness and that the render config covers every color and glyph.
    pub fn validate(&self, render: &RenderConfig) -> Result<(), Error> {
        let mut seen = BTreeSet::new();
        let fixed: BTreeSet<String> = FIXED_WORDS.split_whitespace().map(str::to_string).chain(tokenize(SYSTEM_PROMPT)).collect();
        let attribute_words = self.colors.iter().map(|c| &c.name).chain(self.categories.iter().flat_map(|c| c.words.iter()));
        for w in attribute_words {
            if fixed.contains(w) || !seen.insert(w.clone()) {
                return Err(Error::Vocab(format!("attribute word {w:?} is ambiguous")));
            }
        }
        if self.categories.iter().any(|c| c.words.len() != GLYPHS_PER_CATEGORY) {
            return Err(Error::Vocab(format!("every category needs {GLYPHS_PER_CATEGORY} words")));
        }
        if render.palette.len() < self.colors.len() {
            return Err(Error::Vocab(format!(
                "palette has no entry for color {:?}",
                self.colors[render.palette.len()].name
            )));
        }
        if render.glyphs.len() < self.glyph_count() {
            return Err(Error::Vocab(format!(
                "glyph atlas has no entry for word {:?}",
                self.glyph_word(render.glyphs.len() as u16)
            )));
        }
        Ok(())
    }

    pub fn render_config(&self) -> RenderConfig {
        let mut cfg = RenderConfig::standard(self.glyph_count());
        cfg.palette.truncate(self.colors.len().max(1));
        cfg
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

/// Lowercase whitespace tokenization with trailing punctuation stripped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_end_matches([',', '.', ';', ':']).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn cube_ref(style: CubeStyle, vocab: &Vocabulary, color: u8, slot: usize) -> String {
    match style {
        CubeStyle::ColorCube => format!("{} cube", vocab.color_name(color)),
        CubeStyle::FromLeft => format!("{} cube from the left", ORDINALS[slot]),
        CubeStyle::ColoredObject => format!("object colored {}", vocab.color_name(color)),
        CubeStyle::FromRight => format!("{} cube from the right", ORDINALS[NUM_CUBES - 1 - slot]),
    }
}

pub fn mark_ref(style: MarkStyle, vocab: &Vocabulary, glyph: u16, slot: usize) -> String {
    match style {
        MarkStyle::WordMark => format!("{} mark", vocab.glyph_word(glyph)),
        MarkStyle::Side => format!("{} mark", SIDES[slot]),
        MarkStyle::Picture => format!("picture of {}", vocab.glyph_word(glyph)),
        MarkStyle::Compass => format!("{} mark", COMPASS[slot]),
    }
}

pub fn instruction(cube: &str, mark: &str) -> String {
    format!("pick up the {cube} and place it onto the {mark}")
}

pub fn pick_prompt(cube: &str) -> String {
    format!("pick up the {cube} from the table")
}

pub fn place_prompt(mark: &str) -> String {
    format!("place the grasped object to the {mark} on the table")
}

/// What a cube referring expression pins down.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CubeTarget {
    Color(u8),
    /// Left-to-right slot index.
    Slot(usize),
}

/// What a mark referring expression pins down.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MarkTarget {
    Glyph(u16),
    Slot(usize),
}

/// The sub-task a prompt asks for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptIntent {
    Pick(CubeTarget),
    Place(MarkTarget),
    Whole(CubeTarget, MarkTarget),
}

fn strip<'a>(tokens: &'a [String], prefix: &[&str], suffix: &[&str]) -> Option<&'a [String]> {
    if tokens.len() < prefix.len() + suffix.len() {
        return None;
    }
    let (head, rest) = tokens.split_at(prefix.len());
    let (mid, tail) = rest.split_at(rest.len() - suffix.len());
    (head.iter().zip(prefix).all(|(a, b)| a == b) && tail.iter().zip(suffix).all(|(a, b)| a == b)).then_some(mid)
}

pub fn parse_cube_ref(vocab: &Vocabulary, tokens: &[String]) -> Option<CubeTarget> {
    let t: Vec<&str> = tokens.iter().map(String::as_str).collect();
    let ordinal = |w: &str| ORDINALS.iter().position(|o| *o == w);
    match t.as_slice() {
        [color, "cube"] => vocab.color_by_name(color).map(CubeTarget::Color),
        ["object", "colored", color] => vocab.color_by_name(color).map(CubeTarget::Color),
        [ord, "cube", "from", "the", "left"] => ordinal(ord).map(CubeTarget::Slot),
        [ord, "cube", "from", "the", "right"] => ordinal(ord).map(|k| CubeTarget::Slot(NUM_CUBES - 1 - k)),
        _ => None,
    }
}

pub fn parse_mark_ref(vocab: &Vocabulary, tokens: &[String]) -> Option<MarkTarget> {
    let t: Vec<&str> = tokens.iter().map(String::as_str).collect();
    match t.as_slice() {
        ["picture", "of", word] => vocab.glyph_by_word(word).map(MarkTarget::Glyph),
        [word, "mark"] => {
            if let Some(slot) = SIDES.iter().position(|s| s == word).or_else(|| COMPASS.iter().position(|s| s == word)) {
                Some(MarkTarget::Slot(slot))
            } else {
                vocab.glyph_by_word(word).map(MarkTarget::Glyph)
            }
        }
        _ => None,
    }
}

/// Parses a prompt built by [`instruction`], [`pick_prompt`] or
/// [`place_prompt`], optionally preceded by the system prompt.
pub fn parse_prompt(vocab: &Vocabulary, text: &str) -> Option<PromptIntent> {
    let mut tokens = tokenize(text);
    let system = tokenize(SYSTEM_PROMPT);
    if tokens.starts_with(&system) {
        tokens.drain(..system.len());
    }
    if let Some(x) = strip(&tokens, &["pick", "up", "the"], &["from", "the", "table"]) {
        if let Some(cube) = parse_cube_ref(vocab, x) {
            return Some(PromptIntent::Pick(cube));
        }
    }
    if let Some(y) = strip(&tokens, &["place", "the", "grasped", "object", "to", "the"], &["on", "the", "table"]) {
        return parse_mark_ref(vocab, y).map(PromptIntent::Place);
    }
    let body = strip(&tokens, &["pick", "up", "the"], &[])?;
    let split = body.windows(5).position(|w| w == ["and", "place", "it", "onto", "the"])?;
    let cube = parse_cube_ref(vocab, &body[..split])?;
    let mark = parse_mark_ref(vocab, &body[split + 5..])?;
    Some(PromptIntent::Whole(cube, mark))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::standard_palette;

    #[test]
    fn standard_vocabulary_is_consistent() {
        let v = Vocabulary::standard();
        v.validate(&v.render_config()).unwrap();
        assert_eq!(v.glyph_count(), 144);
        assert_eq!(v.colors_for(Split::Train).len(), 8);
        assert_eq!(v.colors_for(Split::Test).len(), 8);
        assert_eq!(v.glyph_by_word("seven"), Some(0));
        assert_eq!(v.glyph_word(v.glyph_by_word("scissors").unwrap()), "scissors");
        assert_eq!(standard_palette().len(), v.colors.len());
    }

    #[test]
    fn missing_glyph_is_named() {
        let v = Vocabulary::standard();
        let mut cfg = v.render_config();
        cfg.glyphs.pop();
        let err = v.validate(&cfg).unwrap_err().to_string();
        assert!(err.contains("scissors"), "{err}");
    }

    #[test]
    fn prompts_parse_back_to_their_targets() {
        let v = Vocabulary::standard();
        for style in [CubeStyle::ColorCube, CubeStyle::FromLeft, CubeStyle::ColoredObject, CubeStyle::FromRight] {
            for slot in 0..NUM_CUBES {
                let r = cube_ref(style, &v, 5, slot);
                let want = match style {
                    CubeStyle::ColorCube | CubeStyle::ColoredObject => CubeTarget::Color(5),
                    _ => CubeTarget::Slot(slot),
                };
                assert_eq!(parse_prompt(&v, &pick_prompt(&r)), Some(PromptIntent::Pick(want)), "{r}");
                let m = mark_ref(MarkStyle::Picture, &v, 40, 1);
                let whole = format!("{SYSTEM_PROMPT} {}", instruction(&r, &m));
                assert_eq!(parse_prompt(&v, &whole), Some(PromptIntent::Whole(want, MarkTarget::Glyph(40))));
            }
        }
        for (style, want) in [
            (MarkStyle::WordMark, MarkTarget::Glyph(17)),
            (MarkStyle::Side, MarkTarget::Slot(2)),
            (MarkStyle::Picture, MarkTarget::Glyph(17)),
            (MarkStyle::Compass, MarkTarget::Slot(2)),
        ] {
            assert_eq!(parse_prompt(&v, &place_prompt(&mark_ref(style, &v, 17, 2))), Some(PromptIntent::Place(want)));
        }
        assert_eq!(parse_prompt(&v, "pick up the purple elephant"), None);
        assert_eq!(parse_prompt(&v, ""), None);
    }

    #[test]
    fn system_prompt_tokens_are_plain_words() {
        let toks = tokenize(SYSTEM_PROMPT);
        assert_eq!(toks[0], "retrieve");
        assert!(toks.iter().all(|t| t.chars().all(|c| c.is_ascii_lowercase())));
        let v = Vocabulary::standard();
        let all = v.tokens();
        for t in tokenize(&instruction(&cube_ref(CubeStyle::FromRight, &v, 3, 1), &mark_ref(MarkStyle::Picture, &v, 5, 2))) {
            assert!(all.contains(&t), "{t}");
        }
    }
}
