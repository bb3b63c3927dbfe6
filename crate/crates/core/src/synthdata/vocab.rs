//! Token vocabulary with a fixed special-id prefix and seeded role assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, shuffle};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const IMG: TokenId = 3;
pub const SEP: TokenId = 4;
pub const NUM_SPECIAL: usize = 5;
pub const MIN_VOCAB: usize = 16;

pub const NUM_CLASSES: usize = 4;
pub const NOUNS_PER_CLASS: usize = 12;
pub const VERBS_PER_CLASS: usize = 8;
pub const ADJS_PER_CLASS: usize = 6;
pub const NUM_GLYPHS: usize = 16;

pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const QUADRANTS: [&str; 4] = ["NW", "NE", "SW", "SE"];
const INSTRUCTIONS: [&str; 6] = ["describe", "what", "color", "shape", "read", "where"];
const FUNCTION_WORDS: [&str; 4] = ["the", "a", "and", ","];

/// Ids of every role the generators use. Only present when the vocabulary
/// is large enough to host the whole grammar.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub describe: TokenId,
    pub what: TokenId,
    pub color_q: TokenId,
    pub shape_q: TokenId,
    pub read: TokenId,
    pub where_q: TokenId,
    pub shapes: Vec<TokenId>,
    pub colors: Vec<TokenId>,
    pub quadrants: Vec<TokenId>,
    pub glyphs: Vec<TokenId>,
    pub determiners: Vec<TokenId>,
    pub and: TokenId,
    pub comma: TokenId,
    /// `nouns[class][j]`
    pub nouns: Vec<Vec<TokenId>>,
    pub verbs: Vec<Vec<TokenId>>,
    pub adjectives: Vec<Vec<TokenId>>,
}

impl Layout {
    pub const REQUIRED: usize = INSTRUCTIONS.len()
        + SHAPES.len()
        + COLORS.len()
        + QUADRANTS.len()
        + NUM_GLYPHS
        + FUNCTION_WORDS.len()
        + NUM_CLASSES * (NOUNS_PER_CLASS + VERBS_PER_CLASS + ADJS_PER_CLASS);
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
    layout: Option<Layout>,
}

/// Builds a vocabulary of `size` ids. Specials occupy ids 0..5; the seed
/// decides which remaining ids carry which grammar role.
pub fn build_vocabulary(size: usize, seed: u64) -> Result<Vocabulary> {
    if size < MIN_VOCAB {
        return Err(Error::VocabularyTooSmall { size, min: MIN_VOCAB });
    }
    let mut symbols: Vec<String> = ["<pad>", "<bos>", "<eos>", "<img>", "<sep>"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    symbols.resize(size, String::new());

    let mut free: Vec<TokenId> = (NUM_SPECIAL as TokenId..size as TokenId).collect();
    let layout = if free.len() >= Layout::REQUIRED {
        shuffle(&mut free, &mut rng_for(seed, "vocabulary"));
        let mut it = free.iter().copied();
        let mut take = |name: String, symbols: &mut Vec<String>| {
            let id = it.next().expect("capacity checked");
            symbols[id as usize] = name;
            id
        };
        let mut named = |names: &[&str], symbols: &mut Vec<String>| {
            names.iter().map(|n| take(n.to_string(), symbols)).collect::<Vec<_>>()
        };
        let instr = named(&INSTRUCTIONS, &mut symbols);
        let shapes = named(&SHAPES, &mut symbols);
        let colors = named(&COLORS, &mut symbols);
        let quadrants = named(&QUADRANTS, &mut symbols);
        let func = named(&FUNCTION_WORDS, &mut symbols);
        let glyph_names: Vec<String> = (0..NUM_GLYPHS).map(|g| format!("glyph{g}")).collect();
        let glyph_refs: Vec<&str> = glyph_names.iter().map(String::as_str).collect();
        let glyphs = named(&glyph_refs, &mut symbols);
        let mut class_words = |prefix: &str, per: usize, symbols: &mut Vec<String>| {
            (0..NUM_CLASSES)
                .map(|c| {
                    let names: Vec<String> = (0..per).map(|j| format!("{prefix}{c}_{j}")).collect();
                    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                    named(&refs, symbols)
                })
                .collect::<Vec<_>>()
        };
        let nouns = class_words("noun", NOUNS_PER_CLASS, &mut symbols);
        let verbs = class_words("verb", VERBS_PER_CLASS, &mut symbols);
        let adjectives = class_words("adj", ADJS_PER_CLASS, &mut symbols);
        Some(Layout {
            describe: instr[0],
            what: instr[1],
            color_q: instr[2],
            shape_q: instr[3],
            read: instr[4],
            where_q: instr[5],
            shapes,
            colors,
            quadrants,
            glyphs,
            determiners: func[..2].to_vec(),
            and: func[2],
            comma: func[3],
            nouns,
            verbs,
            adjectives,
        })
    } else {
        None
    };
    for (id, s) in symbols.iter_mut().enumerate() {
        if s.is_empty() {
            *s = format!("w{id}");
        }
    }
    Ok(Vocabulary { symbols, layout })
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, symbol: &str) -> Option<TokenId> {
        self.symbols.iter().position(|s| s == symbol).map(|i| i as TokenId)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < NUM_SPECIAL
    }

    /// The grammar layout, or an error when the vocabulary cannot host it.
    pub fn layout(&self) -> Result<&Layout> {
        self.layout.as_ref().ok_or(Error::VocabularyTooSmall {
            size: self.size(),
            min: NUM_SPECIAL + Layout::REQUIRED,
        })
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.symbol(id).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn specials_come_first() {
        let v = build_vocabulary(256, 7).unwrap();
        assert_eq!(v.size(), 256);
        assert_eq!(v.symbol(PAD), Some("<pad>"));
        assert_eq!(v.symbol(BOS), Some("<bos>"));
        assert_eq!(v.symbol(EOS), Some("<eos>"));
        assert_eq!(v.symbol(IMG), Some("<img>"));
        assert_eq!(v.symbol(SEP), Some("<sep>"));
        let uniq: HashSet<_> = v.symbols().iter().collect();
        assert_eq!(uniq.len(), 256);
    }

    #[test]
    fn same_seed_same_table() {
        let a = build_vocabulary(256, 7).unwrap();
        let b = build_vocabulary(256, 7).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        let c = build_vocabulary(256, 8).unwrap();
        assert_ne!(a.symbols(), c.symbols());
    }

    #[test]
    fn tiny_vocabulary_rejected() {
        let err = build_vocabulary(8, 7).unwrap_err();
        assert!(err.to_string().contains("vocabulary too small"));
        // 16 ids is a valid vocabulary but cannot host the task grammar.
        let v = build_vocabulary(16, 7).unwrap();
        assert!(v.layout().is_err());
    }

    #[test]
    fn layout_ids_are_non_special_and_distinct() {
        let v = build_vocabulary(256, 3).unwrap();
        let l = v.layout().unwrap();
        let mut all = vec![l.describe, l.what, l.color_q, l.shape_q, l.read, l.where_q, l.and, l.comma];
        all.extend(&l.shapes);
        all.extend(&l.colors);
        all.extend(&l.quadrants);
        all.extend(&l.glyphs);
        all.extend(&l.determiners);
        for c in 0..NUM_CLASSES {
            all.extend(&l.nouns[c]);
            all.extend(&l.verbs[c]);
            all.extend(&l.adjectives[c]);
        }
        assert_eq!(all.len(), Layout::REQUIRED);
        let uniq: HashSet<_> = all.iter().collect();
        assert_eq!(uniq.len(), all.len());
        assert!(all.iter().all(|&id| !Vocabulary::is_special(id) && (id as usize) < 256));
    }
}
