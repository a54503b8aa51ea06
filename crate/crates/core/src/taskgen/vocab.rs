//! Fixed word-level vocabulary shared by every task family and the backbone.

use std::collections::HashMap;
use std::sync::OnceLock;

use crate::error::{DmeaError, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const SEP: TokenId = 1;
pub const EOS: TokenId = 2;
pub const GEN_BASE: TokenId = 3;
pub const NUM_GENERATION_TOKENS: usize = 8;

/// Template words shared by every slot-to-text domain.
pub const FUNCTION_WORDS: [&str; 5] = ["name", "is", "a", "with", "and"];

pub const INSTRUCTION_WORDS: [&str; 8] =
    ["describe", "copy", "reverse", "sort", "increment", "letters", "digits", "repeat"];

/// Lexicon of one slot-to-text domain. All words are unique across domains.
#[derive(Debug, Clone, Copy)]
pub struct DomainLexicon {
    pub name: &'static str,
    pub noun: &'static str,
    pub tag: &'static str,
    pub keys: [&'static str; 3],
    pub values: [[&'static str; 4]; 3],
    pub entities: [&'static str; 8],
}

pub const DOMAINS: [DomainLexicon; 8] = [
    DomainLexicon {
        name: "restaurant",
        noun: "restaurant",
        tag: "dining",
        keys: ["food", "area", "price"],
        values: [
            ["italian", "indian", "chinese", "french"],
            ["riverside", "centre", "north", "south"],
            ["cheap", "moderate", "expensive", "luxurious"],
        ],
        entities: ["bellini", "zizzi", "golden", "bistro", "lotus", "olive", "ginger", "saffron"],
    },
    DomainLexicon {
        name: "hotel",
        noun: "hotel",
        tag: "lodging",
        keys: ["stars", "parking", "wifi"],
        values: [
            ["one", "two", "three", "five"],
            ["garage", "street", "valet", "none"],
            ["fast", "free", "slow", "paid"],
        ],
        entities: ["hilton", "ritz", "marriott", "hyatt", "savoy", "plaza", "carlton", "regent"],
    },
    DomainLexicon {
        name: "tv",
        noun: "television",
        tag: "screen",
        keys: ["size", "resolution", "panel"],
        values: [
            ["small", "medium", "large", "huge"],
            ["hd", "fullhd", "uhd", "eightk"],
            ["lcd", "oled", "plasma", "qled"],
        ],
        entities: ["bravia", "aquos", "viera", "regza", "vizio", "roku", "hisense", "tcl"],
    },
    DomainLexicon {
        name: "laptop",
        noun: "laptop",
        tag: "computing",
        keys: ["memory", "battery", "weight"],
        values: [
            ["4gb", "8gb", "16gb", "32gb"],
            ["short", "standard", "extended", "allday"],
            ["light", "heavy", "portable", "bulky"],
        ],
        entities: ["tecra", "satellite", "xps", "thinkpad", "zenbook", "pavilion", "aspire", "envy"],
    },
    DomainLexicon {
        name: "pub",
        noun: "pub",
        tag: "drinking",
        keys: ["beer", "music", "family"],
        values: [
            ["ale", "lager", "stout", "cider"],
            ["jazz", "rock", "folk", "silent"],
            ["friendly", "adults", "kids", "mixed"],
        ],
        entities: ["eagle", "phoenix", "crown", "anchor", "wrestlers", "mill", "swan", "plough"],
    },
    DomainLexicon {
        name: "phone",
        noun: "phone",
        tag: "calling",
        keys: ["camera", "storage", "color"],
        values: [
            ["12mp", "48mp", "64mp", "108mp"],
            ["64gb", "128gb", "256gb", "512gb"],
            ["black", "white", "blue", "red"],
        ],
        entities: ["pixel", "galaxy", "iphone", "xperia", "nokia", "moto", "nexus", "lumia"],
    },
    DomainLexicon {
        name: "car",
        noun: "car",
        tag: "driving",
        keys: ["engine", "doors", "fuel"],
        values: [
            ["v6", "v8", "electric", "hybrid"],
            ["twodoor", "fourdoor", "fivedoor", "coupe"],
            ["petrol", "diesel", "hydrogen", "gas"],
        ],
        entities: ["civic", "corolla", "golf", "mustang", "model3", "focus", "fiesta", "prius"],
    },
    DomainLexicon {
        name: "movie",
        noun: "movie",
        tag: "watching",
        keys: ["genre", "rating", "length"],
        values: [
            ["comedy", "horror", "drama", "thriller"],
            ["pg", "pg13", "rated", "unrated"],
            ["brief", "long", "epic", "average"],
        ],
        entities: ["alien", "jaws", "heat", "up", "brave", "rocky", "psycho", "vertigo"],
    },
];

impl DomainLexicon {
    pub fn words(&self) -> impl Iterator<Item = &'static str> + '_ {
        std::iter::once(self.noun)
            .chain(std::iter::once(self.tag))
            .chain(self.keys.iter().copied())
            .chain(self.values.iter().flat_map(|v| v.iter().copied()))
            .chain(self.entities.iter().copied())
    }
}

pub fn letter_words() -> Vec<String> {
    (b'A'..=b'Z').map(|c| (c as char).to_string()).collect()
}

pub fn digit_words() -> Vec<String> {
    (0..10).map(|d| d.to_string()).collect()
}

#[derive(Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// The process-wide vocabulary.
    pub fn shared() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(Vocab::build)
    }

    fn build() -> Vocab {
        let mut words: Vec<String> = vec!["<pad>".into(), "<sep>".into(), "<eos>".into()];
        words.extend((0..NUM_GENERATION_TOKENS).map(|i| format!("<gen{i}>")));
        words.extend(FUNCTION_WORDS.iter().map(|w| w.to_string()));
        words.extend(INSTRUCTION_WORDS.iter().map(|w| w.to_string()));
        words.extend(letter_words());
        words.extend(digit_words());
        for d in &DOMAINS {
            words.extend(d.words().map(str::to_string));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            let prev = index.insert(w.clone(), i as TokenId);
            assert!(prev.is_none(), "duplicate vocabulary word {w}");
        }
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| DmeaError::InvalidInput(format!("unknown word `{word}`")))
    }

    pub fn ids(&self, words: &[&str]) -> Vec<TokenId> {
        words.iter().map(|w| self.id(w).expect("static word present")).collect()
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.words[id as usize]
    }

    pub fn generation_token(&self, slot: usize) -> TokenId {
        assert!(slot < NUM_GENERATION_TOKENS);
        GEN_BASE + slot as TokenId
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        id < GEN_BASE + NUM_GENERATION_TOKENS as TokenId
    }

    pub fn is_generation_token(&self, id: TokenId) -> bool {
        (GEN_BASE..GEN_BASE + NUM_GENERATION_TOKENS as TokenId).contains(&id)
    }

    /// Ids of every ordinary (non-reserved) word.
    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        GEN_BASE + NUM_GENERATION_TOKENS as TokenId..self.len() as TokenId
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn parse(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_unique_and_sized() {
        let v = Vocab::shared();
        assert!(v.len() > 200 && v.len() < 320, "vocab size {}", v.len());
        assert_eq!(v.word(PAD), "<pad>");
        assert_eq!(v.word(SEP), "<sep>");
        assert_eq!(v.word(EOS), "<eos>");
        assert_eq!(v.id("<gen0>").unwrap(), GEN_BASE);
    }

    #[test]
    fn domain_lexicons_are_disjoint() {
        let mut seen = std::collections::HashSet::new();
        for d in &DOMAINS {
            for w in d.words() {
                assert!(seen.insert(w), "{w} shared across domains");
                assert!(!FUNCTION_WORDS.contains(&w));
            }
        }
    }

    #[test]
    fn render_parse_round_trip() {
        let v = Vocab::shared();
        let ids = v.parse("name ritz stars five").unwrap();
        assert_eq!(v.render(&ids), "name ritz stars five");
        assert!(v.parse("not-a-word").is_err());
    }
}
