//! Fixed 256-entry vocabulary of the toy world.

use std::collections::HashMap;
use std::sync::OnceLock;

pub type TokenId = u32;

pub const VOCAB_SIZE: usize = 256;
pub const PAD: TokenId = 0;
/// Placeholder id carried by visual positions.
pub const IMG: TokenId = 1;
/// End-of-answer marker emitted after every answer.
pub const EOA: TokenId = 2;

const SPECIAL: [&str; 3] = ["<pad>", "<img>", "<eoa>"];

const WORDS: &[&str] = &[
    "?", ":", ",", "what", "which", "is", "at", "in", "row", "col", "column", "and", "the", "tell", "me",
    "does", "cell", "have", "color", "shape", "describe", "it", "object", "there", "of", "like", "likes",
    "fruit", "liked", "by", "where", "live", "lives", "city", "home", "to", "0", "1", "2", "3",
    // colours
    "red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange",
    // shapes
    "circle", "square", "triangle",
    // fruits
    "apple", "banana", "cherry", "grape", "lemon", "mango", "peach", "plum",
    // cities
    "paris", "rome", "oslo", "lima", "cairo", "tokyo", "delhi", "quito",
];

/// Number of entity tokens `e0`, `e1`, ….
pub const NUM_ENTITIES: usize = 96;

struct Table {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

fn table() -> &'static Table {
    static TABLE: OnceLock<Table> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut words: Vec<String> = SPECIAL.iter().chain(WORDS).map(|s| s.to_string()).collect();
        words.extend((0..NUM_ENTITIES).map(|k| format!("e{k}")));
        assert!(words.len() <= VOCAB_SIZE);
        while words.len() < VOCAB_SIZE {
            words.push(format!("<unused{}>", words.len()));
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as TokenId)).collect();
        Table { words, index }
    })
}

/// Token id of a known word.
///
/// # Panics
/// On words outside the vocabulary; templates are static so this is a
/// programming error.
pub fn id(word: &str) -> TokenId {
    *table()
        .index
        .get(word)
        .unwrap_or_else(|| panic!("word `{word}` is not in the vocabulary"))
}

pub fn lookup(word: &str) -> Option<TokenId> {
    table().index.get(word).copied()
}

pub fn word(id: TokenId) -> &'static str {
    table().words.get(id as usize).map_or("<oov>", String::as_str)
}

pub fn entity(k: usize) -> TokenId {
    id(&format!("e{k}"))
}

pub fn tokenize(text: &str) -> Vec<TokenId> {
    text.split_whitespace().map(id).collect()
}

pub fn detokenize(ids: &[TokenId]) -> String {
    ids.iter().map(|&i| word(i)).collect::<Vec<_>>().join(" ")
}
