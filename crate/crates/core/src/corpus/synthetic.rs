//! Seeded synthetic corpus with four entity types and nested organisation names
//! (`University of Oslo` contains the location `Oslo`).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Sentence, Span, SubwordTokenizer};

const FIRST: &[&str] = &[
    "John", "Maria", "Ahmed", "Li", "Olga", "Pedro", "Anna", "Kenji", "Fatima", "Lucas",
];
const LAST: &[&str] = &[
    "Smith", "Garcia", "Khan", "Wei", "Petrova", "Silva", "Berg", "Tanaka", "Haddad", "Moreau",
];
const LOC: &[&str] = &[
    "Paris", "Berlin", "Madrid", "Oslo", "Cairo", "Lima", "Kyoto", "Boston", "Dublin", "Prague",
];
const ORG: &[&str] = &["Acme", "Globex", "Initech", "Umbrella", "Stark", "Wayne"];
const MISC: &[&str] = &[
    "German", "French", "Spanish", "Norwegian", "Egyptian", "Peruvian", "Japanese", "Irish",
];

#[derive(Clone, Copy)]
enum Slot {
    Word(&'static str),
    Per,
    Loc,
    Org,
    NestedOrg,
    Misc,
}

use Slot::*;

const TEMPLATES: &[&[Slot]] = &[
    &[Per, Word("visited"), Loc, Word("last"), Word("week"), Word(".")],
    &[Per, Word("works"), Word("for"), Org, Word(".")],
    &[Word("The"), Misc, Word("minister"), Word("met"), Per, Word("in"), Loc, Word(".")],
    &[Org, Word("announced"), Word("a"), Word("deal"), Word("with"), Org, Word(".")],
    &[Word("Officials"), Word("from"), Org, Word("said"), Word("the"), Misc, Word("team"), Word("will"), Word("travel"), Word("to"), Loc, Word(".")],
    &[Per, Word("and"), Per, Word("spoke"), Word("at"), Org, Word(".")],
    &[Word("Rain"), Word("fell"), Word("all"), Word("day"), Word(".")],
];

const NESTED_TEMPLATE: &[Slot] = &[Per, Word("studied"), Word("at"), NestedOrg, Word(".")];

struct Builder {
    words: Vec<String>,
    gold: Vec<Span>,
}

impl Builder {
    fn push(&mut self, word: &str) {
        self.words.push(word.to_string());
    }

    fn entity(&mut self, label: &str, words: &[&str]) -> usize {
        let start = self.words.len();
        for w in words {
            self.push(w);
        }
        self.gold.push(Span::typed(start, self.words.len(), label));
        start
    }
}

fn pick<R: Rng>(rng: &mut R, list: &[&'static str]) -> &'static str {
    list.choose(rng).expect("non-empty lexicon")
}

fn nested_org<R: Rng>(b: &mut Builder, rng: &mut R) {
    let loc = pick(rng, LOC);
    let start = b.words.len();
    if rng.gen_bool(0.5) {
        b.push("University");
        b.push("of");
        b.entity("LOC", &[loc]);
    } else {
        b.entity("LOC", &[loc]);
        b.push("City");
        b.push("Council");
    }
    b.gold.push(Span::typed(start, b.words.len(), "ORG"));
}

fn fill<R: Rng>(template: &[Slot], rng: &mut R) -> Builder {
    let mut b = Builder {
        words: Vec::new(),
        gold: Vec::new(),
    };
    for slot in template {
        match *slot {
            Word(w) => b.push(w),
            Per => {
                if rng.gen_bool(0.5) {
                    b.entity("PER", &[pick(rng, FIRST), pick(rng, LAST)]);
                } else {
                    b.entity("PER", &[pick(rng, FIRST)]);
                }
            }
            Loc => {
                b.entity("LOC", &[pick(rng, LOC)]);
            }
            Org => {
                if rng.gen_bool(0.3) {
                    nested_org(&mut b, rng);
                } else {
                    b.entity("ORG", &[pick(rng, ORG)]);
                }
            }
            NestedOrg => nested_org(&mut b, rng),
            Misc => {
                b.entity("MISC", &[pick(rng, MISC)]);
            }
        }
    }
    b
}

/// `n` sentences; every fifth one is guaranteed to carry a nested pair.
pub fn generate(n: usize, seed: u64, tokenizer: &dyn SubwordTokenizer) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentences = (0..n)
        .map(|id| {
            let template = if id % 5 == 0 {
                NESTED_TEMPLATE
            } else {
                TEMPLATES.choose(&mut rng).expect("templates")
            };
            let b = fill(template, &mut rng);
            Sentence::new(id, b.words, b.gold, tokenizer).expect("generated spans are valid")
        })
        .collect();
    Dataset::new(sentences)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::WHITESPACE;

    #[test]
    fn fifty_sentences_have_four_types_and_nesting() {
        let d = generate(50, 7, &WHITESPACE);
        assert_eq!(d.len(), 50);
        assert_eq!(d.type_inventory(), ["LOC", "MISC", "ORG", "PER"]);
        let nested = d
            .sentences()
            .iter()
            .filter(|s| s.has_overlapping_gold())
            .count();
        assert!(nested >= 10, "{nested}");
        assert!(d.max_gold_len() <= 3);
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(generate(20, 3, &WHITESPACE), generate(20, 3, &WHITESPACE));
        assert_ne!(generate(20, 3, &WHITESPACE), generate(20, 4, &WHITESPACE));
    }
}
