//! Seeded generator for small review-style corpora.
//!
//! Sentiment is carried by opinion words that sit a few tokens away from the
//! aspect, sometimes behind a negation or a contrastive clause, so a tagger
//! has to look at context to label the aspect correctly.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Example;
use crate::tagging::{AspectSpan, Sentiment};

const ASPECTS: &[&str] = &[
    "food",
    "service",
    "staff",
    "pizza",
    "wine list",
    "battery life",
    "screen",
    "keyboard",
    "price",
    "hard drive",
    "customer support team",
    "garlic bread",
    "menu",
    "touch pad",
];

const POSITIVE: &[&str] = &["great", "excellent", "amazing", "fantastic", "good"];
const NEGATIVE: &[&str] = &["terrible", "awful", "dreadful", "bad", "slow"];
const NEUTRAL: &[&str] = &["average", "okay", "standard", "typical"];

const LIKE: &[&str] = &["loved", "enjoyed", "liked"];
const DISLIKE: &[&str] = &["hated", "disliked"];
const MENTION: &[&str] = &["noticed", "checked", "saw"];

const FILLERS: &[&str] = &[
    "we went there on a friday night .",
    "i bought it last month .",
    "my friend recommended this place .",
    "it arrived in a small box .",
    "we will see next time .",
];

struct Builder {
    tokens: Vec<String>,
    spans: Vec<AspectSpan>,
}

impl Builder {
    fn new() -> Self {
        Builder {
            tokens: Vec::new(),
            spans: Vec::new(),
        }
    }

    fn words(&mut self, text: &str) {
        self.tokens.extend(text.split_whitespace().map(str::to_string));
    }

    fn aspect(&mut self, text: &str, sentiment: Sentiment) {
        let start = self.tokens.len();
        self.words(text);
        self.spans.push(AspectSpan::new(start, self.tokens.len() - 1, sentiment));
    }

    fn finish(self) -> Example {
        Example::new(self.tokens, self.spans).expect("generated spans are ordered and in range")
    }
}

fn opinion(rng: &mut ChaCha8Rng, s: Sentiment) -> &'static str {
    let pool = match s {
        Sentiment::Pos => POSITIVE,
        Sentiment::Neg => NEGATIVE,
        Sentiment::Neu => NEUTRAL,
    };
    pool.choose(rng).expect("non-empty pool")
}

fn sentiment(rng: &mut ChaCha8Rng) -> Sentiment {
    *Sentiment::ALL.choose(rng).expect("three sentiments")
}

fn two_aspects(rng: &mut ChaCha8Rng) -> (&'static str, &'static str) {
    let a = *ASPECTS.choose(rng).expect("aspects");
    loop {
        let b = *ASPECTS.choose(rng).expect("aspects");
        if b != a {
            return (a, b);
        }
    }
}

fn sentence(rng: &mut ChaCha8Rng) -> Example {
    let mut b = Builder::new();
    let a = *ASPECTS.choose(rng).expect("aspects");
    match rng.random_range(0..7) {
        // the A is ADJ .
        0 => {
            let s = sentiment(rng);
            b.words("the");
            b.aspect(a, s);
            b.words(&format!("is {} .", opinion(rng, s)));
        }
        // ADJ A .
        1 => {
            let s = sentiment(rng);
            b.words(opinion(rng, s));
            b.aspect(a, s);
            b.words(".");
        }
        // the A was not POS-ADJ .   (negated praise is a complaint)
        2 => {
            b.words("the");
            b.aspect(a, Sentiment::Neg);
            b.words(&format!("was not {} at all .", opinion(rng, Sentiment::Pos)));
        }
        // i VERB the A .
        3 => {
            let (s, pool) = match rng.random_range(0..3) {
                0 => (Sentiment::Pos, LIKE),
                1 => (Sentiment::Neg, DISLIKE),
                _ => (Sentiment::Neu, MENTION),
            };
            b.words(&format!("i {} the", pool.choose(rng).expect("verbs")));
            b.aspect(a, s);
            b.words(".");
        }
        // the A is ADJ but the B is ADJ .
        4 => {
            let (a, c) = two_aspects(rng);
            let s1 = sentiment(rng);
            let s2 = sentiment(rng);
            b.words("the");
            b.aspect(a, s1);
            b.words(&format!("is {} but the", opinion(rng, s1)));
            b.aspect(c, s2);
            b.words(&format!("is {} .", opinion(rng, s2)));
        }
        // ADJ A and ADJ B .
        5 => {
            let (a, c) = two_aspects(rng);
            let s1 = sentiment(rng);
            let s2 = sentiment(rng);
            b.words(opinion(rng, s1));
            b.aspect(a, s1);
            b.words(&format!("and {}", opinion(rng, s2)));
            b.aspect(c, s2);
            b.words(".");
        }
        _ => b.words(FILLERS.choose(rng).expect("fillers")),
    }
    b.finish()
}

/// `n` sentences drawn under `seed`.
pub fn generate(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sentence(&mut rng)).collect()
}
