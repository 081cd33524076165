//! The 13-tag aspect/sentiment alphabet and span conversion.
//!
//! Tags combine a BIOES position with a sentiment polarity. Index order is
//! fixed: `O`, then `B/I/E/S` for `POS`, then `NEG`, then `NEU`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_TAGS: usize = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sentiment {
    #[serde(rename = "POS")]
    Pos,
    #[serde(rename = "NEG")]
    Neg,
    #[serde(rename = "NEU")]
    Neu,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Pos, Sentiment::Neg, Sentiment::Neu];

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Pos => "POS",
            Sentiment::Neg => "NEG",
            Sentiment::Neu => "NEU",
        }
    }

    fn offset(self) -> usize {
        match self {
            Sentiment::Pos => 0,
            Sentiment::Neg => 1,
            Sentiment::Neu => 2,
        }
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sentiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "POS" => Ok(Sentiment::Pos),
            "NEG" => Ok(Sentiment::Neg),
            "NEU" => Ok(Sentiment::Neu),
            _ => Err(Error::contract(format!("unknown sentiment `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Position {
    B,
    I,
    E,
    S,
}

impl Position {
    const ALL: [Position; 4] = [Position::B, Position::I, Position::E, Position::S];
}

/// One of the 13 labels: `O` or a position crossed with a sentiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    O,
    Aspect(Position, Sentiment),
}

impl Tag {
    pub fn index(self) -> usize {
        match self {
            Tag::O => 0,
            Tag::Aspect(p, s) => {
                let pos = match p {
                    Position::B => 0,
                    Position::I => 1,
                    Position::E => 2,
                    Position::S => 3,
                };
                1 + 4 * s.offset() + pos
            }
        }
    }

    pub fn from_index(index: usize) -> Option<Tag> {
        match index {
            0 => Some(Tag::O),
            1..=12 => {
                let k = index - 1;
                Some(Tag::Aspect(Position::ALL[k % 4], Sentiment::ALL[k / 4]))
            }
            _ => None,
        }
    }

    pub fn all() -> impl Iterator<Item = Tag> {
        (0..NUM_TAGS).map(|i| Tag::from_index(i).expect("index in range"))
    }

    pub fn sentiment(self) -> Option<Sentiment> {
        match self {
            Tag::O => None,
            Tag::Aspect(_, s) => Some(s),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::O => f.write_str("O"),
            Tag::Aspect(p, s) => write!(f, "{p:?}-{s}"),
        }
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "O" {
            return Ok(Tag::O);
        }
        let bad = || Error::contract(format!("unknown tag `{s}`"));
        let (p, sent) = s.split_once('-').ok_or_else(bad)?;
        let p = match p {
            "B" => Position::B,
            "I" => Position::I,
            "E" => Position::E,
            "S" => Position::S,
            _ => return Err(bad()),
        };
        let sent = sent.parse::<Sentiment>().map_err(|_| bad())?;
        Ok(Tag::Aspect(p, sent))
    }
}

/// An aspect mention: inclusive token range plus polarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AspectSpan {
    pub start: usize,
    pub end: usize,
    pub sentiment: Sentiment,
}

impl AspectSpan {
    pub fn new(start: usize, end: usize, sentiment: Sentiment) -> Self {
        AspectSpan { start, end, sentiment }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn spans_to_tags(len: usize, spans: &[AspectSpan]) -> Result<Vec<Tag>> {
    let mut tags = vec![Tag::O; len];
    let mut prev_end: Option<usize> = None;
    for sp in spans {
        let err = |reason: &str| Error::Annotation {
            start: sp.start,
            end: sp.end,
            reason: reason.to_string(),
        };
        if sp.start > sp.end {
            return Err(err("has start after end"));
        }
        if sp.end >= len {
            return Err(err(&format!("exceeds sentence length {len}")));
        }
        if prev_end.is_some_and(|e| sp.start <= e) {
            return Err(err("overlaps or precedes the previous span"));
        }
        prev_end = Some(sp.end);
        let s = sp.sentiment;
        if sp.start == sp.end {
            tags[sp.start] = Tag::Aspect(Position::S, s);
        } else {
            tags[sp.start] = Tag::Aspect(Position::B, s);
            for t in &mut tags[sp.start + 1..sp.end] {
                *t = Tag::Aspect(Position::I, s);
            }
            tags[sp.end] = Tag::Aspect(Position::E, s);
        }
    }
    Ok(tags)
}

/// Position of the first violation of the BIOES grammar, if any.
///
/// Runs are `B-s (I-s)* E-s` with one sentiment; `S-*` and `O` stand alone.
/// A run left open at the end of the sequence is reported at its last token.
pub fn first_invalid(tags: &[Tag]) -> Option<(usize, &'static str)> {
    let mut open: Option<Sentiment> = None;
    for (t, &tag) in tags.iter().enumerate() {
        match (open, tag) {
            (Some(s), Tag::Aspect(Position::I, x)) if x == s => {}
            (Some(s), Tag::Aspect(Position::E, x)) if x == s => open = None,
            (Some(_), _) => return Some((t, "open aspect run must continue with I or E of the same sentiment")),
            (None, Tag::Aspect(Position::B, s)) => open = Some(s),
            (None, Tag::Aspect(Position::I | Position::E, _)) => {
                return Some((t, "I or E without an open aspect run"))
            }
            (None, _) => {}
        }
    }
    if open.is_some() {
        return Some((tags.len() - 1, "aspect run is never closed"));
    }
    None
}

pub fn is_valid(tags: &[Tag]) -> bool {
    first_invalid(tags).is_none()
}

pub fn tags_to_spans(tags: &[Tag]) -> Result<Vec<AspectSpan>> {
    if let Some((position, reason)) = first_invalid(tags) {
        return Err(Error::Validity {
            position,
            reason: reason.to_string(),
        });
    }
    let mut spans = Vec::new();
    let mut start = 0;
    for (t, &tag) in tags.iter().enumerate() {
        match tag {
            Tag::Aspect(Position::S, s) => spans.push(AspectSpan::new(t, t, s)),
            Tag::Aspect(Position::B, _) => start = t,
            Tag::Aspect(Position::E, s) => spans.push(AspectSpan::new(start, t, s)),
            _ => {}
        }
    }
    Ok(spans)
}

/// Deterministic left-to-right repair into a valid sequence.
///
/// * `I`/`E` with no open run opens one (as `B`); if nothing continues it,
///   it is closed as `S`.
/// * An open run followed by `O`, `B`, `S` or the end of input is closed by
///   rewriting its last token (`I`→`E`, `B`→`S`).
/// * Tokens inside a run take the run's first sentiment.
pub fn repair(tags: &[Tag]) -> Vec<Tag> {
    fn close(out: &mut [Tag]) {
        if let Some(last) = out.last_mut() {
            *last = match *last {
                Tag::Aspect(Position::B, s) => Tag::Aspect(Position::S, s),
                Tag::Aspect(Position::I, s) => Tag::Aspect(Position::E, s),
                other => other,
            };
        }
    }

    let mut out: Vec<Tag> = Vec::with_capacity(tags.len());
    let mut open: Option<Sentiment> = None;
    for &tag in tags {
        match (open, tag) {
            (Some(s), Tag::Aspect(Position::I, _)) => out.push(Tag::Aspect(Position::I, s)),
            (Some(s), Tag::Aspect(Position::E, _)) => {
                out.push(Tag::Aspect(Position::E, s));
                open = None;
            }
            (None, Tag::Aspect(Position::B | Position::I | Position::E, s)) => {
                out.push(Tag::Aspect(Position::B, s));
                open = Some(s);
            }
            (Some(_), Tag::Aspect(Position::B, s)) => {
                close(&mut out);
                out.push(Tag::Aspect(Position::B, s));
                open = Some(s);
            }
            (Some(_), other) => {
                close(&mut out);
                out.push(other);
                open = None;
            }
            (None, other) => out.push(other),
        }
    }
    if open.is_some() {
        close(&mut out);
    }
    out
}

pub fn tags_from_indices(indices: &[usize]) -> Result<Vec<Tag>> {
    indices
        .iter()
        .map(|&i| Tag::from_index(i).ok_or_else(|| Error::contract(format!("tag index {i} out of range"))))
        .collect()
}

pub fn tag_indices(tags: &[Tag]) -> Vec<usize> {
    tags.iter().map(|t| t.index()).collect()
}

/// Allowed-transition matrix for the BIOES grammar over
/// `NUM_TAGS + 2` states (the last two are START and STOP).
pub fn allowed_transitions() -> Vec<Vec<bool>> {
    let start = NUM_TAGS;
    let stop = NUM_TAGS + 1;
    let n = NUM_TAGS + 2;
    let mut allowed = vec![vec![false; n]; n];
    let opens = |t: Tag| matches!(t, Tag::Aspect(Position::B | Position::I, _));
    for from in 0..n {
        for to in 0..n {
            allowed[from][to] = match (from, to) {
                (_, s) if s == start => false,
                (f, _) if f == stop => false,
                (f, s) if f == start && s == stop => false,
                (f, t) if f == start => {
                    !matches!(Tag::from_index(t), Some(Tag::Aspect(Position::I | Position::E, _)))
                }
                (f, s) if s == stop => !opens(Tag::from_index(f).expect("tag")),
                (f, t) => {
                    let (a, b) = (Tag::from_index(f).expect("tag"), Tag::from_index(t).expect("tag"));
                    match (a, b) {
                        (Tag::Aspect(Position::B | Position::I, s), Tag::Aspect(Position::I | Position::E, x)) => s == x,
                        (Tag::Aspect(Position::B | Position::I, _), _) => false,
                        (_, Tag::Aspect(Position::I | Position::E, _)) => false,
                        _ => true,
                    }
                }
            };
        }
    }
    allowed
}

#[cfg(test)]
mod tests {
    use super::*;
    use Sentiment::*;

    fn parse(s: &str) -> Vec<Tag> {
        s.split_whitespace().map(|t| t.parse().unwrap()).collect()
    }

    #[test]
    fn index_mapping_is_a_bijection() {
        let names: Vec<String> = Tag::all().map(|t| t.to_string()).collect();
        assert_eq!(
            names,
            [
                "O", "B-POS", "I-POS", "E-POS", "S-POS", "B-NEG", "I-NEG", "E-NEG", "S-NEG", "B-NEU", "I-NEU",
                "E-NEU", "S-NEU"
            ]
        );
        for (i, t) in Tag::all().enumerate() {
            assert_eq!(t.index(), i);
            assert_eq!(t.to_string().parse::<Tag>().unwrap(), t);
        }
        assert!(Tag::from_index(13).is_none());
        assert!("B-XXX".parse::<Tag>().is_err());
    }

    #[test]
    fn great_food_dreadful_service() {
        // Great food but the service is dreadful .
        let spans = [AspectSpan::new(1, 1, Pos), AspectSpan::new(4, 4, Neg)];
        let tags = spans_to_tags(8, &spans).unwrap();
        assert_eq!(tags, parse("O S-POS O O S-NEG O O O"));
        assert_eq!(tags_to_spans(&tags).unwrap(), spans);
    }

    #[test]
    fn multi_token_and_empty() {
        assert_eq!(spans_to_tags(3, &[]).unwrap(), parse("O O O"));
        assert_eq!(
            spans_to_tags(4, &[AspectSpan::new(0, 2, Neu)]).unwrap(),
            parse("B-NEU I-NEU E-NEU O")
        );
        assert!(tags_to_spans(&parse("O O")).unwrap().is_empty());
    }

    #[test]
    fn bad_annotations() {
        assert!(matches!(
            spans_to_tags(3, &[AspectSpan::new(1, 3, Pos)]),
            Err(Error::Annotation { start: 1, end: 3, .. })
        ));
        let overlapping = [AspectSpan::new(0, 1, Pos), AspectSpan::new(1, 2, Neg)];
        assert!(matches!(spans_to_tags(4, &overlapping), Err(Error::Annotation { start: 1, end: 2, .. })));
    }

    #[test]
    fn validity_errors_name_position() {
        let err = tags_to_spans(&parse("O I-POS O")).unwrap_err();
        assert!(matches!(err, Error::Validity { position: 1, .. }));
        let err = tags_to_spans(&parse("B-POS E-NEG")).unwrap_err();
        assert!(matches!(err, Error::Validity { position: 1, .. }));
        let err = tags_to_spans(&parse("O B-POS")).unwrap_err();
        assert!(matches!(err, Error::Validity { position: 1, .. }));
    }

    #[test]
    fn repair_examples() {
        let valid = parse("B-POS I-POS E-POS O S-NEG");
        assert_eq!(repair(&valid), valid);
        assert_eq!(repair(&parse("I-POS O")), parse("S-POS O"));
        assert_eq!(repair(&parse("B-POS I-NEG O")), parse("B-POS E-POS O"));
        assert_eq!(repair(&parse("B-NEU")), parse("S-NEU"));
        assert_eq!(repair(&parse("E-POS E-NEG")), parse("B-POS E-POS"));
        assert_eq!(repair(&parse("B-POS B-NEG I-NEG")), parse("S-POS B-NEG E-NEG"));
        assert!(repair(&[]).is_empty());
    }

    #[test]
    fn allowed_matrix_agrees_with_validity() {
        let allowed = allowed_transitions();
        for a in Tag::all() {
            for b in Tag::all() {
                let ok = allowed[NUM_TAGS][a.index()]
                    && allowed[a.index()][b.index()]
                    && allowed[b.index()][NUM_TAGS + 1];
                assert_eq!(ok, is_valid(&[a, b]), "{a} {b}");
            }
        }
    }
}
