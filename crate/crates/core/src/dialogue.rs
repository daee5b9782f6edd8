//! Dialogue semantics and their plain-text linearization.
//!
//! One training sequence per system turn:
//!
//! ```text
//! User: i need a cheap restaurant.
//! System: bolaro kitchen is a cheap restaurant in the north.
//! User: what is the phone number?
//! Belief: restaurant pricerange = cheap
//! Database: 4 matches. name = bolaro kitchen, area = north, ...
//! Action: restaurant inform phone 01223 351880
//! System: the phone number of bolaro kitchen is 01223 351880.
//!
//! ```
//!
//! The sequence ends with a blank line. No separator tokens are used; all
//! structure is carried by the natural-text line prefixes.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::Vocab;
use crate::error::{AcnError, Result};
use crate::kb::{format_results, QueryResult};

pub const USER_MARKER: &str = "User:";
pub const SYSTEM_MARKER: &str = "System:";
pub const BELIEF_MARKER: &str = "Belief:";
pub const DATABASE_MARKER: &str = "Database:";
pub const ACTION_MARKER: &str = "Action:";
/// Placeholder for an empty belief or action.
pub const NONE: &str = "none";
/// Appended after the system line to close a turn.
pub const END_OF_TURN: &str = "\n";
/// Number of previous user/system exchanges kept in the context.
pub const MAX_HISTORY_TURNS: usize = 15;

/// Lowercases and collapses internal whitespace.
pub fn normalize_value(v: &str) -> String {
    v.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Cumulative `domain → slot → value` constraints.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BeliefState(BTreeMap<String, BTreeMap<String, String>>);

impl BeliefState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a lowercased triple, replacing any previous value.
    pub fn insert(&mut self, domain: &str, slot: &str, value: &str) {
        self.0
            .entry(domain.to_lowercase())
            .or_default()
            .insert(slot.to_lowercase(), value.to_lowercase());
    }

    pub fn get(&self, domain: &str, slot: &str) -> Option<&str> {
        self.0.get(domain)?.get(slot).map(String::as_str)
    }

    pub fn domain(&self, domain: &str) -> Option<&BTreeMap<String, String>> {
        self.0.get(domain)
    }

    pub fn domains(&self) -> impl DoubleEndedIterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    /// `(domain, slot, value)` in canonical order.
    pub fn triples(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.0.iter().flat_map(|(d, slots)| {
            slots
                .iter()
                .map(move |(s, v)| (d.as_str(), s.as_str(), v.as_str()))
        })
    }

    pub fn is_empty(&self) -> bool {
        self.0.values().all(BTreeMap::is_empty)
    }

    pub fn len(&self) -> usize {
        self.0.values().map(BTreeMap::len).sum()
    }

    /// Copy with every value normalized, for metric comparison.
    pub fn normalized(&self) -> Self {
        let mut out = Self::new();
        for (d, s, v) in self.triples() {
            out.insert(d, s, &normalize_value(v));
        }
        out
    }

    /// `"restaurant food = italian, restaurant area = north"` or `"none"`.
    pub fn to_text(&self) -> String {
        if self.is_empty() {
            return NONE.into();
        }
        self.triples()
            .map(|(d, s, v)| format!("{d} {s} = {v}"))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActType {
    Inform,
    Request,
    Book,
    Offer,
    Recommend,
    Nooffer,
    Greet,
    Bye,
}

impl ActType {
    pub const ALL: [ActType; 8] = [
        ActType::Inform,
        ActType::Request,
        ActType::Book,
        ActType::Offer,
        ActType::Recommend,
        ActType::Nooffer,
        ActType::Greet,
        ActType::Bye,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActType::Inform => "inform",
            ActType::Request => "request",
            ActType::Book => "book",
            ActType::Offer => "offer",
            ActType::Recommend => "recommend",
            ActType::Nooffer => "nooffer",
            ActType::Greet => "greet",
            ActType::Bye => "bye",
        }
    }
}

impl fmt::Display for ActType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActType {
    type Err = AcnError;

    fn from_str(s: &str) -> Result<Self> {
        ActType::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| AcnError::Parse(format!("unknown act type {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Act {
    pub domain: String,
    pub act: ActType,
    pub slot: String,
    pub value: Option<String>,
}

impl Act {
    pub fn new(domain: &str, act: ActType, slot: &str, value: Option<&str>) -> Self {
        Self {
            domain: domain.into(),
            act,
            slot: slot.into(),
            value: value.map(Into::into),
        }
    }
}

impl fmt::Display for Act {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.domain, self.act, self.slot)?;
        if let Some(v) = &self.value {
            write!(f, " {v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SystemAction(pub Vec<Act>);

impl SystemAction {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `"restaurant offer name bolaro kitchen; restaurant inform area north"`
    /// or `"none"`.
    pub fn to_text(&self) -> String {
        if self.0.is_empty() {
            return NONE.into();
        }
        self.0
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// One user utterance and everything the system produces in reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub user: String,
    pub belief: BeliefState,
    pub db: QueryResult,
    pub action: SystemAction,
    pub system: String,
}

/// Which part of a linearized turn a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    History,
    Belief,
    Database,
    Action,
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Spans {
    pub history: Range<usize>,
    pub belief: Range<usize>,
    pub db: Range<usize>,
    pub action: Range<usize>,
    pub response: Range<usize>,
}

impl Spans {
    pub fn ordered(&self) -> [(Segment, &Range<usize>); 5] {
        [
            (Segment::History, &self.history),
            (Segment::Belief, &self.belief),
            (Segment::Database, &self.db),
            (Segment::Action, &self.action),
            (Segment::Response, &self.response),
        ]
    }

    /// Checks that the spans tile `0..len` in order without overlap.
    pub fn validate(&self, len: usize) -> Result<()> {
        let mut at = 0;
        for (seg, r) in self.ordered() {
            if r.start < at {
                return Err(AcnError::Spans(format!(
                    "{seg:?} span {r:?} overlaps the previous segment ending at {at}"
                )));
            }
            if r.start > at {
                return Err(AcnError::Spans(format!(
                    "gap before {seg:?} span {r:?} (previous ends at {at})"
                )));
            }
            if r.end < r.start {
                return Err(AcnError::Spans(format!("{seg:?} span {r:?} is reversed")));
            }
            at = r.end;
        }
        if at != len {
            return Err(AcnError::Spans(format!(
                "spans cover {at} of {len} tokens"
            )));
        }
        Ok(())
    }
}

/// Token ids of one turn with its segment spans and per-token loss mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearizedTurn {
    pub token_ids: Vec<usize>,
    pub loss_mask: Vec<u8>,
    pub spans: Spans,
}

/// The database segment (including its marker) gets 0; everything else 1.
pub fn build_loss_mask(token_count: usize, spans: &Spans) -> Result<Vec<u8>> {
    spans.validate(token_count)?;
    let mut mask = vec![1u8; token_count];
    for m in &mut mask[spans.db.clone()] {
        *m = 0;
    }
    Ok(mask)
}

/// `"User: ...\nSystem: ...\n"` for the last `max_turns` exchanges.
pub fn history_text(history: &[DialogueTurn], max_turns: usize) -> String {
    let start = history.len().saturating_sub(max_turns);
    history[start..]
        .iter()
        .map(|t| format!("{USER_MARKER} {}\n{SYSTEM_MARKER} {}\n", t.user, t.system))
        .collect()
}

/// Context fed to the model before the belief: history plus the current
/// user line.
pub fn context_text(history: &[DialogueTurn], user: &str, max_turns: usize) -> String {
    format!("{}{USER_MARKER} {user}\n", history_text(history, max_turns))
}

fn segment_texts(
    history: &[DialogueTurn],
    current: &DialogueTurn,
    max_turns: usize,
) -> [(String, Option<(&'static str, String)>); 5] {
    [
        (context_text(history, &current.user, max_turns), None),
        (String::new(), Some((BELIEF_MARKER, format!(" {}\n", current.belief.to_text())))),
        (String::new(), Some((DATABASE_MARKER, format!(" {}\n", format_results(&current.db))))),
        (String::new(), Some((ACTION_MARKER, format!(" {}\n", current.action.to_text())))),
        (
            String::new(),
            Some((SYSTEM_MARKER, format!(" {}\n{END_OF_TURN}", current.system))),
        ),
    ]
}

/// Full text of one training sequence.
pub fn serialize_turn(history: &[DialogueTurn], current: &DialogueTurn, max_turns: usize) -> String {
    segment_texts(history, current, max_turns)
        .into_iter()
        .map(|(plain, marked)| match marked {
            None => plain,
            Some((m, body)) => format!("{m}{body}"),
        })
        .collect()
}

/// The pieces that are encoded independently when linearizing, in order.
/// Vocabulary training should see exactly these so no learned token spans a
/// segment boundary.
pub fn encoding_pieces(history: &[DialogueTurn], current: &DialogueTurn, max_turns: usize) -> Vec<String> {
    let mut out = Vec::new();
    for (plain, marked) in segment_texts(history, current, max_turns) {
        match marked {
            None => out.push(plain),
            Some((m, body)) => {
                out.push(m.to_string());
                out.push(body);
            }
        }
    }
    out
}

/// Encodes a turn segment by segment. Markers are encoded on their own so the
/// tokens of a prompt ending in a marker match the training tokens.
pub fn linearize_turn(
    vocab: &Vocab,
    history: &[DialogueTurn],
    current: &DialogueTurn,
    max_turns: usize,
) -> Result<LinearizedTurn> {
    let mut ids = Vec::new();
    let mut ranges = Vec::with_capacity(5);
    for (plain, marked) in segment_texts(history, current, max_turns) {
        let start = ids.len();
        match marked {
            None => ids.extend(vocab.encode(&plain)),
            Some((m, body)) => {
                ids.extend(vocab.encode(m));
                ids.extend(vocab.encode(&body));
            }
        }
        ranges.push(start..ids.len());
    }
    let mut it = ranges.into_iter();
    let spans = Spans {
        history: it.next().unwrap(),
        belief: it.next().unwrap(),
        db: it.next().unwrap(),
        action: it.next().unwrap(),
        response: it.next().unwrap(),
    };
    let loss_mask = build_loss_mask(ids.len(), &spans)?;
    Ok(LinearizedTurn {
        token_ids: ids,
        loss_mask,
        spans,
    })
}

/// Rest of the last line starting with `marker`.
fn marked_line<'a>(text: &'a str, marker: &'static str) -> Result<&'a str> {
    text.lines()
        .rev()
        .find_map(|l| l.trim_start().strip_prefix(marker))
        .map(str::trim)
        .ok_or(AcnError::MissingMarker { marker })
}

/// Clauses that tolerant parsing skipped.
pub type Skipped = Vec<String>;

fn parse_belief_clause(clause: &str) -> Option<(String, String, String)> {
    let (lhs, value) = clause.split_once(" = ")?;
    let mut words = lhs.split_whitespace();
    let (domain, slot) = (words.next()?, words.next()?);
    let value = value.trim();
    if words.next().is_some() || value.is_empty() {
        return None;
    }
    Some((domain.into(), slot.into(), value.into()))
}

/// Parses the last `Belief:` line, skipping malformed clauses.
pub fn parse_belief_tolerant(text: &str) -> Result<(BeliefState, Skipped)> {
    let body = marked_line(text, BELIEF_MARKER)?;
    let mut belief = BeliefState::new();
    let mut skipped = Vec::new();
    if body == NONE {
        return Ok((belief, skipped));
    }
    for clause in body.split(',').map(str::trim).filter(|c| !c.is_empty()) {
        match parse_belief_clause(clause) {
            Some((d, s, v)) => belief.insert(&d, &s, &v),
            None => skipped.push(clause.to_string()),
        }
    }
    Ok((belief, skipped))
}

/// Strict inverse of [`BeliefState::to_text`] on the last `Belief:` line.
pub fn parse_belief(text: &str) -> Result<BeliefState> {
    let (belief, skipped) = parse_belief_tolerant(text)?;
    match skipped.first() {
        None => Ok(belief),
        Some(c) => Err(AcnError::Parse(format!("malformed belief clause {c:?}"))),
    }
}

fn parse_act(clause: &str) -> Option<Act> {
    let mut words = clause.split_whitespace();
    let domain = words.next()?;
    let act = words.next()?.parse().ok()?;
    let slot = words.next()?;
    let rest: Vec<&str> = words.collect();
    let value = (!rest.is_empty()).then(|| rest.join(" "));
    Some(Act {
        domain: domain.into(),
        act,
        slot: slot.into(),
        value,
    })
}

pub fn parse_action_tolerant(text: &str) -> Result<(SystemAction, Skipped)> {
    let body = marked_line(text, ACTION_MARKER)?;
    let mut acts = Vec::new();
    let mut skipped = Vec::new();
    if body == NONE {
        return Ok((SystemAction::default(), skipped));
    }
    for clause in body.split(';').map(str::trim).filter(|c| !c.is_empty()) {
        match parse_act(clause) {
            Some(a) => acts.push(a),
            None => skipped.push(clause.to_string()),
        }
    }
    Ok((SystemAction(acts), skipped))
}

/// Strict inverse of [`SystemAction::to_text`] on the last `Action:` line.
pub fn parse_action(text: &str) -> Result<SystemAction> {
    let (action, skipped) = parse_action_tolerant(text)?;
    match skipped.first() {
        None => Ok(action),
        Some(c) => Err(AcnError::Parse(format!("malformed action clause {c:?}"))),
    }
}

/// Text of the last `System:` line.
pub fn extract_response(text: &str) -> Result<String> {
    marked_line(text, SYSTEM_MARKER).map(str::to_string)
}
