//! Deterministic synthetic restaurant/hotel dialogues and corpus file I/O.
//!
//! Entity names come from three disjoint pools: `train` and `eval` for
//! fine-tuning and held-out evaluation, and `pretrain` for the plain-text
//! backbone corpus. All pools are drawn in one pass so disjointness holds by
//! construction.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dialogue::{
    encoding_pieces, history_text, Act, ActType, BeliefState, DialogueTurn, SystemAction, MAX_HISTORY_TURNS,
};
use crate::error::{AcnError, Result};
use crate::kb::{Database, EntityRecord, QueryResult, DONTCARE};

pub const FORMAT_VERSION: u32 = 1;
pub const ENTITIES_PER_DOMAIN: usize = 40;
pub const DOMAINS: [&str; 2] = ["restaurant", "hotel"];
pub const REQUESTABLE: [&str; 2] = ["phone", "address"];
const MAX_USER_TURNS: usize = 4;
const POOL_SEED: u64 = 0x5eed_ac17;
const RENAME_SEED: u64 = 0x5eed_0c0b;

const FOODS: [&str; 8] = [
    "italian", "chinese", "indian", "thai", "french", "british", "mexican", "korean",
];
const AREAS: [&str; 5] = ["north", "south", "east", "west", "centre"];
const PRICES: [&str; 3] = ["cheap", "moderate", "expensive"];
const STARS: [&str; 4] = ["2", "3", "4", "5"];
const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const RESTAURANT_SUFFIX: [&str; 4] = ["kitchen", "bistro", "grill", "diner"];
const HOTEL_SUFFIX: [&str; 4] = ["lodge", "hotel", "inn", "house"];
const STREETS: [&str; 3] = ["street", "road", "lane"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityPool {
    Train,
    Eval,
    Pretrain,
}

impl EntityPool {
    pub const ALL: [EntityPool; 3] = [EntityPool::Train, EntityPool::Eval, EntityPool::Pretrain];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityPool::Train => "train",
            EntityPool::Eval => "eval",
            EntityPool::Pretrain => "pretrain",
        }
    }
}

impl std::str::FromStr for EntityPool {
    type Err = AcnError;

    fn from_str(s: &str) -> Result<Self> {
        EntityPool::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| AcnError::Parse(format!("unknown entity pool {s:?}")))
    }
}

pub fn informable_slots(domain: &str) -> &'static [&'static str] {
    match domain {
        "restaurant" => &["food", "area", "pricerange"],
        _ => &["area", "pricerange", "stars"],
    }
}

/// What the simulated user wants from one dialogue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub domain: String,
    pub constraints: BTreeMap<String, String>,
    pub requested: Vec<String>,
    /// First database match for `constraints`.
    pub entity: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub goal: GoalSpec,
    pub turns: Vec<DialogueTurn>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CorpusHeader {
    format_version: u32,
    pool: EntityPool,
    dialogues: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusFile {
    pub format_version: u32,
    pub pool: EntityPool,
    pub dialogues: Vec<Dialogue>,
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    (0..syllables)
        .map(|_| {
            format!(
                "{}{}",
                ONSETS.choose(rng).unwrap(),
                VOWELS.choose(rng).unwrap()
            )
        })
        .collect()
}

fn phone(rng: &mut ChaCha8Rng) -> String {
    format!("01223 {:06}", rng.gen_range(0..1_000_000))
}

/// The databases of all three pools. Fixed; independent of any dialogue seed.
pub fn entity_pools() -> BTreeMap<&'static str, Database> {
    let mut rng = ChaCha8Rng::seed_from_u64(POOL_SEED);
    let mut used_words = BTreeSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng| loop {
        let w = pseudo_word(rng);
        if used_words.insert(w.clone()) {
            return w;
        }
    };
    let mut out = BTreeMap::new();
    for pool in EntityPool::ALL {
        let mut db = Database::new();
        for domain in DOMAINS {
            for _ in 0..ENTITIES_PER_DOMAIN {
                let suffix = if domain == "restaurant" {
                    RESTAURANT_SUFFIX.choose(&mut rng).unwrap()
                } else {
                    HOTEL_SUFFIX.choose(&mut rng).unwrap()
                };
                let name = format!("{} {suffix}", fresh(&mut rng));
                let address = format!(
                    "{} {} {}",
                    rng.gen_range(1..100),
                    fresh(&mut rng),
                    STREETS.choose(&mut rng).unwrap()
                );
                let area = *AREAS.choose(&mut rng).unwrap();
                let price = *PRICES.choose(&mut rng).unwrap();
                let phone = phone(&mut rng);
                let mut attrs = vec![
                    ("area", area),
                    ("pricerange", price),
                    ("phone", phone.as_str()),
                    ("address", address.as_str()),
                ];
                let third = if domain == "restaurant" {
                    ("food", *FOODS.choose(&mut rng).unwrap())
                } else {
                    ("stars", *STARS.choose(&mut rng).unwrap())
                };
                attrs.push(third);
                db.insert(EntityRecord::new(domain, &name, &attrs))
                    .expect("names are fresh");
            }
        }
        out.insert(pool.as_str(), db);
    }
    out
}

pub fn pool_database(pool: EntityPool) -> Database {
    entity_pools().remove(pool.as_str()).expect("every pool is built")
}

/// Natural description of constraint values, e.g. `"cheap italian restaurant
/// in the north"`.
fn describe(domain: &str, c: &BTreeMap<String, String>) -> String {
    let real = |slot: &str| c.get(slot).filter(|v| v.as_str() != DONTCARE);
    let mut s = String::new();
    if let Some(p) = real("pricerange") {
        s.push_str(p);
        s.push(' ');
    }
    if let Some(f) = real("food") {
        s.push_str(f);
        s.push(' ');
    }
    s.push_str(domain);
    if let Some(st) = real("stars") {
        s.push_str(&format!(" with {st} stars"));
    }
    if let Some(a) = real("area") {
        s.push_str(&format!(" in the {a}"));
    }
    s
}

fn constraint_request(rng: &mut ChaCha8Rng, domain: &str, c: &BTreeMap<String, String>) -> String {
    let opener = ["i am looking for a", "i need a", "can you find me a", "i want a"]
        .choose(rng)
        .unwrap();
    format!("{opener} {}.", describe(domain, c))
}

fn follow_up_request(rng: &mut ChaCha8Rng, slot: &str, value: &str) -> String {
    match slot {
        "food" => ["i would like {} food.", "it should serve {} food."],
        "area" => ["it should be in the {}.", "i prefer the {} of town."],
        "pricerange" => ["something {} please.", "i want it to be {}."],
        _ => ["with {} stars please.", "it should have {} stars."],
    }
    .choose(rng)
    .unwrap()
    .replace("{}", value)
}

struct Builder<'a> {
    db: &'a Database,
    domain: &'static str,
    belief: BeliefState,
    turns: Vec<DialogueTurn>,
}

impl Builder<'_> {
    fn push(&mut self, user: String, action: SystemAction, system: String) {
        let db = self.db.lookup(&self.belief);
        self.turns.push(DialogueTurn {
            user,
            belief: self.belief.clone(),
            db,
            action,
            system,
        });
    }

    fn query(&self) -> QueryResult {
        self.db.lookup(&self.belief)
    }

    fn offer(&self, rng: &mut ChaCha8Rng, focus: &BTreeMap<String, String>) -> (SystemAction, String) {
        let d = self.domain;
        let r = self.query();
        let Some(top) = r.records.first() else {
            let acts = focus
                .iter()
                .map(|(s, v)| Act::new(d, ActType::Nooffer, s, Some(v)))
                .collect();
            return (SystemAction(acts), format!("sorry, there is no {}.", describe(d, focus)));
        };
        let mut acts = vec![Act::new(d, ActType::Offer, "name", Some(&top.name))];
        let mut shown = BTreeMap::new();
        for slot in informable_slots(d) {
            if self.belief.get(d, slot).is_some_and(|v| v != DONTCARE) {
                let v = top.get(slot).unwrap_or_default();
                acts.push(Act::new(d, ActType::Inform, slot, Some(v)));
                shown.insert(slot.to_string(), v.to_string());
            }
        }
        let lead = if r.total > 1 {
            format!("there are {} options. ", r.total)
        } else {
            String::new()
        };
        let text = if rng.gen_bool(0.5) {
            format!("{lead}{} is a {}.", top.name, describe(d, &shown))
        } else {
            format!("{lead}how about {}? it is a {}.", top.name, describe(d, &shown))
        };
        (SystemAction(acts), text)
    }
}

fn generate_dialogue(rng: &mut ChaCha8Rng, db: &Database, id: String) -> Dialogue {
    let domain = *DOMAINS.choose(rng).unwrap();
    let target = db.records(domain).choose(rng).unwrap().clone();
    let slots = informable_slots(domain);
    let k = rng.gen_range(1..=slots.len());
    let mut chosen: Vec<&str> = slots.choose_multiple(rng, k).copied().collect();
    chosen.sort_by_key(|s| slots.iter().position(|x| x == s));
    let constraints: BTreeMap<String, String> = chosen
        .iter()
        .map(|s| (s.to_string(), target.get(s).unwrap().to_string()))
        .collect();
    let n_req = rng.gen_range(0..=REQUESTABLE.len());
    let mut requested: Vec<String> = REQUESTABLE
        .choose_multiple(rng, n_req)
        .map(|s| s.to_string())
        .collect();
    requested.sort_by_key(|s| REQUESTABLE.iter().position(|x| x == s));

    // Turn plan within the user-turn budget.
    let split = k >= 2 && rng.gen_bool(0.4);
    let follow_ups = if split { k - 1 } else { 0 };
    let mut budget = MAX_USER_TURNS - 1 - follow_ups - usize::from(!requested.is_empty());
    let nooffer = budget > 0 && rng.gen_bool(0.2);
    budget -= usize::from(nooffer);
    let closing = budget > 0 && rng.gen_bool(0.5);
    let dontcare = !constraints.contains_key("pricerange") && rng.gen_bool(0.15);

    let mut b = Builder {
        db,
        domain,
        belief: BeliefState::new(),
        turns: Vec::new(),
    };

    let (first, rest): (BTreeMap<_, _>, BTreeMap<_, _>) = if split {
        let keep = chosen[0];
        constraints
            .clone()
            .into_iter()
            .partition(|(s, _)| s == keep)
    } else {
        (constraints.clone(), BTreeMap::new())
    };

    let mut opened = false;
    if nooffer {
        // Ask for a value of one constrained slot with no match, then correct it.
        let (slot, _) = first.iter().next().unwrap();
        let pool: &[&str] = match slot.as_str() {
            "food" => &FOODS,
            "area" => &AREAS,
            "pricerange" => &PRICES,
            _ => &STARS,
        };
        let mut wrong = first.clone();
        let alt = pool.iter().filter(|&&v| v != first[slot]).find(|&&v| {
            wrong.insert(slot.clone(), v.to_string());
            db.records(domain).iter().all(|r| !r.satisfies(&wrong))
        });
        if let Some(&alt) = alt {
            wrong.insert(slot.clone(), alt.to_string());
            for (s, v) in &wrong {
                b.belief.insert(domain, s, v);
            }
            let user = constraint_request(rng, domain, &wrong);
            let (act, sys) = b.offer(rng, &wrong);
            b.push(user, act, sys);
            b.belief.insert(domain, slot, &first[slot]);
            let user = format!("how about {} instead?", first[slot]);
            let (act, sys) = b.offer(rng, &first);
            b.push(user, act, sys);
            opened = true;
        }
    }
    if !opened {
        for (s, v) in &first {
            b.belief.insert(domain, s, v);
        }
        let mut user = constraint_request(rng, domain, &first);
        if dontcare {
            b.belief.insert(domain, "pricerange", DONTCARE);
            user.push_str(" i do not care about the price.");
        }
        let (act, sys) = b.offer(rng, &first);
        b.push(user, act, sys);
    }
    for (s, v) in &rest {
        b.belief.insert(domain, s, v);
        let user = follow_up_request(rng, s, v);
        let (act, sys) = b.offer(rng, &constraints);
        b.push(user, act, sys);
    }

    let entity = b
        .query()
        .records
        .first()
        .map(|r| r.name.clone())
        .expect("the target satisfies the goal");

    if !requested.is_empty() {
        let rec = db.find(domain, &entity).unwrap();
        let phone = rec.get("phone").unwrap();
        let address = rec.get("address").unwrap();
        let (user, sys) = match requested.as_slice() {
            [s] if s == "phone" => (
                ["what is the phone number?", "can i have their phone number?"]
                    .choose(rng)
                    .unwrap()
                    .to_string(),
                format!("the phone number of {entity} is {phone}."),
            ),
            [_] => (
                ["what is the address?", "where is it located?"]
                    .choose(rng)
                    .unwrap()
                    .to_string(),
                format!("{entity} is at {address}."),
            ),
            _ => (
                "could you give me the phone number and address?".to_string(),
                format!("the phone number of {entity} is {phone} and the address is {address}."),
            ),
        };
        let acts = requested
            .iter()
            .map(|s| Act::new(domain, ActType::Inform, s, rec.get(s)))
            .collect();
        b.push(user, SystemAction(acts), sys);
    }
    if closing {
        let user = ["thank you, that is all.", "thanks, goodbye."].choose(rng).unwrap();
        b.push(
            user.to_string(),
            SystemAction(vec![Act::new("general", ActType::Bye, "none", None)]),
            "you are welcome. goodbye.".into(),
        );
    }

    Dialogue {
        id,
        goal: GoalSpec {
            domain: domain.into(),
            constraints,
            requested,
            entity,
        },
        turns: b.turns,
    }
}

/// `n_dialogues` templated dialogues over the entities of `pool`.
pub fn generate_synthetic(seed: u64, n_dialogues: usize, pool: EntityPool) -> (CorpusFile, Database) {
    let db = pool_database(pool);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1a1_0600);
    let dialogues = (0..n_dialogues)
        .map(|i| generate_dialogue(&mut rng, &db, format!("{}-{seed}-{i:04}", pool.as_str())))
        .collect();
    (
        CorpusFile {
            format_version: FORMAT_VERSION,
            pool,
            dialogues,
        },
        db,
    )
}

/// Plain text for backbone pretraining: pretrain-pool conversations without
/// any structured lines, plus one description per pretrain-pool entity.
pub fn pretrain_texts(seed: u64, n_dialogues: usize) -> Vec<String> {
    let (corpus, db) = generate_synthetic(seed, n_dialogues, EntityPool::Pretrain);
    pretrain_pieces(&corpus, &db, false).into_iter().flatten().collect()
}

/// Pretraining sequences from a corpus and its database, each as the pieces
/// that are encoded independently. Always includes the conversation text of
/// each dialogue and a description of each entity; `structured` adds every
/// fully serialized turn.
///
/// The invented words of names and addresses are replaced by fresh ones in
/// every sequence, consistently within it. A name then cannot be predicted
/// from memory, only by reproducing it from earlier in the sequence.
pub fn pretrain_pieces(corpus: &CorpusFile, db: &Database, structured: bool) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = corpus
        .dialogues
        .iter()
        .map(|d| vec![history_text(&d.turns, MAX_HISTORY_TURNS)])
        .collect();
    for r in db.all_records() {
        let mut c = BTreeMap::new();
        for s in informable_slots(&r.domain) {
            c.insert(s.to_string(), r.get(s).unwrap_or_default().to_string());
        }
        out.push(vec![format!(
            "{} is a {}. the phone number is {} and the address is {}.\n",
            r.name,
            describe(&r.domain, &c),
            r.get("phone").unwrap_or_default(),
            r.get("address").unwrap_or_default()
        )]);
    }
    if structured {
        for d in &corpus.dialogues {
            for i in 0..d.turns.len() {
                out.push(encoding_pieces(&d.turns[..i], &d.turns[i], MAX_HISTORY_TURNS));
            }
        }
    }
    rename_invented_words(&mut out, db);
    out
}

/// First word of each name and middle word of each address.
fn invented_words(db: &Database) -> BTreeSet<String> {
    let mut words = BTreeSet::new();
    for r in db.all_records() {
        words.extend(r.name.split(' ').next().map(str::to_string));
        if let Some(a) = r.get("address") {
            words.extend(a.split(' ').nth(1).map(str::to_string));
        }
    }
    words
}

fn rename_invented_words(seqs: &mut [Vec<String>], db: &Database) {
    let targets = invented_words(db);
    // Replacements never collide with a word of any pool.
    let reserved: BTreeSet<String> = entity_pools().values().flat_map(invented_words).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(RENAME_SEED);
    for seq in seqs {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for piece in seq.iter_mut() {
            let mut renamed = String::with_capacity(piece.len());
            let mut word = String::new();
            for ch in piece.chars().chain(std::iter::once('\0')) {
                if ch.is_ascii_lowercase() {
                    word.push(ch);
                    continue;
                }
                if targets.contains(&word) {
                    let fresh = map.entry(std::mem::take(&mut word)).or_insert_with(|| loop {
                        let w = pseudo_word(&mut rng);
                        if !reserved.contains(&w) {
                            break w;
                        }
                    });
                    renamed.push_str(fresh);
                } else {
                    renamed.push_str(&std::mem::take(&mut word));
                }
                if ch != '\0' {
                    renamed.push(ch);
                }
            }
            *piece = renamed;
        }
    }
}

impl CorpusFile {
    /// Header line, then one JSON dialogue per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let header = CorpusHeader {
            format_version: self.format_version,
            pool: self.pool,
            dialogues: self.dialogues.len(),
        };
        let mut s = serde_json::to_string(&header)?;
        s.push('\n');
        for d in &self.dialogues {
            s.push_str(&serde_json::to_string(d)?);
            s.push('\n');
        }
        Ok(s)
    }

    /// Parses and schema-checks; see [`CorpusFile::validate`] for the
    /// database-dependent checks.
    pub fn from_jsonl(text: &str, origin: &str) -> Result<Self> {
        let schema = |line: usize, message: String| AcnError::Schema {
            path: origin.into(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| schema(1, "missing header line".into()))?;
        let header: CorpusHeader =
            serde_json::from_str(first).map_err(|e| schema(1, format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(schema(
                1,
                format!("format_version {} (expected {FORMAT_VERSION})", header.format_version),
            ));
        }
        let mut dialogues = Vec::with_capacity(header.dialogues);
        let mut last_line = 1;
        for (n, line) in lines {
            last_line = n + 1;
            let d: Dialogue =
                serde_json::from_str(line).map_err(|e| schema(n + 1, e.to_string()))?;
            if d.turns.is_empty() {
                return Err(schema(n + 1, format!("dialogue {} has no turns", d.id)));
            }
            dialogues.push(d);
        }
        if dialogues.len() != header.dialogues {
            return Err(schema(
                last_line + 1,
                format!(
                    "header declares {} dialogues, found {}",
                    header.dialogues,
                    dialogues.len()
                ),
            ));
        }
        Ok(Self {
            format_version: header.format_version,
            pool: header.pool,
            dialogues,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()?).map_err(|e| AcnError::io(path, e))
    }

    /// Every turn's database results must equal a fresh lookup of its belief,
    /// utterances must be non-empty, and each goal entity must satisfy its
    /// constraints.
    pub fn validate(&self, db: &Database) -> Result<()> {
        for d in &self.dialogues {
            let rec = db.find(&d.goal.domain, &d.goal.entity).ok_or_else(|| {
                AcnError::Validation(format!("{}: goal entity {:?} not in database", d.id, d.goal.entity))
            })?;
            if !rec.satisfies(&d.goal.constraints) {
                return Err(AcnError::Validation(format!(
                    "{}: goal entity {:?} violates the goal constraints",
                    d.id, d.goal.entity
                )));
            }
            for (i, t) in d.turns.iter().enumerate() {
                if t.user.trim().is_empty() || t.system.trim().is_empty() {
                    return Err(AcnError::Validation(format!("{} turn {i}: empty utterance", d.id)));
                }
                if t.db != db.lookup(&t.belief) {
                    return Err(AcnError::Validation(format!(
                        "{} turn {i}: database results disagree with the belief state",
                        d.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn entity_names(&self) -> BTreeSet<String> {
        self.dialogues.iter().map(|d| d.goal.entity.clone()).collect()
    }

    pub fn turn_count(&self) -> usize {
        self.dialogues.iter().map(|d| d.turns.len()).sum()
    }
}

/// Reads a corpus file and validates it against `db`.
pub fn load_corpus(path: impl AsRef<Path>, db: &Database) -> Result<CorpusFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| AcnError::io(path, e))?;
    let corpus = CorpusFile::from_jsonl(&text, &path.display().to_string())?;
    corpus.validate(db)?;
    Ok(corpus)
}

/// Partitions whole dialogues into `(first, second)` with sizes proportional
/// to `ratios`. Each part keeps the original dialogue order.
pub fn split(corpus: &CorpusFile, ratios: (f64, f64), seed: u64) -> Result<(CorpusFile, CorpusFile)> {
    let (a, b) = ratios;
    if !(a >= 0.0 && b >= 0.0 && a + b > 0.0) {
        return Err(AcnError::Validation(format!("invalid split ratios {ratios:?}")));
    }
    let n = corpus.dialogues.len();
    let n_first = ((n as f64) * a / (a + b)).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let first: BTreeSet<usize> = order[..n_first].iter().copied().collect();
    let part = |keep: bool| CorpusFile {
        format_version: corpus.format_version,
        pool: corpus.pool,
        dialogues: corpus
            .dialogues
            .iter()
            .enumerate()
            .filter(|(i, _)| first.contains(i) == keep)
            .map(|(_, d)| d.clone())
            .collect(),
    };
    Ok((part(true), part(false)))
}

/// Structural check of a MultiWOZ-style JSON export: an object mapping
/// dialogue ids to objects with a non-empty `log` of turns that each carry a
/// `text` string. Returns the number of dialogues. Content is not converted.
pub fn validate_multiwoz_structure(json: &str) -> Result<usize> {
    let v: serde_json::Value = serde_json::from_str(json)?;
    let obj = v
        .as_object()
        .ok_or_else(|| AcnError::Validation("top level must be an object".into()))?;
    for (id, d) in obj {
        let log = d
            .get("log")
            .and_then(|l| l.as_array())
            .filter(|l| !l.is_empty())
            .ok_or_else(|| AcnError::Validation(format!("{id}: missing or empty \"log\"")))?;
        for (i, turn) in log.iter().enumerate() {
            if !turn.get("text").is_some_and(|t| t.is_string()) {
                return Err(AcnError::Validation(format!("{id} turn {i}: missing \"text\"")));
            }
        }
    }
    Ok(obj.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let (a, _) = generate_synthetic(7, 20, EntityPool::Train);
        let (b, _) = generate_synthetic(7, 20, EntityPool::Train);
        assert_eq!(a.to_jsonl().unwrap(), b.to_jsonl().unwrap());
        let (c, _) = generate_synthetic(8, 20, EntityPool::Train);
        assert_ne!(a.to_jsonl().unwrap(), c.to_jsonl().unwrap());
    }

    #[test]
    fn pools_are_disjoint() {
        let pools = entity_pools();
        let names: Vec<BTreeSet<String>> = EntityPool::ALL
            .iter()
            .map(|p| pools[p.as_str()].entity_names())
            .collect();
        for i in 0..names.len() {
            assert_eq!(names[i].len(), 2 * ENTITIES_PER_DOMAIN);
            for j in i + 1..names.len() {
                assert!(names[i].is_disjoint(&names[j]));
            }
        }
    }

    #[test]
    fn pretraining_words_are_renamed_per_sequence() {
        let (corpus, db) = generate_synthetic(3, 20, EntityPool::Pretrain);
        let original = invented_words(&db);
        let reserved: BTreeSet<String> = entity_pools().values().flat_map(invented_words).collect();
        let seqs = pretrain_pieces(&corpus, &db, true);
        let again = pretrain_pieces(&corpus, &db, true);
        assert_eq!(seqs, again);
        let words = |seq: &Vec<String>| -> BTreeSet<String> {
            seq.concat()
                .split(|c: char| !c.is_ascii_lowercase())
                .map(str::to_string)
                .collect()
        };
        for seq in &seqs {
            assert!(words(seq).is_disjoint(&original));
        }
        // The same record described twice gets different names.
        let descriptions: Vec<&String> = seqs.iter().filter(|s| s.len() == 1 && s[0].contains(" is a ")).map(|s| &s[0]).collect();
        let first_words: BTreeSet<&str> = descriptions.iter().filter_map(|d| d.split(' ').next()).collect();
        assert!(first_words.len() > descriptions.len() / 2);
        assert!(first_words.iter().all(|w| !reserved.contains(*w)));
        // Within a structured turn the offered name matches the database line.
        let turn = seqs.iter().find(|s| s.len() > 1 && s[6].contains("offer name")).expect("an offer turn");
        let offered = turn[6].split("offer name ").nth(1).unwrap().split(';').next().unwrap().trim();
        assert!(turn[4].contains(offered), "{offered} not in {}", turn[4]);
        assert!(turn[8].contains(offered), "{offered} not in {}", turn[8]);
    }

    #[test]
    fn generated_corpus_validates() {
        for pool in [EntityPool::Train, EntityPool::Eval] {
            let (c, db) = generate_synthetic(3, 200, pool);
            c.validate(&db).unwrap();
            for d in &c.dialogues {
                assert!((1..=MAX_USER_TURNS).contains(&d.turns.len()), "{}", d.id);
            }
        }
    }

    #[test]
    fn generator_covers_every_branch() {
        let (c, _) = generate_synthetic(11, 300, EntityPool::Train);
        let acts: BTreeSet<ActType> = c
            .dialogues
            .iter()
            .flat_map(|d| &d.turns)
            .flat_map(|t| &t.action.0)
            .map(|a| a.act)
            .collect();
        for a in [ActType::Offer, ActType::Inform, ActType::Nooffer, ActType::Bye] {
            assert!(acts.contains(&a), "{a:?} never generated");
        }
        let dontcare = c
            .dialogues
            .iter()
            .flat_map(|d| &d.turns)
            .any(|t| t.belief.triples().any(|(_, _, v)| v == DONTCARE));
        assert!(dontcare);
    }

    #[test]
    fn file_round_trip() {
        let (c, db) = generate_synthetic(1, 15, EntityPool::Eval);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        c.save(&path).unwrap();
        assert_eq!(load_corpus(&path, &db).unwrap(), c);
    }

    #[test]
    fn truncated_file_is_a_schema_error() {
        let (c, _) = generate_synthetic(1, 5, EntityPool::Train);
        let text = c.to_jsonl().unwrap();
        let cut: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            CorpusFile::from_jsonl(&cut, "x"),
            Err(AcnError::Schema { .. })
        ));
        let half = &text[..text.len() / 2];
        assert!(matches!(
            CorpusFile::from_jsonl(half, "x"),
            Err(AcnError::Schema { .. })
        ));
    }

    #[test]
    fn inconsistent_turn_is_named() {
        let (mut c, db) = generate_synthetic(1, 5, EntityPool::Train);
        c.dialogues[2].turns[0].db.total += 1;
        let msg = c.validate(&db).unwrap_err().to_string();
        assert!(msg.contains(&c.dialogues[2].id) && msg.contains("turn 0"), "{msg}");
    }

    #[test]
    fn split_laws() {
        let (c, _) = generate_synthetic(2, 30, EntityPool::Train);
        let (all, none) = split(&c, (1.0, 0.0), 9).unwrap();
        assert_eq!(all, c);
        assert!(none.dialogues.is_empty());
        let (a, b) = split(&c, (0.8, 0.2), 9).unwrap();
        assert_eq!(a.dialogues.len() + b.dialogues.len(), 30);
        assert_eq!(a.dialogues.len(), 24);
        let ids_a: BTreeSet<_> = a.dialogues.iter().map(|d| &d.id).collect();
        assert!(b.dialogues.iter().all(|d| !ids_a.contains(&d.id)));
        assert_eq!(split(&c, (0.8, 0.2), 9).unwrap(), (a, b));
    }

    #[test]
    fn pretrain_text_has_no_structured_lines() {
        let texts = pretrain_texts(4, 10);
        assert!(texts.iter().all(|t| !t.contains("Belief:") && !t.contains("Database:")));
        let train_names = pool_database(EntityPool::Train).entity_names();
        assert!(texts.iter().all(|t| train_names.iter().all(|n| !t.contains(n.as_str()))));
    }

    #[test]
    fn multiwoz_structure_check() {
        let ok = r#"{"SNG01": {"log": [{"text": "hi"}, {"text": "hello"}]}}"#;
        assert_eq!(validate_multiwoz_structure(ok).unwrap(), 1);
        assert!(validate_multiwoz_structure(r#"{"x": {"log": []}}"#).is_err());
        assert!(validate_multiwoz_structure(r#"{"x": {"log": [{"t": 1}]}}"#).is_err());
        assert!(validate_multiwoz_structure("[]").is_err());
    }
}
