//! Dialogue metrics and the end-to-end evaluation driver.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::codec::Vocab;
use crate::corpus::{CorpusFile, GoalSpec};
use crate::dialogue::{history_text, BeliefState, MAX_HISTORY_TURNS};
use crate::error::{AcnError, Result};
use crate::infer::{respond, StageLimits};
use crate::kb::Database;
use crate::model::Model;

/// Fraction of turns whose normalized belief states are identical.
pub fn joint_accuracy(pred: &[BeliefState], gold: &[BeliefState]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(AcnError::Eval(format!(
            "{} predicted vs {} gold belief states",
            pred.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(AcnError::Eval("no turns to score".into()));
    }
    let hits = pred
        .iter()
        .zip(gold)
        .filter(|(p, g)| p.normalized() == g.normalized())
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Lowercased word tokens with punctuation split off.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_alphanumeric() || c == '\'' {
            cur.push(c);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Whole-word, case-insensitive containment of `phrase` in `text`.
pub fn mentions(text: &str, phrase: &str) -> bool {
    let t = words(text);
    let p = words(phrase);
    !p.is_empty() && t.windows(p.len()).any(|w| w == p.as_slice())
}

/// System responses of one dialogue with its goal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueResponses {
    pub id: String,
    pub goal: Option<GoalSpec>,
    pub responses: Vec<String>,
}

/// Corpus-side inform and success rates. An entity informs when it is in the
/// goal domain, satisfies the goal constraints and is named in a response;
/// success additionally needs every requested attribute of that entity to
/// appear in the responses.
pub fn inform_success(dialogues: &[DialogueResponses], db: &Database) -> Result<(f64, f64)> {
    if dialogues.is_empty() {
        return Err(AcnError::Eval("no dialogues to score".into()));
    }
    let mut inform = 0usize;
    let mut success = 0usize;
    for d in dialogues {
        let goal = d
            .goal
            .as_ref()
            .ok_or_else(|| AcnError::Eval(format!("dialogue {} has no goal", d.id)))?;
        let text = d.responses.join(" ");
        let offered = db
            .records(&goal.domain)
            .iter()
            .filter(|r| r.satisfies(&goal.constraints) && mentions(&text, &r.name))
            .min_by_key(|r| {
                d.responses
                    .iter()
                    .position(|s| mentions(s, &r.name))
                    .unwrap_or(usize::MAX)
            });
        if let Some(r) = offered {
            inform += 1;
            let all = goal
                .requested
                .iter()
                .all(|slot| r.get(slot).is_some_and(|v| mentions(&text, v)));
            if all {
                success += 1;
            }
        }
    }
    let n = dialogues.len() as f64;
    Ok((inform as f64 / n, success as f64 / n))
}

fn ngram_counts(toks: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

/// Corpus BLEU-4 over word tokens with a brevity penalty and add-one
/// smoothing of the 2- to 4-gram precisions.
pub fn bleu(candidates: &[String], references: &[String]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(AcnError::Eval(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let (c, r) = (words(c), words(r));
        if r.is_empty() {
            return Err(AcnError::Eval("empty reference".into()));
        }
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(&r, n);
            for (g, k) in ngram_counts(&c, n) {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if references.is_empty() {
        return Err(AcnError::Eval("empty reference set".into()));
    }
    if c_len == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = (matched[0] as f64 / total[0] as f64).ln();
    for n in 1..4 {
        log_p += ((matched[n] + 1) as f64 / (total[n] + 1) as f64).ln();
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * (log_p / 4.0).exp())
}

/// `(inform + success) × 0.5 + bleu`, with inform and success in percent and
/// BLEU in points.
pub fn combined(inform_pct: f64, success_pct: f64, bleu_pts: f64) -> f64 {
    (inform_pct + success_pct) * 0.5 + bleu_pts
}

/// One scored response for the entity-consistency proxy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityCase {
    pub response: String,
    /// Text the system was allowed to take entity names from.
    pub sources: String,
    pub required: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EntityScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mentioned: usize,
    pub supported: usize,
    pub required: usize,
    pub recalled: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Micro-averaged precision of entity mentions against their allowed sources
/// and recall of required entities.
pub fn entity_consistency(cases: &[EntityCase], lexicon: &BTreeSet<String>) -> EntityScore {
    let mut s = EntityScore::default();
    for c in cases {
        for name in lexicon.iter().filter(|n| mentions(&c.response, n)) {
            s.mentioned += 1;
            if mentions(&c.sources, name) {
                s.supported += 1;
            }
        }
        s.required += c.required.len();
        s.recalled += c.required.iter().filter(|n| mentions(&c.response, n)).count();
    }
    s.precision = ratio(s.supported, s.mentioned);
    s.recall = ratio(s.recalled, s.required);
    s.f1 = if s.precision + s.recall > 0.0 {
        2.0 * s.precision * s.recall / (s.precision + s.recall)
    } else {
        0.0
    };
    s
}

/// Lexicon entries named in `text`.
pub fn entities_in(text: &str, lexicon: &BTreeSet<String>) -> BTreeSet<String> {
    lexicon.iter().filter(|n| mentions(text, n)).cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub dialogues: usize,
    pub turns: usize,
    pub parsed_turns: usize,
    pub belief_failures: usize,
    pub other_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub joint_accuracy: f64,
    pub inform: f64,
    pub success: f64,
    pub bleu: f64,
    /// On the mixed percent scale.
    pub combined: f64,
    pub entity: EntityScore,
    pub parse_rate: f64,
    pub counts: EvalCounts,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let c = &self.counts;
        format!(
            "dialogues        {}\n\
             turns            {}\n\
             parse rate       {:.4} ({} / {})\n\
             joint accuracy   {:.4}\n\
             inform           {:.4}\n\
             success          {:.4}\n\
             bleu             {:.4}\n\
             combined         {:.2}\n\
             entity precision {:.4} ({} / {})\n\
             entity recall    {:.4} ({} / {})\n\
             entity f1        {:.4}\n",
            c.dialogues,
            c.turns,
            self.parse_rate,
            c.parsed_turns,
            c.turns,
            self.joint_accuracy,
            self.inform,
            self.success,
            self.bleu,
            self.combined,
            self.entity.precision,
            self.entity.supported,
            self.entity.mentioned,
            self.entity.recall,
            self.entity.recalled,
            self.entity.required,
            self.entity.f1,
        )
    }
}

/// Runs [`respond`] on every turn with the gold history and scores the
/// outputs. A turn that fails to parse counts as an empty belief and an
/// empty response.
pub fn evaluate(
    model: &Model,
    vocab: &Vocab,
    corpus: &CorpusFile,
    db: &Database,
    lexicon: &BTreeSet<String>,
    limits: &StageLimits,
) -> Result<EvalReport> {
    let mut pred_beliefs = Vec::new();
    let mut gold_beliefs = Vec::new();
    let mut candidates = Vec::new();
    let mut references = Vec::new();
    let mut per_dialogue = Vec::new();
    let mut cases = Vec::new();
    let mut counts = EvalCounts {
        dialogues: corpus.dialogues.len(),
        turns: 0,
        parsed_turns: 0,
        belief_failures: 0,
        other_failures: 0,
    };
    for d in &corpus.dialogues {
        let mut responses = Vec::new();
        for (i, turn) in d.turns.iter().enumerate() {
            let history = &d.turns[..i];
            counts.turns += 1;
            let (belief, response, db_text) = match respond(model, vocab, db, history, &turn.user, limits) {
                Ok(r) => {
                    counts.parsed_turns += 1;
                    (r.belief, r.response, r.db_text)
                }
                Err(AcnError::BeliefParse { .. }) => {
                    counts.belief_failures += 1;
                    (BeliefState::new(), String::new(), String::new())
                }
                Err(AcnError::Parse(_)) => {
                    counts.other_failures += 1;
                    (BeliefState::new(), String::new(), String::new())
                }
                Err(e) => return Err(e),
            };
            pred_beliefs.push(belief);
            gold_beliefs.push(turn.belief.clone());
            candidates.push(response.clone());
            references.push(turn.system.clone());
            cases.push(EntityCase {
                sources: format!(
                    "{} {} {db_text}",
                    history_text(history, MAX_HISTORY_TURNS),
                    turn.user
                ),
                required: entities_in(&turn.system, lexicon),
                response: response.clone(),
            });
            responses.push(response);
        }
        per_dialogue.push(DialogueResponses {
            id: d.id.clone(),
            goal: Some(d.goal.clone()),
            responses,
        });
    }
    let (inform, success) = inform_success(&per_dialogue, db)?;
    let bleu = bleu(&candidates, &references)?;
    Ok(EvalReport {
        joint_accuracy: joint_accuracy(&pred_beliefs, &gold_beliefs)?,
        inform,
        success,
        bleu,
        combined: combined(inform * 100.0, success * 100.0, bleu * 100.0),
        entity: entity_consistency(&cases, lexicon),
        parse_rate: ratio(counts.parsed_turns, counts.turns),
        counts,
    })
}
