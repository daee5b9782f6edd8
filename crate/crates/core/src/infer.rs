//! Staged greedy decoding: belief, database splice, action, response.

use serde::{Deserialize, Serialize};

use crate::codec::Vocab;
use crate::dialogue::{
    context_text, extract_response, parse_action, parse_belief, BeliefState, DialogueTurn,
    SystemAction, ACTION_MARKER, BELIEF_MARKER, DATABASE_MARKER, END_OF_TURN, MAX_HISTORY_TURNS,
    SYSTEM_MARKER,
};
use crate::error::{AcnError, Result};
use crate::kb::{format_results, Database, QueryResult};
use crate::model::{Decoder, Model, StepOutput};
use crate::tensor::kernels;

pub const BELIEF_MAX_TOKENS: usize = 64;
pub const ACTION_MAX_TOKENS: usize = 48;
pub const RESPONSE_MAX_TOKENS: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Belief,
    Db,
    Action,
    Response,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLimits {
    pub belief: usize,
    pub action: usize,
    pub response: usize,
}

impl Default for StageLimits {
    fn default() -> Self {
        Self {
            belief: BELIEF_MAX_TOKENS,
            action: ACTION_MAX_TOKENS,
            response: RESPONSE_MAX_TOKENS,
        }
    }
}

impl StageLimits {
    pub fn total(&self) -> usize {
        self.belief + self.action + self.response
    }
}

/// Per generated token: the copy gate and the copy mass of the chosen token,
/// `g * P_copy(token)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDiagnostic {
    pub token: usize,
    pub text: String,
    pub stage: Stage,
    pub gate: f64,
    pub copy_share: f64,
}

/// Incremental generation over a growing context.
pub struct GenerationState<'m> {
    decoder: Decoder<'m>,
    vocab: &'m Vocab,
    next: Option<StepOutput>,
    stage: Stage,
    pub diagnostics: Vec<TokenDiagnostic>,
}

impl<'m> GenerationState<'m> {
    pub fn new(model: &'m Model, vocab: &'m Vocab, context: &[usize]) -> Result<Self> {
        if context.len() > model.config.max_positions {
            return Err(AcnError::SequenceTooLong {
                len: context.len(),
                max: model.config.max_positions,
            });
        }
        let mut decoder = Decoder::new(model);
        let next = decoder.feed(context)?;
        Ok(Self {
            decoder,
            vocab,
            next,
            stage: Stage::Belief,
            diagnostics: Vec::new(),
        })
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn tokens(&self) -> &[usize] {
        self.decoder.tokens()
    }

    /// Moves to `stage`; stages only advance.
    pub fn advance(&mut self, stage: Stage) -> Result<()> {
        if stage < self.stage {
            return Err(AcnError::Validation(format!(
                "stage {:?} cannot follow {:?}",
                stage, self.stage
            )));
        }
        self.stage = stage;
        Ok(())
    }

    pub fn extend(&mut self, tokens: &[usize]) -> Result<()> {
        if let Some(out) = self.decoder.feed(tokens)? {
            self.next = Some(out);
        }
        Ok(())
    }

    /// Greedy generation until the generated text contains `stop` or
    /// `max_new` tokens. Only the newly generated text is checked for `stop`,
    /// and text after its first occurrence is dropped from the result.
    pub fn generate(&mut self, stop: &str, max_new: usize) -> Result<(Vec<usize>, String)> {
        let mut ids = Vec::new();
        let mut bytes = Vec::new();
        while ids.len() < max_new {
            let out = self
                .next
                .take()
                .ok_or_else(|| AcnError::Validation("generation needs a non-empty context".into()))?;
            let tok = kernels::argmax(&out.mixed_probs);
            let from_gen = (1.0 - out.gate) * out.gen_probs[tok];
            let copy_share = (out.mixed_probs[tok] - from_gen).clamp(0.0, 1.0);
            let piece = self.vocab.decode(&[tok])?;
            self.diagnostics.push(TokenDiagnostic {
                token: tok,
                text: String::from_utf8_lossy(&piece).into_owned(),
                stage: self.stage,
                gate: out.gate,
                copy_share,
            });
            bytes.extend_from_slice(&piece);
            ids.push(tok);
            self.next = Some(self.decoder.step(tok)?);
            if !stop.is_empty() && find(&bytes, stop.as_bytes()).is_some() {
                break;
            }
        }
        if let Some(at) = find(&bytes, stop.as_bytes()).filter(|_| !stop.is_empty()) {
            bytes.truncate(at + stop.len());
        }
        Ok((ids, String::from_utf8_lossy(&bytes).into_owned()))
    }
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack.windows(needle.len()).position(|w| w == needle)
}

/// Greedy continuation of `context` (argmax of the mixed distribution, ties
/// to the lowest id) until the decoded text reaches `stop` or `max_new`
/// tokens. Nothing is generated if the context already ends with `stop`.
pub fn generate_until(
    model: &Model,
    vocab: &Vocab,
    context: &[usize],
    stop: &str,
    max_new: usize,
) -> Result<String> {
    let mut st = GenerationState::new(model, vocab, context)?;
    if max_new == 0 || (!stop.is_empty() && vocab.decode(context)?.ends_with(stop.as_bytes())) {
        return Ok(String::new());
    }
    Ok(st.generate(stop, max_new)?.1)
}

/// Raw generated text of each stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawGeneration {
    pub belief: String,
    pub action: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub belief: BeliefState,
    pub db: QueryResult,
    pub db_text: String,
    pub action: SystemAction,
    pub response: String,
    pub raw: RawGeneration,
    pub diagnostics: Vec<TokenDiagnostic>,
    /// Full token context after the turn, for inspection.
    pub context: Vec<usize>,
}

/// Token ids of the prompt that precedes belief generation. Oldest history
/// turns are dropped until the prompt plus every stage budget fits.
pub fn belief_prompt(
    model: &Model,
    vocab: &Vocab,
    history: &[DialogueTurn],
    user: &str,
    limits: &StageLimits,
) -> Result<Vec<usize>> {
    let max = model.config.max_positions;
    let mut start = history.len().saturating_sub(MAX_HISTORY_TURNS);
    loop {
        let mut ids = vocab.encode(context_text(&history[start..], user, MAX_HISTORY_TURNS));
        ids.extend(vocab.encode(BELIEF_MARKER));
        if ids.len() + limits.total() <= max || start == history.len() {
            if ids.len() >= max {
                return Err(AcnError::SequenceTooLong { len: ids.len(), max });
            }
            return Ok(ids);
        }
        start += 1;
    }
}

/// One system turn: belief, database lookup, action and response.
pub fn respond(
    model: &Model,
    vocab: &Vocab,
    db: &Database,
    history: &[DialogueTurn],
    user: &str,
    limits: &StageLimits,
) -> Result<Reply> {
    let prompt = belief_prompt(model, vocab, history, user, limits)?;
    let mut st = GenerationState::new(model, vocab, &prompt)?;

    let (_, belief_raw) = st.generate("\n", limits.belief)?;
    let belief = parse_belief(&format!("{BELIEF_MARKER}{belief_raw}")).map_err(|e| {
        AcnError::BeliefParse {
            raw: belief_raw.clone(),
            reason: e.to_string(),
        }
    })?;

    st.advance(Stage::Db)?;
    let result = db.lookup(&belief);
    let db_text = format_results(&result);
    let mut splice = vocab.encode(DATABASE_MARKER);
    splice.extend(vocab.encode(format!(" {db_text}\n")));
    st.extend(&splice)?;

    // Stage markers are fixed structure, so they are forced like the belief
    // marker rather than left to the model.
    st.advance(Stage::Action)?;
    st.extend(&vocab.encode(ACTION_MARKER))?;
    let (_, action_raw) = st.generate("\n", limits.action)?;
    let action = parse_action(&format!("{ACTION_MARKER}{action_raw}")).map_err(|e| {
        AcnError::Parse(format!("action {action_raw:?}: {e}"))
    })?;

    st.advance(Stage::Response)?;
    st.extend(&vocab.encode(SYSTEM_MARKER))?;
    let stop = format!("\n{END_OF_TURN}");
    let (_, response_raw) = st.generate(&stop, limits.response)?;
    let response = extract_response(&format!("{SYSTEM_MARKER}{response_raw}")).map_err(|e| {
        AcnError::Parse(format!("response {response_raw:?}: {e}"))
    })?;
    st.advance(Stage::Done)?;

    Ok(Reply {
        belief,
        db: result,
        db_text,
        action,
        response,
        raw: RawGeneration {
            belief: belief_raw,
            action: action_raw,
            response: response_raw,
        },
        context: st.tokens().to_vec(),
        diagnostics: st.diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model {
        let cfg = ModelConfig {
            n_layer: 1,
            n_head: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 256,
            max_positions: 64,
            adapter_size: 4,
            adapter_enabled: true,
            copy_enabled: true,
        };
        Model::init(cfg, 1).unwrap()
    }

    #[test]
    fn zero_budget_generates_nothing() {
        let v = Vocab::bytes_only();
        assert_eq!(generate_until(&model(), &v, &v.encode("abc"), "\n", 0).unwrap(), "");
    }

    #[test]
    fn stop_already_present_generates_nothing() {
        let v = Vocab::bytes_only();
        assert_eq!(generate_until(&model(), &v, &v.encode("abc\n"), "\n", 10).unwrap(), "");
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let v = Vocab::bytes_only();
        let m = model();
        let a = generate_until(&m, &v, &v.encode("User: hi"), "\u{7f}\u{7f}", 7).unwrap();
        let b = generate_until(&m, &v, &v.encode("User: hi"), "\u{7f}\u{7f}", 7).unwrap();
        assert_eq!(a, b);
        assert!(v.encode(&a).len() <= 7);
    }

    #[test]
    fn overlong_context_is_a_length_error() {
        let v = Vocab::bytes_only();
        let ctx = vec![65; 65];
        assert!(matches!(
            generate_until(&model(), &v, &ctx, "\n", 1),
            Err(AcnError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn untrained_model_belief_errors_carry_raw_text() {
        let v = Vocab::bytes_only();
        let limits = StageLimits {
            belief: 4,
            action: 4,
            response: 4,
        };
        match respond(&model(), &v, &Database::new(), &[], "hi", &limits) {
            Err(AcnError::BeliefParse { raw, .. }) => assert!(!raw.is_empty()),
            Ok(_) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn stages_only_advance() {
        let v = Vocab::bytes_only();
        let m = model();
        let mut st = GenerationState::new(&m, &v, &[1, 2]).unwrap();
        st.advance(Stage::Action).unwrap();
        assert!(st.advance(Stage::Belief).is_err());
    }
}
