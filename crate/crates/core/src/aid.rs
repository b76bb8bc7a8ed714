//! Adaptive injection decoding.
//!
//! A per-sequence state machine that sits between a sampler and the output
//! and guarantees every finished sequence ends with a closed `\boxed{...}`
//! answer followed by exactly one EOS. At each step the sampler proposes a
//! token and [`step`] answers with one action:
//!
//! 1. after `finish`, any further step is an error;
//! 2. while injecting, force the next token of the injection phrase;
//! 3. EOS before any box triggers injection;
//! 4. reaching `max_len - soft_margin` without a box triggers injection;
//! 5. EOS inside an open box is replaced by the closing token;
//! 6. a box whose content reached `max_box_content` tokens is force-closed,
//!    after which the only admissible action is `finish`;
//! 7. stop tokens are suppressed until a box exists;
//! 8. everything else passes through, updating box tracking.
//!
//! The vocabulary is abstract: the opening of a box is a configured token
//! window (one token in the toy vocabulary, several for a real tokenizer), and
//! `}`, EOS and stop tokens are token ids.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::last_boxed_span;

pub type TokenId = u32;

pub const DEFAULT_SOFT_MARGIN: usize = 150;
pub const DEFAULT_MAX_BOX_CONTENT: usize = 40;
pub const INJECTION_TEXT: &str = "\nSo, the answer is \\boxed{";

#[derive(Debug, Error, PartialEq)]
pub enum AidError {
    #[error("step called on a finished sequence")]
    StepAfterFinish,
    #[error("token stream ended after {} output tokens without finishing", .0.tokens.len())]
    StreamExhausted(Box<AidOutcome>),
    #[error("invalid AID config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AidConfig {
    /// Tokens spelling the injected transition phrase; the last ones open the box.
    pub injection_tokens: Vec<TokenId>,
    /// Token window that opens a box when the model writes one naturally.
    pub open_pattern: Vec<TokenId>,
    pub close_token: TokenId,
    /// Tokens that open a nested brace inside a box.
    #[serde(default)]
    pub nested_open_tokens: Vec<TokenId>,
    pub eos_token: TokenId,
    #[serde(default)]
    pub stop_tokens: Vec<TokenId>,
    pub max_len: usize,
    #[serde(default = "default_soft_margin")]
    pub soft_margin: usize,
    #[serde(default = "default_max_box_content")]
    pub max_box_content: usize,
}

fn default_soft_margin() -> usize {
    DEFAULT_SOFT_MARGIN
}

fn default_max_box_content() -> usize {
    DEFAULT_MAX_BOX_CONTENT
}

impl AidConfig {
    pub fn validate(&self) -> Result<(), AidError> {
        let bad = |m: &str| Err(AidError::InvalidConfig(m.to_string()));
        if self.soft_margin >= self.max_len {
            return bad("soft_margin must be < max_len");
        }
        if self.max_box_content == 0 {
            return bad("max_box_content must be >= 1");
        }
        if self.injection_tokens.is_empty() || self.open_pattern.is_empty() {
            return bad("injection_tokens and open_pattern must be non-empty");
        }
        if self.injection_tokens.contains(&self.eos_token) {
            return bad("injection phrase must not contain EOS");
        }
        Ok(())
    }

    fn is_stop(&self, t: TokenId) -> bool {
        self.stop_tokens.contains(&t)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AidState {
    pub position: usize,
    pub is_injecting: bool,
    pub injection_step: usize,
    pub has_boxed: bool,
    pub box_open: bool,
    /// Open braces inside the current box, including the box's own.
    pub box_depth: usize,
    pub box_content_len: usize,
    /// Set after a length-capped box is closed: the next action is `finish`.
    pub must_finish: bool,
    pub finished: bool,
    /// Trailing emitted tokens that may still complete `open_pattern`.
    window: Vec<TokenId>,
}

impl AidState {
    pub fn new() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", content = "token", rename_all = "snake_case")]
pub enum AidAction {
    /// Emit the proposed token.
    Pass(TokenId),
    /// Emit this token instead of the proposal.
    Force(TokenId),
    /// Drop the proposal; nothing is emitted and the position does not move.
    Suppress(TokenId),
    /// Emit EOS and mark the sequence finished.
    Finish,
}

impl AidAction {
    /// Token appended to the output by this action.
    pub fn emitted(self, eos: TokenId) -> Option<TokenId> {
        match self {
            AidAction::Pass(t) | AidAction::Force(t) => Some(t),
            AidAction::Suppress(_) => None,
            AidAction::Finish => Some(eos),
        }
    }
}

fn begin_injection(s: &mut AidState, cfg: &AidConfig) -> AidAction {
    s.is_injecting = true;
    s.injection_step = 0;
    s.window.clear();
    advance_injection(s, cfg)
}

fn advance_injection(s: &mut AidState, cfg: &AidConfig) -> AidAction {
    let tok = cfg.injection_tokens[s.injection_step];
    s.injection_step += 1;
    s.position += 1;
    if s.injection_step == cfg.injection_tokens.len() {
        s.is_injecting = false;
        s.box_open = true;
        s.box_depth = 1;
        s.box_content_len = 0;
    }
    AidAction::Force(tok)
}

/// Emits a forced closing token; returns whether it closed the box itself.
/// Closing a nested brace is box content and counts towards the cap.
fn force_close(s: &mut AidState, cfg: &AidConfig) -> (AidAction, bool) {
    s.position += 1;
    s.box_depth -= 1;
    if s.box_depth == 0 {
        s.box_open = false;
        s.has_boxed = true;
        (AidAction::Force(cfg.close_token), true)
    } else {
        s.box_content_len += 1;
        (AidAction::Force(cfg.close_token), false)
    }
}

/// Content tokens still available once the closes of nested braces are
/// reserved.
fn box_budget(s: &AidState, cfg: &AidConfig) -> usize {
    cfg.max_box_content
        .saturating_sub(s.box_content_len + s.box_depth.saturating_sub(1))
}

/// Budget a proposal would consume inside a box.
fn box_cost(tok: TokenId, cfg: &AidConfig) -> usize {
    if tok == cfg.close_token {
        0
    } else if cfg.nested_open_tokens.contains(&tok) {
        2
    } else {
        1
    }
}

fn finish(s: &mut AidState) -> AidAction {
    s.position += 1;
    s.finished = true;
    AidAction::Finish
}

fn pass(s: &mut AidState, cfg: &AidConfig, tok: TokenId) -> AidAction {
    s.position += 1;
    if s.box_open {
        if tok == cfg.close_token {
            s.box_depth -= 1;
            if s.box_depth == 0 {
                s.box_open = false;
                s.has_boxed = true;
                return AidAction::Pass(tok);
            }
        } else if cfg.nested_open_tokens.contains(&tok) {
            s.box_depth += 1;
        }
        s.box_content_len += 1;
        return AidAction::Pass(tok);
    }
    s.window.push(tok);
    let p = &cfg.open_pattern;
    if s.window.ends_with(p) {
        s.window.clear();
        s.box_open = true;
        s.box_depth = 1;
        s.box_content_len = 0;
    } else {
        // keep only the longest suffix that is still a prefix of the pattern
        let keep = (1..p.len().min(s.window.len() + 1))
            .rev()
            .find(|&n| s.window[s.window.len() - n..] == p[..n])
            .unwrap_or(0);
        let drop = s.window.len() - keep;
        s.window.drain(..drop);
    }
    AidAction::Pass(tok)
}

/// Advances one sequence by one proposed token.
pub fn step(
    state: &AidState,
    proposed: TokenId,
    cfg: &AidConfig,
) -> Result<(AidAction, AidState), AidError> {
    if state.finished {
        return Err(AidError::StepAfterFinish);
    }
    let mut s = state.clone();
    let eos = proposed == cfg.eos_token;
    let no_box = !s.has_boxed && !s.box_open;

    let action = if s.is_injecting {
        advance_injection(&mut s, cfg)
    } else if s.must_finish {
        finish(&mut s)
    } else if eos && no_box {
        begin_injection(&mut s, cfg)
    } else if no_box && s.position >= cfg.max_len - cfg.soft_margin {
        begin_injection(&mut s, cfg)
    } else if s.box_open && eos {
        force_close(&mut s, cfg).0
    } else if s.box_open
        && (box_cost(proposed, cfg) > box_budget(&s, cfg) || s.position + s.box_depth >= cfg.max_len)
    {
        let (action, closed) = force_close(&mut s, cfg);
        if closed {
            s.must_finish = true;
        }
        action
    } else if !s.has_boxed && cfg.is_stop(proposed) {
        AidAction::Suppress(proposed)
    } else if eos || s.position >= cfg.max_len {
        // a closed box exists: normal termination, or the hard length limit
        finish(&mut s)
    } else {
        pass(&mut s, cfg, proposed)
    };
    Ok((action, s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub proposed: TokenId,
    #[serde(flatten)]
    pub action: AidAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AidOutcome {
    pub tokens: Vec<TokenId>,
    pub trace: Vec<TraceStep>,
    pub forced: usize,
    pub suppressed: usize,
    pub final_state: AidState,
}

/// Drives a proposal stream through the state machine until `finish`.
pub fn run_to_completion<I>(stream: I, cfg: &AidConfig) -> Result<AidOutcome, AidError>
where
    I: IntoIterator<Item = TokenId>,
{
    cfg.validate()?;
    let mut state = AidState::new();
    let mut out = AidOutcome {
        tokens: Vec::new(),
        trace: Vec::new(),
        forced: 0,
        suppressed: 0,
        final_state: AidState::new(),
    };
    for proposed in stream {
        let (action, next) = step(&state, proposed, cfg)?;
        state = next;
        match action {
            AidAction::Force(_) => out.forced += 1,
            AidAction::Suppress(_) => out.suppressed += 1,
            _ => {}
        }
        if let Some(t) = action.emitted(cfg.eos_token) {
            out.tokens.push(t);
        }
        out.trace.push(TraceStep { proposed, action });
        if state.finished {
            out.final_state = state;
            return Ok(out);
        }
    }
    out.final_state = state;
    Err(AidError::StreamExhausted(Box::new(out)))
}

/// Independent states for a batch of sequences, keyed by sequence id.
#[derive(Debug, Clone, Default)]
pub struct AidBatch {
    states: BTreeMap<u64, AidState>,
}

impl AidBatch {
    pub fn new(ids: impl IntoIterator<Item = u64>) -> Self {
        Self {
            states: ids.into_iter().map(|id| (id, AidState::new())).collect(),
        }
    }

    /// Steps every listed sequence; finished ones are skipped and reported as `None`.
    pub fn step(
        &mut self,
        proposals: &[(u64, TokenId)],
        cfg: &AidConfig,
    ) -> Vec<(u64, Option<AidAction>)> {
        proposals
            .iter()
            .map(|&(id, tok)| {
                let st = self.states.entry(id).or_default();
                match step(st, tok, cfg) {
                    Ok((action, next)) => {
                        *st = next;
                        (id, Some(action))
                    }
                    Err(_) => (id, None),
                }
            })
            .collect()
    }

    pub fn finished_mask(&self) -> BTreeMap<u64, bool> {
        self.states.iter().map(|(&id, s)| (id, s.finished)).collect()
    }

    pub fn state(&self, id: u64) -> Option<&AidState> {
        self.states.get(&id)
    }
}

/// How a finished completion from a remote endpoint should be repaired.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TextRepair {
    /// Already ends with a closed box.
    Unchanged,
    /// An unclosed box was trimmed to the content limit and closed.
    Closed(String),
    /// No box at all: this prefix (text + injection phrase) must be continued
    /// by the model, with the continuation closed at `}`.
    NeedsContinuation(String),
}

/// Post-hoc repair of a completion when decoding cannot be intercepted.
///
/// `max_content_chars` bounds the content of a force-closed box. This only
/// approximates in-engine injection: the model never sees the forced tokens.
pub fn repair_text(text: &str, max_content_chars: usize) -> TextRepair {
    match last_boxed_span(text) {
        Some((_, _, true)) => TextRepair::Unchanged,
        Some((start, _, false)) => {
            let content: String = text[start..].chars().take(max_content_chars).collect();
            TextRepair::Closed(format!("{}{}}}", &text[..start], content))
        }
        None => TextRepair::NeedsContinuation(format!("{}{}", text.trim_end(), INJECTION_TEXT)),
    }
}

/// One-symbol-per-token vocabulary used by tests, benches and `aid-trace`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyVocab {
    pub symbols: Vec<String>,
}

impl ToyVocab {
    pub const EOS: TokenId = 0;
    pub const OPEN_BOX: TokenId = 1;
    pub const CLOSE: TokenId = 2;
    pub const OPEN_BRACE: TokenId = 3;
    pub const STOP: TokenId = 4;
    /// Tokens 5..=10 plus [`Self::OPEN_BOX`] spell the injection phrase.
    pub const INJECTION: [TokenId; 7] = [5, 6, 7, 8, 9, 10, Self::OPEN_BOX];

    /// A 50-symbol vocabulary: specials, the injection words, digits, letters
    /// and a few operators.
    pub fn standard() -> Self {
        let mut symbols: Vec<String> = [
            "", "\\boxed{", "}", "{", "\n\n", "\n", "So,", " the", " answer", " is", " ",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        symbols.extend((0..10).map(|d| d.to_string()));
        symbols.extend("abcdefghijklmnop".chars().map(|c| c.to_string()));
        symbols.extend(["+", "-", "*", "/", "=", "(", ")", ".", "^", ","].map(String::from));
        symbols.extend(["x", "y", "z"].map(String::from));
        debug_assert_eq!(symbols.len(), 50);
        Self { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn config(&self, max_len: usize) -> AidConfig {
        AidConfig {
            injection_tokens: Self::INJECTION.to_vec(),
            open_pattern: vec![Self::OPEN_BOX],
            close_token: Self::CLOSE,
            nested_open_tokens: vec![Self::OPEN_BRACE, Self::OPEN_BOX],
            eos_token: Self::EOS,
            stop_tokens: vec![Self::STOP],
            max_len,
            soft_margin: DEFAULT_SOFT_MARGIN.min(max_len.saturating_sub(1)),
            max_box_content: DEFAULT_MAX_BOX_CONTENT,
        }
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.symbols.get(t as usize).map_or("\u{fffd}", String::as_str))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AidConfig {
        let mut c = ToyVocab::standard().config(400);
        c.soft_margin = 150;
        c
    }

    const DIGIT_4: TokenId = 15;
    const LETTER_A: TokenId = 21;

    #[test]
    fn premature_eos_triggers_injection() {
        let c = cfg();
        let (a, s) = step(&AidState::new(), ToyVocab::EOS, &c).unwrap();
        assert_eq!(a, AidAction::Force(ToyVocab::INJECTION[0]));
        assert!(s.is_injecting);
        assert_eq!(s.injection_step, 1);
    }

    #[test]
    fn content_cap_forces_close_then_finish() {
        let c = cfg();
        let s = AidState {
            box_open: true,
            box_depth: 1,
            box_content_len: c.max_box_content,
            position: 60,
            ..AidState::new()
        };
        let (a, s) = step(&s, LETTER_A, &c).unwrap();
        assert_eq!(a, AidAction::Force(ToyVocab::CLOSE));
        assert!(s.has_boxed && !s.box_open && s.must_finish);
        let (a, s) = step(&s, LETTER_A, &c).unwrap();
        assert_eq!(a, AidAction::Finish);
        assert!(s.finished);
    }

    #[test]
    fn eos_after_closed_box_finishes() {
        let c = cfg();
        let s = AidState {
            has_boxed: true,
            position: 12,
            ..AidState::new()
        };
        let (a, s) = step(&s, ToyVocab::EOS, &c).unwrap();
        assert_eq!(a, AidAction::Finish);
        assert!(s.finished);
        assert_eq!(step(&s, LETTER_A, &c), Err(AidError::StepAfterFinish));
    }

    #[test]
    fn eos_inside_open_box_is_replaced_by_close() {
        let c = cfg();
        let s = AidState {
            box_open: true,
            box_depth: 1,
            box_content_len: 3,
            ..AidState::new()
        };
        let (a, s) = step(&s, ToyVocab::EOS, &c).unwrap();
        assert_eq!(a, AidAction::Force(ToyVocab::CLOSE));
        assert!(s.has_boxed && !s.box_open && !s.must_finish);
    }

    #[test]
    fn stop_tokens_suppressed_before_box() {
        let c = cfg();
        let (a, s) = step(&AidState::new(), ToyVocab::STOP, &c).unwrap();
        assert_eq!(a, AidAction::Suppress(ToyVocab::STOP));
        assert_eq!(s.position, 0);
        let s = AidState {
            has_boxed: true,
            ..AidState::new()
        };
        assert_eq!(
            step(&s, ToyVocab::STOP, &c).unwrap().0,
            AidAction::Pass(ToyVocab::STOP)
        );
    }

    #[test]
    fn natural_box_is_left_alone() {
        let c = cfg();
        let stream = [LETTER_A, ToyVocab::OPEN_BOX, DIGIT_4, DIGIT_4 + 1, ToyVocab::CLOSE, ToyVocab::EOS];
        let out = run_to_completion(stream, &c).unwrap();
        assert_eq!(out.tokens, stream);
        assert_eq!(out.forced, 0);
    }

    #[test]
    fn immediate_eos_stream_trace() {
        // hand trace: EOS -> inject 7 tokens (box opens on the last) -> EOS
        // inside the box is replaced by "}" -> EOS finishes
        let c = cfg();
        let out = run_to_completion(std::iter::repeat(ToyVocab::EOS).take(20), &c).unwrap();
        let mut expected = ToyVocab::INJECTION.to_vec();
        expected.push(ToyVocab::CLOSE);
        expected.push(ToyVocab::EOS);
        assert_eq!(out.tokens, expected);
        let v = ToyVocab::standard();
        assert_eq!(v.render(&out.tokens), "\nSo, the answer is \\boxed{}");
    }

    #[test]
    fn soft_limit_injection_position() {
        let c = cfg();
        let out = run_to_completion(std::iter::repeat(LETTER_A).take(c.max_len), &c).unwrap();
        let first_forced = out
            .trace
            .iter()
            .position(|t| matches!(t.action, AidAction::Force(_)))
            .unwrap();
        assert_eq!(first_forced, c.max_len - c.soft_margin);
        // the box is then filled to the cap and closed
        assert_eq!(out.final_state.box_content_len, c.max_box_content);
        assert_eq!(*out.tokens.last().unwrap(), ToyVocab::EOS);
    }

    #[test]
    fn nested_braces_are_closed_in_order() {
        let mut c = cfg();
        c.max_box_content = 3;
        let stream = [
            ToyVocab::OPEN_BOX,
            ToyVocab::OPEN_BRACE,
            LETTER_A,
            LETTER_A,
            LETTER_A,
            LETTER_A,
            LETTER_A,
            LETTER_A,
        ];
        let out = run_to_completion(stream, &c).unwrap();
        let v = ToyVocab::standard();
        // the inner "}" is content too, so only one "a" fits in three tokens
        assert_eq!(v.render(&out.tokens), "\\boxed{{a}}");
        assert_eq!(out.final_state.box_content_len, 3);
        assert!(out.final_state.finished);
    }

    #[test]
    fn natural_close_at_the_cap_is_passed() {
        let mut c = cfg();
        c.max_box_content = 2;
        let stream = [ToyVocab::OPEN_BOX, LETTER_A, LETTER_A, ToyVocab::CLOSE, ToyVocab::EOS];
        let out = run_to_completion(stream, &c).unwrap();
        assert_eq!(out.tokens, stream);
        assert_eq!(out.forced, 0);
    }

    #[test]
    fn deep_nesting_near_the_hard_limit_stays_in_bounds() {
        let mut c = cfg();
        c.max_len = 20;
        c.soft_margin = 5;
        let mut stream = vec![ToyVocab::OPEN_BOX];
        stream.extend(std::iter::repeat(ToyVocab::OPEN_BRACE).take(40));
        let out = run_to_completion(stream, &c).unwrap();
        assert!(out.tokens.len() <= c.max_len + c.injection_tokens.len() + 2);
        assert_eq!(*out.tokens.last().unwrap(), ToyVocab::EOS);
    }

    #[test]
    fn exhausted_stream_is_reported() {
        let c = cfg();
        match run_to_completion([LETTER_A, LETTER_A], &c) {
            Err(AidError::StreamExhausted(o)) => assert_eq!(o.tokens.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn multi_token_open_pattern() {
        // "\boxed{" spelled as three tokens: 30 ("\") 31 ("boxed") 3 ("{")
        let mut c = cfg();
        c.open_pattern = vec![30, 31, ToyVocab::OPEN_BRACE];
        let out = run_to_completion([30, 30, 31, 3, DIGIT_4, ToyVocab::CLOSE, ToyVocab::EOS], &c).unwrap();
        assert_eq!(out.forced, 0);
        assert!(out.final_state.has_boxed);
    }

    #[test]
    fn batch_states_are_independent() {
        let c = cfg();
        let mut b = AidBatch::new([1, 2]);
        b.step(&[(1, ToyVocab::EOS), (2, LETTER_A)], &c);
        assert!(b.state(1).unwrap().is_injecting);
        assert!(!b.state(2).unwrap().is_injecting);
        assert_eq!(b.finished_mask(), BTreeMap::from([(1, false), (2, false)]));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = cfg();
        c.soft_margin = c.max_len;
        assert!(matches!(run_to_completion([0], &c), Err(AidError::InvalidConfig(_))));
    }

    #[test]
    fn text_repair_modes() {
        assert_eq!(repair_text("x \\boxed{3}", 40), TextRepair::Unchanged);
        assert_eq!(
            repair_text("x \\boxed{123456", 3),
            TextRepair::Closed("x \\boxed{123}".into())
        );
        assert_eq!(
            repair_text("so it is 3  ", 40),
            TextRepair::NeedsContinuation("so it is 3\nSo, the answer is \\boxed{".into())
        );
    }
}
