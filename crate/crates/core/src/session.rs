//! Session state: the ordered evidence set, the capability and turn histories,
//! and token-budget enforcement.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::capability::Capability;
use crate::images::ImageRef;
use crate::protocol::ReasoningTurn;
use crate::provider::{Message, ProviderMessages, Role};
use crate::task::TaskInstance;

pub const IMAGE_TOKEN_OVERHEAD: u64 = 8;

/// `ceil(chars / 4)` plus a fixed overhead per image reference.
pub fn estimate_tokens(text: &str, image_count: usize) -> u64 {
    let chars = text.chars().count() as u64;
    chars.div_ceil(4) + IMAGE_TOKEN_OVERHEAD * image_count as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceKind {
    TaskText,
    InputImage,
    ModelTurn,
    Observation,
    ProtocolError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub id: String,
    pub kind: EvidenceKind,
    pub text: String,
    #[serde(default)]
    pub images: Vec<ImageRef>,
    pub pinned: bool,
    pub approx_tokens: u64,
    pub turn_of_origin: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    Tool,
    ProtocolError,
}

/// Result of a tool execution, or a synthesized protocol-error notice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub kind: ObservationKind,
    pub tool: Option<String>,
    pub text: String,
    #[serde(default)]
    pub images: Vec<ImageRef>,
}

impl Observation {
    pub fn tool(tool: &str, text: impl Into<String>, images: Vec<ImageRef>) -> Self {
        Self {
            kind: ObservationKind::Tool,
            tool: Some(tool.to_string()),
            text: text.into(),
            images,
        }
    }

    pub fn protocol_error(text: impl Into<String>) -> Self {
        Self {
            kind: ObservationKind::ProtocolError,
            tool: None,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn approx_tokens(&self) -> u64 {
        estimate_tokens(&self.text, self.images.len())
    }

    /// Stable content digest (hex SHA-256) over kind, tool, text and image ids.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.kind).expect("kind serializes"));
        h.update([0]);
        h.update(self.tool.as_deref().unwrap_or("").as_bytes());
        h.update([0]);
        h.update(self.text.as_bytes());
        for img in &self.images {
            h.update([0]);
            h.update(img.id.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("task has an empty instruction")]
    EmptyInstruction,
    #[error("pinned items need {pinned} tokens but the budget is {budget}")]
    BudgetTooSmall { pinned: u64, budget: u64 },
    #[error("observation needs {tokens} tokens but only {capacity} are available beyond pinned items")]
    ObservationTooLarge { tokens: u64, capacity: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub evidence: Vec<EvidenceItem>,
    pub capability_history: Vec<Capability>,
    pub turn_history: Vec<ReasoningTurn>,
    pub budget_tokens: u64,
    pub used_tokens: u64,
    /// Ids of evicted items, in eviction order.
    pub evicted: Vec<String>,
    next_seq: u64,
}

impl SessionState {
    /// Evidence starts as the pinned task text followed by the pinned input images.
    pub fn init(task: &TaskInstance, budget_tokens: u64) -> Result<Self, SessionError> {
        if task.instruction.trim().is_empty() {
            return Err(SessionError::EmptyInstruction);
        }
        let mut state = Self {
            evidence: Vec::new(),
            capability_history: Vec::new(),
            turn_history: Vec::new(),
            budget_tokens,
            used_tokens: 0,
            evicted: Vec::new(),
            next_seq: 0,
        };
        state.push(EvidenceKind::TaskText, task.instruction.clone(), Vec::new(), true, 0);
        for image in &task.images {
            state.push(
                EvidenceKind::InputImage,
                format!("input image {} ({}x{})", image.id, image.width, image.height),
                vec![image.clone()],
                true,
                0,
            );
        }
        let pinned = state.pinned_tokens();
        if pinned >= budget_tokens {
            return Err(SessionError::BudgetTooSmall {
                pinned,
                budget: budget_tokens,
            });
        }
        Ok(state)
    }

    fn push(
        &mut self,
        kind: EvidenceKind,
        text: String,
        images: Vec<ImageRef>,
        pinned: bool,
        turn: u32,
    ) -> String {
        let id = format!("ev-{}", self.next_seq);
        self.next_seq += 1;
        let approx_tokens = estimate_tokens(&text, images.len());
        self.used_tokens += approx_tokens;
        self.evidence.push(EvidenceItem {
            id: id.clone(),
            kind,
            text,
            images,
            pinned,
            approx_tokens,
            turn_of_origin: turn,
        });
        id
    }

    pub fn pinned_tokens(&self) -> u64 {
        self.evidence
            .iter()
            .filter(|e| e.pinned)
            .map(|e| e.approx_tokens)
            .sum()
    }

    /// Tokens available to unpinned items.
    pub fn capacity(&self) -> u64 {
        self.budget_tokens.saturating_sub(self.pinned_tokens())
    }

    pub fn current_turn(&self) -> u32 {
        self.evidence.iter().map(|e| e.turn_of_origin).max().unwrap_or(0)
    }

    /// Eviction candidates in the order they will be removed: old observations,
    /// then old model turns, then (last resort) anything unpinned from the two
    /// most recent turns.
    fn eviction_order(&self, turn: u32) -> Vec<usize> {
        let recent = |e: &EvidenceItem| e.turn_of_origin + 1 >= turn;
        let is_obs = |e: &EvidenceItem| {
            matches!(e.kind, EvidenceKind::Observation | EvidenceKind::ProtocolError)
        };
        let unpinned = || self.evidence.iter().enumerate().filter(|(_, e)| !e.pinned);
        let mut order: Vec<usize> = unpinned()
            .filter(|(_, e)| is_obs(e) && !recent(e))
            .map(|(i, _)| i)
            .collect();
        order.extend(
            unpinned()
                .filter(|(_, e)| e.kind == EvidenceKind::ModelTurn && !recent(e))
                .map(|(i, _)| i),
        );
        order.extend(unpinned().filter(|(_, e)| is_obs(e) && recent(e)).map(|(i, _)| i));
        order.extend(
            unpinned()
                .filter(|(_, e)| e.kind == EvidenceKind::ModelTurn && recent(e))
                .map(|(i, _)| i),
        );
        order
    }

    /// Evicts until `incoming` more tokens fit. Returns evicted ids.
    fn make_room(&mut self, incoming: u64, turn: u32) -> Vec<String> {
        let mut victims = Vec::new();
        let mut used = self.used_tokens;
        for i in self.eviction_order(turn) {
            if used + incoming <= self.budget_tokens {
                break;
            }
            used -= self.evidence[i].approx_tokens;
            victims.push(i);
        }
        victims.sort_unstable();
        let mut ids = Vec::with_capacity(victims.len());
        for &i in victims.iter().rev() {
            let item = self.evidence.remove(i);
            ids.push(item.id);
        }
        ids.reverse();
        self.used_tokens = used;
        self.evicted.extend(ids.iter().cloned());
        ids
    }

    /// Appends an observation from `turn`, evicting older unpinned evidence as
    /// needed. Returns the ids of evicted items.
    pub fn append_observation(
        &mut self,
        observation: &Observation,
        turn: u32,
    ) -> Result<Vec<String>, SessionError> {
        let tokens = observation.approx_tokens();
        let capacity = self.capacity();
        if tokens > capacity {
            return Err(SessionError::ObservationTooLarge { tokens, capacity });
        }
        let turn = turn.max(self.current_turn());
        let evicted = self.make_room(tokens, turn);
        let kind = match observation.kind {
            ObservationKind::Tool => EvidenceKind::Observation,
            ObservationKind::ProtocolError => EvidenceKind::ProtocolError,
        };
        self.push(kind, observation.text.clone(), observation.images.clone(), false, turn);
        debug_assert!(self.used_tokens <= self.budget_tokens);
        Ok(evicted)
    }

    /// Records a model turn in the turn history and as evidence. A turn too
    /// large for the budget is kept in history but elided from evidence.
    pub fn record_turn(&mut self, turn: ReasoningTurn) -> Vec<String> {
        let index = turn.index.max(self.current_turn());
        let mut text = turn.raw.clone();
        let capacity = self.capacity();
        if estimate_tokens(&text, 0) > capacity {
            text = format!(
                "[turn {} elided: {} tokens exceed the context budget]",
                turn.index,
                estimate_tokens(&turn.raw, 0)
            );
            if estimate_tokens(&text, 0) > capacity {
                text.clear();
            }
        }
        let evicted = self.make_room(estimate_tokens(&text, 0), index);
        self.push(EvidenceKind::ModelTurn, text, Vec::new(), false, index);
        self.turn_history.push(turn);
        evicted
    }

    pub fn record_capability(&mut self, capability: Capability) {
        self.capability_history.push(capability);
    }

    /// Deterministic provider input: system prompt, evidence in order, then a
    /// capability-history line once any tool has run.
    pub fn serialize_context(&self, system_prompt: &str) -> ProviderMessages {
        let mut messages = ProviderMessages::new(system_prompt);
        for item in &self.evidence {
            let (role, text) = match item.kind {
                EvidenceKind::TaskText => (Role::User, format!("Task: {}", item.text)),
                EvidenceKind::InputImage => (Role::User, item.text.clone()),
                EvidenceKind::ModelTurn => (Role::Assistant, item.text.clone()),
                EvidenceKind::Observation => (
                    Role::User,
                    format!("Observation (turn {}):\n{}", item.turn_of_origin, item.text),
                ),
                EvidenceKind::ProtocolError => (
                    Role::User,
                    format!("Protocol error (turn {}): {}", item.turn_of_origin, item.text),
                ),
            };
            messages.push(Message {
                role,
                text,
                images: item.images.clone(),
            });
        }
        if !self.capability_history.is_empty() {
            let names: Vec<&str> = self.capability_history.iter().map(|c| c.id()).collect();
            messages.push(Message {
                role: Role::User,
                text: format!("Capabilities used so far: {}", names.join(", ")),
                images: Vec::new(),
            });
        }
        messages
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        let sum: u64 = self.evidence.iter().map(|e| e.approx_tokens).sum();
        if sum != self.used_tokens {
            return Err(format!("used_tokens {} != sum {}", self.used_tokens, sum));
        }
        if self.used_tokens > self.budget_tokens {
            return Err(format!("used {} > budget {}", self.used_tokens, self.budget_tokens));
        }
        if let Some(e) = self
            .evidence
            .iter()
            .find(|e| matches!(e.kind, EvidenceKind::TaskText | EvidenceKind::InputImage) && !e.pinned)
        {
            return Err(format!("{} should be pinned", e.id));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::parse_turn;
    use crate::task::AnswerMode;

    fn task(images: usize) -> TaskInstance {
        let mut t = TaskInstance::text("t1", "find the area", "6", AnswerMode::ExactText);
        for i in 0..images {
            t.images.push(ImageRef {
                id: format!("img-{i}"),
                width: 10,
                height: 10,
            });
        }
        t
    }

    fn obs(chars: usize) -> Observation {
        Observation::tool("eval_expression", "x".repeat(chars), vec![])
    }

    #[test]
    fn token_estimate() {
        assert_eq!(estimate_tokens("", 0), 0);
        assert_eq!(estimate_tokens("abcd", 0), 1);
        assert_eq!(estimate_tokens("abcde", 0), 2);
        assert_eq!(estimate_tokens("é", 2), 17);
    }

    #[test]
    fn init_pins_task_text_and_images() {
        let s = SessionState::init(&task(1), 60_000).unwrap();
        assert_eq!(s.evidence.len(), 2);
        assert!(s.evidence.iter().all(|e| e.pinned));
        assert_eq!(s.evidence[0].kind, EvidenceKind::TaskText);
        assert_eq!(s.evidence[1].kind, EvidenceKind::InputImage);
        assert!(s.capability_history.is_empty() && s.turn_history.is_empty());
        assert_eq!(s.used_tokens, s.evidence.iter().map(|e| e.approx_tokens).sum::<u64>());

        let text_only = SessionState::init(&task(0), 60_000).unwrap();
        assert_eq!(text_only.evidence.len(), 1);
    }

    #[test]
    fn init_rejects_tiny_budget_and_empty_instruction() {
        assert!(matches!(
            SessionState::init(&task(1), 1),
            Err(SessionError::BudgetTooSmall { .. })
        ));
        let mut t = task(0);
        t.instruction = "  ".into();
        assert_eq!(SessionState::init(&t, 100), Err(SessionError::EmptyInstruction));
    }

    #[test]
    fn small_observation_appends_without_eviction() {
        let mut s = SessionState::init(&task(0), 1000).unwrap();
        let evicted = s.append_observation(&obs(40), 1).unwrap();
        assert!(evicted.is_empty());
        assert_eq!(s.evidence.len(), 2);
        s.check_invariants().unwrap();
    }

    #[test]
    fn oversized_observation_is_rejected() {
        let mut s = SessionState::init(&task(0), 100).unwrap();
        let err = s.append_observation(&obs(4000), 1).unwrap_err();
        assert!(matches!(err, SessionError::ObservationTooLarge { tokens: 1000, .. }));
        assert_eq!(s.evidence.len(), 1);
    }

    /// Brute-force oracle: among all subsets of unpinned items whose removal
    /// lets `incoming` fit, keep those closed under the priority order
    /// (observations before model turns, older before newer, older turns
    /// before the two most recent) and take the smallest.
    fn oracle_evictions(s: &SessionState, incoming: u64, turn: u32) -> Vec<String> {
        let candidates: Vec<&EvidenceItem> = s.evidence.iter().filter(|e| !e.pinned).collect();
        let rank = |e: &EvidenceItem| {
            let recent = e.turn_of_origin + 1 >= turn;
            let obs = matches!(e.kind, EvidenceKind::Observation | EvidenceKind::ProtocolError);
            let class = match (recent, obs) {
                (false, true) => 0,
                (false, false) => 1,
                (true, true) => 2,
                (true, false) => 3,
            };
            let pos = s.evidence.iter().position(|x| x.id == e.id).unwrap();
            (class, pos)
        };
        let n = candidates.len();
        let mut best: Option<Vec<&EvidenceItem>> = None;
        for mask in 0u32..(1 << n) {
            let chosen: Vec<&EvidenceItem> =
                (0..n).filter(|i| mask & (1 << i) != 0).map(|i| candidates[i]).collect();
            let freed: u64 = chosen.iter().map(|e| e.approx_tokens).sum();
            if s.used_tokens - freed + incoming > s.budget_tokens {
                continue;
            }
            let closed = candidates.iter().all(|c| {
                let in_set = chosen.iter().any(|x| x.id == c.id);
                in_set || chosen.iter().all(|x| rank(x) < rank(c))
            });
            if closed && best.as_ref().map_or(true, |b| chosen.len() < b.len()) {
                best = Some(chosen);
            }
        }
        let mut ids: Vec<String> = best.unwrap().iter().map(|e| e.id.clone()).collect();
        ids.sort_by_key(|id| s.evidence.iter().position(|e| &e.id == id));
        ids
    }

    #[test]
    fn eviction_prefers_old_observations_then_old_turns() {
        // pinned task (4 tokens), then turn 1 (model 10 + obs 10), turn 2 (model 10 + obs 10)
        let mut t = task(0);
        t.instruction = "x".repeat(16);
        let mut s = SessionState::init(&t, 60).unwrap();
        s.record_turn(parse_turn(&"m".repeat(40), 1));
        s.append_observation(&obs(40), 1).unwrap();
        s.record_turn(parse_turn(&"n".repeat(40), 2));
        s.append_observation(&obs(40), 2).unwrap();
        assert_eq!(s.used_tokens, 44);
        let turn1_obs = s.evidence[2].id.clone();
        let turn1_model = s.evidence[1].id.clone();

        // turn 3 observation of 20 tokens: 44 + 20 > 60 -> evict one turn-1 observation
        let mut probe = s.clone();
        probe.record_turn(parse_turn("", 3));
        let expected = oracle_evictions(&probe, 20, 3);
        let evicted = probe.append_observation(&obs(80), 3).unwrap();
        assert_eq!(evicted, expected);
        assert_eq!(evicted, vec![turn1_obs.clone()]);

        // a 30-token observation must also drop the turn-1 model turn
        let mut probe = s.clone();
        probe.record_turn(parse_turn("", 3));
        let expected = oracle_evictions(&probe, 30, 3);
        let evicted = probe.append_observation(&obs(120), 3).unwrap();
        assert_eq!(evicted, expected);
        assert_eq!(evicted, vec![turn1_model, turn1_obs]);
        probe.check_invariants().unwrap();
        assert!(probe.evidence[0].pinned);
    }

    #[test]
    fn history_line_appears_after_first_tool() {
        let mut s = SessionState::init(&task(1), 10_000).unwrap();
        let fresh = s.serialize_context("SYS");
        assert_eq!(fresh.messages().len(), 3);
        assert_eq!(fresh.messages()[0].role, Role::System);
        assert_eq!(fresh.messages()[2].images.len(), 1);

        s.record_turn(parse_turn("<cap>Logic</cap><tool_call>{}</tool_call>", 1));
        s.append_observation(&obs(8), 1).unwrap();
        s.record_capability(Capability::Logic);
        let after = s.serialize_context("SYS");
        let roles: Vec<Role> = after.messages().iter().map(|m| m.role).collect();
        assert_eq!(
            roles,
            [Role::System, Role::User, Role::User, Role::Assistant, Role::User, Role::User]
        );
        assert!(after.messages()[4].text.starts_with("Observation (turn 1):"));
        assert_eq!(after.messages()[5].text, "Capabilities used so far: Logic");
        assert_eq!(after, s.serialize_context("SYS"));
    }

    #[test]
    fn huge_model_turn_is_elided_from_evidence() {
        let mut s = SessionState::init(&task(0), 100).unwrap();
        s.record_turn(parse_turn(&"z".repeat(10_000), 1));
        assert_eq!(s.turn_history.len(), 1);
        assert!(s.evidence[1].text.contains("elided"));
        s.check_invariants().unwrap();
    }

    #[test]
    fn observation_digest_tracks_content() {
        let a = obs(3);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.text.push('!');
        assert_ne!(a.digest(), b.digest());
        assert_ne!(Observation::protocol_error("xxx").digest(), a.digest());
    }
}
