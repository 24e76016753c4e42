use serde::Serialize;

use crate::compiler::{SubgraphId, SubgraphPhase};
use crate::strategy::NodeId;

/// Per-unit scheduler state.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SchedulerState {
    pub unit: usize,
    pub active: Option<SubgraphId>,
    pub last_backward_origin: Option<NodeId>,
}

/// A dependency-free instance offered to the scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub id: SubgraphId,
    pub phase: SubgraphPhase,
    pub origin: NodeId,
    pub micro_batch: u32,
    /// Completing this instance makes some backward instance ready.
    pub enables_backward: bool,
}

/// Picks the next instance to run.
///
/// Backward and recompute instances win over forwards and rotate across
/// origins after the last one served. Among forwards, one that unblocks a
/// backward is preferred. Remaining ties go to the lowest (origin, micro-batch).
pub fn select_next_subgraph(
    state: &SchedulerState,
    candidates: &[Candidate],
) -> Option<SubgraphId> {
    let key = |c: &&&Candidate| (c.origin, c.micro_batch, c.id);
    let back: Vec<&Candidate> = candidates
        .iter()
        .filter(|c| c.phase != SubgraphPhase::Forward)
        .collect();
    if !back.is_empty() {
        let after = back
            .iter()
            .filter(|c| state.last_backward_origin.is_some_and(|o| c.origin > o))
            .min_by_key(key);
        return after.or_else(|| back.iter().min_by_key(key)).map(|c| c.id);
    }
    candidates
        .iter()
        .min_by_key(|c| (!c.enables_backward, c.origin, c.micro_batch, c.id))
        .map(|c| c.id)
}
