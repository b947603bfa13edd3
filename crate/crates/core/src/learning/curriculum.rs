use serde::{Deserialize, Serialize};

pub const DEFAULT_TAU: f64 = 0.25;

/// Per-sequence episode horizon and the counters that grow it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub successes: u32,
    pub episodes: u32,
    /// Current terminal step `T̂`.
    pub terminal: usize,
    /// Largest allowed terminal step `T` for the sequence.
    pub max_terminal: usize,
}

impl CurriculumState {
    /// Starts at `initial`, clamped into `1..=max_terminal`.
    pub fn new(initial: usize, max_terminal: usize) -> Self {
        let max_terminal = max_terminal.max(1);
        Self {
            successes: 0,
            episodes: 0,
            terminal: initial.clamp(1, max_terminal),
            max_terminal,
        }
    }
}

/// Records one finished episode; returns whether the horizon advanced.
pub fn curriculum_update(state: &mut CurriculumState, sum_student: f64, sum_teacher: f64, tau: f64) -> bool {
    state.episodes += 1;
    if sum_student >= sum_teacher {
        state.successes += 1;
    }
    if f64::from(state.successes) / f64::from(state.episodes) >= tau {
        state.terminal = (state.terminal + 1).min(state.max_terminal);
        state.successes = 0;
        state.episodes = 0;
        true
    } else {
        false
    }
}
