//! Lab task state machine and cycle-time accounting.
//!
//! A cycle runs from the start of a Pick step to the start of the next one.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStep {
    Connect,
    Pick,
    Place,
    Test,
    Return,
}

impl TaskStep {
    pub const ALL: [TaskStep; 5] = [
        TaskStep::Connect,
        TaskStep::Pick,
        TaskStep::Place,
        TaskStep::Test,
        TaskStep::Return,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskEvent {
    Connected,
    #[serde(rename = "pick")]
    PickDetected,
    #[serde(rename = "place")]
    PlaceDetected,
    TestComplete,
    Returned,
}

impl TaskEvent {
    pub const ALL: [TaskEvent; 5] = [
        TaskEvent::Connected,
        TaskEvent::PickDetected,
        TaskEvent::PlaceDetected,
        TaskEvent::TestComplete,
        TaskEvent::Returned,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskEvent::Connected => "connected",
            TaskEvent::PickDetected => "pick",
            TaskEvent::PlaceDetected => "place",
            TaskEvent::TestComplete => "test_complete",
            TaskEvent::Returned => "returned",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleEntry {
    pub iteration: u32,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskTracker {
    step: TaskStep,
    pick_started_at: Option<u64>,
    cycle_log: Vec<CycleEntry>,
    warnings: u64,
}

impl Default for TaskTracker {
    fn default() -> Self {
        Self {
            step: TaskStep::Connect,
            pick_started_at: None,
            cycle_log: Vec::new(),
            warnings: 0,
        }
    }
}

impl TaskTracker {
    pub fn step(&self) -> TaskStep {
        self.step
    }

    pub fn cycle_log(&self) -> &[CycleEntry] {
        &self.cycle_log
    }

    pub fn warnings(&self) -> u64 {
        self.warnings
    }

    /// The event that moves the tracker out of its current step.
    pub fn expected(&self) -> TaskEvent {
        match self.step {
            TaskStep::Connect => TaskEvent::Connected,
            TaskStep::Pick => TaskEvent::PickDetected,
            TaskStep::Place => TaskEvent::PlaceDetected,
            TaskStep::Test => TaskEvent::TestComplete,
            TaskStep::Return => TaskEvent::Returned,
        }
    }

    /// Applies `event` at session time `now_us`. Out-of-order events are
    /// ignored and counted; returns whether the step advanced.
    pub fn advance(&mut self, event: TaskEvent, now_us: u64) -> bool {
        if event != self.expected() {
            self.warnings += 1;
            return false;
        }
        self.step = match self.step {
            TaskStep::Connect => {
                self.pick_started_at = Some(now_us);
                TaskStep::Pick
            }
            TaskStep::Pick => TaskStep::Place,
            TaskStep::Place => TaskStep::Test,
            TaskStep::Test => TaskStep::Return,
            TaskStep::Return => {
                if let Some(start) = self.pick_started_at {
                    let seconds = now_us.saturating_sub(start) as f64 / 1e6;
                    // Zero-length cycles cannot happen with real events.
                    if seconds > 0.0 {
                        self.cycle_log.push(CycleEntry {
                            iteration: self.cycle_log.len() as u32 + 1,
                            seconds,
                        });
                    }
                }
                self.pick_started_at = Some(now_us);
                TaskStep::Pick
            }
        };
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_sequence_logs_one_cycle() {
        let mut t = TaskTracker::default();
        let events = [
            (TaskEvent::Connected, 1_000_000),
            (TaskEvent::PickDetected, 10_000_000),
            (TaskEvent::PlaceDetected, 30_000_000),
            (TaskEvent::TestComplete, 40_000_000),
            (TaskEvent::Returned, 71_500_000),
        ];
        for (e, at) in events {
            assert!(t.advance(e, at));
        }
        assert_eq!(t.cycle_log(), &[CycleEntry { iteration: 1, seconds: 70.5 }]);
        assert_eq!(t.step(), TaskStep::Pick);
        assert_eq!(t.warnings(), 0);
    }

    #[test]
    fn out_of_order_event_is_ignored() {
        let mut t = TaskTracker::default();
        t.advance(TaskEvent::Connected, 0);
        assert!(!t.advance(TaskEvent::PlaceDetected, 5));
        assert_eq!(t.step(), TaskStep::Pick);
        assert_eq!(t.warnings(), 1);
    }

    #[test]
    fn cycles_chain_from_pick_to_pick() {
        let mut t = TaskTracker::default();
        t.advance(TaskEvent::Connected, 0);
        let mut now = 0;
        for k in 1..=3u64 {
            for e in &TaskEvent::ALL[1..] {
                now += 15_000_000 + k;
                t.advance(*e, now);
            }
        }
        let total: f64 = t.cycle_log().iter().map(|c| c.seconds).sum();
        assert_eq!(t.cycle_log().len(), 3);
        assert!((total - now as f64 / 1e6).abs() < 1e-9);
    }

    #[test]
    fn codes_round_trip() {
        for s in TaskStep::ALL {
            assert_eq!(TaskStep::from_code(s.code()), Some(s));
        }
        assert_eq!(TaskStep::from_code(5), None);
        for e in TaskEvent::ALL {
            assert_eq!(TaskEvent::parse(e.as_str()), Some(e));
        }
    }
}
