//! Machine-parseable event log.
//!
//! One line per event: `TRIGGER <unit>`, `SAMPLE <fn> <slot> <type>`,
//! `RECOMPILE <fn> <overrides>`, `DEOPT <fn> <origin> <observed>`,
//! `CLEAR <window>`, plus `TIERUP <fn>` marking first-time tier-up
//! compilations (used to find warmup phase boundaries).

use crate::bytecode::FunctionId;
use crate::feedback::FeedbackType;

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Trigger { unit: u64 },
    Sample { function: FunctionId, slot: u16, observed: FeedbackType },
    Recompile { function: FunctionId, overrides: Vec<(u32, FeedbackType)> },
    Deopt { function: FunctionId, origin_offset: u32, observed: FeedbackType },
    Clear { window: u64 },
    TierUp { function: FunctionId },
}

impl Event {
    pub fn render(&self, name_of: &dyn Fn(FunctionId) -> String) -> String {
        match self {
            Event::Trigger { unit } => format!("TRIGGER {unit}"),
            Event::Sample { function, slot, observed } => {
                format!("SAMPLE {} {} {}", name_of(*function), slot, observed)
            }
            Event::Recompile { function, overrides } => {
                let ov: Vec<String> =
                    overrides.iter().map(|(off, t)| format!("{off}={t}")).collect();
                format!("RECOMPILE {} {}", name_of(*function), ov.join(","))
            }
            Event::Deopt { function, origin_offset, observed } => {
                format!("DEOPT {} {} {}", name_of(*function), origin_offset, observed)
            }
            Event::Clear { window } => format!("CLEAR {window}"),
            Event::TierUp { function } => format!("TIERUP {}", name_of(*function)),
        }
    }
}
