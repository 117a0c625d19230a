//! A two-tier virtual machine for MiniDyn, a small R-like dynamic
//! language, plus a sampling profiler that detects stale type feedback
//! in specialized code and triggers re-specialization.
//!
//! The baseline tier interprets bytecode with recording instructions
//! that gather type feedback. The second tier compiles functions to
//! guarded, type-specialized code; boxed values it still produces are
//! kept discoverable in a per-frame slot registry with a static map
//! back to the originating feedback sites. The profiler periodically
//! samples the topmost optimized frame through that registry, and when
//! enough slots disagree with the feedback the code was compiled
//! against, the function is recompiled with the sampled types
//! overriding the stale ones.

pub mod ast;
pub mod bytecode;
pub mod events;
pub mod feedback;
pub mod interp;
pub mod lexer;
pub mod lower;
pub mod ops;
pub mod optvm;
pub mod parser;
pub mod profiler;
pub mod progen;
pub mod specialize;
pub mod value;
pub mod vm;

pub use ast::Program;
pub use bytecode::{BaselineFunction, FeedbackOrigin, FunctionId, LoweredProgram};
pub use events::Event;
pub use feedback::{compare, is_optimizable, Comparison, FeedbackType, Verdict};
pub use lower::{compile, CompileError};
pub use ops::RuntimeError;
pub use optvm::ExecOutcome;
pub use parser::parse;
pub use profiler::{ProfilerConfig, ProfilerMode, SampleOutcome, TriggerBackend};
pub use specialize::{CompiledFunction, ProfileEntry, SlotMapEntry, SpecializeError};
pub use value::{Kind, Value};
pub use vm::{TopFrame, Vm, VmConfig};
