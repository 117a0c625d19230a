//! The virtual machine: owns program state, dispatches calls between
//! tiers, drives the profiler and the recompilation policy.
//!
//! The VM is single-threaded by contract. Triggers are processed at
//! bytecode boundaries, where frames are consistent; with the virtual
//! counter backend everything, including the trigger sequence and all
//! recompilation decisions, is deterministic.

use crate::bytecode::{FeedbackOrigin, FunctionId, LoweredProgram, TOP_LEVEL};
use crate::events::Event;
use crate::feedback::{compare, FeedbackTable, FeedbackType, Verdict};
use crate::interp::BaselineFrame;
use crate::lower::ITERATION_GLOBAL;
use crate::ops::{DispatchTable, RuntimeError};
use crate::optvm::ExecOutcome;
use crate::profiler::{
    InterruptSource, ProfilerConfig, ProfilerMode, ProfilerState, SampleOutcome, TriggerBackend,
};
use crate::specialize::{specialize, CompiledFunction, SpecializeError};
use crate::value::Value;
use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

/// Deopts within one clearing window before a function is exempted
/// from compilation until the window ends.
pub const BLACKLIST_WINDOW_DEOPTS: u64 = 3;

const MAX_CALL_DEPTH: u32 = 2000;

#[derive(Debug)]
pub struct VmConfig {
    /// Invocations before a function is specialized. `u64::MAX`
    /// disables tiering entirely.
    pub tier_up_threshold: u64,
    pub mode: ProfilerMode,
    pub profiler: ProfilerConfig,
    /// Record every boxed value at its stash site, simulating a
    /// maximally accurate profiling run (impact estimation).
    pub full_instrumentation: bool,
}

impl Default for VmConfig {
    fn default() -> Self {
        VmConfig {
            tier_up_threshold: 10,
            mode: ProfilerMode::Off,
            profiler: ProfilerConfig::default(),
            full_instrumentation: false,
        }
    }
}

/// Per-function mutable state.
pub struct FunctionState {
    pub feedback: RefCell<FeedbackTable>,
    pub invocations: Cell<u64>,
    pub compiled: RefCell<Option<Rc<CompiledFunction>>>,
    pub deopt_total: Cell<u64>,
    pub window_deopts: Cell<u64>,
    pub blacklisted: Cell<bool>,
    pub unspecializable: Cell<bool>,
    /// Baseline offsets of integer operators that exited the integer
    /// domain at runtime; recompilations emit promoting variants there.
    pub overflow_sites: RefCell<BTreeSet<u32>>,
}

/// The topmost frame as visible to the sampler.
pub enum TopFrame<'a> {
    None,
    Baseline,
    Optimized { cf: &'a Rc<CompiledFunction>, slots: &'a [Option<Value>] },
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum TickKind {
    Off,
    Virtual,
    Interrupt,
}

pub struct Vm {
    pub program: Rc<LoweredProgram>,
    pub funcs: Vec<FunctionState>,
    pub globals: RefCell<Vec<Option<Value>>>,
    pub dispatch: DispatchTable,
    pub config: VmConfig,
    pub(crate) full_instrumentation: bool,
    interrupt: Option<Box<dyn InterruptSource>>,
    tick_kind: TickKind,
    units: Cell<u64>,
    countdown: Cell<u64>,
    pub prof: RefCell<ProfilerState>,
    events: RefCell<Vec<Event>>,
    next_marker: Cell<u64>,
    depth: Cell<u32>,
    // shadow logs for the assertion harnesses (tests only)
    pub(crate) record_log_enabled: Cell<bool>,
    pub(crate) record_log: RefCell<Vec<(FunctionId, u16, Value)>>,
    pub(crate) stash_log: RefCell<Vec<(FeedbackOrigin, Value)>>,
}

impl Vm {
    pub fn new(program: Rc<LoweredProgram>, mut config: VmConfig) -> Vm {
        config.profiler.validate().expect("profiler configuration");
        let interrupt = match std::mem::replace(
            &mut config.profiler.backend,
            TriggerBackend::VirtualCounter,
        ) {
            TriggerBackend::VirtualCounter => None,
            TriggerBackend::Interrupt(src) => Some(src),
        };
        let tick_kind = match (config.mode, &interrupt) {
            (ProfilerMode::Off, _) => TickKind::Off,
            (_, None) => TickKind::Virtual,
            (_, Some(_)) => TickKind::Interrupt,
        };
        let funcs = program
            .functions
            .iter()
            .map(|f| FunctionState {
                feedback: RefCell::new(FeedbackTable::new(f.record_sites.len())),
                invocations: Cell::new(0),
                compiled: RefCell::new(None),
                deopt_total: Cell::new(0),
                window_deopts: Cell::new(0),
                blacklisted: Cell::new(false),
                unspecializable: Cell::new(false),
                overflow_sites: RefCell::new(BTreeSet::new()),
            })
            .collect();
        let n_globals = program.global_names.len();
        let countdown = config.profiler.sample_period;
        let full_instrumentation = config.full_instrumentation;
        Vm {
            program,
            funcs,
            globals: RefCell::new(vec![None; n_globals]),
            dispatch: DispatchTable::default(),
            config,
            full_instrumentation,
            interrupt,
            tick_kind,
            units: Cell::new(0),
            countdown: Cell::new(countdown),
            prof: RefCell::new(ProfilerState::default()),
            events: RefCell::new(Vec::new()),
            next_marker: Cell::new(1),
            depth: Cell::new(0),
            record_log_enabled: Cell::new(false),
            record_log: RefCell::new(Vec::new()),
            stash_log: RefCell::new(Vec::new()),
        }
    }

    /// Parses, lowers and boots a VM in one step.
    pub fn with_source(source: &str, config: VmConfig) -> Result<Vm, crate::lower::CompileError> {
        let program = crate::lower::compile(source)?;
        Ok(Vm::new(Rc::new(program), config))
    }

    pub(crate) fn state_of(&self, id: FunctionId) -> &FunctionState {
        &self.funcs[id.0 as usize]
    }

    pub fn function_id(&self, name: &str) -> Option<FunctionId> {
        self.program.function_named(name).map(|f| f.id)
    }

    // -- execution ---------------------------------------------------------

    /// Executes the top-level statements once, with the given iteration
    /// ordinal exposed as the `ITERATION` global. All VM state (globals,
    /// feedback, compiled code, profiles) persists across iterations.
    pub fn run_iteration(&self, iteration: i32) -> Result<Value, RuntimeError> {
        {
            let slot = self.program.iteration_global as usize;
            self.globals.borrow_mut()[slot] = Some(Value::int_scalar(iteration));
        }
        let f = self.program.function(TOP_LEVEL);
        let fs = self.state_of(TOP_LEVEL);
        fs.invocations.set(fs.invocations.get() + 1);
        self.run_baseline(f, BaselineFrame::for_call(f, vec![]))
    }

    /// Forced baseline execution (the semantic ground truth).
    pub fn interpret(&self, id: FunctionId, args: Vec<Value>) -> Result<Value, RuntimeError> {
        let f = self.program.function(id);
        let fs = self.state_of(id);
        fs.invocations.set(fs.invocations.get() + 1);
        self.run_baseline(f, BaselineFrame::for_call(f, args))
    }

    /// Tier dispatch for a statically bound call.
    pub fn call_function(&self, target: FunctionId, args: Vec<Value>) -> Result<Value, RuntimeError> {
        let depth = self.depth.get();
        if depth >= MAX_CALL_DEPTH {
            return Err(RuntimeError::StackOverflow);
        }
        self.depth.set(depth + 1);
        let result = self.dispatch_call(target, args);
        self.depth.set(depth);
        result
    }

    fn dispatch_call(&self, target: FunctionId, args: Vec<Value>) -> Result<Value, RuntimeError> {
        let fs = self.state_of(target);
        let compiled = fs.compiled.borrow().clone();
        if let Some(cf) = compiled.filter(|c| c.is_valid()) {
            fs.invocations.set(fs.invocations.get() + 1);
            return self.run_optimized(&cf, args).map(ExecOutcome::into_value);
        }
        if self.tier_up_check(target) {
            match self.tier_up(target) {
                Ok(cf) => {
                    fs.invocations.set(fs.invocations.get() + 1);
                    return self.run_optimized(&cf, args).map(ExecOutcome::into_value);
                }
                Err(_) => fs.unspecializable.set(true),
            }
        }
        fs.invocations.set(fs.invocations.get() + 1);
        let f = self.program.function(target);
        self.run_baseline(f, BaselineFrame::for_call(f, args))
    }

    /// Executes an installed compiled function directly (tests and the
    /// differential harness).
    pub fn execute_optimized(
        &self,
        target: FunctionId,
        args: Vec<Value>,
    ) -> Result<ExecOutcome, RuntimeError> {
        let cf = self
            .state_of(target)
            .compiled
            .borrow()
            .clone()
            .expect("no compiled function installed");
        assert!(cf.is_valid(), "executing an invalidated function");
        self.run_optimized(&cf, args)
    }

    // -- tiering policy ----------------------------------------------------

    pub fn invocation_count(&self, id: FunctionId) -> u64 {
        self.state_of(id).invocations.get()
    }

    pub fn deopt_count(&self, id: FunctionId) -> u64 {
        self.state_of(id).deopt_total.get()
    }

    /// True when the next invocation should compile: warm enough, no
    /// valid compiled code, not blacklisted.
    pub fn tier_up_check(&self, id: FunctionId) -> bool {
        let f = self.program.function(id);
        let fs = self.state_of(id);
        !f.is_toplevel
            && self.config.tier_up_threshold != u64::MAX
            && fs.invocations.get() >= self.config.tier_up_threshold
            && !fs.compiled.borrow().as_ref().is_some_and(|c| c.is_valid())
            && !fs.blacklisted.get()
            && !fs.unspecializable.get()
    }

    fn tier_up(&self, id: FunctionId) -> Result<Rc<CompiledFunction>, SpecializeError> {
        let f = self.program.function(id);
        let fs = self.state_of(id);
        let cf = {
            let fb = fs.feedback.borrow();
            let of = fs.overflow_sites.borrow();
            specialize(f, &fb, &BTreeMap::new(), &of, self.alloc_marker())?
        };
        let rc = Rc::new(cf);
        *fs.compiled.borrow_mut() = Some(rc.clone());
        self.push_event(Event::TierUp { function: id });
        Ok(rc)
    }

    /// Installs a specialization with explicit feedback overrides
    /// (differential harness; also exercises the override machinery).
    pub fn install_specialized(
        &self,
        id: FunctionId,
        overrides: &BTreeMap<u32, FeedbackType>,
    ) -> Result<(), SpecializeError> {
        let f = self.program.function(id);
        let fs = self.state_of(id);
        let cf = {
            let fb = fs.feedback.borrow();
            let of = fs.overflow_sites.borrow();
            specialize(f, &fb, overrides, &of, self.alloc_marker())?
        };
        *fs.compiled.borrow_mut() = Some(Rc::new(cf));
        Ok(())
    }

    pub fn invalidate(&self, id: FunctionId) {
        if let Some(cf) = self.state_of(id).compiled.borrow().as_ref() {
            cf.invalidate();
        }
    }

    pub(crate) fn alloc_marker(&self) -> u64 {
        let m = self.next_marker.get();
        self.next_marker.set(m + 1);
        m
    }

    pub(crate) fn note_overflow_site(&self, id: FunctionId, bpc: u32) {
        self.state_of(id).overflow_sites.borrow_mut().insert(bpc);
    }

    pub(crate) fn note_deopt(
        &self,
        cf: &CompiledFunction,
        origin: FeedbackOrigin,
        observed: FeedbackType,
    ) {
        let fs = self.state_of(cf.source);
        fs.deopt_total.set(fs.deopt_total.get() + 1);
        fs.window_deopts.set(fs.window_deopts.get() + 1);
        if fs.window_deopts.get() >= BLACKLIST_WINDOW_DEOPTS {
            fs.blacklisted.set(true);
        }
        cf.invalidate();
        self.push_event(Event::Deopt {
            function: cf.source,
            origin_offset: origin.offset,
            observed,
        });
    }

    // -- profiler ----------------------------------------------------------

    /// Per-instruction accounting: counts one executed unit and runs the
    /// trigger backend.
    #[inline]
    pub(crate) fn tick(&self, top: TopFrame<'_>) {
        self.units.set(self.units.get() + 1);
        match self.tick_kind {
            TickKind::Off => {}
            TickKind::Virtual => {
                let c = self.countdown.get();
                if c <= 1 {
                    self.countdown.set(self.config.profiler.sample_period);
                    self.fire_trigger(top);
                } else {
                    self.countdown.set(c - 1);
                }
            }
            TickKind::Interrupt => {
                if let Some(src) = &self.interrupt {
                    if src.poll() {
                        self.fire_trigger(top);
                    }
                }
            }
        }
    }

    fn fire_trigger(&self, top: TopFrame<'_>) {
        self.push_event(Event::Trigger { unit: self.units.get() });
        let _ = self.on_trigger(top);
        let clear_now = {
            let mut prof = self.prof.borrow_mut();
            prof.trigger_count += 1;
            prof.trigger_count % self.config.profiler.clear_interval == 0
        };
        if clear_now {
            self.clear_samples();
        }
    }

    /// Samples the topmost frame. Only frames carrying the marker of a
    /// valid compiled function are inspected; program-visible state is
    /// never touched.
    pub fn on_trigger(&self, top: TopFrame<'_>) -> SampleOutcome {
        self.prof.borrow_mut().touches += 1;
        match top {
            TopFrame::None => {
                self.prof.borrow_mut().miss_no_frame += 1;
                SampleOutcome::MissNoFrame
            }
            TopFrame::Baseline => {
                self.prof.borrow_mut().miss_not_optimized += 1;
                SampleOutcome::MissNotOptimized
            }
            TopFrame::Optimized { cf, slots } => {
                if !cf.is_valid() {
                    self.prof.borrow_mut().miss_not_optimized += 1;
                    return SampleOutcome::MissNotOptimized;
                }
                self.prof.borrow_mut().hits += 1;
                {
                    let mut profile = cf.profile.borrow_mut();
                    for (i, m) in cf.slot_map.iter().enumerate() {
                        if let Some(v) = &slots[m.slot as usize] {
                            let t = FeedbackType::of_value(v);
                            let e = &mut profile[i];
                            e.sampled = e.sampled.merge(&t);
                            e.count += 1;
                            self.push_event(Event::Sample {
                                function: cf.source,
                                slot: m.slot,
                                observed: t,
                            });
                        }
                    }
                }
                if self.config.mode == ProfilerMode::Full && self.should_recompile(cf) {
                    self.recompile(cf);
                }
                SampleOutcome::Hit
            }
        }
    }

    /// More than `stale_fraction` of the mapped slots must be confident
    /// (count >= threshold) and different from the compiled feedback.
    /// Zero-sample slots count in the denominator but never vote.
    pub fn should_recompile(&self, cf: &CompiledFunction) -> bool {
        if !cf.is_valid() {
            return false;
        }
        if self.state_of(cf.source).blacklisted.get() {
            return false;
        }
        let t = self.config.profiler.threshold;
        let profile = cf.profile.borrow();
        let d = cf.slot_map.len() as u64;
        let stale = profile
            .iter()
            .zip(cf.slot_map.iter())
            .filter(|(e, m)| {
                e.count >= t && compare(&e.sampled, &m.compiled).verdict != Verdict::Equal
            })
            .count() as u64;
        let (num, den) = self.config.profiler.stale_fraction;
        stale * den > num * d
    }

    /// Recompiles from the original source function; confident sampled
    /// entries override the baseline feedback (aggregating by merge when
    /// several slots share an origin). The old code is discarded and its
    /// samples die with it.
    pub fn recompile(&self, cf: &Rc<CompiledFunction>) {
        let id = cf.source;
        let fs = self.state_of(id);
        let t = self.config.profiler.threshold;
        let mut overrides: BTreeMap<u32, FeedbackType> = BTreeMap::new();
        {
            let profile = cf.profile.borrow();
            for (e, m) in profile.iter().zip(cf.slot_map.iter()) {
                if e.count >= t && e.sampled.is_partial() {
                    overrides
                        .entry(m.origin.offset)
                        .and_modify(|x| *x = x.merge(&e.sampled))
                        .or_insert(e.sampled);
                }
            }
        }
        cf.invalidate();
        let f = self.program.function(id);
        let result = {
            let fb = fs.feedback.borrow();
            let of = fs.overflow_sites.borrow();
            specialize(f, &fb, &overrides, &of, self.alloc_marker())
        };
        match result {
            Ok(new_cf) => {
                *fs.compiled.borrow_mut() = Some(Rc::new(new_cf));
                self.push_event(Event::Recompile {
                    function: id,
                    overrides: overrides.into_iter().collect(),
                });
            }
            Err(_) => {
                *fs.compiled.borrow_mut() = None;
            }
        }
    }

    /// Resets every profile entry and expires blacklists.
    pub fn clear_samples(&self) {
        let window = {
            let mut prof = self.prof.borrow_mut();
            prof.touches += 1;
            prof.window += 1;
            prof.window
        };
        for fs in &self.funcs {
            if let Some(cf) = fs.compiled.borrow().as_ref() {
                cf.clear_profile();
            }
            fs.window_deopts.set(0);
            fs.blacklisted.set(false);
        }
        self.push_event(Event::Clear { window });
    }

    // -- accounting and diagnostics -----------------------------------------

    pub fn units(&self) -> u64 {
        self.units.get()
    }

    pub fn profiler_touches(&self) -> u64 {
        self.prof.borrow().touches
    }

    pub(crate) fn push_event(&self, e: Event) {
        self.events.borrow_mut().push(e);
    }

    pub fn take_events(&self) -> Vec<Event> {
        std::mem::take(&mut *self.events.borrow_mut())
    }

    pub fn function_name(&self, id: FunctionId) -> String {
        self.program.function(id).name.clone()
    }

    pub fn render_events(&self, events: &[Event]) -> Vec<String> {
        events.iter().map(|e| e.render(&|id| self.function_name(id))).collect()
    }

    pub fn get_global(&self, name: &str) -> Option<Value> {
        let slot = self.program.global_slot(name)?;
        self.globals.borrow()[slot as usize].clone()
    }

    pub fn set_global(&self, name: &str, v: Value) -> bool {
        match self.program.global_slot(name) {
            Some(slot) => {
                self.globals.borrow_mut()[slot as usize] = Some(v);
                true
            }
            None => false,
        }
    }

    pub fn globals_snapshot(&self) -> Vec<(String, Option<Value>)> {
        let globals = self.globals.borrow();
        self.program
            .global_names
            .iter()
            .cloned()
            .zip(globals.iter().cloned())
            .filter(|(name, _)| name != ITERATION_GLOBAL)
            .collect()
    }

    /// `--trace-feedback` rendering: one line per record site.
    pub fn render_feedback(&self, name: &str) -> Option<String> {
        let f = self.program.function_named(name)?;
        let fb = self.state_of(f.id).feedback.borrow();
        let mut out = String::new();
        for site in 0..f.record_sites.len() {
            out.push_str(&format!(
                "{}@{} -> {} ({})\n",
                name,
                f.record_sites[site],
                fb.observed(site),
                fb.hit_count(site)
            ));
        }
        Some(out)
    }

    /// `--dump-slot-map` rendering for the current compiled artifact.
    pub fn render_slot_map(&self, name: &str) -> Option<String> {
        let f = self.program.function_named(name)?;
        let compiled = self.state_of(f.id).compiled.borrow();
        compiled.as_ref().map(|cf| cf.render_slot_map())
    }

    /// Enables the shadow logs consumed by the assertion harnesses.
    pub fn enable_shadow_logs(&self) {
        self.record_log_enabled.set(true);
    }

    pub fn take_record_log(&self) -> Vec<(FunctionId, u16, Value)> {
        std::mem::take(&mut *self.record_log.borrow_mut())
    }

    pub fn take_stash_log(&self) -> Vec<(FeedbackOrigin, Value)> {
        std::mem::take(&mut *self.stash_log.borrow_mut())
    }

    /// Shuts interrupt backends down (idempotent).
    pub fn shutdown_trigger(&mut self) {
        if let Some(src) = &mut self.interrupt {
            src.shutdown();
        }
    }
}

impl Drop for Vm {
    fn drop(&mut self) {
        self.shutdown_trigger();
    }
}
