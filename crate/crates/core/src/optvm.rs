//! Executor for specialized code.
//!
//! Specialized frames keep scalars unboxed on the stack and in local
//! registers, and mirror the baseline frame shape instruction for
//! instruction. On guard failure the frame is reboxed into a baseline
//! frame resuming at the failing load, so deoptimized execution is
//! semantically indistinguishable from having interpreted all along.

use crate::feedback::FeedbackType;
use crate::interp::{BaselineFrame, LoopState};
use crate::ops::{self, RuntimeError};
use crate::specialize::{CompiledFunction, GuardAction, OptInstr};
use crate::value::Value;
use crate::vm::{TopFrame, Vm};
use std::rc::Rc;

/// Result of one optimized activation.
#[derive(Debug)]
pub enum ExecOutcome {
    Done(Value),
    Deopted(Value),
}

impl ExecOutcome {
    pub fn into_value(self) -> Value {
        match self {
            ExecOutcome::Done(v) | ExecOutcome::Deopted(v) => v,
        }
    }

    pub fn deopted(&self) -> bool {
        matches!(self, ExecOutcome::Deopted(_))
    }
}

/// Unboxed stack/register slot.
#[derive(Debug, Clone)]
pub enum Slot {
    I(i32),
    D(f64),
    L(bool),
    B(Value),
    Unset,
}

impl Slot {
    #[inline]
    pub fn rebox(self) -> Value {
        match self {
            Slot::I(v) => Value::int_scalar(v),
            Slot::D(v) => Value::dbl_scalar(v),
            Slot::L(v) => Value::lgl_scalar(v),
            Slot::B(v) => v,
            Slot::Unset => unreachable!("reboxing an unset slot"),
        }
    }

    fn rebox_opt(self) -> Option<Value> {
        match self {
            Slot::Unset => None,
            other => Some(other.rebox()),
        }
    }
}

struct OptFrame {
    pc: usize,
    stack: Vec<Slot>,
    locals: Vec<Slot>,
    loops: Vec<LoopState>,
    boxed_slots: Vec<Option<Value>>,
}

macro_rules! pop_i {
    ($frame:expr) => {
        match $frame.stack.pop().unwrap() {
            Slot::I(v) => v,
            other => unreachable!("expected unboxed int, got {other:?}"),
        }
    };
}

macro_rules! pop_d {
    ($frame:expr) => {
        match $frame.stack.pop().unwrap() {
            Slot::D(v) => v,
            other => unreachable!("expected unboxed double, got {other:?}"),
        }
    };
}

impl Vm {
    /// Executes a compiled function. Guard failures transfer to the
    /// baseline interpreter and yield `Deopted`.
    pub(crate) fn run_optimized(
        &self,
        cf: &Rc<CompiledFunction>,
        args: Vec<Value>,
    ) -> Result<ExecOutcome, RuntimeError> {
        let mut locals: Vec<Slot> = args.into_iter().map(Slot::B).collect();
        locals.resize(cf.n_locals as usize, Slot::Unset);
        // the marker (the compiled-function reference itself) is pushed
        // with the frame, before any effect
        let mut frame = OptFrame {
            pc: 0,
            stack: Vec::with_capacity(8),
            locals,
            loops: vec![LoopState::default(); cf.n_loops as usize],
            boxed_slots: vec![None; cf.n_boxed_slots as usize],
        };
        let f = self.program.function(cf.source);

        loop {
            self.tick(TopFrame::Optimized { cf, slots: &frame.boxed_slots });
            let instr = &cf.code[frame.pc];
            frame.pc += 1;
            match instr {
                OptInstr::ConstI(v) => frame.stack.push(Slot::I(*v)),
                OptInstr::ConstD(v) => frame.stack.push(Slot::D(*v)),
                OptInstr::ConstL(v) => frame.stack.push(Slot::L(*v)),
                OptInstr::ConstBoxed(i) => {
                    frame.stack.push(Slot::B(cf.consts[*i as usize].clone()))
                }
                OptInstr::LdLoc(l) => match &frame.locals[*l as usize] {
                    Slot::Unset => {
                        return Err(self.unbound_local(cf, *l));
                    }
                    v => frame.stack.push(v.clone()),
                },
                OptInstr::StLoc(l) => {
                    frame.locals[*l as usize] = frame.stack.pop().unwrap();
                }
                OptInstr::TeeLoc(l) => {
                    frame.locals[*l as usize] = frame.stack.last().unwrap().clone();
                }
                OptInstr::LdGlob(g) => {
                    let globals = self.globals.borrow();
                    match &globals[*g as usize] {
                        Some(v) => frame.stack.push(Slot::B(v.clone())),
                        None => {
                            return Err(RuntimeError::UnboundGlobal(
                                self.program.global_names[*g as usize].clone(),
                            ))
                        }
                    }
                }
                OptInstr::StGlob(g) => {
                    let v = frame.stack.pop().unwrap().rebox();
                    self.globals.borrow_mut()[*g as usize] = Some(v);
                }
                OptInstr::LdLocGuard { local, guard } => {
                    let v = match &frame.locals[*local as usize] {
                        Slot::Unset => return Err(self.unbound_local(cf, *local)),
                        v => v.clone().rebox(),
                    };
                    match self.apply_guard(cf, &mut frame, *guard, v) {
                        GuardOutcome::Pass => {}
                        GuardOutcome::Deopt(value) => {
                            return self.deopt(cf, frame, *guard, value).map(ExecOutcome::Deopted)
                        }
                    }
                }
                OptInstr::LdGlobGuard { global, guard } => {
                    let v = {
                        let globals = self.globals.borrow();
                        match &globals[*global as usize] {
                            Some(v) => v.clone(),
                            None => {
                                return Err(RuntimeError::UnboundGlobal(
                                    self.program.global_names[*global as usize].clone(),
                                ))
                            }
                        }
                    };
                    match self.apply_guard(cf, &mut frame, *guard, v) {
                        GuardOutcome::Pass => {}
                        GuardOutcome::Deopt(value) => {
                            return self.deopt(cf, frame, *guard, value).map(ExecOutcome::Deopted)
                        }
                    }
                }
                OptInstr::GuardParam { local, guard } => {
                    let v = match &frame.locals[*local as usize] {
                        Slot::Unset => return Err(self.unbound_local(cf, *local)),
                        v => v.clone().rebox(),
                    };
                    let g = &cf.guards[*guard as usize];
                    if !g.expected.admits(&v) {
                        return self.deopt(cf, frame, *guard, v).map(ExecOutcome::Deopted);
                    }
                    match g.action {
                        GuardAction::UnboxInt => {
                            frame.locals[*local as usize] = Slot::I(v.scalar_i32().unwrap())
                        }
                        GuardAction::UnboxDbl => {
                            frame.locals[*local as usize] = Slot::D(v.scalar_f64().unwrap())
                        }
                        GuardAction::BoxStash { slot, .. } => {
                            self.stash(cf, &mut frame, slot, v);
                        }
                    }
                }
                OptInstr::AddII { bpc } => {
                    let b = pop_i!(frame);
                    let a = pop_i!(frame);
                    match a.checked_add(b) {
                        Some(v) => frame.stack.push(Slot::I(v)),
                        None => {
                            return self
                                .deopt_arith(cf, frame, *bpc, a, b)
                                .map(ExecOutcome::Deopted)
                        }
                    }
                }
                OptInstr::SubII { bpc } => {
                    let b = pop_i!(frame);
                    let a = pop_i!(frame);
                    match a.checked_sub(b) {
                        Some(v) => frame.stack.push(Slot::I(v)),
                        None => {
                            return self
                                .deopt_arith(cf, frame, *bpc, a, b)
                                .map(ExecOutcome::Deopted)
                        }
                    }
                }
                OptInstr::MulII { bpc } => {
                    let b = pop_i!(frame);
                    let a = pop_i!(frame);
                    match a.checked_mul(b) {
                        Some(v) => frame.stack.push(Slot::I(v)),
                        None => {
                            return self
                                .deopt_arith(cf, frame, *bpc, a, b)
                                .map(ExecOutcome::Deopted)
                        }
                    }
                }
                OptInstr::ModII { bpc } => {
                    let b = pop_i!(frame);
                    let a = pop_i!(frame);
                    match ops::imod_floor(a, b) {
                        Some(v) => frame.stack.push(Slot::I(v)),
                        None => {
                            return self
                                .deopt_arith(cf, frame, *bpc, a, b)
                                .map(ExecOutcome::Deopted)
                        }
                    }
                }
                OptInstr::AddIIDyn => {
                    let b = pop_i!(frame);
                    let a = pop_i!(frame);
                    frame.stack.push(match a.checked_add(b) {
                        Some(v) => Slot::I(v),
                        None => Slot::B(Value::dbl_scalar(a as f64 + b as f64)),
                    });
                }
                OptInstr::SubIIDyn => {
                    let b = pop_i!(frame);
                    let a = pop_i!(frame);
                    frame.stack.push(match a.checked_sub(b) {
                        Some(v) => Slot::I(v),
                        None => Slot::B(Value::dbl_scalar(a as f64 - b as f64)),
                    });
                }
                OptInstr::MulIIDyn => {
                    let b = pop_i!(frame);
                    let a = pop_i!(frame);
                    frame.stack.push(match a.checked_mul(b) {
                        Some(v) => Slot::I(v),
                        None => Slot::B(Value::dbl_scalar(a as f64 * b as f64)),
                    });
                }
                OptInstr::ModIIDyn => {
                    let b = pop_i!(frame);
                    let a = pop_i!(frame);
                    frame.stack.push(match ops::imod_floor(a, b) {
                        Some(v) => Slot::I(v),
                        None => Slot::B(Value::dbl_scalar(ops::dmod_floor(a as f64, b as f64))),
                    });
                }
                OptInstr::AddDD => {
                    let b = pop_d!(frame);
                    let a = pop_d!(frame);
                    frame.stack.push(Slot::D(a + b));
                }
                OptInstr::SubDD => {
                    let b = pop_d!(frame);
                    let a = pop_d!(frame);
                    frame.stack.push(Slot::D(a - b));
                }
                OptInstr::MulDD => {
                    let b = pop_d!(frame);
                    let a = pop_d!(frame);
                    frame.stack.push(Slot::D(a * b));
                }
                OptInstr::DivDD => {
                    let b = pop_d!(frame);
                    let a = pop_d!(frame);
                    frame.stack.push(Slot::D(a / b));
                }
                OptInstr::ModDD => {
                    let b = pop_d!(frame);
                    let a = pop_d!(frame);
                    frame.stack.push(Slot::D(ops::dmod_floor(a, b)));
                }
                OptInstr::PowDD => {
                    let b = pop_d!(frame);
                    let a = pop_d!(frame);
                    frame.stack.push(Slot::D(a.powf(b)));
                }
                OptInstr::CmpII(op) => {
                    let b = pop_i!(frame);
                    let a = pop_i!(frame);
                    frame.stack.push(Slot::L(ops::cmp_int(*op, a, b)));
                }
                OptInstr::CmpDD(op) => {
                    let b = pop_d!(frame);
                    let a = pop_d!(frame);
                    frame.stack.push(Slot::L(ops::cmp_dbl(*op, a, b)));
                }
                OptInstr::I2D => {
                    let v = pop_i!(frame);
                    frame.stack.push(Slot::D(v as f64));
                }
                OptInstr::I2DUnder => {
                    let at = frame.stack.len() - 2;
                    if let Slot::I(v) = frame.stack[at] {
                        frame.stack[at] = Slot::D(v as f64);
                    } else {
                        unreachable!("I2DUnder on non-int");
                    }
                }
                OptInstr::L2I => {
                    if let Some(Slot::L(v)) = frame.stack.pop() {
                        frame.stack.push(Slot::I(v as i32));
                    } else {
                        unreachable!("L2I on non-logical");
                    }
                }
                OptInstr::L2IUnder => {
                    let at = frame.stack.len() - 2;
                    if let Slot::L(v) = frame.stack[at] {
                        frame.stack[at] = Slot::I(v as i32);
                    } else {
                        unreachable!("L2IUnder on non-logical");
                    }
                }
                OptInstr::BinopDirect(op) => {
                    let b = frame.stack.pop().unwrap().rebox();
                    let a = frame.stack.pop().unwrap().rebox();
                    frame.stack.push(Slot::B(ops::binop(*op, &a, &b)?));
                }
                OptInstr::BinopDispatch(op) => {
                    let b = frame.stack.pop().unwrap().rebox();
                    let a = frame.stack.pop().unwrap().rebox();
                    frame.stack.push(Slot::B(self.dispatch.dispatch_binop(*op, &a, &b)?));
                }
                OptInstr::Concat(n) => {
                    let at = frame.stack.len() - *n as usize;
                    let items: Vec<Value> =
                        frame.stack.split_off(at).into_iter().map(Slot::rebox).collect();
                    frame.stack.push(Slot::B(ops::concat(&items)));
                }
                OptInstr::SetClass(t) => {
                    let v = frame.stack.pop().unwrap().rebox();
                    frame.stack.push(Slot::B(v.with_class_tag(cf.tags[*t as usize].clone())));
                }
                OptInstr::CallFn { target, argc } => {
                    let at = frame.stack.len() - *argc as usize;
                    let args: Vec<Value> =
                        frame.stack.split_off(at).into_iter().map(Slot::rebox).collect();
                    let v = self.call_function(*target, args)?;
                    frame.stack.push(Slot::B(v));
                }
                OptInstr::CallBuiltin { builtin, argc } => {
                    let at = frame.stack.len() - *argc as usize;
                    let args: Vec<Value> =
                        frame.stack.split_off(at).into_iter().map(Slot::rebox).collect();
                    frame.stack.push(Slot::B(ops::call_builtin(*builtin, &args)?));
                }
                OptInstr::Jump(t) => frame.pc = *t as usize,
                OptInstr::JmpFalseL(t) => {
                    if let Some(Slot::L(v)) = frame.stack.pop() {
                        if !v {
                            frame.pc = *t as usize;
                        }
                    } else {
                        unreachable!("JmpFalseL on non-logical");
                    }
                }
                OptInstr::JmpFalseI(t) => {
                    let v = pop_i!(frame);
                    if v == 0 {
                        frame.pc = *t as usize;
                    }
                }
                OptInstr::JmpFalseD(t) => {
                    let v = pop_d!(frame);
                    if v == 0.0 {
                        frame.pc = *t as usize;
                    }
                }
                OptInstr::JmpFalseB(t) => {
                    let v = frame.stack.pop().unwrap().rebox();
                    if !ops::truthy(&v)? {
                        frame.pc = *t as usize;
                    }
                }
                OptInstr::ForSetupII { slot } => {
                    let to = pop_i!(frame);
                    let from = pop_i!(frame);
                    frame.loops[*slot as usize] = LoopState::setup(from, to);
                }
                OptInstr::ForSetupAny { slot } => {
                    let to = slot_bound(frame.stack.pop().unwrap())?;
                    let from = slot_bound(frame.stack.pop().unwrap())?;
                    frame.loops[*slot as usize] = LoopState::setup(from, to);
                }
                OptInstr::ForNext { slot, var, exit } => {
                    match frame.loops[*slot as usize].next() {
                        Some(v) => frame.locals[*var as usize] = Slot::I(v),
                        None => frame.pc = *exit as usize,
                    }
                }
                OptInstr::Dup => {
                    let v = frame.stack.last().unwrap().clone();
                    frame.stack.push(v);
                }
                OptInstr::Pop => {
                    frame.stack.pop();
                }
                OptInstr::PushUnit => frame.stack.push(Slot::B(Value::unit())),
                OptInstr::Ret => {
                    let v = frame.stack.pop().unwrap().rebox();
                    return Ok(ExecOutcome::Done(v));
                }
            }
        }
    }

    fn unbound_local(&self, cf: &CompiledFunction, local: u16) -> RuntimeError {
        let f = self.program.function(cf.source);
        let name = f
            .local_names
            .get(local as usize)
            .cloned()
            .unwrap_or_else(|| format!("<r{local}>"));
        RuntimeError::UnboundLocal(name)
    }

    /// Checks a load guard and performs its action on a pass.
    fn apply_guard(
        &self,
        cf: &CompiledFunction,
        frame: &mut OptFrame,
        guard: u16,
        v: Value,
    ) -> GuardOutcome {
        let g = &cf.guards[guard as usize];
        match g.action {
            GuardAction::UnboxInt => match v.scalar_i32() {
                Some(x) => {
                    frame.stack.push(Slot::I(x));
                    GuardOutcome::Pass
                }
                None => GuardOutcome::Deopt(v),
            },
            GuardAction::UnboxDbl => match v.scalar_f64() {
                Some(x) => {
                    frame.stack.push(Slot::D(x));
                    GuardOutcome::Pass
                }
                None => GuardOutcome::Deopt(v),
            },
            GuardAction::BoxStash { slot, check } => {
                if check && !g.expected.admits(&v) {
                    return GuardOutcome::Deopt(v);
                }
                self.stash(cf, frame, slot, v.clone());
                frame.stack.push(Slot::B(v));
                GuardOutcome::Pass
            }
        }
    }

    #[inline]
    fn stash(&self, cf: &CompiledFunction, frame: &mut OptFrame, slot: u16, v: Value) {
        if self.full_instrumentation {
            // maximally accurate profiling: record every boxed value
            // produced, exactly as a sample would
            let mut profile = cf.profile.borrow_mut();
            let e = &mut profile[slot as usize];
            e.sampled = e.sampled.merge(&crate::feedback::FeedbackType::of_value(&v));
            e.count += 1;
        }
        if self.record_log_enabled.get() {
            let origin = cf.slot_map[slot as usize].origin;
            self.stash_log.borrow_mut().push((origin, v.clone()));
        }
        frame.boxed_slots[slot as usize] = Some(v);
    }

    /// Guard failure: rebox the frame, note the deopt, resume baseline.
    fn deopt(
        &self,
        cf: &Rc<CompiledFunction>,
        frame: OptFrame,
        guard: u16,
        observed: Value,
    ) -> Result<Value, RuntimeError> {
        let g = cf.guards[guard as usize].clone();
        let f = self.program.function(cf.source);
        let origin = f.origin(g.site as usize);
        let observed_ty = FeedbackType::of_value(&observed);
        // widen the baseline feedback with the failing value so the next
        // compilation covers it
        self.state_of(cf.source)
            .feedback
            .borrow_mut()
            .merge_type(g.site as usize, &observed_ty);
        self.note_deopt(cf, origin, observed_ty);
        self.resume_baseline(cf, f, frame, g.baseline_pc)
    }

    /// Integer overflow (or an integer-domain exit) in checked
    /// arithmetic: restore the operands and resume at the operator.
    fn deopt_arith(
        &self,
        cf: &Rc<CompiledFunction>,
        mut frame: OptFrame,
        bpc: u32,
        a: i32,
        b: i32,
    ) -> Result<Value, RuntimeError> {
        frame.stack.push(Slot::I(a));
        frame.stack.push(Slot::I(b));
        let f = self.program.function(cf.source);
        // the record site right after the operator names its origin
        let site = f.site_of_offset(bpc + 1).expect("operators are recorded");
        let origin = f.origin(site);
        self.note_overflow_site(cf.source, bpc);
        self.note_deopt(cf, origin, FeedbackType::of_value(&Value::dbl_scalar(0.0)));
        self.resume_baseline(cf, f, frame, bpc)
    }

    fn resume_baseline(
        &self,
        cf: &Rc<CompiledFunction>,
        f: &crate::bytecode::BaselineFunction,
        frame: OptFrame,
        bpc: u32,
    ) -> Result<Value, RuntimeError> {
        let stack: Vec<Value> = frame.stack.into_iter().map(Slot::rebox).collect();
        let mut locals: Vec<Option<Value>> = frame
            .locals
            .into_iter()
            .take(cf.n_source_locals as usize)
            .map(Slot::rebox_opt)
            .collect();
        locals.resize(f.n_locals as usize, None);
        let bframe = BaselineFrame { pc: bpc as usize, stack, locals, loops: frame.loops };
        self.run_baseline(f, bframe)
    }
}

enum GuardOutcome {
    Pass,
    Deopt(Value),
}

fn slot_bound(s: Slot) -> Result<i32, RuntimeError> {
    match s {
        Slot::I(v) => Ok(v),
        Slot::D(x) => ops::for_bound_f64(x),
        Slot::L(b) => Ok(b as i32),
        Slot::B(v) => ops::for_bound(&v),
        Slot::Unset => unreachable!("bound from unset slot"),
    }
}
