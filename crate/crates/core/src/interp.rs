//! Baseline interpreter: executes bytecode on boxed values, records
//! type feedback, and hosts resumption after deoptimization.

use crate::bytecode::{BaselineFunction, Instr};
use crate::lower::decode_for_var;
use crate::ops::{self, RuntimeError};
use crate::value::Value;
use crate::vm::{TopFrame, Vm};

/// Integer loop register; both tiers share the representation so a
/// deoptimized frame can take over mid-loop.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoopState {
    pub cur: i64,
    pub limit: i64,
    pub step: i64,
}

impl LoopState {
    pub fn setup(from: i32, to: i32) -> LoopState {
        LoopState {
            cur: from as i64,
            limit: to as i64,
            step: if from <= to { 1 } else { -1 },
        }
    }

    /// Yields the next loop value, if any.
    #[inline]
    pub fn next(&mut self) -> Option<i32> {
        let more = if self.step > 0 { self.cur <= self.limit } else { self.cur >= self.limit };
        if more {
            let v = self.cur as i32;
            self.cur += self.step;
            Some(v)
        } else {
            None
        }
    }
}

/// One baseline activation.
#[derive(Debug)]
pub struct BaselineFrame {
    pub pc: usize,
    pub stack: Vec<Value>,
    pub locals: Vec<Option<Value>>,
    pub loops: Vec<LoopState>,
}

impl BaselineFrame {
    pub fn for_call(f: &BaselineFunction, args: Vec<Value>) -> BaselineFrame {
        debug_assert_eq!(args.len(), f.n_params as usize);
        let mut locals: Vec<Option<Value>> = args.into_iter().map(Some).collect();
        locals.resize(f.n_locals as usize, None);
        BaselineFrame {
            pc: 0,
            stack: Vec::with_capacity(8),
            locals,
            loops: vec![LoopState::default(); f.n_loops as usize],
        }
    }
}

impl Vm {
    /// Runs a baseline frame to completion. The frame may start at any
    /// offset (deoptimization resumes mid-function).
    pub(crate) fn run_baseline(
        &self,
        f: &BaselineFunction,
        mut frame: BaselineFrame,
    ) -> Result<Value, RuntimeError> {
        let fs = self.state_of(f.id);
        loop {
            self.tick(TopFrame::Baseline);
            let instr = &f.code[frame.pc];
            frame.pc += 1;
            match instr {
                Instr::Const(i) => frame.stack.push(f.consts[*i as usize].clone()),
                Instr::LdLocal(l) => match &frame.locals[*l as usize] {
                    Some(v) => frame.stack.push(v.clone()),
                    None => {
                        return Err(RuntimeError::UnboundLocal(
                            f.local_names[*l as usize].clone(),
                        ))
                    }
                },
                Instr::StLocal(l) => {
                    let v = frame.stack.pop().unwrap();
                    frame.locals[*l as usize] = Some(v);
                }
                Instr::LdGlobal(g) => {
                    let globals = self.globals.borrow();
                    match &globals[*g as usize] {
                        Some(v) => frame.stack.push(v.clone()),
                        None => {
                            return Err(RuntimeError::UnboundGlobal(
                                self.program.global_names[*g as usize].clone(),
                            ))
                        }
                    }
                }
                Instr::StGlobal(g) => {
                    let v = frame.stack.pop().unwrap();
                    self.globals.borrow_mut()[*g as usize] = Some(v);
                }
                Instr::Record(site) => {
                    let v = frame.stack.last().expect("record needs a value on the stack");
                    fs.feedback.borrow_mut().record(*site as usize, v);
                    if self.record_log_enabled.get() {
                        self.record_log.borrow_mut().push((f.id, *site, v.clone()));
                    }
                }
                Instr::Dup => {
                    let v = frame.stack.last().unwrap().clone();
                    frame.stack.push(v);
                }
                Instr::Pop => {
                    frame.stack.pop();
                }
                Instr::Binop(op) => {
                    let b = frame.stack.pop().unwrap();
                    let a = frame.stack.pop().unwrap();
                    let v = if a.class_tag().is_some() || b.class_tag().is_some() {
                        self.dispatch.dispatch_binop(*op, &a, &b)?
                    } else {
                        ops::binop(*op, &a, &b)?
                    };
                    frame.stack.push(v);
                }
                Instr::Concat(n) => {
                    let at = frame.stack.len() - *n as usize;
                    let items: Vec<Value> = frame.stack.split_off(at);
                    frame.stack.push(ops::concat(&items));
                }
                Instr::SetClass(t) => {
                    let v = frame.stack.pop().unwrap();
                    frame.stack.push(v.with_class_tag(f.tags[*t as usize].clone()));
                }
                Instr::Call { target, argc } => {
                    let at = frame.stack.len() - *argc as usize;
                    let args: Vec<Value> = frame.stack.split_off(at);
                    let v = self.call_function(*target, args)?;
                    frame.stack.push(v);
                }
                Instr::CallBuiltin { builtin, argc } => {
                    let at = frame.stack.len() - *argc as usize;
                    let args: Vec<Value> = frame.stack.split_off(at);
                    frame.stack.push(ops::call_builtin(*builtin, &args)?);
                }
                Instr::Jump(t) => frame.pc = *t as usize,
                Instr::JumpIfFalse(t) => {
                    let c = frame.stack.pop().unwrap();
                    if !ops::truthy(&c)? {
                        frame.pc = *t as usize;
                    }
                }
                Instr::ForSetup { slot } => {
                    let to = frame.stack.pop().unwrap();
                    let from = frame.stack.pop().unwrap();
                    let from = ops::for_bound(&from)?;
                    let to = ops::for_bound(&to)?;
                    frame.loops[*slot as usize] = LoopState::setup(from, to);
                }
                Instr::ForNext { slot, var, exit } => {
                    match frame.loops[*slot as usize].next() {
                        Some(v) => {
                            let value = Value::int_scalar(v);
                            let (var_slot, global) = decode_for_var(*var);
                            if global {
                                self.globals.borrow_mut()[var_slot as usize] = Some(value);
                            } else {
                                frame.locals[var_slot as usize] = Some(value);
                            }
                        }
                        None => frame.pc = *exit as usize,
                    }
                }
                Instr::PushUnit => frame.stack.push(Value::unit()),
                Instr::Ret => {
                    let v = frame.stack.pop().unwrap();
                    return Ok(v);
                }
            }
        }
    }
}
