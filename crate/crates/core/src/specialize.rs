//! Tier-2 specializer: compiles a baseline function plus (possibly
//! overridden) type feedback into guarded, type-specialized code.
//!
//! Speculation happens only at value-load sites and parameter entry.
//! A load whose effective feedback is a monomorphic untagged scalar
//! number compiles to a guard plus an unboxed register value; any other
//! partial feedback compiles to a guarded boxed load that also stashes
//! the value into the frame's boxed-slot registry, which is what the
//! sampling profiler inspects. Slots are never shared between origins,
//! so the slot map stays static for the whole function.
//!
//! Operator results take their types from the operands; integer
//! operators deopt on overflow unless a previous overflow at the same
//! site taught us to emit the dynamically-promoting variant.

use crate::ast::BinOp;
use crate::bytecode::{BaselineFunction, Builtin, FeedbackOrigin, FunctionId, Instr};
use crate::feedback::{FeedbackTable, FeedbackType};
use crate::lower::decode_for_var;
use crate::value::{Kind, Value};
use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::rc::Rc;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpecializeError {
    #[error("function has no record sites, nothing to specialize")]
    NoRecordSites,
    #[error("top-level code is not specialized")]
    TopLevel,
}

/// What a passing guard does with the checked value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuardAction {
    UnboxInt,
    UnboxDbl,
    /// Keep the value boxed, stash it into `boxed_slots[slot]` for the
    /// sampler. `check: false` when an earlier guard of the same
    /// feedback already vouches for the value (entry-guarded parameters
    /// that are never reassigned).
    BoxStash { slot: u16, check: bool },
}

#[derive(Debug, Clone)]
pub struct GuardInfo {
    pub expected: FeedbackType,
    /// Record-site ordinal in the baseline function.
    pub site: u16,
    /// Baseline offset to resume at on guard failure (the load itself).
    pub baseline_pc: u32,
    pub action: GuardAction,
}

/// One row of the slot -> feedback-origin metadata map.
#[derive(Debug, Clone)]
pub struct SlotMapEntry {
    pub slot: u16,
    pub origin: FeedbackOrigin,
    pub compiled: FeedbackType,
}

/// Sampling storage, parallel to the slot map.
#[derive(Debug, Clone, Copy)]
pub struct ProfileEntry {
    pub sampled: FeedbackType,
    pub count: u64,
}

impl ProfileEntry {
    pub const EMPTY: ProfileEntry = ProfileEntry { sampled: FeedbackType::BOTTOM, count: 0 };
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptInstr {
    ConstI(i32),
    ConstD(f64),
    ConstL(bool),
    ConstBoxed(u16),
    /// Push `locals[i]`; `Unset` raises the unbound-local error.
    LdLoc(u16),
    StLoc(u16),
    /// Store top of stack to `locals[i]` without popping.
    TeeLoc(u16),
    LdGlob(u16),
    StGlob(u16),
    LdLocGuard { local: u16, guard: u16 },
    LdGlobGuard { global: u16, guard: u16 },
    /// Entry guard: re-types `locals[i]` in place.
    GuardParam { local: u16, guard: u16 },
    // unboxed integer arithmetic; overflow deopts to `bpc`
    AddII { bpc: u32 },
    SubII { bpc: u32 },
    MulII { bpc: u32 },
    ModII { bpc: u32 },
    // dynamically promoting variants (overflow evidence at this site)
    AddIIDyn,
    SubIIDyn,
    MulIIDyn,
    ModIIDyn,
    AddDD,
    SubDD,
    MulDD,
    DivDD,
    ModDD,
    PowDD,
    CmpII(BinOp),
    CmpDD(BinOp),
    /// Convert top of stack / one below top from int to double.
    I2D,
    I2DUnder,
    /// Logical to its 0/1 integer reading.
    L2I,
    L2IUnder,
    /// Generic kernel on boxed operands, tags ruled out statically.
    BinopDirect(BinOp),
    /// Generic kernel behind the class-dispatch table.
    BinopDispatch(BinOp),
    Concat(u16),
    SetClass(u16),
    CallFn { target: FunctionId, argc: u8 },
    CallBuiltin { builtin: Builtin, argc: u8 },
    Jump(u32),
    JmpFalseL(u32),
    JmpFalseI(u32),
    JmpFalseD(u32),
    JmpFalseB(u32),
    ForSetupII { slot: u16 },
    ForSetupAny { slot: u16 },
    ForNext { slot: u16, var: u16, exit: u32 },
    Dup,
    Pop,
    PushUnit,
    Ret,
}

/// A tier-2 artifact: specialized code plus the metadata that lets the
/// profiler sample it and the deoptimizer unwind it.
#[derive(Debug)]
pub struct CompiledFunction {
    pub source: FunctionId,
    pub code: Vec<OptInstr>,
    pub consts: Vec<Value>,
    pub tags: Vec<Rc<str>>,
    pub guards: Vec<GuardInfo>,
    pub slot_map: Vec<SlotMapEntry>,
    /// The effective feedback each speculation was compiled against.
    pub compiled_against: Vec<(FeedbackOrigin, FeedbackType)>,
    pub profile: RefCell<Vec<ProfileEntry>>,
    pub marker_token: u64,
    pub valid: Cell<bool>,
    /// Source locals plus synthetic registers.
    pub n_locals: u16,
    pub n_source_locals: u16,
    pub n_loops: u16,
    pub n_boxed_slots: u16,
}

impl CompiledFunction {
    pub fn invalidate(&self) {
        self.valid.set(false);
    }

    pub fn is_valid(&self) -> bool {
        self.valid.get()
    }

    pub fn clear_profile(&self) {
        for e in self.profile.borrow_mut().iter_mut() {
            *e = ProfileEntry::EMPTY;
        }
    }

    /// Renders the slot map in listing notation:
    /// `- #<slot>-><offset>: <sampled> (<count>), <compiled>`.
    pub fn render_slot_map(&self) -> String {
        let profile = self.profile.borrow();
        let mut out = String::new();
        for (entry, prof) in self.slot_map.iter().zip(profile.iter()) {
            out.push_str(&format!(
                "- #{}->{}: {} ({}), {}\n",
                entry.slot, entry.origin.offset, prof.sampled, prof.count, entry.compiled
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// abstract interpretation
// ---------------------------------------------------------------------------

/// Static type of a stack slot or local register.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AbsVal {
    /// No value on any path yet (reads fail at runtime).
    Never,
    I,
    D,
    L,
    Boxed { attr: bool },
}

impl AbsVal {
    fn join(self, other: AbsVal) -> AbsVal {
        use AbsVal::*;
        match (self, other) {
            (Never, x) | (x, Never) => x,
            (I, I) => I,
            (D, D) => D,
            (L, L) => L,
            (Boxed { attr: a }, Boxed { attr: b }) => Boxed { attr: a || b },
            (Boxed { attr }, _) | (_, Boxed { attr }) => Boxed { attr },
            _ => Boxed { attr: false },
        }
    }

    fn attr_possible(self) -> bool {
        matches!(self, AbsVal::Boxed { attr: true } | AbsVal::Never)
    }

    fn is_unboxed(self) -> bool {
        matches!(self, AbsVal::I | AbsVal::D | AbsVal::L)
    }
}

struct Ctx<'a> {
    f: &'a BaselineFunction,
    /// Effective feedback per record site (baseline overridden by
    /// sampled profiles).
    eff: Vec<FeedbackType>,
    overflow_sites: &'a BTreeSet<u32>,
    stored_locals: Vec<bool>,
    /// Record-site ordinal following each pc, when the next instruction
    /// is a `Record`.
    site_after: Vec<Option<u16>>,
    entry_pc: u32,
}

impl<'a> Ctx<'a> {
    fn build(
        f: &'a BaselineFunction,
        feedback: &FeedbackTable,
        overrides: &BTreeMap<u32, FeedbackType>,
        overflow_sites: &'a BTreeSet<u32>,
    ) -> Ctx<'a> {
        let eff: Vec<FeedbackType> = (0..f.record_sites.len())
            .map(|site| {
                let offset = f.record_sites[site];
                overrides.get(&offset).copied().unwrap_or_else(|| feedback.observed(site))
            })
            .collect();
        let mut stored_locals = vec![false; f.n_locals as usize];
        for instr in &f.code {
            match instr {
                Instr::StLocal(l) => stored_locals[*l as usize] = true,
                Instr::ForNext { var, .. } => {
                    let (slot, global) = decode_for_var(*var);
                    if !global {
                        stored_locals[slot as usize] = true;
                    }
                }
                _ => {}
            }
        }
        let mut site_after = vec![None; f.code.len()];
        for pc in 0..f.code.len().saturating_sub(1) {
            if let Instr::Record(site) = f.code[pc + 1] {
                site_after[pc] = Some(site);
            }
        }
        Ctx { f, eff, overflow_sites, stored_locals, site_after, entry_pc: f.n_params as u32 * 3 }
    }

    fn entry_tau(&self, param: usize) -> FeedbackType {
        self.eff[param]
    }
}

fn block_leaders(ctx: &Ctx) -> Vec<u32> {
    let code = &ctx.f.code;
    let mut set = BTreeSet::new();
    set.insert(ctx.entry_pc);
    for pc in ctx.entry_pc as usize..code.len() {
        match &code[pc] {
            Instr::Jump(t) => {
                set.insert(*t);
                set.insert(pc as u32 + 1);
            }
            Instr::JumpIfFalse(t) => {
                set.insert(*t);
                set.insert(pc as u32 + 1);
            }
            Instr::ForNext { exit, .. } => {
                set.insert(*exit);
                set.insert(pc as u32 + 1);
            }
            Instr::Ret => {
                set.insert(pc as u32 + 1);
            }
            _ => {}
        }
    }
    set.into_iter().filter(|&pc| (pc as usize) < code.len()).collect()
}

/// Edges out of the block ending at instruction `pc`.
enum BlockExit {
    Jump(u32),
    Branch { target: u32, fallthrough: u32 },
    /// ForNext: body fallthrough assigns the loop variable.
    Loop { body: u32, exit: u32, var_local: Option<u16> },
    Fallthrough(u32),
    Return,
}

type State = Vec<AbsVal>;

fn join_states(a: &mut State, b: &State) -> bool {
    let mut changed = false;
    for (x, y) in a.iter_mut().zip(b.iter()) {
        let j = x.join(*y);
        if j != *x {
            *x = j;
            changed = true;
        }
    }
    changed
}

/// Emission bookkeeping for the codegen pass.
struct Emitter {
    code: Vec<OptInstr>,
    guards: Vec<GuardInfo>,
    slot_map: Vec<SlotMapEntry>,
    compiled_against: Vec<(FeedbackOrigin, FeedbackType)>,
    /// baseline pc -> opt pc of the first emitted instruction
    pc_map: Vec<u32>,
    /// (opt index, baseline target) pairs to patch
    patches: Vec<(usize, u32)>,
    next_synth: u16,
    /// global slot -> synthetic register holding its guarded value
    global_cache: HashMap<u16, u16>,
}

impl Emitter {
    fn new(ctx: &Ctx) -> Emitter {
        Emitter {
            code: Vec::new(),
            guards: Vec::new(),
            slot_map: Vec::new(),
            compiled_against: Vec::new(),
            pc_map: vec![0; ctx.f.code.len() + 1],
            patches: Vec::new(),
            next_synth: ctx.f.n_locals,
            global_cache: HashMap::new(),
        }
    }

    fn push(&mut self, i: OptInstr) {
        self.code.push(i);
    }

    fn new_guard(&mut self, ctx: &Ctx, site: u16, baseline_pc: u32, action: GuardAction) -> u16 {
        let expected = ctx.eff[site as usize];
        let origin = ctx.f.origin(site as usize);
        self.compiled_against.push((origin, expected));
        if let GuardAction::BoxStash { slot, .. } = action {
            self.slot_map.push(SlotMapEntry { slot, origin, compiled: expected });
        }
        self.guards.push(GuardInfo { expected, site, baseline_pc, action });
        (self.guards.len() - 1) as u16
    }

    fn alloc_slot(&mut self) -> u16 {
        self.slot_map.len() as u16
    }

    fn alloc_synth(&mut self) -> u16 {
        let s = self.next_synth;
        self.next_synth += 1;
        s
    }

    fn jump_placeholder(&mut self, instr: OptInstr, baseline_target: u32) {
        self.patches.push((self.code.len(), baseline_target));
        self.code.push(instr);
    }
}

/// Transfer function for one block, shared by the fixpoint pass
/// (`em == None`) and the codegen pass, so the two can never disagree
/// about types or speculation decisions.
fn run_block(
    ctx: &Ctx,
    start: u32,
    end: u32,
    state: &mut State,
    mut em: Option<&mut Emitter>,
) -> BlockExit {
    let code = &ctx.f.code;
    let mut stack: Vec<AbsVal> = Vec::new();
    let mut pc = start as usize;
    while pc < end as usize {
        if let Some(e) = em.as_deref_mut() {
            e.pc_map[pc] = e.code.len() as u32;
        }
        let instr = &code[pc];
        match instr {
            Instr::Const(i) => {
                let v = &ctx.f.consts[*i as usize];
                let abs = abs_of_value(v);
                if let Some(e) = em.as_deref_mut() {
                    e.push(match abs {
                        AbsVal::I => OptInstr::ConstI(v.scalar_i32().unwrap()),
                        AbsVal::D => OptInstr::ConstD(v.scalar_f64().unwrap()),
                        AbsVal::L => OptInstr::ConstL(v.scalar_bool().unwrap()),
                        _ => OptInstr::ConstBoxed(*i),
                    });
                }
                stack.push(abs);
            }
            Instr::LdLocal(l) => {
                let site = ctx.site_after[pc].expect("loads are recorded");
                let a = state[*l as usize];
                if a.is_unboxed() {
                    if let Some(e) = em.as_deref_mut() {
                        e.push(OptInstr::LdLoc(*l));
                    }
                    stack.push(a);
                } else {
                    let tau = ctx.eff[site as usize];
                    if tau.unboxable() {
                        let abs = unboxed_of(&tau);
                        if let Some(e) = em.as_deref_mut() {
                            let action = action_of(&tau);
                            let g = e.new_guard(ctx, site, pc as u32, action);
                            e.push(OptInstr::LdLocGuard { local: *l, guard: g });
                        }
                        stack.push(abs);
                    } else if tau.is_partial() {
                        if let Some(e) = em.as_deref_mut() {
                            let check = ctx.stored_locals[*l as usize]
                                || (*l as usize) >= ctx.f.n_params as usize
                                || ctx.entry_tau(*l as usize) != tau;
                            let slot = e.alloc_slot();
                            let g = e.new_guard(
                                ctx,
                                site,
                                pc as u32,
                                GuardAction::BoxStash { slot, check },
                            );
                            e.push(OptInstr::LdLocGuard { local: *l, guard: g });
                        }
                        stack.push(AbsVal::Boxed { attr: tau.attr_seen() });
                    } else {
                        if let Some(e) = em.as_deref_mut() {
                            e.push(OptInstr::LdLoc(*l));
                        }
                        stack.push(AbsVal::Boxed { attr: true });
                    }
                }
            }
            Instr::StLocal(l) => {
                let a = stack.pop().unwrap();
                state[*l as usize] = a;
                if let Some(e) = em.as_deref_mut() {
                    e.push(OptInstr::StLoc(*l));
                }
            }
            Instr::LdGlobal(g) => {
                let site = ctx.site_after[pc].expect("loads are recorded");
                let tau = ctx.eff[site as usize];
                if tau.unboxable() {
                    let abs = unboxed_of(&tau);
                    if let Some(e) = em.as_deref_mut() {
                        if let Some(&synth) = e.global_cache.get(g) {
                            e.push(OptInstr::LdLoc(synth));
                        } else {
                            let action = action_of(&tau);
                            let gd = e.new_guard(ctx, site, pc as u32, action);
                            e.push(OptInstr::LdGlobGuard { global: *g, guard: gd });
                            let synth = e.alloc_synth();
                            e.push(OptInstr::TeeLoc(synth));
                            e.global_cache.insert(*g, synth);
                        }
                    }
                    stack.push(abs);
                } else if tau.is_partial() {
                    if let Some(e) = em.as_deref_mut() {
                        let slot = e.alloc_slot();
                        let gd = e.new_guard(
                            ctx,
                            site,
                            pc as u32,
                            GuardAction::BoxStash { slot, check: true },
                        );
                        e.push(OptInstr::LdGlobGuard { global: *g, guard: gd });
                    }
                    stack.push(AbsVal::Boxed { attr: tau.attr_seen() });
                } else {
                    if let Some(e) = em.as_deref_mut() {
                        e.push(OptInstr::LdGlob(*g));
                    }
                    stack.push(AbsVal::Boxed { attr: true });
                }
            }
            Instr::StGlobal(g) => {
                stack.pop().unwrap();
                if let Some(e) = em.as_deref_mut() {
                    e.global_cache.remove(g);
                    e.push(OptInstr::StGlob(*g));
                }
            }
            Instr::Record(_) => {}
            Instr::Dup => {
                let top = *stack.last().unwrap();
                stack.push(top);
                if let Some(e) = em.as_deref_mut() {
                    e.push(OptInstr::Dup);
                }
            }
            Instr::Pop => {
                stack.pop().unwrap();
                if let Some(e) = em.as_deref_mut() {
                    e.push(OptInstr::Pop);
                }
            }
            Instr::Binop(op) => {
                let b = stack.pop().unwrap();
                let a = stack.pop().unwrap();
                let result = emit_binop(ctx, *op, a, b, pc as u32, em.as_deref_mut());
                stack.push(result);
            }
            Instr::Concat(n) => {
                for _ in 0..*n {
                    stack.pop().unwrap();
                }
                stack.push(AbsVal::Boxed { attr: false });
                if let Some(e) = em.as_deref_mut() {
                    e.push(OptInstr::Concat(*n));
                }
            }
            Instr::SetClass(t) => {
                stack.pop().unwrap();
                stack.push(AbsVal::Boxed { attr: true });
                if let Some(e) = em.as_deref_mut() {
                    e.push(OptInstr::SetClass(*t));
                }
            }
            Instr::Call { target, argc } => {
                for _ in 0..*argc {
                    stack.pop().unwrap();
                }
                stack.push(AbsVal::Boxed { attr: true });
                if let Some(e) = em.as_deref_mut() {
                    // the callee may write any global
                    e.global_cache.clear();
                    e.push(OptInstr::CallFn { target: *target, argc: *argc });
                }
            }
            Instr::CallBuiltin { builtin, argc } => {
                let mut args = Vec::with_capacity(*argc as usize);
                for _ in 0..*argc {
                    args.push(stack.pop().unwrap());
                }
                args.reverse();
                let attr = match builtin {
                    // setel preserves the base vector's tag
                    Builtin::SetEl => args[0].attr_possible(),
                    _ => false,
                };
                stack.push(AbsVal::Boxed { attr });
                if let Some(e) = em.as_deref_mut() {
                    // builtins neither read nor write globals
                    e.push(OptInstr::CallBuiltin { builtin: *builtin, argc: *argc });
                }
            }
            Instr::Jump(t) => {
                assert!(stack.is_empty(), "jumps happen at statement boundaries");
                if let Some(e) = em.as_deref_mut() {
                    e.jump_placeholder(OptInstr::Jump(0), *t);
                }
                return BlockExit::Jump(*t);
            }
            Instr::JumpIfFalse(t) => {
                let c = stack.pop().unwrap();
                assert!(stack.is_empty(), "branches happen at statement boundaries");
                if let Some(e) = em.as_deref_mut() {
                    let instr = match c {
                        AbsVal::L => OptInstr::JmpFalseL(0),
                        AbsVal::I => OptInstr::JmpFalseI(0),
                        AbsVal::D => OptInstr::JmpFalseD(0),
                        _ => OptInstr::JmpFalseB(0),
                    };
                    e.jump_placeholder(instr, *t);
                }
                return BlockExit::Branch { target: *t, fallthrough: pc as u32 + 1 };
            }
            Instr::ForSetup { slot } => {
                let to = stack.pop().unwrap();
                let from = stack.pop().unwrap();
                if let Some(e) = em.as_deref_mut() {
                    if from == AbsVal::I && to == AbsVal::I {
                        e.push(OptInstr::ForSetupII { slot: *slot });
                    } else {
                        e.push(OptInstr::ForSetupAny { slot: *slot });
                    }
                }
            }
            Instr::ForNext { slot, var, exit } => {
                assert!(stack.is_empty());
                let (var_slot, var_global) = decode_for_var(*var);
                assert!(!var_global, "top-level code is never specialized");
                if let Some(e) = em.as_deref_mut() {
                    e.jump_placeholder(
                        OptInstr::ForNext { slot: *slot, var: var_slot, exit: 0 },
                        *exit,
                    );
                }
                return BlockExit::Loop {
                    body: pc as u32 + 1,
                    exit: *exit,
                    var_local: Some(var_slot),
                };
            }
            Instr::PushUnit => {
                stack.push(AbsVal::Boxed { attr: false });
                if let Some(e) = em.as_deref_mut() {
                    e.push(OptInstr::PushUnit);
                }
            }
            Instr::Ret => {
                stack.pop().unwrap();
                assert!(stack.is_empty());
                if let Some(e) = em.as_deref_mut() {
                    e.push(OptInstr::Ret);
                }
                return BlockExit::Return;
            }
        }
        pc += 1;
    }
    assert!(stack.is_empty(), "block falls through with a clean stack");
    BlockExit::Fallthrough(end)
}

fn abs_of_value(v: &Value) -> AbsVal {
    if v.scalar_i32().is_some() {
        AbsVal::I
    } else if v.scalar_f64().is_some() {
        AbsVal::D
    } else if v.scalar_bool().is_some() {
        AbsVal::L
    } else {
        AbsVal::Boxed { attr: v.class_tag().is_some() }
    }
}

fn unboxed_of(tau: &FeedbackType) -> AbsVal {
    if tau.kinds().contains(Kind::Integer) {
        AbsVal::I
    } else {
        AbsVal::D
    }
}

fn action_of(tau: &FeedbackType) -> GuardAction {
    if tau.kinds().contains(Kind::Integer) {
        GuardAction::UnboxInt
    } else {
        GuardAction::UnboxDbl
    }
}

/// Emits coercions and the operator itself; returns the abstract result.
fn emit_binop(
    ctx: &Ctx,
    op: BinOp,
    a: AbsVal,
    b: AbsVal,
    bpc: u32,
    mut em: Option<&mut Emitter>,
) -> AbsVal {
    use AbsVal::*;
    let generic = !a.is_unboxed() || !b.is_unboxed();
    if generic {
        let attr_possible = a.attr_possible() || b.attr_possible();
        if let Some(e) = em.as_deref_mut() {
            e.push(if attr_possible {
                OptInstr::BinopDispatch(op)
            } else {
                OptInstr::BinopDirect(op)
            });
        }
        return if op.is_comparison() {
            Boxed { attr: false }
        } else {
            Boxed { attr: attr_possible }
        };
    }

    // both operands unboxed scalars
    let wants_dbl = a == D || b == D || matches!(op, BinOp::Div | BinOp::Pow);
    if let Some(e) = em.as_deref_mut() {
        // lift logicals to integers first, then integers to doubles
        if b == L {
            e.push(OptInstr::L2I);
        }
        if a == L {
            e.push(OptInstr::L2IUnder);
        }
        if wants_dbl {
            if b == I || b == L {
                e.push(OptInstr::I2D);
            }
            if a == I || a == L {
                e.push(OptInstr::I2DUnder);
            }
        }
    }
    if op.is_comparison() {
        if let Some(e) = em.as_deref_mut() {
            e.push(if wants_dbl { OptInstr::CmpDD(op) } else { OptInstr::CmpII(op) });
        }
        return L;
    }
    if wants_dbl {
        if let Some(e) = em.as_deref_mut() {
            e.push(match op {
                BinOp::Add => OptInstr::AddDD,
                BinOp::Sub => OptInstr::SubDD,
                BinOp::Mul => OptInstr::MulDD,
                BinOp::Div => OptInstr::DivDD,
                BinOp::Mod => OptInstr::ModDD,
                BinOp::Pow => OptInstr::PowDD,
                _ => unreachable!(),
            });
        }
        return D;
    }
    // integer domain: deopt on overflow unless this site already showed
    // overflow, in which case promote dynamically
    let dynamic = ctx.overflow_sites.contains(&bpc);
    if let Some(e) = em.as_deref_mut() {
        e.push(match (op, dynamic) {
            (BinOp::Add, false) => OptInstr::AddII { bpc },
            (BinOp::Sub, false) => OptInstr::SubII { bpc },
            (BinOp::Mul, false) => OptInstr::MulII { bpc },
            (BinOp::Mod, false) => OptInstr::ModII { bpc },
            (BinOp::Add, true) => OptInstr::AddIIDyn,
            (BinOp::Sub, true) => OptInstr::SubIIDyn,
            (BinOp::Mul, true) => OptInstr::MulIIDyn,
            (BinOp::Mod, true) => OptInstr::ModIIDyn,
            _ => unreachable!(),
        });
    }
    if dynamic {
        Boxed { attr: false }
    } else {
        I
    }
}

/// Applies the abstract effect of the parameter entry guards.
fn entry_state(ctx: &Ctx, em: Option<&mut Emitter>) -> State {
    let mut state = vec![AbsVal::Never; ctx.f.n_locals as usize];
    let mut em = em;
    for p in 0..ctx.f.n_params as usize {
        let tau = ctx.entry_tau(p);
        let bpc = (p * 3) as u32;
        if tau.unboxable() {
            if let Some(e) = em.as_deref_mut() {
                let g = e.new_guard(ctx, p as u16, bpc, action_of(&tau));
                e.push(OptInstr::GuardParam { local: p as u16, guard: g });
            }
            state[p] = unboxed_of(&tau);
        } else if tau.is_partial() {
            if let Some(e) = em.as_deref_mut() {
                let slot = e.alloc_slot();
                let g = e.new_guard(ctx, p as u16, bpc, GuardAction::BoxStash { slot, check: true });
                e.push(OptInstr::GuardParam { local: p as u16, guard: g });
            }
            state[p] = AbsVal::Boxed { attr: tau.attr_seen() };
        } else {
            state[p] = AbsVal::Boxed { attr: true };
        }
    }
    state
}

pub fn specialize(
    f: &BaselineFunction,
    feedback: &FeedbackTable,
    overrides: &BTreeMap<u32, FeedbackType>,
    overflow_sites: &BTreeSet<u32>,
    marker_token: u64,
) -> Result<CompiledFunction, SpecializeError> {
    if f.is_toplevel {
        return Err(SpecializeError::TopLevel);
    }
    if f.record_sites.is_empty() {
        return Err(SpecializeError::NoRecordSites);
    }
    for offset in overrides.keys() {
        debug_assert!(
            f.record_sites.binary_search(offset).is_ok(),
            "override origin must be a record site"
        );
    }
    let ctx = Ctx::build(f, feedback, overrides, overflow_sites);
    let leaders = block_leaders(&ctx);
    let block_end =
        |i: usize| leaders.get(i + 1).copied().unwrap_or(ctx.f.code.len() as u32);
    let block_index: HashMap<u32, usize> =
        leaders.iter().enumerate().map(|(i, &pc)| (pc, i)).collect();

    // fixpoint over block-entry states
    let mut states: Vec<Option<State>> = vec![None; leaders.len()];
    states[0] = Some(entry_state(&ctx, None));
    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..leaders.len() {
            let Some(entry) = states[i].clone() else { continue };
            let mut state = entry;
            let exit = run_block(&ctx, leaders[i], block_end(i), &mut state, None);
            let mut propagate = |target: u32, s: &State, changed: &mut bool| {
                let bi = block_index[&target];
                match &mut states[bi] {
                    Some(existing) => {
                        if join_states(existing, s) {
                            *changed = true;
                        }
                    }
                    None => {
                        states[bi] = Some(s.clone());
                        *changed = true;
                    }
                }
            };
            match exit {
                BlockExit::Jump(t) => propagate(t, &state, &mut changed),
                BlockExit::Branch { target, fallthrough } => {
                    propagate(target, &state, &mut changed);
                    propagate(fallthrough, &state, &mut changed);
                }
                BlockExit::Loop { body, exit, var_local } => {
                    propagate(exit, &state, &mut changed);
                    let mut body_state = state.clone();
                    if let Some(v) = var_local {
                        body_state[v as usize] = AbsVal::I;
                    }
                    propagate(body, &body_state, &mut changed);
                }
                BlockExit::Fallthrough(next) => propagate(next, &state, &mut changed),
                BlockExit::Return => {}
            }
        }
    }

    // codegen with the converged states
    let mut em = Emitter::new(&ctx);
    let _ = entry_state(&ctx, Some(&mut em));
    for i in 0..leaders.len() {
        em.global_cache.clear();
        let mut state = match &states[i] {
            Some(s) => s.clone(),
            // unreachable block: conservative state keeps codegen total
            None => vec![AbsVal::Boxed { attr: true }; ctx.f.n_locals as usize],
        };
        run_block(&ctx, leaders[i], block_end(i), &mut state, Some(&mut em));
    }
    em.pc_map[ctx.f.code.len()] = em.code.len() as u32;

    for (at, baseline_target) in em.patches {
        let target = em.pc_map[baseline_target as usize];
        match &mut em.code[at] {
            OptInstr::Jump(t)
            | OptInstr::JmpFalseL(t)
            | OptInstr::JmpFalseI(t)
            | OptInstr::JmpFalseD(t)
            | OptInstr::JmpFalseB(t)
            | OptInstr::ForNext { exit: t, .. } => *t = target,
            other => unreachable!("not a jump: {other:?}"),
        }
    }

    let n_slots = em.slot_map.len();
    debug_assert!(em.slot_map.iter().enumerate().all(|(i, e)| e.slot as usize == i));
    Ok(CompiledFunction {
        source: f.id,
        code: em.code,
        consts: f.consts.clone(),
        tags: f.tags.clone(),
        guards: em.guards,
        slot_map: em.slot_map,
        compiled_against: em.compiled_against,
        profile: RefCell::new(vec![ProfileEntry::EMPTY; n_slots]),
        marker_token,
        valid: Cell::new(true),
        n_locals: em.next_synth,
        n_source_locals: f.n_locals,
        n_loops: f.n_loops,
        n_boxed_slots: n_slots as u16,
    })
}
