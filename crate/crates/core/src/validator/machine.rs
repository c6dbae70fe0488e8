//! Concrete interpreter for the instruction subset, with a shadow record of
//! every frame's control data.

use crate::effects::libc::{LibcDb, Rule};
use crate::frontend::{Base, Cond, Gpr, Instruction, MemRef, Mnemonic, Operand, ProgramImage, Reg};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Stack pointer at entry of the first function, pointing at its return
/// address. Chosen so the entry frame's saved base register has no zero
/// byte in its low position.
pub const STACK_TOP: u64 = 0x7fff_ffff_e0f8;
pub const STACK_BELOW: u64 = 0x10_0000;
pub const STACK_ABOVE: u64 = 0x1_0000;
pub const STACK_LOW: u64 = STACK_TOP - STACK_BELOW;
pub const STACK_HIGH: u64 = STACK_TOP + STACK_ABOVE;
/// Uninitialised stack bytes.
pub const POISON: u8 = 0xcc;
/// Return address of the entry function; returning there ends the run.
pub const EXIT_ADDR: u64 = 0x7fff_f7a2_d1b3;
/// Base register value on entry to the first function.
pub const INITIAL_RBP: u64 = 0x7fff_ffff_e1c8;
pub const CANARY: u64 = 0x5a17_c3e9_d2b4_a687;
/// Region holding argv strings and synthetic argument buffers.
pub const AUX_BASE: u64 = 0x7fff_f000_0000;
const AUX_LIMIT: usize = 0x40_0000;
/// Addresses below this are writable program globals.
pub const GLOBALS_LIMIT: u64 = 0x1000_0000;
const MAX_STRING: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrashCause {
    ReturnAddressCorrupted,
    BaseRegisterCorrupted,
    CanaryMismatch,
    OutOfStackWrite,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "status", content = "cause", rename_all = "kebab-case")]
pub enum Status {
    CleanExit,
    Crash(CrashCause),
    StepBudgetExceeded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutcome {
    #[serde(flatten)]
    pub status: Status,
    pub exit_code: Option<i64>,
    pub steps: u64,
    #[serde(with = "lossy_bytes")]
    pub stdout: Vec<u8>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl RunOutcome {
    pub fn is_crash(&self) -> bool {
        matches!(self.status, Status::Crash(_))
    }

    pub fn is_clean(&self) -> bool {
        self.status == Status::CleanExit
    }
}

mod lossy_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&String::from_utf8_lossy(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        Ok(String::deserialize(d)?.into_bytes())
    }
}

mod lossy_byte_list {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[Vec<u8>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|b| String::from_utf8_lossy(b)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<u8>>, D::Error> {
        Ok(Vec::<String>::deserialize(d)?.into_iter().map(String::into_bytes).collect())
    }
}

/// Concrete program inputs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Inputs {
    #[serde(with = "lossy_bytes")]
    pub stdin: Vec<u8>,
    /// argv[1..]; argv[0] is always `prog`.
    #[serde(with = "lossy_byte_list")]
    pub args: Vec<Vec<u8>>,
}

/// Bound of a bounded replacement call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Static(u64),
    Runtime,
}

/// The `safecall` pseudo-instruction emitted in trampolines:
/// `safecall <template> <replacement>(<bound>)`, with `, raw` after the
/// bound when the copy is not forcibly NUL-terminated.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SafeCall {
    pub template: String,
    pub replacement: String,
    pub bound: Bound,
    pub terminate: bool,
}

impl SafeCall {
    pub fn render(&self) -> String {
        let bound = match self.bound {
            Bound::Static(n) => n.to_string(),
            Bound::Runtime => "runtime".to_string(),
        };
        let raw = if self.terminate { "" } else { ", raw" };
        format!("safecall {} {}({}{})", self.template, self.replacement, bound, raw)
    }

    pub fn parse(text: &str) -> Option<SafeCall> {
        let rest = text.trim().strip_prefix("safecall")?.trim();
        let (template, call) = rest.split_once(char::is_whitespace)?;
        let (replacement, args) = call.trim().split_once('(')?;
        let args = args.strip_suffix(')')?;
        let (bound, terminate) = match args.split_once(',') {
            Some((b, flag)) if flag.trim() == "raw" => (b.trim(), false),
            Some(_) => return None,
            None => (args.trim(), true),
        };
        let bound = if bound == "runtime" {
            Bound::Runtime
        } else {
            Bound::Static(bound.parse().ok()?)
        };
        Some(SafeCall {
            template: template.to_string(),
            replacement: replacement.trim().to_string(),
            bound,
            terminate,
        })
    }
}

/// Shadow copy of one frame's control data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shadow {
    pub function: String,
    /// Address of the return-address slot (stack pointer on entry).
    pub entry_rsp: u64,
    pub ret: u64,
    pub saved_rbp: Option<(u64, u64)>,
    pub canary: Option<u64>,
}

impl Shadow {
    /// Addresses of every control byte of this frame.
    pub fn control_bytes(&self) -> Vec<u64> {
        let mut v: Vec<u64> = (self.entry_rsp..self.entry_rsp + 8).collect();
        if let Some((slot, _)) = self.saved_rbp {
            v.extend(slot..slot + 8);
        }
        if let Some(slot) = self.canary {
            v.extend(slot..slot + 8);
        }
        v
    }

    /// Return-address and canary bytes, the targets of the crash-length
    /// search.
    pub fn guard_bytes(&self) -> Vec<u64> {
        let mut v: Vec<u64> = (self.entry_rsp..self.entry_rsp + 8).collect();
        if let Some(slot) = self.canary {
            v.extend(slot..slot + 8);
        }
        v
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Flags {
    zf: bool,
    sf: bool,
    cf: bool,
    of: bool,
}

/// How the first frame is entered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Start {
    /// `main(argc, argv)`.
    Main,
    /// Every argument register points at its own copy of `bytes` plus NUL.
    Synthetic { bytes: Vec<u8> },
}

pub struct Machine<'a> {
    image: &'a ProgramImage,
    libc: &'a LibcDb,
    regs: [u64; 16],
    flags: Flags,
    canary_taint: u16,
    stack: Vec<u8>,
    aux: Vec<u8>,
    globals: HashMap<u64, u8>,
    pc: Option<usize>,
    pub shadows: Vec<Shadow>,
    stdin: Vec<u8>,
    stdin_pos: usize,
    stdout: Vec<u8>,
    steps: u64,
    budget: u64,
    /// Address ranges filled from attacker-controlled input.
    attacker: Vec<(u64, u64)>,
    attacker_reads: u64,
    notes: Vec<String>,
    finished: Option<RunOutcome>,
}

enum Flow {
    Next,
    Jump(usize),
    End(Status, Option<i64>),
}

fn mask(w: u8) -> u64 {
    if w >= 8 {
        u64::MAX
    } else {
        (1u64 << (w as u32 * 8)) - 1
    }
}

fn sign_bit(v: u64, w: u8) -> bool {
    (v >> (w as u32 * 8 - 1)) & 1 == 1
}

fn sign_extend(v: u64, w: u8) -> u64 {
    if w >= 8 {
        v
    } else {
        let shift = 64 - w as u32 * 8;
        (((v << shift) as i64) >> shift) as u64
    }
}

impl<'a> Machine<'a> {
    pub fn new(image: &'a ProgramImage, libc: &'a LibcDb, inputs: &Inputs, budget: u64) -> Machine<'a> {
        Machine {
            image,
            libc,
            regs: [0; 16],
            flags: Flags::default(),
            canary_taint: 0,
            stack: vec![POISON; (STACK_HIGH - STACK_LOW) as usize],
            aux: Vec::new(),
            globals: HashMap::new(),
            pc: None,
            shadows: Vec::new(),
            stdin: inputs.stdin.clone(),
            stdin_pos: 0,
            stdout: Vec::new(),
            steps: 0,
            budget,
            attacker: Vec::new(),
            attacker_reads: 0,
            notes: Vec::new(),
            finished: None,
        }
        .with_args(inputs)
    }

    fn with_args(mut self, inputs: &Inputs) -> Self {
        let mut ptrs = vec![self.aux_alloc(b"prog\0", false)];
        for a in &inputs.args {
            let mut s = a.clone();
            s.push(0);
            ptrs.push(self.aux_alloc(&s, true));
        }
        ptrs.push(0);
        let bytes: Vec<u8> = ptrs.iter().flat_map(|p| p.to_le_bytes()).collect();
        let argv = self.aux_alloc(&bytes, false);
        self.regs[Gpr::Rdi.index()] = inputs.args.len() as u64 + 1;
        self.regs[Gpr::Rsi.index()] = argv;
        self
    }

    fn aux_alloc(&mut self, bytes: &[u8], attacker: bool) -> u64 {
        let at = AUX_BASE + self.aux.len() as u64;
        self.aux.extend_from_slice(bytes);
        // keep allocations 16-byte aligned
        while !self.aux.len().is_multiple_of(16) {
            self.aux.push(0);
        }
        if attacker && !bytes.is_empty() {
            self.attacker.push((at, at + bytes.len() as u64));
        }
        at
    }

    /// Enter `function` (by listing index of its first instruction).
    pub fn start(&mut self, entry: usize, how: Start) {
        let name = self
            .image
            .function_of_index(entry)
            .map(|f| f.name.clone())
            .unwrap_or_default();
        if let Start::Synthetic { bytes } = how {
            let mut b = bytes.clone();
            b.push(0);
            for g in Gpr::ARGS {
                self.regs[g.index()] = self.aux_alloc(&b, true);
            }
        }
        self.regs[Gpr::Rsp.index()] = STACK_TOP;
        self.regs[Gpr::Rbp.index()] = INITIAL_RBP;
        let _ = self.write(STACK_TOP, EXIT_ADDR, 8);
        self.shadows = vec![Shadow {
            function: name,
            entry_rsp: STACK_TOP,
            ret: EXIT_ADDR,
            saved_rbp: None,
            canary: None,
        }];
        self.pc = Some(entry);
    }

    pub fn pc(&self) -> Option<u64> {
        self.pc.map(|i| self.image.instructions[i].address)
    }

    pub fn pc_index(&self) -> Option<usize> {
        self.pc
    }

    pub fn rsp(&self) -> u64 {
        self.regs[Gpr::Rsp.index()]
    }

    pub fn reg(&self, g: Gpr) -> u64 {
        self.regs[g.index()]
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn stdin_consumed(&self) -> usize {
        self.stdin_pos
    }

    pub fn attacker_reads(&self) -> u64 {
        self.attacker_reads
    }

    /// Return addresses of every frame below the entry frame, outermost first.
    pub fn call_context(&self) -> Vec<u64> {
        self.shadows.iter().skip(1).map(|s| s.ret).collect()
    }

    pub fn finished(&self) -> Option<&RunOutcome> {
        self.finished.as_ref()
    }

    /// Copy of stack bytes in `[lo, hi)` (clamped to the stack region).
    pub fn stack_bytes(&self, lo: u64, hi: u64) -> Vec<u8> {
        let lo = lo.clamp(STACK_LOW, STACK_HIGH);
        let hi = hi.clamp(lo, STACK_HIGH);
        self.stack[(lo - STACK_LOW) as usize..(hi - STACK_LOW) as usize].to_vec()
    }

    /// NUL-terminated string at `addr` (terminator excluded).
    pub fn read_string(&mut self, addr: u64) -> Vec<u8> {
        self.read_cstr(addr)
    }

    pub fn run(mut self) -> RunOutcome {
        loop {
            if let Some(out) = self.step() {
                return out;
            }
        }
    }

    fn finish(&mut self, status: Status, code: Option<i64>) -> RunOutcome {
        let out = RunOutcome {
            status,
            exit_code: code,
            steps: self.steps,
            stdout: self.stdout.clone(),
            notes: std::mem::take(&mut self.notes),
        };
        self.pc = None;
        self.finished = Some(out.clone());
        out
    }

    /// Execute one instruction; returns the outcome when the run ends.
    pub fn step(&mut self) -> Option<RunOutcome> {
        if let Some(done) = &self.finished {
            return Some(done.clone());
        }
        let Some(idx) = self.pc else {
            return Some(self.finish(Status::CleanExit, None));
        };
        if self.steps >= self.budget {
            return Some(self.finish(Status::StepBudgetExceeded, None));
        }
        self.steps += 1;
        let ins = &self.image.instructions[idx];
        match self.exec(idx, ins) {
            Ok(Flow::Next) => match self.image.next_in_function(idx) {
                Some(a) => {
                    self.pc = self.image.index_of(a);
                    None
                }
                None => Some(self.finish(Status::CleanExit, None)),
            },
            Ok(Flow::Jump(t)) => {
                self.pc = Some(t);
                None
            }
            Ok(Flow::End(status, code)) => Some(self.finish(status, code)),
            Err(cause) => Some(self.finish(Status::Crash(cause), None)),
        }
    }

    // ---- memory -------------------------------------------------------

    fn read_byte(&mut self, a: u64) -> u8 {
        if (STACK_LOW..STACK_HIGH).contains(&a) {
            return self.stack[(a - STACK_LOW) as usize];
        }
        if a >= AUX_BASE && a < AUX_BASE + self.aux.len() as u64 {
            if self.attacker.iter().any(|(lo, hi)| (*lo..*hi).contains(&a)) {
                self.attacker_reads += 1;
            }
            return self.aux[(a - AUX_BASE) as usize];
        }
        if let Some(b) = self.globals.get(&a) {
            return *b;
        }
        self.image.read_data(a).map(|d| d[0]).unwrap_or(0)
    }

    fn write_byte(&mut self, a: u64, v: u8) -> Result<(), CrashCause> {
        if (STACK_LOW..STACK_HIGH).contains(&a) {
            self.stack[(a - STACK_LOW) as usize] = v;
            return Ok(());
        }
        if a >= AUX_BASE && a < AUX_BASE + AUX_LIMIT as u64 {
            let off = (a - AUX_BASE) as usize;
            if off >= self.aux.len() {
                self.aux.resize(off + 1, 0);
            }
            self.aux[off] = v;
            return Ok(());
        }
        if (0x1000..GLOBALS_LIMIT).contains(&a) {
            self.globals.insert(a, v);
            return Ok(());
        }
        Err(CrashCause::OutOfStackWrite)
    }

    fn read(&mut self, a: u64, w: u8) -> u64 {
        let mut v = 0u64;
        for i in 0..w as u64 {
            v |= (self.read_byte(a.wrapping_add(i)) as u64) << (8 * i);
        }
        v
    }

    fn write(&mut self, a: u64, v: u64, w: u8) -> Result<(), CrashCause> {
        for i in 0..w as u64 {
            self.write_byte(a.wrapping_add(i), (v >> (8 * i)) as u8)?;
        }
        Ok(())
    }

    fn write_bytes(&mut self, a: u64, bytes: &[u8]) -> Result<(), CrashCause> {
        for (i, b) in bytes.iter().enumerate() {
            self.write_byte(a.wrapping_add(i as u64), *b)?;
        }
        Ok(())
    }

    fn read_cstr(&mut self, a: u64) -> Vec<u8> {
        let mut out = Vec::new();
        let mut p = a;
        while out.len() < MAX_STRING {
            let b = self.read_byte(p);
            if b == 0 {
                break;
            }
            out.push(b);
            p = p.wrapping_add(1);
        }
        out
    }

    fn push(&mut self, v: u64) -> Result<(), CrashCause> {
        let sp = self.rsp().wrapping_sub(8);
        self.regs[Gpr::Rsp.index()] = sp;
        self.write(sp, v, 8)
    }

    fn pop(&mut self) -> u64 {
        let sp = self.rsp();
        let v = self.read(sp, 8);
        self.regs[Gpr::Rsp.index()] = sp.wrapping_add(8);
        v
    }

    // ---- registers and operands ----------------------------------------

    fn get_reg(&self, r: Reg) -> u64 {
        let v = self.regs[r.gpr.index()];
        if r.high {
            (v >> 8) & 0xff
        } else {
            v & mask(r.width)
        }
    }

    fn set_reg(&mut self, r: Reg, v: u64) {
        let slot = &mut self.regs[r.gpr.index()];
        *slot = match (r.width, r.high) {
            (8, _) => v,
            (4, _) => v & 0xffff_ffff,
            (1, true) => (*slot & !0xff00) | ((v & 0xff) << 8),
            (w, _) => (*slot & !mask(w)) | (v & mask(w)),
        };
        self.canary_taint &= !(1 << r.gpr.index());
    }

    fn next_address(&self, idx: usize) -> u64 {
        self.image
            .instructions
            .get(idx + 1)
            .map(|i| i.address)
            .unwrap_or(self.image.instructions[idx].address + 7)
    }

    fn ea(&self, idx: usize, m: &MemRef) -> u64 {
        let base = match m.base {
            Base::Reg(g) => self.regs[g.index()],
            Base::Rip => self.next_address(idx),
        };
        let index = m
            .index
            .map(|(g, s)| self.regs[g.index()].wrapping_mul(s as u64))
            .unwrap_or(0);
        base.wrapping_add(index).wrapping_add(m.disp as u64)
    }

    /// Width of an instruction's data operands.
    fn width(ops: &[Operand]) -> u8 {
        for o in ops {
            match o {
                Operand::Reg(r) => return r.width,
                Operand::Mem(MemRef { width: Some(w), .. }) => return *w,
                Operand::Seg { width: Some(w), .. } => return *w,
                _ => {}
            }
        }
        8
    }

    fn read_op(&mut self, idx: usize, o: &Operand, w: u8) -> u64 {
        match o {
            Operand::Reg(r) => self.get_reg(*r),
            Operand::Imm(v) => (*v as u64) & mask(w),
            Operand::Mem(m) => {
                let a = self.ea(idx, m);
                self.read(a, m.width.unwrap_or(w))
            }
            Operand::Seg { disp, .. } => {
                if *disp == 0x28 {
                    CANARY & mask(w)
                } else {
                    0
                }
            }
            Operand::Target(t) => t.address,
        }
    }

    fn write_op(&mut self, idx: usize, o: &Operand, v: u64, w: u8) -> Result<(), CrashCause> {
        match o {
            Operand::Reg(r) => {
                self.set_reg(*r, v);
                Ok(())
            }
            Operand::Mem(m) => {
                let a = self.ea(idx, m);
                self.write(a, v, m.width.unwrap_or(w))
            }
            _ => Ok(()),
        }
    }

    fn cond(&self, c: Cond) -> bool {
        let f = self.flags;
        match c {
            Cond::E => f.zf,
            Cond::Ne => !f.zf,
            Cond::L => f.sf != f.of,
            Cond::Le => f.zf || f.sf != f.of,
            Cond::G => !f.zf && f.sf == f.of,
            Cond::Ge => f.sf == f.of,
            Cond::B => f.cf,
            Cond::Be => f.cf || f.zf,
            Cond::A => !f.cf && !f.zf,
            Cond::Ae => !f.cf,
            Cond::S => f.sf,
            Cond::Ns => !f.sf,
        }
    }

    fn logic_flags(&mut self, r: u64, w: u8) {
        self.flags = Flags {
            zf: r & mask(w) == 0,
            sf: sign_bit(r, w),
            cf: false,
            of: false,
        };
    }

    fn add_flags(&mut self, a: u64, b: u64, w: u8) -> u64 {
        let m = mask(w);
        let (a, b) = (a & m, b & m);
        let r = a.wrapping_add(b) & m;
        self.flags = Flags {
            zf: r == 0,
            sf: sign_bit(r, w),
            cf: r < a,
            of: sign_bit(!(a ^ b) & (a ^ r), w),
        };
        r
    }

    fn sub_flags(&mut self, a: u64, b: u64, w: u8) -> u64 {
        let m = mask(w);
        let (a, b) = (a & m, b & m);
        let r = a.wrapping_sub(b) & m;
        self.flags = Flags {
            zf: r == 0,
            sf: sign_bit(r, w),
            cf: a < b,
            of: sign_bit((a ^ b) & (a ^ r), w),
        };
        r
    }

    // ---- execution ------------------------------------------------------

    fn exec(&mut self, idx: usize, ins: &Instruction) -> Result<Flow, CrashCause> {
        let ops = &ins.operands;
        let w = Self::width(ops);
        match &ins.mnemonic {
            Mnemonic::Nop | Mnemonic::Endbr64 | Mnemonic::Unknown(_) => {}
            Mnemonic::Hlt => return Ok(Flow::End(Status::CleanExit, None)),
            Mnemonic::Mov => {
                let v = self.read_op(idx, &ops[1], w);
                let tainted = match &ops[1] {
                    Operand::Seg { disp: 0x28, .. } => true,
                    Operand::Reg(r) => self.canary_taint & (1 << r.gpr.index()) != 0,
                    _ => false,
                };
                self.write_op(idx, &ops[0], v, w)?;
                match &ops[0] {
                    Operand::Reg(r) if tainted => self.canary_taint |= 1 << r.gpr.index(),
                    Operand::Mem(m) if tainted => {
                        let a = self.ea(idx, m);
                        if let Some(top) = self.shadows.last_mut() {
                            if top.canary.is_none() && a < top.entry_rsp && a >= self.regs[Gpr::Rsp.index()] {
                                top.canary = Some(a);
                            }
                        }
                    }
                    _ => {}
                }
            }
            Mnemonic::Movzx | Mnemonic::Movsx => {
                let dw = Self::width(&ops[..1]);
                let sw = match &ops[1] {
                    Operand::Reg(r) => r.width,
                    Operand::Mem(m) => m.width.unwrap_or(if dw == 8 { 4 } else { 1 }),
                    _ => dw,
                };
                let v = self.read_op(idx, &ops[1], sw);
                let v = if ins.mnemonic == Mnemonic::Movsx {
                    sign_extend(v, sw) & mask(dw)
                } else {
                    v
                };
                self.write_op(idx, &ops[0], v, dw)?;
            }
            Mnemonic::Lea => {
                if let Operand::Mem(m) = &ops[1] {
                    let a = self.ea(idx, m);
                    self.write_op(idx, &ops[0], a & mask(w), w)?;
                }
            }
            Mnemonic::Xchg => {
                let a = self.read_op(idx, &ops[0], w);
                let b = self.read_op(idx, &ops[1], w);
                self.write_op(idx, &ops[0], b, w)?;
                self.write_op(idx, &ops[1], a, w)?;
            }
            Mnemonic::Add | Mnemonic::Sub | Mnemonic::Cmp => {
                let a = self.read_op(idx, &ops[0], w);
                let b = sign_extend(self.read_op(idx, &ops[1], w), w);
                let r = if ins.mnemonic == Mnemonic::Add {
                    self.add_flags(a, b, w)
                } else {
                    self.sub_flags(a, b, w)
                };
                if ins.mnemonic != Mnemonic::Cmp {
                    self.write_op(idx, &ops[0], r, w)?;
                }
            }
            Mnemonic::And | Mnemonic::Or | Mnemonic::Xor | Mnemonic::Test => {
                let a = self.read_op(idx, &ops[0], w);
                let b = self.read_op(idx, &ops[1], w);
                let r = match ins.mnemonic {
                    Mnemonic::Or => a | b,
                    Mnemonic::Xor => a ^ b,
                    _ => a & b,
                } & mask(w);
                self.logic_flags(r, w);
                if ins.mnemonic != Mnemonic::Test {
                    self.write_op(idx, &ops[0], r, w)?;
                }
            }
            Mnemonic::Inc | Mnemonic::Dec => {
                let a = self.read_op(idx, &ops[0], w);
                let cf = self.flags.cf;
                let r = if ins.mnemonic == Mnemonic::Inc {
                    self.add_flags(a, 1, w)
                } else {
                    self.sub_flags(a, 1, w)
                };
                self.flags.cf = cf;
                self.write_op(idx, &ops[0], r, w)?;
            }
            Mnemonic::Neg => {
                let a = self.read_op(idx, &ops[0], w);
                let r = self.sub_flags(0, a, w);
                self.write_op(idx, &ops[0], r, w)?;
            }
            Mnemonic::Not => {
                let a = self.read_op(idx, &ops[0], w);
                self.write_op(idx, &ops[0], !a & mask(w), w)?;
            }
            Mnemonic::Shl | Mnemonic::Shr | Mnemonic::Sar => {
                let a = self.read_op(idx, &ops[0], w);
                let n = ops.get(1).map(|o| self.read_op(idx, o, 1)).unwrap_or(1) & 63;
                let r = match ins.mnemonic {
                    Mnemonic::Shl => a << n,
                    Mnemonic::Shr => (a & mask(w)) >> n,
                    _ => (sign_extend(a, w) as i64 >> n) as u64,
                } & mask(w);
                if n != 0 {
                    self.logic_flags(r, w);
                }
                self.write_op(idx, &ops[0], r, w)?;
            }
            Mnemonic::Imul => {
                let (dst, a, b) = match ops.len() {
                    1 => (Operand::Reg(Reg { gpr: Gpr::Rax, width: w, high: false }), Operand::Reg(Reg { gpr: Gpr::Rax, width: w, high: false }), ops[0].clone()),
                    2 => (ops[0].clone(), ops[0].clone(), ops[1].clone()),
                    _ => (ops[0].clone(), ops[1].clone(), ops[2].clone()),
                };
                let x = sign_extend(self.read_op(idx, &a, w), w) as i64 as i128;
                let y = sign_extend(self.read_op(idx, &b, w), w) as i64 as i128;
                let r = x.wrapping_mul(y);
                let v = (r as u64) & mask(w);
                let fits = sign_extend(v, w) as i64 as i128 == r;
                self.flags.cf = !fits;
                self.flags.of = !fits;
                self.write_op(idx, &dst, v, w)?;
            }
            Mnemonic::Cdqe => {
                let v = sign_extend(self.regs[0] & 0xffff_ffff, 4);
                self.regs[0] = v;
            }
            Mnemonic::Cdq => {
                let v = if sign_bit(self.regs[0], 4) { 0xffff_ffff } else { 0 };
                self.set_reg(Reg { gpr: Gpr::Rdx, width: 4, high: false }, v);
            }
            Mnemonic::Cqo => {
                self.regs[Gpr::Rdx.index()] = if (self.regs[0] as i64) < 0 { u64::MAX } else { 0 };
            }
            Mnemonic::Set(c) => {
                let v = self.cond(*c) as u64;
                self.write_op(idx, &ops[0], v, 1)?;
            }
            Mnemonic::Cmov(c) => {
                if self.cond(*c) {
                    let v = self.read_op(idx, &ops[1], w);
                    self.write_op(idx, &ops[0], v, w)?;
                }
            }
            Mnemonic::Push => {
                let v = match &ops[0] {
                    Operand::Imm(i) => *i as u64,
                    o => self.read_op(idx, o, 8),
                };
                let before = self.rsp();
                self.push(v)?;
                if let (Operand::Reg(r), Some(top)) = (&ops[0], self.shadows.last_mut()) {
                    if r.gpr == Gpr::Rbp && top.saved_rbp.is_none() && before == top.entry_rsp {
                        top.saved_rbp = Some((before - 8, v));
                    }
                }
            }
            Mnemonic::Pop => {
                let v = self.pop();
                self.write_op(idx, &ops[0], v, 8)?;
            }
            Mnemonic::Leave => {
                self.regs[Gpr::Rsp.index()] = self.regs[Gpr::Rbp.index()];
                let v = self.pop();
                self.regs[Gpr::Rbp.index()] = v;
            }
            Mnemonic::Jmp => {
                return match &ops[0] {
                    Operand::Target(t) => match self.image.index_of(t.address) {
                        Some(i) if !t.is_plt() => Ok(Flow::Jump(i)),
                        _ => {
                            // Tail call into a library function.
                            let name = t.plain_symbol().unwrap_or("").to_string();
                            match self.libc_call(&name)? {
                                Some(end) => Ok(end),
                                None => self.do_ret(0),
                            }
                        }
                    },
                    o => {
                        let a = self.read_op(idx, o, 8);
                        match self.image.index_of(a) {
                            Some(i) => Ok(Flow::Jump(i)),
                            None => Err(CrashCause::ReturnAddressCorrupted),
                        }
                    }
                };
            }
            Mnemonic::Jcc(c) => {
                if self.cond(*c) {
                    if let Some(t) = ins.target() {
                        if let Some(i) = self.image.index_of(t.address) {
                            return Ok(Flow::Jump(i));
                        }
                    }
                }
            }
            Mnemonic::Call => return self.do_call(idx, ins),
            Mnemonic::Ret => {
                let extra = match ops.first() {
                    Some(Operand::Imm(n)) => *n as u64,
                    _ => 0,
                };
                return self.do_ret(extra);
            }
            Mnemonic::Safecall => return self.safecall(ins),
        }
        Ok(Flow::Next)
    }

    fn do_call(&mut self, idx: usize, ins: &Instruction) -> Result<Flow, CrashCause> {
        let ret = self.image.return_address(idx);
        let (dest, name) = match &ins.operands[0] {
            Operand::Target(t) => {
                let user = !t.is_plt()
                    && self
                        .image
                        .index_of(t.address)
                        .and_then(|i| self.image.function_of_index(i))
                        .map(|f| !f.name.ends_with("@plt"))
                        .unwrap_or(false);
                if user {
                    (self.image.index_of(t.address), String::new())
                } else {
                    (None, t.plain_symbol().map(str::to_string).unwrap_or_default())
                }
            }
            o => {
                let a = self.read_op(idx, o, 8);
                (self.image.index_of(a), String::new())
            }
        };
        match dest {
            Some(target) => {
                self.push(ret)?;
                let function = self
                    .image
                    .function_of_index(target)
                    .map(|f| f.name.clone())
                    .unwrap_or_default();
                self.shadows.push(Shadow {
                    function,
                    entry_rsp: self.rsp(),
                    ret,
                    saved_rbp: None,
                    canary: None,
                });
                Ok(Flow::Jump(target))
            }
            None => {
                if let Some(end) = self.libc_call(&name)? {
                    return Ok(end);
                }
                Ok(Flow::Next)
            }
        }
    }

    fn do_ret(&mut self, extra: u64) -> Result<Flow, CrashCause> {
        let v = self.pop();
        self.regs[Gpr::Rsp.index()] = self.rsp().wrapping_add(extra);
        let Some(frame) = self.shadows.pop() else {
            return Err(CrashCause::ReturnAddressCorrupted);
        };
        if let Some(slot) = frame.canary {
            if self.read(slot, 8) != CANARY {
                return Err(CrashCause::CanaryMismatch);
            }
        }
        if self.read(frame.entry_rsp, 8) != frame.ret || v != frame.ret {
            return Err(CrashCause::ReturnAddressCorrupted);
        }
        if let Some((slot, value)) = frame.saved_rbp {
            if self.read(slot, 8) != value {
                return Err(CrashCause::BaseRegisterCorrupted);
            }
        }
        if v == EXIT_ADDR {
            let code = sign_extend(self.regs[0] & 0xffff_ffff, 4) as i64;
            return Ok(Flow::End(Status::CleanExit, Some(code)));
        }
        match self.image.index_of(v) {
            Some(i) => Ok(Flow::Jump(i)),
            None => Err(CrashCause::ReturnAddressCorrupted),
        }
    }

    fn arg(&self, n: usize) -> u64 {
        self.regs[Gpr::ARGS[n].index()]
    }

    fn set_ret(&mut self, v: u64) {
        self.regs[0] = v;
        self.canary_taint = 0;
    }

    // ---- library semantics ----------------------------------------------

    /// Execute a library call. `Some(flow)` ends the run.
    fn libc_call(&mut self, name: &str) -> Result<Option<Flow>, CrashCause> {
        let Some(spec) = self.libc.get(name) else {
            self.notes.push(format!("unknown library call `{name}` skipped"));
            self.set_ret(0);
            return Ok(None);
        };
        let rule = spec.rule;
        self.exec_rule(rule, None)
    }

    fn exec_rule(&mut self, rule: Rule, bound: Option<u64>) -> Result<Option<Flow>, CrashCause> {
        let a0 = self.arg(0);
        match rule {
            Rule::CopyString => {
                let mut s = self.read_cstr(self.arg(1));
                s.push(0);
                self.write_bytes(a0, &s)?;
                self.set_ret(a0);
            }
            Rule::CopyBounded => {
                let n = self.arg(2) as usize;
                let mut s = self.read_cstr(self.arg(1));
                s.truncate(n);
                s.resize(n, 0);
                self.write_bytes(a0, &s)?;
                self.set_ret(a0);
            }
            Rule::AppendString | Rule::AppendBounded => {
                let cur = self.read_cstr(a0).len() as u64;
                let mut s = self.read_cstr(self.arg(1));
                if rule == Rule::AppendBounded {
                    s.truncate(self.arg(2) as usize);
                }
                s.push(0);
                self.write_bytes(a0 + cur, &s)?;
                self.set_ret(a0);
            }
            Rule::Format | Rule::FormatBounded => {
                let (n, fmt_reg, first) = if rule == Rule::Format {
                    (None, 1, 2)
                } else {
                    (Some(self.arg(1) as usize), 2, 3)
                };
                let fmt = self.read_cstr(self.arg(fmt_reg));
                let args: Vec<u64> = (first..6).map(|i| self.arg(i)).collect();
                let out = self.format(&fmt, &args);
                let len = out.len();
                let mut bytes = out;
                if let Some(n) = n {
                    if n == 0 {
                        bytes.clear();
                    } else {
                        bytes.truncate(n - 1);
                        bytes.push(0);
                    }
                } else {
                    bytes.push(0);
                }
                self.write_bytes(a0, &bytes)?;
                self.set_ret(len as u64);
            }
            Rule::ReadLine => {
                if self.stdin_pos >= self.stdin.len() {
                    self.set_ret(0);
                } else {
                    let mut line = self.take_line();
                    if line.last() == Some(&b'\n') {
                        line.pop();
                    }
                    line.push(0);
                    self.write_bytes(a0, &line)?;
                    self.set_ret(a0);
                }
            }
            Rule::ReadLineBounded => {
                let n = self.arg(1) as usize;
                if self.stdin_pos >= self.stdin.len() || n == 0 {
                    self.set_ret(0);
                } else {
                    let mut line = Vec::new();
                    while line.len() + 1 < n && self.stdin_pos < self.stdin.len() {
                        let c = self.stdin[self.stdin_pos];
                        self.stdin_pos += 1;
                        line.push(c);
                        if c == b'\n' {
                            break;
                        }
                    }
                    line.push(0);
                    self.write_bytes(a0, &line)?;
                    self.set_ret(a0);
                }
            }
            Rule::Scan => {
                let fmt = self.read_cstr(a0);
                let n = self.scan(&fmt, bound)?;
                self.set_ret(n);
            }
            Rule::ReadChar => {
                let v = if self.stdin_pos < self.stdin.len() {
                    self.stdin_pos += 1;
                    self.stdin[self.stdin_pos - 1] as u64
                } else {
                    u64::MAX
                };
                self.set_ret(v);
            }
            Rule::Fill => {
                let n = self.arg(2) as usize;
                let v = self.arg(1) as u8;
                self.write_bytes(a0, &vec![v; n.min(MAX_STRING)])?;
                self.set_ret(a0);
            }
            Rule::CopyMem => {
                let n = (self.arg(2) as usize).min(MAX_STRING);
                let src = self.arg(1);
                let bytes: Vec<u8> = (0..n as u64).map(|i| self.read_byte(src + i)).collect();
                self.write_bytes(a0, &bytes)?;
                self.set_ret(a0);
            }
            Rule::Length => {
                let n = self.read_cstr(a0).len() as u64;
                self.set_ret(n);
            }
            Rule::Compare => {
                let a = self.read_cstr(a0);
                let b = self.read_cstr(self.arg(1));
                let v = match a.cmp(&b) {
                    std::cmp::Ordering::Less => -1i64,
                    std::cmp::Ordering::Equal => 0,
                    std::cmp::Ordering::Greater => 1,
                };
                self.set_ret(v as u64);
            }
            Rule::ToInt => {
                let s = self.read_cstr(a0);
                let v = parse_int_prefix(&s).unwrap_or(0);
                self.set_ret(v as u64);
            }
            Rule::PrintFormat => {
                let fmt = self.read_cstr(a0);
                let args: Vec<u64> = (1..6).map(|i| self.arg(i)).collect();
                let out = self.format(&fmt, &args);
                self.set_ret(out.len() as u64);
                self.stdout.extend(out);
            }
            Rule::PrintString => {
                let s = self.read_cstr(a0);
                self.stdout.extend(s);
                self.stdout.push(b'\n');
                self.set_ret(1);
            }
            Rule::PrintChar => {
                self.stdout.push(a0 as u8);
                self.set_ret(a0 & 0xff);
            }
            Rule::Exit => {
                let code = sign_extend(a0 & 0xffff_ffff, 4) as i64;
                return Ok(Some(Flow::End(Status::CleanExit, Some(code))));
            }
            Rule::Abort => {
                self.notes.push("abort() called".into());
                return Ok(Some(Flow::End(Status::CleanExit, Some(134))));
            }
            Rule::StackChkFail => return Err(CrashCause::CanaryMismatch),
            Rule::NoEffect => self.set_ret(0),
        }
        Ok(None)
    }

    fn take_line(&mut self) -> Vec<u8> {
        let mut line = Vec::new();
        while self.stdin_pos < self.stdin.len() {
            let c = self.stdin[self.stdin_pos];
            self.stdin_pos += 1;
            line.push(c);
            if c == b'\n' {
                break;
            }
        }
        line
    }

    /// printf-style formatting of the supported conversions.
    fn format(&mut self, fmt: &[u8], args: &[u64]) -> Vec<u8> {
        let mut out = Vec::new();
        let mut ai = 0usize;
        let mut next_arg = |m: &mut Self| -> u64 {
            let v = if ai < args.len() {
                args[ai]
            } else {
                // Stack-passed variadic arguments.
                let sp = m.rsp() + 8 * (ai - args.len()) as u64;
                m.read(sp, 8)
            };
            ai += 1;
            v
        };
        let mut i = 0;
        while i < fmt.len() {
            let c = fmt[i];
            i += 1;
            if c != b'%' {
                out.push(c);
                continue;
            }
            let mut left = false;
            let mut zero = false;
            while i < fmt.len() && (fmt[i] == b'-' || fmt[i] == b'0') {
                if fmt[i] == b'-' {
                    left = true;
                } else {
                    zero = true;
                }
                i += 1;
            }
            let mut width = 0usize;
            while i < fmt.len() && fmt[i].is_ascii_digit() {
                width = width * 10 + (fmt[i] - b'0') as usize;
                i += 1;
            }
            let mut precision = None;
            if i < fmt.len() && fmt[i] == b'.' {
                i += 1;
                let mut p = 0usize;
                while i < fmt.len() && fmt[i].is_ascii_digit() {
                    p = p * 10 + (fmt[i] - b'0') as usize;
                    i += 1;
                }
                precision = Some(p);
            }
            let mut long = false;
            while i < fmt.len() && matches!(fmt[i], b'l' | b'h' | b'z') {
                long |= fmt[i] == b'l' || fmt[i] == b'z';
                i += 1;
            }
            let Some(&conv) = fmt.get(i) else { break };
            i += 1;
            let body: Vec<u8> = match conv {
                b'%' => b"%".to_vec(),
                b's' => {
                    let p = next_arg(self);
                    let mut s = self.read_cstr(p);
                    if let Some(p) = precision {
                        s.truncate(p);
                    }
                    s
                }
                b'c' => vec![next_arg(self) as u8],
                b'd' | b'i' => {
                    let v = next_arg(self);
                    let v = if long { v as i64 } else { v as u32 as i32 as i64 };
                    v.to_string().into_bytes()
                }
                b'u' => {
                    let v = next_arg(self);
                    let v = if long { v } else { v & 0xffff_ffff };
                    v.to_string().into_bytes()
                }
                b'x' | b'X' => {
                    let v = next_arg(self);
                    let v = if long { v } else { v & 0xffff_ffff };
                    let s = format!("{v:x}");
                    if conv == b'X' { s.to_uppercase() } else { s }.into_bytes()
                }
                b'p' => format!("0x{:x}", next_arg(self)).into_bytes(),
                other => {
                    self.notes.push(format!("unsupported conversion %{}", other as char));
                    Vec::new()
                }
            };
            if body.len() < width {
                let pad = width - body.len();
                let fill = if zero && !left && conv != b's' { b'0' } else { b' ' };
                if left {
                    out.extend(&body);
                    out.extend(std::iter::repeat_n(b' ', pad));
                } else {
                    out.extend(std::iter::repeat_n(fill, pad));
                    out.extend(&body);
                }
            } else {
                out.extend(body);
            }
        }
        out
    }

    /// scanf subset: `%s`, `%Ns`, `%d`, `%c` and literal text. `cap`
    /// limits every `%s` to `cap - 1` characters when set.
    fn scan(&mut self, fmt: &[u8], cap: Option<u64>) -> Result<u64, CrashCause> {
        let mut assigned = 0u64;
        let mut ai = 1usize;
        let mut i = 0;
        let input_left = |m: &Self| m.stdin_pos < m.stdin.len();
        while i < fmt.len() {
            let c = fmt[i];
            i += 1;
            if c.is_ascii_whitespace() {
                while input_left(self) && self.stdin[self.stdin_pos].is_ascii_whitespace() {
                    self.stdin_pos += 1;
                }
                continue;
            }
            if c != b'%' {
                if input_left(self) && self.stdin[self.stdin_pos] == c {
                    self.stdin_pos += 1;
                    continue;
                }
                break;
            }
            let mut width = 0usize;
            while i < fmt.len() && fmt[i].is_ascii_digit() {
                width = width * 10 + (fmt[i] - b'0') as usize;
                i += 1;
            }
            let Some(&conv) = fmt.get(i) else { break };
            i += 1;
            if conv != b'c' {
                while input_left(self) && self.stdin[self.stdin_pos].is_ascii_whitespace() {
                    self.stdin_pos += 1;
                }
            }
            if !input_left(self) {
                break;
            }
            let dest = if ai < 6 { self.arg(ai) } else { 0 };
            ai += 1;
            match conv {
                b's' => {
                    let mut limit = if width == 0 { usize::MAX } else { width };
                    if let Some(cap) = cap {
                        limit = limit.min(cap.saturating_sub(1) as usize);
                    }
                    let mut tok = Vec::new();
                    while input_left(self) && tok.len() < limit && !self.stdin[self.stdin_pos].is_ascii_whitespace() {
                        tok.push(self.stdin[self.stdin_pos]);
                        self.stdin_pos += 1;
                    }
                    tok.push(0);
                    self.write_bytes(dest, &tok)?;
                }
                b'c' => {
                    let b = self.stdin[self.stdin_pos];
                    self.stdin_pos += 1;
                    self.write_bytes(dest, &[b])?;
                }
                b'd' | b'i' | b'u' => {
                    let start = self.stdin_pos;
                    let mut j = start;
                    if j < self.stdin.len() && (self.stdin[j] == b'-' || self.stdin[j] == b'+') {
                        j += 1;
                    }
                    while j < self.stdin.len() && self.stdin[j].is_ascii_digit() {
                        j += 1;
                    }
                    match parse_int_prefix(&self.stdin[start..j]) {
                        Some(v) => {
                            self.stdin_pos = j;
                            self.write(dest, v as u64, 4)?;
                        }
                        None => break,
                    }
                }
                _ => {
                    self.notes.push(format!("unsupported scanf conversion %{}", conv as char));
                    break;
                }
            }
            assigned += 1;
        }
        Ok(assigned)
    }

    /// Distance from `dest` to the nearest control byte above it.
    pub fn runtime_bound(&self, dest: u64) -> Option<u64> {
        self.shadows
            .iter()
            .flat_map(|s| s.control_bytes())
            .filter(|a| *a >= dest)
            .map(|a| a - dest)
            .min()
    }

    fn safecall(&mut self, ins: &Instruction) -> Result<Flow, CrashCause> {
        let Some(sc) = SafeCall::parse(&ins.text) else {
            self.notes.push(format!("malformed `{}`", ins.text));
            return Ok(Flow::Next);
        };
        let dest = match sc.replacement.as_str() {
            "scanf_width" => self.arg(1),
            _ => self.arg(0),
        };
        let bound = match sc.bound {
            Bound::Static(n) => Some(n),
            Bound::Runtime => self.runtime_bound(dest),
        };
        let a0 = self.arg(0);
        match (sc.replacement.as_str(), bound) {
            ("strncpy", Some(n)) if n > 0 => {
                let mut s = self.read_cstr(self.arg(1));
                if sc.terminate {
                    s.truncate(n as usize - 1);
                    s.push(0);
                } else {
                    s.push(0);
                    s.truncate(n as usize);
                }
                self.write_bytes(a0, &s)?;
                self.set_ret(a0);
            }
            ("strncat", Some(n)) if n > 0 => {
                let cur = self.read_cstr(a0).len();
                let room = (n as usize).saturating_sub(cur + 1);
                let mut s = self.read_cstr(self.arg(1));
                s.truncate(room);
                s.push(0);
                if cur < n as usize {
                    self.write_bytes(a0 + cur as u64, &s)?;
                }
                self.set_ret(a0);
            }
            ("snprintf", Some(n)) => {
                // snprintf(dest, n, fmt, ...) with the original argument
                // registers shifted by one.
                let fmt = self.read_cstr(self.arg(1));
                let args: Vec<u64> = (2..6).map(|i| self.arg(i)).collect();
                let out = self.format(&fmt, &args);
                let len = out.len();
                if n > 0 {
                    let mut b = out;
                    b.truncate(n as usize - 1);
                    b.push(0);
                    self.write_bytes(a0, &b)?;
                }
                self.set_ret(len as u64);
            }
            ("fgets_line", Some(n)) if n > 0 => {
                if self.stdin_pos >= self.stdin.len() {
                    self.set_ret(0);
                } else {
                    let mut line = self.take_line();
                    if line.last() == Some(&b'\n') {
                        line.pop();
                    }
                    line.truncate(n as usize - 1);
                    line.push(0);
                    self.write_bytes(a0, &line)?;
                    self.set_ret(a0);
                }
            }
            ("scanf_width", cap) => {
                let fmt = self.read_cstr(a0);
                let n = self.scan(&fmt, cap)?;
                self.set_ret(n);
            }
            (name, _) => {
                // No usable bound: fall back to the unbounded original.
                let rule = match name {
                    "strncpy" => Rule::CopyString,
                    "strncat" => Rule::AppendString,
                    "snprintf" => Rule::Format,
                    "fgets_line" => Rule::ReadLine,
                    _ => Rule::NoEffect,
                };
                self.notes.push(format!("`{}` ran without a bound", ins.text));
                if let Some(end) = self.exec_rule(rule, None)? {
                    return Ok(end);
                }
            }
        }
        Ok(Flow::Next)
    }
}

fn parse_int_prefix(s: &[u8]) -> Option<i64> {
    let text = std::str::from_utf8(s).ok()?.trim_start();
    let end = text
        .char_indices()
        .find(|(i, c)| !(c.is_ascii_digit() || (*i == 0 && (*c == '-' || *c == '+'))))
        .map(|(i, _)| i)
        .unwrap_or(text.len());
    text[..end].parse::<i64>().ok()
}
