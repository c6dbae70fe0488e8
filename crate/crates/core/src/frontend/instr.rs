//! Instruction and operand model for the Intel-syntax disassembly subset.

use serde::{Deserialize, Serialize};
use std::fmt;

/// General purpose register, numbered in hardware encoding order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gpr {
    Rax,
    Rcx,
    Rdx,
    Rbx,
    Rsp,
    Rbp,
    Rsi,
    Rdi,
    R8,
    R9,
    R10,
    R11,
    R12,
    R13,
    R14,
    R15,
}

impl Gpr {
    pub const ALL: [Gpr; 16] = [
        Gpr::Rax,
        Gpr::Rcx,
        Gpr::Rdx,
        Gpr::Rbx,
        Gpr::Rsp,
        Gpr::Rbp,
        Gpr::Rsi,
        Gpr::Rdi,
        Gpr::R8,
        Gpr::R9,
        Gpr::R10,
        Gpr::R11,
        Gpr::R12,
        Gpr::R13,
        Gpr::R14,
        Gpr::R15,
    ];

    /// System V integer argument registers, in order.
    pub const ARGS: [Gpr; 6] = [Gpr::Rdi, Gpr::Rsi, Gpr::Rdx, Gpr::Rcx, Gpr::R8, Gpr::R9];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name64(self) -> &'static str {
        match self {
            Gpr::Rax => "rax",
            Gpr::Rcx => "rcx",
            Gpr::Rdx => "rdx",
            Gpr::Rbx => "rbx",
            Gpr::Rsp => "rsp",
            Gpr::Rbp => "rbp",
            Gpr::Rsi => "rsi",
            Gpr::Rdi => "rdi",
            Gpr::R8 => "r8",
            Gpr::R9 => "r9",
            Gpr::R10 => "r10",
            Gpr::R11 => "r11",
            Gpr::R12 => "r12",
            Gpr::R13 => "r13",
            Gpr::R14 => "r14",
            Gpr::R15 => "r15",
        }
    }
}

/// A register view: which GPR, how many bytes, and whether it is the
/// legacy high-byte alias (`ah`, `ch`, `dh`, `bh`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Reg {
    pub gpr: Gpr,
    pub width: u8,
    pub high: bool,
}

impl Reg {
    pub const fn full(gpr: Gpr) -> Reg {
        Reg {
            gpr,
            width: 8,
            high: false,
        }
    }

    pub fn parse(name: &str) -> Option<Reg> {
        let name = name.to_ascii_lowercase();
        let legacy = [
            ("rax", "eax", "ax", "al", Some("ah"), Gpr::Rax),
            ("rcx", "ecx", "cx", "cl", Some("ch"), Gpr::Rcx),
            ("rdx", "edx", "dx", "dl", Some("dh"), Gpr::Rdx),
            ("rbx", "ebx", "bx", "bl", Some("bh"), Gpr::Rbx),
            ("rsp", "esp", "sp", "spl", None, Gpr::Rsp),
            ("rbp", "ebp", "bp", "bpl", None, Gpr::Rbp),
            ("rsi", "esi", "si", "sil", None, Gpr::Rsi),
            ("rdi", "edi", "di", "dil", None, Gpr::Rdi),
        ];
        for (q, d, w, b, h, gpr) in legacy {
            let (width, high) = if name == q {
                (8, false)
            } else if name == d {
                (4, false)
            } else if name == w {
                (2, false)
            } else if name == b {
                (1, false)
            } else if Some(name.as_str()) == h {
                (1, true)
            } else {
                continue;
            };
            return Some(Reg { gpr, width, high });
        }
        let rest = name.strip_prefix('r')?;
        let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
        let num: usize = digits.parse().ok()?;
        if !(8..=15).contains(&num) {
            return None;
        }
        let width = match &rest[digits.len()..] {
            "" => 8,
            "d" => 4,
            "w" => 2,
            "b" | "l" => 1,
            _ => return None,
        };
        Some(Reg {
            gpr: Gpr::ALL[num],
            width,
            high: false,
        })
    }

    pub fn name(&self) -> String {
        let idx = self.gpr.index();
        if idx >= 8 {
            let suffix = match self.width {
                8 => "",
                4 => "d",
                2 => "w",
                _ => "b",
            };
            return format!("{}{}", self.gpr.name64(), suffix);
        }
        let base = &self.gpr.name64()[1..];
        match (self.width, self.high) {
            (8, _) => self.gpr.name64().to_string(),
            (4, _) => format!("e{base}"),
            (2, _) => base.to_string(),
            (1, true) => format!("{}h", &base[..1]),
            (1, false) => match self.gpr {
                Gpr::Rsp | Gpr::Rbp | Gpr::Rsi | Gpr::Rdi => format!("{base}l"),
                _ => format!("{}l", &base[..1]),
            },
            _ => base.to_string(),
        }
    }
}

/// Base of a memory operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Base {
    Reg(Gpr),
    Rip,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MemRef {
    pub base: Base,
    /// Optional `index*scale` term.
    pub index: Option<(Gpr, u8)>,
    pub disp: i64,
    /// Access width from a `BYTE/WORD/DWORD/QWORD PTR` prefix.
    pub width: Option<u8>,
}

impl MemRef {
    /// Signed offset from `rbp` when the operand is `[rbp±disp]` with no index.
    pub fn rbp_offset(&self) -> Option<i64> {
        match (self.base, self.index) {
            (Base::Reg(Gpr::Rbp), None) => Some(self.disp),
            _ => None,
        }
    }

    pub fn rsp_offset(&self) -> Option<i64> {
        match (self.base, self.index) {
            (Base::Reg(Gpr::Rsp), None) => Some(self.disp),
            _ => None,
        }
    }
}

/// Direct branch or call destination.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Target {
    pub address: u64,
    pub symbol: Option<String>,
}

impl Target {
    /// Symbol without any `@plt` / `+0x..` decoration.
    pub fn plain_symbol(&self) -> Option<&str> {
        let sym = self.symbol.as_deref()?;
        let sym = sym.split('+').next().unwrap_or(sym);
        Some(sym.strip_suffix("@plt").unwrap_or(sym))
    }

    pub fn is_plt(&self) -> bool {
        self.symbol
            .as_deref()
            .map(|s| s.split('+').next().unwrap_or(s).ends_with("@plt"))
            .unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operand {
    Reg(Reg),
    Imm(i64),
    Mem(MemRef),
    /// `fs:0x28` style segment-relative read.
    Seg { disp: u64, width: Option<u8> },
    Target(Target),
}

impl Operand {
    pub fn as_reg(&self) -> Option<Reg> {
        match self {
            Operand::Reg(r) => Some(*r),
            _ => None,
        }
    }

    pub fn as_mem(&self) -> Option<&MemRef> {
        match self {
            Operand::Mem(m) => Some(m),
            _ => None,
        }
    }
}

/// Branch condition codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cond {
    E,
    Ne,
    L,
    Le,
    G,
    Ge,
    B,
    Be,
    A,
    Ae,
    S,
    Ns,
}

impl Cond {
    pub fn parse(suffix: &str) -> Option<Cond> {
        Some(match suffix {
            "e" | "z" => Cond::E,
            "ne" | "nz" => Cond::Ne,
            "l" | "nge" => Cond::L,
            "le" | "ng" => Cond::Le,
            "g" | "nle" => Cond::G,
            "ge" | "nl" => Cond::Ge,
            "b" | "c" | "nae" => Cond::B,
            "be" | "na" => Cond::Be,
            "a" | "nbe" => Cond::A,
            "ae" | "nb" | "nc" => Cond::Ae,
            "s" => Cond::S,
            "ns" => Cond::Ns,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mnemonic {
    Endbr64,
    Push,
    Pop,
    Mov,
    Movzx,
    Movsx,
    Xchg,
    Lea,
    Add,
    Sub,
    Imul,
    And,
    Or,
    Xor,
    Inc,
    Dec,
    Neg,
    Not,
    Shl,
    Shr,
    Sar,
    Cmp,
    Test,
    Call,
    Ret,
    Leave,
    Jmp,
    Jcc(Cond),
    Cmov(Cond),
    Set(Cond),
    Cdqe,
    Cdq,
    Cqo,
    Nop,
    Hlt,
    /// Bounded replacement call emitted by the patcher.
    Safecall,
    /// Anything outside the modelled subset; kept as a no-effect instruction.
    Unknown(String),
}

impl Mnemonic {
    pub fn parse(word: &str) -> Mnemonic {
        let w = word.to_ascii_lowercase();
        match w.as_str() {
            "endbr64" => Mnemonic::Endbr64,
            "push" => Mnemonic::Push,
            "pop" => Mnemonic::Pop,
            "mov" | "movabs" => Mnemonic::Mov,
            "movzx" => Mnemonic::Movzx,
            "movsx" | "movsxd" => Mnemonic::Movsx,
            "xchg" => Mnemonic::Xchg,
            "lea" => Mnemonic::Lea,
            "add" => Mnemonic::Add,
            "sub" => Mnemonic::Sub,
            "imul" => Mnemonic::Imul,
            "and" => Mnemonic::And,
            "or" => Mnemonic::Or,
            "xor" => Mnemonic::Xor,
            "inc" => Mnemonic::Inc,
            "dec" => Mnemonic::Dec,
            "neg" => Mnemonic::Neg,
            "not" => Mnemonic::Not,
            "shl" | "sal" => Mnemonic::Shl,
            "shr" => Mnemonic::Shr,
            "sar" => Mnemonic::Sar,
            "cmp" => Mnemonic::Cmp,
            "test" => Mnemonic::Test,
            "call" => Mnemonic::Call,
            "ret" => Mnemonic::Ret,
            "leave" => Mnemonic::Leave,
            "jmp" => Mnemonic::Jmp,
            "cdqe" => Mnemonic::Cdqe,
            "cdq" => Mnemonic::Cdq,
            "cqo" => Mnemonic::Cqo,
            "nop" => Mnemonic::Nop,
            "hlt" => Mnemonic::Hlt,
            "safecall" => Mnemonic::Safecall,
            _ => {
                if let Some(c) = w.strip_prefix("cmov").and_then(Cond::parse) {
                    Mnemonic::Cmov(c)
                } else if let Some(c) = w.strip_prefix("set").and_then(Cond::parse) {
                    Mnemonic::Set(c)
                } else if let Some(c) = w.strip_prefix('j').and_then(Cond::parse) {
                    Mnemonic::Jcc(c)
                } else {
                    Mnemonic::Unknown(w)
                }
            }
        }
    }

    /// Accepted operand counts.
    pub fn arity(&self) -> std::ops::RangeInclusive<usize> {
        match self {
            Mnemonic::Endbr64
            | Mnemonic::Leave
            | Mnemonic::Cdqe
            | Mnemonic::Cdq
            | Mnemonic::Cqo
            | Mnemonic::Hlt => 0..=0,
            Mnemonic::Ret => 0..=1,
            Mnemonic::Nop => 0..=1,
            Mnemonic::Push
            | Mnemonic::Pop
            | Mnemonic::Inc
            | Mnemonic::Dec
            | Mnemonic::Neg
            | Mnemonic::Not
            | Mnemonic::Call
            | Mnemonic::Jmp
            | Mnemonic::Jcc(_)
            | Mnemonic::Set(_) => 1..=1,
            Mnemonic::Shl | Mnemonic::Shr | Mnemonic::Sar => 1..=2,
            Mnemonic::Imul => 1..=3,
            Mnemonic::Safecall => 1..=1,
            Mnemonic::Unknown(_) => 0..=usize::MAX,
            _ => 2..=2,
        }
    }

    pub fn is_branch(&self) -> bool {
        matches!(self, Mnemonic::Jmp | Mnemonic::Jcc(_))
    }

    /// Instructions after which a basic block ends.
    pub fn ends_block(&self) -> bool {
        matches!(
            self,
            Mnemonic::Jmp | Mnemonic::Jcc(_) | Mnemonic::Call | Mnemonic::Ret | Mnemonic::Hlt
        )
    }
}

/// One parsed listing line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub address: u64,
    pub mnemonic: Mnemonic,
    pub operands: Vec<Operand>,
    /// The instruction text as written (mnemonic and operands, no address,
    /// byte column or comment).
    pub text: String,
    /// The original source line.
    pub raw_text: String,
    /// 1-based line number in the listing.
    pub line: usize,
}

impl Instruction {
    pub fn target(&self) -> Option<&Target> {
        match self.operands.first() {
            Some(Operand::Target(t)) => Some(t),
            _ => None,
        }
    }

    pub fn is_call(&self) -> bool {
        self.mnemonic == Mnemonic::Call
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:x}: {}", self.address, self.text)
    }
}
