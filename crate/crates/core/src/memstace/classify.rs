//! Instruction → memory operator.

use super::model::{ByteOp, MemOp};
use crate::frontend::{Base, Gpr, Instruction, MemRef, Mnemonic, Operand};
use serde::{Deserialize, Serialize};

/// Register facts tracked along a path inside one frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameCtx {
    /// Physical position of the byte `rbp` points at, once `mov rbp, rsp`
    /// has executed in this frame.
    pub rbp_pos: Option<usize>,
    /// Registers currently holding the stack canary.
    pub taint: u16,
}

impl FrameCtx {
    fn tainted(&self, g: Gpr) -> bool {
        self.taint & (1 << g.index()) != 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MemOpClass {
    NoEffect,
    /// Frame allocation at a function entry marker.
    Fa,
    /// Call: resolved by the builder (user function, library or opaque).
    Indirect,
    Op(MemOp),
}

/// Physical position of the byte at `mem`'s effective address, when it is
/// frame-relative and unindexed.
pub fn frame_position(mem: &MemRef, ctx: &FrameCtx, phys_len: usize) -> Option<i64> {
    if mem.index.is_some() {
        return None;
    }
    match mem.base {
        Base::Reg(Gpr::Rbp) => ctx.rbp_pos.map(|p| p as i64 - mem.disp),
        // rsp addresses the lowest byte of the top frame.
        Base::Reg(Gpr::Rsp) => Some(phys_len as i64 - 1 - mem.disp),
        _ => None,
    }
}

fn operand_width(ins: &Instruction) -> usize {
    for o in &ins.operands {
        if let Operand::Mem(MemRef { width: Some(w), .. }) = o { return *w as usize }
    }
    for o in &ins.operands {
        if let Operand::Reg(r) = o {
            return r.width as usize;
        }
    }
    8
}

/// Whether the instruction stores to its memory operand.
fn store_target(ins: &Instruction) -> Option<&MemRef> {
    use Mnemonic::*;
    match &ins.mnemonic {
        Mov | Add | Sub | And | Or | Xor | Inc | Dec | Neg | Not | Shl | Shr | Sar | Set(_) | Cmov(_) | Imul => {
            ins.operands.first().and_then(Operand::as_mem)
        }
        Xchg => ins.operands.iter().find_map(Operand::as_mem),
        _ => None,
    }
}

pub fn classify_instruction(ins: &Instruction, ctx: &FrameCtx, phys_len: usize) -> MemOpClass {
    let rsp = |o: Option<&Operand>| matches!(o.and_then(Operand::as_reg), Some(r) if r.gpr == Gpr::Rsp && r.width == 8);
    let ops = &ins.operands;
    match &ins.mnemonic {
        Mnemonic::Endbr64 => MemOpClass::Fa,
        Mnemonic::Call => MemOpClass::Indirect,
        Mnemonic::Ret => MemOpClass::Op(MemOp::Release),
        Mnemonic::Push => {
            let base = matches!(ops.first().and_then(Operand::as_reg), Some(r) if r.gpr == Gpr::Rbp);
            let op = if base && phys_len == 8 {
                ByteOp::RWrite
            } else {
                ByteOp::NRWrite
            };
            MemOpClass::Op(MemOp::Push { op })
        }
        Mnemonic::Pop => MemOpClass::Op(MemOp::Pop { bytes: 8 }),
        Mnemonic::Leave => {
            let bytes = match ctx.rbp_pos {
                Some(p) => phys_len.saturating_sub(p + 1) + 8,
                None => phys_len.saturating_sub(8),
            };
            MemOpClass::Op(MemOp::Pop { bytes })
        }
        Mnemonic::Sub | Mnemonic::Add if rsp(ops.first()) => match ops.get(1) {
            Some(Operand::Imm(n)) if *n >= 0 => {
                let n = *n as usize;
                if ins.mnemonic == Mnemonic::Sub {
                    MemOpClass::Op(MemOp::Fe { bytes: n })
                } else {
                    MemOpClass::Op(MemOp::Pop { bytes: n })
                }
            }
            _ => MemOpClass::NoEffect,
        },
        Mnemonic::Mov if rsp(ops.first()) => match (ops.get(1).and_then(Operand::as_reg), ctx.rbp_pos) {
            (Some(r), Some(p)) if r.gpr == Gpr::Rbp => MemOpClass::Op(MemOp::Pop {
                bytes: phys_len.saturating_sub(p + 1),
            }),
            _ => MemOpClass::NoEffect,
        },
        _ => {
            let Some(mem) = store_target(ins) else {
                return MemOpClass::NoEffect;
            };
            let Some(first) = frame_position(mem, ctx, phys_len) else {
                return MemOpClass::NoEffect;
            };
            let canary = ins.mnemonic == Mnemonic::Mov
                && matches!(ops.get(1).and_then(Operand::as_reg), Some(r) if ctx.tainted(r.gpr));
            MemOpClass::Op(MemOp::Write {
                first,
                len: operand_width(ins),
                op: if canary { ByteOp::RWrite } else { ByteOp::NRWrite },
                canary,
            })
        }
    }
}

/// Register facts after executing `ins` with `phys_len` bytes in the frame
/// (before the instruction's own operator is applied).
pub fn update_ctx(ins: &Instruction, ctx: &FrameCtx, phys_len: usize) -> FrameCtx {
    let mut c = *ctx;
    let ops = &ins.operands;
    match &ins.mnemonic {
        Mnemonic::Mov => {
            if let Some(dst) = ops.first().and_then(Operand::as_reg) {
                let bit = 1 << dst.gpr.index();
                c.taint &= !bit;
                match ops.get(1) {
                    Some(Operand::Seg { disp: 0x28, .. }) => c.taint |= bit,
                    Some(Operand::Reg(src)) if ctx.tainted(src.gpr) => c.taint |= bit,
                    Some(Operand::Reg(src)) if dst.gpr == Gpr::Rbp && src.gpr == Gpr::Rsp => {
                        c.rbp_pos = Some(phys_len.saturating_sub(1));
                    }
                    _ => {}
                }
                if dst.gpr == Gpr::Rbp && !matches!(ops.get(1), Some(Operand::Reg(s)) if s.gpr == Gpr::Rsp) {
                    c.rbp_pos = None;
                }
            }
        }
        Mnemonic::Leave => c.rbp_pos = None,
        Mnemonic::Pop => {
            if let Some(r) = ops.first().and_then(Operand::as_reg) {
                c.taint &= !(1 << r.gpr.index());
                if r.gpr == Gpr::Rbp {
                    c.rbp_pos = None;
                }
            }
        }
        Mnemonic::Call => {
            // Return value and caller-saved registers are clobbered.
            c.taint = 0;
        }
        _ => {
            if let Some(dst) = ops.first().and_then(Operand::as_reg) {
                if !matches!(ins.mnemonic, Mnemonic::Cmp | Mnemonic::Test | Mnemonic::Push) {
                    c.taint &= !(1 << dst.gpr.index());
                    if dst.gpr == Gpr::Rbp {
                        c.rbp_pos = None;
                    }
                }
            }
        }
    }
    c
}

/// Frame offsets (relative to `rbp`) that the instruction treats as the
/// start of a buffer: `lea` of a frame address, or an indexed access.
pub fn buffer_refs(ins: &Instruction) -> Vec<i64> {
    let mut out = Vec::new();
    for (k, o) in ins.operands.iter().enumerate() {
        let Operand::Mem(m) = o else { continue };
        if m.base != Base::Reg(Gpr::Rbp) || m.disp >= 0 {
            continue;
        }
        let lea = ins.mnemonic == Mnemonic::Lea && k == 1;
        if lea || m.index.is_some() {
            out.push(m.disp);
        }
    }
    out
}

/// Every negative `rbp` offset mentioned by the instructions.
pub fn frame_offsets<'a>(instrs: impl IntoIterator<Item = &'a Instruction>) -> Vec<i64> {
    let mut v: Vec<i64> = instrs
        .into_iter()
        .flat_map(|i| i.operands.iter())
        .filter_map(|o| match o {
            Operand::Mem(m) if m.base == Base::Reg(Gpr::Rbp) && m.disp < 0 => Some(m.disp),
            _ => None,
        })
        .collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Size of a buffer starting at `offset`: the gap to the next higher known
/// object, the saved base register counting as one at offset 0.
pub fn infer_buffer_size(offset: i64, known: &[i64]) -> usize {
    let next = known.iter().copied().filter(|o| *o > offset).min().unwrap_or(0).min(0);
    (next - offset).max(1) as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse_disassembly;

    fn ins(text: &str) -> Instruction {
        parse_disassembly(&format!("401000: {text}")).unwrap().instructions[0].clone()
    }

    const STD: FrameCtx = FrameCtx {
        rbp_pos: Some(15),
        taint: 0,
    };

    #[test]
    fn table_rows() {
        assert_eq!(
            classify_instruction(&ins("sub rsp, 32"), &STD, 16),
            MemOpClass::Op(MemOp::Fe { bytes: 32 })
        );
        assert_eq!(
            classify_instruction(&ins("mov QWORD PTR [rbp-24], rdi"), &STD, 48),
            MemOpClass::Op(MemOp::Write {
                first: 39,
                len: 8,
                op: ByteOp::NRWrite,
                canary: false
            })
        );
        assert_eq!(classify_instruction(&ins("endbr64"), &STD, 8), MemOpClass::Fa);
        assert_eq!(
            classify_instruction(&ins("push rbp"), &FrameCtx::default(), 8),
            MemOpClass::Op(MemOp::Push { op: ByteOp::RWrite })
        );
        assert_eq!(
            classify_instruction(&ins("push rbx"), &STD, 48),
            MemOpClass::Op(MemOp::Push { op: ByteOp::NRWrite })
        );
        assert_eq!(classify_instruction(&ins("call 0x401030 <strcpy@plt>"), &STD, 48), MemOpClass::Indirect);
        assert_eq!(classify_instruction(&ins("mov rax, QWORD PTR [rbp-8]"), &STD, 48), MemOpClass::NoEffect);
        assert_eq!(classify_instruction(&ins("cmp DWORD PTR [rbp-4], 3"), &STD, 48), MemOpClass::NoEffect);
    }

    #[test]
    fn epilogue_forms() {
        assert_eq!(
            classify_instruction(&ins("leave"), &STD, 48),
            MemOpClass::Op(MemOp::Pop { bytes: 40 })
        );
        assert_eq!(
            classify_instruction(&ins("add rsp, 16"), &STD, 48),
            MemOpClass::Op(MemOp::Pop { bytes: 16 })
        );
        assert_eq!(
            classify_instruction(&ins("mov rsp, rbp"), &STD, 48),
            MemOpClass::Op(MemOp::Pop { bytes: 32 })
        );
        assert_eq!(classify_instruction(&ins("ret"), &STD, 8), MemOpClass::Op(MemOp::Release));
    }

    #[test]
    fn canary_store_is_rwrite() {
        let c = update_ctx(&ins("mov rax, QWORD PTR fs:0x28"), &STD, 48);
        assert_ne!(c.taint, 0);
        assert_eq!(
            classify_instruction(&ins("mov QWORD PTR [rbp-8], rax"), &c, 48),
            MemOpClass::Op(MemOp::Write {
                first: 23,
                len: 8,
                op: ByteOp::RWrite,
                canary: true
            })
        );
        let cleared = update_ctx(&ins("xor eax, eax"), &c, 48);
        assert_eq!(cleared.taint, 0);
    }

    #[test]
    fn frame_base_tracking() {
        let c = update_ctx(&ins("mov rbp, rsp"), &FrameCtx::default(), 16);
        assert_eq!(c.rbp_pos, Some(15));
        assert_eq!(update_ctx(&ins("pop rbp"), &c, 16).rbp_pos, None);
    }

    #[test]
    fn rsp_relative_store() {
        // Frame of 48 bytes: rsp+0 is the lowest byte, position 47.
        assert_eq!(
            classify_instruction(&ins("mov DWORD PTR [rsp+4], 1"), &FrameCtx::default(), 48),
            MemOpClass::Op(MemOp::Write {
                first: 43,
                len: 4,
                op: ByteOp::NRWrite,
                canary: false
            })
        );
    }

    #[test]
    fn buffers_and_sizes() {
        assert_eq!(buffer_refs(&ins("lea rax, [rbp-16]")), vec![-16]);
        assert_eq!(buffer_refs(&ins("mov BYTE PTR [rbp-32+rax*1], 0x41")), vec![-32]);
        assert!(buffer_refs(&ins("mov QWORD PTR [rbp-24], rdi")).is_empty());
        assert_eq!(infer_buffer_size(-16, &[-24, -16]), 16);
        assert_eq!(infer_buffer_size(-32, &[-32, -8]), 24);
        assert_eq!(infer_buffer_size(-48, &[-48, -32, -8]), 16);
    }
}
