use crate::frontend::{Base, BCfg, EdgeKind, Gpr, Instruction, Mnemonic, Operand, ProgramImage};
use serde::Serialize;
use std::collections::BTreeSet;

/// How far the unique-predecessor walk may go.
const MAX_BLOCKS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ArgKind {
    /// Address `rbp + offset`.
    FrameOffset(i64),
    /// Value loaded from `[rbp + offset]`.
    FrameSlot(i64),
    Constant(i64),
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArgValue {
    pub register: &'static str,
    #[serde(flatten)]
    pub kind: ArgKind,
    /// Defining instructions, nearest first.
    pub chain: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CallArgs {
    pub site: u64,
    pub args: Vec<ArgValue>,
}

impl CallArgs {
    pub fn get(&self, n: usize) -> Option<&ArgValue> {
        self.args.get(n)
    }
}

/// The instructions preceding `site`, nearest first: the rest of its block,
/// then each unique intra-procedural predecessor block.
fn backward_stream<'a>(bcfg: &BCfg, image: &'a ProgramImage, site: u64) -> Vec<&'a Instruction> {
    let mut out = Vec::new();
    let Some(block) = bcfg.block_containing(image, site) else {
        return out;
    };
    let Some(idx) = image.index_of(site) else {
        return out;
    };
    out.extend(image.instructions[block.first..idx].iter().rev());
    let mut seen = BTreeSet::from([block.start]);
    let mut cur = block.start;
    for _ in 0..MAX_BLOCKS {
        let preds: Vec<u64> = bcfg
            .predecessors(cur)
            .into_iter()
            .filter(|(k, _)| *k != EdgeKind::Call)
            .map(|(_, b)| b)
            .collect();
        let [p] = preds[..] else { break };
        if !seen.insert(p) {
            break;
        }
        let b = &bcfg.blocks[&p];
        out.extend(b.instructions(image).iter().rev());
        cur = p;
    }
    out
}

fn defines(ins: &Instruction, g: Gpr) -> bool {
    if ins.is_call() {
        // Caller-saved registers do not survive a call.
        return matches!(
            g,
            Gpr::Rax | Gpr::Rcx | Gpr::Rdx | Gpr::Rsi | Gpr::Rdi | Gpr::R8 | Gpr::R9 | Gpr::R10 | Gpr::R11
        );
    }
    match ins.operands.first() {
        Some(Operand::Reg(r)) => {
            r.gpr == g
                && !matches!(
                    ins.mnemonic,
                    Mnemonic::Cmp | Mnemonic::Test | Mnemonic::Push | Mnemonic::Jmp | Mnemonic::Jcc(_)
                )
        }
        _ => matches!(ins.mnemonic, Mnemonic::Cdqe | Mnemonic::Cqo | Mnemonic::Cdq)
            && matches!(g, Gpr::Rax | Gpr::Rdx),
    }
}

fn resolve(image: &ProgramImage, stream: &[&Instruction], reg: Gpr) -> (ArgKind, Vec<u64>) {
    let mut chain = Vec::new();
    let mut tracked = reg;
    for ins in stream {
        if !defines(ins, tracked) {
            continue;
        }
        chain.push(ins.address);
        if ins.is_call() {
            return (ArgKind::Unknown, chain);
        }
        let src = ins.operands.get(1);
        let kind = match (&ins.mnemonic, src) {
            (Mnemonic::Mov | Mnemonic::Movsx | Mnemonic::Movzx, Some(Operand::Reg(r))) => {
                tracked = r.gpr;
                continue;
            }
            (Mnemonic::Cdqe, _) => continue,
            (Mnemonic::Mov, Some(Operand::Imm(v))) => ArgKind::Constant(*v),
            (Mnemonic::Xor, Some(Operand::Reg(r))) if r.gpr == tracked => ArgKind::Constant(0),
            (Mnemonic::Lea, Some(Operand::Mem(m))) if m.index.is_none() => match m.base {
                Base::Reg(Gpr::Rbp) => ArgKind::FrameOffset(m.disp),
                Base::Rip => {
                    let next = next_address(image, ins);
                    ArgKind::Constant(next.wrapping_add(m.disp as u64) as i64)
                }
                _ => ArgKind::Unknown,
            },
            (Mnemonic::Mov | Mnemonic::Movsx | Mnemonic::Movzx, Some(Operand::Mem(m))) => match m.rbp_offset() {
                Some(off) => ArgKind::FrameSlot(off),
                None => ArgKind::Unknown,
            },
            _ => ArgKind::Unknown,
        };
        return (kind, chain);
    }
    (ArgKind::Unknown, chain)
}

/// Address of the instruction after `ins`, which rip-relative operands are
/// measured from.
fn next_address(image: &ProgramImage, ins: &Instruction) -> u64 {
    image
        .index_of(ins.address)
        .and_then(|i| image.instructions.get(i + 1))
        .map(|n| n.address)
        .unwrap_or(ins.address + 7)
}

/// Resolve the first `arity` argument registers of the call at `site`.
pub fn recover_arguments(bcfg: &BCfg, image: &ProgramImage, site: u64, arity: usize) -> CallArgs {
    let stream = backward_stream(bcfg, image, site);
    let args = Gpr::ARGS
        .iter()
        .take(arity.min(6))
        .map(|g| {
            let (kind, chain) = resolve(image, &stream, *g);
            ArgValue {
                register: g.name64(),
                kind,
                chain,
            }
        })
        .collect();
    CallArgs { site, args }
}
