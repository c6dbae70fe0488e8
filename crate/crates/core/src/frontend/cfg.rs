use super::instr::{Mnemonic, Operand};
use super::ProgramImage;
use crate::diag::{Warning, WarningKind};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Fallthrough,
    Taken,
    Call,
    CallReturn,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeTarget {
    Block(u64),
    /// Library symbol, indirect transfer or address outside the image.
    External {
        address: Option<u64>,
        symbol: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub kind: EdgeKind,
    pub target: EdgeTarget,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicBlock {
    pub start: u64,
    pub function: String,
    /// Half-open range into the image's instruction vector.
    pub first: usize,
    pub last: usize,
    pub succs: Vec<Edge>,
}

impl BasicBlock {
    pub fn instructions<'a>(&self, image: &'a ProgramImage) -> &'a [super::Instruction] {
        &image.instructions[self.first..self.last]
    }

    pub fn is_terminal(&self) -> bool {
        self.succs.is_empty()
    }

    pub fn block_succs(&self) -> impl Iterator<Item = (EdgeKind, u64)> + '_ {
        self.succs.iter().filter_map(|e| match e.target {
            EdgeTarget::Block(a) => Some((e.kind, a)),
            EdgeTarget::External { .. } => None,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BCfg {
    pub blocks: BTreeMap<u64, BasicBlock>,
    pub entry: Option<u64>,
    pub warnings: Vec<Warning>,
}

impl BCfg {
    /// Block whose instruction range contains `address`.
    pub fn block_containing(&self, image: &ProgramImage, address: u64) -> Option<&BasicBlock> {
        let idx = image.index_of(address)?;
        let (_, b) = self.blocks.range(..=address).next_back()?;
        (b.first <= idx && idx < b.last).then_some(b)
    }

    pub fn predecessors(&self, start: u64) -> Vec<(EdgeKind, u64)> {
        self.blocks
            .values()
            .flat_map(|b| {
                b.block_succs()
                    .filter(move |(_, t)| *t == start)
                    .map(move |(k, _)| (k, b.start))
            })
            .collect()
    }

    /// Blocks reachable from `from` following every in-image edge.
    pub fn reachable_from(&self, from: u64) -> BTreeSet<u64> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([from]);
        while let Some(b) = queue.pop_front() {
            if !self.blocks.contains_key(&b) || !seen.insert(b) {
                continue;
            }
            for (_, t) in self.blocks[&b].block_succs() {
                queue.push_back(t);
            }
        }
        seen
    }

    /// Instruction addresses reachable from the entry block.
    pub fn reachable_addresses(&self, image: &ProgramImage) -> BTreeSet<u64> {
        let Some(entry) = self.entry else {
            return BTreeSet::new();
        };
        self.reachable_from(entry)
            .into_iter()
            .flat_map(|b| {
                self.blocks[&b]
                    .instructions(image)
                    .iter()
                    .map(|i| i.address)
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.blocks.values().map(|b| b.succs.len()).sum()
    }
}

/// Split the listing into basic blocks and connect them.
///
/// The entry is `main` when present, otherwise the first listed function.
pub fn build_bcfg(image: &ProgramImage) -> BCfg {
    let mut leaders: BTreeSet<usize> = BTreeSet::new();
    let mut warnings = Vec::new();

    for f in &image.functions {
        if f.is_empty() {
            continue;
        }
        leaders.insert(f.start);
        for idx in f.start..f.end {
            let ins = &image.instructions[idx];
            if ins.mnemonic.is_branch() {
                if let Some(t) = ins.target() {
                    if let Some(ti) = image.index_of(t.address) {
                        leaders.insert(ti);
                    }
                }
            }
            if ins.mnemonic.ends_block() && idx + 1 < f.end {
                leaders.insert(idx + 1);
            }
        }
    }

    let mut blocks = BTreeMap::new();
    for f in &image.functions {
        if f.is_empty() {
            continue;
        }
        let starts: Vec<usize> = leaders.range(f.start..f.end).copied().collect();
        for (n, &first) in starts.iter().enumerate() {
            let last = starts.get(n + 1).copied().unwrap_or(f.end);
            let tail = &image.instructions[last - 1];
            let next = (last < f.end).then(|| image.instructions[last].address);
            let mut succs = Vec::new();
            let external = |address: Option<u64>, symbol: Option<String>| EdgeTarget::External { address, symbol };

            match &tail.mnemonic {
                Mnemonic::Jmp | Mnemonic::Jcc(_) => {
                    match tail.operands.first() {
                        Some(Operand::Target(t)) => {
                            let target = if image.index_of(t.address).is_some() {
                                EdgeTarget::Block(t.address)
                            } else {
                                if t.symbol.is_none() {
                                    warnings.push(
                                        Warning::new(
                                            WarningKind::DanglingBranch,
                                            format!("branch target 0x{:x} is outside the listing", t.address),
                                        )
                                        .at(tail.address),
                                    );
                                }
                                external(Some(t.address), t.symbol.clone())
                            };
                            succs.push(Edge {
                                kind: EdgeKind::Taken,
                                target,
                            });
                        }
                        _ => {
                            warnings.push(
                                Warning::new(WarningKind::IndirectTransfer, format!("indirect `{}`", tail.text))
                                    .at(tail.address),
                            );
                            succs.push(Edge {
                                kind: EdgeKind::Taken,
                                target: external(None, None),
                            });
                        }
                    }
                    if matches!(tail.mnemonic, Mnemonic::Jcc(_)) {
                        match next {
                            Some(n) => succs.push(Edge {
                                kind: EdgeKind::Fallthrough,
                                target: EdgeTarget::Block(n),
                            }),
                            None => warnings.push(
                                Warning::new(WarningKind::DanglingBranch, "conditional branch falls off the function")
                                    .at(tail.address),
                            ),
                        }
                    }
                }
                Mnemonic::Call => {
                    let target = match tail.operands.first() {
                        Some(Operand::Target(t)) if image.index_of(t.address).is_some() && !t.is_plt() => {
                            EdgeTarget::Block(t.address)
                        }
                        Some(Operand::Target(t)) => {
                            if t.symbol.is_none() {
                                warnings.push(
                                    Warning::new(
                                        WarningKind::DanglingBranch,
                                        format!("call target 0x{:x} is outside the listing", t.address),
                                    )
                                    .at(tail.address),
                                );
                            }
                            external(Some(t.address), t.symbol.clone())
                        }
                        _ => {
                            warnings.push(
                                Warning::new(WarningKind::IndirectTransfer, format!("indirect `{}`", tail.text))
                                    .at(tail.address),
                            );
                            external(None, None)
                        }
                    };
                    succs.push(Edge {
                        kind: EdgeKind::Call,
                        target,
                    });
                    let ret = match next {
                        Some(n) => EdgeTarget::Block(n),
                        None => external(Some(image.return_address(last - 1)), None),
                    };
                    succs.push(Edge {
                        kind: EdgeKind::CallReturn,
                        target: ret,
                    });
                }
                Mnemonic::Ret | Mnemonic::Hlt => {}
                _ => {
                    if let Some(n) = next {
                        succs.push(Edge {
                            kind: EdgeKind::Fallthrough,
                            target: EdgeTarget::Block(n),
                        });
                    }
                }
            }
            let start = image.instructions[first].address;
            blocks.insert(
                start,
                BasicBlock {
                    start,
                    function: f.name.clone(),
                    first,
                    last,
                    succs,
                },
            );
        }
    }

    let entry = image
        .function("main")
        .or_else(|| image.functions.iter().find(|f| !f.is_empty()))
        .filter(|f| !f.is_empty())
        .map(|f| f.address);
    BCfg {
        blocks,
        entry,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse_disassembly;

    const COPY_FULL: &str = "\
copy:
  401136: push rbp
  401137: mov rbp, rsp
  40113a: sub rsp, 32
  40113e: mov [rbp-24], rdi
  401142: mov rdx, [rbp-24]
  401146: lea rax, [rbp-16]
  40114a: mov rsi, rdx
  40114d: mov rdi, rax
  401150: call 0x401030 <strcpy@plt>
  401155: nop
  401156: leave
  401157: ret
";

    const DIAMOND: &str = "\
main:
  401000: cmp edi, 1
  401003: jne 0x40100e
  401005: mov eax, 1
  40100a: nop
  40100c: jmp 0x401013
  40100e: mov eax, 2
  401013: ret
";

    const LOOP: &str = "\
main:
  401000: mov DWORD PTR [rbp-4], 0
  401007: mov eax, DWORD PTR [rbp-4]
  40100a: add eax, 1
  40100d: mov DWORD PTR [rbp-4], eax
  401010: cmp DWORD PTR [rbp-4], 9
  401014: jne 0x401007
  401016: ret
";

    #[test]
    fn straight_line_copy_splits_at_call() {
        let img = parse_disassembly(COPY_FULL).unwrap();
        let cfg = build_bcfg(&img);
        assert_eq!(cfg.blocks.len(), 2);
        let first = &cfg.blocks[&0x401136];
        assert_eq!(img.instructions[first.last - 1].address, 0x401150);
        assert_eq!(
            first.succs,
            vec![
                Edge {
                    kind: EdgeKind::Call,
                    target: EdgeTarget::External {
                        address: Some(0x401030),
                        symbol: Some("strcpy@plt".into())
                    }
                },
                Edge {
                    kind: EdgeKind::CallReturn,
                    target: EdgeTarget::Block(0x401155)
                },
            ]
        );
        assert!(cfg.blocks[&0x401155].is_terminal());
    }

    #[test]
    fn diamond_has_four_blocks_four_edges() {
        let img = parse_disassembly(DIAMOND).unwrap();
        let cfg = build_bcfg(&img);
        assert_eq!(cfg.blocks.len(), 4);
        assert_eq!(cfg.edge_count(), 4);
        assert_eq!(cfg.predecessors(0x401013).len(), 2);
    }

    #[test]
    fn loop_back_edge_reaches_itself() {
        let img = parse_disassembly(LOOP).unwrap();
        let cfg = build_bcfg(&img);
        let body = &cfg.blocks[&0x401007];
        let targets: Vec<_> = body.block_succs().collect();
        assert!(targets.contains(&(EdgeKind::Taken, 0x401007)));
        assert!(cfg.reachable_from(0x401007).contains(&0x401007));
    }

    #[test]
    fn reachable_set_matches_hand_enumeration() {
        let img = parse_disassembly(DIAMOND).unwrap();
        let cfg = build_bcfg(&img);
        let all: BTreeSet<u64> = img.instructions.iter().map(|i| i.address).collect();
        assert_eq!(cfg.reachable_addresses(&img), all);
    }

    #[test]
    fn every_call_has_one_return_edge() {
        let img = parse_disassembly(COPY_FULL).unwrap();
        let cfg = build_bcfg(&img);
        for b in cfg.blocks.values() {
            let tail = &img.instructions[b.last - 1];
            let returns = b.succs.iter().filter(|e| e.kind == EdgeKind::CallReturn).count();
            assert_eq!(returns, usize::from(tail.is_call()));
        }
    }

    #[test]
    fn dangling_branch_becomes_external() {
        let img = parse_disassembly("main:\n 401000: jmp 0x500000\n").unwrap();
        let cfg = build_bcfg(&img);
        assert_eq!(cfg.warnings.len(), 1);
        assert_eq!(cfg.warnings[0].kind, WarningKind::DanglingBranch);
        assert!(matches!(cfg.blocks[&0x401000].succs[0].target, EdgeTarget::External { .. }));
    }
}
