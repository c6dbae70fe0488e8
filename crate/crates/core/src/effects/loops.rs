use crate::diag::{Warning, WarningKind};
use crate::frontend::{BCfg, EdgeKind, ProgramImage};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Loop {
    /// Target of the back edges.
    pub header: u64,
    pub function: String,
    /// Start addresses of the body blocks (header included).
    pub blocks: BTreeSet<u64>,
    /// Every instruction address of the body.
    #[serde(skip)]
    pub addresses: BTreeSet<u64>,
    /// Sources of the back edges.
    pub latches: Vec<u64>,
    /// Static exit: the successor taken when the loop finishes.
    pub exit: Option<u64>,
    /// Entered other than through the header.
    pub irreducible: bool,
}

impl Loop {
    pub fn contains(&self, address: u64) -> bool {
        self.addresses.contains(&address)
    }
}

fn intra(kind: EdgeKind) -> bool {
    kind != EdgeKind::Call
}

fn forward_from(bcfg: &BCfg, from: u64) -> BTreeSet<u64> {
    let mut seen = BTreeSet::new();
    let mut work = vec![from];
    while let Some(b) = work.pop() {
        if !bcfg.blocks.contains_key(&b) || !seen.insert(b) {
            continue;
        }
        work.extend(bcfg.blocks[&b].block_succs().filter(|(k, _)| intra(*k)).map(|(_, t)| t));
    }
    seen
}

/// Find natural loops per function from DFS back edges. Loops sharing a
/// header are merged.
pub fn detect_loops(bcfg: &BCfg, image: &ProgramImage) -> (Vec<Loop>, Vec<Warning>) {
    let mut preds: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for b in bcfg.blocks.values() {
        for (k, t) in b.block_succs() {
            if intra(k) {
                preds.entry(t).or_default().push(b.start);
            }
        }
    }

    let mut loops = Vec::new();
    let mut warnings = Vec::new();
    for f in &image.functions {
        if f.is_empty() || !bcfg.blocks.contains_key(&f.address) {
            continue;
        }
        // Iterative DFS recording edges into blocks still on the stack.
        let mut back: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        let mut on_stack = BTreeSet::new();
        let mut seen = BTreeSet::new();
        let mut stack: Vec<(u64, usize)> = vec![(f.address, 0)];
        seen.insert(f.address);
        on_stack.insert(f.address);
        while let Some((b, next)) = stack.pop() {
            let succs: Vec<u64> = bcfg.blocks[&b]
                .block_succs()
                .filter(|(k, _)| intra(*k))
                .map(|(_, t)| t)
                .collect();
            if next < succs.len() {
                stack.push((b, next + 1));
                let t = succs[next];
                if on_stack.contains(&t) {
                    back.entry(t).or_default().push(b);
                } else if seen.insert(t) && bcfg.blocks.contains_key(&t) {
                    on_stack.insert(t);
                    stack.push((t, 0));
                }
            } else {
                on_stack.remove(&b);
            }
        }

        for (header, latches) in back {
            let mut body = BTreeSet::from([header]);
            let mut work: Vec<u64> = latches.clone();
            while let Some(n) = work.pop() {
                if body.insert(n) {
                    work.extend(preds.get(&n).into_iter().flatten().copied());
                }
            }
            // Without a dominating header the backward walk leaks past the
            // loop; keep only what the header reaches.
            let forward = forward_from(bcfg, header);
            body.retain(|b| forward.contains(b));
            let irreducible = body.iter().any(|&n| {
                n != header && preds.get(&n).into_iter().flatten().any(|p| !body.contains(p))
            });
            if irreducible {
                warnings.push(
                    Warning::new(
                        WarningKind::IrreducibleLoop,
                        format!("loop at {header:#x} in `{}` has several entries", f.name),
                    )
                    .at(header),
                );
            }
            let exits = |from: u64| -> Vec<u64> {
                bcfg.blocks[&from]
                    .block_succs()
                    .filter(|(k, t)| intra(*k) && !body.contains(t))
                    .map(|(_, t)| t)
                    .collect()
            };
            let exit = exits(header)
                .into_iter()
                .min()
                .or_else(|| body.iter().flat_map(|b| exits(*b)).min());
            let addresses = body
                .iter()
                .flat_map(|b| bcfg.blocks[b].instructions(image).iter().map(|i| i.address))
                .collect();
            loops.push(Loop {
                header,
                function: f.name.clone(),
                blocks: body,
                addresses,
                latches,
                exit,
                irreducible,
            });
        }
    }
    loops.sort_by_key(|l| l.header);
    (loops, warnings)
}
