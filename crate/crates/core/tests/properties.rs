mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stackcheck::checker::{check, VerdictStatus};
use stackcheck::ltl::{bundled_properties, compile_monitor, parse_formula, Atom, Domain, Formula, FrameRef, IndexExpr, LabelPat, Quantifier};
use stackcheck::memstace::{byte_transition, BaseSlot, Buffer, ByteOp, ByteState, MemOp, MemStaCe, StackFrame, Transition};
use std::collections::BTreeSet;

const STATES: [ByteState; 4] = [ByteState::Free, ByteState::Critical, ByteState::Occupied, ByteState::Modified];

fn op() -> impl Strategy<Value = ByteOp> {
    prop_oneof![Just(ByteOp::RWrite), Just(ByteOp::NRWrite)]
}

fn state() -> impl Strategy<Value = ByteState> {
    prop::sample::select(STATES.to_vec())
}

fn rank(s: ByteState) -> u8 {
    match s {
        ByteState::Free => 0,
        ByteState::Critical | ByteState::Occupied => 1,
        ByteState::Modified => 2,
    }
}

proptest! {
    // A byte only ever moves forward: Free, then Critical or Occupied, then
    // Modified. Once written, a return-address write is illegal.
    #[test]
    fn byte_writes_are_monotone(ops in prop::collection::vec(op(), 1..12)) {
        let mut s = ByteState::Free;
        for (k, op) in ops.iter().enumerate() {
            match byte_transition(s, *op) {
                Ok(next) => {
                    prop_assert!(rank(next) > rank(s) || next == ByteState::Modified);
                    prop_assert!(*op == ByteOp::NRWrite || k == 0);
                    s = next;
                }
                Err(_) => {
                    prop_assert!(*op == ByteOp::RWrite && s != ByteState::Free);
                    break;
                }
            }
        }
    }

    #[test]
    fn modified_absorbs_plain_writes(s in state(), n in 1usize..6) {
        let mut cur = s;
        if s != ByteState::Free {
            for _ in 0..n {
                cur = byte_transition(cur, ByteOp::NRWrite).unwrap();
            }
            prop_assert_eq!(cur, ByteState::Modified);
        }
    }

    #[test]
    fn buffer_offsets_round_trip(offset in -200i64..16, size in 1usize..64) {
        match Buffer::from_offset(offset, size) {
            Some(b) => {
                prop_assert_eq!(b.offset(), offset);
                prop_assert_eq!(b.start - b.end() + 1, size);
            }
            None => prop_assert!(15 - offset < 0 || ((15 - offset + 1) as usize) < size),
        }
    }

    // Registered buffers never share a byte, checked byte by byte.
    #[test]
    fn registered_buffers_are_disjoint(len in 17usize..64, cand in prop::collection::vec((0usize..64, 1usize..24), 1..10)) {
        let mut f = StackFrame::allocate("f");
        f.bytes = vec![ByteState::Free; len];
        f.base = BaseSlot::Present;
        for (start, size) in cand {
            let b = Buffer { start, size };
            if f.buffers.contains(&b) {
                prop_assert_eq!(f.register_buffer(b), Ok(false));
                continue;
            }
            let fits = start < len && size <= start + 1;
            let clash = fits && {
                let mine: BTreeSet<usize> = (start + 1 - size..=start).collect();
                f.buffers.iter().any(|o| (o.end()..=o.start).any(|i| mine.contains(&i)))
            };
            let r = f.register_buffer(b);
            prop_assert_eq!(r.is_ok(), fits && !clash, "{:?} into {:?}", b, f.buffers);
        }
        for (i, a) in f.buffers.iter().enumerate() {
            for b in &f.buffers[i + 1..] {
                prop_assert!(a.end() > b.start || b.end() > a.start);
            }
        }
    }
}

fn frame_ref() -> FrameRef {
    FrameRef::Var("s".into())
}

fn index() -> impl Strategy<Value = IndexExpr> {
    prop_oneof![
        (0i64..40).prop_map(IndexExpr::Const),
        Just(IndexExpr::Var("i".into())),
        (0i64..8).prop_map(|k| IndexExpr::Add(Box::new(IndexExpr::Var("i".into())), Box::new(IndexExpr::Const(k)))),
        (0i64..8).prop_map(|k| IndexExpr::Sub(Box::new(IndexExpr::Var("i".into())), Box::new(IndexExpr::Const(k)))),
    ]
}

fn label() -> impl Strategy<Value = LabelPat> {
    prop_oneof![
        Just(LabelPat::Loop),
        Just(LabelPat::Libc),
        Just(LabelPat::Push),
        Just(LabelPat::Write),
        Just(LabelPat::Fe),
        "[a-z]{1,6}".prop_map(LabelPat::Call),
    ]
}

fn atom() -> impl Strategy<Value = Formula> {
    prop_oneof![
        (index(), state(), any::<bool>()).prop_map(|(index, state, negated)| Formula::Atom(Atom::Byte {
            index,
            frame: frame_ref(),
            state,
            negated,
        })),
        Just(Formula::Atom(Atom::HasCanary(frame_ref()))),
        (prop::collection::vec(label(), 1..3), any::<bool>()).prop_map(|(labels, negated)| Formula::Atom(Atom::Previous { labels, negated })),
        Just(Formula::True),
        Just(Formula::False),
    ]
}

/// Formulas whose `&&`/`||` children are never of the same connective, so
/// that printing and parsing do not reassociate them.
fn formula() -> impl Strategy<Value = Formula> {
    atom().prop_recursive(4, 24, 3, |inner| {
        let flat = |v: Vec<Formula>, and: bool| {
            v.into_iter()
                .map(|f| match (&f, and) {
                    (Formula::And(_), true) | (Formula::Or(_), false) => !f,
                    _ => f,
                })
                .collect::<Vec<_>>()
        };
        prop_oneof![
            inner.clone().prop_map(|f| !f),
            prop::collection::vec(inner.clone(), 2..4).prop_map(move |v| Formula::And(flat(v, true))),
            prop::collection::vec(inner.clone(), 2..4).prop_map(move |v| Formula::Or(flat(v, false))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Formula::Implies(Box::new(a), Box::new(b))),
            inner.clone().prop_map(|f| Formula::Always(Box::new(f))),
            inner.clone().prop_map(|f| Formula::Next(Box::new(f))),
            (inner.clone(), inner).prop_map(|(a, b)| Formula::Until(Box::new(a), Box::new(b))),
        ]
    })
}

fn closed(body: Formula, lo: i64, hi: i64) -> Formula {
    Formula::Quant {
        q: Quantifier::Forall,
        var: "s".into(),
        domain: Domain::Stack,
        body: Box::new(Formula::Quant {
            q: Quantifier::Exists,
            var: "i".into(),
            domain: Domain::Range(lo, hi),
            body: Box::new(body),
        }),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn formulas_print_and_parse_back(body in formula(), lo in 0i64..8, span in 0i64..8) {
        let f = closed(body, lo, lo + span);
        let text = f.to_string();
        let back = parse_formula(&text).map_err(|e| TestCaseError::fail(format!("{text}: {e}")))?;
        prop_assert_eq!(back, f, "{}", text);
    }

    // The checker's shortest counterexample on random graphs agrees with
    // exhaustive path enumeration.
    #[test]
    fn checker_agrees_with_enumeration(seed in any::<u64>(), n in 1usize..9, density in 0.1f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states: Vec<_> = (0..n).map(|_| random_state(&mut rng)).collect();
        let mut transitions = Vec::new();
        for src in 0..n {
            for (dst, to) in states.iter().enumerate() {
                if rng.gen_bool(density) {
                    transitions.push(Transition {
                        src,
                        dst,
                        label: to.incoming.clone(),
                        text: format!("s{src} -> s{dst}"),
                        op: MemOp::Touched { positions: Vec::new() },
                        deltas: Vec::new(),
                    });
                }
            }
        }
        let space = MemStaCe::from_parts("main", states, transitions, 0, false);
        for p in bundled_properties() {
            let v = check(&space, &compile_monitor(&p).unwrap());
            // A shortest path visits each node at most once.
            let want = brute_force(&space, &p.name, n - 1);
            prop_assert_ne!(v.status, VerdictStatus::Inconclusive);
            prop_assert_eq!(v.violated(), want.is_some(), "{}", p.name);
            if let (Some(t), Some(d)) = (&v.trace, want) {
                prop_assert_eq!(t.len(), d, "{}", p.name);
            }
        }
    }

    // A monitor rejects a trace at the first state the oracle falsifies.
    #[test]
    fn monitors_reject_at_first_falsifying_state(seed in any::<u64>(), len in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trace: Vec<_> = (0..len).map(|_| random_state(&mut rng)).collect();
        for p in bundled_properties() {
            let m = compile_monitor(&p).unwrap();
            prop_assert_eq!(m.first_reject(&trace), trace.iter().position(|s| falsifies(&p.name, s)), "{}", p.name);
        }
    }
}
