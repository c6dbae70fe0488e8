//! Extended-LTL security properties and their safety monitors.

pub mod ast;
pub mod eval;
pub mod monitor;
pub mod parse;

pub use ast::{Atom, Domain, Formula, FrameRef, IndexExpr, LabelPat, Quantifier};
pub use eval::{eval, eval_atom, satisfies, Env, EvalNotes, Truth};
pub use monitor::{compile_formula, compile_monitor, Monitor, MonitorEdge, MonitorState};
pub use parse::{parse_formula, parse_properties, LtlError, Property};

pub const BUNDLED_PROPERTIES: &str = include_str!("../../data/properties.ltl");

pub fn bundled_properties() -> Vec<Property> {
    parse_properties(BUNDLED_PROPERTIES).expect("bundled properties parse")
}

/// Properties from `extra` replace bundled ones of the same name and are
/// otherwise appended.
pub fn merge_properties(base: Vec<Property>, extra: Vec<Property>) -> Vec<Property> {
    let mut out = base;
    for p in extra {
        match out.iter_mut().find(|q| q.name == p.name) {
            Some(q) => *q = p,
            None => out.push(p),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_properties_compile() {
        let props = bundled_properties();
        assert_eq!(props.len(), 7);
        for p in &props {
            let m = compile_monitor(p).unwrap();
            let pos = m.positive_form();
            assert_eq!((pos.states.len(), pos.edges.len()), (1, 1), "{}", p.name);
            assert!(!p.cwes.is_empty());
        }
    }

    #[test]
    fn merge_replaces_by_name() {
        let extra = parse_properties("property \"RIP Integrity\" { ltl: G true }\nproperty x { ltl: G true }").unwrap();
        let merged = merge_properties(bundled_properties(), extra);
        assert_eq!(merged.len(), 8);
        assert_eq!(merged[0].formula, Formula::Always(Box::new(Formula::True)));
    }
}
