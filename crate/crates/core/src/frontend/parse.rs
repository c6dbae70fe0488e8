//! Parser for objdump-style Intel listings.
//!
//! Accepted lines:
//!
//! ```text
//! copy:                            function header (also `<copy>:` and
//! 0000000000401136 <copy>:         objdump's address-prefixed form)
//! 401136: push rbp                 instruction
//! 401136:\t55\tpush rbp            objdump form with a raw-byte column
//! 402004: .string "%s-%d"          read-only data
//! # anything                       comment
//! ```

use super::instr::{Base, Gpr, Instruction, MemRef, Mnemonic, Operand, Reg, Target};
use super::{FrontendError, FunctionListing, ProgramImage};
use crate::diag::{Warning, WarningKind};
use std::collections::BTreeMap;

/// Parse a listing into a [`ProgramImage`].
pub fn parse_disassembly(text: &str) -> Result<ProgramImage, FrontendError> {
    let mut instructions: Vec<Instruction> = Vec::new();
    let mut functions: Vec<FunctionListing> = Vec::new();
    let mut data: BTreeMap<u64, Vec<u8>> = BTreeMap::new();
    let mut warnings = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() || is_boilerplate(line) {
            continue;
        }
        if let Some((name, header_addr)) = parse_header(line) {
            functions.push(FunctionListing {
                name,
                address: header_addr,
                start: instructions.len(),
                end: instructions.len(),
                line: line_no,
            });
            continue;
        }
        let (addr_text, rest) = line.split_once(':').ok_or_else(|| FrontendError::MalformedLine {
            line: line_no,
            message: format!("expected `<hexaddr>: <mnemonic> ...` or a function header, got `{line}`"),
        })?;
        let address = parse_hex(addr_text.trim()).ok_or_else(|| FrontendError::MalformedLine {
            line: line_no,
            message: format!("bad instruction address `{}`", addr_text.trim()),
        })?;
        let body = skip_byte_column(rest);
        if body.is_empty() {
            // objdump continuation line holding only bytes.
            continue;
        }
        if body.starts_with('.') {
            let bytes = parse_data_directive(body).ok_or_else(|| FrontendError::MalformedLine {
                line: line_no,
                message: format!("bad data directive `{body}`"),
            })?;
            data.insert(address, bytes);
            continue;
        }

        let (mnemonic, operands, warn) = parse_instruction_body(body);
        if let Some(w) = warn {
            warnings.push(w.at_line(line_no).at(address));
        }
        let ins = Instruction {
            address,
            mnemonic,
            operands,
            text: normalize_space(body),
            raw_text: raw.to_string(),
            line: line_no,
        };

        match functions.last_mut() {
            Some(f) if f.end == instructions.len() => {
                if f.start < f.end && instructions[f.end - 1].address >= address {
                    return Err(FrontendError::MalformedLine {
                        line: line_no,
                        message: format!(
                            "address 0x{address:x} does not increase within function `{}`",
                            f.name
                        ),
                    });
                }
                if f.start == f.end && f.address == 0 {
                    f.address = address;
                }
                f.end += 1;
            }
            _ => {
                functions.push(FunctionListing {
                    name: format!("sub_{address:x}"),
                    address,
                    start: instructions.len(),
                    end: instructions.len() + 1,
                    line: line_no,
                });
            }
        }
        instructions.push(ins);
    }

    for f in &mut functions {
        if f.start < f.end {
            f.address = instructions[f.start].address;
        }
    }
    Ok(ProgramImage::new(instructions, functions, data, warnings))
}

fn is_boilerplate(line: &str) -> bool {
    line.starts_with("Disassembly of section") || line.contains("file format") || line == "..."
}

/// Remove a trailing `#...` comment, ignoring `#` inside string literals.
fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        if in_str {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
        } else if c == '"' {
            in_str = true;
        } else if c == '#' {
            return &line[..i];
        }
    }
    line
}

fn parse_header(line: &str) -> Option<(String, u64)> {
    let head = line.strip_suffix(':')?;
    let (addr, name) = match head.split_once(char::is_whitespace) {
        Some((a, n)) => (parse_hex(a)?, n.trim()),
        None => (0, head),
    };
    let name = name
        .strip_prefix('<')
        .and_then(|n| n.strip_suffix('>'))
        .unwrap_or(name);
    if is_ident(name) {
        Some((name.to_string(), addr))
    } else {
        None
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '@' | '$'))
}

pub(crate) fn parse_hex(s: &str) -> Option<u64> {
    let s = s.strip_prefix("0x").unwrap_or(s);
    if s.is_empty() || !s.chars().all(|c| c.is_ascii_hexdigit()) {
        return None;
    }
    u64::from_str_radix(s, 16).ok()
}

/// objdump puts raw instruction bytes between the address and the mnemonic,
/// separated by tabs. Drop that column when present.
fn skip_byte_column(rest: &str) -> &str {
    let rest = rest.trim_start();
    let fields: Vec<&str> = rest.split('\t').collect();
    if fields.len() >= 2 {
        let first = fields[0].trim();
        let is_bytes = !first.is_empty()
            && first
                .split_whitespace()
                .all(|t| t.len() == 2 && t.chars().all(|c| c.is_ascii_hexdigit()));
        if is_bytes {
            let idx = rest.find('\t').unwrap_or(0);
            return rest[idx..].trim();
        }
    }
    rest.trim()
}

fn normalize_space(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut in_str = false;
    let mut last_space = false;
    for c in s.trim().chars() {
        if c == '"' {
            in_str = !in_str;
        }
        if c.is_whitespace() && !in_str {
            if !last_space {
                out.push(' ');
            }
            last_space = true;
        } else {
            out.push(c);
            last_space = false;
        }
    }
    out
}

fn parse_data_directive(body: &str) -> Option<Vec<u8>> {
    let (dir, args) = body.split_once(char::is_whitespace).unwrap_or((body, ""));
    let args = args.trim();
    match dir {
        ".string" | ".asciz" => {
            let mut bytes = unescape(args)?;
            bytes.push(0);
            Some(bytes)
        }
        ".ascii" => unescape(args),
        ".byte" => args
            .split(',')
            .map(|t| parse_imm(t.trim()).map(|v| v as u8))
            .collect(),
        _ => None,
    }
}

/// Decode a double-quoted C string literal.
pub(crate) fn unescape(lit: &str) -> Option<Vec<u8>> {
    let inner = lit.strip_prefix('"')?.strip_suffix('"')?;
    let mut out = Vec::new();
    let mut chars = inner.chars().peekable();
    while let Some(c) = chars.next() {
        if c != '\\' {
            let mut buf = [0u8; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            continue;
        }
        match chars.next()? {
            'n' => out.push(b'\n'),
            't' => out.push(b'\t'),
            'r' => out.push(b'\r'),
            '0' => out.push(0),
            '\\' => out.push(b'\\'),
            '"' => out.push(b'"'),
            'x' => {
                let hi = chars.next()?;
                let lo = chars.next()?;
                out.push(u8::from_str_radix(&format!("{hi}{lo}"), 16).ok()?);
            }
            _ => return None,
        }
    }
    Some(out)
}

pub(crate) fn escape(bytes: &[u8]) -> String {
    let mut s = String::from("\"");
    for &b in bytes {
        match b {
            b'\n' => s.push_str("\\n"),
            b'\t' => s.push_str("\\t"),
            b'\r' => s.push_str("\\r"),
            b'\\' => s.push_str("\\\\"),
            b'"' => s.push_str("\\\""),
            0x20..=0x7e => s.push(b as char),
            _ => s.push_str(&format!("\\x{b:02x}")),
        }
    }
    s.push('"');
    s
}

fn parse_imm(s: &str) -> Option<i64> {
    let (neg, s) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let v = if let Some(hex) = s.strip_prefix("0x") {
        u64::from_str_radix(hex, 16).ok()? as i64
    } else {
        if s.is_empty() || !s.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        s.parse::<u64>().ok()? as i64
    };
    Some(if neg { v.wrapping_neg() } else { v })
}

/// Parse mnemonic and operands. Operands outside the grammar turn the
/// instruction into an opaque `Unknown` one, with a warning.
pub(crate) fn parse_instruction_body(body: &str) -> (Mnemonic, Vec<Operand>, Option<Warning>) {
    let mut words = body.splitn(2, char::is_whitespace);
    let mut word = words.next().unwrap_or_default();
    let mut rest = words.next().unwrap_or_default().trim();
    // Prefixes that do not change the modelled semantics.
    while matches!(word, "bnd" | "notrack" | "lock" | "rep" | "repz" | "repnz" | "data16") {
        let mut w = rest.splitn(2, char::is_whitespace);
        word = w.next().unwrap_or_default();
        rest = w.next().unwrap_or_default().trim();
    }
    let mnemonic = Mnemonic::parse(word);

    match &mnemonic {
        Mnemonic::Unknown(name) => {
            return (
                mnemonic.clone(),
                Vec::new(),
                Some(Warning::new(
                    WarningKind::UnknownMnemonic,
                    format!("`{name}` kept as a no-effect instruction"),
                )),
            )
        }
        Mnemonic::Nop | Mnemonic::Endbr64 | Mnemonic::Hlt | Mnemonic::Safecall => {
            return (mnemonic, Vec::new(), None)
        }
        _ => {}
    }

    let branchy = matches!(mnemonic, Mnemonic::Call | Mnemonic::Jmp | Mnemonic::Jcc(_));
    let parsed: Result<Vec<Operand>, String> = if rest.is_empty() {
        Ok(Vec::new())
    } else if branchy {
        parse_branch_operand(rest).map(|o| vec![o])
    } else {
        split_operands(rest).iter().map(|t| parse_operand(t)).collect()
    };

    match parsed {
        Ok(ops) if mnemonic.arity().contains(&ops.len()) => (mnemonic, ops, None),
        Ok(ops) => (
            Mnemonic::Unknown(word.to_ascii_lowercase()),
            Vec::new(),
            Some(Warning::new(
                WarningKind::UnsupportedOperand,
                format!("`{word}` with {} operand(s) is outside the modelled arity", ops.len()),
            )),
        ),
        Err(msg) => (
            Mnemonic::Unknown(word.to_ascii_lowercase()),
            Vec::new(),
            Some(Warning::new(WarningKind::UnsupportedOperand, msg)),
        ),
    }
}

fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut cur = String::new();
    for c in s.chars() {
        match c {
            '[' => {
                depth += 1;
                cur.push(c)
            }
            ']' => {
                depth = depth.saturating_sub(1);
                cur.push(c)
            }
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
            }
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn parse_branch_operand(s: &str) -> Result<Operand, String> {
    let (head, sym) = match s.find('<') {
        Some(i) => {
            let sym = s[i + 1..]
                .strip_suffix('>')
                .ok_or_else(|| format!("unterminated symbol in `{s}`"))?;
            (s[..i].trim(), Some(sym.trim().to_string()))
        }
        None => (s.trim(), None),
    };
    if let Some(address) = parse_hex(head) {
        return Ok(Operand::Target(Target {
            address,
            symbol: sym,
        }));
    }
    parse_operand(head)
}

fn strip_size_prefix(s: &str) -> (Option<u8>, &str) {
    let lower = s.to_ascii_lowercase();
    for (prefix, width) in [
        ("byte ptr", 1u8),
        ("word ptr", 2),
        ("dword ptr", 4),
        ("qword ptr", 8),
        ("xmmword ptr", 16),
    ] {
        if lower.starts_with(prefix) {
            return (Some(width), s[prefix.len()..].trim());
        }
    }
    (None, s)
}

pub(crate) fn parse_operand(s: &str) -> Result<Operand, String> {
    let s = s.trim();
    if let Some(r) = Reg::parse(s) {
        return Ok(Operand::Reg(r));
    }
    if let Some(v) = parse_imm(s) {
        return Ok(Operand::Imm(v));
    }
    let (width, rest) = strip_size_prefix(s);
    let lower = rest.to_ascii_lowercase();
    if let Some(seg) = lower.strip_prefix("fs:") {
        if let Some(disp) = parse_imm(seg) {
            return Ok(Operand::Seg {
                disp: disp as u64,
                width,
            });
        }
        return Err(format!("unsupported segment operand `{s}`"));
    }
    if lower.starts_with('[') && lower.ends_with(']') {
        let mut m = parse_mem(&lower[1..lower.len() - 1]).ok_or_else(|| format!("unsupported memory operand `{s}`"))?;
        m.width = width;
        return Ok(Operand::Mem(m));
    }
    Err(format!("unsupported operand `{s}`"))
}

fn parse_mem(inner: &str) -> Option<MemRef> {
    let mut base: Option<Base> = None;
    let mut index: Option<(Gpr, u8)> = None;
    let mut disp: i64 = 0;
    let mut terms: Vec<(bool, String)> = Vec::new();
    let mut cur = String::new();
    let mut neg = false;
    for c in inner.chars() {
        match c {
            '+' | '-' => {
                if !cur.trim().is_empty() {
                    terms.push((neg, cur.trim().to_string()));
                }
                cur.clear();
                neg = c == '-';
            }
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        terms.push((neg, cur.trim().to_string()));
    }
    for (neg, term) in terms {
        if let Some((reg, scale)) = term.split_once('*') {
            let r = Reg::parse(reg.trim())?;
            let scale: u8 = scale.trim().parse().ok()?;
            if neg || index.is_some() || !matches!(scale, 1 | 2 | 4 | 8) {
                return None;
            }
            index = Some((r.gpr, scale));
        } else if term == "rip" {
            if neg || base.is_some() {
                return None;
            }
            base = Some(Base::Rip);
        } else if let Some(r) = Reg::parse(&term) {
            if neg {
                return None;
            }
            if base.is_none() {
                base = Some(Base::Reg(r.gpr));
            } else if index.is_none() {
                index = Some((r.gpr, 1));
            } else {
                return None;
            }
        } else {
            let v = parse_imm(&term)?;
            disp = if neg {
                disp.wrapping_sub(v)
            } else {
                disp.wrapping_add(v)
            };
        }
    }
    Some(MemRef {
        base: base?,
        index,
        disp,
        width: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_memory_forms() {
        let m = parse_operand("QWORD PTR [rbp-0x18]").unwrap();
        assert_eq!(
            m,
            Operand::Mem(MemRef {
                base: Base::Reg(Gpr::Rbp),
                index: None,
                disp: -0x18,
                width: Some(8)
            })
        );
        let m = parse_operand("[rbp-24]").unwrap();
        assert_eq!(m.as_mem().unwrap().rbp_offset(), Some(-24));
        let m = parse_operand("BYTE PTR [rbp+rax*1-0x20]").unwrap();
        assert_eq!(m.as_mem().unwrap().index, Some((Gpr::Rax, 1)));
        assert_eq!(m.as_mem().unwrap().rbp_offset(), None);
        let m = parse_operand("[rip+0xe9e]").unwrap();
        assert_eq!(m.as_mem().unwrap().base, Base::Rip);
        assert!(matches!(
            parse_operand("QWORD PTR fs:0x28").unwrap(),
            Operand::Seg { disp: 0x28, width: Some(8) }
        ));
        assert!(parse_operand("[0x404040]").is_err());
    }

    #[test]
    fn immediates() {
        assert_eq!(parse_imm("32"), Some(32));
        assert_eq!(parse_imm("0x20"), Some(32));
        assert_eq!(parse_imm("-0x8"), Some(-8));
        assert_eq!(parse_imm("0xffffffffffffffff"), Some(-1));
    }

    #[test]
    fn branch_operands() {
        let (m, ops, w) = parse_instruction_body("call   0x401030 <strcpy@plt>");
        assert_eq!(m, Mnemonic::Call);
        assert!(w.is_none());
        let t = ops[0].clone();
        match t {
            Operand::Target(t) => {
                assert_eq!(t.address, 0x401030);
                assert_eq!(t.plain_symbol(), Some("strcpy"));
                assert!(t.is_plt());
            }
            other => panic!("{other:?}"),
        }
        let (_, ops, _) = parse_instruction_body("jne 40115a <main+0x24>");
        assert!(matches!(&ops[0], Operand::Target(t) if t.address == 0x40115a));
        let (m, ops, _) = parse_instruction_body("call rax");
        assert_eq!(m, Mnemonic::Call);
        assert!(matches!(ops[0], Operand::Reg(_)));
    }

    #[test]
    fn string_literals() {
        assert_eq!(unescape("\"a\\n\\x41\"").unwrap(), b"a\nA".to_vec());
        assert_eq!(escape(b"a\nA\x01"), "\"a\\nA\\x01\"");
        assert_eq!(strip_comment("lea rax,[rip+0x1]  # 402004"), "lea rax,[rip+0x1]  ");
        assert_eq!(strip_comment(".string \"#x\" # c"), ".string \"#x\" ");
    }

    #[test]
    fn objdump_byte_column() {
        assert_eq!(skip_byte_column("\t55                   \tpush   rbp"), "push   rbp");
        assert_eq!(skip_byte_column(" push rbp"), "push rbp");
        assert_eq!(skip_byte_column(" add rsp, 0x10"), "add rsp, 0x10");
    }
}
