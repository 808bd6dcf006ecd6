//! `objdump` disassembly and its canonical, address-free form.
//!
//! Canonical text keeps one instruction per line (indented four spaces)
//! with the address and encoding columns removed, symbolic `<...>`
//! annotations and `#` comments dropped, in-function branch targets
//! replaced by `L<k>` labels numbered in listing order, and every
//! relocation-dependent operand rewritten to `<rel>`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

/// A function's disassembly in raw and canonical form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisassemblyListing {
    pub raw: String,
    pub canonical: String,
    pub symbol: String,
    pub stripped_view: bool,
}

pub const REL: &str = "<rel>";

enum Line<'a> {
    /// `reloc` is set when `objdump -w` printed the relocation on the same line.
    Insn { addr: u64, text: &'a str, reloc: Option<u64> },
    Reloc { addr: u64 },
    Canonical(&'a str),
    Other,
}

fn parse_hex(s: &str) -> Option<u64> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
        return None;
    }
    u64::from_str_radix(s, 16).ok()
}

fn classify(line: &str) -> Line<'_> {
    if is_canonical_line(line) {
        return Line::Canonical(line);
    }
    let trimmed = line.trim_start();
    let Some((addr, rest)) = trimmed.split_once(':') else {
        return Line::Other;
    };
    let Some(addr) = parse_hex(addr) else {
        return Line::Other;
    };
    if let Some(rest) = rest.strip_prefix(' ') {
        if rest.starts_with("R_") {
            return Line::Reloc { addr };
        }
        return Line::Other;
    }
    let Some(rest) = rest.strip_prefix('\t') else {
        return Line::Other;
    };
    // `<bytes>\t<instruction>`; continuation lines carry bytes only.
    let Some((_, text)) = rest.split_once('\t').filter(|(_, t)| !t.trim().is_empty()) else {
        return Line::Other;
    };
    // Wide output appends `\t<addr>: R_<type>\t<symbol>` to the instruction.
    if let Some((insn, tail)) = text.split_once('\t') {
        if let Some((raddr, kind)) = tail.split_once(':') {
            if kind.trim_start().starts_with("R_") {
                if let Some(r) = parse_hex(raddr.trim()) {
                    return Line::Insn { addr, text: insn, reloc: Some(r) };
                }
            }
        }
    }
    Line::Insn { addr, text, reloc: None }
}

fn is_canonical_line(line: &str) -> bool {
    if line.contains('\t') {
        return false;
    }
    if let Some(body) = line.strip_prefix("    ") {
        return !body.is_empty() && !body.starts_with(' ');
    }
    line.strip_prefix('L')
        .and_then(|l| l.strip_suffix(':'))
        .is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
}

/// Removes `# ...` comments and `<symbol+off>` annotations, collapses spaces.
fn strip_annotations(text: &str) -> String {
    let text = match text.find('#') {
        Some(i) => &text[..i],
        None => text,
    };
    let mut out = String::with_capacity(text.len());
    let mut depth = 0usize;
    for c in text.chars() {
        match c {
            '<' => depth += 1,
            '>' if depth > 0 => depth -= 1,
            _ if depth == 0 => out.push(c),
            _ => {}
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_branch(mnemonic: &str) -> bool {
    mnemonic.starts_with('j')
        || mnemonic.starts_with("call")
        || mnemonic.starts_with("loop")
        || mnemonic == "xbegin"
}

/// Splits `prefix* mnemonic operands` and returns the index of the mnemonic token.
fn mnemonic_index(tokens: &[&str]) -> usize {
    const PREFIXES: &[&str] = &["bnd", "notrack", "lock", "rep", "repz", "repnz", "repe", "repne", "data16", "cs", "ds"];
    tokens
        .iter()
        .position(|t| !PREFIXES.contains(t))
        .unwrap_or(0)
}

/// The bare-hex direct branch target of an instruction, if any.
fn branch_target(text: &str) -> Option<u64> {
    let tokens: Vec<&str> = text.split(' ').collect();
    let m = mnemonic_index(&tokens);
    if !is_branch(tokens.get(m)?) {
        return None;
    }
    match &tokens[m + 1..] {
        [target] => parse_hex(target),
        _ => None,
    }
}

/// Replaces `0x...` numbers matching `pred(number, following text)`.
fn replace_hex(text: &str, pred: impl Fn(&str, &str, &str) -> bool) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(i) = rest.find("0x") {
        let (before, tail) = rest.split_at(i);
        let digits = tail[2..].bytes().take_while(|b| b.is_ascii_hexdigit()).count();
        let (number, after) = tail.split_at(2 + digits);
        out.push_str(before);
        let preceding = out.as_str();
        if digits > 0 && pred(preceding, number, after) {
            // The sign belongs to the masked value.
            if out.ends_with('-') {
                out.pop();
            }
            out.push_str(REL);
        } else {
            out.push_str(number);
        }
        rest = after;
    }
    out.push_str(rest);
    out
}

fn mask_rip(text: &str) -> String {
    let masked = replace_hex(text, |_, _, after| after.starts_with("(%rip)"));
    // A zero displacement is printed without a number.
    masked.replace(",(%rip)", &format!(",{REL}(%rip)")).replace(" (%rip)", &format!(" {REL}(%rip)"))
}

fn mask_relocated(text: &str) -> String {
    if text.contains("(%rip)") {
        return mask_rip(text);
    }
    let immediates = replace_hex(text, |before, _, _| before.ends_with('$'));
    if immediates != text {
        return immediates;
    }
    // Absolute displacements such as `0x0(,%rax,8)`.
    replace_hex(text, |_, _, after| after.starts_with('('))
}

/// Canonicalizes `objdump -d -r` output for one function.
///
/// Already-canonical lines pass through untouched, so the function is
/// idempotent.
pub fn canonicalize(raw: &str) -> String {
    let mut insns: Vec<(u64, String)> = Vec::new();
    let mut relocs = Vec::new();
    let mut passthrough = Vec::new();
    for line in raw.lines() {
        match classify(line) {
            Line::Insn { addr, text, reloc } => {
                insns.push((addr, strip_annotations(text)));
                relocs.extend(reloc);
            }
            Line::Reloc { addr } => relocs.push(addr),
            Line::Canonical(l) => passthrough.push(l),
            Line::Other => {}
        }
    }
    if insns.is_empty() {
        let mut out = String::new();
        for l in passthrough {
            out.push_str(l);
            out.push('\n');
        }
        return out;
    }

    let addrs: BTreeSet<u64> = insns.iter().map(|(a, _)| *a).collect();
    let relocated: BTreeSet<u64> = relocs
        .iter()
        .filter_map(|r| addrs.range(..=*r).next_back().copied())
        .collect();

    let targets: BTreeSet<u64> = insns
        .iter()
        .filter(|(a, _)| !relocated.contains(a))
        .filter_map(|(_, text)| branch_target(text))
        .filter(|t| addrs.contains(t))
        .collect();
    let labels: BTreeMap<u64, usize> = targets.iter().enumerate().map(|(i, a)| (*a, i + 1)).collect();

    let mut out = String::new();
    for (addr, text) in &insns {
        if let Some(k) = labels.get(addr) {
            out.push_str(&format!("L{k}:\n"));
        }
        let rendered = match branch_target(text) {
            Some(target) => {
                let (head, _) = text.rsplit_once(' ').expect("branch has an operand");
                match labels.get(&target) {
                    Some(k) if !relocated.contains(addr) => format!("{head} L{k}"),
                    _ => format!("{head} {REL}"),
                }
            }
            None if relocated.contains(addr) => mask_relocated(text),
            None => mask_rip(text),
        };
        out.push_str("    ");
        out.push_str(&rendered);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Shape of the loop in the working example's reference listing.
    const LOOP: &str = "\
000000000001e4e0 <createDimensions>:
   1e4e0:\tf3 0f 1e fa          \tendbr64
   1e4e4:\tb9 01 00 00 00       \tmov    $0x1,%ecx
   1e4e9:\t83 fe 01             \tcmp    $0x1,%esi
   1e4ec:\t74 1b                \tje     1e509 <createDimensions+0x29>
   1e4ee:\t66 90                \txchg   %ax,%ax
   1e4f0:\t89 f0                \tmov    %esi,%eax
   1e4f2:\t99                   \tcltd
   1e4f3:\tf7 f9                \tidiv   %ecx
   1e4f5:\t39 c8                \tcmp    %ecx,%eax
   1e4f7:\t7f 09                \tjg     1e502 <createDimensions+0x22>
   1e4f9:\t89 c2                \tmov    %eax,%edx
   1e4fb:\t0f af d1             \timul   %ecx,%edx
   1e4fe:\t39 d6                \tcmp    %edx,%esi
   1e500:\t74 0c                \tje     1e50e <createDimensions+0x2e>
   1e502:\t83 c1 01             \tadd    $0x1,%ecx
   1e505:\t39 ce                \tcmp    %ecx,%esi
   1e507:\t75 e7                \tjne    1e4f0 <createDimensions+0x10>
   1e509:\tb8 01 00 00 00       \tmov    $0x1,%eax
   1e50e:\t89 0f                \tmov    %ecx,(%rdi)
   1e510:\t89 47 04             \tmov    %eax,0x4(%rdi)
   1e513:\tc3                   \tret
";

    #[test]
    fn loop_labels_follow_listing_order() {
        let c = canonicalize(LOOP);
        assert!(c.contains("    jne L1\n"), "{c}");
        assert!(c.contains("    je L3\n"));
        assert!(c.starts_with("    endbr64\n"));
        assert!(c.contains("L1:\n    mov %esi,%eax\n"));
        assert!(!c.contains("1e4"));
    }

    #[test]
    fn idempotent() {
        let once = canonicalize(LOOP);
        assert_eq!(canonicalize(&once), once);
        assert_eq!(canonicalize(""), "");
    }

    #[test]
    fn shifted_listing_is_identical() {
        let shifted: String = LOOP
            .lines()
            .map(|l| {
                // Rebase 0x1e4xx/0x1e5xx to 0x4xx/0x5xx.
                l.replace("1e4", "4").replace("1e5", "5") + "\n"
            })
            .collect();
        assert_eq!(canonicalize(&shifted), canonicalize(LOOP));
    }

    #[test]
    fn relocations_become_rel() {
        let obj = "\
0000000000000000 <f>:
   0:\tf3 0f 1e fa          \tendbr64
   4:\t8b 05 00 00 00 00    \tmov    0x0(%rip),%eax        # a <f+0xa>
\t\t\t6: R_X86_64_PC32\tcounter-0x4
   a:\te8 00 00 00 00       \tcall   f <f+0xf>
\t\t\tb: R_X86_64_PLT32\tputs-0x4
   f:\tbf 00 00 00 00       \tmov    $0x0,%edi
\t\t\t10: R_X86_64_32\t.rodata
  14:\tc3                   \tret
";
        let linked = "\
0000000000401136 <f>:
  401136:\tf3 0f 1e fa          \tendbr64
  40113a:\t8b 05 d0 2e 00 00    \tmov    0x2ed0(%rip),%eax        # 404010 <counter>
  401140:\te8 eb fe ff ff       \tcall   401030 <puts@plt>
";
        let c = canonicalize(obj);
        assert_eq!(
            c,
            "    endbr64\n    mov <rel>(%rip),%eax\n    call <rel>\n    mov $<rel>,%edi\n    ret\n"
        );
        let l = canonicalize(linked);
        assert_eq!(l, "    endbr64\n    mov <rel>(%rip),%eax\n    call <rel>\n");
    }

    #[test]
    fn wide_inline_relocations() {
        let obj = "\
0000000000000000 <f>:
   0:\tf3 0f 1e fa          \tendbr64
   4:\te8 00 00 00 00       \tcall   9 <f+0x9>\t5: R_X86_64_PLT32\text-0x4
   9:\tbf 00 00 00 00       \tmov    $0x0,%edi\ta: R_X86_64_32\t.rodata
   e:\tc3                   \tret
";
        assert_eq!(canonicalize(obj), "    endbr64\n    call <rel>\n    mov $<rel>,%edi\n    ret\n");
    }

    #[test]
    fn annotation_stripping() {
        assert_eq!(strip_annotations("jmp    1f <foo+0x1f>"), "jmp 1f");
        assert_eq!(strip_annotations("lea    0x0(%rip),%rax        # 7 <f+0x7>"), "lea 0x0(%rip),%rax");
    }
}
