//! Compilation, byte extraction and disassembly against the system gcc.

use std::path::Path;
use std::process::Command;

use decaf_core::metrics::{exact_match, wildcard_levenshtein};
use decaf_core::toolchain::{
    compile_candidate, disassemble, extract_function_bytes, function_bytes, CompilerProfile, ToolchainError,
};

const ONE_CALL: &str = "extern int ext(int);\nint caller(int x) { return ext(x) + 1; }\n";

/// Sum of relocation field widths inside `symbol`, from `readelf`.
fn readelf_reloc_bytes(obj: &Path, symbol: &str) -> usize {
    let syms = Command::new("readelf").args(["-sW"]).arg(obj).output().unwrap();
    let syms = String::from_utf8(syms.stdout).unwrap();
    let (value, size) = syms
        .lines()
        .find_map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            (f.len() >= 8 && f[7] == symbol).then(|| (u64::from_str_radix(f[1], 16).unwrap(), f[2].parse::<u64>().unwrap()))
        })
        .expect("symbol in readelf -s");
    let relocs = Command::new("readelf").args(["-rW"]).arg(obj).output().unwrap();
    let relocs = String::from_utf8(relocs.stdout).unwrap();
    let mut in_text = false;
    let mut total = 0;
    for line in relocs.lines() {
        if line.starts_with("Relocation section") {
            in_text = line.contains("'.rela.text'");
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if !in_text || f.len() < 3 {
            continue;
        }
        let Ok(offset) = u64::from_str_radix(f[0], 16) else { continue };
        let width = match f[2] {
            "R_X86_64_64" | "R_X86_64_PC64" => 8,
            t if t.starts_with("R_X86_64_") => 4,
            _ => continue,
        };
        if offset >= value && offset < value + size {
            total += width;
        }
    }
    total
}

#[test]
fn mask_matches_readelf_for_one_external_call() {
    let dir = tempfile::tempdir().unwrap();
    let profile = CompilerProfile::builtin("gcc-O0").unwrap();
    let art = compile_candidate(ONE_CALL, "", &profile, &dir.path().join("a")).unwrap();
    assert!(art.success, "{}", art.compiler_log);
    let listing = extract_function_bytes(&art, "caller").unwrap();
    let expected = readelf_reloc_bytes(&art.object_path, "caller");
    assert_eq!(expected, 4);
    assert_eq!(listing.wildcard_count(), expected);
    assert_eq!(listing.bytes.len(), listing.wildcard_mask.len());
}

#[test]
fn identical_compilations_give_identical_listings() {
    let dir = tempfile::tempdir().unwrap();
    let profile = CompilerProfile::builtin("gcc-O2").unwrap();
    let a = compile_candidate(ONE_CALL, "", &profile, &dir.path().join("a")).unwrap();
    let b = compile_candidate(ONE_CALL, "", &profile, &dir.path().join("b")).unwrap();
    let la = extract_function_bytes(&a, "caller").unwrap();
    let lb = extract_function_bytes(&b, "caller").unwrap();
    assert_eq!(la, lb);
    assert!(exact_match(&la, &lb));
    assert_eq!(wildcard_levenshtein(&la, &lb).unwrap().raw, 0);
}

#[test]
fn different_callee_still_matches_modulo_relocations() {
    let dir = tempfile::tempdir().unwrap();
    let profile = CompilerProfile::builtin("gcc-O0").unwrap();
    let other = ONE_CALL.replace("ext(", "other_fn(");
    let a = compile_candidate(ONE_CALL, "", &profile, &dir.path().join("a")).unwrap();
    let b = compile_candidate(&other, "", &profile, &dir.path().join("b")).unwrap();
    let la = extract_function_bytes(&a, "caller").unwrap();
    let lb = extract_function_bytes(&b, "caller").unwrap();
    assert!(exact_match(&la, &lb));
}

#[test]
fn compile_failure_is_an_unsuccessful_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let profile = CompilerProfile::builtin("gcc-O0").unwrap();
    let art = compile_candidate("int f( { return 0; }", "", &profile, dir.path()).unwrap();
    assert!(!art.success);
    assert!(art.compiler_log.contains("error"), "{}", art.compiler_log);
    assert!(matches!(extract_function_bytes(&art, "f"), Err(ToolchainError::NotCompiled(_))));
}

#[test]
fn missing_compiler_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let profile = CompilerProfile::new("nope", "decaf-no-such-cc", &["-O0"]);
    let err = compile_candidate("int f(void) { return 0; }", "", &profile, dir.path()).unwrap_err();
    assert!(matches!(err, ToolchainError::MissingTool(_)));
    assert!(err.is_configuration());
}

#[test]
fn unknown_symbol_lists_available_functions() {
    let dir = tempfile::tempdir().unwrap();
    let profile = CompilerProfile::builtin("gcc-O0").unwrap();
    let art = compile_candidate(ONE_CALL, "", &profile, dir.path()).unwrap();
    let data = std::fs::read(&art.object_path).unwrap();
    match function_bytes(&data, "missing", "gcc-O0") {
        Err(ToolchainError::SymbolNotFound { available, .. }) => assert_eq!(available, ["caller"]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn dependencies_are_prepended() {
    let dir = tempfile::tempdir().unwrap();
    let profile = CompilerProfile::builtin("gcc-O0").unwrap();
    let deps = "typedef struct { int a, b; } pair;";
    let art = compile_candidate("int sum(pair *p) { return p->a + p->b; }", deps, &profile, dir.path()).unwrap();
    assert!(art.success, "{}", art.compiler_log);
}

#[test]
fn canonical_disassembly_masks_calls_and_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let profile = CompilerProfile::builtin("gcc-O0").unwrap();
    let art = compile_candidate(ONE_CALL, "", &profile, &dir.path().join("a")).unwrap();
    let listing = disassemble(&art, "caller", false).unwrap();
    assert!(listing.canonical.contains("call   <rel>") || listing.canonical.contains("call <rel>"), "{}", listing.canonical);
    assert!(!listing.canonical.contains('#'));
    assert!(listing.canonical.lines().all(|l| l.starts_with("    ") || l.ends_with(':')));
    // Padding the file with another function first shifts addresses, not canonical text.
    let shifted = format!("int pad(int a) {{ return a * 3 + 7; }}\n{ONE_CALL}");
    let art2 = compile_candidate(&shifted, "", &profile, &dir.path().join("b")).unwrap();
    assert_eq!(disassemble(&art2, "caller", false).unwrap().canonical, listing.canonical);
    assert_eq!(decaf_core::toolchain::canonicalize(&listing.canonical), listing.canonical);
}
