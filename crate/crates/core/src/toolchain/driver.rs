//! Generation of the C test driver linked against a candidate object.
//!
//! Each test's inputs are a small typed value tree. The driver takes the
//! test index as `argv[1]`, sets up arguments, calls the target function and
//! prints the observed state using the line protocol:
//!
//! ```text
//! TEST <id>
//! <whatever the function itself prints>
//! OUT <hex>        (return value, then each buffer argument, then each global)
//! EXIT 0
//! ```
//!
//! Every `OUT` value is the raw memory of the object in hex, so floating
//! point values compare bit-exactly.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TestCase;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DriverError {
    #[error("unsupported C type `{0}`")]
    UnsupportedType(String),
    #[error("invalid identifier `{0}`")]
    BadIdentifier(String),
    #[error("test `{test}`: {reason}")]
    BadValue { test: String, reason: String },
    #[error("tests disagree on the signature of `{0}`")]
    SignatureMismatch(String),
    #[error("no tests to drive")]
    NoTests,
}

/// Scalar C types a driver can materialize.
const SCALARS: &[(&str, ScalarKind)] = &[
    ("char", ScalarKind::Signed),
    ("signed char", ScalarKind::Signed),
    ("unsigned char", ScalarKind::Unsigned),
    ("short", ScalarKind::Signed),
    ("unsigned short", ScalarKind::Unsigned),
    ("int", ScalarKind::Signed),
    ("unsigned int", ScalarKind::Unsigned),
    ("unsigned", ScalarKind::Unsigned),
    ("long", ScalarKind::Signed),
    ("unsigned long", ScalarKind::Unsigned),
    ("long long", ScalarKind::Signed),
    ("unsigned long long", ScalarKind::Unsigned),
    ("int8_t", ScalarKind::Signed),
    ("int16_t", ScalarKind::Signed),
    ("int32_t", ScalarKind::Signed),
    ("int64_t", ScalarKind::Signed),
    ("uint8_t", ScalarKind::Unsigned),
    ("uint16_t", ScalarKind::Unsigned),
    ("uint32_t", ScalarKind::Unsigned),
    ("uint64_t", ScalarKind::Unsigned),
    ("size_t", ScalarKind::Unsigned),
    ("float", ScalarKind::Float),
    ("double", ScalarKind::Float),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScalarKind {
    Signed,
    Unsigned,
    Float,
}

fn scalar_kind(ctype: &str) -> Result<ScalarKind, DriverError> {
    SCALARS
        .iter()
        .find(|(name, _)| *name == ctype)
        .map(|(_, k)| *k)
        .ok_or_else(|| DriverError::UnsupportedType(ctype.to_string()))
}

/// Inputs for one test invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverInputs {
    /// `"void"`, a scalar type, or `"char*"` (captured as a NUL-terminated string).
    #[serde(default = "void")]
    pub returns: String,
    #[serde(default)]
    pub args: Vec<ArgValue>,
    /// Globals defined by the function's translation unit, snapshotted after the call.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub globals: Vec<GlobalSpec>,
    /// Bytes fed to the process on stdin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stdin: Option<String>,
}

fn void() -> String {
    "void".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArgValue {
    /// Passed by value.
    Scalar { ctype: String, value: serde_json::Number },
    /// An array passed by pointer; its contents after the call are captured.
    Buffer {
        ctype: String,
        values: Vec<serde_json::Number>,
    },
    /// A writable `char` array holding `value` plus NUL, at least `capacity` long.
    String {
        value: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        capacity: Option<usize>,
    },
    Null,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalSpec {
    pub name: String,
    pub ctype: String,
    /// Element count when the global is an array.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub len: Option<usize>,
}

fn check_ident(name: &str) -> Result<(), DriverError> {
    let mut chars = name.chars();
    let ok = matches!(chars.next(), Some(c) if c == '_' || c.is_ascii_alphabetic())
        && chars.all(|c| c == '_' || c.is_ascii_alphanumeric());
    if ok {
        Ok(())
    } else {
        Err(DriverError::BadIdentifier(name.to_string()))
    }
}

fn literal(ctype: &str, value: &serde_json::Number, test: &str) -> Result<String, DriverError> {
    let bad = |reason: &str| DriverError::BadValue {
        test: test.to_string(),
        reason: format!("{reason} for `{ctype}`: {value}"),
    };
    match scalar_kind(ctype)? {
        ScalarKind::Float => {
            let v = value.as_f64().ok_or_else(|| bad("not a number"))?;
            if !v.is_finite() {
                return Err(bad("non-finite value"));
            }
            Ok(format!("(({ctype}){v:e})"))
        }
        ScalarKind::Signed => {
            let v = value.as_i64().ok_or_else(|| bad("not a signed 64-bit integer"))?;
            if v == i64::MIN {
                Ok(format!("(({ctype})(-9223372036854775807LL - 1))"))
            } else {
                Ok(format!("(({ctype})({v}LL))"))
            }
        }
        ScalarKind::Unsigned => {
            let v = value.as_u64().ok_or_else(|| bad("not an unsigned 64-bit integer"))?;
            Ok(format!("(({ctype}){v}ULL)"))
        }
    }
}

fn c_string_literal(s: &str) -> String {
    let mut out = String::from("\"");
    for b in s.bytes() {
        // Octal escapes keep every byte explicit and never merge with a following digit.
        let _ = write!(out, "\\{b:03o}");
    }
    out.push('"');
    out
}

fn param_type(arg: &ArgValue) -> Result<String, DriverError> {
    Ok(match arg {
        ArgValue::Scalar { ctype, .. } => {
            scalar_kind(ctype)?;
            ctype.clone()
        }
        ArgValue::Buffer { ctype, .. } => {
            scalar_kind(ctype)?;
            format!("{ctype}*")
        }
        ArgValue::String { .. } => "char*".into(),
        ArgValue::Null => "void*".into(),
    })
}

fn prototype(symbol: &str, inputs: &DriverInputs) -> Result<String, DriverError> {
    let ret = match inputs.returns.as_str() {
        "void" | "char*" => inputs.returns.clone(),
        other => {
            scalar_kind(other)?;
            other.to_string()
        }
    };
    let params = inputs
        .args
        .iter()
        .map(param_type)
        .collect::<Result<Vec<_>, _>>()?;
    let params = if params.is_empty() {
        "void".to_string()
    } else {
        params.join(", ")
    };
    Ok(format!("{ret} {symbol}({params});"))
}

fn emit_case(out: &mut String, index: usize, symbol: &str, test: &TestCase) -> Result<(), DriverError> {
    let inputs = &test.driver_inputs;
    let _ = writeln!(out, "  case {index}: {{");
    let mut call_args = Vec::new();
    let mut captures = Vec::new();
    for (i, arg) in inputs.args.iter().enumerate() {
        match arg {
            ArgValue::Scalar { ctype, value } => {
                call_args.push(literal(ctype, value, &test.test_id)?);
            }
            ArgValue::Buffer { ctype, values } => {
                let elems = values
                    .iter()
                    .map(|v| literal(ctype, v, &test.test_id))
                    .collect::<Result<Vec<_>, _>>()?;
                let len = elems.len().max(1);
                let init = if elems.is_empty() { "0".to_string() } else { elems.join(", ") };
                let _ = writeln!(out, "    static {ctype} a{i}[{len}] = {{{init}}};");
                call_args.push(format!("a{i}"));
                captures.push(format!("decaf_out(a{i}, sizeof a{i});"));
            }
            ArgValue::String { value, capacity } => {
                let len = capacity.unwrap_or(0).max(value.len() + 1);
                let _ = writeln!(out, "    static char a{i}[{len}];");
                let _ = writeln!(out, "    memcpy(a{i}, {}, {});", c_string_literal(value), value.len());
                call_args.push(format!("a{i}"));
                captures.push(format!("decaf_out(a{i}, sizeof a{i});"));
            }
            ArgValue::Null => call_args.push("(void*)0".into()),
        }
    }
    let _ = writeln!(out, "    decaf_begin({});", c_string_literal(&test.test_id));
    let call = format!("{symbol}({})", call_args.join(", "));
    match inputs.returns.as_str() {
        "void" => {
            let _ = writeln!(out, "    {call};");
            let _ = writeln!(out, "    fflush(stdout);");
        }
        "char*" => {
            let _ = writeln!(out, "    char *r = {call};");
            let _ = writeln!(out, "    fflush(stdout);");
            let _ = writeln!(out, "    decaf_out_str(r);");
        }
        ret => {
            let _ = writeln!(out, "    {ret} r = {call};");
            let _ = writeln!(out, "    fflush(stdout);");
            let _ = writeln!(out, "    decaf_out(&r, sizeof r);");
        }
    }
    for c in captures {
        let _ = writeln!(out, "    {c}");
    }
    for g in &inputs.globals {
        let _ = writeln!(out, "    decaf_out(&{}, sizeof {});", g.name, g.name);
    }
    let _ = writeln!(out, "    break;");
    let _ = writeln!(out, "  }}");
    Ok(())
}

const PRELUDE: &str = r#"#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <stdint.h>
#include <stddef.h>

static void decaf_begin(const char *id) {
  printf("TEST %s\n", id);
  fflush(stdout);
}

static void decaf_out(const void *p, size_t n) {
  const unsigned char *b = (const unsigned char *)p;
  fputs("\nOUT ", stdout);
  for (size_t i = 0; i < n; i++) printf("%02x", b[i]);
}

static void decaf_out_str(const char *s) {
  if (s == NULL) { fputs("\nOUT NULL", stdout); return; }
  decaf_out(s, strlen(s));
}
"#;

/// Renders a driver calling `symbol` for every test, in the given order.
///
/// All tests must agree on the prototype; the index passed on the command
/// line selects the test.
pub fn generate_driver(symbol: &str, tests: &[TestCase]) -> Result<String, DriverError> {
    check_ident(symbol)?;
    let first = tests.first().ok_or(DriverError::NoTests)?;
    let proto = prototype(symbol, &first.driver_inputs)?;
    let mut globals: Vec<&GlobalSpec> = Vec::new();
    for t in tests {
        if prototype(symbol, &t.driver_inputs)? != proto {
            return Err(DriverError::SignatureMismatch(symbol.to_string()));
        }
        for g in &t.driver_inputs.globals {
            check_ident(&g.name)?;
            scalar_kind(&g.ctype)?;
            if !globals.iter().any(|known| known.name == g.name) {
                globals.push(g);
            }
        }
    }

    let mut out = String::from(PRELUDE);
    let _ = writeln!(out);
    let _ = writeln!(out, "{proto}");
    for g in &globals {
        match g.len {
            Some(n) => {
                let _ = writeln!(out, "extern {} {}[{n}];", g.ctype, g.name);
            }
            None => {
                let _ = writeln!(out, "extern {} {};", g.ctype, g.name);
            }
        }
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "int main(int argc, char **argv) {{");
    let _ = writeln!(out, "  if (argc < 2) return 2;");
    let _ = writeln!(out, "  switch (atoi(argv[1])) {{");
    for (i, t) in tests.iter().enumerate() {
        emit_case(&mut out, i, symbol, t)?;
    }
    let _ = writeln!(out, "  default: return 2;");
    let _ = writeln!(out, "  }}");
    let _ = writeln!(out, "  printf(\"\\nEXIT 0\\n\");");
    let _ = writeln!(out, "  return 0;");
    let _ = writeln!(out, "}}");
    Ok(out)
}
