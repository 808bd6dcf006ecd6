//! Function byte extraction from ELF objects.

use object::elf;
use object::{Object, ObjectKind, ObjectSection, ObjectSymbol, RelocationFlags, SymbolKind};
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::ToolchainError;

/// Machine code of one function with its relocation wildcard mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteListing {
    #[serde(with = "crate::b64")]
    pub bytes: Vec<u8>,
    pub wildcard_mask: Vec<bool>,
    pub symbol: String,
    pub origin_profile: String,
}

impl ByteListing {
    pub fn wildcard_count(&self) -> usize {
        self.wildcard_mask.iter().filter(|&&m| m).count()
    }
}

/// A relocation entry that touches the function, in function-relative offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelocationSite {
    pub offset: u64,
    pub width: u64,
    pub r_type: u32,
}

/// Field width patched by an x86-64 relocation type, `None` when unknown.
pub fn x86_64_reloc_width(r_type: u32) -> Option<u64> {
    Some(match elf::RelocationType(r_type) {
        elf::R_X86_64_NONE => 0,
        elf::R_X86_64_64
        | elf::R_X86_64_PC64
        | elf::R_X86_64_GOTOFF64
        | elf::R_X86_64_GOT64
        | elf::R_X86_64_GOTPCREL64
        | elf::R_X86_64_GOTPC64
        | elf::R_X86_64_GOTPLT64
        | elf::R_X86_64_PLTOFF64
        | elf::R_X86_64_SIZE64
        | elf::R_X86_64_DTPMOD64
        | elf::R_X86_64_DTPOFF64
        | elf::R_X86_64_TPOFF64 => 8,
        elf::R_X86_64_PC32
        | elf::R_X86_64_GOT32
        | elf::R_X86_64_PLT32
        | elf::R_X86_64_GOTPCREL
        | elf::R_X86_64_32
        | elf::R_X86_64_32S
        | elf::R_X86_64_TLSGD
        | elf::R_X86_64_TLSLD
        | elf::R_X86_64_DTPOFF32
        | elf::R_X86_64_GOTTPOFF
        | elf::R_X86_64_TPOFF32
        | elf::R_X86_64_GOTPC32
        | elf::R_X86_64_SIZE32
        | elf::R_X86_64_GOTPC32_TLSDESC
        | elf::R_X86_64_GOTPCRELX
        | elf::R_X86_64_REX_GOTPCRELX => 4,
        elf::R_X86_64_16 | elf::R_X86_64_PC16 => 2,
        elf::R_X86_64_8 | elf::R_X86_64_PC8 => 1,
        _ => return None,
    })
}

fn reloc_width(machine_x86_64: bool, r_type: u32) -> u64 {
    let known = if machine_x86_64 { x86_64_reloc_width(r_type) } else { None };
    known.unwrap_or_else(|| {
        warn!(r_type, "unknown relocation type, assuming a 4-byte field");
        4
    })
}

pub(crate) struct FunctionSpan {
    /// Address of the symbol as seen by the disassembler.
    pub address: u64,
    pub size: u64,
    pub section: String,
}

fn find_symbol<'data, 'file>(
    file: &'file object::File<'data>,
    symbol: &str,
) -> Result<object::Symbol<'data, 'file>, ToolchainError> {
    let mut available = Vec::new();
    for sym in file.symbols() {
        let Ok(name) = sym.name() else { continue };
        if name == symbol && sym.section_index().is_some() {
            return Ok(sym);
        }
        if sym.kind() == SymbolKind::Text && !name.is_empty() {
            available.push(name.to_string());
        }
    }
    available.sort();
    available.dedup();
    Err(ToolchainError::SymbolNotFound {
        symbol: symbol.to_string(),
        available,
    })
}

fn parse(data: &[u8]) -> Result<object::File<'_>, ToolchainError> {
    object::File::parse(data).map_err(|e| ToolchainError::BadObject(e.to_string()))
}

pub(crate) fn function_span(data: &[u8], symbol: &str) -> Result<FunctionSpan, ToolchainError> {
    let file = parse(data)?;
    let sym = find_symbol(&file, symbol)?;
    if sym.size() == 0 {
        return Err(ToolchainError::ZeroSizeSymbol(symbol.to_string()));
    }
    let section = file
        .section_by_index(sym.section_index().expect("checked by find_symbol"))
        .and_then(|s| s.name().map(str::to_string))
        .map_err(|e| ToolchainError::BadObject(e.to_string()))?;
    Ok(FunctionSpan {
        address: sym.address(),
        size: sym.size(),
        section,
    })
}

/// Relocations whose patched field overlaps the function, clipped to it.
pub fn relocation_sites(data: &[u8], symbol: &str) -> Result<Vec<RelocationSite>, ToolchainError> {
    let file = parse(data)?;
    let sym = find_symbol(&file, symbol)?;
    let section_index = sym.section_index().expect("checked by find_symbol");
    let section = file
        .section_by_index(section_index)
        .map_err(|e| ToolchainError::BadObject(e.to_string()))?;
    let start = sym.address() - section.address();
    let end = start + sym.size();
    let x86_64 = file.architecture() == object::Architecture::X86_64;

    let mut sites = Vec::new();
    for (offset, reloc) in section.relocations() {
        let r_type = match reloc.flags() {
            RelocationFlags::Elf { r_type } => r_type.0,
            _ => continue,
        };
        let width = reloc_width(x86_64, r_type);
        let (lo, hi) = (offset.max(start), (offset + width).min(end));
        if lo < hi {
            sites.push(RelocationSite {
                offset: lo - start,
                width: hi - lo,
                r_type,
            });
        }
    }
    sites.sort_by_key(|s| s.offset);
    Ok(sites)
}

/// Extracts the named function's bytes and builds its wildcard mask.
pub fn function_bytes(data: &[u8], symbol: &str, origin_profile: &str) -> Result<ByteListing, ToolchainError> {
    let file = parse(data)?;
    if file.kind() != ObjectKind::Relocatable {
        warn!(symbol, "extracting bytes from a non-relocatable file; mask will be empty");
    }
    let sym = find_symbol(&file, symbol)?;
    if sym.size() == 0 {
        return Err(ToolchainError::ZeroSizeSymbol(symbol.to_string()));
    }
    let section = file
        .section_by_index(sym.section_index().expect("checked by find_symbol"))
        .map_err(|e| ToolchainError::BadObject(e.to_string()))?;
    let contents = section.data().map_err(|e| ToolchainError::BadObject(e.to_string()))?;
    let start = (sym.address() - section.address()) as usize;
    let end = start + sym.size() as usize;
    let bytes = contents
        .get(start..end)
        .ok_or_else(|| ToolchainError::BadObject(format!("`{symbol}` extends past its section")))?
        .to_vec();

    let mut wildcard_mask = vec![false; bytes.len()];
    for site in relocation_sites(data, symbol)? {
        let lo = site.offset as usize;
        wildcard_mask[lo..lo + site.width as usize].fill(true);
    }
    Ok(ByteListing {
        bytes,
        wildcard_mask,
        symbol: symbol.to_string(),
        origin_profile: origin_profile.to_string(),
    })
}
