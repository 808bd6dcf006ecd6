//! Candidate-search decompilation: sample many decompilations of a binary
//! function, recompile and run each against the original, rank them, and
//! report correctness and similarity metrics.

pub mod analysis;
pub mod corpus;
pub mod generation;
pub mod metrics;
pub mod pipeline;
pub mod process;
pub mod rerank;
pub mod sandbox;
pub mod toolchain;

pub use corpus::{load_tasks, DecompilationTask, RunManifest, RunStore, TaskSet};
pub use generation::Candidate;
pub use rerank::{PolicyId, RankedSelection};
pub use sandbox::{ExecutionRecord, Verdict};
pub use toolchain::{ByteListing, CompilerProfile, DisassemblyListing};

/// `Vec<u8>` as a standard base64 string.
pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text.as_bytes()).map_err(serde::de::Error::custom)
    }
}

/// `Duration` as fractional seconds.
pub(crate) mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}
