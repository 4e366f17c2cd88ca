//! Command-line front end: strict configs, run directories, IDX loading.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod idx;
pub mod output;
pub mod run;

pub use config::{ExperimentConfig, Kind};
pub use run::{run, RunOutcome};

/// Named, independent RNG streams derived from one base seed.
pub mod seeds {
    pub use bilevel_kfac::rng::{fnv1a, stream, streams, StreamRng};

    /// Streams for `labels`, refusing duplicate labels and labels whose
    /// stream ids collide.
    pub fn seed_streams<S: AsRef<str>>(base: u64, labels: &[S]) -> Result<Vec<StreamRng>, String> {
        let mut seen = std::collections::HashMap::new();
        for l in labels {
            let id = fnv1a(l.as_ref().as_bytes());
            if let Some(prev) = seen.insert(id, l.as_ref().to_string()) {
                return Err(format!("stream labels `{prev}` and `{}` map to the same id", l.as_ref()));
            }
        }
        Ok(streams(base, labels))
    }
}
