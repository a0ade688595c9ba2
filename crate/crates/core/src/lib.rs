//! Layer-wise probing of speech representations.
//!
//! The crate reads per-utterance hidden-state dumps with their forced
//! alignments, pools phone and word segments, and scores every layer two
//! ways: projection-weighted CCA against one-hot phoneme labels, and linear
//! ridge probes against word prominence and boundary targets. Supporting
//! modules label word prosody with a wavelet analysis, perturb speaker voice
//! in waveforms, and embed pooled vectors in 2-D with exact t-SNE.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cca;
pub mod dumpio;
pub mod embed;
pub mod error;
pub mod perturb;
pub mod pooling;
pub mod probes;
pub mod prosody;
pub mod rng;
pub mod synth;
pub mod table;

pub use error::{Error, Result};

/// The guide's chapters, so `cargo test --doc` runs their snippets.
#[cfg(doctest)]
pub mod book {
    macro_rules! chapter {
        ($name:ident, $file:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            pub mod $name {}
        };
    }
    chapter!(introduction, "introduction.md");
    chapter!(dataset, "dataset.md");
    chapter!(pooling, "pooling.md");
    chapter!(cca, "cca.md");
    chapter!(probes, "probes.md");
    chapter!(prosody, "prosody.md");
    chapter!(perturb, "perturb.md");
    chapter!(embed, "embed.md");
    chapter!(cli, "cli.md");
    chapter!(reproducibility, "reproducibility.md");
}
