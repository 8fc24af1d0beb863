//! A single weight-shared transformer that serves as encoder and decoder for
//! both translation directions and both generation orders, together with the
//! tooling around it: frequency-aligned shared vocabularies, direction-tagged
//! data preparation, training, beam decoding (fixed, mixed and joint), BLEU
//! evaluation, and analytic parameter accounting.

pub mod checkpoint;
pub mod counting;
pub mod data;
pub mod decode;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;
pub mod vocab;
