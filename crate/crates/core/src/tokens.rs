//! Reserved vocabulary ids shared by the corpus and the model.

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const N_RESERVED: usize = 4;

pub const RESERVED: [&str; N_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Decoder start token announcing the language to generate.
pub fn lang_start(lang: usize) -> usize {
    N_RESERVED + lang
}

pub fn lang_start_surface(lang: usize) -> String {
    format!("<2l{lang}>")
}
