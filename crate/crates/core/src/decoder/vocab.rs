//! Byte-level vocabulary: ids 0-255 are raw bytes, then four specials.
//! Any UTF-8 text (Chinese included) round-trips losslessly at the byte
//! level, which keeps the bilingual data path tokenizer-free.

pub const BYTES: usize = 256;
pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
pub const SEP: usize = 259;
pub const VOCAB_SIZE: usize = 260;

pub fn encode(text: &str) -> Vec<usize> {
    text.bytes().map(|b| b as usize).collect()
}

pub fn encode_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Drop specials, keep raw bytes.
pub fn decode_bytes(ids: &[usize]) -> Vec<u8> {
    ids.iter().filter(|&&id| id < BYTES).map(|&id| id as u8).collect()
}

/// Lossy to text: generated byte streams are not guaranteed valid UTF-8.
pub fn decode_text(ids: &[usize]) -> String {
    String::from_utf8_lossy(&decode_bytes(ids)).into_owned()
}
