//! Byte-level tokenizer: ids `0..=255` are raw bytes, followed by three
//! specials.

use crate::error::{Error, Result};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const VOCAB_SIZE: usize = 259;

/// `[BOS, bytes.., EOS]`. Empty text is rejected.
pub fn encode(text: &str) -> Result<Vec<usize>> {
    if text.is_empty() {
        return Err(Error::InvalidArgument("empty caption".into()));
    }
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(BOS);
    ids.extend(text.bytes().map(usize::from));
    ids.push(EOS);
    Ok(ids)
}

/// `[BOS, bytes..]` with no terminator, for generation prompts.
pub fn encode_prompt(text: &str) -> Vec<usize> {
    std::iter::once(BOS).chain(text.bytes().map(usize::from)).collect()
}

/// Decodes byte ids, stopping at the first EOS and skipping other specials.
pub fn decode(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .take_while(|&&i| i != EOS)
        .filter_map(|&i| u8::try_from(i).ok())
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let ids = encode("red square top left").unwrap();
        assert_eq!(ids[0], BOS);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(ids.len(), 21);
        assert_eq!(decode(&ids[1..]), "red square top left");
        assert!(encode("").is_err());
    }
}
