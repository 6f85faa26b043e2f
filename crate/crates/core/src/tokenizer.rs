//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by three
//! reserved ids for the diffusion mask token, end-of-document, and padding.

/// Vocabulary size including reserved ids.
pub const VOCAB_SIZE: usize = 259;
/// Absorbing mask token used by the diffusion corruption process.
pub const MASK_ID: u32 = 256;
/// End-of-document separator inserted by the packer.
pub const EOD_ID: u32 = 257;
/// Padding (reserved; packed batches are always full, but the id is part of
/// the vocabulary so checkpoints agree on shapes).
pub const PAD_ID: u32 = 258;

/// Encode text as one token per byte.
pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Encode raw bytes (identical to [`encode`] but without requiring UTF-8).
pub fn encode_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| u32::from(b)).collect()
}

/// Decode tokens back to text. Byte tokens are decoded lossily as UTF-8;
/// reserved ids render as readable markers so decoded samples stay printable.
pub fn decode(tokens: &[u32]) -> String {
    let mut out = String::new();
    let mut bytes: Vec<u8> = Vec::new();
    let flush = |bytes: &mut Vec<u8>, out: &mut String| {
        if !bytes.is_empty() {
            out.push_str(&String::from_utf8_lossy(bytes));
            bytes.clear();
        }
    };
    for &t in tokens {
        match t {
            0..=255 => bytes.push(t as u8),
            MASK_ID => {
                flush(&mut bytes, &mut out);
                out.push_str("<mask>");
            }
            EOD_ID => {
                flush(&mut bytes, &mut out);
                out.push_str("<eod>");
            }
            PAD_ID => {
                flush(&mut bytes, &mut out);
                out.push_str("<pad>");
            }
            other => {
                flush(&mut bytes, &mut out);
                out.push_str(&format!("<invalid:{other}>"));
            }
        }
    }
    flush(&mut bytes, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_sit_directly_above_bytes() {
        assert_eq!(VOCAB_SIZE, 259);
        assert_eq!(MASK_ID, 256);
        assert_eq!(EOD_ID, 257);
        assert_eq!(PAD_ID, 258);
    }

    #[test]
    fn encode_decode_round_trips_ascii() {
        let text = "The secret passkey is 427193.";
        let toks = encode(text);
        assert_eq!(toks.len(), text.len());
        assert!(toks.iter().all(|&t| t < 256));
        assert_eq!(decode(&toks), text);
    }

    #[test]
    fn decode_renders_reserved_ids() {
        let toks = vec![104, 105, MASK_ID, EOD_ID, 33];
        assert_eq!(decode(&toks), "hi<mask><eod>!");
    }
}
