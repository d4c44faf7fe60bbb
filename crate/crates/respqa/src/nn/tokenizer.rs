//! Character-level tokenizer over a 96-entry vocabulary: four specials
//! plus the printable ASCII range 0x20..=0x7B. Characters outside the
//! range map to UNK.

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const FIRST_CHAR: u8 = 0x20; // space
const LAST_CHAR: u8 = 0x7b; // '{'
const N_SPECIAL: usize = 4;

pub const VOCAB_SIZE: usize = N_SPECIAL + (LAST_CHAR - FIRST_CHAR + 1) as usize;

pub fn encode_char(c: char) -> usize {
    let b = c as u32;
    if (FIRST_CHAR as u32..=LAST_CHAR as u32).contains(&b) {
        N_SPECIAL + (b - FIRST_CHAR as u32) as usize
    } else {
        UNK
    }
}

pub fn encode(text: &str) -> Vec<usize> {
    text.chars().map(encode_char).collect()
}

/// Decode ids to text, stopping at EOS; specials produce nothing.
pub fn decode(ids: &[usize]) -> String {
    let mut out = String::new();
    for &id in ids {
        if id == EOS {
            break;
        }
        if id >= N_SPECIAL && id < VOCAB_SIZE {
            out.push((FIRST_CHAR + (id - N_SPECIAL) as u8) as char);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_is_96() {
        assert_eq!(VOCAB_SIZE, 96);
    }

    #[test]
    fn roundtrip_printable() {
        let s = "Answer: copd, severity 3 (FEV1 2.4)?";
        assert_eq!(decode(&encode(s)), s);
    }

    #[test]
    fn out_of_range_maps_to_unk() {
        assert_eq!(encode_char('~'), UNK);
        assert_eq!(encode_char('\u{00e9}'), UNK);
    }

    #[test]
    fn decode_stops_at_eos() {
        let mut ids = encode("yes");
        ids.push(EOS);
        ids.extend(encode("garbage"));
        assert_eq!(decode(&ids), "yes");
    }
}
