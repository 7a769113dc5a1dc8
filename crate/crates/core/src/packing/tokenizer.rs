/// Byte-level tokenizer: ids 0..=255 are raw UTF-8 bytes, followed by four
/// special ids. Round-trips every string exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub const BOS: u32 = 256;
    pub const EOS: u32 = 257;
    pub const IMG: u32 = 258;
    pub const PAD: u32 = 259;
    pub const VOCAB_SIZE: usize = 260;

    pub fn new() -> Self {
        Tokenizer
    }

    pub fn vocab_size(&self) -> usize {
        Self::VOCAB_SIZE
    }

    pub fn is_byte(id: u32) -> bool {
        id < 256
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    pub fn count(&self, text: &str) -> usize {
        text.len()
    }

    /// Decode byte ids, skipping specials. Invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&t| Self::is_byte(t))
            .map(|&t| t as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn token_string(&self, id: u32) -> String {
        match id {
            Self::BOS => "<bos>".into(),
            Self::EOS => "<eos>".into(),
            Self::IMG => "<img>".into(),
            Self::PAD => "<pad>".into(),
            b if b < 256 => format!("<0x{b:02X}>"),
            other => format!("<unk:{other}>"),
        }
    }

    /// Digest of the full vocabulary, stamped into shards.
    pub fn vocab_hash(&self) -> [u8; 32] {
        let mut desc = String::from("byte-level-v1");
        for id in 0..Self::VOCAB_SIZE as u32 {
            desc.push(';');
            desc.push_str(&self.token_string(id));
        }
        crate::sha256(desc.as_bytes())
    }
}
