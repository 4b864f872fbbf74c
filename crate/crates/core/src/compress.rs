// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! LZSS compression for script transport.
//!
//! The bit stream follows the heatshrink layout: a `1` bit introduces an 8-bit
//! literal, a `0` bit introduces a back-reference made of `window_bits` bits of
//! `distance - 1` and `lookahead_bits` bits of `length - 1`. Bits are packed
//! most significant first and the last byte is zero-padded.
//!
//! The container wraps the stream in a 10-byte header:
//!
//! ```text
//! 0..4   magic "RBF1"
//! 4..8   original length, u32 little-endian
//! 8      window_bits
//! 9      lookahead_bits
//! 10..   payload
//! ```

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"RBF1";
pub const HEADER_SIZE: usize = 10;
pub const MIN_WINDOW_BITS: u8 = 4;
pub const MAX_WINDOW_BITS: u8 = 15;
pub const MIN_LOOKAHEAD_BITS: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Params {
    pub window_bits: u8,
    pub lookahead_bits: u8,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            window_bits: 8,
            lookahead_bits: 4,
        }
    }
}

impl Params {
    pub fn new(window_bits: u8, lookahead_bits: u8) -> Result<Self, ParameterError> {
        let params = Params {
            window_bits,
            lookahead_bits,
        };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<(), ParameterError> {
        if !(MIN_WINDOW_BITS..=MAX_WINDOW_BITS).contains(&self.window_bits) {
            return Err(ParameterError::WindowBits(self.window_bits));
        }
        if self.lookahead_bits < MIN_LOOKAHEAD_BITS || self.lookahead_bits >= self.window_bits {
            return Err(ParameterError::LookaheadBits {
                lookahead_bits: self.lookahead_bits,
                window_bits: self.window_bits,
            });
        }
        Ok(())
    }

    fn window_size(&self) -> usize {
        1 << self.window_bits
    }

    fn max_match(&self) -> usize {
        1 << self.lookahead_bits
    }

    /// Shortest match worth a back-reference: one that costs fewer bits than
    /// the equivalent literals.
    fn min_match(&self) -> usize {
        let backref_bits = 1 + self.window_bits as usize + self.lookahead_bits as usize;
        backref_bits / 9 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParameterError {
    #[error("window_bits {0} outside {MIN_WINDOW_BITS}..={MAX_WINDOW_BITS}")]
    WindowBits(u8),
    #[error("lookahead_bits {lookahead_bits} must be in {MIN_LOOKAHEAD_BITS}..{window_bits}")]
    LookaheadBits { lookahead_bits: u8, window_bits: u8 },
    #[error("input is empty")]
    EmptyInput,
    #[error("input of {0} bytes exceeds the 4 GiB container limit")]
    TooLarge(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("container shorter than its {HEADER_SIZE}-byte header")]
    TruncatedHeader,
    #[error(transparent)]
    Parameters(#[from] ParameterError),
    #[error("payload ends after {produced} of {expected} bytes")]
    Truncated { produced: usize, expected: usize },
    #[error("back-reference distance {distance} exceeds the {available} bytes decoded so far")]
    BadReference { distance: usize, available: usize },
    #[error("decoded data does not match the recorded length {expected}")]
    LengthMismatch { expected: usize },
}

/// A compressed script with its header fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedScript {
    pub original_length: u32,
    pub params: Params,
    pub payload: Vec<u8>,
}

impl CompressedScript {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_SIZE + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.original_length.to_le_bytes());
        out.push(self.params.window_bits);
        out.push(self.params.lookahead_bits);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(FormatError::BadMagic(
                bytes[..4].try_into().expect("4 bytes"),
            ));
        }
        if bytes.len() < HEADER_SIZE {
            return Err(FormatError::TruncatedHeader);
        }
        let original_length = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        let params = Params::new(bytes[8], bytes[9])?;
        Ok(CompressedScript {
            original_length,
            params,
            payload: bytes[HEADER_SIZE..].to_vec(),
        })
    }

    /// Total container size in bytes, header included.
    pub fn encoded_len(&self) -> usize {
        HEADER_SIZE + self.payload.len()
    }
}

/// Whether `bytes` starts with the container magic.
pub fn is_compressed(bytes: &[u8]) -> bool {
    bytes.starts_with(&MAGIC)
}

struct BitWriter {
    out: Vec<u8>,
    acc: u32,
    used: u32,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter {
            out: Vec::new(),
            acc: 0,
            used: 0,
        }
    }

    fn push(&mut self, value: u32, bits: u32) {
        for i in (0..bits).rev() {
            self.acc = (self.acc << 1) | ((value >> i) & 1);
            self.used += 1;
            if self.used == 8 {
                self.out.push(self.acc as u8);
                self.acc = 0;
                self.used = 0;
            }
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.used > 0 {
            self.out.push((self.acc << (8 - self.used)) as u8);
        }
        self.out
    }
}

struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(data: &'a [u8]) -> Self {
        BitReader { data, pos: 0 }
    }

    fn read(&mut self, bits: u32) -> Option<u32> {
        let mut value = 0u32;
        for _ in 0..bits {
            let byte = *self.data.get(self.pos / 8)?;
            let bit = (byte >> (7 - self.pos % 8)) & 1;
            value = (value << 1) | bit as u32;
            self.pos += 1;
        }
        Some(value)
    }
}

/// Incremental compressor. Feeding input in chunks produces the same stream as
/// a single call to [`compress`].
pub struct Encoder {
    params: Params,
    buf: Vec<u8>,
    // absolute stream position of buf[0]
    buf_start: usize,
    // absolute position of the next byte to encode
    pos: usize,
    writer: BitWriter,
}

impl Encoder {
    pub fn new(params: Params) -> Result<Self, ParameterError> {
        params.validate()?;
        Ok(Encoder {
            params,
            buf: Vec::new(),
            buf_start: 0,
            pos: 0,
            writer: BitWriter::new(),
        })
    }

    pub fn push(&mut self, chunk: &[u8]) {
        self.buf.extend_from_slice(chunk);
        let max_match = self.params.max_match();
        while self.buf_start + self.buf.len() - self.pos >= max_match {
            self.encode_one();
        }
        self.trim();
    }

    /// Encodes the remaining input and returns the container.
    pub fn finish(mut self) -> Result<CompressedScript, ParameterError> {
        while self.pos < self.buf_start + self.buf.len() {
            self.encode_one();
        }
        let total = self.pos;
        if total == 0 {
            return Err(ParameterError::EmptyInput);
        }
        let original_length = u32::try_from(total).map_err(|_| ParameterError::TooLarge(total))?;
        Ok(CompressedScript {
            original_length,
            params: self.params,
            payload: self.writer.finish(),
        })
    }

    fn trim(&mut self) {
        let keep_from = self.pos.saturating_sub(self.params.window_size());
        if keep_from > self.buf_start + 4096 {
            self.buf.drain(..keep_from - self.buf_start);
            self.buf_start = keep_from;
        }
    }

    fn encode_one(&mut self) {
        let cur = self.pos - self.buf_start;
        let remaining = self.buf.len() - cur;
        let limit = remaining.min(self.params.max_match());
        let window_start = cur.saturating_sub(self.params.window_size());

        let mut best_len = 0;
        let mut best_dist = 0;
        // Nearest candidates first so ties favour the shortest distance.
        for start in (window_start..cur).rev() {
            if self.buf[start] != self.buf[cur] {
                continue;
            }
            let len = self.buf[start..]
                .iter()
                .zip(&self.buf[cur..cur + limit])
                .take_while(|(a, b)| a == b)
                .count();
            if len > best_len {
                best_len = len;
                best_dist = cur - start;
                if len == limit {
                    break;
                }
            }
        }

        if best_len >= self.params.min_match() {
            self.writer.push(0, 1);
            self.writer
                .push((best_dist - 1) as u32, self.params.window_bits as u32);
            self.writer
                .push((best_len - 1) as u32, self.params.lookahead_bits as u32);
            self.pos += best_len;
        } else {
            self.writer.push(1, 1);
            self.writer.push(self.buf[cur] as u32, 8);
            self.pos += 1;
        }
    }
}

/// Compresses `data` in one shot.
pub fn compress(data: &[u8], params: Params) -> Result<CompressedScript, ParameterError> {
    if data.is_empty() {
        return Err(ParameterError::EmptyInput);
    }
    let mut encoder = Encoder::new(params)?;
    encoder.push(data);
    encoder.finish()
}

/// Restores the original bytes, checking the recorded length.
pub fn decompress(script: &CompressedScript) -> Result<Vec<u8>, FormatError> {
    let params = script.params;
    params.validate()?;
    let expected = script.original_length as usize;
    let mut out = Vec::with_capacity(expected);
    let mut reader = BitReader::new(&script.payload);
    let truncated = |produced| FormatError::Truncated { produced, expected };

    while out.len() < expected {
        let tag = reader.read(1).ok_or_else(|| truncated(out.len()))?;
        if tag == 1 {
            let byte = reader.read(8).ok_or_else(|| truncated(out.len()))?;
            out.push(byte as u8);
        } else {
            let distance = reader
                .read(params.window_bits as u32)
                .ok_or_else(|| truncated(out.len()))? as usize
                + 1;
            let length = reader
                .read(params.lookahead_bits as u32)
                .ok_or_else(|| truncated(out.len()))? as usize
                + 1;
            if distance > out.len() {
                return Err(FormatError::BadReference {
                    distance,
                    available: out.len(),
                });
            }
            if out.len() + length > expected {
                return Err(FormatError::LengthMismatch { expected });
            }
            let start = out.len() - distance;
            for i in 0..length {
                out.push(out[start + i]);
            }
        }
    }
    // Anything beyond the padding of the final byte is not ours.
    if script.payload.len() != reader.pos.div_ceil(8) {
        return Err(FormatError::LengthMismatch { expected });
    }
    Ok(out)
}

/// Parses and decompresses a container.
pub fn decompress_bytes(bytes: &[u8]) -> Result<Vec<u8>, FormatError> {
    decompress(&CompressedScript::from_bytes(bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_trip(data: &[u8], params: Params) {
        let cs = compress(data, params).unwrap();
        assert_eq!(cs.original_length as usize, data.len());
        assert_eq!(decompress(&cs).unwrap(), data);
        let bytes = cs.to_bytes();
        assert_eq!(decompress_bytes(&bytes).unwrap(), data);
    }

    #[test]
    fn round_trips() {
        round_trip(b"a", Params::default());
        round_trip(b"abababababababababab", Params::default());
        round_trip(&[0u8; 1000], Params::default());
        round_trip(
            b"the quick brown fox jumps over the lazy dog the quick",
            Params::new(4, 3).unwrap(),
        );
        round_trip(
            &(0..=255u8).cycle().take(5000).collect::<Vec<_>>(),
            Params::new(15, 14).unwrap(),
        );
    }

    #[test]
    fn redundant_exit_slots_compress_well() {
        let data: Vec<u8> = [0x95u8, 0, 0, 0, 0, 0, 0, 0].repeat(64);
        // With 4 lookahead bits a 13-bit reference covers at most 16 bytes, so
        // the defaults cannot go below ~10.2%; one more lookahead bit can.
        let cs = compress(&data, Params::new(8, 5).unwrap()).unwrap();
        assert!(
            cs.payload.len() * 10 < data.len(),
            "payload {} bytes",
            cs.payload.len()
        );
        assert_eq!(decompress(&cs).unwrap(), data);
        let cs = compress(&data, Params::default()).unwrap();
        assert!(
            cs.payload.len() * 100 <= data.len() * 11,
            "payload {} bytes",
            cs.payload.len()
        );
        assert_eq!(decompress(&cs).unwrap(), data);
    }

    #[test]
    fn parameter_checks() {
        assert_eq!(Params::new(3, 2), Err(ParameterError::WindowBits(3)));
        assert_eq!(Params::new(16, 4), Err(ParameterError::WindowBits(16)));
        assert!(matches!(
            Params::new(8, 8),
            Err(ParameterError::LookaheadBits { .. })
        ));
        assert!(matches!(
            Params::new(8, 2),
            Err(ParameterError::LookaheadBits { .. })
        ));
        assert_eq!(
            compress(&[], Params::default()),
            Err(ParameterError::EmptyInput)
        );
        let bad = Params {
            window_bits: 20,
            lookahead_bits: 4,
        };
        assert!(compress(b"x", bad).is_err());
    }

    #[test]
    fn min_match_break_even() {
        assert_eq!(Params::default().min_match(), 2);
        assert_eq!(Params::new(15, 14).unwrap().min_match(), 4);
    }

    #[test]
    fn corrupted_containers() {
        let data = b"hello hello hello hello".to_vec();
        let bytes = compress(&data, Params::default()).unwrap().to_bytes();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            decompress_bytes(&bad_magic),
            Err(FormatError::BadMagic(_))
        ));

        assert_eq!(
            decompress_bytes(&bytes[..6]),
            Err(FormatError::TruncatedHeader)
        );

        let truncated = &bytes[..bytes.len() - 2];
        assert!(matches!(
            decompress_bytes(truncated),
            Err(FormatError::Truncated { .. })
        ));

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(
            decompress_bytes(&trailing),
            Err(FormatError::LengthMismatch { .. })
        ));

        let mut longer = bytes.clone();
        longer[4] += 1;
        assert!(decompress_bytes(&longer).is_err());

        let mut bad_params = bytes.clone();
        bad_params[9] = 9;
        assert!(matches!(
            decompress_bytes(&bad_params),
            Err(FormatError::Parameters(_))
        ));
    }

    #[test]
    fn reference_before_start_is_rejected() {
        // tag 0, distance 1, length 1 with nothing decoded yet
        let cs = CompressedScript {
            original_length: 1,
            params: Params::default(),
            payload: vec![0x00, 0x00],
        };
        assert!(matches!(
            decompress(&cs),
            Err(FormatError::BadReference { .. })
        ));
    }

    #[test]
    fn chunked_encoding_matches_one_shot() {
        let data: Vec<u8> = (0..20_000u32)
            .map(|i| (i * 7 % 251) as u8 ^ (i / 300) as u8)
            .collect();
        let whole = compress(&data, Params::default()).unwrap();
        let mut enc = Encoder::new(Params::default()).unwrap();
        for chunk in data.chunks(37) {
            enc.push(chunk);
        }
        let chunked = enc.finish().unwrap();
        assert_eq!(decompress(&chunked).unwrap(), data);
        assert_eq!(chunked, whole);
    }
}
