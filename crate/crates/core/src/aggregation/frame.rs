//! Binary frame codec.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "IGRD"
//!      4     1  version (1)
//!      5     1  width: 8 | 32 signed integers, 64 = IEEE f64 (uncompressed steps)
//!      6     2  reserved, zero
//!      8     8  iteration
//!     16     4  worker_id
//!     20     4  block_count
//!     24     8  length (number of payload elements)
//!     32     -  payload, length * width / 8 bytes
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::rounding::{IntVector, IntWidth};

pub const MAGIC: [u8; 4] = *b"IGRD";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 32;
/// `worker_id` stamped on frames produced by an aggregator.
pub const AGGREGATOR_ID: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported width {0}")]
    BadWidth(u8),
    #[error("reserved field must be zero, got {0:#06x}")]
    Reserved(u16),
    #[error("truncated {field}: need {needed} bytes, have {available}")]
    Truncated { field: &'static str, needed: usize, available: usize },
    #[error("trailing bytes after payload: {0}")]
    Trailing(usize),
    #[error("payload length {0} is too large")]
    TooLarge(u64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Int(IntVector),
    Float(Vec<f64>),
}

impl Payload {
    pub fn width_code(&self) -> u8 {
        match self {
            Payload::Int(v) => v.width().bits(),
            Payload::Float(_) => 64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::Int(v) => v.len(),
            Payload::Float(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn element_bytes(width_code: u8) -> usize {
        width_code as usize / 8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub iteration: u64,
    pub worker_id: u32,
    pub block_count: u32,
    pub payload: Payload,
}

impl Frame {
    pub fn int(iteration: u64, worker_id: u32, block_count: u32, values: IntVector) -> Self {
        Self { iteration, worker_id, block_count, payload: Payload::Int(values) }
    }

    pub fn float(iteration: u64, worker_id: u32, values: Vec<f64>) -> Self {
        Self { iteration, worker_id, block_count: 0, payload: Payload::Float(values) }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len() * Payload::element_bytes(self.payload.width_code())
    }
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(frame.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame.payload.width_code());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&frame.iteration.to_le_bytes());
    out.extend_from_slice(&frame.worker_id.to_le_bytes());
    out.extend_from_slice(&frame.block_count.to_le_bytes());
    out.extend_from_slice(&(frame.payload.len() as u64).to_le_bytes());
    match &frame.payload {
        Payload::Int(v) => match v.width() {
            IntWidth::W8 => out.extend(v.values().iter().map(|&x| x as i8 as u8)),
            IntWidth::W32 => {
                for &x in v.values() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        },
        Payload::Float(v) => {
            for &x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

struct Header {
    width_code: u8,
    iteration: u64,
    worker_id: u32,
    block_count: u32,
    length: u64,
}

fn take<'a>(buf: &'a [u8], at: usize, len: usize, field: &'static str) -> Result<&'a [u8], FrameError> {
    buf.get(at..at + len).ok_or(FrameError::Truncated {
        field,
        needed: at + len,
        available: buf.len(),
    })
}

fn parse_header(buf: &[u8]) -> Result<Header, FrameError> {
    let magic: [u8; 4] = take(buf, 0, 4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    let version = take(buf, 4, 1, "version")?[0];
    if version != VERSION {
        return Err(FrameError::UnsupportedVersion(version));
    }
    let width_code = take(buf, 5, 1, "width")?[0];
    if !matches!(width_code, 8 | 32 | 64) {
        return Err(FrameError::BadWidth(width_code));
    }
    let reserved = u16::from_le_bytes(take(buf, 6, 2, "reserved")?.try_into().unwrap());
    if reserved != 0 {
        return Err(FrameError::Reserved(reserved));
    }
    let iteration = u64::from_le_bytes(take(buf, 8, 8, "iteration")?.try_into().unwrap());
    let worker_id = u32::from_le_bytes(take(buf, 16, 4, "worker_id")?.try_into().unwrap());
    let block_count = u32::from_le_bytes(take(buf, 20, 4, "block_count")?.try_into().unwrap());
    let length = u64::from_le_bytes(take(buf, 24, 8, "length")?.try_into().unwrap());
    Ok(Header { width_code, iteration, worker_id, block_count, length })
}

fn payload_bytes(h: &Header) -> Result<usize, FrameError> {
    let elem = Payload::element_bytes(h.width_code) as u64;
    // 1 GiB cap keeps a corrupt length from triggering a huge allocation.
    match h.length.checked_mul(elem) {
        Some(b) if b <= 1 << 30 => Ok(b as usize),
        _ => Err(FrameError::TooLarge(h.length)),
    }
}

fn parse_payload(h: &Header, bytes: &[u8]) -> Payload {
    match h.width_code {
        8 => Payload::Int(
            IntVector::new(IntWidth::W8, bytes.iter().map(|&b| b as i8 as i64).collect())
                .expect("i8 values always fit"),
        ),
        32 => Payload::Int(
            IntVector::new(
                IntWidth::W32,
                bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap()) as i64).collect(),
            )
            .expect("i32 values always fit"),
        ),
        _ => Payload::Float(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
    }
}

pub fn decode_frame(buf: &[u8]) -> Result<Frame, FrameError> {
    let h = parse_header(buf)?;
    let nbytes = payload_bytes(&h)?;
    let body = take(buf, HEADER_LEN, nbytes, "payload")?;
    if buf.len() > HEADER_LEN + nbytes {
        return Err(FrameError::Trailing(buf.len() - HEADER_LEN - nbytes));
    }
    Ok(Frame {
        iteration: h.iteration,
        worker_id: h.worker_id,
        block_count: h.block_count,
        payload: parse_payload(&h, body),
    })
}

/// Reads one frame from a stream. `Ok(None)` on a clean end of stream
/// before any header byte.
pub fn read_frame<R: Read>(reader: &mut R) -> Result<Option<Frame>, FrameError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => {
                return Err(FrameError::Truncated { field: "header", needed: HEADER_LEN, available: filled });
            }
            Ok(k) => filled += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let h = parse_header(&header)?;
    let mut body = vec![0u8; payload_bytes(&h)?];
    reader.read_exact(&mut body).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            FrameError::Truncated { field: "payload", needed: body.len(), available: 0 }
        } else {
            FrameError::Io(e)
        }
    })?;
    Ok(Some(Frame {
        iteration: h.iteration,
        worker_id: h.worker_id,
        block_count: h.block_count,
        payload: parse_payload(&h, &body),
    }))
}

pub fn write_frame<W: Write>(writer: &mut W, frame: &Frame) -> io::Result<()> {
    writer.write_all(&encode_frame(frame))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ints(width: IntWidth, v: &[i64]) -> IntVector {
        IntVector::new(width, v.to_vec()).unwrap()
    }

    #[test]
    fn empty_payload_round_trips() {
        let f = Frame::int(0, 0, 1, ints(IntWidth::W8, &[]));
        let bytes = encode_frame(&f);
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(decode_frame(&bytes).unwrap(), f);
    }

    #[test]
    fn int8_twos_complement() {
        let f = Frame::int(0, 0, 1, ints(IntWidth::W8, &[1, -1]));
        let bytes = encode_frame(&f);
        assert_eq!(&bytes[HEADER_LEN..], &[0x01, 0xFF]);
    }

    #[test]
    fn header_is_32_bytes() {
        let f = Frame::int(5, 2, 1, ints(IntWidth::W32, &[1, 2, 3]));
        let bytes = encode_frame(&f);
        assert_eq!(bytes.len(), HEADER_LEN + 12);
        assert_eq!(&bytes[24..32], &3u64.to_le_bytes());
    }

    #[test]
    fn decode_errors_name_field() {
        let f = Frame::int(1, 1, 1, ints(IntWidth::W32, &[7, 8]));
        let mut bytes = encode_frame(&f);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_frame(&bad), Err(FrameError::BadMagic(_))));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_frame(&bad), Err(FrameError::UnsupportedVersion(9))));

        let mut bad = bytes.clone();
        bad[5] = 16;
        assert!(matches!(decode_frame(&bad), Err(FrameError::BadWidth(16))));

        let err = decode_frame(&bytes[..HEADER_LEN + 5]).unwrap_err();
        assert!(matches!(err, FrameError::Truncated { field: "payload", .. }));
        assert!(err.to_string().contains("payload"));

        let err = decode_frame(&bytes[..20]).unwrap_err();
        assert!(matches!(err, FrameError::Truncated { field: "block_count", .. }));

        bytes.push(0);
        assert!(matches!(decode_frame(&bytes), Err(FrameError::Trailing(1))));
    }

    #[test]
    fn stream_reader_handles_eof() {
        let a = Frame::int(3, 0, 2, ints(IntWidth::W8, &[5, -5, 0]));
        let b = Frame::float(3, 1, vec![0.5, -2.25]);
        let mut buf = encode_frame(&a);
        buf.extend(encode_frame(&b));
        let mut cur = io::Cursor::new(buf);
        assert_eq!(read_frame(&mut cur).unwrap().unwrap(), a);
        assert_eq!(read_frame(&mut cur).unwrap().unwrap(), b);
        assert!(read_frame(&mut cur).unwrap().is_none());

        let mut short = io::Cursor::new(encode_frame(&a)[..10].to_vec());
        assert!(matches!(read_frame(&mut short), Err(FrameError::Truncated { field: "header", .. })));
    }

    #[test]
    fn huge_length_rejected() {
        let f = Frame::int(0, 0, 0, ints(IntWidth::W32, &[]));
        let mut bytes = encode_frame(&f);
        bytes[24..32].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode_frame(&bytes), Err(FrameError::TooLarge(_))));
    }
}
