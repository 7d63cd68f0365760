//! Length-prefixed frames.
//!
//! Layout: `len: u32 BE | type: u8 | body [| 0x00 | binary]`, where `len`
//! counts everything after the length field. Bodies are JSON text and never
//! contain a raw NUL, so the first NUL separates the optional binary section.

use std::fmt;
use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

pub const MAX_FRAME: usize = 1 << 20;
pub const BLOB_CHUNK: usize = 64 * 1024;
pub const HEADER_LEN: usize = 5;

macro_rules! msg_types {
    ($($name:ident = $byte:literal),* $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        #[allow(non_camel_case_types, clippy::upper_case_acronyms)]
        pub enum MsgType {
            $($name = $byte),*
        }

        impl MsgType {
            pub const ALL: &'static [MsgType] = &[$(MsgType::$name),*];

            pub fn from_byte(b: u8) -> Option<MsgType> {
                match b {
                    $($byte => Some(MsgType::$name),)*
                    _ => None,
                }
            }

            pub fn name(self) -> &'static str {
                match self {
                    $(MsgType::$name => stringify!($name),)*
                }
            }
        }
    };
}

msg_types! {
    HELLO = 0x01,
    ANNOUNCE = 0x02,
    RETRACT = 0x03,
    LIST = 0x04,
    CHALLENGE = 0x05,
    PROOF = 0x06,
    EXEC_REQUEST = 0x07,
    BLOB_CHUNK = 0x08,
    LOG_CHUNK = 0x09,
    EXEC_RESULT = 0x0A,
    DOC_REQUEST = 0x0B,
    DOC_RESPONSE = 0x0C,
    PING = 0x0D,
    PONG = 0x0E,
    ERROR = 0x0F,
    // LAN only: never accepted by an uplink relay.
    RUN_SUBMIT = 0x20,
    RUN_ACCEPTED = 0x21,
    RUN_EVENT = 0x22,
    DATA_QUERY = 0x23,
    DATA_RESPONSE = 0x24,
}

impl MsgType {
    pub fn byte(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("frame of {0} bytes exceeds the 1 MiB limit")]
    TooLarge(usize),
    #[error("truncated frame")]
    Truncated,
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("malformed {ty} body: {message}")]
    Malformed { ty: MsgType, message: String },
    #[error("connection closed")]
    Closed,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl FrameError {
    pub fn code(&self) -> &'static str {
        match self {
            FrameError::TooLarge(_) => "FRAME_TOO_LARGE",
            FrameError::Truncated => "TRUNCATED",
            FrameError::UnknownType(_) => "UNKNOWN_TYPE",
            FrameError::Malformed { .. } => "MALFORMED",
            FrameError::Closed => "CLOSED",
            FrameError::Io(_) => "TRANSPORT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub ty: MsgType,
    pub body: Vec<u8>,
    pub binary: Option<Vec<u8>>,
}

impl Frame {
    pub fn new(ty: MsgType, body: Vec<u8>) -> Self {
        Frame { ty, body, binary: None }
    }

    pub fn json<T: Serialize>(ty: MsgType, body: &T) -> Self {
        Frame::new(ty, serde_json::to_vec(body).expect("message bodies serialize"))
    }

    pub fn with_binary(mut self, binary: Vec<u8>) -> Self {
        self.binary = Some(binary);
        self
    }

    pub fn parse<T: DeserializeOwned>(&self) -> Result<T, FrameError> {
        serde_json::from_slice(&self.body).map_err(|e| FrameError::Malformed { ty: self.ty, message: e.to_string() })
    }

    /// Size of the payload counted by the length field.
    pub fn payload_len(&self) -> usize {
        1 + self.body.len() + self.binary.as_ref().map_or(0, |b| b.len() + 1)
    }

    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        encode_raw(self.ty.byte(), &self.body, self.binary.as_deref())
    }
}

/// Encodes a frame with an arbitrary type byte.
pub fn encode_raw(ty: u8, body: &[u8], binary: Option<&[u8]>) -> Result<Vec<u8>, FrameError> {
    let len = 1 + body.len() + binary.map_or(0, |b| b.len() + 1);
    if len > MAX_FRAME {
        return Err(FrameError::TooLarge(len));
    }
    let mut out = Vec::with_capacity(4 + len);
    out.extend_from_slice(&(len as u32).to_be_bytes());
    out.push(ty);
    out.extend_from_slice(body);
    if let Some(b) = binary {
        out.push(0);
        out.extend_from_slice(b);
    }
    Ok(out)
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, FrameError> {
    frame.encode()
}

/// Decodes one frame from the front of `bytes`, returning it with the number
/// of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize), FrameError> {
    if bytes.len() < 4 {
        return Err(FrameError::Truncated);
    }
    let len = declared_len(bytes[..4].try_into().unwrap())?;
    if bytes.len() < 4 + len {
        return Err(FrameError::Truncated);
    }
    Ok((split_payload(&bytes[4..4 + len])?, 4 + len))
}

fn declared_len(header: [u8; 4]) -> Result<usize, FrameError> {
    let len = u32::from_be_bytes(header) as usize;
    if len > MAX_FRAME {
        return Err(FrameError::TooLarge(len));
    }
    if len == 0 {
        return Err(FrameError::Truncated);
    }
    Ok(len)
}

fn split_payload(payload: &[u8]) -> Result<Frame, FrameError> {
    let ty = MsgType::from_byte(payload[0]).ok_or(FrameError::UnknownType(payload[0]))?;
    let rest = &payload[1..];
    Ok(match rest.iter().position(|&b| b == 0) {
        Some(i) => Frame { ty, body: rest[..i].to_vec(), binary: Some(rest[i + 1..].to_vec()) },
        None => Frame { ty, body: rest.to_vec(), binary: None },
    })
}

/// Reads one frame. The length is checked before any payload is buffered,
/// and the buffer grows only as bytes actually arrive.
pub fn read_frame(r: &mut impl Read) -> Result<Frame, FrameError> {
    let mut header = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Err(FrameError::Closed),
            Ok(0) => return Err(FrameError::Truncated),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = declared_len(header)?;
    let mut payload = Vec::with_capacity(len.min(BLOB_CHUNK));
    r.take(len as u64).read_to_end(&mut payload)?;
    if payload.len() < len {
        return Err(FrameError::Truncated);
    }
    split_payload(&payload)
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<(), FrameError> {
    w.write_all(&frame.encode()?)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_hello_is_five_bytes() {
        let f = Frame::new(MsgType::HELLO, vec![]);
        let bytes = f.encode().unwrap();
        assert_eq!(bytes, [0, 0, 0, 1, 1]);
        assert_eq!(decode_frame(&bytes).unwrap(), (f, 5));
    }

    #[test]
    fn binary_section_roundtrips() {
        let f = Frame::new(MsgType::BLOB_CHUNK, b"{}".to_vec()).with_binary(vec![0, 1, 2, 0]);
        let bytes = f.encode().unwrap();
        assert_eq!(read_frame(&mut bytes.as_slice()).unwrap(), f);
    }

    #[test]
    fn oversize_rejected_before_buffering() {
        let mut bytes = ((MAX_FRAME + 1) as u32).to_be_bytes().to_vec();
        bytes.push(1);
        assert!(matches!(decode_frame(&bytes), Err(FrameError::TooLarge(_))));
        assert!(matches!(read_frame(&mut bytes.as_slice()), Err(FrameError::TooLarge(_))));
        assert!(matches!(encode_raw(1, &vec![b'a'; MAX_FRAME], None), Err(FrameError::TooLarge(_))));
    }

    #[test]
    fn truncated_and_unknown() {
        let bytes = Frame::new(MsgType::PING, b"{\"req\":1}".to_vec()).encode().unwrap();
        assert!(matches!(decode_frame(&bytes[..bytes.len() - 1]), Err(FrameError::Truncated)));
        assert!(matches!(read_frame(&mut &bytes[..bytes.len() - 1]), Err(FrameError::Truncated)));
        assert!(matches!(read_frame(&mut &bytes[..2]), Err(FrameError::Truncated)));
        assert!(matches!(read_frame(&mut &[][..]), Err(FrameError::Closed)));
        let raw = encode_raw(0x7f, b"{}", None).unwrap();
        assert!(matches!(decode_frame(&raw), Err(FrameError::UnknownType(0x7f))));
    }

    #[test]
    fn type_table_is_consistent() {
        for t in MsgType::ALL {
            assert_eq!(MsgType::from_byte(t.byte()), Some(*t));
        }
        assert_eq!((0..=255u8).filter_map(MsgType::from_byte).count(), MsgType::ALL.len());
    }
}
