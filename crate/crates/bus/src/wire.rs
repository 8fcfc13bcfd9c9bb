//! Length-prefixed binary framing shared by brokers and clients.
//!
//! ```text
//! [u32-BE length][u8 version][u8 kind][fields...]
//! ```
//!
//! - **length** counts everything after itself (version + kind + fields).
//! - **strings** (names, topics, prefixes, reasons) are `[u16-BE len][utf-8]`.
//! - **payloads** are `[u32-BE len][bytes]` and are never inspected.
//!
//! | Tag  | Kind          | Fields                      |
//! |------|---------------|-----------------------------|
//! | 0x01 | REGISTER      | name                        |
//! | 0x02 | REG_OK        | (empty)                     |
//! | 0x03 | REG_ERR       | reason                      |
//! | 0x04 | PING          | (empty)                     |
//! | 0x05 | PONG          | (empty)                     |
//! | 0x06 | UNREGISTER    | (empty)                     |
//! | 0x07 | SEND          | dest, src, data             |
//! | 0x08 | DELIVER       | src, data                   |
//! | 0x09 | SUB           | prefix                      |
//! | 0x0A | UNSUB         | prefix                      |
//! | 0x0B | PUB           | topic, data                 |
//! | 0x0C | PUBDELIVER    | topic, src, data            |
//! | 0x0D | ROUTE_ADD     | name                        |
//! | 0x0E | ROUTE_DEL     | name                        |
//! | 0x0F | ERR_NO_ROUTE  | dest, src                   |
//! | 0x10 | BROKER_HELLO  | name                        |

use bytes::{BufMut, Bytes, BytesMut};
use thiserror::Error;

pub const PROTOCOL_VERSION: u8 = 0x01;

/// Size of the length prefix.
pub const HEADER_SIZE: usize = 4;

/// Upper bound on a whole encoded frame, prefix included.
pub const MAX_FRAME_SIZE: usize = 16 * 1024 * 1024;

/// Upper bound on any string field (u16 length).
pub const MAX_STRING_LEN: usize = u16::MAX as usize;

pub const TAG_REGISTER: u8 = 0x01;
pub const TAG_REG_OK: u8 = 0x02;
pub const TAG_REG_ERR: u8 = 0x03;
pub const TAG_PING: u8 = 0x04;
pub const TAG_PONG: u8 = 0x05;
pub const TAG_UNREGISTER: u8 = 0x06;
pub const TAG_SEND: u8 = 0x07;
pub const TAG_DELIVER: u8 = 0x08;
pub const TAG_SUB: u8 = 0x09;
pub const TAG_UNSUB: u8 = 0x0A;
pub const TAG_PUB: u8 = 0x0B;
pub const TAG_PUBDELIVER: u8 = 0x0C;
pub const TAG_ROUTE_ADD: u8 = 0x0D;
pub const TAG_ROUTE_DEL: u8 = 0x0E;
pub const TAG_ERR_NO_ROUTE: u8 = 0x0F;
pub const TAG_BROKER_HELLO: u8 = 0x10;

/// One protocol message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Register { name: String },
    RegOk,
    RegErr { reason: String },
    Ping,
    Pong,
    Unregister,
    Send { dest: String, src: String, data: Bytes },
    Deliver { src: String, data: Bytes },
    Sub { prefix: String },
    Unsub { prefix: String },
    Pub { topic: String, data: Bytes },
    PubDeliver { topic: String, src: String, data: Bytes },
    RouteAdd { name: String },
    RouteDel { name: String },
    /// `src` is the identity of the sender whose message could not be routed;
    /// brokers use it to steer the error back.
    ErrNoRoute { dest: String, src: String },
    /// First frame a child broker sends on its parent link.
    BrokerHello { name: String },
}

impl Frame {
    pub fn tag(&self) -> u8 {
        match self {
            Frame::Register { .. } => TAG_REGISTER,
            Frame::RegOk => TAG_REG_OK,
            Frame::RegErr { .. } => TAG_REG_ERR,
            Frame::Ping => TAG_PING,
            Frame::Pong => TAG_PONG,
            Frame::Unregister => TAG_UNREGISTER,
            Frame::Send { .. } => TAG_SEND,
            Frame::Deliver { .. } => TAG_DELIVER,
            Frame::Sub { .. } => TAG_SUB,
            Frame::Unsub { .. } => TAG_UNSUB,
            Frame::Pub { .. } => TAG_PUB,
            Frame::PubDeliver { .. } => TAG_PUBDELIVER,
            Frame::RouteAdd { .. } => TAG_ROUTE_ADD,
            Frame::RouteDel { .. } => TAG_ROUTE_DEL,
            Frame::ErrNoRoute { .. } => TAG_ERR_NO_ROUTE,
            Frame::BrokerHello { .. } => TAG_BROKER_HELLO,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Frame::Register { .. } => "REGISTER",
            Frame::RegOk => "REG_OK",
            Frame::RegErr { .. } => "REG_ERR",
            Frame::Ping => "PING",
            Frame::Pong => "PONG",
            Frame::Unregister => "UNREGISTER",
            Frame::Send { .. } => "SEND",
            Frame::Deliver { .. } => "DELIVER",
            Frame::Sub { .. } => "SUB",
            Frame::Unsub { .. } => "UNSUB",
            Frame::Pub { .. } => "PUB",
            Frame::PubDeliver { .. } => "PUBDELIVER",
            Frame::RouteAdd { .. } => "ROUTE_ADD",
            Frame::RouteDel { .. } => "ROUTE_DEL",
            Frame::ErrNoRoute { .. } => "ERR_NO_ROUTE",
            Frame::BrokerHello { .. } => "BROKER_HELLO",
        }
    }

    /// True for frames that carry application data.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Frame::Send { .. } | Frame::Deliver { .. } | Frame::Pub { .. } | Frame::PubDeliver { .. }
        )
    }

    /// Number of bytes `encode` will produce.
    pub fn encoded_len(&self) -> usize {
        let s = |v: &str| 2 + v.len();
        let p = |v: &Bytes| 4 + v.len();
        let fields = match self {
            Frame::RegOk | Frame::Ping | Frame::Pong | Frame::Unregister => 0,
            Frame::Register { name }
            | Frame::RouteAdd { name }
            | Frame::RouteDel { name }
            | Frame::BrokerHello { name } => s(name),
            Frame::RegErr { reason } => s(reason),
            Frame::Sub { prefix } | Frame::Unsub { prefix } => s(prefix),
            Frame::Send { dest, src, data } => s(dest) + s(src) + p(data),
            Frame::Deliver { src, data } => s(src) + p(data),
            Frame::Pub { topic, data } => s(topic) + p(data),
            Frame::PubDeliver { topic, src, data } => s(topic) + s(src) + p(data),
            Frame::ErrNoRoute { dest, src } => s(dest) + s(src),
        };
        HEADER_SIZE + 2 + fields
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_SIZE} byte limit")]
    OversizeFrame(usize),
    #[error("string field of {0} bytes exceeds {MAX_STRING_LEN} bytes")]
    InvalidString(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unsupported protocol version {0:#04x}")]
    BadVersion(u8),
    #[error("unknown frame kind {0:#04x}")]
    UnknownKind(u8),
    #[error("truncated field in frame")]
    TruncatedField,
    #[error("string field is not valid utf-8")]
    InvalidString,
    #[error("frame declares {0} bytes, above the {MAX_FRAME_SIZE} byte limit")]
    OversizeFrame(usize),
    #[error("{0} unread bytes after the last field")]
    TrailingBytes(usize),
}

/// Appends the encoding of `frame` to `out`.
pub fn encode_into(frame: &Frame, out: &mut BytesMut) -> Result<(), EncodeError> {
    let total = frame.encoded_len();
    if total > MAX_FRAME_SIZE {
        return Err(EncodeError::OversizeFrame(total));
    }
    check_strings(frame)?;
    out.reserve(total);
    out.put_u32((total - HEADER_SIZE) as u32);
    out.put_u8(PROTOCOL_VERSION);
    out.put_u8(frame.tag());
    match frame {
        Frame::RegOk | Frame::Ping | Frame::Pong | Frame::Unregister => {}
        Frame::Register { name }
        | Frame::RouteAdd { name }
        | Frame::RouteDel { name }
        | Frame::BrokerHello { name } => put_str(out, name),
        Frame::RegErr { reason } => put_str(out, reason),
        Frame::Sub { prefix } | Frame::Unsub { prefix } => put_str(out, prefix),
        Frame::Send { dest, src, data } => {
            put_str(out, dest);
            put_str(out, src);
            put_payload(out, data);
        }
        Frame::Deliver { src, data } => {
            put_str(out, src);
            put_payload(out, data);
        }
        Frame::Pub { topic, data } => {
            put_str(out, topic);
            put_payload(out, data);
        }
        Frame::PubDeliver { topic, src, data } => {
            put_str(out, topic);
            put_str(out, src);
            put_payload(out, data);
        }
        Frame::ErrNoRoute { dest, src } => {
            put_str(out, dest);
            put_str(out, src);
        }
    }
    Ok(())
}

pub fn encode(frame: &Frame) -> Result<Vec<u8>, EncodeError> {
    let mut out = BytesMut::with_capacity(frame.encoded_len());
    encode_into(frame, &mut out)?;
    Ok(out.to_vec())
}

fn check_strings(frame: &Frame) -> Result<(), EncodeError> {
    let strings: [&str; 2] = match frame {
        Frame::Register { name }
        | Frame::RouteAdd { name }
        | Frame::RouteDel { name }
        | Frame::BrokerHello { name } => [name, ""],
        Frame::RegErr { reason } => [reason, ""],
        Frame::Sub { prefix } | Frame::Unsub { prefix } => [prefix, ""],
        Frame::Send { dest, src, .. } | Frame::ErrNoRoute { dest, src } => [dest, src],
        Frame::Deliver { src, .. } => [src, ""],
        Frame::Pub { topic, .. } => [topic, ""],
        Frame::PubDeliver { topic, src, .. } => [topic, src],
        Frame::RegOk | Frame::Ping | Frame::Pong | Frame::Unregister => ["", ""],
    };
    match strings.iter().find(|s| s.len() > MAX_STRING_LEN) {
        Some(s) => Err(EncodeError::InvalidString(s.len())),
        None => Ok(()),
    }
}

fn put_str(out: &mut BytesMut, s: &str) {
    out.put_u16(s.len() as u16);
    out.put_slice(s.as_bytes());
}

fn put_payload(out: &mut BytesMut, data: &[u8]) {
    out.put_u32(data.len() as u32);
    out.put_slice(data);
}

/// Decodes one frame from the front of `buf`.
///
/// Returns `Ok(None)` when `buf` holds only part of a frame, otherwise the
/// frame and the number of bytes it occupied.
pub fn decode(buf: &[u8]) -> Result<Option<(Frame, usize)>, DecodeError> {
    if buf.len() < HEADER_SIZE {
        return Ok(None);
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if len + HEADER_SIZE > MAX_FRAME_SIZE {
        return Err(DecodeError::OversizeFrame(len + HEADER_SIZE));
    }
    if len < 2 {
        return Err(DecodeError::TruncatedField);
    }
    if buf.len() < HEADER_SIZE + len {
        return Ok(None);
    }
    let body = &buf[HEADER_SIZE..HEADER_SIZE + len];
    if body[0] != PROTOCOL_VERSION {
        return Err(DecodeError::BadVersion(body[0]));
    }
    let mut r = Reader { buf: &body[2..] };
    let frame = match body[1] {
        TAG_REGISTER => Frame::Register { name: r.string()? },
        TAG_REG_OK => Frame::RegOk,
        TAG_REG_ERR => Frame::RegErr { reason: r.string()? },
        TAG_PING => Frame::Ping,
        TAG_PONG => Frame::Pong,
        TAG_UNREGISTER => Frame::Unregister,
        TAG_SEND => Frame::Send { dest: r.string()?, src: r.string()?, data: r.payload()? },
        TAG_DELIVER => Frame::Deliver { src: r.string()?, data: r.payload()? },
        TAG_SUB => Frame::Sub { prefix: r.string()? },
        TAG_UNSUB => Frame::Unsub { prefix: r.string()? },
        TAG_PUB => Frame::Pub { topic: r.string()?, data: r.payload()? },
        TAG_PUBDELIVER => Frame::PubDeliver {
            topic: r.string()?,
            src: r.string()?,
            data: r.payload()?,
        },
        TAG_ROUTE_ADD => Frame::RouteAdd { name: r.string()? },
        TAG_ROUTE_DEL => Frame::RouteDel { name: r.string()? },
        TAG_ERR_NO_ROUTE => Frame::ErrNoRoute { dest: r.string()?, src: r.string()? },
        TAG_BROKER_HELLO => Frame::BrokerHello { name: r.string()? },
        other => return Err(DecodeError::UnknownKind(other)),
    };
    if !r.buf.is_empty() {
        return Err(DecodeError::TrailingBytes(r.buf.len()));
    }
    Ok(Some((frame, HEADER_SIZE + len)))
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() < n {
            return Err(DecodeError::TruncatedField);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn string(&mut self) -> Result<String, DecodeError> {
        let len = self.take(2)?;
        let len = u16::from_be_bytes([len[0], len[1]]) as usize;
        let raw = self.take(len)?;
        std::str::from_utf8(raw)
            .map(str::to_owned)
            .map_err(|_| DecodeError::InvalidString)
    }

    fn payload(&mut self) -> Result<Bytes, DecodeError> {
        let len = self.take(4)?;
        let len = u32::from_be_bytes([len[0], len[1], len[2], len[3]]) as usize;
        Ok(Bytes::copy_from_slice(self.take(len)?))
    }
}

/// Incremental decoder over a growing byte buffer.
#[derive(Debug, Default)]
pub struct FrameBuffer {
    buf: BytesMut,
}

impl FrameBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn inner_mut(&mut self) -> &mut BytesMut {
        &mut self.buf
    }

    /// Pops the next complete frame, if any.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, DecodeError> {
        match decode(&self.buf)? {
            Some((frame, used)) => {
                let _ = self.buf.split_to(used);
                Ok(Some(frame))
            }
            None => Ok(None),
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ping_layout() {
        assert_eq!(encode(&Frame::Ping).unwrap(), vec![0, 0, 0, 2, 1, 4]);
    }

    #[test]
    fn register_layout() {
        let bytes = encode(&Frame::Register { name: "a".into() }).unwrap();
        assert_eq!(bytes, vec![0, 0, 0, 5, 1, 0x01, 0, 1, b'a']);
        assert_eq!(decode(&bytes).unwrap(), Some((Frame::Register { name: "a".into() }, 9)));
    }

    #[test]
    fn partial_header_needs_more() {
        assert_eq!(decode(&[0, 0, 0]).unwrap(), None);
        // complete header, incomplete body
        assert_eq!(decode(&[0, 0, 0, 2, 1]).unwrap(), None);
    }

    #[test]
    fn bad_version() {
        assert_eq!(decode(&[0, 0, 0, 2, 2, 4]), Err(DecodeError::BadVersion(2)));
    }

    #[test]
    fn unknown_kind() {
        assert_eq!(decode(&[0, 0, 0, 2, 1, 0x7f]), Err(DecodeError::UnknownKind(0x7f)));
    }

    #[test]
    fn truncated_string() {
        // REGISTER claiming a 5-byte name but carrying one byte
        assert_eq!(decode(&[0, 0, 0, 5, 1, 1, 0, 5, b'a']), Err(DecodeError::TruncatedField));
    }

    #[test]
    fn trailing_bytes_rejected() {
        assert_eq!(decode(&[0, 0, 0, 3, 1, 4, 9]), Err(DecodeError::TrailingBytes(1)));
    }

    #[test]
    fn oversize_declared_length() {
        assert!(matches!(decode(&[0xff, 0, 0, 0, 1, 4]), Err(DecodeError::OversizeFrame(_))));
    }

    #[test]
    fn oversize_encode() {
        let data = Bytes::from(vec![0u8; MAX_FRAME_SIZE]);
        let frame = Frame::Pub { topic: "t".into(), data };
        assert!(matches!(encode(&frame), Err(EncodeError::OversizeFrame(_))));
    }

    #[test]
    fn long_string_rejected() {
        let frame = Frame::Register { name: "x".repeat(MAX_STRING_LEN + 1) };
        assert_eq!(encode(&frame), Err(EncodeError::InvalidString(MAX_STRING_LEN + 1)));
    }

    pub(crate) fn arb_frame() -> impl Strategy<Value = Frame> {
        let s = || "[a-zA-Z0-9._ -]{0,12}";
        let d = || proptest::collection::vec(any::<u8>(), 0..64).prop_map(Bytes::from);
        prop_oneof![
            s().prop_map(|name| Frame::Register { name }),
            Just(Frame::RegOk),
            s().prop_map(|reason| Frame::RegErr { reason }),
            Just(Frame::Ping),
            Just(Frame::Pong),
            Just(Frame::Unregister),
            (s(), s(), d()).prop_map(|(dest, src, data)| Frame::Send { dest, src, data }),
            (s(), d()).prop_map(|(src, data)| Frame::Deliver { src, data }),
            s().prop_map(|prefix| Frame::Sub { prefix }),
            s().prop_map(|prefix| Frame::Unsub { prefix }),
            (s(), d()).prop_map(|(topic, data)| Frame::Pub { topic, data }),
            (s(), s(), d()).prop_map(|(topic, src, data)| Frame::PubDeliver { topic, src, data }),
            s().prop_map(|name| Frame::RouteAdd { name }),
            s().prop_map(|name| Frame::RouteDel { name }),
            (s(), s()).prop_map(|(dest, src)| Frame::ErrNoRoute { dest, src }),
            s().prop_map(|name| Frame::BrokerHello { name }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip(frame in arb_frame()) {
            let bytes = encode(&frame).unwrap();
            prop_assert_eq!(bytes.len(), frame.encoded_len());
            let (back, used) = decode(&bytes).unwrap().unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(encode(&back).unwrap(), bytes);
            prop_assert_eq!(back, frame);
        }

        #[test]
        fn stream_of_frames(frames in proptest::collection::vec(arb_frame(), 0..8), chunk in 1usize..17) {
            let mut wire = Vec::new();
            for f in &frames {
                wire.extend(encode(f).unwrap());
            }
            let mut fb = FrameBuffer::new();
            let mut out = Vec::new();
            for piece in wire.chunks(chunk) {
                fb.extend(piece);
                while let Some(f) = fb.next_frame().unwrap() {
                    out.push(f);
                }
            }
            prop_assert!(fb.is_empty());
            prop_assert_eq!(out, frames);
        }

        #[test]
        fn decoder_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode(&bytes);
        }

        #[test]
        fn decoder_total_on_valid_header(kind in any::<u8>(), rest in proptest::collection::vec(any::<u8>(), 0..64)) {
            let mut bytes = ((rest.len() + 2) as u32).to_be_bytes().to_vec();
            bytes.push(PROTOCOL_VERSION);
            bytes.push(kind);
            bytes.extend(rest);
            let _ = decode(&bytes);
        }
    }
}
