use std::io::{self, ErrorKind, Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: u8 = 0x57;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
/// Frames with larger bodies are rejected before allocation.
pub const MAX_BODY_LEN: usize = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum OpCode {
    Hello = 0x01,
    Dotprod = 0x02,
    Adjust = 0x03,
    Export = 0x04,
    Shutdown = 0x05,
    Response = 0x10,
    Error = 0x11,
}

impl OpCode {
    pub fn from_u8(code: u8) -> Option<OpCode> {
        Some(match code {
            0x01 => OpCode::Hello,
            0x02 => OpCode::Dotprod,
            0x03 => OpCode::Adjust,
            0x04 => OpCode::Export,
            0x05 => OpCode::Shutdown,
            0x10 => OpCode::Response,
            0x11 => OpCode::Error,
            _ => return None,
        })
    }

    pub fn is_request(self) -> bool {
        matches!(
            self,
            OpCode::Hello | OpCode::Dotprod | OpCode::Adjust | OpCode::Export | OpCode::Shutdown
        )
    }
}

/// Header layout (little-endian):
///
/// | offset | size | field     |
/// |--------|------|-----------|
/// | 0      | 4    | body_len  |
/// | 4      | 1    | magic     |
/// | 5      | 1    | version   |
/// | 6      | 1    | op_code   |
/// | 7      | 1    | reserved  |
/// | 8      | 8    | call_id   |
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub op: OpCode,
    pub call_id: u64,
    pub body: Vec<u8>,
}

struct Header {
    body_len: usize,
    op: OpCode,
    call_id: u64,
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<Header> {
    let body_len = u32::from_le_bytes([h[0], h[1], h[2], h[3]]) as usize;
    if h[4] != MAGIC {
        return Err(Error::Frame(format!("bad magic byte {:#04x}", h[4])));
    }
    if h[5] != VERSION {
        return Err(Error::Frame(format!(
            "unsupported protocol version {}",
            h[5]
        )));
    }
    let op = OpCode::from_u8(h[6])
        .ok_or_else(|| Error::Frame(format!("unknown op code {:#04x}", h[6])))?;
    if body_len > MAX_BODY_LEN {
        return Err(Error::Frame(format!(
            "body of {body_len} bytes exceeds limit"
        )));
    }
    let call_id = u64::from_le_bytes(h[8..16].try_into().expect("8 bytes"));
    Ok(Header {
        body_len,
        op,
        call_id,
    })
}

impl Frame {
    pub fn new(op: OpCode, call_id: u64, body: Vec<u8>) -> Self {
        Frame { op, call_id, body }
    }

    /// Size on the wire.
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.body.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        assert!(self.body.len() <= MAX_BODY_LEN, "frame body too large");
        out.extend_from_slice(&(self.body.len() as u32).to_le_bytes());
        out.extend_from_slice(&[MAGIC, VERSION, self.op as u8, 0]);
        out.extend_from_slice(&self.call_id.to_le_bytes());
        out.extend_from_slice(&self.body);
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Frame(format!(
                "truncated header: {} bytes",
                bytes.len()
            )));
        }
        let header = parse_header(bytes[..HEADER_LEN].try_into().expect("16 bytes"))?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != header.body_len {
            return Err(Error::Frame(format!(
                "length prefix says {} body bytes, found {}",
                header.body_len,
                body.len()
            )));
        }
        Ok(Frame {
            op: header.op,
            call_id: header.call_id,
            body: body.to_vec(),
        })
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.encode())
    }

    /// Reads one frame. Returns `Ok(None)` on a clean end of stream at a
    /// frame boundary.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Frame>> {
        let mut header = [0u8; HEADER_LEN];
        let mut filled = 0;
        while filled < HEADER_LEN {
            match r.read(&mut header[filled..]) {
                Ok(0) if filled == 0 => return Ok(None),
                Ok(0) => return Err(Error::Frame("stream closed inside frame header".into())),
                Ok(n) => filled += n,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let h = parse_header(&header)?;
        let mut body = vec![0u8; h.body_len];
        r.read_exact(&mut body).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => Error::Frame("stream closed inside frame body".into()),
            _ => e.into(),
        })?;
        Ok(Some(Frame {
            op: h.op,
            call_id: h.call_id,
            body,
        }))
    }
}
