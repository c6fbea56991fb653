//! Frames: `"FDM1"`, `u8` message type, `u32` little-endian payload length, payload.

use std::io::{Read, Write};

use super::FederationError;

pub const FRAME_MAGIC: &[u8; 4] = b"FDM1";
/// Largest payload a peer will accept.
pub const MAX_FRAME: usize = 256 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsgType {
    Push = 1,
    Pull = 2,
    List = 3,
    Ok = 129,
    Err = 130,
    Data = 131,
}

impl MsgType {
    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            1 => MsgType::Push,
            2 => MsgType::Pull,
            3 => MsgType::List,
            129 => MsgType::Ok,
            130 => MsgType::Err,
            131 => MsgType::Data,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: MsgType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: MsgType, payload: Vec<u8>) -> Self {
        Self { kind, payload }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + self.payload.len());
        out.extend_from_slice(FRAME_MAGIC);
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<(), FederationError> {
    w.write_all(&frame.encode())
        .and_then(|_| w.flush())
        .map_err(FederationError::io("writing frame"))
}

pub fn read_frame(r: &mut impl Read) -> Result<Frame, FederationError> {
    let mut header = [0u8; 9];
    r.read_exact(&mut header)
        .map_err(FederationError::io("reading frame header"))?;
    if &header[..4] != FRAME_MAGIC {
        return Err(FederationError::Protocol("bad frame magic".into()));
    }
    let kind = MsgType::from_code(header[4])
        .ok_or_else(|| FederationError::Protocol(format!("unknown message type {}", header[4])))?;
    let len = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
    if len > MAX_FRAME {
        return Err(FederationError::Protocol(format!(
            "frame of {len} bytes exceeds limit"
        )));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)
        .map_err(FederationError::io("reading frame payload"))?;
    Ok(Frame { kind, payload })
}

/// `u16` name length followed by the name.
pub(crate) fn encode_name(name: &str, rest: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(2 + name.len() + rest.len());
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(rest);
    out
}

pub(crate) fn decode_name(payload: &[u8]) -> Result<(String, &[u8]), FederationError> {
    if payload.len() < 2 {
        return Err(FederationError::Protocol("missing name length".into()));
    }
    let n = u16::from_le_bytes([payload[0], payload[1]]) as usize;
    if payload.len() < 2 + n {
        return Err(FederationError::Protocol(
            "name runs past the payload".into(),
        ));
    }
    let name = std::str::from_utf8(&payload[2..2 + n])
        .map_err(|_| FederationError::Protocol("name is not UTF-8".into()))?
        .to_string();
    Ok((name, &payload[2 + n..]))
}
