//! Frame and handshake encoding.
//!
//! Every message between ranks is a [`Frame`]. On TCP it is framed as
//!
//! ```text
//! u32  length   bytes that follow this field (HEADER_LEN + payload)
//! u16  kind     collective id, see FrameKind
//! u8   dtype    element type code (0 for byte payloads)
//! u8   flags    collective-specific (reduce op for allreduce)
//! u64  seq      per sender→receiver pair, starts at 0, +1 per frame
//! u64  call     index of the collective on the sending communicator
//! u64  count    collective-specific (total element count for allreduce)
//! [u8] payload  raw little-endian elements or opaque bytes
//! ```
//!
//! The in-process transport moves the same `Frame` values through channels
//! without encoding them.
//!
//! Connection setup starts with a 15-byte hello: `MDPC\x01`, u32 rank,
//! u32 world size, u16 listen port.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 2 + 1 + 1 + 8 + 8 + 8;
pub const HANDSHAKE_MAGIC: &[u8; 5] = b"MDPC\x01";
pub const HELLO_LEN: usize = 5 + 4 + 4 + 2;

/// Upper bound on a single frame, to reject garbage before allocating.
const MAX_FRAME: usize = 1 << 31;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameKind {
    Allreduce = 1,
    Scatter = 2,
    Broadcast = 3,
    Barrier = 4,
    /// Rank 0 → others during rendezvous: the address table.
    Wiring = 0x10,
    /// Rank 0 → others when rendezvous fails.
    StartupFailed = 0x11,
    /// A rank gave up on the communicator; payload is the reason.
    Abort = 0xFFFE,
    /// Synthesised locally when a peer's connection closes.
    Hangup = 0xFFFF,
}

impl FrameKind {
    fn from_u16(v: u16) -> Option<FrameKind> {
        Some(match v {
            1 => FrameKind::Allreduce,
            2 => FrameKind::Scatter,
            3 => FrameKind::Broadcast,
            4 => FrameKind::Barrier,
            0x10 => FrameKind::Wiring,
            0x11 => FrameKind::StartupFailed,
            0xFFFE => FrameKind::Abort,
            0xFFFF => FrameKind::Hangup,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub dtype: u8,
    pub flags: u8,
    pub seq: u64,
    pub call: u64,
    pub count: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn control(kind: FrameKind, payload: Vec<u8>) -> Frame {
        Frame {
            kind,
            dtype: 0,
            flags: 0,
            seq: 0,
            call: 0,
            count: 0,
            payload,
        }
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.payload).into_owned()
    }

    pub fn encode_header(&self) -> [u8; 4 + HEADER_LEN] {
        let mut h = [0u8; 4 + HEADER_LEN];
        let len = (HEADER_LEN + self.payload.len()) as u32;
        h[0..4].copy_from_slice(&len.to_le_bytes());
        h[4..6].copy_from_slice(&(self.kind as u16).to_le_bytes());
        h[6] = self.dtype;
        h[7] = self.flags;
        h[8..16].copy_from_slice(&self.seq.to_le_bytes());
        h[16..24].copy_from_slice(&self.call.to_le_bytes());
        h[24..32].copy_from_slice(&self.count.to_le_bytes());
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.encode_header().to_vec();
        out.extend_from_slice(&self.payload);
        out
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    if HEADER_LEN + frame.payload.len() > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            "frame too large",
        ));
    }
    w.write_all(&frame.encode_header())?;
    w.write_all(&frame.payload)?;
    w.flush()
}

/// Reads one frame. `Ok(None)` on a clean end of stream between frames.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if !(HEADER_LEN..=MAX_FRAME).contains(&len) {
        return Err(Error::format(
            "frame",
            format!("length field {len} out of range"),
        ));
    }
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    let kind_code = u16::from_le_bytes([header[0], header[1]]);
    let kind = FrameKind::from_u16(kind_code)
        .ok_or_else(|| Error::format("frame", format!("unknown kind {kind_code:#x}")))?;
    let word = |i: usize| u64::from_le_bytes(header[i..i + 8].try_into().unwrap());
    let mut payload = vec![0u8; len - HEADER_LEN];
    r.read_exact(&mut payload)?;
    Ok(Some(Frame {
        kind,
        dtype: header[2],
        flags: header[3],
        seq: word(4),
        call: word(12),
        count: word(20),
        payload,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Hello {
    pub rank: u32,
    pub size: u32,
    pub listen_port: u16,
}

impl Hello {
    pub fn to_bytes(self) -> [u8; HELLO_LEN] {
        let mut b = [0u8; HELLO_LEN];
        b[..5].copy_from_slice(HANDSHAKE_MAGIC);
        b[5..9].copy_from_slice(&self.rank.to_le_bytes());
        b[9..13].copy_from_slice(&self.size.to_le_bytes());
        b[13..15].copy_from_slice(&self.listen_port.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8; HELLO_LEN]) -> Result<Hello> {
        if &b[..4] != b"MDPC" {
            return Err(Error::format("handshake", "bad magic, expected MDPC"));
        }
        if b[4] != HANDSHAKE_MAGIC[4] {
            return Err(Error::format(
                "handshake",
                format!("unsupported protocol version {}", b[4]),
            ));
        }
        Ok(Hello {
            rank: u32::from_le_bytes(b[5..9].try_into().unwrap()),
            size: u32::from_le_bytes(b[9..13].try_into().unwrap()),
            listen_port: u16::from_le_bytes(b[13..15].try_into().unwrap()),
        })
    }

    pub fn read(r: &mut impl Read) -> Result<Hello> {
        let mut b = [0u8; HELLO_LEN];
        r.read_exact(&mut b)?;
        Hello::from_bytes(&b)
    }
}

/// Address table sent by rank 0: one `(host, port)` per rank, index = rank.
pub fn encode_wiring(table: &[(String, u16)]) -> Vec<u8> {
    let mut out = (table.len() as u32).to_le_bytes().to_vec();
    for (host, port) in table {
        out.extend_from_slice(&(host.len() as u16).to_le_bytes());
        out.extend_from_slice(host.as_bytes());
        out.extend_from_slice(&port.to_le_bytes());
    }
    out
}

pub fn decode_wiring(bytes: &[u8]) -> Result<Vec<(String, u16)>> {
    let bad = || Error::format("wiring table", "truncated");
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(bad)?;
        pos += n;
        Ok(s)
    };
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let hl = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let host = String::from_utf8(take(hl)?.to_vec())
            .map_err(|e| Error::format("wiring table", e.to_string()))?;
        let port = u16::from_le_bytes(take(2)?.try_into().unwrap());
        table.push((host, port));
    }
    Ok(table)
}

/// Payload of a `StartupFailed` frame: the missing ranks and a message.
pub fn encode_startup_failure(missing: &[usize], detail: &str) -> Vec<u8> {
    let mut out = (missing.len() as u32).to_le_bytes().to_vec();
    for &r in missing {
        out.extend_from_slice(&(r as u32).to_le_bytes());
    }
    out.extend_from_slice(detail.as_bytes());
    out
}

pub fn decode_startup_failure(bytes: &[u8]) -> (Vec<usize>, String) {
    let word = |i: usize| {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
    };
    let Some(k) = word(0) else {
        return (Vec::new(), String::new());
    };
    let missing: Vec<usize> = (0..k).map_while(|i| word(4 + 4 * i)).collect();
    let detail = bytes.get(4 + 4 * missing.len()..).unwrap_or_default();
    (missing, String::from_utf8_lossy(detail).into_owned())
}
