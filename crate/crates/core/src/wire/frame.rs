//! Message framing: a fixed 16 byte big-endian header followed by the payload.
//!
//! ```text
//! 0      4        6        7     8               12               16
//! | MCOM | version | type | flags | correlation id | payload length | payload...
//! ```

use std::io::{Read, Write};

use crate::error::{ComError, Result};
use crate::guid::Guid;
use crate::wire::value::{Reader, WireValue};

pub const MAGIC: [u8; 4] = *b"MCOM";
pub const PROTO_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
/// Upper bound on a single payload; generous enough for a full argument list
/// of maximum-size blobs while still bounding what a hostile peer can make us
/// allocate.
pub const MAX_PAYLOAD: usize = 16 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    ActivateReq = 1,
    ActivateResp = 2,
    CallReq = 3,
    CallResp = 4,
    AddRef = 5,
    Release = 6,
    CountResp = 7,
    Bye = 8,
    QueryReq = 9,
    QueryResp = 10,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Result<MsgType> {
        Ok(match v {
            1 => MsgType::ActivateReq,
            2 => MsgType::ActivateResp,
            3 => MsgType::CallReq,
            4 => MsgType::CallResp,
            5 => MsgType::AddRef,
            6 => MsgType::Release,
            7 => MsgType::CountResp,
            8 => MsgType::Bye,
            9 => MsgType::QueryReq,
            10 => MsgType::QueryResp,
            other => return Err(ComError::ProtocolError(format!("unknown msg_type {other}"))),
        })
    }

    pub fn is_response(self) -> bool {
        matches!(
            self,
            MsgType::ActivateResp | MsgType::CallResp | MsgType::CountResp | MsgType::QueryResp
        )
    }
}

/// One framed protocol unit. `flags` is always zero in version 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub correlation_id: u32,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn new(msg_type: MsgType, correlation_id: u32, payload: Vec<u8>) -> Self {
        WireMessage {
            msg_type,
            correlation_id,
            payload,
        }
    }

    pub fn bye() -> Self {
        WireMessage::new(MsgType::Bye, 0, Vec::new())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(ComError::ProtocolError("payload too large".into()));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&PROTO_VERSION.to_be_bytes());
        out.push(self.msg_type as u8);
        out.push(0);
        out.extend_from_slice(&self.correlation_id.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Decodes one complete frame; `bytes` must hold exactly header + payload.
    pub fn decode(bytes: &[u8]) -> Result<WireMessage> {
        if bytes.len() < HEADER_LEN {
            return Err(ComError::ProtocolError("truncated header".into()));
        }
        let header: &[u8; HEADER_LEN] = bytes[..HEADER_LEN].try_into().unwrap();
        let (msg_type, correlation_id, len) = parse_header(header)?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < len {
            return Err(ComError::ProtocolError("truncated payload".into()));
        }
        if payload.len() > len {
            return Err(ComError::ProtocolError(
                "payload longer than declared".into(),
            ));
        }
        Ok(WireMessage::new(msg_type, correlation_id, payload.to_vec()))
    }
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(MsgType, u32, usize)> {
    if h[0..4] != MAGIC {
        return Err(ComError::ProtocolError("bad magic".into()));
    }
    let version = u16::from_be_bytes([h[4], h[5]]);
    if version != PROTO_VERSION {
        return Err(ComError::ProtocolError(format!(
            "unsupported protocol version {version}"
        )));
    }
    let msg_type = MsgType::from_u8(h[6])?;
    if h[7] != 0 {
        return Err(ComError::ProtocolError(format!(
            "nonzero flags {:#x}",
            h[7]
        )));
    }
    let correlation_id = u32::from_be_bytes(h[8..12].try_into().unwrap());
    let len = u32::from_be_bytes(h[12..16].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(ComError::ProtocolError(format!(
            "payload length {len} too large"
        )));
    }
    Ok((msg_type, correlation_id, len))
}

/// Reads one frame. A clean end of stream before the first header byte is
/// reported as `Ok(None)`.
pub fn read_message(r: &mut impl Read) -> Result<Option<WireMessage>> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(ComError::ProtocolError("truncated header".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(ComError::IoFailure(e.to_string())),
        }
    }
    let (msg_type, correlation_id, len) = parse_header(&header)?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ComError::ProtocolError("truncated payload".into())
        } else {
            ComError::IoFailure(e.to_string())
        }
    })?;
    Ok(Some(WireMessage::new(msg_type, correlation_id, payload)))
}

pub fn write_message(w: &mut impl Write, m: &WireMessage) -> Result<()> {
    let bytes = m.encode()?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Typed view of a message payload.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    ActivateReq {
        clsid: Guid,
        iid: Guid,
    },
    ActivateResp {
        status: u32,
        object_id: u64,
    },
    CallReq {
        object_id: u64,
        iid: Guid,
        ordinal: u16,
        args: Vec<WireValue>,
    },
    CallResp {
        status: u32,
        value: WireValue,
    },
    AddRef {
        object_id: u64,
    },
    Release {
        object_id: u64,
    },
    CountResp {
        status: u32,
        count: u32,
    },
    Bye,
    QueryReq {
        object_id: u64,
        iid: Guid,
    },
    QueryResp {
        status: u32,
        object_id: u64,
    },
}

impl Payload {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Payload::ActivateReq { .. } => MsgType::ActivateReq,
            Payload::ActivateResp { .. } => MsgType::ActivateResp,
            Payload::CallReq { .. } => MsgType::CallReq,
            Payload::CallResp { .. } => MsgType::CallResp,
            Payload::AddRef { .. } => MsgType::AddRef,
            Payload::Release { .. } => MsgType::Release,
            Payload::CountResp { .. } => MsgType::CountResp,
            Payload::Bye => MsgType::Bye,
            Payload::QueryReq { .. } => MsgType::QueryReq,
            Payload::QueryResp { .. } => MsgType::QueryResp,
        }
    }

    pub fn into_message(self, correlation_id: u32) -> Result<WireMessage> {
        let mut p = Vec::new();
        match &self {
            Payload::ActivateReq { clsid, iid } => {
                p.extend_from_slice(clsid.as_bytes());
                p.extend_from_slice(iid.as_bytes());
            }
            Payload::ActivateResp { status, object_id }
            | Payload::QueryResp { status, object_id } => {
                p.extend_from_slice(&status.to_be_bytes());
                p.extend_from_slice(&object_id.to_be_bytes());
            }
            Payload::CallReq {
                object_id,
                iid,
                ordinal,
                args,
            } => {
                let argc = u16::try_from(args.len())
                    .map_err(|_| ComError::ProtocolError("too many arguments".into()))?;
                p.extend_from_slice(&object_id.to_be_bytes());
                p.extend_from_slice(iid.as_bytes());
                p.extend_from_slice(&ordinal.to_be_bytes());
                p.extend_from_slice(&argc.to_be_bytes());
                for a in args {
                    a.encode_into(&mut p)?;
                }
            }
            Payload::CallResp { status, value } => {
                p.extend_from_slice(&status.to_be_bytes());
                value.encode_into(&mut p)?;
            }
            Payload::AddRef { object_id } | Payload::Release { object_id } => {
                p.extend_from_slice(&object_id.to_be_bytes());
            }
            Payload::CountResp { status, count } => {
                p.extend_from_slice(&status.to_be_bytes());
                p.extend_from_slice(&count.to_be_bytes());
            }
            Payload::Bye => {}
            Payload::QueryReq { object_id, iid } => {
                p.extend_from_slice(&object_id.to_be_bytes());
                p.extend_from_slice(iid.as_bytes());
            }
        }
        Ok(WireMessage::new(self.msg_type(), correlation_id, p))
    }

    pub fn parse(m: &WireMessage) -> Result<Payload> {
        let mut r = Reader::new(&m.payload);
        let payload = match m.msg_type {
            MsgType::ActivateReq => Payload::ActivateReq {
                clsid: r.guid()?,
                iid: r.guid()?,
            },
            MsgType::ActivateResp => Payload::ActivateResp {
                status: r.u32()?,
                object_id: r.u64()?,
            },
            MsgType::CallReq => {
                let object_id = r.u64()?;
                let iid = r.guid()?;
                let ordinal = r.u16()?;
                let argc = r.u16()? as usize;
                let mut args = Vec::with_capacity(argc.min(64));
                for _ in 0..argc {
                    args.push(r.value()?);
                }
                Payload::CallReq {
                    object_id,
                    iid,
                    ordinal,
                    args,
                }
            }
            MsgType::CallResp => Payload::CallResp {
                status: r.u32()?,
                value: r.value()?,
            },
            MsgType::AddRef => Payload::AddRef {
                object_id: r.u64()?,
            },
            MsgType::Release => Payload::Release {
                object_id: r.u64()?,
            },
            MsgType::CountResp => Payload::CountResp {
                status: r.u32()?,
                count: r.u32()?,
            },
            MsgType::Bye => Payload::Bye,
            MsgType::QueryReq => Payload::QueryReq {
                object_id: r.u64()?,
                iid: r.guid()?,
            },
            MsgType::QueryResp => Payload::QueryResp {
                status: r.u32()?,
                object_id: r.u64()?,
            },
        };
        r.finish()?;
        Ok(payload)
    }
}
