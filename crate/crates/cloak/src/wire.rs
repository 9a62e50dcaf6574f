//! Binary wire protocol.
//!
//! Both links (client to proxy, proxy to storage server) use the same
//! framing: a little-endian u32 payload length, one message-type byte,
//! then the payload. All integers inside payloads are little-endian.
//! Element values and cipher blocks are fixed-width, so every message
//! length is determined by its count field; decoding rejects anything
//! that does not divide evenly.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Upper bound on a frame payload; anything larger is treated as a
/// corrupted length prefix rather than an allocation request.
pub const MAX_PAYLOAD: u32 = 1 << 30;

pub mod msg_type {
    // storage link
    pub const BATCH_READ: u8 = 0x01;
    pub const BATCH_READ_RESP: u8 = 0x02;
    pub const BATCH_WRITE: u8 = 0x03;
    pub const ACK: u8 = 0x04;
    pub const HANDSHAKE: u8 = 0x05;
    // client link
    pub const READ: u8 = 0x10;
    pub const WRITE: u8 = 0x11;
    pub const READ_RESP: u8 = 0x12;
    pub const WRITE_OK: u8 = 0x13;
    pub const ERR: u8 = 0x14;
}

pub fn write_frame(w: &mut impl Write, msg_type: u8, payload: &[u8]) -> Result<()> {
    let len = u32::try_from(payload.len())
        .map_err(|_| Error::Protocol("payload too large".into()))?;
    if len > MAX_PAYLOAD {
        return Err(Error::Protocol("payload too large".into()));
    }
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&[msg_type])?;
    w.write_all(payload)?;
    Ok(())
}

pub fn read_frame(r: &mut impl Read) -> Result<(u8, Vec<u8>)> {
    let mut len_buf = [0u8; 4];
    r.read_exact(&mut len_buf)?;
    let len = u32::from_le_bytes(len_buf);
    if len > MAX_PAYLOAD {
        return Err(Error::Protocol(format!("frame length {len} exceeds limit")));
    }
    let mut type_buf = [0u8; 1];
    r.read_exact(&mut type_buf)?;
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Ok((type_buf[0], payload))
}

/// Messages on the proxy-to-server link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StorageMsg {
    BatchRead { addrs: Vec<u64> },
    BatchReadResp { blocks: Vec<Vec<u8>> },
    BatchWrite { writes: Vec<(u64, Vec<u8>)> },
    Ack,
    Handshake { capacity: u64, element_size: u32, block_width: u32 },
}

impl StorageMsg {
    pub fn encode(&self) -> (u8, Vec<u8>) {
        match self {
            StorageMsg::BatchRead { addrs } => {
                let mut p = Vec::with_capacity(4 + addrs.len() * 8);
                p.extend_from_slice(&(addrs.len() as u32).to_le_bytes());
                for a in addrs {
                    p.extend_from_slice(&a.to_le_bytes());
                }
                (msg_type::BATCH_READ, p)
            }
            StorageMsg::BatchReadResp { blocks } => {
                let width = blocks.first().map_or(0, |b| b.len());
                let mut p = Vec::with_capacity(4 + blocks.len() * width);
                p.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
                for b in blocks {
                    debug_assert_eq!(b.len(), width);
                    p.extend_from_slice(b);
                }
                (msg_type::BATCH_READ_RESP, p)
            }
            StorageMsg::BatchWrite { writes } => {
                let width = writes.first().map_or(0, |(_, b)| b.len());
                let mut p = Vec::with_capacity(4 + writes.len() * (8 + width));
                p.extend_from_slice(&(writes.len() as u32).to_le_bytes());
                for (a, b) in writes {
                    debug_assert_eq!(b.len(), width);
                    p.extend_from_slice(&a.to_le_bytes());
                    p.extend_from_slice(b);
                }
                (msg_type::BATCH_WRITE, p)
            }
            StorageMsg::Ack => (msg_type::ACK, Vec::new()),
            StorageMsg::Handshake { capacity, element_size, block_width } => {
                let mut p = Vec::with_capacity(16);
                p.extend_from_slice(&capacity.to_le_bytes());
                p.extend_from_slice(&element_size.to_le_bytes());
                p.extend_from_slice(&block_width.to_le_bytes());
                (msg_type::HANDSHAKE, p)
            }
        }
    }

    pub fn decode(msg_type_byte: u8, payload: &[u8]) -> Result<Self> {
        match msg_type_byte {
            msg_type::BATCH_READ => {
                let count = read_count(payload)?;
                expect_len(payload, 4 + count * 8)?;
                let addrs = payload[4..]
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Ok(StorageMsg::BatchRead { addrs })
            }
            msg_type::BATCH_READ_RESP => {
                let count = read_count(payload)?;
                let body = &payload[4..];
                let width = divide_evenly(body.len(), count)?;
                Ok(StorageMsg::BatchReadResp {
                    blocks: body.chunks_exact(width).map(|c| c.to_vec()).collect(),
                })
            }
            msg_type::BATCH_WRITE => {
                let count = read_count(payload)?;
                let body = &payload[4..];
                let stride = divide_evenly(body.len(), count)?;
                if stride < 8 {
                    return Err(Error::Protocol("batch write entry shorter than address".into()));
                }
                let writes = body
                    .chunks_exact(stride)
                    .map(|c| {
                        let addr = u64::from_le_bytes(c[..8].try_into().unwrap());
                        (addr, c[8..].to_vec())
                    })
                    .collect();
                Ok(StorageMsg::BatchWrite { writes })
            }
            msg_type::ACK => {
                expect_len(payload, 0)?;
                Ok(StorageMsg::Ack)
            }
            msg_type::HANDSHAKE => {
                expect_len(payload, 16)?;
                Ok(StorageMsg::Handshake {
                    capacity: u64::from_le_bytes(payload[..8].try_into().unwrap()),
                    element_size: u32::from_le_bytes(payload[8..12].try_into().unwrap()),
                    block_width: u32::from_le_bytes(payload[12..16].try_into().unwrap()),
                })
            }
            other => Err(Error::Protocol(format!("unknown storage message type {other:#04x}"))),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let (t, p) = self.encode();
        write_frame(w, t, &p)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let (t, p) = read_frame(r)?;
        Self::decode(t, &p)
    }
}

/// Messages on the client-to-proxy link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientMsg {
    Read { id: u64, addr: u64 },
    Write { id: u64, addr: u64, value: Vec<u8> },
    ReadResp { id: u64, value: Vec<u8> },
    WriteOk { id: u64 },
    Err { id: u64, code: u16 },
}

impl ClientMsg {
    pub fn encode(&self) -> (u8, Vec<u8>) {
        match self {
            ClientMsg::Read { id, addr } => {
                let mut p = Vec::with_capacity(16);
                p.extend_from_slice(&id.to_le_bytes());
                p.extend_from_slice(&addr.to_le_bytes());
                (msg_type::READ, p)
            }
            ClientMsg::Write { id, addr, value } => {
                let mut p = Vec::with_capacity(16 + value.len());
                p.extend_from_slice(&id.to_le_bytes());
                p.extend_from_slice(&addr.to_le_bytes());
                p.extend_from_slice(value);
                (msg_type::WRITE, p)
            }
            ClientMsg::ReadResp { id, value } => {
                let mut p = Vec::with_capacity(8 + value.len());
                p.extend_from_slice(&id.to_le_bytes());
                p.extend_from_slice(value);
                (msg_type::READ_RESP, p)
            }
            ClientMsg::WriteOk { id } => (msg_type::WRITE_OK, id.to_le_bytes().to_vec()),
            ClientMsg::Err { id, code } => {
                let mut p = Vec::with_capacity(10);
                p.extend_from_slice(&id.to_le_bytes());
                p.extend_from_slice(&code.to_le_bytes());
                (msg_type::ERR, p)
            }
        }
    }

    pub fn decode(msg_type_byte: u8, payload: &[u8]) -> Result<Self> {
        match msg_type_byte {
            msg_type::READ => {
                expect_len(payload, 16)?;
                Ok(ClientMsg::Read {
                    id: u64::from_le_bytes(payload[..8].try_into().unwrap()),
                    addr: u64::from_le_bytes(payload[8..16].try_into().unwrap()),
                })
            }
            msg_type::WRITE => {
                if payload.len() < 16 {
                    return Err(Error::Protocol("write message truncated".into()));
                }
                Ok(ClientMsg::Write {
                    id: u64::from_le_bytes(payload[..8].try_into().unwrap()),
                    addr: u64::from_le_bytes(payload[8..16].try_into().unwrap()),
                    value: payload[16..].to_vec(),
                })
            }
            msg_type::READ_RESP => {
                if payload.len() < 8 {
                    return Err(Error::Protocol("read response truncated".into()));
                }
                Ok(ClientMsg::ReadResp {
                    id: u64::from_le_bytes(payload[..8].try_into().unwrap()),
                    value: payload[8..].to_vec(),
                })
            }
            msg_type::WRITE_OK => {
                expect_len(payload, 8)?;
                Ok(ClientMsg::WriteOk {
                    id: u64::from_le_bytes(payload.try_into().unwrap()),
                })
            }
            msg_type::ERR => {
                expect_len(payload, 10)?;
                Ok(ClientMsg::Err {
                    id: u64::from_le_bytes(payload[..8].try_into().unwrap()),
                    code: u16::from_le_bytes(payload[8..10].try_into().unwrap()),
                })
            }
            other => Err(Error::Protocol(format!("unknown client message type {other:#04x}"))),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let (t, p) = self.encode();
        write_frame(w, t, &p)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let (t, p) = read_frame(r)?;
        Self::decode(t, &p)
    }
}

fn read_count(payload: &[u8]) -> Result<usize> {
    if payload.len() < 4 {
        return Err(Error::Protocol("missing count field".into()));
    }
    Ok(u32::from_le_bytes(payload[..4].try_into().unwrap()) as usize)
}

fn expect_len(payload: &[u8], want: usize) -> Result<()> {
    if payload.len() != want {
        return Err(Error::Protocol(format!(
            "payload length {} does not match expected {want}",
            payload.len()
        )));
    }
    Ok(())
}

fn divide_evenly(total: usize, count: usize) -> Result<usize> {
    if count == 0 {
        return Err(Error::Protocol("zero-count batch message".into()));
    }
    if total % count != 0 {
        return Err(Error::Protocol(format!(
            "body of {total} bytes not divisible into {count} fixed-width entries"
        )));
    }
    Ok(total / count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_bytes(msg: &StorageMsg) -> Vec<u8> {
        let mut buf = Vec::new();
        msg.write_to(&mut buf).unwrap();
        buf
    }

    #[test]
    fn batch_read_golden_bytes() {
        // length 20, type 0x01, count 2, addrs 1 and 0x0102030405060708
        let msg = StorageMsg::BatchRead { addrs: vec![1, 0x0102030405060708] };
        let bytes = frame_bytes(&msg);
        assert_eq!(
            bytes,
            vec![
                20, 0, 0, 0, // payload length
                0x01, // type
                2, 0, 0, 0, // count
                1, 0, 0, 0, 0, 0, 0, 0, // addr 1
                0x08, 0x07, 0x06, 0x05, 0x04, 0x03, 0x02, 0x01, // addr 2
            ]
        );
    }

    #[test]
    fn handshake_golden_bytes() {
        let msg = StorageMsg::Handshake { capacity: 14, element_size: 1024, block_width: 1052 };
        let bytes = frame_bytes(&msg);
        assert_eq!(bytes[..5], [16, 0, 0, 0, 0x05]);
        assert_eq!(bytes[5..13], 14u64.to_le_bytes());
        assert_eq!(bytes[13..17], 1024u32.to_le_bytes());
        assert_eq!(bytes[17..21], 1052u32.to_le_bytes());
    }

    #[test]
    fn client_err_golden_bytes() {
        let msg = ClientMsg::Err { id: 7, code: 2 };
        let mut buf = Vec::new();
        msg.write_to(&mut buf).unwrap();
        assert_eq!(buf[..5], [10, 0, 0, 0, 0x14]);
        assert_eq!(buf[5..13], 7u64.to_le_bytes());
        assert_eq!(buf[13..15], 2u16.to_le_bytes());
    }

    #[test]
    fn storage_round_trips() {
        let msgs = vec![
            StorageMsg::BatchRead { addrs: vec![0, 5, 9] },
            StorageMsg::BatchReadResp { blocks: vec![vec![1; 44], vec![2; 44]] },
            StorageMsg::BatchWrite { writes: vec![(3, vec![7; 44]), (1, vec![9; 44])] },
            StorageMsg::Ack,
            StorageMsg::Handshake { capacity: 100, element_size: 16, block_width: 44 },
        ];
        for msg in msgs {
            let mut buf = Vec::new();
            msg.write_to(&mut buf).unwrap();
            let mut cursor = std::io::Cursor::new(buf);
            assert_eq!(StorageMsg::read_from(&mut cursor).unwrap(), msg);
        }
    }

    #[test]
    fn client_round_trips() {
        let msgs = vec![
            ClientMsg::Read { id: 1, addr: 2 },
            ClientMsg::Write { id: 3, addr: 4, value: vec![5; 32] },
            ClientMsg::ReadResp { id: 6, value: vec![7; 32] },
            ClientMsg::WriteOk { id: 8 },
            ClientMsg::Err { id: 9, code: 1 },
        ];
        for msg in msgs {
            let mut buf = Vec::new();
            msg.write_to(&mut buf).unwrap();
            let mut cursor = std::io::Cursor::new(buf);
            assert_eq!(ClientMsg::read_from(&mut cursor).unwrap(), msg);
        }
    }

    #[test]
    fn truncated_and_oversized_frames_rejected() {
        let mut cursor = std::io::Cursor::new(vec![20u8, 0, 0, 0, 0x01, 2, 0]);
        assert!(StorageMsg::read_from(&mut cursor).is_err());

        let huge = (MAX_PAYLOAD + 1).to_le_bytes();
        let mut bad = huge.to_vec();
        bad.push(0x01);
        let mut cursor = std::io::Cursor::new(bad);
        assert!(read_frame(&mut cursor).is_err());
    }

    #[test]
    fn misaligned_batch_body_rejected() {
        // count=2 but 9 body bytes: not divisible
        let mut payload = 2u32.to_le_bytes().to_vec();
        payload.extend_from_slice(&[0; 9]);
        assert!(StorageMsg::decode(msg_type::BATCH_READ_RESP, &payload).is_err());
        assert!(StorageMsg::decode(0x77, &[]).is_err());
        assert!(ClientMsg::decode(0x77, &[]).is_err());
    }
}
