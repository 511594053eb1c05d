//! Management channel frames: session handshake, heartbeats, disconnect.
//!
//! These frames ride a reliable, in-order side channel (in the simulator: a
//! lossless delivery path; over UDP: a retried stop-and-wait exchange). They
//! are never subject to credits, congestion control, or loss injection, and
//! they are excluded from data-path packet accounting.
//!
//! Wire form (versioned, length-prefixed):
//!
//! ```text
//! +---------+--------+-------------+----------------+
//! | version |  kind  | len (u16 LE)| payload (len B)|
//! +---------+--------+-------------+----------------+
//! ```
//!
//! Payloads by kind:
//! - `ConnectReq`  (0): client_session u16, credits u16, num_slots u16, mtu_data u32
//! - `ConnectResp` (1): client_session u16, server_session u16, status u8
//! - `Heartbeat`   (2): empty
//! - `Disconnect`  (3): local_session u16 (sender's session number)

use crate::error::{Error, Result};

/// Version byte stamped on every management frame.
pub const MGMT_VERSION: u8 = 1;

/// Handshake result codes carried in `ConnectResp`.
pub const CONNECT_OK: u8 = 0;
pub const CONNECT_REJECT_BUDGET: u8 = 1;
pub const CONNECT_REJECT_CONFIG: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MgmtFrame {
    ConnectReq {
        client_session: u16,
        credits: u16,
        num_slots: u16,
        mtu_data: u32,
    },
    ConnectResp {
        client_session: u16,
        server_session: u16,
        status: u8,
    },
    Heartbeat,
    Disconnect {
        local_session: u16,
    },
}

impl MgmtFrame {
    pub fn encode(&self) -> Vec<u8> {
        let mut v = vec![MGMT_VERSION];
        match self {
            MgmtFrame::ConnectReq {
                client_session,
                credits,
                num_slots,
                mtu_data,
            } => {
                v.push(0);
                v.extend_from_slice(&10u16.to_le_bytes());
                v.extend_from_slice(&client_session.to_le_bytes());
                v.extend_from_slice(&credits.to_le_bytes());
                v.extend_from_slice(&num_slots.to_le_bytes());
                v.extend_from_slice(&mtu_data.to_le_bytes());
            }
            MgmtFrame::ConnectResp {
                client_session,
                server_session,
                status,
            } => {
                v.push(1);
                v.extend_from_slice(&5u16.to_le_bytes());
                v.extend_from_slice(&client_session.to_le_bytes());
                v.extend_from_slice(&server_session.to_le_bytes());
                v.push(*status);
            }
            MgmtFrame::Heartbeat => {
                v.push(2);
                v.extend_from_slice(&0u16.to_le_bytes());
            }
            MgmtFrame::Disconnect { local_session } => {
                v.push(3);
                v.extend_from_slice(&2u16.to_le_bytes());
                v.extend_from_slice(&local_session.to_le_bytes());
            }
        }
        v
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        if b.len() < 4 {
            return Err(Error::Codec("management frame shorter than 4 bytes"));
        }
        if b[0] != MGMT_VERSION {
            return Err(Error::Codec("unsupported management frame version"));
        }
        let kind = b[1];
        let len = u16::from_le_bytes([b[2], b[3]]) as usize;
        let payload = &b[4..];
        if payload.len() != len {
            return Err(Error::Codec("management frame length mismatch"));
        }
        match kind {
            0 => {
                if len != 10 {
                    return Err(Error::Codec("bad ConnectReq length"));
                }
                Ok(MgmtFrame::ConnectReq {
                    client_session: u16::from_le_bytes([payload[0], payload[1]]),
                    credits: u16::from_le_bytes([payload[2], payload[3]]),
                    num_slots: u16::from_le_bytes([payload[4], payload[5]]),
                    mtu_data: u32::from_le_bytes([payload[6], payload[7], payload[8], payload[9]]),
                })
            }
            1 => {
                if len != 5 {
                    return Err(Error::Codec("bad ConnectResp length"));
                }
                Ok(MgmtFrame::ConnectResp {
                    client_session: u16::from_le_bytes([payload[0], payload[1]]),
                    server_session: u16::from_le_bytes([payload[2], payload[3]]),
                    status: payload[4],
                })
            }
            2 => {
                if len != 0 {
                    return Err(Error::Codec("bad Heartbeat length"));
                }
                Ok(MgmtFrame::Heartbeat)
            }
            3 => {
                if len != 2 {
                    return Err(Error::Codec("bad Disconnect length"));
                }
                Ok(MgmtFrame::Disconnect {
                    local_session: u16::from_le_bytes([payload[0], payload[1]]),
                })
            }
            _ => Err(Error::Codec("unknown management frame kind")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_all_kinds() {
        let frames = [
            MgmtFrame::ConnectReq {
                client_session: 3,
                credits: 8,
                num_slots: 8,
                mtu_data: 1408,
            },
            MgmtFrame::ConnectResp {
                client_session: 3,
                server_session: 12,
                status: CONNECT_OK,
            },
            MgmtFrame::Heartbeat,
            MgmtFrame::Disconnect { local_session: 7 },
        ];
        for f in frames {
            let enc = f.encode();
            assert_eq!(MgmtFrame::decode(&enc).unwrap(), f);
        }
    }

    #[test]
    fn rejects_malformed() {
        assert!(MgmtFrame::decode(&[]).is_err());
        assert!(MgmtFrame::decode(&[1, 9, 0, 0]).is_err()); // unknown kind
        assert!(MgmtFrame::decode(&[2, 2, 0, 0]).is_err()); // bad version
        let mut enc = MgmtFrame::Heartbeat.encode();
        enc.push(0xAA); // trailing garbage
        assert!(MgmtFrame::decode(&enc).is_err());
    }
}
