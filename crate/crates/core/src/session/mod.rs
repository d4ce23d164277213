//! Bidirectional session assembly and fixed-length session vectors.

mod anon;
mod dataset;
mod strategy;

use std::collections::HashMap;

use thiserror::Error;

use crate::pcap::{DecodedPacket, Transport};

pub use anon::AnonymizationMap;
pub use dataset::{read_dataset, write_dataset, Dataset, DatasetError, DATASET_HEADER_LEN};
pub use strategy::{apply_strategy, PreprocStrategy, STRATEGY_COUNT};

pub const DEFAULT_SESSION_LEN: usize = 784;
pub const DNS_PORT: u16 = 53;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SessionError {
    #[error("invalid preprocessing strategy: {0}")]
    InvalidStrategy(String),
    #[error("session has no bytes")]
    EmptySession,
    #[error("session length must be positive")]
    ZeroLength,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    pub ip: [u8; 4],
    pub port: u16,
}

impl Endpoint {
    fn sort_key(&self) -> [u8; 6] {
        let p = self.port.to_be_bytes();
        [self.ip[0], self.ip[1], self.ip[2], self.ip[3], p[0], p[1]]
    }
}

/// Direction-agnostic identity of a session. `endpoint_a <= endpoint_b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionKey {
    pub endpoint_a: Endpoint,
    pub endpoint_b: Endpoint,
    pub protocol: Transport,
}

impl SessionKey {
    pub fn of(packet: &DecodedPacket) -> Self {
        let src = Endpoint {
            ip: packet.src_ip,
            port: packet.src_port,
        };
        let dst = Endpoint {
            ip: packet.dst_ip,
            port: packet.dst_port,
        };
        let (endpoint_a, endpoint_b) = if src.sort_key() <= dst.sort_key() {
            (src, dst)
        } else {
            (dst, src)
        };
        Self {
            endpoint_a,
            endpoint_b,
            protocol: packet.protocol,
        }
    }
}

/// Sessions in order of first appearance; packets within a session keep capture order.
#[derive(Debug, Default, Clone)]
pub struct Sessions {
    order: Vec<SessionKey>,
    map: HashMap<SessionKey, Vec<DecodedPacket>>,
}

impl Sessions {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn get(&self, key: &SessionKey) -> Option<&[DecodedPacket]> {
        self.map.get(key).map(Vec::as_slice)
    }

    pub fn keys(&self) -> &[SessionKey] {
        &self.order
    }

    pub fn into_ordered(mut self) -> Vec<(SessionKey, Vec<DecodedPacket>)> {
        self.order
            .iter()
            .map(|k| (*k, self.map.remove(k).unwrap_or_default()))
            .collect()
    }
}

pub fn assemble_sessions<I>(packets: I) -> Sessions
where
    I: IntoIterator<Item = DecodedPacket>,
{
    let mut sessions = Sessions::default();
    for p in packets {
        let key = SessionKey::of(&p);
        match sessions.map.get_mut(&key) {
            Some(list) => list.push(p),
            None => {
                sessions.order.push(key);
                sessions.map.insert(key, vec![p]);
            }
        }
    }
    sessions
}

/// Drops payload-free packets (either transport) and anything on port 53.
pub fn filter_packets(session: Vec<DecodedPacket>) -> Vec<DecodedPacket> {
    session
        .into_iter()
        .filter(|p| p.payload_len > 0 && p.src_port != DNS_PORT && p.dst_port != DNS_PORT)
        .collect()
}

/// A fixed-length, unscaled session byte vector with its class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionVector {
    pub bytes: Vec<u8>,
    pub label: u16,
}

impl SessionVector {
    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// Concatenates packet bytes in order, truncating or zero-padding to `len`.
pub fn normalize_session(packets: &[Vec<u8>], len: usize, label: u16) -> Result<SessionVector, SessionError> {
    if len == 0 {
        return Err(SessionError::ZeroLength);
    }
    if packets.iter().all(|p| p.is_empty()) {
        return Err(SessionError::EmptySession);
    }
    let mut bytes = Vec::with_capacity(len);
    for p in packets {
        let take = (len - bytes.len()).min(p.len());
        bytes.extend_from_slice(&p[..take]);
        if bytes.len() == len {
            break;
        }
    }
    bytes.resize(len, 0);
    Ok(SessionVector { bytes, label })
}

pub fn scale(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| b as f64 / 255.0).collect()
}
