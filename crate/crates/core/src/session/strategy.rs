use serde::{Deserialize, Serialize};

use super::{AnonymizationMap, SessionError};
use crate::pcap::{DecodedPacket, Transport};

pub const STRATEGY_COUNT: u8 = 24;

/// Zero bytes inserted after an 8-byte UDP header so it spans 20 bytes like a bare TCP header.
pub const UDP_PAD_LEN: usize = 12;

/// Header-field treatment applied to every packet of a session.
///
/// Exactly one link-layer treatment (`eth_removal`, `mac_anon`, `mac_zero`)
/// and exactly one address treatment (`ip_anon`, `ip_zero`) must be set, giving
/// the 24 numbered strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct PreprocStrategy {
    pub eth_removal: bool,
    pub mac_anon: bool,
    pub mac_zero: bool,
    pub ip_anon: bool,
    pub ip_zero: bool,
    pub port_zero: bool,
    pub udp_pad: bool,
}

impl PreprocStrategy {
    /// Strategy `id` in 1..=24. Rows come in blocks of eight per link-layer
    /// treatment; within a block, four anonymize IPs then four zero them, and each
    /// run of four cycles (pad), (none), (port+pad), (port).
    pub fn from_id(id: u8) -> Result<Self, SessionError> {
        if !(1..=STRATEGY_COUNT).contains(&id) {
            return Err(SessionError::InvalidStrategy(format!(
                "id {id} outside 1..={STRATEGY_COUNT}"
            )));
        }
        let i = id - 1;
        let link = i / 8;
        let ip_zero = (i % 8) >= 4;
        let (port_zero, udp_pad) = match i % 4 {
            0 => (false, true),
            1 => (false, false),
            2 => (true, true),
            _ => (true, false),
        };
        Ok(Self {
            eth_removal: link == 0,
            mac_anon: link == 1,
            mac_zero: link == 2,
            ip_anon: !ip_zero,
            ip_zero,
            port_zero,
            udp_pad,
        })
    }

    pub fn id(&self) -> Option<u8> {
        (1..=STRATEGY_COUNT).find(|&id| Self::from_id(id).ok().as_ref() == Some(self))
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        let link = [self.eth_removal, self.mac_anon, self.mac_zero]
            .iter()
            .filter(|&&b| b)
            .count();
        if link != 1 {
            return Err(SessionError::InvalidStrategy(
                "exactly one of eth_removal, mac_anon, mac_zero must be set".into(),
            ));
        }
        if self.ip_anon == self.ip_zero {
            return Err(SessionError::InvalidStrategy(
                "exactly one of ip_anon, ip_zero must be set".into(),
            ));
        }
        Ok(())
    }
}

/// Rewrites each packet's bytes according to `strategy`. Payload bytes are untouched.
pub fn apply_strategy(
    session: &[DecodedPacket],
    strategy: &PreprocStrategy,
    anon: &AnonymizationMap,
) -> Result<Vec<Vec<u8>>, SessionError> {
    strategy.validate()?;
    Ok(session.iter().map(|p| rewrite_packet(p, strategy, anon)).collect())
}

fn rewrite_packet(p: &DecodedPacket, s: &PreprocStrategy, anon: &AnonymizationMap) -> Vec<u8> {
    let mut bytes = p.frame.data.clone();
    if s.mac_anon {
        anon.rewrite(&mut bytes[0..6]);
        anon.rewrite(&mut bytes[6..12]);
    } else if s.mac_zero {
        bytes[0..12].fill(0);
    }

    let ip = p.ip_offset;
    if s.ip_anon {
        anon.rewrite(&mut bytes[ip + 12..ip + 16]);
        anon.rewrite(&mut bytes[ip + 16..ip + 20]);
    } else if s.ip_zero {
        bytes[ip + 12..ip + 20].fill(0);
    }

    let tp = p.transport_offset;
    if s.port_zero {
        bytes[tp..tp + 4].fill(0);
    }
    if s.udp_pad && p.protocol == Transport::Udp {
        let at = tp + 8;
        bytes.splice(at..at, std::iter::repeat_n(0u8, UDP_PAD_LEN));
    }

    if s.eth_removal {
        bytes.drain(..ip);
    }
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcap::{decode_packet, CaptureFrame};
    use crate::synth::FrameBuilder;

    fn decode(frame: Vec<u8>) -> DecodedPacket {
        decode_packet(CaptureFrame::new(0, 0, frame))
            .unwrap()
            .into_packet()
            .unwrap()
    }

    #[test]
    fn ids_cover_exactly_the_valid_combinations() {
        let mut valid = 0;
        for bits in 0u8..128 {
            let s = PreprocStrategy {
                eth_removal: bits & 1 != 0,
                mac_anon: bits & 2 != 0,
                mac_zero: bits & 4 != 0,
                ip_anon: bits & 8 != 0,
                ip_zero: bits & 16 != 0,
                port_zero: bits & 32 != 0,
                udp_pad: bits & 64 != 0,
            };
            if s.validate().is_ok() {
                valid += 1;
                assert!(s.id().is_some());
            } else {
                assert!(s.id().is_none());
            }
        }
        assert_eq!(valid, 24);
        assert!(PreprocStrategy::from_id(0).is_err());
        assert!(PreprocStrategy::from_id(25).is_err());
    }

    #[test]
    fn table_rows_spot_check() {
        let s2 = PreprocStrategy::from_id(2).unwrap();
        assert!(s2.eth_removal && s2.ip_anon && !s2.port_zero && !s2.udp_pad);
        let s7 = PreprocStrategy::from_id(7).unwrap();
        assert!(s7.eth_removal && s7.ip_zero && s7.port_zero && s7.udp_pad);
        let s16 = PreprocStrategy::from_id(16).unwrap();
        assert!(s16.mac_anon && s16.ip_zero && s16.port_zero && !s16.udp_pad);
        let s24 = PreprocStrategy::from_id(24).unwrap();
        assert!(s24.mac_zero && s24.ip_zero && s24.port_zero && !s24.udp_pad);
    }

    #[test]
    fn strategy_two_on_tcp() {
        let anon = AnonymizationMap::from_seed(3);
        let s = PreprocStrategy::from_id(2).unwrap();
        let a = decode(FrameBuilder::new().tcp(0x18).payload(vec![1; 10]).build());
        let b = decode(FrameBuilder::new().tcp(0x10).payload(vec![2; 20]).build());
        let out = apply_strategy(&[a.clone(), b], &s, &anon).unwrap();
        assert_eq!(out[0][0] >> 4, 4);
        assert_ne!(&out[0][12..16], &a.src_ip);
        assert_eq!(&out[0][12..20], &out[1][12..20]);
        assert_eq!(&out[0][out[0].len() - 10..], &[1; 10]);
    }

    #[test]
    fn strategy_twenty_four_zeroes() {
        let anon = AnonymizationMap::from_seed(3);
        let s = PreprocStrategy::from_id(24).unwrap();
        let p = decode(FrameBuilder::new().tcp(0x18).payload(vec![9; 4]).build());
        let out = apply_strategy(&[p], &s, &anon).unwrap();
        assert!(out[0][0..12].iter().all(|&b| b == 0));
        assert!(out[0][26..34].iter().all(|&b| b == 0));
        assert!(out[0][34..38].iter().all(|&b| b == 0));
    }

    #[test]
    fn udp_pad_layout() {
        let anon = AnonymizationMap::from_seed(3);
        let s = PreprocStrategy::from_id(1).unwrap();
        let p = decode(FrameBuilder::new().udp().payload(vec![0xee; 5]).build());
        let header = p.frame.data[34..42].to_vec();
        let out = apply_strategy(&[p], &s, &anon).unwrap();
        let mut expected = header;
        expected.extend_from_slice(&[0; 12]);
        expected.extend_from_slice(&[0xee; 5]);
        assert_eq!(&out[0][20..], expected.as_slice());
    }

    #[test]
    fn invalid_strategy_rejected() {
        let anon = AnonymizationMap::from_seed(3);
        let s = PreprocStrategy {
            eth_removal: true,
            mac_zero: true,
            ip_anon: true,
            ..Default::default()
        };
        assert!(matches!(
            apply_strategy(&[], &s, &anon),
            Err(SessionError::InvalidStrategy(_))
        ));
    }
}
