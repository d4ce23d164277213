//! Byte-level expectations for header rewrites, computed from builder layouts.

use std::collections::HashMap;

use flownas_core::pcap::{decode_packet, CaptureFrame, DecodedPacket};
use flownas_core::synth::FrameBuilder;
use rand::Rng;

/// One row of the strategy table: Eth. Rem., MAC Anon., MAC Zero, IP Anon., IP Zero, Port Zero, UDP Pad.
pub type Row = [bool; 7];

const Y: bool = true;
const N: bool = false;

pub const TABLE: [Row; 24] = [
    [Y, N, N, Y, N, N, Y],
    [Y, N, N, Y, N, N, N],
    [Y, N, N, Y, N, Y, Y],
    [Y, N, N, Y, N, Y, N],
    [Y, N, N, N, Y, N, Y],
    [Y, N, N, N, Y, N, N],
    [Y, N, N, N, Y, Y, Y],
    [Y, N, N, N, Y, Y, N],
    [N, Y, N, Y, N, N, Y],
    [N, Y, N, Y, N, N, N],
    [N, Y, N, Y, N, Y, Y],
    [N, Y, N, Y, N, Y, N],
    [N, Y, N, N, Y, N, Y],
    [N, Y, N, N, Y, N, N],
    [N, Y, N, N, Y, Y, Y],
    [N, Y, N, N, Y, Y, N],
    [N, N, Y, Y, N, N, Y],
    [N, N, Y, Y, N, N, N],
    [N, N, Y, Y, N, Y, Y],
    [N, N, Y, Y, N, Y, N],
    [N, N, Y, N, Y, N, Y],
    [N, N, Y, N, Y, N, N],
    [N, N, Y, N, Y, Y, Y],
    [N, N, Y, N, Y, Y, N],
];

#[derive(Debug, Clone)]
pub struct PacketSpec {
    pub builder: FrameBuilder,
    pub vlan: bool,
    pub udp: bool,
}

impl PacketSpec {
    pub fn frame(&self) -> Vec<u8> {
        self.builder.build()
    }

    pub fn eth_len(&self) -> usize {
        if self.vlan {
            18
        } else {
            14
        }
    }

    pub fn ip_off(&self) -> usize {
        self.eth_len()
    }

    pub fn tp_off(&self) -> usize {
        self.ip_off() + self.builder.ip_header_len()
    }

    pub fn decode(&self) -> DecodedPacket {
        decode_packet(CaptureFrame::new(0, 0, self.frame()))
            .expect("decodes")
            .into_packet()
            .expect("is tcp/udp")
    }
}

fn mac<R: Rng>(rng: &mut R) -> [u8; 6] {
    let mut m: [u8; 6] = rng.gen();
    m[0] &= 0xfe;
    m
}

/// A bidirectional session of 1-6 packets with random addresses, options and payloads.
pub fn random_session<R: Rng>(rng: &mut R, udp: bool) -> Vec<PacketSpec> {
    let (ma, mb) = (mac(rng), mac(rng));
    let (ia, ib): ([u8; 4], [u8; 4]) = (rng.gen(), rng.gen());
    let (pa, pb): (u16, u16) = (rng.gen_range(1024..65535), rng.gen_range(1..1024));
    let vlan = rng.gen_bool(0.2);
    let ip_opts = if rng.gen_bool(0.2) {
        vec![1u8; rng.gen_range(1..=8)]
    } else {
        Vec::new()
    };
    (0..rng.gen_range(1..=6))
        .map(|_| {
            let fwd = rng.gen_bool(0.5);
            let mut b = FrameBuilder::new()
                .ttl(rng.gen())
                .ident(rng.gen())
                .payload((0..rng.gen_range(1..200)).map(|_| rng.gen()).collect());
            b = if fwd {
                b.macs(ma, mb).ips(ia, ib).ports(pa, pb)
            } else {
                b.macs(mb, ma).ips(ib, ia).ports(pb, pa)
            };
            if vlan {
                b = b.vlan(rng.gen_range(1..4095));
            }
            if !ip_opts.is_empty() {
                b = b.ip_options(ip_opts.clone());
            }
            b = if udp {
                b.udp()
            } else if rng.gen_bool(0.3) {
                b.tcp_with_options(0x18, vec![2, 4, 5, 0xb4])
            } else {
                b.tcp(0x18)
            };
            PacketSpec { builder: b, vlan, udp }
        })
        .collect()
}

/// Original-to-pseudonym pairs seen so far, checked for consistency and injectivity.
#[derive(Default)]
pub struct PseudonymLog {
    forward: HashMap<Vec<u8>, Vec<u8>>,
    backward: HashMap<Vec<u8>, Vec<u8>>,
}

impl PseudonymLog {
    pub fn record(&mut self, original: &[u8], pseudonym: &[u8]) -> Result<(), String> {
        if original == pseudonym {
            return Err(format!("{original:?} left unchanged"));
        }
        if let Some(p) = self.forward.get(original) {
            if p != pseudonym {
                return Err(format!("{original:?} mapped to both {p:?} and {pseudonym:?}"));
            }
        }
        if let Some(o) = self.backward.get(pseudonym) {
            if o != original {
                return Err(format!("{o:?} and {original:?} share pseudonym {pseudonym:?}"));
            }
        }
        self.forward.insert(original.to_vec(), pseudonym.to_vec());
        self.backward.insert(pseudonym.to_vec(), original.to_vec());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }
}

/// Checks one rewritten packet against `row`. Anonymized fields are logged in `log`.
pub fn check_packet(spec: &PacketSpec, row: &Row, out: &[u8], log: &mut PseudonymLog) -> Result<(), String> {
    let [eth_rem, mac_anon, mac_zero, ip_anon, ip_zero, port_zero, udp_pad] = *row;
    let raw = spec.frame();
    let ip = spec.ip_off();
    let tp = spec.tp_off();
    let mut exp = raw.clone();
    let mut anon_fields: Vec<(usize, usize)> = Vec::new();
    if mac_zero {
        exp[0..12].fill(0);
    }
    if mac_anon {
        anon_fields.push((0, 6));
        anon_fields.push((6, 6));
    }
    if ip_zero {
        exp[ip + 12..ip + 20].fill(0);
    }
    if ip_anon {
        anon_fields.push((ip + 12, 4));
        anon_fields.push((ip + 16, 4));
    }
    if port_zero {
        exp[tp..tp + 4].fill(0);
    }
    let padded = udp_pad && spec.udp;
    if padded {
        exp.splice(tp + 8..tp + 8, [0u8; 12]);
    }
    let shift = if eth_rem { spec.eth_len() } else { 0 };
    let exp = &exp[shift..];
    if out.len() != exp.len() {
        return Err(format!("length {} expected {}", out.len(), exp.len()));
    }
    let mut mask = vec![false; raw.len()];
    for &(at, len) in &anon_fields {
        log.record(&raw[at..at + len], &out[at - shift..at - shift + len])?;
        mask[at..at + len].fill(true);
    }
    if padded {
        mask.splice(tp + 8..tp + 8, [false; 12]);
    }
    for (i, ((&a, &e), &m)) in out.iter().zip(exp).zip(&mask[shift..]).enumerate() {
        if !m && a != e {
            return Err(format!("byte {i}: {a:#04x} expected {e:#04x}"));
        }
    }
    let payload = &spec.builder.payload;
    if &out[out.len() - payload.len()..] != payload.as_slice() {
        return Err("payload bytes changed".into());
    }
    if spec.udp {
        let t = tp - shift;
        let header = out.len() - payload.len() - t;
        let want = if padded { 20 } else { 8 };
        if header != want {
            return Err(format!("udp transport span {header}, expected {want}"));
        }
    }
    Ok(())
}
