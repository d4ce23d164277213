//! Synthetic traffic: a raw frame builder, toy pcaps and a class-separable toy dataset.
//!
//! The frame builder writes header bytes straight from the RFC layouts and does
//! not share code with the decoder, so tests can use it as an independent oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pcap::CaptureFrame;
use crate::session::{Dataset, SessionVector};

#[derive(Debug, Clone)]
enum BuilderTransport {
    Tcp { flags: u8, options: Vec<u8> },
    Udp,
    Other(u8),
}

/// Byte-level Ethernet II / IPv4 / TCP|UDP frame builder.
#[derive(Debug, Clone)]
pub struct FrameBuilder {
    pub dst_mac: [u8; 6],
    pub src_mac: [u8; 6],
    vlan: Option<u16>,
    pub src_ip: [u8; 4],
    pub dst_ip: [u8; 4],
    ip_options: Vec<u8>,
    ttl: u8,
    ident: u16,
    pub src_port: u16,
    pub dst_port: u16,
    transport: BuilderTransport,
    pub payload: Vec<u8>,
}

impl Default for FrameBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl FrameBuilder {
    pub fn new() -> Self {
        Self {
            dst_mac: [0x02, 0, 0, 0, 0, 0x02],
            src_mac: [0x02, 0, 0, 0, 0, 0x01],
            vlan: None,
            src_ip: [10, 0, 0, 1],
            dst_ip: [10, 0, 0, 2],
            ip_options: Vec::new(),
            ttl: 64,
            ident: 0x1234,
            src_port: 40000,
            dst_port: 443,
            transport: BuilderTransport::Tcp {
                flags: 0x18,
                options: Vec::new(),
            },
            payload: Vec::new(),
        }
    }

    pub fn macs(mut self, src: [u8; 6], dst: [u8; 6]) -> Self {
        self.src_mac = src;
        self.dst_mac = dst;
        self
    }

    pub fn vlan(mut self, tci: u16) -> Self {
        self.vlan = Some(tci);
        self
    }

    pub fn ips(mut self, src: [u8; 4], dst: [u8; 4]) -> Self {
        self.src_ip = src;
        self.dst_ip = dst;
        self
    }

    /// IPv4 options, zero-padded to a multiple of four bytes.
    pub fn ip_options(mut self, mut opts: Vec<u8>) -> Self {
        while !opts.len().is_multiple_of(4) {
            opts.push(0);
        }
        self.ip_options = opts;
        self
    }

    pub fn ttl(mut self, ttl: u8) -> Self {
        self.ttl = ttl;
        self
    }

    pub fn ident(mut self, ident: u16) -> Self {
        self.ident = ident;
        self
    }

    pub fn ports(mut self, src: u16, dst: u16) -> Self {
        self.src_port = src;
        self.dst_port = dst;
        self
    }

    pub fn tcp(mut self, flags: u8) -> Self {
        self.transport = BuilderTransport::Tcp {
            flags,
            options: Vec::new(),
        };
        self
    }

    pub fn tcp_with_options(mut self, flags: u8, mut options: Vec<u8>) -> Self {
        while !options.len().is_multiple_of(4) {
            options.push(1);
        }
        self.transport = BuilderTransport::Tcp { flags, options };
        self
    }

    pub fn udp(mut self) -> Self {
        self.transport = BuilderTransport::Udp;
        self
    }

    pub fn ip_protocol(mut self, proto: u8) -> Self {
        self.transport = BuilderTransport::Other(proto);
        self
    }

    pub fn payload(mut self, payload: Vec<u8>) -> Self {
        self.payload = payload;
        self
    }

    pub fn ip_header_len(&self) -> usize {
        20 + self.ip_options.len()
    }

    pub fn transport_header_len(&self) -> usize {
        match &self.transport {
            BuilderTransport::Tcp { options, .. } => 20 + options.len(),
            BuilderTransport::Udp => 8,
            BuilderTransport::Other(_) => 0,
        }
    }

    pub fn build(&self) -> Vec<u8> {
        let mut f = Vec::with_capacity(64 + self.payload.len());
        f.extend_from_slice(&self.dst_mac);
        f.extend_from_slice(&self.src_mac);
        if let Some(tci) = self.vlan {
            f.extend_from_slice(&[0x81, 0x00]);
            f.extend_from_slice(&tci.to_be_bytes());
        }
        f.extend_from_slice(&[0x08, 0x00]);

        let (proto, transport) = match &self.transport {
            BuilderTransport::Tcp { flags, options } => {
                let mut t = Vec::with_capacity(20 + options.len());
                t.extend_from_slice(&self.src_port.to_be_bytes());
                t.extend_from_slice(&self.dst_port.to_be_bytes());
                t.extend_from_slice(&0x0102_0304u32.to_be_bytes());
                t.extend_from_slice(&0x0506_0708u32.to_be_bytes());
                let words = ((20 + options.len()) / 4) as u8;
                t.push(words << 4);
                t.push(*flags);
                t.extend_from_slice(&0xffffu16.to_be_bytes());
                t.extend_from_slice(&[0, 0, 0, 0]);
                t.extend_from_slice(options);
                (6u8, t)
            }
            BuilderTransport::Udp => {
                let mut t = Vec::with_capacity(8);
                t.extend_from_slice(&self.src_port.to_be_bytes());
                t.extend_from_slice(&self.dst_port.to_be_bytes());
                t.extend_from_slice(&((8 + self.payload.len()) as u16).to_be_bytes());
                t.extend_from_slice(&[0, 0]);
                (17u8, t)
            }
            BuilderTransport::Other(p) => (*p, Vec::new()),
        };

        let ihl = (self.ip_header_len() / 4) as u8;
        let total = (self.ip_header_len() + transport.len() + self.payload.len()) as u16;
        f.push(0x40 | ihl);
        f.push(0);
        f.extend_from_slice(&total.to_be_bytes());
        f.extend_from_slice(&self.ident.to_be_bytes());
        f.extend_from_slice(&0x4000u16.to_be_bytes());
        f.push(self.ttl);
        f.push(proto);
        f.extend_from_slice(&[0, 0]);
        f.extend_from_slice(&self.src_ip);
        f.extend_from_slice(&self.dst_ip);
        f.extend_from_slice(&self.ip_options);
        f.extend_from_slice(&transport);
        f.extend_from_slice(&self.payload);
        f
    }
}

fn class_band(class: u16, n_classes: u16) -> (u8, u8) {
    let width = 256.0 / n_classes as f64;
    let center = (class as f64 + 0.5) * width;
    let lo = (center - width * 0.3).max(0.0) as u8;
    let hi = (center + width * 0.3).min(255.0) as u8;
    (lo, hi)
}

fn toy_payload(rng: &mut ChaCha8Rng, class: u16, n_classes: u16, len: usize) -> Vec<u8> {
    let (lo, hi) = class_band(class, n_classes);
    (0..len)
        .map(|_| {
            if rng.gen_bool(0.4) {
                rng.gen_range(lo..=hi)
            } else {
                rng.gen()
            }
        })
        .collect()
}

/// Synthetic sessions for one class as raw frames: handshake, a DNS lookup and data
/// packets in both directions. Payload byte statistics depend on `class`.
pub fn toy_capture(class: u16, n_classes: u16, n_sessions: usize, seed: u64) -> Vec<CaptureFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((class as u64) << 32));
    let mut frames = Vec::new();
    let mut ts = 1_600_000_000u32;
    for s in 0..n_sessions {
        let client = [192, 168, (class % 250) as u8, rng.gen_range(2..250)];
        let server = [10, rng.gen(), rng.gen(), rng.gen_range(1..250)];
        let cport: u16 = rng.gen_range(32768..61000);
        let sport: u16 = 443 + class;
        let udp = s % 3 == 2;
        let mut push = |b: FrameBuilder, rng: &mut ChaCha8Rng| {
            ts += 1;
            frames.push(CaptureFrame::new(ts, rng.gen_range(0..1_000_000), b.build()));
        };
        push(
            FrameBuilder::new()
                .ips(client, [8, 8, 8, 8])
                .ports(cport.wrapping_add(1), 53)
                .udp()
                .payload(vec![0xaa; 30]),
            &mut rng,
        );
        let fwd = FrameBuilder::new()
            .ips(client, server)
            .ports(cport, sport)
            .ttl(64 - class as u8);
        let rev = FrameBuilder::new()
            .macs(fwd.dst_mac, fwd.src_mac)
            .ips(server, client)
            .ports(sport, cport)
            .ttl(120);
        if !udp {
            push(fwd.clone().tcp(0x02), &mut rng);
            push(rev.clone().tcp(0x12), &mut rng);
            push(fwd.clone().tcp(0x10), &mut rng);
        }
        for i in 0..rng.gen_range(3..8) {
            let len = rng.gen_range(40..400);
            let payload = toy_payload(&mut rng, class, n_classes, len);
            let b = if i % 2 == 0 { fwd.clone() } else { rev.clone() };
            let b = if udp { b.udp() } else { b.tcp(0x18) };
            push(b.payload(payload), &mut rng);
        }
        if !udp {
            push(fwd.clone().tcp(0x11), &mut rng);
        }
    }
    frames
}

/// Class-separable session vectors: a header-like prefix per packet followed by
/// payload whose bytes lean toward a class-specific value band.
pub fn toy_dataset(n_classes: u16, n_samples: usize, input_len: usize, seed: u64) -> Dataset {
    assert!(n_classes >= 1 && input_len > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n_samples)
        .map(|i| {
            let label = (i % n_classes as usize) as u16;
            let mut bytes = Vec::with_capacity(input_len);
            while bytes.len() < input_len {
                let payload_len = rng.gen_range(40..300);
                let header = FrameBuilder::new()
                    .ips([10, 0, label as u8, rng.gen()], [172, 16, rng.gen(), rng.gen()])
                    .ports(rng.gen_range(32768..61000), 443 + label)
                    .ident(rng.gen())
                    .tcp(0x18)
                    .build();
                bytes.extend_from_slice(&header[14..54]);
                bytes.extend(toy_payload(&mut rng, label, n_classes, payload_len));
            }
            let cut = rng.gen_range(input_len / 2..=input_len);
            bytes.truncate(cut);
            bytes.resize(input_len, 0);
            SessionVector { bytes, label }
        })
        .collect();
    Dataset {
        input_len,
        n_classes,
        samples,
    }
}
