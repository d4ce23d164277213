//! Classic libpcap reading and Ethernet/IPv4/TCP/UDP header decoding.
//!
//! Only the classic container is understood (microsecond and nanosecond
//! variants, either byte order). Frames that are not Ethernet II carrying
//! IPv4 with a TCP or UDP payload decode to [`Decoded::Skip`].

use std::io::Read;

use thiserror::Error;

pub const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
pub const MAGIC_NANOS: u32 = 0xa1b2_3c4d;
pub const LINKTYPE_ETHERNET: u32 = 1;

const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_VLAN: u16 = 0x8100;
const ETH_HEADER_LEN: usize = 14;
const VLAN_TAG_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("not a classic pcap file (magic {0:#010x})")]
    BadMagic(u32),
    #[error("truncated record {index}: expected {expected} bytes, found {found}")]
    TruncatedRecord {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("record {index} claims captured length {captured} > original length {original}")]
    InvalidRecord { index: usize, captured: u32, original: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("malformed header: {0}")]
    MalformedHeader(&'static str),
}

/// One link-layer record as stored in the capture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureFrame {
    pub ts_sec: u32,
    /// Always microseconds, nanosecond captures are scaled down.
    pub ts_usec: u32,
    pub captured_len: u32,
    pub original_len: u32,
    pub data: Vec<u8>,
}

impl CaptureFrame {
    pub fn new(ts_sec: u32, ts_usec: u32, data: Vec<u8>) -> Self {
        let len = data.len() as u32;
        Self {
            ts_sec,
            ts_usec,
            captured_len: len,
            original_len: len,
            data,
        }
    }

    pub fn timestamp_micros(&self) -> u64 {
        self.ts_sec as u64 * 1_000_000 + self.ts_usec as u64
    }
}

/// Sequential reader over the records of a classic pcap stream.
pub struct CaptureReader<R> {
    inner: R,
    swapped: bool,
    nanos: bool,
    link_type: u32,
    snaplen: u32,
    index: usize,
    done: bool,
}

impl<R: Read> CaptureReader<R> {
    pub fn new(mut inner: R) -> Result<Self, PcapError> {
        let mut header = [0u8; GLOBAL_HEADER_LEN];
        let got = read_full(&mut inner, &mut header)?;
        if got < 4 {
            let mut m = [0u8; 4];
            m[..got].copy_from_slice(&header[..got]);
            return Err(PcapError::BadMagic(u32::from_le_bytes(m)));
        }
        let magic = u32::from_le_bytes([header[0], header[1], header[2], header[3]]);
        let (swapped, nanos) = match magic {
            MAGIC_MICROS => (false, false),
            MAGIC_NANOS => (false, true),
            m if m == MAGIC_MICROS.swap_bytes() => (true, false),
            m if m == MAGIC_NANOS.swap_bytes() => (true, true),
            other => return Err(PcapError::BadMagic(other)),
        };
        if got < GLOBAL_HEADER_LEN {
            return Err(PcapError::TruncatedRecord {
                index: 0,
                expected: GLOBAL_HEADER_LEN,
                found: got,
            });
        }
        let read32 = |off: usize| {
            let v = u32::from_le_bytes([header[off], header[off + 1], header[off + 2], header[off + 3]]);
            if swapped {
                v.swap_bytes()
            } else {
                v
            }
        };
        Ok(Self {
            snaplen: read32(16),
            link_type: read32(20),
            inner,
            swapped,
            nanos,
            index: 0,
            done: false,
        })
    }

    pub fn link_type(&self) -> u32 {
        self.link_type
    }

    pub fn snaplen(&self) -> u32 {
        self.snaplen
    }

    pub fn is_nanosecond(&self) -> bool {
        self.nanos
    }

    fn u32_at(&self, buf: &[u8], off: usize) -> u32 {
        let v = u32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]]);
        if self.swapped {
            v.swap_bytes()
        } else {
            v
        }
    }

    fn next_frame(&mut self) -> Result<Option<CaptureFrame>, PcapError> {
        let mut rec = [0u8; RECORD_HEADER_LEN];
        let got = read_full(&mut self.inner, &mut rec)?;
        if got == 0 {
            return Ok(None);
        }
        if got < RECORD_HEADER_LEN {
            return Err(PcapError::TruncatedRecord {
                index: self.index,
                expected: RECORD_HEADER_LEN,
                found: got,
            });
        }
        let ts_sec = self.u32_at(&rec, 0);
        let ts_frac = self.u32_at(&rec, 4);
        let captured = self.u32_at(&rec, 8);
        let original = self.u32_at(&rec, 12);
        if captured > original {
            return Err(PcapError::InvalidRecord {
                index: self.index,
                captured,
                original,
            });
        }
        let mut data = Vec::new();
        (&mut self.inner).take(captured as u64).read_to_end(&mut data)?;
        if data.len() < captured as usize {
            return Err(PcapError::TruncatedRecord {
                index: self.index,
                expected: captured as usize,
                found: data.len(),
            });
        }
        let ts_usec = if self.nanos { ts_frac / 1000 } else { ts_frac };
        self.index += 1;
        Ok(Some(CaptureFrame {
            ts_sec,
            ts_usec,
            captured_len: captured,
            original_len: original,
            data,
        }))
    }
}

impl<R: Read> Iterator for CaptureReader<R> {
    type Item = Result<CaptureFrame, PcapError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_frame() {
            Ok(Some(f)) => Some(Ok(f)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Reads every frame of a capture held in memory.
pub fn read_capture(bytes: &[u8]) -> Result<Vec<CaptureFrame>, PcapError> {
    CaptureReader::new(bytes)?.collect()
}

/// Serializes frames as a little-endian microsecond pcap with Ethernet link type.
pub fn write_capture(frames: &[CaptureFrame]) -> Vec<u8> {
    let mut out = Vec::with_capacity(GLOBAL_HEADER_LEN + frames.len() * 80);
    out.extend_from_slice(&MAGIC_MICROS.to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&0i32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&65535u32.to_le_bytes());
    out.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
    for f in frames {
        out.extend_from_slice(&f.ts_sec.to_le_bytes());
        out.extend_from_slice(&f.ts_usec.to_le_bytes());
        out.extend_from_slice(&(f.data.len() as u32).to_le_bytes());
        out.extend_from_slice(&f.original_len.max(f.data.len() as u32).to_le_bytes());
        out.extend_from_slice(&f.data);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Transport {
    Tcp,
    Udp,
}

impl Transport {
    pub fn ip_protocol(self) -> u8 {
        match self {
            Transport::Tcp => 6,
            Transport::Udp => 17,
        }
    }
}

/// A frame whose headers have been located.
///
/// All offsets index into `frame.data`. Any Ethernet trailer beyond the IP
/// datagram's total length is trimmed from `frame.data` during decoding so
/// that `payload_len` counts transport payload only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedPacket {
    pub frame: CaptureFrame,
    pub eth_offset: usize,
    pub ip_offset: usize,
    pub transport_offset: usize,
    pub payload_offset: usize,
    pub src_mac: [u8; 6],
    pub dst_mac: [u8; 6],
    pub src_ip: [u8; 4],
    pub dst_ip: [u8; 4],
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Transport,
    pub tcp_flags: Option<u8>,
    pub payload_len: usize,
}

impl DecodedPacket {
    pub fn transport_header_len(&self) -> usize {
        self.payload_offset - self.transport_offset
    }

    pub fn payload(&self) -> &[u8] {
        &self.frame.data[self.payload_offset..]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    Packet(Box<DecodedPacket>),
    Skip,
}

impl Decoded {
    pub fn into_packet(self) -> Option<DecodedPacket> {
        match self {
            Decoded::Packet(p) => Some(*p),
            Decoded::Skip => None,
        }
    }
}

fn be16(d: &[u8], off: usize) -> u16 {
    u16::from_be_bytes([d[off], d[off + 1]])
}

/// Locates the Ethernet, IPv4 and transport headers of a frame.
///
/// A single 802.1Q tag is unwrapped. Non-initial IPv4 fragments are skipped.
pub fn decode_packet(frame: CaptureFrame) -> Result<Decoded, DecodeError> {
    use DecodeError::MalformedHeader;

    let data = &frame.data;
    if data.len() < ETH_HEADER_LEN {
        return Err(MalformedHeader("frame shorter than Ethernet header"));
    }
    let mut ethertype = be16(data, 12);
    let mut ip_offset = ETH_HEADER_LEN;
    if ethertype == ETHERTYPE_VLAN {
        if data.len() < ETH_HEADER_LEN + VLAN_TAG_LEN {
            return Err(MalformedHeader("truncated VLAN tag"));
        }
        ethertype = be16(data, 16);
        ip_offset += VLAN_TAG_LEN;
    }
    if ethertype != ETHERTYPE_IPV4 {
        return Ok(Decoded::Skip);
    }
    if data.len() < ip_offset + 20 {
        return Err(MalformedHeader("frame shorter than IPv4 header"));
    }
    let vihl = data[ip_offset];
    if vihl >> 4 != 4 {
        return Err(MalformedHeader("IPv4 ethertype with non-4 version"));
    }
    let ihl = (vihl & 0x0f) as usize;
    if ihl < 5 {
        return Err(MalformedHeader("IHL < 5"));
    }
    let ip_header_len = ihl * 4;
    if data.len() < ip_offset + ip_header_len {
        return Err(MalformedHeader("frame shorter than IPv4 header with options"));
    }
    let total_len = be16(data, ip_offset + 2) as usize;
    if total_len < ip_header_len {
        return Err(MalformedHeader("IPv4 total length below header length"));
    }
    let frag = be16(data, ip_offset + 6);
    if frag & 0x1fff != 0 {
        return Ok(Decoded::Skip);
    }
    let protocol = match data[ip_offset + 9] {
        6 => Transport::Tcp,
        17 => Transport::Udp,
        _ => return Ok(Decoded::Skip),
    };
    let transport_offset = ip_offset + ip_header_len;
    let (header_len, tcp_flags) = match protocol {
        Transport::Tcp => {
            if data.len() < transport_offset + 20 {
                return Err(MalformedHeader("frame shorter than TCP header"));
            }
            let doff = (data[transport_offset + 12] >> 4) as usize;
            if doff < 5 {
                return Err(MalformedHeader("TCP data offset < 5"));
            }
            (doff * 4, Some(data[transport_offset + 13]))
        }
        Transport::Udp => (8, None),
    };
    let payload_offset = transport_offset + header_len;
    if data.len() < payload_offset {
        return Err(MalformedHeader("frame shorter than transport header"));
    }
    let end = (ip_offset + total_len).min(data.len());
    if end < payload_offset {
        return Err(MalformedHeader("IPv4 total length ends inside transport header"));
    }

    let mut frame = frame;
    frame.data.truncate(end);
    frame.captured_len = end as u32;
    let d = &frame.data;
    let mut src_mac = [0u8; 6];
    let mut dst_mac = [0u8; 6];
    dst_mac.copy_from_slice(&d[0..6]);
    src_mac.copy_from_slice(&d[6..12]);
    let mut src_ip = [0u8; 4];
    let mut dst_ip = [0u8; 4];
    src_ip.copy_from_slice(&d[ip_offset + 12..ip_offset + 16]);
    dst_ip.copy_from_slice(&d[ip_offset + 16..ip_offset + 20]);
    let src_port = be16(d, transport_offset);
    let dst_port = be16(d, transport_offset + 2);
    let payload_len = end - payload_offset;
    Ok(Decoded::Packet(Box::new(DecodedPacket {
        frame,
        eth_offset: 0,
        ip_offset,
        transport_offset,
        payload_offset,
        src_mac,
        dst_mac,
        src_ip,
        dst_ip,
        src_port,
        dst_port,
        protocol,
        tcp_flags,
        payload_len,
    })))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tcp_frame(payload: &[u8]) -> Vec<u8> {
        let mut f = vec![0u8; 54];
        f[0..6].copy_from_slice(&[1, 2, 3, 4, 5, 6]);
        f[6..12].copy_from_slice(&[7, 8, 9, 10, 11, 12]);
        f[12..14].copy_from_slice(&[0x08, 0x00]);
        f[14] = 0x45;
        let total = (40 + payload.len()) as u16;
        f[16..18].copy_from_slice(&total.to_be_bytes());
        f[23] = 6;
        f[26..30].copy_from_slice(&[10, 0, 0, 1]);
        f[30..34].copy_from_slice(&[10, 0, 0, 2]);
        f[34..36].copy_from_slice(&443u16.to_be_bytes());
        f[36..38].copy_from_slice(&50000u16.to_be_bytes());
        f[46] = 5 << 4;
        f[47] = 0x12;
        f.extend_from_slice(payload);
        f
    }

    #[test]
    fn empty_capture_has_no_frames() {
        let bytes = write_capture(&[]);
        assert!(read_capture(&bytes).unwrap().is_empty());
    }

    #[test]
    fn pcapng_magic_is_rejected() {
        let mut bytes = write_capture(&[]);
        bytes[0..4].copy_from_slice(&0x0a0d_0d0au32.to_le_bytes());
        assert!(matches!(read_capture(&bytes), Err(PcapError::BadMagic(0x0a0d_0d0a))));
    }

    #[test]
    fn truncated_record_is_reported() {
        let mut bytes = write_capture(&[CaptureFrame::new(1, 2, vec![0xab; 60])]);
        bytes.truncate(bytes.len() - 10);
        assert!(matches!(
            read_capture(&bytes),
            Err(PcapError::TruncatedRecord {
                index: 0,
                expected: 60,
                found: 50
            })
        ));
    }

    #[test]
    fn nanosecond_timestamps_are_scaled() {
        let mut bytes = write_capture(&[CaptureFrame::new(5, 1_234_567, vec![0; 20])]);
        bytes[0..4].copy_from_slice(&MAGIC_NANOS.to_le_bytes());
        let frames = read_capture(&bytes).unwrap();
        assert_eq!(frames[0].ts_usec, 1234);
    }

    #[test]
    fn arp_is_skipped() {
        let mut f = vec![0u8; 42];
        f[12..14].copy_from_slice(&[0x08, 0x06]);
        assert_eq!(decode_packet(CaptureFrame::new(0, 0, f)).unwrap(), Decoded::Skip);
    }

    #[test]
    fn minimal_tcp_offsets() {
        let p = decode_packet(CaptureFrame::new(0, 0, tcp_frame(&[])))
            .unwrap()
            .into_packet()
            .unwrap();
        assert_eq!((p.ip_offset, p.transport_offset, p.payload_offset), (14, 34, 54));
        assert_eq!(p.payload_len, 0);
        assert_eq!(p.tcp_flags, Some(0x12));
        assert_eq!(p.src_port, 443);
    }

    #[test]
    fn ethernet_trailer_is_trimmed() {
        let mut f = tcp_frame(&[]);
        f.extend_from_slice(&[0; 6]);
        let p = decode_packet(CaptureFrame::new(0, 0, f))
            .unwrap()
            .into_packet()
            .unwrap();
        assert_eq!(p.payload_len, 0);
        assert_eq!(p.frame.captured_len as usize, p.frame.data.len());
    }

    #[test]
    fn ihl_below_five_is_malformed() {
        let mut f = tcp_frame(&[]);
        f[14] = 0x44;
        assert!(decode_packet(CaptureFrame::new(0, 0, f)).is_err());
    }

    #[test]
    fn later_fragment_is_skipped() {
        let mut f = tcp_frame(&[1, 2, 3]);
        f[20..22].copy_from_slice(&0x0010u16.to_be_bytes());
        assert_eq!(decode_packet(CaptureFrame::new(0, 0, f)).unwrap(), Decoded::Skip);
    }

    #[test]
    fn vlan_tag_is_unwrapped() {
        let base = tcp_frame(&[9, 9]);
        let mut f = base[..12].to_vec();
        f.extend_from_slice(&[0x81, 0x00, 0x00, 0x05]);
        f.extend_from_slice(&base[12..]);
        let p = decode_packet(CaptureFrame::new(0, 0, f))
            .unwrap()
            .into_packet()
            .unwrap();
        assert_eq!(p.ip_offset, 18);
        assert_eq!(p.payload_len, 2);
    }

    #[test]
    fn every_truncation_is_handled() {
        let f = tcp_frame(&[1, 2, 3, 4]);
        for cut in 0..f.len() {
            let _ = decode_packet(CaptureFrame::new(0, 0, f[..cut].to_vec()));
        }
    }
}
