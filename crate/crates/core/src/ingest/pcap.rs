use std::io::{ErrorKind, Read};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use crate::ingest::{FiveTuple, IngestError, PacketRecord, Timestamp, MAX_PAYLOAD};

const MAGIC_MICROS: u32 = 0xA1B2_C3D4;
const MAGIC_NANOS: u32 = 0xA1B2_3C4D;
const LINKTYPE_ETHERNET: u32 = 1;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86DD;
const ETHERTYPE_VLAN: u16 = 0x8100;
const ETHERTYPE_QINQ: u16 = 0x88A8;

pub const PROTO_ICMP: u8 = 1;
pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;
pub const PROTO_ICMPV6: u8 = 58;

/// Per-capture counters. Skipped frames never abort parsing.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CaptureStats {
    pub frames: usize,
    /// Frames cut short, either by the end of the stream or by a header
    /// claiming more bytes than were captured.
    pub truncated: usize,
    /// Well-formed frames that do not carry IPv4/IPv6 with TCP, UDP or ICMP.
    pub unsupported: usize,
}

impl CaptureStats {
    pub fn skipped(&self) -> usize {
        self.truncated + self.unsupported
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedCapture {
    pub records: Vec<PacketRecord>,
    pub stats: CaptureStats,
}

#[derive(Debug)]
enum FrameError {
    Truncated,
    Unsupported,
}

#[derive(Clone, Copy)]
struct Format {
    big_endian: bool,
    nanos: bool,
}

impl Format {
    fn u32(&self, b: &[u8]) -> u32 {
        let arr: [u8; 4] = b[..4].try_into().unwrap();
        if self.big_endian {
            u32::from_be_bytes(arr)
        } else {
            u32::from_le_bytes(arr)
        }
    }
}

/// Fills `buf` completely; `Ok(n < buf.len())` only at end of stream.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Decodes a classic libpcap stream (micro- or nanosecond, either byte order)
/// with Ethernet framing.
pub fn parse_capture<R: Read>(mut stream: R) -> Result<ParsedCapture, IngestError> {
    let mut header = [0u8; 24];
    if read_full(&mut stream, &mut header)? < header.len() {
        return Err(IngestError::MalformedHeader("capture shorter than the 24-byte global header".into()));
    }
    let magic = u32::from_le_bytes(header[..4].try_into().unwrap());
    let format = match magic {
        MAGIC_MICROS => Format { big_endian: false, nanos: false },
        MAGIC_NANOS => Format { big_endian: false, nanos: true },
        m if m.swap_bytes() == MAGIC_MICROS => Format { big_endian: true, nanos: false },
        m if m.swap_bytes() == MAGIC_NANOS => Format { big_endian: true, nanos: true },
        m => return Err(IngestError::MalformedHeader(format!("bad magic {m:#010x}"))),
    };
    let link = format.u32(&header[20..24]);
    if link != LINKTYPE_ETHERNET {
        return Err(IngestError::UnsupportedLinkType(link));
    }

    let mut out = ParsedCapture::default();
    let mut rec_header = [0u8; 16];
    let mut frame = Vec::new();
    loop {
        let got = read_full(&mut stream, &mut rec_header)?;
        if got == 0 {
            break;
        }
        out.stats.frames += 1;
        if got < rec_header.len() {
            out.stats.truncated += 1;
            break;
        }
        let secs = format.u32(&rec_header[0..4]);
        let frac = format.u32(&rec_header[4..8]);
        let incl = format.u32(&rec_header[8..12]) as usize;
        frame.resize(incl, 0);
        if read_full(&mut stream, &mut frame)? < incl {
            out.stats.truncated += 1;
            break;
        }
        let nanos = if format.nanos { frac } else { frac.saturating_mul(1000) };
        let timestamp = Timestamp { secs: secs as u64, nanos };
        match decode_ethernet(&frame) {
            Ok((tuple, payload)) => {
                let payload = payload[..payload.len().min(MAX_PAYLOAD)].to_vec();
                out.records.push(PacketRecord { tuple, timestamp, payload });
            }
            Err(FrameError::Truncated) => out.stats.truncated += 1,
            Err(FrameError::Unsupported) => out.stats.unsupported += 1,
        }
    }
    Ok(out)
}

fn get(b: &[u8], range: std::ops::Range<usize>) -> Result<&[u8], FrameError> {
    b.get(range).ok_or(FrameError::Truncated)
}

fn be16(b: &[u8], at: usize) -> Result<u16, FrameError> {
    let s = get(b, at..at + 2)?;
    Ok(u16::from_be_bytes([s[0], s[1]]))
}

fn decode_ethernet(frame: &[u8]) -> Result<(FiveTuple, &[u8]), FrameError> {
    let mut ethertype = be16(frame, 12)?;
    let mut offset = 14;
    while ethertype == ETHERTYPE_VLAN || ethertype == ETHERTYPE_QINQ {
        ethertype = be16(frame, offset + 2)?;
        offset += 4;
    }
    let l3 = &frame[offset.min(frame.len())..];
    match ethertype {
        ETHERTYPE_IPV4 => decode_ipv4(l3),
        ETHERTYPE_IPV6 => decode_ipv6(l3),
        _ => Err(FrameError::Unsupported),
    }
}

fn decode_ipv4(p: &[u8]) -> Result<(FiveTuple, &[u8]), FrameError> {
    let first = *p.first().ok_or(FrameError::Truncated)?;
    if first >> 4 != 4 {
        return Err(FrameError::Unsupported);
    }
    let ihl = (first & 0x0F) as usize * 4;
    let total = be16(p, 2)? as usize;
    if ihl < 20 || total < ihl {
        return Err(FrameError::Unsupported);
    }
    // Ethernet trailers past the IP total length are padding, not payload.
    let packet = get(p, 0..total)?;
    get(packet, 0..ihl)?;
    let frag = be16(packet, 6)?;
    if frag & 0x3FFF != 0 {
        return Err(FrameError::Unsupported);
    }
    let protocol = packet[9];
    let src = IpAddr::V4(Ipv4Addr::new(packet[12], packet[13], packet[14], packet[15]));
    let dst = IpAddr::V4(Ipv4Addr::new(packet[16], packet[17], packet[18], packet[19]));
    decode_transport(src, dst, protocol, &packet[ihl..])
}

fn decode_ipv6(p: &[u8]) -> Result<(FiveTuple, &[u8]), FrameError> {
    let fixed = get(p, 0..40)?;
    if fixed[0] >> 4 != 6 {
        return Err(FrameError::Unsupported);
    }
    let payload_len = be16(fixed, 4)? as usize;
    let mut next = fixed[6];
    let src: [u8; 16] = fixed[8..24].try_into().unwrap();
    let dst: [u8; 16] = fixed[24..40].try_into().unwrap();
    let mut rest = get(p, 40..40 + payload_len)?;
    loop {
        match next {
            0 | 43 | 60 => {
                let h = get(rest, 0..2)?;
                let len = (h[1] as usize + 1) * 8;
                next = h[0];
                rest = get(rest, len..rest.len())?;
            }
            44 => {
                let h = get(rest, 0..8)?;
                if be16(h, 2)? & 0xFFF9 != 0 {
                    return Err(FrameError::Unsupported);
                }
                next = h[0];
                rest = &rest[8..];
            }
            _ => break,
        }
    }
    decode_transport(IpAddr::V6(Ipv6Addr::from(src)), IpAddr::V6(Ipv6Addr::from(dst)), next, rest)
}

fn decode_transport(src: IpAddr, dst: IpAddr, protocol: u8, seg: &[u8]) -> Result<(FiveTuple, &[u8]), FrameError> {
    let tuple = |src_port, dst_port| FiveTuple { src_addr: src, dst_addr: dst, src_port, dst_port, protocol };
    match protocol {
        PROTO_TCP => {
            let header_len = (get(seg, 12..13)?[0] >> 4) as usize * 4;
            if header_len < 20 {
                return Err(FrameError::Unsupported);
            }
            let payload = get(seg, header_len..seg.len())?;
            Ok((tuple(be16(seg, 0)?, be16(seg, 2)?), payload))
        }
        PROTO_UDP => {
            let len = be16(seg, 4)? as usize;
            if len < 8 {
                return Err(FrameError::Unsupported);
            }
            let payload = get(seg, 8..len)?;
            Ok((tuple(be16(seg, 0)?, be16(seg, 2)?), payload))
        }
        PROTO_ICMP | PROTO_ICMPV6 => Ok((tuple(0, 0), get(seg, 8..seg.len())?)),
        _ => Err(FrameError::Unsupported),
    }
}
