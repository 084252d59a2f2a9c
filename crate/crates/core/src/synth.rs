//! Synthetic labeled captures: a libpcap writer, minimal frame builders and
//! a corpus generator whose classes occupy disjoint byte ranges.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ingest::pcap::{PROTO_ICMP, PROTO_ICMPV6, PROTO_TCP, PROTO_UDP};
use crate::ingest::{FiveTuple, Timestamp};

/// Classic microsecond-resolution little-endian capture with Ethernet
/// framing.
pub struct PcapWriter<W: Write> {
    out: W,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        out.write_all(&0xA1B2_C3D4u32.to_le_bytes())?;
        out.write_all(&2u16.to_le_bytes())?;
        out.write_all(&4u16.to_le_bytes())?;
        out.write_all(&[0; 8])?;
        out.write_all(&65_535u32.to_le_bytes())?;
        out.write_all(&1u32.to_le_bytes())?;
        Ok(Self { out })
    }

    pub fn write_frame(&mut self, ts: Timestamp, frame: &[u8]) -> io::Result<()> {
        self.out.write_all(&(ts.secs as u32).to_le_bytes())?;
        self.out.write_all(&(ts.nanos / 1000).to_le_bytes())?;
        let len = (frame.len() as u32).to_le_bytes();
        self.out.write_all(&len)?;
        self.out.write_all(&len)?;
        self.out.write_all(frame)
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_IPV6: u16 = 0x86DD;
pub const ETHERTYPE_ARP: u16 = 0x0806;

pub fn ethernet_frame(ethertype: u16, body: &[u8]) -> Vec<u8> {
    let mut f = vec![0x02, 0, 0, 0, 0, 1, 0x02, 0, 0, 0, 0, 2];
    f.extend_from_slice(&ethertype.to_be_bytes());
    f.extend_from_slice(body);
    f
}

/// IPv4 header without options; the checksum is left at zero.
pub fn ipv4_packet(src: Ipv4Addr, dst: Ipv4Addr, protocol: u8, body: &[u8]) -> Vec<u8> {
    let mut p = vec![0x45, 0];
    p.extend_from_slice(&((20 + body.len()) as u16).to_be_bytes());
    p.extend_from_slice(&[0, 0, 0x40, 0, 64, protocol, 0, 0]);
    p.extend_from_slice(&src.octets());
    p.extend_from_slice(&dst.octets());
    p.extend_from_slice(body);
    p
}

pub fn ipv6_packet(src: Ipv6Addr, dst: Ipv6Addr, next_header: u8, body: &[u8]) -> Vec<u8> {
    let mut p = vec![0x60, 0, 0, 0];
    p.extend_from_slice(&(body.len() as u16).to_be_bytes());
    p.extend_from_slice(&[next_header, 64]);
    p.extend_from_slice(&src.octets());
    p.extend_from_slice(&dst.octets());
    p.extend_from_slice(body);
    p
}

pub fn tcp_segment(src_port: u16, dst_port: u16, payload: &[u8]) -> Vec<u8> {
    let mut s = Vec::with_capacity(20 + payload.len());
    s.extend_from_slice(&src_port.to_be_bytes());
    s.extend_from_slice(&dst_port.to_be_bytes());
    s.extend_from_slice(&[0, 0, 0, 1, 0, 0, 0, 0, 0x50, 0x18, 0xFF, 0xFF, 0, 0, 0, 0]);
    s.extend_from_slice(payload);
    s
}

pub fn udp_datagram(src_port: u16, dst_port: u16, payload: &[u8]) -> Vec<u8> {
    let mut s = Vec::with_capacity(8 + payload.len());
    s.extend_from_slice(&src_port.to_be_bytes());
    s.extend_from_slice(&dst_port.to_be_bytes());
    s.extend_from_slice(&((8 + payload.len()) as u16).to_be_bytes());
    s.extend_from_slice(&[0, 0]);
    s.extend_from_slice(payload);
    s
}

/// Echo request: 8-byte header then the payload.
pub fn icmp_message(payload: &[u8]) -> Vec<u8> {
    let mut s = vec![8, 0, 0, 0, 0, 1, 0, 1];
    s.extend_from_slice(payload);
    s
}

/// Full Ethernet frame carrying `payload` for `tuple`. Any protocol other
/// than TCP or UDP is written as an ICMP echo and its ports are ignored.
pub fn build_frame(tuple: &FiveTuple, payload: &[u8]) -> Vec<u8> {
    let l4 = match tuple.protocol {
        PROTO_TCP => tcp_segment(tuple.src_port, tuple.dst_port, payload),
        PROTO_UDP => udp_datagram(tuple.src_port, tuple.dst_port, payload),
        _ => icmp_message(payload),
    };
    match (tuple.src_addr, tuple.dst_addr) {
        (IpAddr::V4(s), IpAddr::V4(d)) => ethernet_frame(ETHERTYPE_IPV4, &ipv4_packet(s, d, tuple.protocol, &l4)),
        (IpAddr::V6(s), IpAddr::V6(d)) => ethernet_frame(ETHERTYPE_IPV6, &ipv6_packet(s, d, tuple.protocol, &l4)),
        _ => panic!("mixed address families in {tuple:?}"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub classes: usize,
    pub packets_per_class: usize,
    pub min_payload: usize,
    pub max_payload: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { classes: 4, packets_per_class: 2000, min_payload: 64, max_payload: 1024, seed: 7 }
    }
}

pub struct Corpus {
    pub pcap: Vec<u8>,
    /// Flow table with CIC-style headers.
    pub flows_csv: String,
    pub class_names: Vec<String>,
    /// Labeled payloads in capture order, for cross-checking ingestion.
    pub packets: Vec<(usize, Vec<u8>)>,
    /// Frames that no flow row matches, plus non-IP frames.
    pub decoys: usize,
}

pub const BENIGN: &str = "BENIGN";

pub fn class_name(class_id: usize) -> String {
    const NAMES: [&str; 4] = [BENIGN, "DoS", "PortScan", "Bot"];
    NAMES.get(class_id).map_or_else(|| format!("Attack{class_id}"), |s| s.to_string())
}

/// Probability that a byte of class `class_id` is drawn uniformly from all
/// 256 values instead of its own range.
pub fn class_noise(class_id: usize) -> f64 {
    0.04 + 0.03 * (class_id % 4) as f64
}

/// One payload for `class_id`: bytes from `[64·c, 64·c+63]` (wrapping past
/// four classes) mixed with uniform noise.
pub fn class_payload<R: Rng>(rng: &mut R, class_id: usize, len: usize) -> Vec<u8> {
    let base = 64 * (class_id % 4) as u8;
    let noise = class_noise(class_id);
    (0..len)
        .map(|_| if rng.gen_bool(noise) { rng.gen() } else { base + rng.gen_range(0..64u8) })
        .collect()
}

fn flow_tuple<R: Rng>(rng: &mut R, class_id: usize, flow: usize) -> FiveTuple {
    let protocol = match rng.gen_range(0..10) {
        0 => PROTO_ICMP,
        1 | 2 => PROTO_UDP,
        _ => PROTO_TCP,
    };
    let (src_port, dst_port) = if protocol == PROTO_ICMP { (0, 0) } else { (rng.gen_range(1024..65535), [80, 443, 22, 53, 8080][flow % 5]) };
    if rng.gen_range(0..8) == 0 {
        let protocol = if protocol == PROTO_ICMP { PROTO_ICMPV6 } else { protocol };
        let src = Ipv6Addr::new(0xfd00, class_id as u16, 0, 0, 0, 0, (flow >> 16) as u16, flow as u16);
        let dst = Ipv6Addr::new(0xfd00, 0xffff, 0, 0, 0, 0, 0, 1);
        return FiveTuple { src_addr: IpAddr::V6(src), dst_addr: IpAddr::V6(dst), src_port, dst_port, protocol };
    }
    let src_addr = IpAddr::V4(Ipv4Addr::new(10, class_id as u8, (flow >> 8) as u8, flow as u8));
    let dst_addr = IpAddr::V4(Ipv4Addr::new(192, 168, 0, 1 + (flow % 200) as u8));
    FiveTuple { src_addr, dst_addr, src_port, dst_port, protocol }
}

/// Flows of 1–8 packets in both directions, classes interleaved in time.
pub fn generate_corpus(spec: &CorpusSpec) -> io::Result<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let class_names: Vec<String> = (0..spec.classes).map(class_name).collect();

    // Plan every flow first, then interleave their packets.
    let mut flows: Vec<(usize, FiveTuple, usize)> = Vec::new();
    for class_id in 0..spec.classes {
        let mut left = spec.packets_per_class;
        while left > 0 {
            let n = rng.gen_range(1..=8).min(left);
            flows.push((class_id, flow_tuple(&mut rng, class_id, flows.len()), n));
            left -= n;
        }
    }
    let mut flows_csv = String::from("Flow ID, Source IP, Source Port, Destination IP, Destination Port, Protocol, Timestamp, Label\n");
    for (i, (class_id, t, _)) in flows.iter().enumerate() {
        writeln!(
            flows_csv,
            "f{i}, {}, {}, {}, {}, {}, 2017-07-03 09:00, {}",
            t.src_addr, t.src_port, t.dst_addr, t.dst_port, t.protocol, class_names[*class_id]
        )
        .unwrap();
    }

    let mut writer = PcapWriter::new(Vec::new())?;
    let mut packets = Vec::with_capacity(spec.classes * spec.packets_per_class);
    let mut remaining: Vec<usize> = flows.iter().map(|f| f.2).collect();
    let mut open: Vec<usize> = (0..flows.len()).collect();
    let mut clock = 1_499_072_400u64 * 1_000_000;
    let mut decoys = 0;
    let emit = |w: &mut PcapWriter<Vec<u8>>, frame: &[u8], clock: &mut u64| {
        *clock += 137;
        w.write_frame(Timestamp { secs: *clock / 1_000_000, nanos: (*clock % 1_000_000) as u32 * 1000 }, frame)
    };
    while !open.is_empty() {
        let pick = rng.gen_range(0..open.len());
        let f = open[pick];
        let (class_id, tuple, total) = flows[f];
        let sent = total - remaining[f];
        let dir = if sent.is_multiple_of(2) { tuple } else { tuple.reversed() };
        let len = rng.gen_range(spec.min_payload..=spec.max_payload);
        let payload = class_payload(&mut rng, class_id, len);
        emit(&mut writer, &build_frame(&dir, &payload), &mut clock)?;
        packets.push((class_id, payload));
        remaining[f] -= 1;
        if remaining[f] == 0 {
            open.swap_remove(pick);
        }
        if rng.gen_range(0..200) == 0 {
            // An unlabeled conversation and an ARP frame.
            let stray = FiveTuple {
                src_addr: IpAddr::V4(Ipv4Addr::new(172, 16, 0, 9)),
                dst_addr: IpAddr::V4(Ipv4Addr::new(172, 16, 0, 10)),
                src_port: 5000,
                dst_port: 6000,
                protocol: PROTO_UDP,
            };
            emit(&mut writer, &build_frame(&stray, b"stray"), &mut clock)?;
            emit(&mut writer, &ethernet_frame(ETHERTYPE_ARP, &[0; 28]), &mut clock)?;
            decoys += 2;
        }
    }
    Ok(Corpus { pcap: writer.into_inner(), flows_csv, class_names, packets, decoys })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{label_packet, load_flow_labels, parse_capture, ColumnMap};

    #[test]
    fn corpus_parses_and_labels() {
        let spec = CorpusSpec { classes: 3, packets_per_class: 300, seed: 3, ..CorpusSpec::default() };
        let c = generate_corpus(&spec).unwrap();
        let parsed = parse_capture(&c.pcap[..]).unwrap();
        let table = load_flow_labels(c.flows_csv.as_bytes(), &ColumnMap::default(), b',').unwrap().table;
        assert_eq!(table.class_names(), c.class_names);
        let labeled: Vec<(usize, Vec<u8>)> = parsed
            .records
            .into_iter()
            .filter_map(|r| label_packet(r, &table))
            .map(|p| (p.class_id, p.record.payload))
            .collect();
        assert_eq!(labeled, c.packets);
        assert_eq!(parsed.stats.frames, 900 + c.decoys);
    }

    #[test]
    fn payload_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = class_payload(&mut rng, 2, 5000);
        let inside = p.iter().filter(|&&b| (128..192).contains(&b)).count();
        assert!(inside as f64 > 5000.0 * (1.0 - class_noise(2)) * 0.95);
    }
}
