//! Capture decoding, flow labeling, and dataset preparation.

mod dataset;
mod flow;
pub mod manifest;
pub mod pcap;

use std::net::IpAddr;

pub use dataset::{prepare_dataset, split_dataset, split_sizes, DatasetSplit, DEFAULT_BENIGN_CAP_RATIO, MIN_SPLIT_RECORDS};
pub use flow::{label_packet, load_flow_labels, ColumnMap, FlowLabelTable, FlowLoad};
pub use pcap::{parse_capture, CaptureStats, ParsedCapture};

/// Payloads are truncated to this many bytes.
pub const MAX_PAYLOAD: usize = 1500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FiveTuple {
    pub src_addr: IpAddr,
    pub dst_addr: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: u8,
}

impl FiveTuple {
    pub fn reversed(&self) -> Self {
        Self {
            src_addr: self.dst_addr,
            dst_addr: self.src_addr,
            src_port: self.dst_port,
            dst_port: self.src_port,
            protocol: self.protocol,
        }
    }

    /// Orders the two endpoints so that a tuple and its reverse agree.
    pub fn canonical(&self) -> Self {
        if (self.src_addr, self.src_port) <= (self.dst_addr, self.dst_port) {
            *self
        } else {
            self.reversed()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct Timestamp {
    pub secs: u64,
    pub nanos: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PacketRecord {
    pub tuple: FiveTuple,
    pub timestamp: Timestamp,
    /// Transport payload only, at most [`MAX_PAYLOAD`] bytes.
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledPacket {
    pub record: PacketRecord,
    pub class_id: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("malformed capture header: {0}")]
    MalformedHeader(String),
    #[error("unsupported link type {0} (only Ethernet is handled)")]
    UnsupportedLinkType(u32),
    #[error("flow table has no column named {0:?}")]
    MissingColumn(String),
    #[error("flow table: {0}")]
    Table(String),
    #[error("benign class {0:?} is not among the labels")]
    UnknownBenignClass(String),
    #[error("benign cap ratio must be positive, got {0}")]
    InvalidRatio(f64),
    #[error("need at least 10 records to split, got {0}")]
    TooFewRecords(usize),
    #[error("bad manifest {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
