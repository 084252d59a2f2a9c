use std::collections::HashMap;
use std::io::Read;
use std::net::IpAddr;

use crate::ingest::{FiveTuple, IngestError, LabeledPacket, PacketRecord};

/// Header names of the five tuple columns and the label column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColumnMap {
    pub src_addr: String,
    pub dst_addr: String,
    pub src_port: String,
    pub dst_port: String,
    pub protocol: String,
    pub label: String,
}

impl Default for ColumnMap {
    /// CIC-IDS2017 flow CSV names (headers are matched after trimming).
    fn default() -> Self {
        Self {
            src_addr: "Source IP".into(),
            dst_addr: "Destination IP".into(),
            src_port: "Source Port".into(),
            dst_port: "Destination Port".into(),
            protocol: "Protocol".into(),
            label: "Label".into(),
        }
    }
}

/// Canonical five-tuple → class id, plus the class names in id order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowLabelTable {
    entries: HashMap<FiveTuple, usize>,
    class_names: Vec<String>,
}

impl FlowLabelTable {
    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    /// Direction-independent lookup.
    pub fn lookup(&self, tuple: &FiveTuple) -> Option<usize> {
        self.entries.get(&tuple.canonical()).copied()
    }

    /// Adds a flow unless its canonical tuple is already present. Returns
    /// `false` when an existing entry carries a different label.
    pub fn insert(&mut self, tuple: FiveTuple, label: &str) -> bool {
        let key = tuple.canonical();
        if let Some(&existing) = self.entries.get(&key) {
            return self.class_names[existing] == label;
        }
        let id = match self.class_id(label) {
            Some(id) => id,
            None => {
                self.class_names.push(label.to_string());
                self.class_names.len() - 1
            }
        };
        self.entries.insert(key, id);
        true
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowLoad {
    pub table: FlowLabelTable,
    /// Rows dropped because their tuple already had another label.
    pub conflicts: usize,
    /// Rows that could not be parsed.
    pub row_errors: usize,
}

/// Reads a delimiter-separated flow table with a header row. The first label
/// seen for a canonical tuple wins.
pub fn load_flow_labels<R: Read>(table: R, columns: &ColumnMap, delimiter: u8) -> Result<FlowLoad, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(table);
    let headers = reader.headers().map_err(|e| IngestError::Table(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name.trim())
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    };
    let idx = [
        col(&columns.src_addr)?,
        col(&columns.dst_addr)?,
        col(&columns.src_port)?,
        col(&columns.dst_port)?,
        col(&columns.protocol)?,
        col(&columns.label)?,
    ];

    let mut out = FlowLoad::default();
    for row in reader.records() {
        let Ok(row) = row else {
            out.row_errors += 1;
            continue;
        };
        let Some((tuple, label)) = parse_row(&row, &idx) else {
            out.row_errors += 1;
            continue;
        };
        if !out.table.insert(tuple, label) {
            out.conflicts += 1;
        }
    }
    Ok(out)
}

fn parse_row<'r>(row: &'r csv::StringRecord, idx: &[usize; 6]) -> Option<(FiveTuple, &'r str)> {
    let field = |i: usize| row.get(idx[i]);
    let tuple = FiveTuple {
        src_addr: field(0)?.parse::<IpAddr>().ok()?,
        dst_addr: field(1)?.parse::<IpAddr>().ok()?,
        src_port: field(2)?.parse().ok()?,
        dst_port: field(3)?.parse().ok()?,
        protocol: field(4)?.parse().ok()?,
    };
    let label = field(5)?;
    (!label.is_empty()).then_some((tuple, label))
}

/// `None` means the packet matched no flow; callers drop and count it.
pub fn label_packet(record: PacketRecord, table: &FlowLabelTable) -> Option<LabeledPacket> {
    let class_id = table.lookup(&record.tuple)?;
    Some(LabeledPacket { record, class_id })
}
