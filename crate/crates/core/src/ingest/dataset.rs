use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ingest::{IngestError, LabeledPacket};

pub const MIN_SPLIT_RECORDS: usize = 10;
pub const DEFAULT_BENIGN_CAP_RATIO: f64 = 1.0;

/// Drops empty payloads, collapses duplicates (same payload bytes and same
/// class), then uniformly subsamples the benign class down to
/// `floor(benign_cap_ratio × non-benign count)`. Survivors keep their order.
pub fn prepare_dataset(
    packets: Vec<LabeledPacket>,
    class_names: &[String],
    benign_label: &str,
    benign_cap_ratio: f64,
    seed: u64,
) -> Result<Vec<LabeledPacket>, IngestError> {
    if !(benign_cap_ratio > 0.0 && benign_cap_ratio.is_finite()) {
        return Err(IngestError::InvalidRatio(benign_cap_ratio));
    }
    let benign = class_names
        .iter()
        .position(|n| n == benign_label)
        .ok_or_else(|| IngestError::UnknownBenignClass(benign_label.to_string()))?;

    let keep: Vec<bool> = {
        let mut seen: HashSet<(usize, &[u8])> = HashSet::with_capacity(packets.len());
        packets
            .iter()
            .map(|p| !p.record.payload.is_empty() && seen.insert((p.class_id, p.record.payload.as_slice())))
            .collect()
    };
    let unique: Vec<LabeledPacket> = packets.into_iter().zip(keep).filter_map(|(p, k)| k.then_some(p)).collect();

    let benign_count = unique.iter().filter(|p| p.class_id == benign).count();
    let cap = (benign_cap_ratio * (unique.len() - benign_count) as f64).floor() as usize;
    if benign_count <= cap {
        return Ok(unique);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; benign_count];
    for i in index::sample(&mut rng, benign_count, cap) {
        chosen[i] = true;
    }
    let mut ordinal = 0;
    Ok(unique
        .into_iter()
        .filter(|p| {
            if p.class_id != benign {
                return true;
            }
            ordinal += 1;
            chosen[ordinal - 1]
        })
        .collect())
}

/// D1 (base learners), D2 (meta learner), D3 (evaluation).
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit<P> {
    pub d1: Vec<P>,
    pub d2: Vec<P>,
    pub d3: Vec<P>,
    pub seed: u64,
}

/// Sizes `floor(n/2)`, `floor(n/5)` and the remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let d1 = n / 2;
    let d2 = n / 5;
    (d1, d2, n - d1 - d2)
}

/// Seeded shuffle, then contiguous 50:20:30 cuts.
pub fn split_dataset<P>(mut items: Vec<P>, seed: u64) -> Result<DatasetSplit<P>, IngestError> {
    if items.len() < MIN_SPLIT_RECORDS {
        return Err(IngestError::TooFewRecords(items.len()));
    }
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (n1, n2, _) = split_sizes(items.len());
    let d3 = items.split_off(n1 + n2);
    let d2 = items.split_off(n1);
    Ok(DatasetSplit { d1: items, d2, d3, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{FiveTuple, PacketRecord, Timestamp};

    fn packet(class_id: usize, payload: &[u8]) -> LabeledPacket {
        let tuple = FiveTuple {
            src_addr: "10.0.0.1".parse().unwrap(),
            dst_addr: "10.0.0.2".parse().unwrap(),
            src_port: 1,
            dst_port: 2,
            protocol: 6,
        };
        LabeledPacket { record: PacketRecord { tuple, timestamp: Timestamp::default(), payload: payload.to_vec() }, class_id }
    }

    fn names() -> Vec<String> {
        vec!["BENIGN".into(), "DoS".into()]
    }

    #[test]
    fn duplicates_collapse() {
        let out = prepare_dataset(vec![packet(1, b"ab"); 3], &names(), "BENIGN", 1.0, 0).unwrap();
        assert_eq!(out.len(), 1);
        // same bytes, different class: both stay
        let out = prepare_dataset(vec![packet(1, b"ab"), packet(0, b"ab")], &names(), "BENIGN", 1.0, 0).unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn empty_payloads_removed() {
        let out = prepare_dataset(vec![packet(1, b""), packet(0, b""), packet(1, b"z")], &names(), "BENIGN", 5.0, 0).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn benign_capped() {
        let mut v: Vec<_> = (0..100u32).map(|i| packet(0, &i.to_le_bytes())).collect();
        v.extend((0..10u32).map(|i| packet(1, &i.to_le_bytes())));
        let out = prepare_dataset(v, &names(), "BENIGN", 1.0, 9).unwrap();
        assert_eq!(out.iter().filter(|p| p.class_id == 0).count(), 10);
        assert_eq!(out.len(), 20);
    }

    #[test]
    fn unknown_benign_and_bad_ratio() {
        assert!(matches!(prepare_dataset(vec![], &names(), "Normal", 1.0, 0), Err(IngestError::UnknownBenignClass(_))));
        assert!(matches!(prepare_dataset(vec![], &names(), "BENIGN", 0.0, 0), Err(IngestError::InvalidRatio(_))));
    }

    #[test]
    fn split_examples() {
        let s = split_dataset((0..1000).collect::<Vec<_>>(), 5).unwrap();
        assert_eq!((s.d1.len(), s.d2.len(), s.d3.len()), (500, 200, 300));
        let s = split_dataset((0..10).collect::<Vec<_>>(), 5).unwrap();
        assert_eq!((s.d1.len(), s.d2.len(), s.d3.len()), (5, 2, 3));
        assert_eq!(split_dataset((0..10).collect::<Vec<_>>(), 5).unwrap(), s);
        assert!(matches!(split_dataset((0..9).collect::<Vec<_>>(), 5), Err(IngestError::TooFewRecords(9))));
    }
}
