use std::collections::HashSet;
use std::net::IpAddr;

use pktstack::ingest::*;
use pktstack::learner::to_one_vs_all;
use pktstack::transform::{GrayscaleImage, LabeledImage};
use proptest::prelude::*;

fn packet(class_id: usize, payload: Vec<u8>) -> LabeledPacket {
    let tuple = FiveTuple {
        src_addr: "10.0.0.1".parse().unwrap(),
        dst_addr: "10.0.0.2".parse().unwrap(),
        src_port: 1,
        dst_port: 2,
        protocol: 6,
    };
    LabeledPacket { record: PacketRecord { tuple, timestamp: Timestamp::default(), payload }, class_id }
}

fn names() -> Vec<String> {
    ["BENIGN", "DoS", "Bot"].iter().map(|s| s.to_string()).collect()
}

/// Small payload alphabet so duplicates are common.
fn arb_packets() -> impl Strategy<Value = Vec<LabeledPacket>> {
    proptest::collection::vec((0usize..3, proptest::collection::vec(0u8..3, 0..3)), 0..120)
        .prop_map(|v| v.into_iter().map(|(c, p)| packet(c, p)).collect())
}

fn arb_addr() -> impl Strategy<Value = IpAddr> {
    prop_oneof![any::<[u8; 4]>().prop_map(IpAddr::from), any::<[u8; 16]>().prop_map(IpAddr::from), Just(IpAddr::from([10, 0, 0, 1]))]
}

fn arb_tuple() -> impl Strategy<Value = FiveTuple> {
    (arb_addr(), arb_addr(), any::<u16>(), prop_oneof![any::<u16>(), Just(80u16)], prop_oneof![Just(6u8), Just(17), Just(1)])
        .prop_map(|(src_addr, dst_addr, src_port, dst_port, protocol)| FiveTuple { src_addr, dst_addr, src_port, dst_port, protocol })
}

fn is_subsequence(small: &[LabeledPacket], big: &[LabeledPacket]) -> bool {
    let mut it = big.iter();
    small.iter().all(|s| it.any(|b| b == s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn split_follows_the_floor_rule(n in 10usize..5000, seed in any::<u64>()) {
        let split = split_dataset((0..n).collect::<Vec<_>>(), seed).unwrap();
        prop_assert_eq!(split.d1.len(), n / 2);
        prop_assert_eq!(split.d2.len(), n / 5);
        prop_assert_eq!(split.d3.len(), n - n / 2 - n / 5);
        let mut all: Vec<usize> = split.d1.iter().chain(&split.d2).chain(&split.d3).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let again = split_dataset((0..n).collect::<Vec<_>>(), seed).unwrap();
        prop_assert_eq!(again, split);
    }

    #[test]
    fn preparation_laws(packets in arb_packets(), ratio in 0.1f64..3.0, seed in any::<u64>()) {
        let out = prepare_dataset(packets.clone(), &names(), "BENIGN", ratio, seed).unwrap();
        prop_assert!(out.iter().all(|p| !p.record.payload.is_empty()));
        let keys: HashSet<(usize, &[u8])> = out.iter().map(|p| (p.class_id, &p.record.payload[..])).collect();
        prop_assert_eq!(keys.len(), out.len());
        prop_assert!(is_subsequence(&out, &packets));

        let unique_attacks: HashSet<(usize, &[u8])> = packets.iter().filter(|p| p.class_id != 0 && !p.record.payload.is_empty())
            .map(|p| (p.class_id, &p.record.payload[..])).collect();
        let attacks = out.iter().filter(|p| p.class_id != 0).count();
        prop_assert_eq!(attacks, unique_attacks.len());
        let benign = out.len() - attacks;
        prop_assert!(benign as f64 <= ratio * attacks as f64);

        let again = prepare_dataset(out.clone(), &names(), "BENIGN", ratio, seed).unwrap();
        prop_assert_eq!(again, out);
    }

    #[test]
    fn one_vs_all_partitions_every_record(labels in proptest::collection::vec(0u16..6, 1..200)) {
        let data: Vec<LabeledImage> = labels.iter().map(|&c| LabeledImage { class_id: c, image: GrayscaleImage::zeros() }).collect();
        let views: Vec<_> = (0..6).map(|c| to_one_vs_all(&data, c, 6).unwrap()).collect();
        for (i, &label) in labels.iter().enumerate() {
            let hits: Vec<usize> = views.iter().filter(|v| v.targets[i] == 1).map(|v| v.class_id).collect();
            prop_assert_eq!(hits, vec![label as usize]);
        }
        for v in &views {
            prop_assert_eq!(v.positives(), labels.iter().filter(|&&l| l as usize == v.class_id).count());
        }
    }

    #[test]
    fn lookup_ignores_direction(flows in proptest::collection::vec((arb_tuple(), 0usize..3), 1..20), probe in 0usize..20, flip in any::<bool>()) {
        let mut table = FlowLabelTable::default();
        for (t, c) in &flows {
            table.insert(*t, &names()[*c]);
        }
        let (t, _) = flows[probe % flows.len()];
        let asked = if flip { t.reversed() } else { t };
        prop_assert_eq!(table.lookup(&asked), table.lookup(&t));
        prop_assert!(table.lookup(&asked).is_some());
        prop_assert_eq!(t.canonical(), t.reversed().canonical());
        prop_assert_eq!(t.canonical().canonical(), t.canonical());
    }
}

#[test]
fn benign_cap_example() {
    let mut packets: Vec<LabeledPacket> = (0..100u8).map(|i| packet(0, vec![i, 1])).collect();
    packets.extend((0..10u8).map(|i| packet(1, vec![i, 2])));
    let out = prepare_dataset(packets, &names(), "BENIGN", 1.0, 3).unwrap();
    assert_eq!(out.iter().filter(|p| p.class_id == 0).count(), 10);
    assert!(matches!(prepare_dataset(vec![], &names(), "Normal", 1.0, 0), Err(IngestError::UnknownBenignClass(_))));
    assert!(matches!(split_dataset(vec![1, 2, 3], 0), Err(IngestError::TooFewRecords(3))));
}
