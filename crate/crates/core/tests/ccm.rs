use dmpc::ccm::{
    decode_ccm, encode_ccm, reference_vectors, reference_vectors_json, CcmConflict, CcmMessage,
};
use proptest::prelude::*;

// Produced with Python's struct module ('<BHB' header, 'B' + '<20f' per conflict).
const EXPECTED_HEX: [(&str, &str); 5] = [
    ("header_only", "00000001"),
    ("max_timestamp", "3b5feaff"),
    (
        "scenario1_agent2_to_agent1",
        "00c80002013333734233336b423333634233335b423333534233334b423333434233333b4233333342\
         33332b423333234233331b423333134233330b42333303426666f6416666e6416666d6416666c6416666b641",
    ),
    (
        "two_conflicts_n5",
        "0739300301000000000000003f0000a03f000070416f12833a040000c8420000c742d00f49404df82d40cdcccc3d",
    ),
    ("n1_negative_zero", "1e3075090800000080"),
];

#[test]
fn reference_vectors_match_independent_encoding() {
    let v = reference_vectors();
    assert_eq!(v.len(), EXPECTED_HEX.len());
    for (got, (name, hex)) in v.iter().zip(EXPECTED_HEX) {
        assert_eq!(got.name, name);
        assert_eq!(got.hex, hex, "{name}");
        let bytes = hex::decode(hex).unwrap();
        let back = decode_ccm(&bytes, got.n).unwrap();
        assert_eq!(encode_ccm(&back, got.n).unwrap(), bytes);
    }
    let scenario = &v[2];
    assert_eq!(scenario.hex.len() / 2, 85);
    assert_eq!(v[0].hex.len() / 2, 4);
}

#[test]
fn committed_vector_file_is_current() {
    let committed = include_str!("data/ccm_golden.json");
    assert_eq!(committed, reference_vectors_json());
}

#[test]
fn size_formula() {
    for n in [1usize, 5, 20] {
        for c in 0..=3usize {
            let m = CcmMessage {
                minute_of_hour: 1,
                ms_of_minute: 2,
                ego_id: 3,
                conflicts: (0..c)
                    .map(|i| CcmConflict {
                        neighbor_id: i as u8,
                        d_seq: vec![1.0; n],
                    })
                    .collect(),
            };
            assert_eq!(encode_ccm(&m, n).unwrap().len(), 4 + c * (1 + 4 * n));
        }
    }
}

fn finite_f32() -> impl Strategy<Value = f32> {
    any::<u32>()
        .prop_map(f32::from_bits)
        .prop_filter("finite", |x| x.is_finite())
}

fn message(n: usize) -> impl Strategy<Value = CcmMessage> {
    (
        0u8..60,
        0u16..60_000,
        any::<u8>(),
        proptest::sample::subsequence((0u8..=255).collect::<Vec<_>>(), 0..4),
    )
        .prop_flat_map(move |(minute, ms, ego, ids)| {
            let k = ids.len();
            proptest::collection::vec(proptest::collection::vec(finite_f32(), n), k).prop_map(
                move |seqs| CcmMessage {
                    minute_of_hour: minute,
                    ms_of_minute: ms,
                    ego_id: ego,
                    conflicts: ids
                        .iter()
                        .zip(seqs)
                        .map(|(&neighbor_id, d_seq)| CcmConflict { neighbor_id, d_seq })
                        .collect(),
                },
            )
        })
}

proptest! {
    #[test]
    fn roundtrip_is_bit_exact((n, m) in (1usize..=20).prop_flat_map(|n| (Just(n), message(n)))) {
        let bytes = encode_ccm(&m, n).unwrap();
        prop_assert_eq!(bytes.len(), 4 + m.conflicts.len() * (1 + 4 * n));
        let back = decode_ccm(&bytes, n).unwrap();
        prop_assert_eq!(back.conflicts.len(), m.conflicts.len());
        for (a, b) in back.conflicts.iter().zip(&m.conflicts) {
            prop_assert_eq!(a.neighbor_id, b.neighbor_id);
            let ab: Vec<u32> = a.d_seq.iter().map(|x| x.to_bits()).collect();
            let bb: Vec<u32> = b.d_seq.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(ab, bb);
        }
        prop_assert_eq!(encode_ccm(&back, n).unwrap(), bytes);
    }

    #[test]
    fn wrong_horizon_is_rejected(n in 2usize..20, extra in 1usize..3) {
        let m = CcmMessage {
            minute_of_hour: 0,
            ms_of_minute: 0,
            ego_id: 0,
            conflicts: vec![CcmConflict { neighbor_id: 1, d_seq: vec![0.0; n] }],
        };
        let bytes = encode_ccm(&m, n).unwrap();
        prop_assert!(decode_ccm(&bytes, n + extra).is_err());
    }
}
