mod common;

use proptest::prelude::*;
use sst_core::code_table::{address_bits, count_entries, CodeRanker, CodeTable};
use sst_core::store::bitpack::{pack_indices, unpack_indices};
use sst_core::{CodeParams, SubvectorIndex, TernarySubvector, Trit};

use common::binomial;

fn params() -> impl Strategy<Value = CodeParams> {
    (1usize..=16)
        .prop_flat_map(|n| (Just(n), 1..=n))
        .prop_map(|(n, k)| CodeParams::new(n, k).unwrap())
}

/// A vector with at most k non-zeros at arbitrary positions.
fn codeword(p: CodeParams) -> impl Strategy<Value = TernarySubvector> {
    proptest::collection::vec(
        prop_oneof![2 => Just(0i8), 1 => Just(1i8), 1 => Just(-1i8)],
        p.n(),
    )
    .prop_map(move |mut v| {
        let mut seen = 0;
        for t in v.iter_mut() {
            if *t != 0 {
                seen += 1;
                if seen > p.k() {
                    *t = 0;
                }
            }
        }
        TernarySubvector::from_values(&v).unwrap()
    })
}

fn key(v: &TernarySubvector) -> Vec<u8> {
    v.trits()
        .iter()
        .map(|t| match t.value() {
            0 => 0,
            1 => 1,
            _ => 2,
        })
        .collect()
}

proptest! {
    #[test]
    fn count_matches_binomial_sum(p in params()) {
        let oracle: u64 = (0..=p.k() as u64).map(|i| binomial(p.n() as u64, i) << i).sum();
        prop_assert_eq!(count_entries(p).unwrap(), oracle);
        let bits = address_bits(p).unwrap();
        prop_assert!(oracle <= 1u64 << bits);
        prop_assert!(bits == 0 || oracle > 1u64 << (bits - 1));
    }

    #[test]
    fn rank_unrank_roundtrip((p, v) in params().prop_flat_map(|p| (Just(p), codeword(p)))) {
        let r = CodeRanker::new(p).unwrap();
        let ix = r.rank(&v).unwrap();
        prop_assert!(ix.0 < r.entry_count());
        prop_assert_eq!(r.unrank(ix).unwrap(), v);
    }

    #[test]
    fn index_order_is_canonical_order(
        (p, a, b) in params().prop_flat_map(|p| (Just(p), codeword(p), codeword(p)))
    ) {
        let r = CodeRanker::new(p).unwrap();
        let (ia, ib) = (r.rank(&a).unwrap(), r.rank(&b).unwrap());
        prop_assert_eq!(ia.cmp(&ib), key(&a).cmp(&key(&b)));
    }

    #[test]
    fn table_agrees_with_ranker(p in params().prop_filter("small table", |p| count_entries(*p).unwrap() <= 1 << 14), seed in any::<u64>()) {
        let table = CodeTable::build(p).unwrap();
        let ix = SubvectorIndex(seed % table.entry_count());
        let v = table.decode(ix).unwrap();
        prop_assert_eq!(&v, &table.ranker().unrank(ix).unwrap());
        let mut buf = vec![0i8; p.n()];
        table.decode_into(ix, &mut buf).unwrap();
        prop_assert_eq!(buf, v.values());
        let nz = table.nonzeros(ix.0 as usize);
        prop_assert_eq!(nz.len(), v.nonzeros());
    }

    #[test]
    fn too_many_nonzeros_rejected((n, k) in (2usize..=16).prop_flat_map(|n| (Just(n), 1..n))) {
        let p = CodeParams::new(n, k).unwrap();
        let v = TernarySubvector::new([vec![Trit::Pos; k + 1], vec![Trit::Zero; n - k - 1]].concat());
        prop_assert!(CodeRanker::new(p).unwrap().rank(&v).is_err());
    }

    #[test]
    fn index_out_of_range_rejected(p in params(), over in 0u64..1000) {
        let r = CodeRanker::new(p).unwrap();
        prop_assert!(r.unrank(SubvectorIndex(r.entry_count() + over)).is_err());
    }

    #[test]
    fn bitpack_roundtrip(width in 1u32..=40, raw in proptest::collection::vec(any::<u64>(), 0..200)) {
        let indices: Vec<SubvectorIndex> = raw.iter().map(|v| SubvectorIndex(v & ((1u64 << width) - 1))).collect();
        let stream = pack_indices(&indices, width).unwrap();
        prop_assert_eq!(stream.bit_len(), width as u64 * indices.len() as u64);
        prop_assert_eq!(stream.bytes().len() as u64, stream.bit_len().div_ceil(8));
        prop_assert_eq!(unpack_indices(&stream, width, indices.len()).unwrap(), indices);
    }
}

#[test]
fn first_and_last_entries() {
    let t = CodeTable::build(CodeParams::new(4, 2).unwrap()).unwrap();
    assert_eq!(
        t.decode(SubvectorIndex(0)).unwrap().values(),
        vec![0, 0, 0, 0]
    );
    assert_eq!(
        t.decode(SubvectorIndex(1)).unwrap().values(),
        vec![0, 0, 0, 1]
    );
    assert_eq!(
        t.decode(SubvectorIndex(2)).unwrap().values(),
        vec![0, 0, 0, -1]
    );
    assert_eq!(
        t.decode(SubvectorIndex(t.entry_count() - 1))
            .unwrap()
            .values(),
        vec![-1, -1, 0, 0]
    );
}

#[test]
fn msb_first_packing() {
    let s = pack_indices(&[SubvectorIndex(0b101), SubvectorIndex(0b011)], 3).unwrap();
    assert_eq!(s.bytes(), &[0b1010_1100]);
}
