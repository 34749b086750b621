use proptest::collection::vec;
use proptest::prelude::*;
use spunge::param_store::{self, ParamSet};
use spunge::rng::SplitMix64;

/// FNV-1a 64 written independently of the library.
fn reference_checksum(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn reference_payload(ps: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    for (_, t) in ps.iter() {
        for x in t.data() {
            out.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
    out
}

fn entry() -> impl Strategy<Value = (Vec<usize>, Vec<u32>)> {
    vec(1usize..5, 0..=3).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        // Raw bit patterns, so NaNs, infinities and subnormals all appear.
        (Just(shape), vec(any::<u32>(), n))
    })
}

fn param_set() -> impl Strategy<Value = ParamSet> {
    proptest::collection::btree_map("[a-z][a-z0-9_.]{0,8}", entry(), 1..6).prop_map(|m| {
        ParamSet::from_entries(
            m.into_iter()
                .map(|(name, (shape, bits))| (name, shape, bits.into_iter().map(f32::from_bits).collect()))
                .collect::<Vec<_>>(),
        )
        .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn containers_round_trip_bitwise(ps in param_set()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        param_store::save(&ps, &path).unwrap();
        let back = param_store::load(&path).unwrap();
        prop_assert!(back.bits_eq(&ps));
        prop_assert_eq!(back.checksum(), ps.checksum());
        prop_assert_eq!(ps.checksum(), reference_checksum(&reference_payload(&ps)));
    }

    #[test]
    fn any_flipped_payload_byte_is_caught(ps in param_set(), pick in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = param_store::encode(&ps, Default::default());
        let payload_start = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        let i = payload_start + pick.index(bytes.len() - payload_start);
        bytes[i] ^= 1 << bit;
        let caught = matches!(param_store::decode(&bytes), Err(param_store::StoreError::ChecksumMismatch { .. }));
        prop_assert!(caught);
    }
}

#[test]
fn ten_thousand_floats_keep_payload_and_checksum() {
    let mut rng = SplitMix64::new(10_000);
    let sizes = [1000usize; 10];
    let entries: Vec<(String, Vec<usize>, Vec<f32>)> = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| (format!("entry_{i:02}"), vec![n / 10, 10], (0..n).map(|_| rng.next_signed() as f32).collect()))
        .collect();
    let ps = ParamSet::from_entries(entries).unwrap();
    assert_eq!(ps.num_scalars(), 10_000);
    let expected = reference_checksum(&reference_payload(&ps));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.bin");
    param_store::save(&ps, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let newline = bytes.iter().position(|&b| b == b'\n').unwrap();
    let manifest: serde_json::Value = serde_json::from_slice(&bytes[..newline]).unwrap();
    assert_eq!(manifest["payload_checksum"].as_u64(), Some(expected));
    assert_eq!(&bytes[newline + 1..], reference_payload(&ps).as_slice());

    let back = param_store::load(&path).unwrap();
    assert_eq!(back.payload_bytes(), ps.payload_bytes());
    assert_eq!(back.checksum(), expected);
}

#[test]
fn axpy_with_unit_scale_onto_zeros_is_exact() {
    let mut rng = SplitMix64::new(3);
    let x = ParamSet::from_entries(vec![("w".to_string(), vec![64], (0..64).map(|_| (rng.next_signed() * 1e3) as f32).collect())]).unwrap();
    let y = param_store::axpy(1.0, &x, &x.zeros_like()).unwrap();
    assert!(y.bits_eq(&x));
}
