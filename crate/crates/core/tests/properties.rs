use hashlab_core::arch::{format_arch, parse_arch, param_count, LayerSpec};
use hashlab_core::hashing::{binarize, pack_codes, rectify_fc_plus, unpack_codes, BinaryCode};
use proptest::prelude::*;

/// Canonical architecture strings built from tokens that always validate:
/// 3x3 padded convolutions and 2x2 pools never exhaust a 16x16 input when
/// there are at most three pools.
fn arch_string() -> impl Strategy<Value = String> {
    let conv = (1usize..=16, prop_oneof![Just((3usize, 1usize)), Just((1, 0)), Just((5, 2))])
        .prop_map(|(f, (k, p))| format!("{f}C{k}P{p}"));
    let pool = Just("MP2S2".to_string());
    let drop = prop_oneof![Just("D0.5"), Just("D0.25"), Just("D0"), Just("D0.3")].prop_map(String::from);
    let feature = prop_oneof![3 => conv, 1 => pool, 1 => drop.clone()];
    (
        1usize..=3,
        16usize..=20,
        16usize..=20,
        proptest::collection::vec(feature, 0..6),
        proptest::collection::vec((1usize..=40, proptest::option::of(drop)), 0..3),
        1usize..=10,
    )
        .prop_filter("at most three pools", |(_, _, _, f, _, _)| f.iter().filter(|t| t.starts_with("MP")).count() <= 3)
        .prop_map(|(c, h, w, features, fcs, classes)| {
            let mut parts = vec![format!("{c}x{h}x{w}")];
            parts.extend(features);
            for (units, d) in fcs {
                parts.push(format!("H{units}"));
                parts.extend(d);
            }
            parts.push(format!("H{classes}"));
            parts.join("-")
        })
}

proptest! {
    #[test]
    fn arch_round_trip(s in arch_string()) {
        let spec = parse_arch(&s).unwrap();
        prop_assert_eq!(format_arch(&spec), s.clone());
        prop_assert_eq!(parse_arch(&format_arch(&spec)).unwrap(), spec.clone());
        prop_assert!(param_count(&spec).unwrap() > 0);
        for l in &spec.layers {
            if let LayerSpec::Conv { relu, .. } = l {
                prop_assert!(*relu);
            }
        }
    }

    #[test]
    fn pack_round_trip(codes in (1usize..=64).prop_flat_map(|n| proptest::collection::vec(proptest::collection::vec(any::<bool>(), n), 0..20))) {
        let len = codes.first().map_or(0, Vec::len);
        let (packed, got_len) = pack_codes(&codes).unwrap();
        prop_assert_eq!(got_len, len);
        prop_assert_eq!(packed.len(), codes.len() * len.div_ceil(8));
        if len > 0 {
            prop_assert_eq!(unpack_codes(&packed, len).unwrap(), codes);
        }
    }

    #[test]
    fn pad_bits_are_zero(bits in proptest::collection::vec(any::<bool>(), 1..=64)) {
        let code = BinaryCode::from_bits(&bits);
        let last = *code.as_bytes().last().unwrap();
        let used = bits.len() % 8;
        if used != 0 {
            prop_assert_eq!(last >> used, 0);
        }
        prop_assert_eq!(BinaryCode::from_bytes(code.as_bytes().to_vec(), bits.len()).unwrap(), code);
    }

    #[test]
    fn binarize_ignores_positive_scale(v in proptest::collection::vec(-1e6f64..1e6, 1..100), alpha in 1e-6f64..1e6) {
        let scaled: Vec<f64> = v.iter().map(|x| alpha * x).collect();
        prop_assert_eq!(binarize(&scaled).unwrap(), binarize(&v).unwrap());
    }

    #[test]
    fn binarize_is_idempotent_on_signs(bits in proptest::collection::vec(any::<bool>(), 1..100)) {
        let code = BinaryCode::from_bits(&bits);
        prop_assert_eq!(binarize(&code.to_signs()).unwrap(), code);
    }

    #[test]
    fn rectification_keeps_signs_and_order(v in proptest::collection::vec(-10f64..10.0, 1..50)) {
        let r = rectify_fc_plus(&v);
        prop_assert_eq!(binarize(&r).unwrap(), binarize(&v).unwrap());
        for i in 0..v.len() {
            prop_assert!(r[i].abs() >= 0.5);
            for j in 0..v.len() {
                if (v[i] >= 0.0) == (v[j] >= 0.0) && v[i] < v[j] {
                    prop_assert!(r[i] < r[j]);
                }
            }
        }
    }
}
