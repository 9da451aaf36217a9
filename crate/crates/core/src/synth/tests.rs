use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::codec::*;
use super::*;

fn cfg(family: FlowFamily, seed: u64) -> GenConfig {
    GenConfig {
        seed,
        height: 32,
        width: 40,
        family,
        ..GenConfig::default()
    }
}

fn translation(dx: f64, dy: f64) -> GenConfig {
    GenConfig {
        translation: Some([dx, dy]),
        ..cfg(FlowFamily::Translation, 9)
    }
}

#[test]
fn zero_translation_copies_the_frame() {
    let p = gen_pair::<f64>(&translation(0.0, 0.0)).unwrap();
    assert_eq!(p.image1, p.image2);
    assert_eq!(p.flow.data().iter().fold(0.0f64, |a, v| a.max(v.abs())), 0.0);
    assert_eq!(p.valid.count(), 32 * 40);
}

#[test]
fn integer_translation_shifts_columns() {
    let p = gen_pair::<f64>(&translation(3.0, 0.0)).unwrap();
    let (h, w) = (32, 40);
    for y in 0..h {
        for x in 0..w - 3 {
            for c in 0..3 {
                let a = p.image1.data()[(y * w + x) * 3 + c];
                let b = p.image2.data()[(y * w + x + 3) * 3 + c];
                assert!((a - b).abs() <= 1e-10);
            }
            assert!(p.valid.is_valid(y, x));
        }
        for x in w - 3..w {
            assert!(!p.valid.is_valid(y, x));
        }
    }
}

#[test]
fn flow_respects_max_displacement() {
    for family in [FlowFamily::Translation, FlowFamily::Affine, FlowFamily::Blobs, FlowFamily::Mixed] {
        for seed in 0..30 {
            let c = cfg(family, seed);
            let p = gen_pair::<f64>(&c).unwrap();
            assert!(p.flow.max_norm() <= c.max_displacement + 1e-12, "{family} seed {seed}");
        }
    }
}

#[test]
fn frames_stay_in_unit_range() {
    let p = gen_pair::<f64>(&cfg(FlowFamily::Blobs, 4)).unwrap();
    for v in p.image1.data().iter().chain(p.image2.data()) {
        assert!((0.0..=1.0).contains(v));
    }
}

#[test]
fn textures_are_not_flat() {
    let p = gen_pair::<f64>(&cfg(FlowFamily::Translation, 5)).unwrap();
    let m = p.image1.mean();
    let var = p.image1.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / p.image1.len() as f64;
    assert!(var > 1e-3);
}

#[test]
fn same_config_gives_identical_bytes() {
    for family in FlowFamily::ALL {
        let c = cfg(family, 77);
        let a = gen_pair::<f32>(&c).unwrap();
        let b = gen_pair::<f32>(&c).unwrap();
        assert_eq!(encode_ppm(&a.image1).unwrap(), encode_ppm(&b.image1).unwrap());
        assert_eq!(encode_ppm(&a.image2).unwrap(), encode_ppm(&b.image2).unwrap());
        assert_eq!(encode_flo(&a.flow), encode_flo(&b.flow));
        assert_eq!(a, b);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = cfg(FlowFamily::Blobs, 0);
    c.max_displacement = 10.5;
    assert!(c.validate().is_err());
    c.max_displacement = 4.0;
    c.octaves = 2;
    assert!(c.validate().is_err());
    let mut c = translation(9.0, 0.0);
    c.max_displacement = 8.0;
    assert!(c.validate().is_err());
}

#[test]
fn validation_set_alternates_families() {
    let v = validation_configs(&GenConfig::default(), 4);
    let fams: Vec<_> = v.iter().map(|c| c.family).collect();
    assert_eq!(fams, [FlowFamily::Translation, FlowFamily::Blobs, FlowFamily::Translation, FlowFamily::Blobs]);
    assert!(v.iter().all(|c| c.seed >= VALIDATION_SEED_BASE));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn brightness_constancy_holds_at_the_flow_target(seed in 0u64..1_000_000, fam in 0usize..3) {
        let family = [FlowFamily::Translation, FlowFamily::Affine, FlowFamily::Blobs][fam];
        let p = gen_pair::<f64>(&cfg(family, seed)).unwrap();
        let (h, w) = (32, 40);
        let mut total = 0.0;
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                if !p.valid.is_valid(y, x) {
                    continue;
                }
                let (dx, dy) = p.flow.at(y, x);
                let warped = warped_at(&p.image1, &p.motion, [x as f64 + dx, y as f64 + dy]);
                for c in 0..3 {
                    total += (warped[c] - p.image1.data()[(y * w + x) * 3 + c]).abs();
                    n += 1;
                }
            }
        }
        prop_assert!(n > 0);
        prop_assert!(total / (n as f64) < 1e-6);
    }

    #[test]
    fn flo_round_trip_is_bitwise(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let flow = FlowField::<f32>::from_fn(h, w, |_, _| (r.random_range(-50.0..50.0), r.random_range(-50.0..50.0)));
        let back = decode_flo(&encode_flo(&flow)).unwrap();
        let bits = |f: &FlowField<f32>| f.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&flow));
    }

    #[test]
    fn ppm_round_trip_of_quantized_image_is_exact(h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::<f32>::from_fn([h, w, 3], |_| r.random_range(0u8..=255) as f32 / 255.0);
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        prop_assert_eq!(back, img);
    }
}

#[test]
fn flo_5x7_round_trip_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.flo");
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let flow = FlowField::<f32>::from_fn(5, 7, |_, _| (r.random(), r.random()));
    write_flo(&flow, &path).unwrap();
    let back = read_flo(&path).unwrap();
    assert_eq!((back.height(), back.width()), (5, 7));
    assert_eq!(back, flow);
}

#[test]
fn flo_file_size_arithmetic() {
    assert_eq!(encode_flo(&FlowField::<f32>::zeros(1, 2)).len(), 28);
}

#[test]
fn flo_errors() {
    let good = encode_flo(&FlowField::<f32>::zeros(2, 3));
    let mut bad = good.clone();
    bad[..4].copy_from_slice(b"XXXX");
    assert!(matches!(decode_flo(&bad), Err(Error::BadMagic { .. })));
    assert!(matches!(decode_flo(&good[..good.len() - 1]), Err(Error::Truncated { .. })));
    assert!(matches!(decode_flo(&good[..6]), Err(Error::Truncated { .. })));
    let mut huge = good.clone();
    huge[4..8].copy_from_slice(&(-1i32).to_le_bytes());
    assert!(matches!(decode_flo(&huge), Err(Error::DimensionOverflow { .. })));
    huge[4..8].copy_from_slice(&i32::MAX.to_le_bytes());
    assert!(matches!(decode_flo(&huge), Err(Error::DimensionOverflow { .. })));
}

#[test]
fn flo_unknown_marker_round_trips_the_mask() {
    let flow = FlowField::<f64>::from_fn(2, 2, |y, x| (x as f64, y as f64));
    let mask = ValidMask::new(2, 2, vec![true, false, true, true]).unwrap();
    let (f, m) = decode_flo_masked(&encode_flo_masked(&flow, &mask).unwrap()).unwrap();
    assert_eq!(m, mask);
    assert_eq!(f.at(0, 1), (0.0, 0.0));
    assert_eq!(f.at(1, 1), (1.0, 1.0));
}

#[test]
fn ppm_header_and_zero_payload() {
    let img = Tensor::<f64>::zeros([3, 4, 3]);
    let bytes = encode_ppm(&img).unwrap();
    assert!(bytes.starts_with(b"P6\n4 3\n255\n"));
    assert!(bytes[11..].iter().all(|&b| b == 0));
    assert_eq!(bytes.len(), 11 + 36);
}

#[test]
fn ppm_clamps_and_rejects_malformed_headers() {
    let img = Tensor::<f64>::new([1, 1, 3], vec![-0.5, 0.5, 2.0]).unwrap();
    let bytes = encode_ppm(&img).unwrap();
    assert_eq!(&bytes[bytes.len() - 3..], [0, 128, 255]);
    assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\0"), Err(Error::BadMagic { .. })));
    assert!(matches!(decode_ppm(b"P6\n1 x\n255\n"), Err(Error::Malformed { .. })));
    assert!(matches!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0"), Err(Error::Malformed { .. })));
    assert!(matches!(decode_ppm(b"P6\n2 2\n255\n\0"), Err(Error::Truncated { .. })));
    let commented = decode_ppm(b"P6\n# made by hand\n1 1\n255\n\x00\xff\x00").unwrap();
    assert_eq!(commented.data(), [0.0, 1.0, 0.0]);
}

#[test]
fn dataset_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let configs: Vec<_> = (0..3).map(|s| cfg(FlowFamily::Mixed, s)).collect();
    let manifest = write_dataset(dir.path(), &configs).unwrap();
    let back = Manifest::read(dir.path().join("manifest.json")).unwrap();
    assert_eq!(back, manifest);
    assert_eq!(back.entries.len(), 3);
    let (i1, _, flow, valid) = load_sample(dir.path(), &back.entries[1]).unwrap();
    let pair = gen_pair::<f32>(&configs[1]).unwrap();
    assert_eq!(i1.shape(), [32, 40, 3]);
    assert_eq!(valid, pair.valid);
    for (a, (b, &ok)) in flow.vectors().zip(pair.flow.vectors().zip(pair.valid.bits())) {
        if ok {
            assert_eq!(a, b);
        }
    }
}
