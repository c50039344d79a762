use dynlite::quantfp4::e0m4::{code_to_half_bits, encode_with, exp_bin_part};
use dynlite::quantfp4::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

fn gaussian(rng: &mut ChaCha8Rng, len: usize, sd: f32) -> Vec<f32> {
    let d = Normal::new(0.0f32, sd).unwrap();
    (0..len).map(|_| d.sample(rng)).collect()
}

fn canonical_nan(bits: u16) -> u16 {
    let h = Half(bits);
    if h.is_nan() {
        bits | 0x0200
    } else {
        bits
    }
}

#[test]
fn binary16_round_trip_is_exhaustive_and_matches_reference() {
    for bits in 0..=u16::MAX {
        let ours = f16_to_f32(Half(bits));
        let reference = ::half::f16::from_bits(bits).to_f32();
        assert_eq!(ours.to_bits(), reference.to_bits(), "widening {bits:#06x}");
        assert_eq!(f32_to_f16(ours).0, canonical_nan(bits), "round trip {bits:#06x}");
    }
}

#[test]
fn narrowing_matches_reference_on_random_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let bits = Uniform::new_inclusive(0u32, u32::MAX);
    for _ in 0..2_000_000 {
        let x = f32::from_bits(bits.sample(&mut rng));
        let expected = ::half::f16::from_f32(x).to_bits();
        let ours = f32_to_f16(x).0;
        if x.is_nan() {
            assert!(Half(ours).is_nan());
        } else {
            assert_eq!(ours, expected, "{x:e}");
        }
    }
}

#[test]
fn dequant_bit_trick_matches_arithmetic_oracle() {
    for n in [1u8, 2] {
        for code in 0u8..16 {
            let bits = code_to_half_bits(code, exp_bin_part(n));
            let oracle = 2f32.powi(n as i32) * (1.0 + code as f32 / 16.0);
            assert_eq!(f16_to_f32(Half(bits)), oracle);
            assert_eq!(Half(bits).exponent(), n as u16 + 15);
        }
    }
}

fn group_strategy() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-4.0f32..4.0, 1..160)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn codes_rebuild_halves_with_fixed_exponent(w in group_strategy(), n in 1u8..=2) {
        let g = quantize_e0m4(&w, n).unwrap();
        for c in g.codes_unpacked() {
            let h = Half(code_to_half_bits(c, exp_bin_part(n)));
            prop_assert_eq!(h.sign(), 0);
            prop_assert_eq!(h.exponent(), n as u16 + 15);
            let v = h.to_f32();
            prop_assert!(v >= 2f32.powi(n as i32) && v < 2f32.powi(n as i32 + 1));
        }
    }

    #[test]
    fn zero_survives_when_range_straddles_it(mut w in group_strategy(), n in 1u8..=2, at in any::<prop::sample::Index>()) {
        let i = at.index(w.len());
        w[i] = 0.0;
        let g = quantize_e0m4(&w, n).unwrap();
        prop_assert_eq!(g.bias.fraction() & 0x3F, 0);
        let d = dequantize_e0m4(&g);
        for (x, y) in w.iter().zip(&d) {
            if *x == 0.0 {
                prop_assert_eq!(*y, 0.0);
            }
        }
    }

    #[test]
    fn codes_are_monotone(w in group_strategy(), n in 1u8..=2) {
        let g = quantize_e0m4(&w, n).unwrap();
        let codes = g.codes_unpacked();
        let mut order: Vec<usize> = (0..w.len()).collect();
        order.sort_by(|&a, &b| w[a].total_cmp(&w[b]));
        for pair in order.windows(2) {
            prop_assert!(codes[pair[0]] <= codes[pair[1]]);
        }
    }

    #[test]
    fn reconstruction_grid_is_a_fixed_point(w in group_strategy(), n in 1u8..=2) {
        let g = quantize_e0m4(&w, n).unwrap();
        let again = encode_with(&dequantize_e0m4(&g), g.scale, g.bias, n);
        prop_assert_eq!(again, g.codes_unpacked());
    }

    #[test]
    fn int4_error_is_at_most_half_a_step(w in group_strategy()) {
        let g = quantize_int4(&w).unwrap();
        let d = dequantize_int4(&g);
        for (x, y) in w.iter().zip(&d) {
            let bound = g.step / 2.0 + f32::EPSILON * x.abs().max(1.0) * 4.0;
            prop_assert!((x - y).abs() <= bound, "{} vs {} step {}", x, y, g.step);
        }
    }

    #[test]
    fn weight_stream_round_trips(k in 1usize..300, cols in 1usize..5, int4 in any::<bool>(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = gaussian(&mut rng, k * cols, 0.05);
        let scheme = if int4 { Scheme::Int4 } else { Scheme::E0M4 };
        let q = quantize_weight(&w, k, cols, scheme, 1, 128).unwrap();
        let bytes = q.to_bytes();
        let back = QuantizedWeight::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.dequantize(), q.dequantize());
    }
}

#[test]
fn per_group_gaussian_ratio_averages_into_band() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sum = 0.0;
    for _ in 0..100 {
        let w = gaussian(&mut rng, 128, 0.02);
        let r = mae_compare(&w, 128, 1, 128, 1).unwrap();
        sum += r.ratio.unwrap();
    }
    let mean = sum / 100.0;
    assert!((0.93..=0.98).contains(&mean), "mean ratio {mean}");
}

#[test]
fn uniform_weights_favor_int4() {
    // The finer FP4 spacing is cancelled by saturation of the top bin, so
    // on uniform data INT4 ends up slightly ahead.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let u = Uniform::new(-1.0f32, 1.0);
    let w: Vec<f32> = (0..1024 * 64).map(|_| u.sample(&mut rng)).collect();
    let r = mae_compare(&w, 1024, 64, 128, 1).unwrap();
    let ratio = r.ratio.unwrap();
    assert!((1.0..1.03).contains(&ratio), "ratio {ratio}");
}

#[test]
fn full_requantization_is_not_always_idempotent() {
    // Requantizing dequantized values recomputes min/max and scale, which
    // can shift the grid. Only re-encoding against fixed parameters is a
    // fixed point (covered by the property above).
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut changed = 0;
    for _ in 0..200 {
        let w = gaussian(&mut rng, 128, 0.02);
        let g = quantize_e0m4(&w, 1).unwrap();
        let g2 = quantize_e0m4(&dequantize_e0m4(&g), 1).unwrap();
        changed += (g2.codes != g.codes) as usize;
    }
    assert!(changed < 200);
}

#[test]
fn saved_file_dequantizes_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w = gaussian(&mut rng, 256 * 8, 0.02);
    let q = quantize_weight(&w, 256, 8, Scheme::E0M4, 1, 128).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.lgq");
    std::fs::write(&path, q.to_bytes()).unwrap();
    let back = QuantizedWeight::from_bytes(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(back.dequantize(), q.dequantize());
}
