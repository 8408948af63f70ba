use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dyad_core::datagen::{generate_dyad, read_sample, write_sample, DyadOptions, SampleSource};
use dyad_core::layout::{parse_layout, tmse, LayoutResult};
use dyad_core::metrics::{frechet_distance, GaussianStats, StatsAccumulator};
use dyad_core::numerics::{read_archive, write_archive, Tensor, TensorMap};

fn source() -> impl Strategy<Value = SampleSource> {
    prop_oneof![
        Just(SampleSource::Conversation),
        Just(SampleSource::SyntheticDub),
        Just(SampleSource::SingleSpeaker),
    ]
}

fn stats(seed: u64, d: usize) -> GaussianStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::<f64>::randn(&[d, d], 1.0, &mut rng);
    let m = DMatrix::from_row_slice(d, d, a.data());
    let mean = Tensor::<f64>::randn(&[d], 1.0, &mut rng);
    GaussianStats::new(DVector::from_column_slice(mean.data()), &m * m.transpose()).unwrap()
}

fn coord() -> impl Strategy<Value = f64> {
    -5.0f64..5.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn samples_survive_a_file_round_trip(seed in 0u64..10_000, src in source(), dur in 0.16f64..0.8) {
        let o = DyadOptions { duration_s: dur, ..Default::default() };
        let Ok(s) = generate_dyad(seed, src, &o) else { return Ok(()) };
        let mut buf = Vec::new();
        write_sample(&mut buf, &s).unwrap();
        prop_assert_eq!(read_sample(&mut buf.as_slice()).unwrap(), s);
    }

    #[test]
    fn dubbed_mix_is_the_sum_and_muted_frames_are_silent(seed in 0u64..10_000, overlap in 0.0f64..0.4) {
        let o = DyadOptions { duration_s: 0.64, overlap_fraction: overlap, ..Default::default() };
        let Ok(s) = generate_dyad(seed, SampleSource::SyntheticDub, &o) else { return Ok(()) };
        let (m, a, b) = (s.mixed.samples(), s.track_a.samples(), s.track_b.samples());
        prop_assert!(m.iter().zip(a.iter().zip(b)).all(|(m, (a, b))| *m == a + b));
        let hop = a.len() / s.len();
        for (track, mask) in [(a, &s.mask_a), (b, &s.mask_b)] {
            for (f, &v) in mask.values().iter().enumerate() {
                if v == 0.0 {
                    prop_assert!(track[f * hop..(f + 1) * hop].iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn frechet_distance_is_symmetric_and_non_negative(s1 in 0u64..1000, s2 in 0u64..1000, d in 1usize..6) {
        let (a, b) = (stats(s1, d), stats(s2 + 1000, d));
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= -1e-9);
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.abs().max(1.0));
    }

    #[test]
    fn accumulator_merge_matches_one_pass(seed in 0u64..1000, n in 4usize..60, cut in 0usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = Tensor::<f64>::randn(&[n, 3], 2.0, &mut rng);
        let rows: Vec<&[f64]> = xs.data().chunks(3).collect();
        let cut = cut.min(n);
        let mut whole = StatsAccumulator::new(3);
        let (mut left, mut right) = (StatsAccumulator::new(3), StatsAccumulator::new(3));
        for (i, r) in rows.iter().enumerate() {
            whole.push(r).unwrap();
            if i < cut { left.push(r).unwrap() } else { right.push(r).unwrap() }
        }
        let (w, m) = (whole.finish().unwrap(), left.merge(&right).unwrap().finish().unwrap());
        prop_assert!((w.mean() - m.mean()).amax() < 1e-12);
        prop_assert!((w.cov() - m.cov()).amax() < 1e-10);
    }

    #[test]
    fn tmse_averages_squared_distance_over_participants(a in [coord(), coord(), coord()], b in [coord(), coord(), coord()],
                                       c in [coord(), coord(), coord()], d in [coord(), coord(), coord()]) {
        let (p, g) = (LayoutResult::new(a, b).unwrap(), LayoutResult::new(c, d).unwrap());
        let want = a.iter().zip(&c).chain(b.iter().zip(&d)).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 2.0;
        prop_assert!((tmse(&p, &g) - want).abs() <= 1e-12 * want.max(1.0));
        prop_assert_eq!(tmse(&p, &g), tmse(&g, &p));
    }

    #[test]
    fn parse_layout_never_panics(raw in ".{0,120}") {
        let _ = parse_layout(&raw);
    }

    #[test]
    fn archives_round_trip_bit_exactly(seed in 0u64..1000, shapes in prop::collection::vec((1usize..5, 1usize..5), 1..5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map: TensorMap<f64> = shapes.iter().enumerate()
            .map(|(i, &(r, c))| (format!("t{i}"), Tensor::randn(&[r, c], 1.0, &mut rng)))
            .collect();
        let mut buf = Vec::new();
        write_archive(&mut buf, &map).unwrap();
        let back = read_archive::<f64, _>(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), map.len());
        for (k, t) in &map {
            prop_assert_eq!(back[k].shape(), t.shape());
            prop_assert!(back[k].data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
