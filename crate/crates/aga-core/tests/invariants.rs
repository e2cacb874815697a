//! Property tests for the grouping pipeline, encoders, and losses.

use aga_core::encoders::{encode_text, register_encoder, EncoderConfig, EncoderParams, TextSample};
use aga_core::grouping::{alignment_weights, sparsify};
use aga_core::losses::iga_loss;
use aga_core::rng::Rng;
use aga_core::Tape;
use proptest::prelude::*;

fn matrix_strategy(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (2..=max_rows, 2..=max_cols).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-5.0f64..5.0, r * c).prop_map(move |data| (r, c, data))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn minmax_output_lives_in_unit_interval((r, c, data) in matrix_strategy(6, 9)) {
        let mut tape = Tape::new();
        let x = tape.constant(&[r, c], data).unwrap();
        let y = tape.minmax_rows(x).unwrap();
        for row in 0..r {
            let vals = &tape.value(y)[row * c..(row + 1) * c];
            prop_assert!(vals.iter().all(|&v| (0.0..=1.0).contains(&v)));
            // Every row attains 1 at its maximum.
            prop_assert!(vals.iter().any(|&v| v == 1.0));
        }
    }

    #[test]
    fn every_sigma_keeps_the_argmax_and_rows_normalize(
        (r, c, data) in matrix_strategy(6, 9),
        sigma in 0.0f64..=1.0,
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(&[r, c], data).unwrap();
        let s_hat = tape.minmax_rows(x).unwrap();
        let s_tilde = sparsify(&mut tape, s_hat, sigma).unwrap();
        let alpha = alignment_weights(&mut tape, s_tilde).unwrap();
        let hv = tape.value(s_hat).to_vec();
        let av = tape.value(alpha);
        for row in 0..r {
            let h = &hv[row * c..(row + 1) * c];
            let argmax = (0..c).fold(0, |b, k| if h[k] > h[b] { k } else { b });
            prop_assert!(av[row * c + argmax] > 0.0);
            let sum: f64 = av[row * c..(row + 1) * c].iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            prop_assert!(av[row * c..(row + 1) * c].iter().all(|&v| v >= 0.0));
            // Support stays within the thresholded entries (plus argmax).
            for k in 0..c {
                if av[row * c + k] > 0.0 {
                    prop_assert!(h[k] >= sigma || k == argmax);
                }
            }
        }
    }

    #[test]
    fn sparsity_never_grows_with_sigma((r, c, data) in matrix_strategy(6, 9)) {
        let mut tape = Tape::new();
        let x = tape.constant(&[r, c], data).unwrap();
        let s_hat = tape.minmax_rows(x).unwrap();
        let mut prev = usize::MAX;
        for step in 0..=8 {
            let sigma = step as f64 / 8.0;
            let s_tilde = sparsify(&mut tape, s_hat, sigma).unwrap();
            let nnz = tape.value(s_tilde).iter().filter(|&&v| v > 0.0).count();
            prop_assert!(nnz <= prev);
            prev = nnz;
        }
    }

    #[test]
    fn iga_loss_is_non_negative(
        l in 2usize..5,
        d in 2usize..5,
        seed in 0u64..1000,
    ) {
        let mut rng = Rng::from_seed(seed);
        let mut tape = Tape::new();
        let a = tape.constant(&[l, d], rng.normal_vec(l * d)).unwrap();
        let b = tape.constant(&[l, d], rng.normal_vec(l * d)).unwrap();
        let loss = iga_loss(&mut tape, a, b, 0.3).unwrap();
        prop_assert!(tape.scalar_value(loss) >= -1e-12);
    }

    #[test]
    fn text_encoder_ignores_padded_slots(
        mask_bits in proptest::collection::vec(any::<bool>(), 6),
        real_ids in proptest::collection::vec(0u32..10, 6),
        pad_ids_a in proptest::collection::vec(0u32..10, 6),
        pad_ids_b in proptest::collection::vec(0u32..10, 6),
    ) {
        prop_assume!(mask_bits.iter().any(|&m| m));
        let cfg = EncoderConfig {
            n_patches: 4,
            patch_features: 3,
            vocab: 10,
            m_max: 6,
            hidden: 5,
            embed_dim: 4,
            mix_window: 3,
        };
        let mut rng = Rng::from_seed(99);
        let params = EncoderParams::init(&cfg, &mut rng);
        let build = |pads: &[u32]| {
            let ids: Vec<u32> = (0..6)
                .map(|i| if mask_bits[i] { real_ids[i] } else { pads[i] })
                .collect();
            let sample = TextSample { token_ids: ids, mask: mask_bits.clone() };
            let mut tape = Tape::new();
            let vars = register_encoder(&mut tape, &params, &cfg).unwrap();
            let enc = encode_text(&mut tape, &sample, &vars, &cfg).unwrap();
            (
                tape.value(enc.token_embeds).to_vec(),
                tape.value(enc.global).to_vec(),
            )
        };
        let (ta, ga) = build(&pad_ids_a);
        let (tb, gb) = build(&pad_ids_b);
        // Bitwise: padded ids may never leak into any output.
        prop_assert_eq!(ta, tb);
        prop_assert_eq!(ga, gb);
    }
}
