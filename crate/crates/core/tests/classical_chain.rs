//! Classical-chain behavior that spans modules: BP agreement with exhaustive
//! maximum-likelihood decoding on a toy code, and the end-to-end baseline
//! scoring rules.

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semcom::channel::{snr_to_sigma2, transmit_symbols};
use semcom::classical::{
    baseline_miou, classical_pipeline, ClassicalOutcome, LdpcCode, QamConstellation,
};
use semcom::codec::{CodecState, FeatureTensor};
use semcom::config::NetworkConfig;
use semcom::data::{synthetic_shapes, Split};
use semcom::metrics::argmax_labels;

fn toy_code() -> LdpcCode {
    LdpcCode::from_rows(
        8,
        vec![
            vec![0, 1, 3, 4],
            vec![0, 2, 3, 5],
            vec![1, 2, 3, 6],
            vec![0, 1, 2, 7],
        ],
    )
    .unwrap()
}

/// Exhaustive ML decoding: the codeword maximizing the LLR agreement.
fn ml_decode(code: &LdpcCode, llrs: &[f64]) -> Vec<u8> {
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for m in 0..(1u32 << code.k) {
        let msg: Vec<u8> = (0..code.k).map(|i| (m >> i & 1) as u8).collect();
        let c = code.encode(&msg).unwrap();
        let score: f64 = c
            .iter()
            .zip(llrs.iter())
            .map(|(&bit, &l)| if bit == 0 { l } else { -l })
            .sum();
        if score > best.0 {
            best = (score, msg);
        }
    }
    best.1
}

#[test]
fn bp_agrees_with_ml_on_converged_cases() {
    let code = toy_code();
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let snr_db = 6.0;
    let sigma2 = snr_to_sigma2(snr_db, 1.0).unwrap();
    let mut converged = 0usize;
    let mut agree = 0usize;
    for _ in 0..1000 {
        let msg: Vec<u8> = (0..code.k).map(|_| rng.gen_range(0..2u8)).collect();
        let c = code.encode(&msg).unwrap();
        // BPSK over the complex channel (quadrature unused).
        let symbols: Vec<(f64, f64)> = c.iter().map(|&b| (1.0 - 2.0 * b as f64, 0.0)).collect();
        let received = transmit_symbols(&symbols, sigma2, 1.0, &mut rng);
        let llrs: Vec<f64> = received.iter().map(|&(re, _)| 4.0 * re / sigma2).collect();
        let bp = code.decode(&llrs, 50).unwrap();
        if bp.converged {
            converged += 1;
            if bp.message == ml_decode(&code, &llrs) {
                agree += 1;
            }
        }
    }
    assert!(converged > 500, "converged {converged}/1000");
    let rate = agree as f64 / converged as f64;
    assert!(rate >= 0.99, "BP/ML agreement {rate:.4} over {converged} cases");
}

#[test]
fn post_decoding_ber_decreases_with_snr() {
    use semcom::classical::measure_post_decoding_ber;
    let code = LdpcCode::builtin_n648_r12();
    let constellation = QamConstellation::new(16).unwrap();
    // Coarse, fast version of the monotonicity sweep; the acceptance suite
    // runs the full bit budget.
    let mut prev = f64::INFINITY;
    for snr_db in [0.0, 5.0, 8.0, 11.0, 20.0] {
        let ber =
            measure_post_decoding_ber(&code, &constellation, snr_db, 20_000, 40, 71).unwrap();
        assert!(ber <= prev + 1e-9, "ber {ber} at {snr_db} dB after {prev}");
        prev = ber;
    }
    assert_eq!(prev, 0.0, "high-SNR BER should be zero");
}

fn tiny_model() -> (NetworkConfig, CodecState) {
    let cfg = NetworkConfig {
        input_height: 32,
        input_width: 32,
        input_channels: 3,
        num_down: 2,
        num_up: 2,
        base_channels: 4,
        channel_growth: 2.0,
        num_classes: 2,
        cbam_enabled: false,
        cbam_reduction: 4,
        kernel_main: 3,
    };
    let state = CodecState::new(&cfg, 33);
    (cfg, state)
}

#[test]
fn ideal_baseline_equals_clean_segmentation_of_png_round_trip() {
    let (_, state) = tiny_model();
    let split = synthetic_shapes(3, 32, 12, Split::Test).unwrap();
    let code = LdpcCode::builtin_n648_r12();
    let constellation = QamConstellation::new(16).unwrap();

    let points = baseline_miou(
        &split,
        &[f64::INFINITY],
        &state,
        &code,
        &constellation,
        30,
        5,
    )
    .unwrap();
    assert_eq!(points[0].failed_images, 0);

    // Reference: segment the PNG round-tripped images directly.
    let mut eval = semcom::metrics::SegmentationEval::new(2);
    for sample in &split.samples {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (outcome, _) = classical_pipeline(
            &sample.image,
            f64::INFINITY,
            &code,
            &constellation,
            30,
            &mut rng,
        )
        .unwrap();
        let ClassicalOutcome::Reconstructed { image, .. } = outcome else {
            panic!("noiseless reconstruction failed")
        };
        let tx = state
            .encode(&FeatureTensor::image(image.insert_axis(Axis(0))))
            .unwrap();
        let logits = state.decode(&tx).unwrap();
        let pred = argmax_labels(&logits.data);
        eval.update(&pred.index_axis(Axis(0), 0).to_owned(), &sample.mask)
            .unwrap();
    }
    assert!((points[0].miou - eval.miou().unwrap()).abs() < 1e-12);
}

#[test]
fn deep_fade_scores_as_all_background() {
    let (_, state) = tiny_model();
    let split = synthetic_shapes(2, 32, 13, Split::Test).unwrap();
    let code = LdpcCode::builtin_n648_r12();
    let constellation = QamConstellation::new(16).unwrap();

    // -10 dB: every frame fails, so every image scores as all background.
    let points = baseline_miou(&split, &[-10.0], &state, &code, &constellation, 15, 5).unwrap();
    assert_eq!(points[0].failed_images, split.len());

    let mut eval = semcom::metrics::SegmentationEval::new(2);
    for sample in &split.samples {
        let pred = ndarray::Array2::zeros(sample.mask.dim());
        eval.update(&pred, &sample.mask).unwrap();
    }
    assert!((points[0].miou - eval.miou().unwrap()).abs() < 1e-12);
}
