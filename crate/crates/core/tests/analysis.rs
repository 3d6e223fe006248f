use lqec::analysis::{discrepancy_scan, min_rank_for_target, perplexity, OVERLAY_ITERS};
use lqec::data::{synthetic_text, Corpus, TextStyle};
use lqec::lqec::loftq_init;
use lqec::model::{train_base, DecoderModel, ModelConfig, TrainConfig};
use lqec::quant::{dequantize, quantize, QuantConfig};
use lqec::rng::SplitMix64;
use lqec::Tensor;

#[test]
fn adapter_overlay_helps_three_bit_more_than_two_bit() {
    let mut rng = SplitMix64::new(256);
    let weights: Vec<(String, Tensor)> = (0..5)
        .map(|i| (format!("w{i}"), Tensor::randn(&[256, 256], 1.0, &mut rng)))
        .collect();
    let rows = discrepancy_scan(&weights, &[2, 3, 4], &QuantConfig::rtn(4).unwrap(), Some(16)).unwrap();
    for chunk in rows.chunks(3) {
        let drop = |i: usize| 1.0 - chunk[i].with_adapter.unwrap() / chunk[i].normalized;
        assert!(drop(1) > drop(0), "{}: 3-bit drop {} vs 2-bit drop {}", chunk[0].name, drop(1), drop(0));

        // The overlay is exactly LoftQ's final discrepancy over the 4-bit base.
        let w = &weights.iter().find(|(n, _)| *n == chunk[0].name).unwrap().1;
        for row in chunk {
            let cfg = QuantConfig::rtn(row.bits).unwrap();
            let expect = loftq_init(w, &cfg, 16, OVERLAY_ITERS).unwrap().final_discrepancy() / chunk[2].raw;
            assert!((row.with_adapter.unwrap() - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn two_bit_residual_needs_more_rank_than_three_bit() {
    let model = DecoderModel::build(&ModelConfig::desk(5)).unwrap();
    let w = model.layers[0].ffn1.weight.effective().clone();
    let residual = |bits: u8| w.sub(&dequantize(&quantize(&w, &QuantConfig::rtn(bits).unwrap()).unwrap())).unwrap();
    let target = residual(4).frobenius();
    assert!(min_rank_for_target(&residual(2), target).unwrap() > min_rank_for_target(&residual(3), target).unwrap());
}

#[test]
fn two_bit_quantization_raises_teacher_perplexity() {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_ffn: 64,
        vocab_size: 256,
        max_seq_len: 32,
        seed: 1,
    };
    let corpus = Corpus::from_bytes(synthetic_text(1, 60_000, TextStyle::Prose), 0.1, None).unwrap();
    let mut teacher = DecoderModel::build(&cfg).unwrap();
    let mut tc = TrainConfig::new(150, 3e-3);
    tc.seq_len = 32;
    train_base(&mut teacher, &corpus, &tc).unwrap();
    let q = teacher.quantized(&QuantConfig::new(2, 16, lqec::quant::QuantMethod::Rtn).unwrap()).unwrap();
    let fp = perplexity(&teacher, corpus.heldout(), 32, 32).unwrap();
    let quant = perplexity(&q, corpus.heldout(), 32, 32).unwrap();
    assert!(fp < quant, "{fp} vs {quant}");
}
