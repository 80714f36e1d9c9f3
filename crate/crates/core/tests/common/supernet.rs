//! Supernets over post-training quantized copies of one random model.

use mixquant::model::{ModelConfig, TransformerLm};
use mixquant::nas::{build_supernet, extract_1best, NasConfig, Supernet};
use mixquant::quant::{model_clusters, BitWidth, Precision, QuantizedModel};

use super::random_model;

/// Post-training quantization of `model` at one width everywhere.
pub fn uniform(model: &TransformerLm, bits: BitWidth) -> TransformerLm {
    let assignment: Vec<_> = model_clusters(&model.config, true)
        .into_iter()
        .map(|c| (c, Precision::Quantized(bits)))
        .collect();
    QuantizedModel::quantize(model, &assignment).unwrap().dequantize().unwrap()
}

pub fn stream(len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|i| (i * i + i / 3) % vocab).collect()
}

pub fn frozen(beta: f64) -> NasConfig {
    NasConfig {
        epochs: 4,
        steps_per_epoch: 10,
        batch_size: 4,
        lr_arch: 0.5,
        beta,
        freeze_weights: true,
        ..NasConfig::default()
    }
}

pub fn average_bits(net: &Supernet) -> f64 {
    let choice = extract_1best(&net.selection());
    choice.iter().map(|c| f64::from(c.2.bits())).sum::<f64>() / choice.len() as f64
}

pub fn ptq_supernet(config: ModelConfig, seed: u64) -> (Vec<(BitWidth, TransformerLm)>, Supernet) {
    let base = random_model(config, seed);
    let models: Vec<(BitWidth, TransformerLm)> = BitWidth::CANDIDATES.iter().map(|&b| (b, uniform(&base, b))).collect();
    let refs: Vec<(BitWidth, &TransformerLm)> = models.iter().map(|(b, m)| (*b, m)).collect();
    let net = build_supernet(&refs, &models[3].1, Some(BitWidth::EIGHT), Some(BitWidth::EIGHT)).unwrap();
    (models, net)
}
