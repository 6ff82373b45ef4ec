//! Checks tape gradients of the LR objective (LR backbone, fusion, shared
//! final convolution, cross-entropy plus feature MSE) against central
//! differences.

use std::sync::Arc;

use arseg::backbone::{Backbone, BackboneConfig, BranchConfig, EncoderLayer};
use arseg::creff::{Creff, FusionConfig};
use arseg::tensor::{LabelMap, Tensor};
use arseg::train::{check_lr_gradients, PreparedPair, SimilarityLoss};

fn main() -> arseg::Result<()> {
    let config = BackboneConfig {
        in_channels: 1,
        encoder: vec![EncoderLayer { channels: 4, stride: 1 }],
        decoder: vec![],
        feature_channels: 4,
        num_classes: 3,
        bias: true,
    };
    let lr = BranchConfig::new(0.5, Backbone::new(config, 5)?)?;
    let creff = Creff::new(FusionConfig::local(3), 4, 0)?;
    let pair = PreparedPair {
        keyframe_features: Tensor::from_fn(&[4, 16, 16], |i| ((i * 104729) % 89) as f64 / 89.0),
        target_features: Tensor::from_fn(&[4, 16, 16], |i| ((i * 1299709) % 83) as f64 / 83.0),
        target: Tensor::from_fn(&[1, 16, 16], |i| ((i * 7919) % 97) as f64 / 97.0),
        motion: Tensor::from_fn(&[2, 16, 16], |i| if i < 256 { 1.0 } else { -1.0 }),
        labels: Arc::new(LabelMap::new(16, 16, (0..256).map(|i| (i % 3) as u32).collect())?),
    };
    for kind in [SimilarityLoss::Mse, SimilarityLoss::Kl] {
        let report = check_lr_gradients(&lr, &creff, &pair, kind, 1e-3)?;
        println!(
            "{kind:?}: {} parameter tensors, max relative error {:.3e} at tensor {} element {}",
            report.analytic.len(),
            report.max_rel_error,
            report.worst.0,
            report.worst.1
        );
    }
    Ok(())
}
