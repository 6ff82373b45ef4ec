//! Per-distance mIoU of an untrained pipeline on a few synthetic clips,
//! with the CSV report the command-line tool writes.

use arseg::backbone::{Backbone, BackboneConfig, BranchConfig};
use arseg::creff::{Creff, FusionConfig};
use arseg::eval::{miou_by_distance, write_report, AnnotatedClip, MotionSearch, Pipeline};
use arseg::synth::{generate, SynthConfig};
use arseg::IGNORE_INDEX;

fn main() -> arseg::Result<()> {
    let cfg = SynthConfig::default();
    let clips: Vec<AnnotatedClip> = generate(&cfg, 0, 3)?
        .into_iter()
        .map(|c| AnnotatedClip {
            labels: [10, 11].iter().map(|&p| (p, c.labels[p].clone())).collect(),
            frames: c.frames,
        })
        .collect();
    let backbone = BackboneConfig::default();
    let hr = BranchConfig::new(1.0, Backbone::new(backbone.clone(), 0)?)?;
    let lr = BranchConfig::new(0.5, Backbone::new(backbone.clone(), 0)?.with_final_conv(hr.backbone.final_conv.clone())?)?;
    let creff = Creff::new(FusionConfig::local(3), backbone.feature_channels, 0)?;
    let pipe = Pipeline { hr: &hr, lr: &lr, creff: &creff };
    let search = MotionSearch { block_size: 8, search_range: 15 };
    let table = miou_by_distance(&clips, pipe, 6, search, IGNORE_INDEX)?;
    let cost = pipe.cost_report(cfg.height, cfg.width, 6)?;
    write_report(&table, Some(&cost), std::io::stdout())?;
    Ok(())
}
