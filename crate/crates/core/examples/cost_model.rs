//! Analytic FLOPs of each branch and fusion variant, and the amortized
//! per-frame cost as the keyframe interval grows.

use arseg::backbone::{Backbone, BackboneConfig, BranchConfig};
use arseg::creff::{Creff, FusionConfig, FusionKind};
use arseg::eval::{amortized_cost, Pipeline};

fn main() -> arseg::Result<()> {
    let (h, w) = (720, 960);
    let config = BackboneConfig::default();
    let hr = BranchConfig::new(1.0, Backbone::new(config.clone(), 0)?)?;
    let lr = BranchConfig::new(0.5, Backbone::new(config.clone(), 1)?)?;
    let creff = Creff::new(FusionConfig::local(7), config.feature_channels, 0)?;
    let pipe = Pipeline { hr: &hr, lr: &lr, creff: &creff };
    let (hr_f, lr_f, fuse_f) = (pipe.hr_frame_flops(h, w)?, pipe.lr_frame_flops(h, w)?, pipe.creff_flops(h, w)?);
    println!("{h}×{w}: HR frame {:.3} GFLOPs, LR frame {:.3}, LA(7) fusion {:.3}", g(hr_f.total()), g(lr_f.total()), g(fuse_f.total()));
    println!("conv-only ratio LR/HR: {:.4}", (lr_f.conv - pipe.lr.backbone.final_conv_flops(h, w)) as f64 / (hr_f.conv - hr.backbone.final_conv_flops(h, w)) as f64);

    for kind in FusionKind::ALL {
        let c = Creff::new(FusionConfig::new(kind), config.feature_channels, 0)?;
        let p = Pipeline { creff: &c, ..pipe };
        println!("  {:<10} {:.4} GFLOPs", kind.name(), g(p.creff_flops(h, w)?.total()));
    }
    for l in [1, 2, 4, 6, 8, 12, 15, 30] {
        let r = pipe.cost_report(h, w, l)?;
        println!("L={l:<3} average {:.3} GFLOPs, {:.1}% of all-HR", g(r.average as u64), 100.0 * r.ratio);
    }
    let r = amortized_cost(309.02, 83.16, 0.0, 12)?;
    println!("309.02 / 83.16 GFLOPs at L=12: average {:.2}, ratio {:.1}%", r.average, 100.0 * r.ratio);
    Ok(())
}

fn g(flops: u64) -> f64 {
    flops as f64 / 1e9
}
