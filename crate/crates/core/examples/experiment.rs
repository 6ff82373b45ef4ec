//! End-to-end toy experiment: trains the HR branch, an all-LR baseline and the
//! altering-resolution variants on synthetic clips, then prints per-distance
//! mIoU and amortized cost for each keyframe interval.
//!
//! Takes a few minutes in release mode on one core.

use arseg::experiment::{run_experiment, ExperimentConfig, VariantResult};

fn show(v: &VariantResult) {
    for (l, table) in &v.tables {
        let rows: Vec<String> = table.rows.iter().map(|(d, m)| format!("{d}:{:.3}", m.unwrap_or(f64::NAN))).collect();
        println!(
            "  {:<8} L={l:<3} overall {:.4}  cost ratio {:.3}  [{}]",
            v.name,
            table.overall.unwrap_or(f64::NAN),
            v.cost[l].ratio,
            rows.join(" ")
        );
    }
    if let Some((fused, plain)) = v.feature_mse {
        println!("  {:<8} feature MSE {fused:.3} (plain upsampling {plain:.3})", v.name);
    }
}

fn main() -> arseg::Result<()> {
    let cfg = ExperimentConfig::default();
    let report = run_experiment(&cfg, |msg| eprintln!("{msg}"))?;
    println!("HR every frame  mIoU {:.4}", report.hr_miou.unwrap_or(f64::NAN));
    println!("LR every frame  mIoU {:.4}", report.lr_baseline_miou.unwrap_or(f64::NAN));
    show(&report.full);
    if let Some(v) = &report.no_direct_connection {
        show(v);
    }
    show(&report.warp_only);
    println!("finished in {:.0}s", report.seconds);
    Ok(())
}
