//! Bjøntegaard deltas between two rate curves (mean mIoU gain at equal
//! cost, mean cost change at equal mIoU).

use arseg::eval::{bd_metrics, RateCurve, RatePoint};

fn curve(points: &[(f64, f64)]) -> arseg::Result<RateCurve> {
    RateCurve::new(points.iter().map(|&(flops, miou)| RatePoint { flops, miou }).collect())
}

fn main() -> arseg::Result<()> {
    let anchor = curve(&[(100.0, 0.60), (200.0, 0.66), (400.0, 0.70), (800.0, 0.72)])?;
    let cheaper = curve(&[(50.0, 0.60), (100.0, 0.66), (200.0, 0.70), (400.0, 0.72)])?;
    let better = curve(&[(100.0, 0.62), (200.0, 0.68), (400.0, 0.72), (800.0, 0.74)])?;
    for (name, test) in [("anchor", &anchor), ("half cost", &cheaper), ("+2 points", &better)] {
        let r = bd_metrics(&anchor, test)?;
        println!("{name:<10} BD-mIoU {:+.4}  BD-FLOPs {:+.2}%", r.bd_miou, r.bd_flops);
    }
    let mut csv = Vec::new();
    better.write_csv(&mut csv)?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}
