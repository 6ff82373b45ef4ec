//! Fuses keyframe features into LR features with every fusion variant and
//! prints how close each result gets to the true features of the P frame.

use arseg::codec::{estimate_motion, expand_mv};
use arseg::creff::{creff_forward, fusion_flops, Creff, FusionConfig, FusionKind};
use arseg::ops::{bilinear_resize, mse};
use arseg::tensor::Tensor;

fn features(t: usize) -> Tensor {
    // two smooth channels and one sharp edge, all drifting right by one pixel per frame
    Tensor::from_fn(&[3, 32, 48], |i| {
        let (c, y, x) = (i / (32 * 48), (i / 48) % 32, (i % 48) as f64 - t as f64);
        match c {
            0 => (x / 6.0).sin(),
            1 => (y as f64 / 5.0).cos() * (x / 9.0).cos(),
            _ => if x > 20.0 { 1.0 } else { 0.0 },
        }
    })
}

fn main() -> arseg::Result<()> {
    let (f_i, f_p) = (features(0), features(3));
    let lr = bilinear_resize(&f_p, 16, 24)?;
    let frame = |t: &Tensor| -> arseg::Result<Tensor> {
        Tensor::new(&[1, 32, 48], t.data()[..32 * 48].to_vec())
    };
    let motion = expand_mv(&estimate_motion(&frame(&f_i)?, &frame(&f_p)?, 8, 7)?, 32, 48)?;
    println!("{:<10} {:>12} {:>14}", "variant", "MSE to F_P", "fusion FLOPs");
    for kind in FusionKind::ALL {
        let config = FusionConfig::new(kind);
        let creff = Creff::new(config, 3, 0)?;
        let fused = creff_forward(&f_i, &motion, &lr, &creff)?;
        let flops = fusion_flops(&config, 3, 16, 24, 32, 48).total();
        println!("{:<10} {:>12.5} {:>14}", kind.name(), mse(&fused, &f_p)?, flops);
    }
    Ok(())
}
