//! Encodes a synthetic clip, writes and re-reads the container, and reports
//! motion statistics and reconstruction error.

use arseg::codec::{decode_clip, encode_clip, CodecParams, EncodedClip};
use arseg::synth::{generate_clip, SynthConfig};

fn main() -> arseg::Result<()> {
    let clip = generate_clip(&SynthConfig::default(), 0)?;
    for quant_step in [0.0, 0.02, 0.1] {
        let params = CodecParams {
            gop_length: 6,
            block_size: 8,
            search_range: 7,
            quant_step,
        };
        let encoded = encode_clip(&clip.frames, params)?;
        let bytes = encoded.to_bytes();
        let decoded = decode_clip(&EncodedClip::from_bytes(&bytes)?)?;
        let max_err = decoded
            .frames
            .iter()
            .zip(&clip.frames)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max);
        let max_mv = decoded.motion.iter().flatten().map(|m| m.max_magnitude()).max().unwrap_or(0);
        println!(
            "quant {quant_step:<5} {} bytes, {} frames, largest MV {max_mv} px, max reconstruction error {max_err:.2e}",
            bytes.len(),
            decoded.frames.len()
        );
    }
    Ok(())
}
