//! FLOP conventions shared by the analytic cost model and the tape's
//! executed-op counter. One multiply-accumulate counts as 2 FLOPs.

/// `2·k²·(C_in/g)·C_out·H_out·W_out`; bias adds are not counted.
pub fn conv(k: usize, cin: usize, cout: usize, groups: usize, ho: usize, wo: usize) -> u64 {
    2 * (k * k) as u64 * (cin / groups) as u64 * cout as u64 * (ho * wo) as u64
}

/// Bilinear resize: 8 FLOPs per output element; a same-size resize is free.
pub fn resize(c: usize, h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> u64 {
    if (h_in, w_in) == (h_out, w_out) {
        0
    } else {
        8 * (c * h_out * w_out) as u64
    }
}

/// Pointwise ops (ramp, residual add): one FLOP per element.
pub fn pointwise(elements: usize) -> u64 {
    elements as u64
}

/// Average pooling: one FLOP per input element.
pub fn avg_pool(input_elements: usize) -> u64 {
    input_elements as u64
}

/// Attention with `candidates` keys per query over `c` channels:
/// `2c` for each score, `2c` for each weighted value, and 4 softmax FLOPs
/// (scale, exponent, sum, normalize) per candidate.
pub fn attention(c: usize, queries: usize, candidates: usize) -> u64 {
    (queries * candidates) as u64 * (4 * c as u64 + 4)
}

/// Softmax over a tensor: 4 FLOPs per element.
pub fn softmax(elements: usize) -> u64 {
    4 * elements as u64
}
