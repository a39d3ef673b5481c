//! Raw numeric kernels shared by the tape ops and the batched
//! inference path. Everything operates on row-major `f64` slices;
//! callers are responsible for shape checks.

/// Output spatial size of a 2-D cross-correlation.
pub fn conv2d_out_dim(input: usize, kernel: usize, padding: usize, stride: usize) -> usize {
    (input + 2 * padding).saturating_sub(kernel) / stride + 1
}

/// Loop bounds for one kernel offset `k`: the output positions `y` for
/// which `y*stride + k - padding` lands inside `[0, input_dim)`.
#[inline]
fn offset_bounds(
    input_dim: usize,
    out_dim: usize,
    k: usize,
    padding: usize,
    stride: usize,
) -> (usize, usize) {
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if input_dim + padding > k {
        ((input_dim - 1 + padding - k) / stride + 1).min(out_dim)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// 2-D cross-correlation: `out[co,y,x] += sum_{ci,ky,kx} w[co,ci,ky,kx] *
/// in[ci, y*s+ky-p, x*s+kx-p]` with zero padding. `out` must be zeroed
/// by the caller and have length `c_out * h_out * w_out`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    input: &[f64],
    (c_in, h, w): (usize, usize, usize),
    kernels: &[f64],
    (c_out, kh, kw): (usize, usize, usize),
    padding: usize,
    stride: usize,
    out: &mut [f64],
) {
    let h_out = conv2d_out_dim(h, kh, padding, stride);
    let w_out = conv2d_out_dim(w, kw, padding, stride);
    for co in 0..c_out {
        for ci in 0..c_in {
            for ky in 0..kh {
                let (y_lo, y_hi) = offset_bounds(h, h_out, ky, padding, stride);
                for kx in 0..kw {
                    let wgt = kernels[((co * c_in + ci) * kh + ky) * kw + kx];
                    let (x_lo, x_hi) = offset_bounds(w, w_out, kx, padding, stride);
                    for y in y_lo..y_hi {
                        let yi = y * stride + ky - padding;
                        let in_row = &input[(ci * h + yi) * w..(ci * h + yi + 1) * w];
                        let out_row = &mut out[(co * h_out + y) * w_out..(co * h_out + y + 1) * w_out];
                        for x in x_lo..x_hi {
                            out_row[x] += wgt * in_row[x * stride + kx - padding];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of `conv2d_forward` w.r.t. the input. Accumulates into `d_input`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_input(
    d_out: &[f64],
    (c_in, h, w): (usize, usize, usize),
    kernels: &[f64],
    (c_out, kh, kw): (usize, usize, usize),
    padding: usize,
    stride: usize,
    d_input: &mut [f64],
) {
    let h_out = conv2d_out_dim(h, kh, padding, stride);
    let w_out = conv2d_out_dim(w, kw, padding, stride);
    for co in 0..c_out {
        for ci in 0..c_in {
            for ky in 0..kh {
                let (y_lo, y_hi) = offset_bounds(h, h_out, ky, padding, stride);
                for kx in 0..kw {
                    let wgt = kernels[((co * c_in + ci) * kh + ky) * kw + kx];
                    let (x_lo, x_hi) = offset_bounds(w, w_out, kx, padding, stride);
                    for y in y_lo..y_hi {
                        let yi = y * stride + ky - padding;
                        let g_row = &d_out[(co * h_out + y) * w_out..(co * h_out + y + 1) * w_out];
                        let d_row = &mut d_input[(ci * h + yi) * w..(ci * h + yi + 1) * w];
                        for x in x_lo..x_hi {
                            d_row[x * stride + kx - padding] += wgt * g_row[x];
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of `conv2d_forward` w.r.t. the kernels. Accumulates into `d_kernels`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_kernels(
    d_out: &[f64],
    input: &[f64],
    (c_in, h, w): (usize, usize, usize),
    (c_out, kh, kw): (usize, usize, usize),
    padding: usize,
    stride: usize,
    d_kernels: &mut [f64],
) {
    let h_out = conv2d_out_dim(h, kh, padding, stride);
    let w_out = conv2d_out_dim(w, kw, padding, stride);
    for co in 0..c_out {
        for ci in 0..c_in {
            for ky in 0..kh {
                let (y_lo, y_hi) = offset_bounds(h, h_out, ky, padding, stride);
                for kx in 0..kw {
                    let (x_lo, x_hi) = offset_bounds(w, w_out, kx, padding, stride);
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let yi = y * stride + ky - padding;
                        let g_row = &d_out[(co * h_out + y) * w_out..(co * h_out + y + 1) * w_out];
                        let in_row = &input[(ci * h + yi) * w..(ci * h + yi + 1) * w];
                        for x in x_lo..x_hi {
                            acc += g_row[x] * in_row[x * stride + kx - padding];
                        }
                    }
                    d_kernels[((co * c_in + ci) * kh + ky) * kw + kx] += acc;
                }
            }
        }
    }
}

/// Source index for nearest-neighbor resizing: `dst * src_len / dst_len`.
#[inline]
pub fn upsample_src_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    dst * src_len / dst_len
}

/// Batched ("lanes-last") cross-correlation used by the inference path.
/// Layout is `[C, H, W, lanes]` so the innermost loop runs over
/// contiguous lanes.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward_lanes(
    input: &[f64],
    (c_in, h, w): (usize, usize, usize),
    kernels: &[f64],
    (c_out, kh, kw): (usize, usize, usize),
    padding: usize,
    stride: usize,
    lanes: usize,
    out: &mut [f64],
) {
    let h_out = conv2d_out_dim(h, kh, padding, stride);
    let w_out = conv2d_out_dim(w, kw, padding, stride);
    for co in 0..c_out {
        for ci in 0..c_in {
            for ky in 0..kh {
                let (y_lo, y_hi) = offset_bounds(h, h_out, ky, padding, stride);
                for kx in 0..kw {
                    let wgt = kernels[((co * c_in + ci) * kh + ky) * kw + kx];
                    let (x_lo, x_hi) = offset_bounds(w, w_out, kx, padding, stride);
                    for y in y_lo..y_hi {
                        let yi = y * stride + ky - padding;
                        for x in x_lo..x_hi {
                            let xi = x * stride + kx - padding;
                            let ib = ((ci * h + yi) * w + xi) * lanes;
                            let ob = ((co * h_out + y) * w_out + x) * lanes;
                            let (src, dst) = (&input[ib..ib + lanes], &mut out[ob..ob + lanes]);
                            for l in 0..lanes {
                                dst[l] += wgt * src[l];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-nested-loop reference convolution.
    fn conv2d_reference(
        input: &[f64],
        (c_in, h, w): (usize, usize, usize),
        kernels: &[f64],
        (c_out, kh, kw): (usize, usize, usize),
        padding: usize,
        stride: usize,
    ) -> Vec<f64> {
        let h_out = conv2d_out_dim(h, kh, padding, stride);
        let w_out = conv2d_out_dim(w, kw, padding, stride);
        let mut out = vec![0.0; c_out * h_out * w_out];
        for co in 0..c_out {
            for y in 0..h_out {
                for x in 0..w_out {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let yi = (y * stride + ky) as isize - padding as isize;
                                let xi = (x * stride + kx) as isize - padding as isize;
                                if yi >= 0 && (yi as usize) < h && xi >= 0 && (xi as usize) < w {
                                    acc += kernels[((co * c_in + ci) * kh + ky) * kw + kx]
                                        * input[(ci * h + yi as usize) * w + xi as usize];
                                }
                            }
                        }
                    }
                    out[(co * h_out + y) * w_out + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_reference_on_random_inputs() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(c_in, h, w, c_out, kh, kw, pad, stride) in &[
            (4usize, 9usize, 9usize, 16usize, 3usize, 3usize, 1usize, 1usize),
            (4, 9, 9, 16, 3, 3, 1, 2),
            (1, 9, 9, 1, 1, 2, 0, 1),
            (1, 9, 9, 1, 2, 1, 0, 1),
            (3, 5, 7, 2, 3, 3, 2, 2),
        ] {
            let input: Vec<f64> = (0..c_in * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let kernels: Vec<f64> =
                (0..c_out * c_in * kh * kw).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h_out = conv2d_out_dim(h, kh, pad, stride);
            let w_out = conv2d_out_dim(w, kw, pad, stride);
            let mut fast = vec![0.0; c_out * h_out * w_out];
            conv2d_forward(&input, (c_in, h, w), &kernels, (c_out, kh, kw), pad, stride, &mut fast);
            let slow = conv2d_reference(&input, (c_in, h, w), &kernels, (c_out, kh, kw), pad, stride);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "conv mismatch: {a} vs {b}");
            }
        }
    }

    #[test]
    fn lanes_variant_matches_single_lane() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let (c_in, h, w, c_out, kh, kw) = (4, 9, 9, 6, 3, 3);
        let input: Vec<f64> = (0..c_in * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kernels: Vec<f64> =
            (0..c_out * c_in * kh * kw).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut plain = vec![0.0; c_out * h * w];
        conv2d_forward(&input, (c_in, h, w), &kernels, (c_out, kh, kw), 1, 1, &mut plain);

        let lanes = 3;
        let mut input_l = vec![0.0; input.len() * lanes];
        for (i, v) in input.iter().enumerate() {
            for l in 0..lanes {
                input_l[i * lanes + l] = v * (l + 1) as f64;
            }
        }
        let mut out_l = vec![0.0; plain.len() * lanes];
        conv2d_forward_lanes(
            &input_l,
            (c_in, h, w),
            &kernels,
            (c_out, kh, kw),
            1,
            1,
            lanes,
            &mut out_l,
        );
        for (i, v) in plain.iter().enumerate() {
            for l in 0..lanes {
                let got = out_l[i * lanes + l];
                let want = v * (l + 1) as f64;
                assert!((got - want).abs() < 1e-9, "lane mismatch at {i}/{l}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn upsample_mapping_covers_source() {
        let map: Vec<usize> = (0..9).map(|d| upsample_src_index(d, 5, 9)).collect();
        assert_eq!(map, vec![0, 0, 1, 1, 2, 2, 3, 3, 4]);
    }
}
