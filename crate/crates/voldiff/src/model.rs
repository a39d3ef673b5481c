//! The conditional noise-prediction network: a small U-Net over 4×9×9
//! inputs with one downsampling stage (9→5), one upsampling stage back
//! to 9×9 with a skip connection, sinusoidal time embedding, a learned
//! scalar-conditioning embedding, and FiLM modulation after every
//! convolution block.
//!
//! Two execution paths share the same numeric kernels and operation
//! order: a tape path for training gradients and a lanes-batched value
//! path used by sampling, where all chains for one date advance through
//! the network together. For a single lane both paths produce bitwise
//! identical outputs.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridmath::{kernels, Array, Tape, Var};

/// Spatial side of the surface grid.
const SIDE: usize = 9;
/// Spatial side after the stride-2 downsampling conv.
const DOWN_SIDE: usize = 5;
/// Number of raw conditioning scalars.
pub const SCALAR_COUNT: usize = 5;

/// Network hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub enc_channels: usize,
    pub bottle_channels: usize,
    pub time_embed_dim: usize,
    pub scalar_embed_dim: usize,
    pub film_hidden: (usize, usize),
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 4,
            out_channels: 1,
            enc_channels: 16,
            bottle_channels: 30,
            time_embed_dim: 10,
            scalar_embed_dim: 10,
            film_hidden: (10, 10),
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("enc_channels", self.enc_channels),
            ("bottle_channels", self.bottle_channels),
            ("time_embed_dim", self.time_embed_dim),
            ("scalar_embed_dim", self.scalar_embed_dim),
            ("film_hidden.0", self.film_hidden.0),
            ("film_hidden.1", self.film_hidden.1),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be even for sin/cos pairs, got {}",
                self.time_embed_dim
            )));
        }
        // Structural contract of the fixed topology: the encoder halves
        // 9 to 5 and the decoder restores 9, so output spatial shape
        // equals input spatial shape.
        debug_assert_eq!(kernels::conv2d_out_dim(SIDE, 3, 1, 2), DOWN_SIDE);
        Ok(())
    }

    /// Width of the joint FiLM input: time and scalar embeddings
    /// concatenated.
    pub fn joint_embed_dim(&self) -> usize {
        self.time_embed_dim + self.scalar_embed_dim
    }
}

/// Conv-block topology shared by the init, tape, and batched paths.
/// `(name, c_in, c_out, stride)`; `up` runs after the nearest-neighbor
/// resize and `dec1` consumes the skip concatenation.
fn blocks(cfg: &UNetConfig) -> [(&'static str, usize, usize, usize); 8] {
    let e = cfg.enc_channels;
    let b = cfg.bottle_channels;
    [
        ("enc1", cfg.in_channels, e, 1),
        ("enc2", e, e, 1),
        ("down", e, e, 2),
        ("mid1", e, b, 1),
        ("mid2", b, b, 1),
        ("up", b, e, 1),
        ("dec1", 2 * e, e, 1),
        ("dec2", e, e, 1),
    ]
}

/// Canonical parameter layout: `(name, shape)` in initialization order.
fn layout(cfg: &UNetConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    out.push(("scalar_embed.w".to_string(), vec![cfg.scalar_embed_dim, SCALAR_COUNT]));
    out.push(("scalar_embed.b".to_string(), vec![cfg.scalar_embed_dim]));
    let joint = cfg.joint_embed_dim();
    let (h1, h2) = cfg.film_hidden;
    for (name, c_in, c_out, _) in blocks(cfg) {
        out.push((format!("{name}.conv.w"), vec![c_out, c_in, 3, 3]));
        out.push((format!("{name}.conv.b"), vec![c_out]));
        out.push((format!("{name}.film.l1.w"), vec![h1, joint]));
        out.push((format!("{name}.film.l1.b"), vec![h1]));
        out.push((format!("{name}.film.l2.w"), vec![h2, h1]));
        out.push((format!("{name}.film.l2.b"), vec![h2]));
        out.push((format!("{name}.film.gamma.w"), vec![c_out, h2]));
        out.push((format!("{name}.film.gamma.b"), vec![c_out]));
        out.push((format!("{name}.film.beta.w"), vec![c_out, h2]));
        out.push((format!("{name}.film.beta.b"), vec![c_out]));
    }
    out.push(("head.conv.w".to_string(), vec![cfg.out_channels, cfg.enc_channels, 1, 1]));
    out.push(("head.conv.b".to_string(), vec![cfg.out_channels]));
    out
}

/// One named parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub value: Array,
}

/// Ordered parameter map plus a shadow EMA copy with identical names
/// and shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<NamedArray>,
    ema: Vec<NamedArray>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn params(&self) -> &[NamedArray] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedArray] {
        &mut self.params
    }

    pub fn ema(&self) -> &[NamedArray] {
        &self.ema
    }

    pub fn ema_mut(&mut self) -> &mut [NamedArray] {
        &mut self.ema
    }

    /// Simultaneous access to the live parameters and the EMA copy.
    pub fn split_params_ema_mut(&mut self) -> (&[NamedArray], &mut [NamedArray]) {
        (&self.params, &mut self.ema)
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Overwrite the EMA copy with the live parameters.
    pub fn reset_ema(&mut self) {
        self.ema = self.params.clone();
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().chain(&self.ema).all(|p| p.value.all_finite())
    }

    /// Check names and shapes against the canonical layout for `cfg`.
    pub fn validate(&self, cfg: &UNetConfig) -> Result<()> {
        let expected = layout(cfg);
        for (side, entries) in [("params", &self.params), ("ema", &self.ema)] {
            if entries.len() != expected.len() {
                return Err(Error::Validation(format!(
                    "{side}: expected {} parameter arrays, got {}",
                    expected.len(),
                    entries.len()
                )));
            }
            for (got, (name, shape)) in entries.iter().zip(&expected) {
                if &got.name != name || got.value.shape() != shape.as_slice() {
                    return Err(Error::Validation(format!(
                        "{side}: expected {name} with shape {shape:?}, got {} with {:?}",
                        got.name,
                        got.value.shape()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Fan-in-scaled uniform initialization with the EMA copy starting
/// equal to the live parameters.
pub fn param_init(cfg: &UNetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for (name, shape) in layout(cfg) {
        let fan_in = match shape.len() {
            4 => shape[1] * shape[2] * shape[3],
            2 => shape[1],
            // Biases use the fan-in of their layer, which equals the
            // second dimension of the weight that precedes them in the
            // layout; recompute from the shape list instead of trusting
            // order would be overkill here, so biases use their own
            // length's layer fan-in stored below.
            _ => 0,
        };
        let bound = if fan_in > 0 {
            1.0 / (fan_in as f64).sqrt()
        } else {
            // Bias: reuse the bound of the immediately preceding weight.
            let prev: &NamedArray = params.last().expect("bias follows its weight");
            let prev_shape = prev.value.shape();
            let prev_fan = match prev_shape.len() {
                4 => prev_shape[1] * prev_shape[2] * prev_shape[3],
                2 => prev_shape[1],
                _ => 1,
            };
            1.0 / (prev_fan as f64).sqrt()
        };
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        params.push(NamedArray { name, value: Array::new(shape, data)? });
    }
    let ema = params.clone();
    Ok(ParamStore { params, ema })
}

/// Sinusoidal embedding: `dim/2` (sin, cos) pairs at geometrically
/// spaced wavelengths over `[1, 10^4]`.
pub fn sinusoidal_embed(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Contract(format!("embedding dim must be even, got {dim}")));
    }
    let pairs = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for p in 0..pairs {
        let exponent = if pairs > 1 { p as f64 / (pairs - 1) as f64 } else { 0.0 };
        let wavelength = 10_000f64.powf(exponent);
        let angle = t as f64 / wavelength;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

/// Per-channel affine modulation `gamma ⊙ F + beta` broadcast over the
/// spatial dimensions.
pub fn film_apply(feature: &Array, gamma: &[f64], beta: &[f64]) -> Result<Array> {
    let shape = feature.shape();
    if shape.len() != 3 || gamma.len() != shape[0] || beta.len() != shape[0] {
        return Err(Error::Shape(format!(
            "film expects [C,H,W] with per-channel gamma/beta, got {:?} with {} / {}",
            shape,
            gamma.len(),
            beta.len()
        )));
    }
    let plane = shape[1] * shape[2];
    let mut data = Vec::with_capacity(feature.len());
    for (idx, v) in feature.data().iter().enumerate() {
        let c = idx / plane;
        data.push(gamma[c] * v + beta[c]);
    }
    Array::new(shape.to_vec(), data)
}

/// Borrowed, layout-ordered view of one weight set (live or EMA).
pub struct ModelWeights<'a> {
    arrays: Vec<&'a Array>,
    cfg: UNetConfig,
}

impl<'a> ModelWeights<'a> {
    pub fn resolve(entries: &'a [NamedArray], cfg: &UNetConfig) -> Result<Self> {
        let expected = layout(cfg);
        if entries.len() != expected.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter arrays, got {}",
                expected.len(),
                entries.len()
            )));
        }
        let mut arrays = Vec::with_capacity(entries.len());
        for (got, (name, shape)) in entries.iter().zip(&expected) {
            if &got.name != name || got.value.shape() != shape.as_slice() {
                return Err(Error::Validation(format!(
                    "parameter mismatch: expected {name} {shape:?}, got {} {:?}",
                    got.name,
                    got.value.shape()
                )));
            }
            arrays.push(&got.value);
        }
        Ok(ModelWeights { arrays, cfg: *cfg })
    }

    fn cfg(&self) -> &UNetConfig {
        &self.cfg
    }
}

/// Params mounted on a tape as leaves, in layout order.
pub struct TapeParams {
    pub vars: Vec<Var>,
}

pub fn mount_params(tape: &mut Tape, entries: &[NamedArray], requires_grad: bool) -> TapeParams {
    TapeParams {
        vars: entries.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect(),
    }
}

struct Cursor(usize);

impl Cursor {
    fn next(&mut self) -> usize {
        let i = self.0;
        self.0 += 1;
        i
    }
}

fn check_forward_inputs(
    channels: &Array,
    cfg: &UNetConfig,
    t: usize,
    n_steps: usize,
    scalars: &[f64; SCALAR_COUNT],
) -> Result<()> {
    if channels.shape() != [cfg.in_channels, SIDE, SIDE] {
        return Err(Error::Shape(format!(
            "expected input [{}, {SIDE}, {SIDE}], got {:?}",
            cfg.in_channels,
            channels.shape()
        )));
    }
    if !channels.all_finite() || scalars.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite network input".into()));
    }
    if t == 0 || t > n_steps {
        return Err(Error::Contract(format!("timestep {t} outside 1..={n_steps}")));
    }
    Ok(())
}

/// Training-path forward pass on a tape. Returns the predicted noise as
/// a `[out_channels, 9, 9]` var.
pub fn unet_forward_tape(
    tape: &mut Tape,
    params: &TapeParams,
    cfg: &UNetConfig,
    channels: Var,
    t: usize,
    n_steps: usize,
    scalars: &[f64; SCALAR_COUNT],
) -> Result<Var> {
    check_forward_inputs(tape.value(channels), cfg, t, n_steps, scalars)?;
    let mut cur = Cursor(0);
    let p = |c: &mut Cursor| params.vars[c.next()];

    // Joint embedding: sinusoidal time embedding concatenated with the
    // learned scalar embedding.
    let se_w = p(&mut cur);
    let se_b = p(&mut cur);
    let time = tape.leaf(Array::vector(sinusoidal_embed(t, cfg.time_embed_dim)?), false);
    let scalar_in = tape.leaf(Array::vector(scalars.to_vec()), false);
    let se_lin = tape.linear(se_w, scalar_in, se_b)?;
    let se = tape.silu(se_lin)?;
    let joint = tape.concat(time, se)?;

    let conv_block = |tape: &mut Tape, x: Var, stride: usize, cur: &mut Cursor| -> Result<Var> {
        let conv_w = p(cur);
        let conv_b = p(cur);
        let l1_w = p(cur);
        let l1_b = p(cur);
        let l2_w = p(cur);
        let l2_b = p(cur);
        let gamma_w = p(cur);
        let gamma_b = p(cur);
        let beta_w = p(cur);
        let beta_b = p(cur);
        let h = tape.conv2d(x, conv_w, 1, stride)?;
        let h = tape.add(h, conv_b)?;
        let g1_lin = tape.linear(l1_w, joint, l1_b)?;
        let g1 = tape.silu(g1_lin)?;
        let g2_lin = tape.linear(l2_w, g1, l2_b)?;
        let g2 = tape.silu(g2_lin)?;
        let gamma = tape.linear(gamma_w, g2, gamma_b)?;
        let beta = tape.linear(beta_w, g2, beta_b)?;
        let scaled = tape.mul(h, gamma)?;
        let modulated = tape.add(scaled, beta)?;
        tape.silu(modulated)
    };

    let e1 = conv_block(tape, channels, 1, &mut cur)?;
    let skip = conv_block(tape, e1, 1, &mut cur)?;
    let down = conv_block(tape, skip, 2, &mut cur)?;
    let m1 = conv_block(tape, down, 1, &mut cur)?;
    let m2 = conv_block(tape, m1, 1, &mut cur)?;
    let up_in = tape.upsample_nearest(m2, SIDE, SIDE)?;
    let up = conv_block(tape, up_in, 1, &mut cur)?;
    let cat = tape.concat(up, skip)?;
    let d1 = conv_block(tape, cat, 1, &mut cur)?;
    let d2 = conv_block(tape, d1, 1, &mut cur)?;

    let head_w = p(&mut cur);
    let head_b = p(&mut cur);
    let out = tape.conv2d(d2, head_w, 0, 1)?;
    tape.add(out, head_b)
}

#[inline]
fn silu_scalar(x: f64) -> f64 {
    // Same expression as the tape op so both paths agree bitwise.
    x * (1.0 / (1.0 + (-x).exp()))
}

fn matvec_silu(w: &Array, x: &[f64], b: &Array, activate: bool) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut out = Vec::with_capacity(rows);
    for o in 0..rows {
        let mut acc = b.data()[o];
        let row = &w.data()[o * cols..(o + 1) * cols];
        for (wv, xv) in row.iter().zip(x) {
            acc += wv * xv;
        }
        out.push(if activate { silu_scalar(acc) } else { acc });
    }
    out
}

/// Lanes-batched inference forward pass.
///
/// `cond` holds the three conditioning channels (`3 * 81` values, the
/// same for every lane), `noisy` holds the per-lane noisy targets in
/// `[9, 9, lanes]` layout, and the output is `[9, 9, lanes]` of
/// predicted noise (single output channel).
pub fn unet_forward_batch(
    weights: &ModelWeights<'_>,
    cond: &[f64],
    noisy: &[f64],
    lanes: usize,
    t: usize,
    n_steps: usize,
    scalars: &[f64; SCALAR_COUNT],
) -> Result<Vec<f64>> {
    let cfg = weights.cfg();
    if cfg.in_channels != 4 || cfg.out_channels != 1 {
        return Err(Error::Contract(
            "batched forward supports the 4-in/1-out surface configuration".into(),
        ));
    }
    if cond.len() != 3 * SIDE * SIDE || noisy.len() != SIDE * SIDE * lanes || lanes == 0 {
        return Err(Error::Shape(format!(
            "bad batched input sizes: cond {}, noisy {}, lanes {lanes}",
            cond.len(),
            noisy.len()
        )));
    }
    if t == 0 || t > n_steps {
        return Err(Error::Contract(format!("timestep {t} outside 1..={n_steps}")));
    }

    let mut cur = Cursor(0);
    let p = |c: &mut Cursor| -> &Array { weights.arrays[c.next()] };

    let se_w = p(&mut cur);
    let se_b = p(&mut cur);
    let mut joint = sinusoidal_embed(t, cfg.time_embed_dim)?;
    joint.extend(matvec_silu(se_w, scalars, se_b, true));

    // Input tensor [4, 9, 9, lanes]: broadcast conditioning channels,
    // then the per-lane noisy targets.
    let plane = SIDE * SIDE;
    let mut x = vec![0.0; 4 * plane * lanes];
    for (cell, v) in cond.iter().enumerate() {
        let base = cell * lanes;
        x[base..base + lanes].fill(*v);
    }
    x[3 * plane * lanes..].copy_from_slice(noisy);

    let mut side = SIDE;
    let conv_block = |x: Vec<f64>,
                          c_in: usize,
                          c_out: usize,
                          stride: usize,
                          side: &mut usize,
                          cur: &mut Cursor|
     -> Vec<f64> {
        let conv_w = weights.arrays[cur.next()];
        let conv_b = weights.arrays[cur.next()];
        let l1_w = weights.arrays[cur.next()];
        let l1_b = weights.arrays[cur.next()];
        let l2_w = weights.arrays[cur.next()];
        let l2_b = weights.arrays[cur.next()];
        let gamma_w = weights.arrays[cur.next()];
        let gamma_b = weights.arrays[cur.next()];
        let beta_w = weights.arrays[cur.next()];
        let beta_b = weights.arrays[cur.next()];

        let g1 = matvec_silu(l1_w, &joint, l1_b, true);
        let g2 = matvec_silu(l2_w, &g1, l2_b, true);
        let gamma = matvec_silu(gamma_w, &g2, gamma_b, false);
        let beta = matvec_silu(beta_w, &g2, beta_b, false);

        let out_side = kernels::conv2d_out_dim(*side, 3, 1, stride);
        let mut out = vec![0.0; c_out * out_side * out_side * lanes];
        kernels::conv2d_forward_lanes(
            &x,
            (c_in, *side, *side),
            conv_w.data(),
            (c_out, 3, 3),
            1,
            stride,
            lanes,
            &mut out,
        );
        let out_plane = out_side * out_side * lanes;
        for c in 0..c_out {
            let (bias, g, b) = (conv_b.data()[c], gamma[c], beta[c]);
            for v in &mut out[c * out_plane..(c + 1) * out_plane] {
                *v = silu_scalar(g * (*v + bias) + b);
            }
        }
        *side = out_side;
        out
    };

    let e = cfg.enc_channels;
    let bch = cfg.bottle_channels;
    let e1 = conv_block(x, 4, e, 1, &mut side, &mut cur);
    let skip = conv_block(e1, e, e, 1, &mut side, &mut cur);
    let down = conv_block(skip.clone(), e, e, 2, &mut side, &mut cur);
    let m1 = conv_block(down, e, bch, 1, &mut side, &mut cur);
    let m2 = conv_block(m1, bch, bch, 1, &mut side, &mut cur);

    // Nearest-neighbor resize back to 9×9.
    let mut upsampled = vec![0.0; bch * plane * lanes];
    for c in 0..bch {
        for y in 0..SIDE {
            let sy = kernels::upsample_src_index(y, DOWN_SIDE, SIDE);
            for xx in 0..SIDE {
                let sx = kernels::upsample_src_index(xx, DOWN_SIDE, SIDE);
                let src = ((c * DOWN_SIDE + sy) * DOWN_SIDE + sx) * lanes;
                let dst = ((c * SIDE + y) * SIDE + xx) * lanes;
                upsampled[dst..dst + lanes].copy_from_slice(&m2[src..src + lanes]);
            }
        }
    }
    side = SIDE;
    let up = conv_block(upsampled, bch, e, 1, &mut side, &mut cur);

    let mut cat = Vec::with_capacity(2 * e * plane * lanes);
    cat.extend_from_slice(&up);
    cat.extend_from_slice(&skip);
    let d1 = conv_block(cat, 2 * e, e, 1, &mut side, &mut cur);
    let d2 = conv_block(d1, e, e, 1, &mut side, &mut cur);

    let head_w = weights.arrays[cur.next()];
    let head_b = weights.arrays[cur.next()];
    let mut out = vec![0.0; plane * lanes];
    kernels::conv2d_forward_lanes(
        &d2,
        (e, SIDE, SIDE),
        head_w.data(),
        (1, 1, 1),
        0,
        1,
        lanes,
        &mut out,
    );
    let bias = head_b.data()[0];
    for v in &mut out {
        *v += bias;
    }
    Ok(out)
}

/// Single-input value-mode forward pass; equivalent to the tape path
/// without gradient bookkeeping.
pub fn unet_forward(
    weights: &ModelWeights<'_>,
    channels: &Array,
    t: usize,
    n_steps: usize,
    scalars: &[f64; SCALAR_COUNT],
) -> Result<Array> {
    let cfg = weights.cfg();
    check_forward_inputs(channels, cfg, t, n_steps, scalars)?;
    let plane = SIDE * SIDE;
    let cond = &channels.data()[..3 * plane];
    let noisy = &channels.data()[3 * plane..];
    let out = unet_forward_batch(weights, cond, noisy, 1, t, n_steps, scalars)?;
    Array::new(vec![cfg.out_channels, SIDE, SIDE], out)
}
