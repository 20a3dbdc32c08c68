//! Small encoder–decoder segmentation network with a projection head.
//!
//! Layer spec (input `in × H × W`, H and W divisible by 4):
//!
//! ```text
//! enc1  conv3x3 in → 16, SiLU            H × W        ─┐ skip
//! pool  avg 2×2                                        │
//! enc2  conv3x3 16 → 32, SiLU            H/2 × W/2   ─┐│ skip
//! pool  avg 2×2                                       ││
//! enc3  conv3x3 32 → 48, SiLU            H/4 × W/4    ││  (bottleneck)
//! up    nearest ×2, concat enc2          80 ch       ◄┘│
//! dec2  conv3x3 80 → 32, SiLU            H/2 × W/2     │
//! up    nearest ×2, concat enc1          48 ch       ◄─┘
//! dec1  conv3x3 48 → 16, SiLU            H × W
//! dec0  conv3x3 16 → 16, SiLU            H × W
//! head  conv1x1 16 → K, softmax over channels
//! proj  linear 48 → 32, SiLU, linear 32 → 32, L2-normalize
//! ```
//!
//! The projection head consumes bottleneck features average-pooled over a
//! patch footprint. All arithmetic is `f64`; SiLU keeps the network smooth so
//! finite-difference checks are meaningful everywhere.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::losses::Embedding;

pub const ENC1: usize = 16;
pub const ENC2: usize = 32;
pub const ENC3: usize = 48;
pub const PROJ_HIDDEN: usize = 32;
pub const PROJ_DIM: usize = 32;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// One named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamGroup {
    fn zeros(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }
}

/// Ordered collection of named parameter arrays.
///
/// Also used for gradients and optimizer moments, which share the layout.
#[derive(Debug, Clone)]
pub struct ParamSet {
    groups: Vec<ParamGroup>,
    id: u64,
    version: u64,
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.groups == other.groups
    }
}

impl ParamSet {
    pub fn from_groups(groups: Vec<ParamGroup>) -> Result<Self> {
        for g in &groups {
            if g.data.len() != g.shape.iter().product::<usize>() {
                return Err(Error::Shape(format!(
                    "group {} has {} values for shape {:?}",
                    g.name,
                    g.data.len(),
                    g.shape
                )));
            }
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter group {}", g.name)));
            }
        }
        Ok(Self {
            groups,
            id: fresh_id(),
            version: 0,
        })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    /// Mutable access; invalidates forward traces taken before the call.
    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        self.version += 1;
        &mut self.groups
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    fn data(&self, idx: usize) -> &[f64] {
        &self.groups[idx].data
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            groups: self
                .groups
                .iter()
                .map(|g| ParamGroup::zeros(&g.name, &g.shape))
                .collect(),
            id: fresh_id(),
            version: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_congruent(&self, other: &ParamSet) -> bool {
        self.groups.len() == other.groups.len()
            && self
                .groups
                .iter()
                .zip(&other.groups)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn check_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(Error::Shape("parameter sets are not shape-congruent".into()))
        }
    }

    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.groups.iter().flat_map(|g| g.data.iter().copied())
    }

    /// Flat-index access across groups in order.
    pub fn get_flat(&self, mut idx: usize) -> f64 {
        for g in &self.groups {
            if idx < g.data.len() {
                return g.data[idx];
            }
            idx -= g.data.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn set_flat(&mut self, mut idx: usize, v: f64) {
        self.version += 1;
        for g in &mut self.groups {
            if idx < g.data.len() {
                g.data[idx] = v;
                return;
            }
            idx -= g.data.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn add_assign(&mut self, other: &ParamSet) -> Result<()> {
        self.check_congruent(other)?;
        self.version += 1;
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.version += 1;
        for g in &mut self.groups {
            g.data.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Round every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        self.version += 1;
        for g in &mut self.groups {
            g.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.iter_values().all(f64::is_finite)
    }

    pub fn l2_distance(&self, other: &ParamSet) -> f64 {
        self.iter_values()
            .zip(other.iter_values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// `alpha · teacher + (1 - alpha) · student`, element-wise.
pub fn ema_update(teacher: &ParamSet, student: &ParamSet, alpha: f64) -> Result<ParamSet> {
    let mut out = teacher.clone();
    ema_update_in_place(&mut out, student, alpha)?;
    Ok(out)
}

pub fn ema_update_in_place(teacher: &mut ParamSet, student: &ParamSet, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("EMA alpha must lie in [0, 1], got {alpha}")));
    }
    teacher.check_congruent(student)?;
    if alpha == 1.0 {
        return Ok(());
    }
    teacher.version += 1;
    for (t, s) in teacher.groups.iter_mut().zip(&student.groups) {
        for (a, &b) in t.data.iter_mut().zip(&s.data) {
            *a = alpha * *a + (1.0 - alpha) * b;
        }
    }
    Ok(())
}

// Group indices in the fixed layout.
const ENC1_W: usize = 0;
const ENC1_B: usize = 1;
const ENC2_W: usize = 2;
const ENC2_B: usize = 3;
const ENC3_W: usize = 4;
const ENC3_B: usize = 5;
const DEC2_W: usize = 6;
const DEC2_B: usize = 7;
const DEC1_W: usize = 8;
const DEC1_B: usize = 9;
const DEC0_W: usize = 10;
const DEC0_B: usize = 11;
const HEAD_W: usize = 12;
const HEAD_B: usize = 13;
const PROJ1_W: usize = 14;
const PROJ1_B: usize = 15;
const PROJ2_W: usize = 16;
const PROJ2_B: usize = 17;

/// Fixed network topology parameterized by input channels and class count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    pub classes: usize,
}

impl Architecture {
    pub fn new(in_channels: usize, classes: usize) -> Self {
        Self {
            in_channels,
            classes,
        }
    }

    fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (c, k) = (self.in_channels, self.classes);
        vec![
            ("enc1.weight", vec![ENC1, c, 3, 3]),
            ("enc1.bias", vec![ENC1]),
            ("enc2.weight", vec![ENC2, ENC1, 3, 3]),
            ("enc2.bias", vec![ENC2]),
            ("enc3.weight", vec![ENC3, ENC2, 3, 3]),
            ("enc3.bias", vec![ENC3]),
            ("dec2.weight", vec![ENC2, ENC3 + ENC2, 3, 3]),
            ("dec2.bias", vec![ENC2]),
            ("dec1.weight", vec![ENC1, ENC2 + ENC1, 3, 3]),
            ("dec1.bias", vec![ENC1]),
            ("dec0.weight", vec![ENC1, ENC1, 3, 3]),
            ("dec0.bias", vec![ENC1]),
            ("head.weight", vec![k, ENC1]),
            ("head.bias", vec![k]),
            ("proj1.weight", vec![PROJ_HIDDEN, ENC3]),
            ("proj1.bias", vec![PROJ_HIDDEN]),
            ("proj2.weight", vec![PROJ_DIM, PROJ_HIDDEN]),
            ("proj2.bias", vec![PROJ_DIM]),
        ]
    }

    pub fn zeros(&self) -> ParamSet {
        let groups = self
            .layout()
            .into_iter()
            .map(|(n, s)| ParamGroup::zeros(n, &s))
            .collect();
        ParamSet {
            groups,
            id: fresh_id(),
            version: 0,
        }
    }

    /// He-style fan-in initialization; biases start at zero.
    pub fn init<R: Rng>(&self, rng: &mut R) -> ParamSet {
        let mut params = self.zeros();
        for g in &mut params.groups {
            if g.shape.len() == 1 {
                continue;
            }
            let fan_in: usize = g.shape[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            for v in &mut g.data {
                *v = normal.sample(rng);
            }
        }
        params
    }

    pub fn check(&self, params: &ParamSet) -> Result<()> {
        let layout = self.layout();
        if params.groups.len() != layout.len()
            || params
                .groups
                .iter()
                .zip(&layout)
                .any(|(g, (n, s))| g.name != *n || &g.shape != s)
        {
            return Err(Error::Shape("parameters do not match the architecture".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Layer primitives. Activations are channel-major `C × H × W` slices.

fn im2col(input: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut col = vec![0.0; cin * 9 * hw];
    for ci in 0..cin {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    // ix = x + kx - 1
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; cin * hw];
    for ci in 0..cin {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    out
}

/// `c (m × n) = a (m × k) · b (k × n)` with arbitrary strides; `beta` scales `c`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides and extents describe regions inside the given slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvCache {
    col: Vec<f64>,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
}

fn conv3x3(input: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], bias: &[f64]) -> (Vec<f64>, ConvCache) {
    let cout = bias.len();
    let hw = h * w;
    let kk = cin * 9;
    let col = im2col(input, cin, h, w);
    let mut out = vec![0.0; cout * hw];
    for (co, &b) in bias.iter().enumerate() {
        out[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v = b);
    }
    gemm(cout, kk, hw, weight, kk as isize, 1, &col, hw as isize, 1, 1.0, &mut out);
    (out, ConvCache { col, cin, cout, h, w })
}

/// Returns grad wrt input; accumulates into `gw`, `gb`.
fn conv3x3_backward(cache: &ConvCache, weight: &[f64], grad_out: &[f64], gw: &mut [f64], gb: &mut [f64], need_input: bool) -> Option<Vec<f64>> {
    let hw = cache.h * cache.w;
    let kk = cache.cin * 9;
    for co in 0..cache.cout {
        gb[co] += grad_out[co * hw..(co + 1) * hw].iter().sum::<f64>();
    }
    // gw += grad_out (cout × hw) · colᵀ (hw × kk)
    gemm(cache.cout, hw, kk, grad_out, hw as isize, 1, &cache.col, 1, hw as isize, 1.0, gw);
    if !need_input {
        return None;
    }
    // dcol (kk × hw) = Wᵀ (kk × cout) · grad_out (cout × hw)
    let mut dcol = vec![0.0; kk * hw];
    gemm(kk, cache.cout, hw, weight, 1, kk as isize, grad_out, hw as isize, 1, 0.0, &mut dcol);
    Some(col2im(&dcol, cache.cin, cache.h, cache.w))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&x| x * sigmoid(x)).collect()
}

fn silu_backward(z: &[f64], grad: &mut [f64]) {
    for (g, &x) in grad.iter_mut().zip(z) {
        let s = sigmoid(x);
        *g *= s * (1.0 + x * (1.0 - s));
    }
}

fn avg_pool2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let base = ch * h * w;
                let s = input[base + 2 * y * w + 2 * x]
                    + input[base + 2 * y * w + 2 * x + 1]
                    + input[base + (2 * y + 1) * w + 2 * x]
                    + input[base + (2 * y + 1) * w + 2 * x + 1];
                out[(ch * oh + y) * ow + x] = 0.25 * s;
            }
        }
    }
    out
}

fn avg_pool2_backward(grad: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = 0.25 * grad[(ch * oh + y / 2) * ow + x / 2];
            }
        }
    }
    out
}

/// Nearest-neighbour ×2 upsampling of `c × h × w`.
fn upsample2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch * oh + y) * ow + x] = input[(ch * h + y / 2) * w + x / 2];
            }
        }
    }
    out
}

fn upsample2_backward(grad: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch * h + y / 2) * w + x / 2] += grad[(ch * oh + y) * ow + x];
            }
        }
    }
    out
}

/// Activations retained for the reverse pass.
pub struct ForwardTrace {
    params_id: u64,
    params_version: u64,
    height: usize,
    width: usize,
    c1: ConvCache,
    z1: Vec<f64>,
    c2: ConvCache,
    z2: Vec<f64>,
    c3: ConvCache,
    z3: Vec<f64>,
    bottleneck: Vec<f64>,
    c4: ConvCache,
    z4: Vec<f64>,
    c5: ConvCache,
    z5: Vec<f64>,
    c6: ConvCache,
    z6: Vec<f64>,
    d0: Vec<f64>,
    /// Per-pixel class probabilities, channel-major `K × H × W`.
    pub probs: Vec<f64>,
    pub classes: usize,
}

impl ForwardTrace {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Bottleneck (encoder output) activations, `48 × H/4 × W/4`.
    pub fn bottleneck(&self) -> &[f64] {
        &self.bottleneck
    }

    /// Bottleneck features average-pooled over an image-space rectangle.
    pub fn pooled_features(&self, row: usize, col: usize, size: usize) -> Vec<f64> {
        let region = bottleneck_region(self.height, self.width, row, col, size);
        pool_region(&self.bottleneck, self.height / 4, self.width / 4, &region)
    }

    /// Hard class decision per pixel.
    pub fn argmax(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        (0..hw)
            .map(|m| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.probs[c * hw + m] > self.probs[best * hw + m] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Bottleneck cells covered by an image-space square patch: `(y0, y1, x0, x1)`.
pub fn bottleneck_region(height: usize, width: usize, row: usize, col: usize, size: usize) -> (usize, usize, usize, usize) {
    let (bh, bw) = (height / 4, width / 4);
    let y0 = (row / 4).min(bh - 1);
    let x0 = (col / 4).min(bw - 1);
    let y1 = (row + size).div_ceil(4).clamp(y0 + 1, bh);
    let x1 = (col + size).div_ceil(4).clamp(x0 + 1, bw);
    (y0, y1, x0, x1)
}

fn pool_region(features: &[f64], bh: usize, bw: usize, &(y0, y1, x0, x1): &(usize, usize, usize, usize)) -> Vec<f64> {
    let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
    (0..ENC3)
        .map(|c| {
            let mut s = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    s += features[(c * bh + y) * bw + x];
                }
            }
            s * inv
        })
        .collect()
}

/// Scatter a pooled-feature gradient back onto the bottleneck grid.
pub fn pooled_features_backward(grad_bottleneck: &mut [f64], height: usize, width: usize, row: usize, col: usize, size: usize, grad_features: &[f64]) {
    let (bh, bw) = (height / 4, width / 4);
    let (y0, y1, x0, x1) = bottleneck_region(height, width, row, col, size);
    let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
    for (c, &g) in grad_features.iter().enumerate() {
        for y in y0..y1 {
            for x in x0..x1 {
                grad_bottleneck[(c * bh + y) * bw + x] += g * inv;
            }
        }
    }
}

/// Upstream gradients entering the network.
#[derive(Default)]
pub struct OutputGrads<'a> {
    /// `dL/dprobs`, channel-major `K × H × W`.
    pub probs: Option<&'a [f64]>,
    /// `dL/dbottleneck`, `48 × H/4 × W/4`.
    pub bottleneck: Option<&'a [f64]>,
}

/// Cached intermediate values of one projection.
pub struct ProjectionCache {
    features: Vec<f64>,
    z: Vec<f64>,
    h: Vec<f64>,
    raw_norm: f64,
    embedding: Vec<f64>,
}

/// Stateless network evaluator for one architecture.
#[derive(Debug, Clone, Copy)]
pub struct Model {
    pub arch: Architecture,
}

impl Model {
    pub fn new(arch: Architecture) -> Self {
        Self { arch }
    }

    pub fn forward(&self, params: &ParamSet, input: &[f64], height: usize, width: usize) -> Result<ForwardTrace> {
        self.arch.check(params)?;
        let c = self.arch.in_channels;
        if input.len() != c * height * width {
            return Err(Error::Shape(format!(
                "input has {} values, expected {c}x{height}x{width}",
                input.len()
            )));
        }
        if height % 4 != 0 || width % 4 != 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "input dims {height}x{width} must be positive multiples of 4"
            )));
        }
        let (h, w) = (height, width);
        let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);

        let (z1, c1) = conv3x3(input, c, h, w, params.data(ENC1_W), params.data(ENC1_B));
        let e1 = silu(&z1);
        let p1 = avg_pool2(&e1, ENC1, h, w);
        let (z2, c2) = conv3x3(&p1, ENC1, h2, w2, params.data(ENC2_W), params.data(ENC2_B));
        let e2 = silu(&z2);
        let p2 = avg_pool2(&e2, ENC2, h2, w2);
        let (z3, c3) = conv3x3(&p2, ENC2, h4, w4, params.data(ENC3_W), params.data(ENC3_B));
        let e3 = silu(&z3);

        let mut cat2 = upsample2(&e3, ENC3, h4, w4);
        cat2.extend_from_slice(&e2);
        let (z4, c4) = conv3x3(&cat2, ENC3 + ENC2, h2, w2, params.data(DEC2_W), params.data(DEC2_B));
        let d2 = silu(&z4);

        let mut cat1 = upsample2(&d2, ENC2, h2, w2);
        cat1.extend_from_slice(&e1);
        let (z5, c5) = conv3x3(&cat1, ENC2 + ENC1, h, w, params.data(DEC1_W), params.data(DEC1_B));
        let d1 = silu(&z5);
        let (z6, c6) = conv3x3(&d1, ENC1, h, w, params.data(DEC0_W), params.data(DEC0_B));
        let d0 = silu(&z6);

        let k = self.arch.classes;
        let hw = h * w;
        let mut logits = vec![0.0; k * hw];
        for (ci, &b) in params.data(HEAD_B).iter().enumerate() {
            logits[ci * hw..(ci + 1) * hw].iter_mut().for_each(|v| *v = b);
        }
        gemm(k, ENC1, hw, params.data(HEAD_W), ENC1 as isize, 1, &d0, hw as isize, 1, 1.0, &mut logits);
        let probs = softmax_channels(&logits, k, hw);

        Ok(ForwardTrace {
            params_id: params.id,
            params_version: params.version,
            height: h,
            width: w,
            c1,
            z1,
            c2,
            z2,
            c3,
            z3,
            bottleneck: e3,
            c4,
            z4,
            c5,
            z5,
            c6,
            z6,
            d0,
            probs,
            classes: k,
        })
    }

    /// Reverse pass; returns gradients shaped like `params`.
    pub fn backward(&self, params: &ParamSet, trace: &ForwardTrace, grads: &OutputGrads) -> Result<ParamSet> {
        if trace.params_id != params.id || trace.params_version != params.version {
            return Err(Error::Usage(
                "forward trace is stale: parameters changed since the forward pass".into(),
            ));
        }
        let mut out = params.zeros_like();
        let (h, w) = (trace.height, trace.width);
        let (h2, w2, h4, w4) = (h / 2, w / 2, h / 4, w / 4);
        let hw = h * w;
        let k = trace.classes;

        let mut g_e3 = vec![0.0; ENC3 * h4 * w4];
        let mut g_e2 = vec![0.0; ENC2 * h2 * w2];
        let mut g_e1 = vec![0.0; ENC1 * hw];

        if let Some(gp) = grads.probs {
            if gp.len() != k * hw {
                return Err(Error::Shape("probability gradient has the wrong size".into()));
            }
            // Softmax: dz = p ⊙ (dp - Σ_c p dp)
            let p = &trace.probs;
            let mut g_logits = vec![0.0; k * hw];
            for m in 0..hw {
                let dotp: f64 = (0..k).map(|c| p[c * hw + m] * gp[c * hw + m]).sum();
                for c in 0..k {
                    g_logits[c * hw + m] = p[c * hw + m] * (gp[c * hw + m] - dotp);
                }
            }
            {
                let gb = &mut out.groups[HEAD_B].data;
                for c in 0..k {
                    gb[c] += g_logits[c * hw..(c + 1) * hw].iter().sum::<f64>();
                }
            }
            gemm(k, hw, ENC1, &g_logits, hw as isize, 1, &trace.d0, 1, hw as isize, 1.0, &mut out.groups[HEAD_W].data);
            let mut g_d0 = vec![0.0; ENC1 * hw];
            gemm(ENC1, k, hw, params.data(HEAD_W), 1, ENC1 as isize, &g_logits, hw as isize, 1, 0.0, &mut g_d0);

            silu_backward(&trace.z6, &mut g_d0);
            let mut g_d1 = self.conv_back(params, &mut out, DEC0_W, &trace.c6, &g_d0);
            silu_backward(&trace.z5, &mut g_d1);
            let g_cat1 = self.conv_back(params, &mut out, DEC1_W, &trace.c5, &g_d1);
            let (g_up1, g_skip1) = g_cat1.split_at(ENC2 * hw);
            g_e1.iter_mut().zip(g_skip1).for_each(|(a, b)| *a += b);
            let mut g_d2 = upsample2_backward(g_up1, ENC2, h2, w2);
            silu_backward(&trace.z4, &mut g_d2);
            let g_cat2 = self.conv_back(params, &mut out, DEC2_W, &trace.c4, &g_d2);
            let (g_up2, g_skip2) = g_cat2.split_at(ENC3 * h2 * w2);
            g_e2.iter_mut().zip(g_skip2).for_each(|(a, b)| *a += b);
            let g_up = upsample2_backward(g_up2, ENC3, h4, w4);
            g_e3.iter_mut().zip(&g_up).for_each(|(a, b)| *a += b);
        }
        if let Some(gb) = grads.bottleneck {
            if gb.len() != g_e3.len() {
                return Err(Error::Shape("bottleneck gradient has the wrong size".into()));
            }
            g_e3.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
        }

        silu_backward(&trace.z3, &mut g_e3);
        let g_p2 = self.conv_back(params, &mut out, ENC3_W, &trace.c3, &g_e3);
        let g_pool2 = avg_pool2_backward(&g_p2, ENC2, h2, w2);
        g_e2.iter_mut().zip(&g_pool2).for_each(|(a, b)| *a += b);
        silu_backward(&trace.z2, &mut g_e2);
        let g_p1 = self.conv_back(params, &mut out, ENC2_W, &trace.c2, &g_e2);
        let g_pool1 = avg_pool2_backward(&g_p1, ENC1, h, w);
        g_e1.iter_mut().zip(&g_pool1).for_each(|(a, b)| *a += b);
        silu_backward(&trace.z1, &mut g_e1);
        let (gw, rest) = out.groups.split_at_mut(ENC1_B);
        conv3x3_backward(&trace.c1, params.data(ENC1_W), &g_e1, &mut gw[ENC1_W].data, &mut rest[0].data, false);
        Ok(out)
    }

    fn conv_back(&self, params: &ParamSet, out: &mut ParamSet, w_idx: usize, cache: &ConvCache, grad: &[f64]) -> Vec<f64> {
        let (gw, gb) = out.groups.split_at_mut(w_idx + 1);
        conv3x3_backward(cache, params.data(w_idx), grad, &mut gw[w_idx].data, &mut gb[0].data, true)
            .expect("input gradient requested")
    }

    /// Projection head on pooled bottleneck features; output is unit-norm.
    pub fn project(&self, params: &ParamSet, features: &[f64]) -> Result<(Embedding, ProjectionCache)> {
        if features.len() != ENC3 {
            return Err(Error::Shape(format!(
                "projection expects {ENC3} features, got {}",
                features.len()
            )));
        }
        let w1 = params.data(PROJ1_W);
        let b1 = params.data(PROJ1_B);
        let z: Vec<f64> = (0..PROJ_HIDDEN)
            .map(|i| b1[i] + dot(&w1[i * ENC3..(i + 1) * ENC3], features))
            .collect();
        let h = silu(&z);
        let w2 = params.data(PROJ2_W);
        let b2 = params.data(PROJ2_B);
        let o: Vec<f64> = (0..PROJ_DIM)
            .map(|i| b2[i] + dot(&w2[i * PROJ_HIDDEN..(i + 1) * PROJ_HIDDEN], &h))
            .collect();
        let raw_norm = dot(&o, &o).sqrt();
        let emb = Embedding::normalized(&o)?;
        let cache = ProjectionCache {
            features: features.to_vec(),
            z,
            h,
            raw_norm,
            embedding: emb.values().to_vec(),
        };
        Ok((emb, cache))
    }

    /// Accumulate projection-head gradients into `grads` and return `dL/dfeatures`.
    pub fn project_backward(&self, params: &ParamSet, cache: &ProjectionCache, grad_embedding: &[f64], grads: &mut ParamSet) -> Vec<f64> {
        // e = o / ‖o‖ → do = (g - e (eᵀg)) / ‖o‖
        let e = &cache.embedding;
        let eg = dot(e, grad_embedding);
        let g_o: Vec<f64> = grad_embedding
            .iter()
            .zip(e)
            .map(|(g, ei)| (g - ei * eg) / cache.raw_norm)
            .collect();
        let w2 = params.data(PROJ2_W);
        let mut g_h = vec![0.0; PROJ_HIDDEN];
        {
            let (head, tail) = grads.groups.split_at_mut(PROJ2_B);
            let gw2 = &mut head[PROJ2_W].data;
            let gb2 = &mut tail[0].data;
            for i in 0..PROJ_DIM {
                gb2[i] += g_o[i];
                for j in 0..PROJ_HIDDEN {
                    gw2[i * PROJ_HIDDEN + j] += g_o[i] * cache.h[j];
                    g_h[j] += g_o[i] * w2[i * PROJ_HIDDEN + j];
                }
            }
        }
        silu_backward(&cache.z, &mut g_h);
        let w1 = params.data(PROJ1_W);
        let mut g_f = vec![0.0; ENC3];
        let (head, tail) = grads.groups.split_at_mut(PROJ1_B);
        let gw1 = &mut head[PROJ1_W].data;
        let gb1 = &mut tail[0].data;
        for i in 0..PROJ_HIDDEN {
            gb1[i] += g_h[i];
            for j in 0..ENC3 {
                gw1[i * ENC3 + j] += g_h[i] * cache.features[j];
                g_f[j] += g_h[i] * w1[i * ENC3 + j];
            }
        }
        g_f
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_channels(logits: &[f64], k: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * hw];
    for m in 0..hw {
        let max = (0..k).map(|c| logits[c * hw + m]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..k {
            let e = (logits[c * hw + m] - max).exp();
            out[c * hw + m] = e;
            sum += e;
        }
        for c in 0..k {
            out[c * hw + m] /= sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn parameter_count_is_about_fifty_thousand() {
        let p = Architecture::new(1, 3).zeros();
        assert!((45_000..60_000).contains(&p.len()), "{}", p.len());
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let arch = Architecture::new(1, 3);
        let model = Model::new(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_input(&mut rng, 64);
        let t = model.forward(&arch.zeros(), &x, 8, 8).unwrap();
        assert!(t.probs.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn probabilities_are_normalized() {
        let arch = Architecture::new(1, 4);
        let model = Model::new(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = arch.init(&mut rng);
        let x = random_input(&mut rng, 16 * 16);
        let t = model.forward(&params, &x, 16, 16).unwrap();
        for m in 0..256 {
            let s: f64 = (0..4).map(|c| t.probs[c * 256 + m]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_permutation_equivariance() {
        let arch = Architecture::new(3, 2);
        let model = Model::new(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = arch.init(&mut rng);
        let x = random_input(&mut rng, 3 * 64);
        let perm = [2usize, 0, 1];
        let mut xp = vec![0.0; x.len()];
        for (new, &old) in perm.iter().enumerate() {
            xp[new * 64..(new + 1) * 64].copy_from_slice(&x[old * 64..(old + 1) * 64]);
        }
        let mut pp = params.clone();
        {
            let src = params.groups()[ENC1_W].data.clone();
            let dst = &mut pp.groups_mut()[ENC1_W].data;
            for co in 0..ENC1 {
                for (new, &old) in perm.iter().enumerate() {
                    for t in 0..9 {
                        dst[(co * 3 + new) * 9 + t] = src[(co * 3 + old) * 9 + t];
                    }
                }
            }
        }
        let a = model.forward(&params, &x, 8, 8).unwrap();
        let b = model.forward(&pp, &xp, 8, 8).unwrap();
        for (u, v) in a.probs.iter().zip(&b.probs) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic_and_checks_shape() {
        let arch = Architecture::new(1, 2);
        let model = Model::new(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = arch.init(&mut rng);
        let x = random_input(&mut rng, 64);
        let a = model.forward(&params, &x, 8, 8).unwrap();
        let b = model.forward(&params, &x, 8, 8).unwrap();
        assert_eq!(a.probs, b.probs);
        assert!(model.forward(&params, &x, 4, 16).is_ok());
        assert!(model.forward(&params, &x, 8, 4).is_err());
        assert!(model.forward(&params, &x[..36], 6, 6).is_err());
    }

    #[test]
    fn projection_is_unit_norm_and_rejects_zero() {
        let arch = Architecture::new(1, 2);
        let model = Model::new(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = arch.init(&mut rng);
        let f = random_input(&mut rng, ENC3);
        let (e, _) = model.project(&params, &f).unwrap();
        let n: f64 = e.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let (e2, _) = model.project(&params, &f).unwrap();
        assert_eq!(e, e2);
        assert!(matches!(model.project(&arch.zeros(), &vec![0.0; ENC3]), Err(Error::DegenerateNorm)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let arch = Architecture::new(1, 2);
        let model = Model::new(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = arch.init(&mut rng);
        let x = random_input(&mut rng, 64);
        let t = model.forward(&params, &x, 8, 8).unwrap();
        let zeros = vec![0.0; 2 * 64];
        let g = model.backward(&params, &t, &OutputGrads { probs: Some(&zeros), bottleneck: None }).unwrap();
        assert!(g.iter_values().all(|v| v == 0.0));
    }

    #[test]
    fn stale_trace_is_rejected() {
        let arch = Architecture::new(1, 2);
        let model = Model::new(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = arch.init(&mut rng);
        let x = random_input(&mut rng, 64);
        let t = model.forward(&params, &x, 8, 8).unwrap();
        params.scale(0.5);
        let g = vec![1.0; 128];
        let r = model.backward(&params, &t, &OutputGrads { probs: Some(&g), bottleneck: None });
        assert!(matches!(r, Err(Error::Usage(_))));
        let other = arch.init(&mut rng);
        let r = model.backward(&other, &t, &OutputGrads { probs: Some(&g), bottleneck: None });
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    /// Single-pixel cross-entropy through the whole network vs. central differences.
    #[test]
    fn single_pixel_ce_gradient_matches_finite_differences() {
        let arch = Architecture::new(1, 3);
        let model = Model::new(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = arch.init(&mut rng);
        let x = random_input(&mut rng, 64);
        let (pixel, class) = (27, 1);
        let loss = |p: &ParamSet| -> f64 {
            let t = model.forward(p, &x, 8, 8).unwrap();
            -t.probs[class * 64 + pixel].ln()
        };
        let t = model.forward(&params, &x, 8, 8).unwrap();
        let mut gp = vec![0.0; 3 * 64];
        gp[class * 64 + pixel] = -1.0 / t.probs[class * 64 + pixel];
        let g = model.backward(&params, &t, &OutputGrads { probs: Some(&gp), bottleneck: None }).unwrap();

        let total = params.len();
        let h = 1e-6;
        let (mut num, mut den) = (0.0, 0.0);
        for step in 0..80 {
            let idx = (step * 7919 + 13) % total;
            let mut a = params.clone();
            let mut b = params.clone();
            a.set_flat(idx, params.get_flat(idx) + h);
            b.set_flat(idx, params.get_flat(idx) - h);
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            let an = g.get_flat(idx);
            num += (fd - an) * (fd - an);
            den += fd * fd;
        }
        let rel = (num / den).sqrt();
        assert!(rel < 1e-6, "relative error {rel}");
    }

    #[test]
    fn ema_cases() {
        let arch = Architecture::new(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = arch.init(&mut rng);
        let s = arch.init(&mut rng);
        assert_eq!(ema_update(&t, &s, 1.0).unwrap(), t);
        assert_eq!(ema_update(&t, &s, 0.0).unwrap(), s);
        let mid = ema_update(&t, &s, 0.99).unwrap();
        assert!((mid.l2_distance(&s) - 0.99 * t.l2_distance(&s)).abs() < 1e-9);

        let one = ParamSet::from_groups(vec![ParamGroup { name: "w".into(), shape: vec![1], data: vec![1.0] }]).unwrap();
        let zero = ParamSet::from_groups(vec![ParamGroup { name: "w".into(), shape: vec![1], data: vec![0.0] }]).unwrap();
        assert!((ema_update(&one, &zero, 0.99).unwrap().get_flat(0) - 0.99).abs() < 1e-15);
        assert!(ema_update(&one, &t, 0.5).is_err());
        assert!(ema_update(&one, &zero, 1.5).is_err());
    }
}
