//! Parameters, forward pass and hand-derived backward pass of the toy
//! detector.
//!
//! Layout for a grid of `cells × cells` stride-`s` cells with `F` features:
//!
//! ```text
//! patch (s*s pixels) --tanh(W1 x + b1)--> h1 (F)
//! 3x3 neighbourhood of h1 (9F) --tanh(W2 n + b2)--> h2 (F)
//! 3x3 neighbourhood of h2 (9F) --tanh(W3 n + b3)--> h3 (F)   shared trunk
//! h3 --linear--> polyp logits      (A x 1, or A x 7 in flat mode)
//! h3 --linear--> artifact logits   (A x 6, two-head mode only)
//! h3 --linear--> box offsets       (A x 4, shared by both tasks)
//! ```
//!
//! `A` is the number of anchor sizes per cell. Anchor `cell * A + a` is
//! centered on its cell.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ToyError;
use crate::datamodel::LabelMode;
use crate::geometry::BBox;
use crate::loss::sigmoid;

/// Number of artifact outputs per anchor in two-head mode.
pub const ARTIFACT_OUTPUTS: usize = 6;
/// Number of outputs per anchor of the flat head (polyp + six artifacts).
pub const FLAT_OUTPUTS: usize = 7;

const PRIOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub grid: usize,
    pub stride: usize,
    pub anchor_sizes: Vec<f64>,
    pub features: usize,
    pub mode: LabelMode,
}

impl Architecture {
    /// 64x64 grid, stride 8, anchors 8/16/32, 8 features.
    pub fn new(mode: LabelMode) -> Self {
        Self {
            grid: 64,
            stride: 8,
            anchor_sizes: vec![8.0, 16.0, 32.0],
            features: 8,
            mode,
        }
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        if self.stride == 0 || self.grid == 0 || !self.grid.is_multiple_of(self.stride) {
            return Err(ToyError::Config(format!(
                "stride {} must divide grid {}",
                self.stride, self.grid
            )));
        }
        if self.anchor_sizes.is_empty() || self.anchor_sizes.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(ToyError::Config("anchor sizes must be positive".into()));
        }
        if self.features == 0 {
            return Err(ToyError::Config("need at least one feature".into()));
        }
        Ok(())
    }

    pub fn cells_per_side(&self) -> usize {
        self.grid / self.stride
    }

    pub fn num_cells(&self) -> usize {
        self.cells_per_side() * self.cells_per_side()
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_sizes.len()
    }

    pub fn num_anchors(&self) -> usize {
        self.num_cells() * self.anchors_per_cell()
    }

    fn patch_len(&self) -> usize {
        self.stride * self.stride
    }

    /// Outputs per anchor of the polyp (or flat) head.
    pub fn polyp_outputs(&self) -> usize {
        match self.mode {
            LabelMode::TwoHead => 1,
            LabelMode::FlatMultiClass => FLAT_OUTPUTS,
        }
    }

    /// Outputs per anchor of the artifact head (0 in flat mode).
    pub fn artifact_outputs(&self) -> usize {
        match self.mode {
            LabelMode::TwoHead => ARTIFACT_OUTPUTS,
            LabelMode::FlatMultiClass => 0,
        }
    }

    pub fn anchors(&self) -> Vec<BBox> {
        let cells = self.cells_per_side();
        let s = self.stride as f64;
        let mut out = Vec::with_capacity(self.num_anchors());
        for i in 0..cells {
            for j in 0..cells {
                let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
                for size in &self.anchor_sizes {
                    out.push(BBox::from_center(cx, cy, *size, *size).expect("positive anchor"));
                }
            }
        }
        out
    }

    fn shared_len(&self) -> usize {
        let f = self.features;
        (f * self.patch_len() + f) + 2 * (f * 9 * f + f)
    }

    fn head_len(&self, outputs_per_anchor: usize) -> usize {
        let o = outputs_per_anchor * self.anchors_per_cell();
        o * self.features + o
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamBlock {
    Shared,
    Polyp,
    Artifact,
    Regression,
}

impl ParamBlock {
    pub const ALL: [ParamBlock; 4] = [
        ParamBlock::Shared,
        ParamBlock::Polyp,
        ParamBlock::Artifact,
        ParamBlock::Regression,
    ];
}

/// Flat parameter (or gradient) vectors, one per block.
///
/// In flat multi-class mode `polyp` holds the single 7-way head and
/// `artifact` is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlocks {
    pub shared: Vec<f64>,
    pub polyp: Vec<f64>,
    pub artifact: Vec<f64>,
    pub regression: Vec<f64>,
}

impl ParamBlocks {
    pub fn zeros_for(arch: &Architecture) -> Self {
        Self {
            shared: vec![0.0; arch.shared_len()],
            polyp: vec![0.0; arch.head_len(arch.polyp_outputs())],
            artifact: vec![0.0; arch.head_len(arch.artifact_outputs())],
            regression: vec![0.0; arch.head_len(4)],
        }
    }

    pub fn block(&self, b: ParamBlock) -> &[f64] {
        match b {
            ParamBlock::Shared => &self.shared,
            ParamBlock::Polyp => &self.polyp,
            ParamBlock::Artifact => &self.artifact,
            ParamBlock::Regression => &self.regression,
        }
    }

    pub fn block_mut(&mut self, b: ParamBlock) -> &mut Vec<f64> {
        match b {
            ParamBlock::Shared => &mut self.shared,
            ParamBlock::Polyp => &mut self.polyp,
            ParamBlock::Artifact => &mut self.artifact,
            ParamBlock::Regression => &mut self.regression,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        ParamBlock::ALL.into_iter().flat_map(move |b| self.block(b).iter())
    }

    pub fn len(&self) -> usize {
        ParamBlock::ALL.iter().map(|b| self.block(*b).len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn squared_norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`, block by block.
    pub fn add_scaled(&mut self, other: &ParamBlocks, scale: f64) {
        for b in ParamBlock::ALL {
            for (x, y) in self.block_mut(b).iter_mut().zip(other.block(b)) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for b in ParamBlock::ALL {
            for x in self.block_mut(b).iter_mut() {
                *x *= factor;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub arch: Architecture,
    pub params: ParamBlocks,
}

/// Offsets of each tensor inside the shared block.
struct SharedLayout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

impl SharedLayout {
    fn of(arch: &Architecture) -> Self {
        let f = arch.features;
        let w1 = 0;
        let b1 = w1 + f * arch.patch_len();
        let w2 = b1 + f;
        let b2 = w2 + f * 9 * f;
        let w3 = b2 + f;
        let b3 = w3 + f * 9 * f;
        Self {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        }
    }
}

impl ToyModel {
    pub fn zeros(arch: Architecture) -> Result<Self, ToyError> {
        arch.validate()?;
        let params = ParamBlocks::zeros_for(&arch);
        Ok(Self { arch, params })
    }

    /// Scaled-normal trunk weights, small head weights, and classification
    /// biases set so every initial probability equals a 1% prior.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, ToyError> {
        let mut m = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = m.arch.features;
        let lay = SharedLayout::of(&m.arch);

        let fill = |v: &mut [f64], std: f64, rng: &mut ChaCha8Rng| {
            let n = Normal::new(0.0, std).expect("positive std");
            for x in v {
                *x = n.sample(rng);
            }
        };
        let patch = m.arch.patch_len();
        let shared = &mut m.params.shared;
        fill(&mut shared[lay.w1..lay.b1], (1.0 / patch as f64).sqrt(), &mut rng);
        fill(&mut shared[lay.w2..lay.b2], (1.0 / (9 * f) as f64).sqrt(), &mut rng);
        fill(&mut shared[lay.w3..lay.b3], (1.0 / (9 * f) as f64).sqrt(), &mut rng);

        let prior_bias = -((1.0 - PRIOR) / PRIOR).ln();
        for block in [ParamBlock::Polyp, ParamBlock::Artifact, ParamBlock::Regression] {
            let outputs = match block {
                ParamBlock::Polyp => m.arch.polyp_outputs(),
                ParamBlock::Artifact => m.arch.artifact_outputs(),
                _ => 4,
            } * m.arch.anchors_per_cell();
            let v = m.params.block_mut(block);
            if v.is_empty() {
                continue;
            }
            fill(&mut v[..outputs * f], 0.01, &mut rng);
            if block != ParamBlock::Regression {
                for b in &mut v[outputs * f..] {
                    *b = prior_bias;
                }
            }
        }
        Ok(m)
    }

    pub fn check_grid(&self, side: usize, pixels: usize) -> Result<(), ToyError> {
        if side != self.arch.grid || pixels != side * side {
            return Err(ToyError::Shape(format!(
                "model expects a {0}x{0} grid, got side {side} with {pixels} pixels",
                self.arch.grid
            )));
        }
        Ok(())
    }

    pub fn forward(&self, grid: &[f64], side: usize) -> Result<Forward, ToyError> {
        self.check_grid(side, grid.len())?;
        Ok(forward_pass(self, grid))
    }
}

/// Activations and raw outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    patches: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    h3: Vec<f64>,
    /// `anchors x polyp_outputs` logits.
    pub polyp_logits: Vec<f64>,
    /// `anchors x artifact_outputs` logits.
    pub artifact_logits: Vec<f64>,
    /// `anchors x 4` box offsets.
    pub offsets: Vec<f64>,
}

impl Forward {
    pub fn polyp_probs(&self) -> Vec<f64> {
        self.polyp_logits.iter().map(|z| sigmoid(*z)).collect()
    }

    pub fn artifact_probs(&self) -> Vec<f64> {
        self.artifact_logits.iter().map(|z| sigmoid(*z)).collect()
    }
}

/// Upstream derivatives of the loss with respect to the raw outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub polyp_logits: Vec<f64>,
    pub artifact_logits: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl OutputGrads {
    pub fn zeros_like(fwd: &Forward) -> Self {
        Self {
            polyp_logits: vec![0.0; fwd.polyp_logits.len()],
            artifact_logits: vec![0.0; fwd.artifact_logits.len()],
            offsets: vec![0.0; fwd.offsets.len()],
        }
    }
}

fn extract_patches(arch: &Architecture, grid: &[f64]) -> Vec<f64> {
    let cells = arch.cells_per_side();
    let s = arch.stride;
    let mut out = Vec::with_capacity(arch.num_cells() * s * s);
    for ci in 0..cells {
        for cj in 0..cells {
            for r in 0..s {
                let row = (ci * s + r) * arch.grid + cj * s;
                out.extend(grid[row..row + s].iter().map(|v| v - 0.5));
            }
        }
    }
    out
}

/// 3x3 neighbourhood of cell `c` (zero padded), `9 * f` values.
fn gather(h: &[f64], cells: usize, f: usize, c: usize, out: &mut [f64]) {
    let (ci, cj) = ((c / cells) as i64, (c % cells) as i64);
    let mut k = 0;
    for di in -1i64..=1 {
        for dj in -1i64..=1 {
            let (i, j) = (ci + di, cj + dj);
            let dst = &mut out[k * f..(k + 1) * f];
            if i >= 0 && j >= 0 && (i as usize) < cells && (j as usize) < cells {
                let nb = i as usize * cells + j as usize;
                dst.copy_from_slice(&h[nb * f..(nb + 1) * f]);
            } else {
                dst.fill(0.0);
            }
            k += 1;
        }
    }
}

/// Adds `d` (9f values) back onto the neighbourhood of cell `c` in `dh`.
fn scatter(dh: &mut [f64], cells: usize, f: usize, c: usize, d: &[f64]) {
    let (ci, cj) = ((c / cells) as i64, (c % cells) as i64);
    let mut k = 0;
    for di in -1i64..=1 {
        for dj in -1i64..=1 {
            let (i, j) = (ci + di, cj + dj);
            if i >= 0 && j >= 0 && (i as usize) < cells && (j as usize) < cells {
                let nb = i as usize * cells + j as usize;
                for (x, y) in dh[nb * f..(nb + 1) * f].iter_mut().zip(&d[k * f..(k + 1) * f]) {
                    *x += y;
                }
            }
            k += 1;
        }
    }
}

/// `out[o] = tanh(sum_i w[o * n + i] * x[i] + b[o])`.
fn dense_tanh(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        let row = &w[o * n..(o + 1) * n];
        let s: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
        *y = (s + b[o]).tanh();
    }
}

fn linear(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        let row = &w[o * n..(o + 1) * n];
        *y = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[o];
    }
}

fn forward_pass(m: &ToyModel, grid: &[f64]) -> Forward {
    let arch = &m.arch;
    let f = arch.features;
    let cells = arch.cells_per_side();
    let nc = arch.num_cells();
    let p = arch.patch_len();
    let lay = SharedLayout::of(arch);
    let sh = &m.params.shared;

    let patches = extract_patches(arch, grid);
    let mut h1 = vec![0.0; nc * f];
    for c in 0..nc {
        dense_tanh(
            &sh[lay.w1..lay.b1],
            &sh[lay.b1..lay.w2],
            &patches[c * p..(c + 1) * p],
            &mut h1[c * f..(c + 1) * f],
        );
    }
    let mut nbuf = vec![0.0; 9 * f];
    let mut h2 = vec![0.0; nc * f];
    for c in 0..nc {
        gather(&h1, cells, f, c, &mut nbuf);
        dense_tanh(
            &sh[lay.w2..lay.b2],
            &sh[lay.b2..lay.w3],
            &nbuf,
            &mut h2[c * f..(c + 1) * f],
        );
    }
    let mut h3 = vec![0.0; nc * f];
    for c in 0..nc {
        gather(&h2, cells, f, c, &mut nbuf);
        dense_tanh(
            &sh[lay.w3..lay.b3],
            &sh[lay.b3..],
            &nbuf,
            &mut h3[c * f..(c + 1) * f],
        );
    }

    let a = arch.anchors_per_cell();
    let head = |params: &[f64], k: usize| -> Vec<f64> {
        let o = a * k;
        let mut out = vec![0.0; nc * o];
        if o == 0 {
            return out;
        }
        let (w, b) = params.split_at(o * f);
        for c in 0..nc {
            linear(w, b, &h3[c * f..(c + 1) * f], &mut out[c * o..(c + 1) * o]);
        }
        out
    };
    let polyp_logits = head(&m.params.polyp, arch.polyp_outputs());
    let artifact_logits = head(&m.params.artifact, arch.artifact_outputs());
    let offsets = head(&m.params.regression, 4);

    Forward {
        patches,
        h1,
        h2,
        h3,
        polyp_logits,
        artifact_logits,
        offsets,
    }
}

/// Backpropagates output derivatives to parameter gradients.
pub fn backward(m: &ToyModel, fwd: &Forward, d_out: &OutputGrads) -> ParamBlocks {
    let arch = &m.arch;
    let f = arch.features;
    let cells = arch.cells_per_side();
    let nc = arch.num_cells();
    let p = arch.patch_len();
    let a = arch.anchors_per_cell();
    let lay = SharedLayout::of(arch);
    let mut g = ParamBlocks::zeros_for(arch);
    let mut dh3 = vec![0.0; nc * f];

    let mut head_back = |params: &[f64], grad: &mut Vec<f64>, d: &[f64], k: usize| {
        let o = a * k;
        if o == 0 {
            return;
        }
        let (w, _) = params.split_at(o * f);
        let (gw, gb) = grad.split_at_mut(o * f);
        for c in 0..nc {
            let h = &fwd.h3[c * f..(c + 1) * f];
            let dz = &d[c * o..(c + 1) * o];
            let dh = &mut dh3[c * f..(c + 1) * f];
            for (oi, &dzo) in dz.iter().enumerate() {
                if dzo == 0.0 {
                    continue;
                }
                gb[oi] += dzo;
                let row = oi * f;
                for fi in 0..f {
                    gw[row + fi] += dzo * h[fi];
                    dh[fi] += dzo * w[row + fi];
                }
            }
        }
    };
    head_back(&m.params.polyp, &mut g.polyp, &d_out.polyp_logits, arch.polyp_outputs());
    head_back(
        &m.params.artifact,
        &mut g.artifact,
        &d_out.artifact_logits,
        arch.artifact_outputs(),
    );
    head_back(&m.params.regression, &mut g.regression, &d_out.offsets, 4);

    let sh = &m.params.shared;
    let gs = &mut g.shared;
    let mut nbuf = vec![0.0; 9 * f];
    let mut dn = vec![0.0; 9 * f];

    // context layer: h_out = tanh(W n(h_in) + b)
    let mut context_back = |h_in: &[f64], h_out: &[f64], dh_out: &[f64], w: usize, b: usize, gs: &mut [f64]| {
        let mut dh_in = vec![0.0; nc * f];
        let n = 9 * f;
        for c in 0..nc {
            gather(h_in, cells, f, c, &mut nbuf);
            dn.fill(0.0);
            for o in 0..f {
                let y = h_out[c * f + o];
                let dpre = dh_out[c * f + o] * (1.0 - y * y);
                if dpre == 0.0 {
                    continue;
                }
                gs[b + o] += dpre;
                let row = w + o * n;
                for i in 0..n {
                    gs[row + i] += dpre * nbuf[i];
                    dn[i] += dpre * sh[row + i];
                }
            }
            scatter(&mut dh_in, cells, f, c, &dn);
        }
        dh_in
    };
    let dh2 = context_back(&fwd.h2, &fwd.h3, &dh3, lay.w3, lay.b3, gs);
    let dh1 = context_back(&fwd.h1, &fwd.h2, &dh2, lay.w2, lay.b2, gs);

    for c in 0..nc {
        let x = &fwd.patches[c * p..(c + 1) * p];
        for o in 0..f {
            let y = fwd.h1[c * f + o];
            let dpre = dh1[c * f + o] * (1.0 - y * y);
            if dpre == 0.0 {
                continue;
            }
            gs[lay.b1 + o] += dpre;
            let row = lay.w1 + o * p;
            for i in 0..p {
                gs[row + i] += dpre * x[i];
            }
        }
    }
    g
}
