//! Frame-to-node stem and between-stage patch merging.
//!
//! Frames are stacked as one `[T, H, W, 3]` batch; every conv block keeps the
//! NHWC layout, so a node grid is simply the spatial map of the last block
//! and node `j` sits at `(j / grid_w, j % grid_w)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::tensor::{ParamBinder, ParamStore, Tape, Tensor, Var};

pub const FRAME_CHANNELS: usize = 3;

/// RGB frame with values in `[0, 1]`, stored row-major as `[H, W, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("frame", "extents must be positive"));
        }
        if data.len() != height * width * FRAME_CHANNELS {
            return Err(Error::invalid(
                "frame",
                format!(
                    "expected {} values for {height}x{width}x3, got {}",
                    height * width * 3,
                    data.len()
                ),
            ));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("frame", "pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; height * width * FRAME_CHANNELS])
            .expect("valid constant frame")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * FRAME_CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * FRAME_CHANNELS;
        self.data[o..o + 3].copy_from_slice(&rgb.map(|v| v.clamp(0.0, 1.0)));
    }
}

/// Stacks frames into a `[T, H, W, 3]` tensor.
pub fn stack_frames(frames: &[Frame]) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("stack_frames", "no frames"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(frames.len() * h * w * FRAME_CHANNELS);
    for (i, f) in frames.iter().enumerate() {
        if (f.height, f.width) != (h, w) {
            return Err(Error::invalid(
                "stack_frames",
                format!("frame {i} is {}x{}, expected {h}x{w}", f.height, f.width),
            ));
        }
        data.extend(f.data.iter().map(|&v| f64::from(v)));
    }
    Tensor::new(&[frames.len(), h, w, FRAME_CHANNELS], data)
}

/// Spatial grid of node features; `features` is `[grid_h * grid_w, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub features: Tensor,
    pub stage: usize,
}

impl NodeGrid {
    pub fn new(grid_h: usize, grid_w: usize, features: Tensor, stage: usize) -> Result<Self> {
        match features.dims2() {
            Some((n, _)) if n == grid_h * grid_w => Ok(Self {
                grid_h,
                grid_w,
                features,
                stage,
            }),
            _ => Err(Error::invalid(
                "node_grid",
                format!(
                    "features {:?} do not match a {grid_h}x{grid_w} grid",
                    features.shape()
                ),
            )),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn coords(&self, j: usize) -> (usize, usize) {
        (j / self.grid_w, j % self.grid_w)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.grid_w + col
    }

    pub fn node(&self, j: usize) -> &[f64] {
        self.features.row(j)
    }
}

/// A batch of `frames` grids on a tape, shaped `[frames, rows, cols, dim]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridVar {
    pub var: Var,
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
}

impl GridVar {
    pub fn from_var(tape: &Tape, var: Var) -> Result<Self> {
        match *tape.shape(var) {
            [frames, rows, cols, dim] => Ok(Self {
                var,
                frames,
                rows,
                cols,
                dim,
            }),
            ref s => Err(Error::invalid(
                "grid",
                format!("expected [T, H, W, D], got {s:?}"),
            )),
        }
    }

    pub fn nodes(&self) -> usize {
        self.rows * self.cols
    }

    /// All nodes of all frames as `[frames * nodes, dim]`; frame `t` node `j`
    /// lands on row `t * nodes + j`.
    pub fn flat(&self, tape: &mut Tape) -> Result<Var> {
        tape.reshape(self.var, &[self.frames * self.nodes(), self.dim])
    }

    pub fn with_flat(&self, tape: &mut Tape, flat: Var) -> Result<Self> {
        let var = tape.reshape(flat, &[self.frames, self.rows, self.cols, self.dim])?;
        Ok(Self { var, ..*self })
    }

    /// Per-frame [`NodeGrid`] values.
    pub fn to_grids(&self, tape: &Tape, stage: usize) -> Vec<NodeGrid> {
        let n = self.nodes();
        let data = tape.value(self.var).data();
        (0..self.frames)
            .map(|t| {
                let rows = &data[t * n * self.dim..(t + 1) * n * self.dim];
                let features = Tensor::new(&[n, self.dim], rows.to_vec()).expect("grid slice");
                NodeGrid::new(self.rows, self.cols, features, stage).expect("grid shape")
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemConfig {
    /// Output width of each conv block; the last entry is `D`.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Index of the block whose output is exposed as the tap.
    pub tap_block: usize,
}

impl Default for StemConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16, 32],
            strides: vec![2, 2, 2],
            tap_block: 1,
        }
    }
}

impl StemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Config(
                "stem channels and strides must be nonempty and equal length".into(),
            ));
        }
        if self.channels.iter().chain(&self.strides).any(|&v| v == 0) {
            return Err(Error::Config(
                "stem channels and strides must be positive".into(),
            ));
        }
        if self.tap_block >= self.channels.len() {
            return Err(Error::Config(format!(
                "tap_block {} out of range",
                self.tap_block
            )));
        }
        Ok(())
    }

    pub fn patch_size(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn dim(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    pub fn tap_dim(&self) -> usize {
        self.channels[self.tap_block]
    }

    /// Total stride at the tap.
    pub fn tap_stride(&self) -> usize {
        self.strides[..=self.tap_block].iter().product()
    }
}

/// Stack of `conv 3x3 (pad 1) + ReLU` blocks.
#[derive(Clone, Debug)]
pub struct Stem {
    cfg: StemConfig,
    blocks: Vec<Conv2d>,
}

impl Stem {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: StemConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = FRAME_CHANNELS;
        let blocks = cfg
            .channels
            .iter()
            .zip(&cfg.strides)
            .enumerate()
            .map(|(i, (&c, &s))| {
                let conv = Conv2d::new(store, rng, &format!("{name}.block{i}"), c_in, c, 3, s, 1);
                c_in = c;
                conv
            })
            .collect();
        Ok(Self { cfg, blocks })
    }

    pub fn config(&self) -> &StemConfig {
        &self.cfg
    }

    /// Runs the stem on `[T, H, W, 3]` frames; returns `(grid, tap)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &mut ParamBinder,
        frames: Var,
    ) -> Result<(GridVar, GridVar)> {
        let (mut h, mut w) = match *tape.shape(frames) {
            [_, h, w, FRAME_CHANNELS] => (h, w),
            ref s => {
                return Err(Error::invalid(
                    "patchify_stem",
                    format!("frames must be [T, H, W, 3], got {s:?}"),
                ))
            }
        };
        let mut x = frames;
        let mut tap = None;
        for (i, (block, &s)) in self.blocks.iter().zip(&self.cfg.strides).enumerate() {
            if h % s != 0 || w % s != 0 {
                return Err(Error::invalid(
                    "patchify_stem",
                    format!("{h}x{w} map at block {i} is not divisible by stride {s}"),
                ));
            }
            let y = block.forward(tape, p, x)?;
            x = tape.relu(y)?;
            (h, w) = (h / s, w / s);
            if i == self.cfg.tap_block {
                tap = Some(x);
            }
        }
        let tap = tap.expect("tap block validated");
        Ok((GridVar::from_var(tape, x)?, GridVar::from_var(tape, tap)?))
    }
}

/// Value-level stem: one grid and one tap grid per frame.
pub fn patchify_stem(
    frames: &[Frame],
    stem: &Stem,
    store: &ParamStore,
) -> Result<(Vec<NodeGrid>, Vec<NodeGrid>)> {
    let mut tape = Tape::new();
    let mut p = ParamBinder::new(store, false);
    let x = tape.constant(stack_frames(frames)?);
    let (grid, tap) = stem.forward(&mut tape, &mut p, x)?;
    Ok((grid.to_grids(&tape, 0), tap.to_grids(&tape, 0)))
}

/// `conv 3x3, stride 2, pad 1 + ReLU` halving the grid and doubling the width.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    conv: Conv2d,
    dim_in: usize,
}

impl PatchMerge {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim_in: usize) -> Self {
        Self {
            conv: Conv2d::new(store, rng, name, dim_in, 2 * dim_in, 3, 2, 1),
            dim_in,
        }
    }

    pub fn dim_out(&self) -> usize {
        2 * self.dim_in
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut ParamBinder, grid: GridVar) -> Result<GridVar> {
        if !grid.rows.is_multiple_of(2) || !grid.cols.is_multiple_of(2) {
            return Err(Error::invalid(
                "patch_merge",
                format!("grid {}x{} has an odd extent", grid.rows, grid.cols),
            ));
        }
        if grid.dim != self.dim_in {
            return Err(Error::invalid(
                "patch_merge",
                format!("expected dim {}, got {}", self.dim_in, grid.dim),
            ));
        }
        let y = self.conv.forward(tape, p, grid.var)?;
        let y = tape.relu(y)?;
        GridVar::from_var(tape, y)
    }
}

/// Value-level patch merge of a single grid.
pub fn patch_merge(grid: &NodeGrid, merge: &PatchMerge, store: &ParamStore) -> Result<NodeGrid> {
    let mut tape = Tape::new();
    let mut p = ParamBinder::new(store, false);
    let x = tape.constant(
        grid.features
            .reshaped(&[1, grid.grid_h, grid.grid_w, grid.dim()])?,
    );
    let g = GridVar::from_var(&tape, x)?;
    let out = merge.forward(&mut tape, &mut p, g)?;
    let mut grids = out.to_grids(&tape, grid.stage + 1);
    Ok(grids.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stem(cfg: StemConfig) -> (Stem, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Stem::new(&mut store, &mut rng, "stem", cfg).unwrap();
        (s, store)
    }

    #[test]
    fn grid_counts_follow_patch_size() {
        let (s, store) = stem(StemConfig {
            channels: vec![4, 8, 16],
            strides: vec![2, 2, 2],
            tap_block: 1,
        });
        let frames = vec![Frame::filled(64, 64, 0.5); 2];
        let (grids, taps) = patchify_stem(&frames, &s, &store).unwrap();
        assert_eq!(grids.len(), 2);
        assert_eq!(grids[0].num_nodes(), 64);
        assert_eq!((taps[0].grid_h, taps[0].grid_w, taps[0].dim()), (16, 16, 8));
        assert_eq!(grids[0].dim(), 16);
    }

    #[test]
    fn single_stride_eight_block_gives_one_node() {
        let (s, store) = stem(StemConfig {
            channels: vec![5],
            strides: vec![8],
            tap_block: 0,
        });
        let (grids, _) = patchify_stem(&[Frame::filled(8, 8, 0.2)], &s, &store).unwrap();
        assert_eq!(grids[0].num_nodes(), 1);
    }

    #[test]
    fn indivisible_frames_name_the_stride() {
        let (s, store) = stem(StemConfig::default());
        let err = patchify_stem(&[Frame::filled(36, 32, 0.0)], &s, &store).unwrap_err();
        assert!(err.to_string().contains("stride 2"), "{err}");
    }

    #[test]
    fn row_major_mapping_round_trips() {
        let g = NodeGrid::new(3, 5, Tensor::zeros(&[15, 2]), 0).unwrap();
        for j in 0..15 {
            let (r, c) = g.coords(j);
            assert_eq!(g.index(r, c), j);
        }
        assert_eq!(g.coords(7), (1, 2));
    }

    #[test]
    fn merge_shapes_and_zero_weights() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = PatchMerge::new(&mut store, &mut rng, "merge", 64);
        let g = NodeGrid::new(8, 8, Tensor::full(&[64, 64], 0.1), 0).unwrap();
        let out = patch_merge(&g, &m, &store).unwrap();
        assert_eq!(
            (out.grid_h, out.grid_w, out.dim(), out.stage),
            (4, 4, 128, 1)
        );

        let mut store = ParamStore::new();
        let m = PatchMerge::new(&mut store, &mut rng, "merge", 3);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let g = NodeGrid::new(2, 2, Tensor::full(&[4, 3], 0.7), 0).unwrap();
        let out = patch_merge(&g, &m, &store).unwrap();
        assert_eq!((out.num_nodes(), out.dim()), (1, 6));
        assert!(out.features.data().iter().all(|&v| v == 0.0));

        let odd = NodeGrid::new(3, 2, Tensor::zeros(&[6, 3]), 0).unwrap();
        assert!(patch_merge(&odd, &m, &store).is_err());
    }

    #[test]
    fn stem_is_translation_consistent() {
        let (s, store) = stem(StemConfig::default());
        let p = s.config().patch_size();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // content confined to the middle of a black 64x64 frame
        let mut base = Frame::filled(64, 64, 0.0);
        for y in 16..40 {
            for x in 16..40 {
                base.set_pixel(y, x, [rng.gen(), rng.gen(), rng.gen()]);
            }
        }
        let mut shifted = Frame::filled(64, 64, 0.0);
        for y in 16..40 {
            for x in 16..40 {
                shifted.set_pixel(y + p, x, base.pixel(y, x));
            }
        }
        let (a, _) = patchify_stem(&[base], &s, &store).unwrap();
        let (b, _) = patchify_stem(&[shifted], &s, &store).unwrap();
        let (a, b) = (&a[0], &b[0]);
        // nodes whose receptive field avoids the zero-padded border
        for r in 1..a.grid_h - 2 {
            for c in 1..a.grid_w - 1 {
                let x = a.node(a.index(r, c));
                let y = b.node(b.index(r + 1, c));
                for (u, v) in x.iter().zip(y) {
                    assert!((u - v).abs() < 1e-12, "node ({r},{c}) differs");
                }
            }
        }
    }
}
