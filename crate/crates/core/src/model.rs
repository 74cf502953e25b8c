//! The recognition network: stem, graph stages with patch merging between
//! them, the temporal head and an optional translation decoder.
//!
//! Stage 0 runs on the stem grid and takes its high-resolution HSG input
//! from the stem tap. Every later stage first merges the previous stage's
//! output and uses the unmerged output as its high-resolution input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{stack_frames, Frame, GridVar, PatchMerge, Stem, StemConfig};
use crate::error::{Error, Result};
use crate::graph::Distance;
use crate::head::{pool_grid, HeadConfig, HeadOutput, TemporalHead, TranslationDecoder};
use crate::message::{
    mix_stage, Aggregation, GraphModule, StageConfig, StageGraphs, StageWeights, DEFAULT_ORDER,
};
use crate::rng::derive_seed;
use crate::tensor::{ParamBinder, ParamId, ParamStore, Tape, Tensor, Var};

const POS_INIT: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub stem: StemConfig,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub head: HeadConfig,
    #[serde(default = "default_decoder_hidden")]
    pub decoder_hidden: usize,
    /// Input frame extents `[H, W]`; fixes the positional table size.
    #[serde(default = "default_frame_size")]
    pub frame_size: [usize; 2],
    /// Adds a learned per-node embedding to the stem grid.
    #[serde(default = "default_true")]
    pub positional: bool,
}

fn default_frame_size() -> [usize; 2] {
    [64, 64]
}

fn default_true() -> bool {
    true
}

fn default_decoder_hidden() -> usize {
    64
}

impl Default for ModelConfig {
    fn default() -> Self {
        let stage = |k_local, k_temporal| StageConfig {
            order: DEFAULT_ORDER.to_vec(),
            aggregation: Aggregation::default(),
            k_local,
            k_temporal,
            distance: Distance::default(),
            drop_rate: 0.0,
        };
        Self {
            stem: StemConfig::default(),
            stages: vec![stage(3, 16), stage(4, 16)],
            head: HeadConfig::default(),
            decoder_hidden: default_decoder_hidden(),
            frame_size: default_frame_size(),
            positional: true,
        }
    }
}

impl ModelConfig {
    /// Same dimensions with every graph module switched off.
    pub fn stem_only(&self) -> Self {
        let mut cfg = self.clone();
        for s in &mut cfg.stages {
            s.order.clear();
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.stem.validate()?;
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        for s in &self.stages {
            s.validate()?;
        }
        if self.head.hidden == 0 || self.decoder_hidden == 0 {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        let ps = self.stem.patch_size() << (self.stages.len() - 1);
        let [h, w] = self.frame_size;
        if h == 0 || w == 0 || h % ps != 0 || w % ps != 0 {
            return Err(Error::Config(format!(
                "frame size {h}x{w} must be a positive multiple of the total stride {ps}"
            )));
        }
        Ok(())
    }

    /// Extents of the stage-0 grid.
    pub fn grid_size(&self) -> [usize; 2] {
        let p = self.stem.patch_size();
        [self.frame_size[0] / p, self.frame_size[1] / p]
    }

    /// Node width of stage `i`.
    pub fn stage_dim(&self, i: usize) -> usize {
        self.stem.dim() << i
    }

    pub fn feature_dim(&self) -> usize {
        if self.head.lstm_layers == 0 {
            self.head.hidden
        } else {
            2 * self.head.hidden
        }
    }
}

/// Everything a forward pass exposes.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub head: HeadOutput,
    pub graphs: Vec<StageGraphs>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    stem: Stem,
    pos: Option<ParamId>,
    merges: Vec<PatchMerge>,
    stages: Vec<StageWeights>,
    pub head: TemporalHead,
    pub decoder: Option<TranslationDecoder>,
}

impl Model {
    /// `classes` counts the CTC blank; `decoder_classes` counts the decoder
    /// specials.
    pub fn new<R: Rng>(
        cfg: &ModelConfig,
        classes: usize,
        decoder_classes: Option<usize>,
        rng: &mut R,
    ) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let stem = Stem::new(&mut store, rng, "stem", cfg.stem.clone())?;
        let [gh, gw] = cfg.grid_size();
        let pos = cfg.positional.then(|| {
            let d = cfg.stem.dim();
            let data = (0..gh * gw * d)
                .map(|_| rng.gen_range(-POS_INIT..POS_INIT))
                .collect();
            store.add(
                "stem.pos",
                Tensor::new(&[gh * gw * d], data).expect("positional table"),
            )
        });
        let mut merges = Vec::new();
        let mut stages = Vec::new();
        for (i, scfg) in cfg.stages.iter().enumerate() {
            let (tap_dim, s) = if i == 0 {
                (
                    cfg.stem.tap_dim(),
                    cfg.stem.patch_size() / cfg.stem.tap_stride(),
                )
            } else {
                let m =
                    PatchMerge::new(&mut store, rng, &format!("merge{i}"), cfg.stage_dim(i - 1));
                merges.push(m);
                (cfg.stage_dim(i - 1), 2)
            };
            stages.push(StageWeights::new(
                &mut store,
                rng,
                &format!("stage{i}"),
                scfg,
                cfg.stage_dim(i),
                tap_dim,
                s,
            ));
        }
        let d_last = cfg.stage_dim(cfg.stages.len() - 1);
        let head = TemporalHead::new(&mut store, rng, "head", d_last, &cfg.head, classes);
        let decoder = decoder_classes.map(|c| {
            TranslationDecoder::new(
                &mut store,
                rng,
                "dec",
                cfg.feature_dim(),
                cfg.decoder_hidden,
                c,
            )
        });
        Ok((
            Self {
                cfg: cfg.clone(),
                stem,
                pos,
                merges,
                stages,
                head,
                decoder,
            },
            store,
        ))
    }

    /// Node grids after every stage; graphs are rebuilt from the features.
    /// `drop_seed` enables DropEdge.
    pub fn encode_grids(
        &self,
        tape: &mut Tape,
        p: &mut ParamBinder,
        frames: Var,
        drop_seed: Option<u64>,
    ) -> Result<(GridVar, Vec<StageGraphs>)> {
        let (mut grid, tap) = self.stem.forward(tape, p, frames)?;
        let [gh, gw] = self.cfg.grid_size();
        if (grid.rows, grid.cols) != (gh, gw) {
            return Err(Error::invalid(
                "model",
                format!(
                    "frames give a {}x{} grid, the model expects {gh}x{gw}",
                    grid.rows, grid.cols
                ),
            ));
        }
        if let Some(pos) = self.pos {
            let pv = p.var(tape, pos);
            let flat = tape.reshape(grid.var, &[grid.frames, gh * gw * grid.dim])?;
            let flat = tape.add(flat, pv)?;
            let v = tape_reshape(tape, flat, &grid)?;
            grid = GridVar::from_var(tape, v)?;
        }
        let mut high = tap;
        let mut graphs = Vec::with_capacity(self.stages.len());
        for (i, (w, scfg)) in self.stages.iter().zip(&self.cfg.stages).enumerate() {
            if i > 0 {
                high = grid;
                grid = self.merges[i - 1].forward(tape, p, grid)?;
            }
            let tap = scfg.uses(GraphModule::Hsg).then_some(high);
            let seed = drop_seed
                .filter(|_| scfg.drop_rate > 0.0)
                .map(|s| derive_seed(s, &[i as u64]));
            let (out, g) = mix_stage(tape, p, w, grid, tap, scfg, seed, None)?;
            grid = out;
            graphs.push(g);
        }
        Ok((grid, graphs))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &mut ParamBinder,
        frames: Var,
        drop_seed: Option<u64>,
    ) -> Result<ModelOutput> {
        let (grid, graphs) = self.encode_grids(tape, p, frames, drop_seed)?;
        let seq = pool_grid(tape, grid)?;
        let head = self.head.forward(tape, p, seq)?;
        Ok(ModelOutput { head, graphs })
    }

    /// Inference pass on raw frames without gradient tracking.
    pub fn infer(&self, store: &ParamStore, frames: &[Frame]) -> Result<Inference> {
        let mut tape = Tape::new();
        let mut p = ParamBinder::new(store, false);
        let x = tape.constant(stack_frames(frames)?);
        let out = self.forward(&mut tape, &mut p, x, None)?;
        let lp = tape.log_softmax(out.head.logits)?;
        Ok(Inference {
            log_probs: tape.value(lp).clone(),
            features: tape.value(out.head.features).clone(),
            graphs: out.graphs,
        })
    }
}

fn tape_reshape(tape: &mut Tape, v: Var, like: &GridVar) -> Result<Var> {
    tape.reshape(v, &[like.frames, like.rows, like.cols, like.dim])
}

#[derive(Clone, Debug)]
pub struct Inference {
    /// `[T', classes]` log-probabilities of the final classifier.
    pub log_probs: Tensor,
    /// `[T', feature_dim]` recurrent features.
    pub features: Tensor,
    pub graphs: Vec<StageGraphs>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frames(t: usize) -> Vec<Frame> {
        (0..t)
            .map(|i| Frame::filled(64, 64, 0.1 * (i % 5) as f32))
            .collect()
    }

    #[test]
    fn default_model_runs_and_shapes_match() {
        let cfg = ModelConfig::default();
        let (m, store) = Model::new(&cfg, 13, Some(9), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let inf = m.infer(&store, &frames(12)).unwrap();
        assert_eq!(inf.log_probs.shape(), &[3, 13]);
        assert_eq!(inf.features.shape(), &[3, 128]);
        assert_eq!(inf.graphs.len(), 2);
        assert_eq!(inf.graphs[1].temporal.len(), 11);
        assert!(store.id("dec.embed").is_some());
        assert!(store.iter().any(|(_, n, _)| n.starts_with("merge1.")));
    }

    #[test]
    fn stem_only_has_no_graph_weights() {
        let cfg = ModelConfig::default().stem_only();
        let (m, store) = Model::new(&cfg, 5, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(store.iter().all(|(_, n, _)| !n.contains("sg")));
        let inf = m.infer(&store, &frames(8)).unwrap();
        assert!(inf.graphs.iter().all(|g| g == &StageGraphs::default()));
    }
}
