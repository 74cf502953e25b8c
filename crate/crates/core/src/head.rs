//! Temporal head (node pooling, conv blocks, BiLSTM, classifiers) and the
//! small attention decoder used for translation fine-tuning.
//!
//! LSTM cell, per step, with `z = x W_x + h W_h + b` split into four
//! `hidden`-wide blocks `[i, f, g, o]`:
//!
//! ```text
//! c' = sigmoid(f) * c + sigmoid(i) * tanh(g)
//! h' = sigmoid(o) * tanh(c')
//! ```
//!
//! The forget-gate bias starts at 1.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{GridVar, NodeGrid};
use crate::error::{Error, Result};
use crate::nn::{uniform_init, Linear, RELU_GAIN};
use crate::tensor::{ParamBinder, ParamId, ParamStore, Tape, Tensor, Var};

/// Per-frame mean over nodes.
pub fn pool_nodes(grids: &[NodeGrid]) -> Result<Tensor> {
    let first = grids
        .first()
        .ok_or_else(|| Error::invalid("pool_nodes", "no frames"))?;
    let d = first.dim();
    let mut out = Vec::with_capacity(grids.len() * d);
    for g in grids {
        if g.dim() != d {
            return Err(Error::invalid(
                "pool_nodes",
                format!("frame dims {} and {d} differ", g.dim()),
            ));
        }
        let n = g.num_nodes() as f64;
        let mut acc = vec![0.0; d];
        for j in 0..g.num_nodes() {
            acc.iter_mut().zip(g.node(j)).for_each(|(a, v)| *a += v);
        }
        out.extend(acc.into_iter().map(|v| v / n));
    }
    Tensor::new(&[grids.len(), d], out)
}

/// Tape version of [`pool_nodes`]: `[T, h, w, D] -> [T, D]`.
pub fn pool_grid(tape: &mut Tape, grid: GridVar) -> Result<Var> {
    let x = tape.reshape(grid.var, &[grid.frames, grid.nodes(), grid.dim])?;
    tape.mean_axis(x, 1)
}

/// Time length after the two pool-by-2 conv blocks.
pub fn reduced_len(t: usize) -> usize {
    t / 2 / 2
}

pub const MIN_HEAD_STEPS: usize = 4;
pub const CONV_KERNEL: usize = 5;

/// Gate weights of one LSTM direction.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        hidden: usize,
    ) -> Self {
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        Self {
            w_x: store.add(
                format!("{name}.w_x"),
                uniform_init(rng, &[d_in, 4 * hidden], d_in, 1.0),
            ),
            w_h: store.add(
                format!("{name}.w_h"),
                uniform_init(rng, &[hidden, 4 * hidden], hidden, 1.0),
            ),
            b: store.add(
                format!("{name}.b"),
                Tensor::new(&[4 * hidden], bias).expect("bias shape"),
            ),
            hidden,
        }
    }

    /// One step from precomputed input term `xz` (`[1, 4H]`, bias included).
    pub fn step(
        &self,
        tape: &mut Tape,
        p: &mut ParamBinder,
        xz: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let w_h = p.var(tape, self.w_h);
        let hz = tape.matmul(h, w_h)?;
        let z = tape.add(xz, hz)?;
        let z = tape.reshape(z, &[4, self.hidden])?;
        let sig = tape.sigmoid(z)?;
        let tnh = tape.tanh(z)?;
        let i = tape.gather_rows(sig, vec![0])?;
        let f = tape.gather_rows(sig, vec![1])?;
        let g = tape.gather_rows(tnh, vec![2])?;
        let o = tape.gather_rows(sig, vec![3])?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c2 = tape.add(keep, write)?;
        let tc = tape.tanh(c2)?;
        let h2 = tape.mul(o, tc)?;
        Ok((h2, c2))
    }

    /// Runs over `[T, D]` input; `reverse` walks time backwards. Output row
    /// `t` is the state after consuming input row `t`.
    pub fn run(&self, tape: &mut Tape, p: &mut ParamBinder, x: Var, reverse: bool) -> Result<Var> {
        let t = tape.shape(x)[0];
        let w_x = p.var(tape, self.w_x);
        let b = p.var(tape, self.b);
        let xz = tape.matmul(x, w_x)?;
        let xz = tape.add(xz, b)?;
        let mut h = tape.constant(Tensor::zeros(&[1, self.hidden]));
        let mut c = h;
        let mut outs = vec![None; t];
        let order: Vec<usize> = if reverse {
            (0..t).rev().collect()
        } else {
            (0..t).collect()
        };
        for step in order {
            let xt = tape.gather_rows(xz, vec![step])?;
            (h, c) = self.step(tape, p, xt, h, c)?;
            outs[step] = Some(h);
        }
        let outs: Vec<Var> = outs
            .into_iter()
            .map(|v| v.expect("every step visited"))
            .collect();
        tape.concat(&outs, 0)
    }
}

#[derive(Clone, Debug)]
pub struct BiLstmLayer {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
}

impl BiLstmLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        hidden: usize,
    ) -> Self {
        Self {
            fwd: LstmCell::new(store, rng, &format!("{name}.fwd"), d_in, hidden),
            bwd: LstmCell::new(store, rng, &format!("{name}.bwd"), d_in, hidden),
        }
    }

    /// `[T, D] -> [T, 2H]`, forward states then backward states.
    pub fn forward(&self, tape: &mut Tape, p: &mut ParamBinder, x: Var) -> Result<Var> {
        let f = self.fwd.run(tape, p, x, false)?;
        let b = self.bwd.run(tape, p, x, true)?;
        tape.concat(&[f, b], 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    #[serde(default = "default_layers")]
    pub lstm_layers: usize,
}

fn default_layers() -> usize {
    2
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            lstm_layers: 2,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
}

/// Per-step logits of the head: the auxiliary set after the conv blocks and
/// the final set after the recurrence. Both are `[T', V+1]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub features: Var,
    pub conv_logits: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct TemporalHead {
    convs: Vec<ConvBlock>,
    lstm: Vec<BiLstmLayer>,
    aux: Linear,
    classifier: Linear,
    d_in: usize,
    classes: usize,
}

impl TemporalHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        cfg: &HeadConfig,
        classes: usize,
    ) -> Self {
        let h = cfg.hidden;
        let mut c_in = d_in;
        let convs = (0..2)
            .map(|i| {
                let fan_in = CONV_KERNEL * c_in;
                let w = store.add(
                    format!("{name}.conv{i}.w"),
                    uniform_init(rng, &[fan_in, h], fan_in, RELU_GAIN),
                );
                let b = store.add(format!("{name}.conv{i}.b"), Tensor::zeros(&[h]));
                c_in = h;
                ConvBlock { w, b }
            })
            .collect();
        let lstm = (0..cfg.lstm_layers)
            .map(|l| {
                BiLstmLayer::new(
                    store,
                    rng,
                    &format!("{name}.lstm{l}"),
                    if l == 0 { h } else { 2 * h },
                    h,
                )
            })
            .collect();
        let rec_out = if cfg.lstm_layers == 0 { h } else { 2 * h };
        Self {
            convs,
            lstm,
            aux: Linear::new(store, rng, &format!("{name}.aux"), h, classes, true, 1.0),
            classifier: Linear::new(
                store,
                rng,
                &format!("{name}.cls"),
                rec_out,
                classes,
                true,
                1.0,
            ),
            d_in,
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Conv blocks only: `[T, D] -> [T', hidden]`.
    pub fn encode_conv(&self, tape: &mut Tape, p: &mut ParamBinder, seq: Var) -> Result<Var> {
        let (t, d) = match *tape.shape(seq) {
            [t, d] => (t, d),
            ref s => {
                return Err(Error::invalid(
                    "temporal_head",
                    format!("input must be [T, D], got {s:?}"),
                ))
            }
        };
        if d != self.d_in {
            return Err(Error::invalid(
                "temporal_head",
                format!("expected width {}, got {d}", self.d_in),
            ));
        }
        if t < MIN_HEAD_STEPS {
            return Err(Error::invalid(
                "temporal_head",
                format!("sequence of {t} steps is shorter than the minimum {MIN_HEAD_STEPS}"),
            ));
        }
        let mut x = seq;
        for block in &self.convs {
            let w = p.var(tape, block.w);
            let b = p.var(tape, block.b);
            let y = tape.conv1d(x, w, CONV_KERNEL, CONV_KERNEL / 2)?;
            let y = tape.add(y, b)?;
            let y = tape.relu(y)?;
            x = max_pool2(tape, y)?;
        }
        Ok(x)
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut ParamBinder, seq: Var) -> Result<HeadOutput> {
        let conv = self.encode_conv(tape, p, seq)?;
        let conv_logits = self.aux.forward(tape, p, conv)?;
        let mut x = conv;
        for layer in &self.lstm {
            x = layer.forward(tape, p, x)?;
        }
        let logits = self.classifier.forward(tape, p, x)?;
        Ok(HeadOutput {
            features: x,
            conv_logits,
            logits,
        })
    }
}

/// Max over non-overlapping pairs of rows; a trailing odd row is dropped.
pub fn max_pool2(tape: &mut Tape, x: Var) -> Result<Var> {
    let (t, c) = match *tape.shape(x) {
        [t, c] => (t, c),
        ref s => {
            return Err(Error::invalid(
                "max_pool2",
                format!("expected [T, C], got {s:?}"),
            ))
        }
    };
    let half = t / 2;
    if half == 0 {
        return Err(Error::invalid("max_pool2", "need at least 2 steps"));
    }
    let x = if t % 2 == 1 {
        tape.gather_rows(x, (0..2 * half).collect())?
    } else {
        x
    };
    let x = tape.reshape(x, &[half, 2, c])?;
    tape.max_axis(x, 1)
}

/// Decoder vocabulary layout: specials first, then text tokens.
pub const EOS: usize = 0;
pub const BOS: usize = 1;
pub const UNK: usize = 2;
pub const NUM_SPECIALS: usize = 3;

#[derive(Clone, Debug)]
pub struct TranslationDecoder {
    embed: ParamId,
    init: Linear,
    key: Linear,
    cell: LstmCell,
    out: Linear,
    classes: usize,
    hidden: usize,
}

/// Greedy decoding result.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Emitted ids, without the terminating EOS.
    pub tokens: Vec<usize>,
    /// `[steps, classes]` log-probabilities of every decoding step.
    pub log_probs: Tensor,
}

impl TranslationDecoder {
    /// `classes` counts the specials.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_enc: usize,
        hidden: usize,
        classes: usize,
    ) -> Self {
        Self {
            embed: store.add(
                format!("{name}.embed"),
                uniform_init(rng, &[classes, hidden], hidden, 1.0),
            ),
            init: Linear::new(
                store,
                rng,
                &format!("{name}.init"),
                d_enc,
                hidden,
                true,
                1.0,
            ),
            key: Linear::new(
                store,
                rng,
                &format!("{name}.key"),
                d_enc,
                hidden,
                false,
                1.0,
            ),
            cell: LstmCell::new(store, rng, &format!("{name}.cell"), hidden, hidden),
            out: Linear::new(
                store,
                rng,
                &format!("{name}.out"),
                2 * hidden,
                classes,
                true,
                1.0,
            ),
            classes,
            hidden,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn start(&self, tape: &mut Tape, p: &mut ParamBinder, enc: Var) -> Result<(Var, Var, Var)> {
        if tape.shape(enc).len() != 2 {
            return Err(Error::invalid(
                "translation_decoder",
                "encoder sequence must be [T, D]",
            ));
        }
        let keys = self.key.forward(tape, p, enc)?;
        let mean = tape.mean_axis(enc, 0)?;
        let d = tape.shape(mean)[0];
        let mean = tape.reshape(mean, &[1, d])?;
        let h0 = self.init.forward(tape, p, mean)?;
        let h0 = tape.tanh(h0)?;
        let c0 = tape.constant(Tensor::zeros(&[1, self.hidden]));
        Ok((keys, h0, c0))
    }

    /// One decoding step given the previous token; returns log-probs `[1, classes]`.
    fn step(
        &self,
        tape: &mut Tape,
        p: &mut ParamBinder,
        keys: Var,
        prev: usize,
        state: (Var, Var),
    ) -> Result<(Var, (Var, Var))> {
        if prev >= self.classes {
            return Err(Error::invalid(
                "translation_decoder",
                format!("token id {prev} out of range"),
            ));
        }
        let emb = p.var(tape, self.embed);
        let x = tape.gather_rows(emb, vec![prev])?;
        let w_x = p.var(tape, self.cell.w_x);
        let b = p.var(tape, self.cell.b);
        let xz = tape.matmul(x, w_x)?;
        let xz = tape.add(xz, b)?;
        let (h, c) = self.cell.step(tape, p, xz, state.0, state.1)?;
        let scores = tape.matmul_t(h, keys, false, true)?;
        let log_attn = tape.log_softmax(scores)?;
        let attn = tape.exp(log_attn)?;
        let ctx = tape.matmul(attn, keys)?;
        let feat = tape.concat(&[h, ctx], 1)?;
        let logits = self.out.forward(tape, p, feat)?;
        Ok((tape.log_softmax(logits)?, (h, c)))
    }

    /// Teacher-forced log-probs `[len - 1, classes]` predicting `target[1..]`
    /// from `target[..len-1]`. `target` must start with [`BOS`].
    pub fn teacher_forced(
        &self,
        tape: &mut Tape,
        p: &mut ParamBinder,
        enc: Var,
        target: &[usize],
    ) -> Result<Var> {
        if target.len() < 2 {
            return Err(Error::invalid(
                "translation_decoder",
                "target has no tokens to predict",
            ));
        }
        if target[0] != BOS {
            return Err(Error::invalid(
                "translation_decoder",
                "target must start with the BOS id",
            ));
        }
        let (keys, h0, c0) = self.start(tape, p, enc)?;
        let mut state = (h0, c0);
        let mut rows = Vec::with_capacity(target.len() - 1);
        for &prev in &target[..target.len() - 1] {
            let (lp, s) = self.step(tape, p, keys, prev, state)?;
            state = s;
            rows.push(lp);
        }
        tape.concat(&rows, 0)
    }

    /// Greedy decode; ties go to the lowest id, so EOS wins a flat row.
    pub fn greedy(&self, store: &ParamStore, enc: &Tensor, max_len: usize) -> Result<Decoded> {
        let mut tape = Tape::new();
        let mut p = ParamBinder::new(store, false);
        let enc = tape.constant(enc.clone());
        let (keys, h0, c0) = self.start(&mut tape, &mut p, enc)?;
        let mut state = (h0, c0);
        let mut prev = BOS;
        let mut tokens = Vec::new();
        let mut rows = Vec::new();
        for _ in 0..max_len {
            let (lp, s) = self.step(&mut tape, &mut p, keys, prev, state)?;
            state = s;
            let row = tape.value(lp).data();
            rows.extend_from_slice(row);
            let best = argmax_first(row);
            if best == EOS {
                break;
            }
            tokens.push(best);
            prev = best;
        }
        let steps = rows.len() / self.classes;
        let log_probs = if steps == 0 {
            Tensor::zeros(&[1, self.classes])
        } else {
            Tensor::new(&[steps, self.classes], rows)?
        };
        Ok(Decoded { tokens, log_probs })
    }
}

pub fn argmax_first(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Mean negative log-likelihood of `targets` under row-wise log-probs.
pub fn cross_entropy(tape: &mut Tape, log_probs: Var, targets: &[usize]) -> Result<Var> {
    let (n, v) = match *tape.shape(log_probs) {
        [n, v] => (n, v),
        ref s => {
            return Err(Error::invalid(
                "cross_entropy",
                format!("expected [N, V], got {s:?}"),
            ))
        }
    };
    if targets.len() != n || targets.iter().any(|&t| t >= v) {
        return Err(Error::invalid(
            "cross_entropy",
            "targets do not match the log-prob rows",
        ));
    }
    let mut mask = vec![0.0; n * v];
    for (i, &t) in targets.iter().enumerate() {
        mask[i * v + t] = -1.0 / n as f64;
    }
    let mask = tape.constant(Tensor::new(&[n, v], mask)?);
    let picked = tape.mul(log_probs, mask)?;
    tape.sum(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pool_examples() {
        let g = NodeGrid::new(1, 2, Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap(), 0).unwrap();
        assert_eq!(pool_nodes(&[g]).unwrap().data(), &[2.0]);
        let g = NodeGrid::new(2, 2, Tensor::full(&[4, 2], 0.25), 0).unwrap();
        assert_eq!(pool_nodes(&[g]).unwrap().data(), &[0.25, 0.25]);
        let one =
            NodeGrid::new(1, 1, Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap(), 0).unwrap();
        assert_eq!(pool_nodes(&[one]).unwrap().data(), &[1.0, 2.0, 3.0]);
        assert!(pool_nodes(&[]).is_err());
    }

    #[test]
    fn reduced_lengths() {
        assert_eq!(reduced_len(40), 10);
        assert_eq!(reduced_len(7), 1);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax_first(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax_first(&[-1.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn head_shape_contract() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = HeadConfig {
            hidden: 4,
            lstm_layers: 2,
        };
        let head = TemporalHead::new(&mut store, &mut rng, "head", 3, &cfg, 6);
        let mut tape = Tape::new();
        let mut p = ParamBinder::new(&store, false);
        let x = tape.constant(Tensor::full(&[8, 3], 0.1));
        let out = head.forward(&mut tape, &mut p, x).unwrap();
        assert_eq!(tape.shape(out.logits), &[2, 6]);
        assert_eq!(tape.shape(out.conv_logits), &[2, 6]);
        let short = tape.constant(Tensor::full(&[3, 3], 0.1));
        let err = head.forward(&mut tape, &mut p, short).unwrap_err();
        assert!(err.to_string().contains("minimum 4"));
    }
}
