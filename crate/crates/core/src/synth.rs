//! Deterministic synthetic sign corpus.
//!
//! Every gloss is two coloured "hand" blobs plus an optional static "face"
//! blob on a noisy dark background. Gloss `g` uses hand colour pair
//! `g % 4` and motion template `g / 4`. Two glosses therefore differ either
//! in at least one hand colour (palette channels differ by 0.85 or more,
//! jitter is at most `color_jitter` per channel) or in the motion template
//! (templates use distinct velocity directions or rotation senses; speed
//! jitter only rescales them, so parameter sets never overlap).
//!
//! Sample `i` of split `s` is rendered from the stream keyed
//! `(seed, s, i)`. Gloss sequences for a split come from a shuffled deck
//! keyed `(seed, s)`, which keeps the gloss prior close to uniform.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Frame, FRAME_CHANNELS};
use crate::dataset::{write_msgf, Manifest, SampleEntry, DATASET_VERSION, SPLITS};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, substream};
use crate::tcp::FUNCTION_WORDS;

pub const GLOSS_NAMES: [&str; 24] = [
    "SUN", "RAIN", "WIND", "CLOUD", "SNOW", "STORM", "NORTH", "SOUTH", "COLD", "WARM", "FOG",
    "DAY", "NIGHT", "EAST", "WEST", "HAIL", "FROST", "MILD", "HEAT", "DAWN", "DUSK", "GALE",
    "MIST", "SKY",
];

/// Suffixes appended by [`derive_text`], written in upper case to match the
/// gloss spelling.
pub const TEXT_SUFFIXES: [&str; 3] = ["S", "ED", "ING"];

const PALETTE: [[f64; 3]; 4] = [
    [0.95, 0.1, 0.1],
    [0.1, 0.95, 0.1],
    [0.1, 0.1, 0.95],
    [0.95, 0.95, 0.1],
];
const COLOR_PAIRS: [(usize, usize); 4] = [(0, 1), (1, 2), (2, 3), (3, 0)];
const FACE_COLOR: [f64; 3] = [0.85, 0.7, 0.6];
const FACE_CENTER: (f64, f64) = (0.5, 0.2);
const HAND_CENTERS: [(f64, f64); 2] = [(0.3, 0.6), (0.7, 0.6)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motion {
    Slide,
    CircleCw,
    Cross,
    CircleCcw,
    Converge,
    Diverge,
}

pub const MOTIONS: [Motion; 6] = [
    Motion::CircleCw,
    Motion::CircleCcw,
    Motion::Slide,
    Motion::Cross,
    Motion::Converge,
    Motion::Diverge,
];

/// Trajectory `p(tau) = c + v (tau - 1/2) + a (cos(w tau + phi), sin(w tau + phi))`
/// in unit image coordinates `(x, y)`, `tau` in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trajectory {
    pub center: (f64, f64),
    pub velocity: (f64, f64),
    pub amplitude: f64,
    pub omega: f64,
    pub phase: f64,
}

impl Trajectory {
    pub fn at(&self, tau: f64) -> (f64, f64) {
        let ang = self.omega * tau + self.phase;
        (
            self.center.0 + self.velocity.0 * (tau - 0.5) + self.amplitude * ang.cos(),
            self.center.1 + self.velocity.1 * (tau - 0.5) + self.amplitude * ang.sin(),
        )
    }
}

/// Template for hand `h` (0 left, 1 right) before per-sample jitter.
pub fn motion_template(motion: Motion, hand: usize) -> Trajectory {
    let side = if hand == 0 { 1.0 } else { -1.0 };
    let still = Trajectory {
        center: HAND_CENTERS[hand],
        velocity: (0.0, 0.0),
        amplitude: 0.0,
        omega: 0.0,
        phase: 0.0,
    };
    match motion {
        Motion::Slide => Trajectory {
            velocity: (0.0, -0.4),
            ..still
        },
        Motion::CircleCw | Motion::CircleCcw => Trajectory {
            amplitude: 0.16,
            omega: if motion == Motion::CircleCw { PI } else { -PI },
            phase: hand as f64 * PI,
            ..still
        },
        Motion::Cross => Trajectory {
            velocity: (0.0, 0.45 * side),
            ..still
        },
        Motion::Converge => Trajectory {
            velocity: (0.3 * side, 0.0),
            ..still
        },
        Motion::Diverge => Trajectory {
            velocity: (-0.3 * side, 0.0),
            ..still
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextRule {
    pub p_swap: f64,
    /// A swap exchanges token `i` with one of the next `swap_window - 1`.
    pub swap_window: usize,
    pub p_inflect: f64,
    pub p_insert: f64,
}

impl Default for TextRule {
    fn default() -> Self {
        Self {
            p_swap: 0.4,
            swap_window: 2,
            p_inflect: 0.3,
            p_insert: 0.3,
        }
    }
}

impl TextRule {
    pub fn identity() -> Self {
        Self {
            p_swap: 0.0,
            swap_window: 2,
            p_inflect: 0.0,
            p_insert: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_glosses: usize,
    pub frames_per_gloss: [usize; 2],
    pub height: usize,
    pub width: usize,
    /// 2 draws the hands only, 3 adds the face.
    pub blobs_per_gloss: usize,
    pub glosses_per_sample: [usize; 2],
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    /// Keys the small per-gloss offsets applied to the motion templates.
    pub motion_seed: u64,
    pub position_jitter: f64,
    pub speed_jitter: f64,
    /// Radians added to the start phase of circular motions per clip.
    pub phase_jitter: f64,
    pub color_jitter: f64,
    pub background: f64,
    pub noise: f64,
    pub text: TextRule,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_glosses: 12,
            frames_per_gloss: [4, 8],
            height: 64,
            width: 64,
            blobs_per_gloss: 2,
            glosses_per_sample: [1, 5],
            train_size: 200,
            dev_size: 30,
            test_size: 30,
            motion_seed: 7,
            position_jitter: 0.15,
            speed_jitter: 0.3,
            phase_jitter: 1.0,
            color_jitter: 0.05,
            background: 0.15,
            noise: 0.03,
            text: TextRule::default(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth spec: {m}")));
        let max_glosses = COLOR_PAIRS.len() * MOTIONS.len();
        if self.num_glosses == 0 || self.num_glosses > max_glosses {
            return bad(format!("num_glosses must be in 1..={max_glosses}"));
        }
        let [f0, f1] = self.frames_per_gloss;
        if f0 < 2 || f1 < f0 {
            return bad("frames_per_gloss must satisfy 2 <= min <= max".into());
        }
        let [g0, g1] = self.glosses_per_sample;
        if g0 < 1 || g1 < g0 {
            return bad("glosses_per_sample must satisfy 1 <= min <= max".into());
        }
        if g1 > 1 && self.num_glosses < 2 {
            return bad("multi-gloss samples need at least 2 glosses".into());
        }
        if self.height < 8 || self.width < 8 {
            return bad("frames must be at least 8x8".into());
        }
        if !(2..=3).contains(&self.blobs_per_gloss) {
            return bad("blobs_per_gloss must be 2 or 3".into());
        }
        if self.train_size == 0 || self.dev_size == 0 || self.test_size == 0 {
            return bad("split sizes must be at least 1".into());
        }
        let jitters = [
            ("position_jitter", self.position_jitter),
            ("speed_jitter", self.speed_jitter),
            ("phase_jitter", self.phase_jitter),
            ("color_jitter", self.color_jitter),
            ("noise", self.noise),
        ];
        for (name, v) in jitters {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if self.speed_jitter >= 1.0 {
            return bad("speed_jitter must be below 1".into());
        }
        let t = &self.text;
        for (name, p) in [
            ("p_swap", t.p_swap),
            ("p_inflect", t.p_inflect),
            ("p_insert", t.p_insert),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if t.swap_window < 2 {
            return bad("swap_window must be at least 2".into());
        }
        Ok(())
    }

    pub fn gloss_names(&self) -> Vec<String> {
        GLOSS_NAMES[..self.num_glosses]
            .iter()
            .map(|s| (*s).to_owned())
            .collect()
    }

    pub fn split_size(&self, split: &str) -> usize {
        match split {
            "train" => self.train_size,
            "dev" => self.dev_size,
            _ => self.test_size,
        }
    }
}

/// Hand colours and trajectories for a gloss, before per-sample jitter.
pub fn gloss_template(gloss_id: usize, spec: &SynthSpec) -> ([[f64; 3]; 2], [Trajectory; 2]) {
    let (a, b) = COLOR_PAIRS[gloss_id % COLOR_PAIRS.len()];
    let motion = MOTIONS[gloss_id / COLOR_PAIRS.len()];
    let mut rng = substream(spec.motion_seed, &[u64::MAX, gloss_id as u64]);
    let dx = rng.gen_range(-0.03..=0.03);
    let dy = rng.gen_range(-0.03..=0.03);
    let amp = rng.gen_range(0.9..=1.1);
    let traj = [0, 1].map(|h| {
        let t = motion_template(motion, h);
        Trajectory {
            center: (t.center.0 + dx, t.center.1 + dy),
            amplitude: t.amplitude * amp,
            ..t
        }
    });
    ([PALETTE[a], PALETTE[b]], traj)
}

fn blob_radius(spec: &SynthSpec) -> f64 {
    0.11 * spec.height.min(spec.width) as f64
}

/// Alpha-blends an anti-aliased disc into a `[H, W, 3]` buffer.
fn draw_disc(
    buf: &mut [f64],
    h: usize,
    w: usize,
    center: (f64, f64),
    radius: f64,
    color: [f64; 3],
) {
    let cx = center.0 * w as f64 - 0.5;
    let cy = center.1 * h as f64 - 0.5;
    let y0 = (cy - radius - 1.0).floor().max(0.0) as usize;
    let x0 = (cx - radius - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + radius + 1.0).ceil().max(0.0) as usize).min(h.saturating_sub(1));
    let x1 = ((cx + radius + 1.0).ceil().max(0.0) as usize).min(w.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let alpha = (radius + 0.5 - d).clamp(0.0, 1.0);
            if alpha > 0.0 {
                let o = (y * w + x) * FRAME_CHANNELS;
                for c in 0..FRAME_CHANNELS {
                    buf[o + c] = (1.0 - alpha) * buf[o + c] + alpha * color[c];
                }
            }
        }
    }
}

/// Renders one gloss clip; its length, jitter and noise come from `rng`.
pub fn render_gloss_clip(
    gloss_id: usize,
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Frame>> {
    if gloss_id >= spec.num_glosses {
        return Err(Error::invalid(
            "render_gloss_clip",
            format!("gloss id {gloss_id} outside 0..{}", spec.num_glosses),
        ));
    }
    let (colors, trajs) = gloss_template(gloss_id, spec);
    let len = rng.gen_range(spec.frames_per_gloss[0]..=spec.frames_per_gloss[1]);
    let pj = spec.position_jitter;
    let shift = (rng.gen_range(-pj..=pj), rng.gen_range(-pj..=pj));
    let speed = rng.gen_range(1.0 - spec.speed_jitter..=1.0 + spec.speed_jitter);
    let phase = rng.gen_range(-spec.phase_jitter..=spec.phase_jitter);
    let cj = spec.color_jitter;
    let colors = colors.map(|c| c.map(|v| (v + rng.gen_range(-cj..=cj)).clamp(0.0, 1.0)));
    let trajs = trajs.map(|t| Trajectory {
        center: (t.center.0 + shift.0, t.center.1 + shift.1),
        velocity: (t.velocity.0 * speed, t.velocity.1 * speed),
        amplitude: t.amplitude * speed,
        phase: t.phase + phase,
        ..t
    });
    let (h, w) = (spec.height, spec.width);
    let radius = blob_radius(spec);
    let mut frames = Vec::with_capacity(len);
    for i in 0..len {
        let tau = i as f64 / (len - 1) as f64;
        let mut buf = Vec::with_capacity(h * w * FRAME_CHANNELS);
        for _ in 0..h * w {
            let v = spec.background + rng.gen_range(-spec.noise..=spec.noise);
            buf.extend_from_slice(&[v; FRAME_CHANNELS]);
        }
        if spec.blobs_per_gloss == 3 {
            draw_disc(&mut buf, h, w, FACE_CENTER, radius * 1.3, FACE_COLOR);
        }
        for (t, c) in trajs.iter().zip(colors) {
            draw_disc(&mut buf, h, w, t.at(tau), radius, c);
        }
        frames.push(Frame::new(
            h,
            w,
            buf.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
        )?);
    }
    Ok(frames)
}

/// Builds the spoken-style sentence for a gloss sequence.
pub fn derive_text<S: AsRef<str>>(
    glosses: &[S],
    rule: &TextRule,
    rng: &mut ChaCha8Rng,
) -> Result<String> {
    if glosses.is_empty() {
        return Err(Error::invalid("derive_text", "empty gloss sequence"));
    }
    let mut toks: Vec<String> = glosses.iter().map(|g| g.as_ref().to_owned()).collect();
    let mut i = 0;
    while i + 1 < toks.len() {
        if rng.gen_bool(rule.p_swap) {
            let reach = (rule.swap_window - 1).min(toks.len() - 1 - i);
            let j = i + rng.gen_range(1..=reach);
            toks.swap(i, j);
            i = j + 1;
        } else {
            i += 1;
        }
    }
    let mut words = Vec::with_capacity(toks.len() * 2);
    for t in toks {
        if rng.gen_bool(rule.p_insert) {
            words.push(FUNCTION_WORDS[rng.gen_range(0..FUNCTION_WORDS.len())].to_owned());
        }
        if rng.gen_bool(rule.p_inflect) {
            words.push(t + TEXT_SUFFIXES[rng.gen_range(0..TEXT_SUFFIXES.len())]);
        } else {
            words.push(t);
        }
    }
    Ok(words.join(" ") + ".")
}

/// Gloss sequences for one split, drawn from a reshuffled deck so every
/// gloss appears nearly equally often. Adjacent repeats are avoided.
pub fn plan_split(spec: &SynthSpec, seed: u64, split_idx: usize) -> Vec<Vec<usize>> {
    let mut rng = substream(seed, &[split_idx as u64]);
    let mut deck: Vec<usize> = Vec::new();
    let mut draw = |rng: &mut ChaCha8Rng, prev: Option<usize>| -> usize {
        if deck.is_empty() {
            deck = (0..spec.num_glosses).collect();
            deck.shuffle(rng);
        }
        let pos = deck.iter().rposition(|&g| Some(g) != prev);
        match pos {
            Some(p) => deck.remove(p),
            None => {
                let mut fresh: Vec<usize> = (0..spec.num_glosses).collect();
                fresh.shuffle(rng);
                deck.extend(fresh);
                let p = deck
                    .iter()
                    .rposition(|&g| Some(g) != prev)
                    .expect("two distinct glosses");
                deck.remove(p)
            }
        }
    };
    (0..spec.split_size(SPLITS[split_idx]))
        .map(|_| {
            let n = rng.gen_range(spec.glosses_per_sample[0]..=spec.glosses_per_sample[1]);
            let mut seq: Vec<usize> = Vec::with_capacity(n);
            for _ in 0..n {
                let g = draw(&mut rng, seq.last().copied());
                seq.push(g);
            }
            seq
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub frames: Vec<Frame>,
    pub gloss_ids: Vec<usize>,
    pub text: String,
}

/// Renders one sample from its own stream.
pub fn render_sample(
    spec: &SynthSpec,
    seed: u64,
    split_idx: usize,
    index: usize,
    gloss_ids: &[usize],
) -> Result<SynthSample> {
    let mut rng = substream(seed, &[split_idx as u64, index as u64]);
    let mut frames = Vec::new();
    for &g in gloss_ids {
        frames.extend(render_gloss_clip(g, spec, &mut rng)?);
    }
    let names: Vec<&str> = gloss_ids.iter().map(|&g| GLOSS_NAMES[g]).collect();
    let mut text_rng = substream(derive_seed(seed, &[split_idx as u64, index as u64]), &[1]);
    let text = derive_text(&names, &spec.text, &mut text_rng)?;
    Ok(SynthSample {
        frames,
        gloss_ids: gloss_ids.to_vec(),
        text,
    })
}

pub fn sample_id(split: &str, index: usize) -> String {
    format!("{split}_{index:04}")
}

/// Writes the corpus under `dir` and returns the number of samples per split.
pub fn gen_corpus(spec: &SynthSpec, seed: u64, dir: &Path) -> Result<BTreeMap<String, usize>> {
    spec.validate()?;
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let mut splits = BTreeMap::new();
    let mut samples = Vec::new();
    let mut counts = BTreeMap::new();
    for (si, split) in SPLITS.iter().enumerate() {
        let plan = plan_split(spec, seed, si);
        let mut ids = Vec::with_capacity(plan.len());
        for (i, gloss_ids) in plan.iter().enumerate() {
            let s = render_sample(spec, seed, si, i, gloss_ids)?;
            let id = sample_id(split, i);
            let file = format!("frames/{id}.msgf");
            write_msgf(&dir.join(&file), &s.frames)?;
            samples.push(SampleEntry {
                id: id.clone(),
                gloss_ids: s.gloss_ids,
                text: s.text,
                frames_file: file,
                t: s.frames.len(),
            });
            ids.push(id);
        }
        counts.insert((*split).to_owned(), ids.len());
        splits.insert((*split).to_owned(), ids);
    }
    let generator = serde_json::json!({ "seed": seed, "spec": spec });
    Manifest {
        version: DATASET_VERSION,
        glosses: spec.gloss_names(),
        splits,
        frame_format: "MSGF".into(),
        samples,
        generator: Some(generator),
    }
    .save(dir)?;
    Ok(counts)
}
