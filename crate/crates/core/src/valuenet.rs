//! Multi-head state-action value network with hand-written reverse-mode
//! gradients.
//!
//! Architecture: an encoder (dense layer on one-hot features, or two conv
//! layers on an RGB image), an optional memory (frame stack of embeddings or
//! an LSTM), then `N` private heads `dense(hidden) -> relu -> dense(|A|)`.
//! Parameters live in one flat vector described by a [`Layout`]; each head's
//! block is contiguous and comes after the shared trunk.
//!
//! Everything is generic over [`Real`] so gradient checks can run in `f64`
//! while training runs in `f32`.

use std::fmt::{self, Debug, Display};
use std::io::{Read, Write};
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::path::Path;
use std::str::FromStr;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis, LinalgScalar};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::Observation;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("input shape mismatch: expected {expected}, got {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub trait Real:
    LinalgScalar + Float + AddAssign + SubAssign + MulAssign + Debug + Display + Default + Send + Sync
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSpec {
    /// Flat feature vector (one-hot window plus inventory channel).
    Features { len: usize },
    /// Channel-major image followed by `extra` raw features (the inventory).
    Image { channels: usize, height: usize, width: usize, extra: usize },
}

impl InputSpec {
    pub fn len(&self) -> usize {
        match *self {
            InputSpec::Features { len } => len,
            InputSpec::Image { channels, height, width, extra } => channels * height * width + extra,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoder {
    Dense { width: usize },
    Conv { channels: [usize; 2], kernels: [usize; 2], strides: [usize; 2] },
}

impl Encoder {
    pub const PAPER_CONV: Encoder = Encoder::Conv { channels: [16, 32], kernels: [8, 4], strides: [8, 1] };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Memory {
    None,
    FrameStack(usize),
    Lstm(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input: InputSpec,
    pub encoder: Encoder,
    pub memory: Memory,
    pub heads: usize,
    pub head_hidden: usize,
    pub actions: usize,
}

impl NetworkSpec {
    /// Dense(128) trunk, frame stack of 4, heads with 128 hidden units.
    pub fn desk_default(input_len: usize, heads: usize, actions: usize) -> NetworkSpec {
        NetworkSpec {
            input: InputSpec::Features { len: input_len },
            encoder: Encoder::Dense { width: 128 },
            memory: Memory::FrameStack(4),
            heads,
            head_hidden: 128,
            actions,
        }
    }

    /// Symbolic input matching an observation.
    pub fn input_for(obs: &Observation) -> InputSpec {
        InputSpec::Features { len: obs.feature_len() }
    }

    /// Image input matching an observation's RGB rendering.
    pub fn image_input_for(obs: &Observation) -> Option<InputSpec> {
        obs.rgb.as_ref().map(|img| InputSpec::Image {
            channels: 3,
            height: img.height,
            width: img.width,
            extra: obs.num_inventory_kinds,
        })
    }

    fn conv_dims(&self) -> Option<ConvDims> {
        let Encoder::Conv { channels, kernels, strides } = self.encoder else { return None };
        let InputSpec::Image { channels: c0, height, width, extra } = self.input else { return None };
        let out = |n: usize, k: usize, s: usize| if n >= k && s > 0 { (n - k) / s + 1 } else { 0 };
        let (h1, w1) = (out(height, kernels[0], strides[0]), out(width, kernels[0], strides[0]));
        let (h2, w2) = (out(h1, kernels[1], strides[1]), out(w1, kernels[1], strides[1]));
        Some(ConvDims { c0, h0: height, w0: width, c1: channels[0], h1, w1, c2: channels[1], h2, w2, k: kernels, s: strides, extra })
    }

    /// Width of one encoder embedding.
    pub fn embed_dim(&self) -> usize {
        match self.encoder {
            Encoder::Dense { width } => width,
            Encoder::Conv { .. } => self.conv_dims().map_or(0, |d| d.c2 * d.h2 * d.w2 + d.extra),
        }
    }

    /// Width of the features the heads see.
    pub fn memory_dim(&self) -> usize {
        match self.memory {
            Memory::None => self.embed_dim(),
            Memory::FrameStack(k) => k * self.embed_dim(),
            Memory::Lstm(h) => h,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidSpec(m.to_string()));
        if self.heads == 0 || self.head_hidden == 0 || self.actions == 0 || self.input.is_empty() {
            return bad("heads, hidden width, actions and input must all be at least 1");
        }
        match (self.encoder, self.input) {
            (Encoder::Dense { width: 0 }, _) => return bad("encoder width must be at least 1"),
            (Encoder::Conv { channels, kernels, strides }, InputSpec::Image { .. }) => {
                if channels.contains(&0) || kernels.contains(&0) || strides.contains(&0) {
                    return bad("conv channels, kernels and strides must be at least 1");
                }
                let d = self.conv_dims().expect("conv with image input");
                if d.h2 == 0 || d.w2 == 0 {
                    return bad("image too small for the conv stack");
                }
            }
            (Encoder::Conv { .. }, InputSpec::Features { .. }) => return bad("conv encoder needs image input"),
            _ => {}
        }
        match self.memory {
            Memory::FrameStack(0) | Memory::Lstm(0) => bad("memory width must be at least 1"),
            _ => Ok(()),
        }
    }

    pub fn layout(&self) -> Layout {
        let mut l = Layout::default();
        let in_len = self.input.len();
        match self.encoder {
            Encoder::Dense { width } => {
                l.push("encoder.w", &[in_len, width]);
                l.push("encoder.b", &[width]);
            }
            Encoder::Conv { .. } => {
                let d = self.conv_dims().expect("validated conv spec");
                l.push("conv1.w", &[d.c1, d.c0, d.k[0], d.k[0]]);
                l.push("conv1.b", &[d.c1]);
                l.push("conv2.w", &[d.c2, d.c1, d.k[1], d.k[1]]);
                l.push("conv2.b", &[d.c2]);
            }
        }
        if let Memory::Lstm(h) = self.memory {
            let e = self.embed_dim();
            l.push("lstm.wx", &[e, 4 * h]);
            l.push("lstm.wh", &[h, 4 * h]);
            l.push("lstm.b", &[4 * h]);
        }
        let d = self.memory_dim();
        for i in 0..self.heads {
            l.push(&format!("head{i}.w1"), &[d, self.head_hidden]);
            l.push(&format!("head{i}.b1"), &[self.head_hidden]);
            l.push(&format!("head{i}.w2"), &[self.head_hidden, self.actions]);
            l.push(&format!("head{i}.b2"), &[self.actions]);
        }
        l
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvDims {
    c0: usize,
    h0: usize,
    w0: usize,
    c1: usize,
    h1: usize,
    w1: usize,
    c2: usize,
    h2: usize,
    w2: usize,
    k: [usize; 2],
    s: [usize; 2],
    extra: usize,
}

impl Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.input {
            InputSpec::Features { len } => writeln!(f, "input = features {len}")?,
            InputSpec::Image { channels, height, width, extra } => {
                writeln!(f, "input = image {channels} {height} {width} {extra}")?
            }
        }
        match self.encoder {
            Encoder::Dense { width } => writeln!(f, "encoder = dense {width}")?,
            Encoder::Conv { channels, kernels, strides } => writeln!(
                f,
                "encoder = conv {} {} {} {} {} {}",
                channels[0], channels[1], kernels[0], kernels[1], strides[0], strides[1]
            )?,
        }
        match self.memory {
            Memory::None => writeln!(f, "memory = none")?,
            Memory::FrameStack(k) => writeln!(f, "memory = framestack {k}")?,
            Memory::Lstm(h) => writeln!(f, "memory = lstm {h}")?,
        }
        writeln!(f, "heads = {}", self.heads)?;
        writeln!(f, "head_hidden = {}", self.head_hidden)?;
        writeln!(f, "actions = {}", self.actions)
    }
}

impl FromStr for NetworkSpec {
    type Err = NetError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let bad = |m: String| NetError::InvalidSpec(m);
        let (mut input, mut encoder, mut memory, mut heads, mut hidden, mut actions) = (None, None, None, None, None, None);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("expected key = value, got {line:?}")))?;
            let words: Vec<&str> = value.split_whitespace().collect();
            let nums = |from: usize| -> Result<Vec<usize>, NetError> {
                words[from.min(words.len())..]
                    .iter()
                    .map(|w| w.parse::<usize>().map_err(|_| bad(format!("not a number: {w:?}"))))
                    .collect()
            };
            let one = || -> Result<usize, NetError> {
                match nums(0)?.as_slice() {
                    [n] => Ok(*n),
                    _ => Err(bad(format!("expected one number in {line:?}"))),
                }
            };
            match (key.trim(), words.first().copied()) {
                ("input", Some("features")) => match nums(1)?.as_slice() {
                    [len] => input = Some(InputSpec::Features { len: *len }),
                    _ => return Err(bad(line.to_string())),
                },
                ("input", Some("image")) => match nums(1)?.as_slice() {
                    [c, h, w, e] => input = Some(InputSpec::Image { channels: *c, height: *h, width: *w, extra: *e }),
                    _ => return Err(bad(line.to_string())),
                },
                ("encoder", Some("dense")) => match nums(1)?.as_slice() {
                    [w] => encoder = Some(Encoder::Dense { width: *w }),
                    _ => return Err(bad(line.to_string())),
                },
                ("encoder", Some("conv")) => match nums(1)?.as_slice() {
                    [c1, c2, k1, k2, s1, s2] => {
                        encoder = Some(Encoder::Conv { channels: [*c1, *c2], kernels: [*k1, *k2], strides: [*s1, *s2] })
                    }
                    _ => return Err(bad(line.to_string())),
                },
                ("memory", Some("none")) => memory = Some(Memory::None),
                ("memory", Some("framestack")) => match nums(1)?.as_slice() {
                    [k] => memory = Some(Memory::FrameStack(*k)),
                    _ => return Err(bad(line.to_string())),
                },
                ("memory", Some("lstm")) => match nums(1)?.as_slice() {
                    [h] => memory = Some(Memory::Lstm(*h)),
                    _ => return Err(bad(line.to_string())),
                },
                ("heads", _) => heads = Some(one()?),
                ("head_hidden", _) => hidden = Some(one()?),
                ("actions", _) => actions = Some(one()?),
                _ => return Err(bad(format!("unrecognised line {line:?}"))),
            }
        }
        let missing = |k: &str| bad(format!("missing `{k}`"));
        let spec = NetworkSpec {
            input: input.ok_or_else(|| missing("input"))?,
            encoder: encoder.ok_or_else(|| missing("encoder"))?,
            memory: memory.ok_or_else(|| missing("memory"))?,
            heads: heads.ok_or_else(|| missing("heads"))?,
            head_hidden: hidden.ok_or_else(|| missing("head_hidden"))?,
            actions: actions.ok_or_else(|| missing("actions"))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// One named parameter block inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Block {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Layout {
    pub blocks: Vec<Block>,
    pub len: usize,
}

impl Layout {
    fn push(&mut self, name: &str, shape: &[usize]) {
        let block = Block { name: name.to_string(), offset: self.len, shape: shape.to_vec() };
        self.len += block.len();
        self.blocks.push(block);
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    fn offset(&self, name: &str) -> usize {
        self.block(name).unwrap_or_else(|| panic!("missing block {name}")).offset
    }
}

/// Network input for one time step.
#[derive(Debug, Clone, PartialEq)]
pub enum Features<T> {
    /// Indices of the entries equal to one; every other entry is zero.
    Sparse(Vec<u32>),
    Dense(Vec<T>),
}

impl<T: Real> Features<T> {
    /// Sparse one-hot features for symbolic input, or the image plus inventory
    /// channel for image input.
    pub fn from_observation(obs: &Observation, input: &InputSpec) -> Features<T> {
        match input {
            InputSpec::Features { .. } => Features::Sparse(obs.active_features()),
            InputSpec::Image { .. } => {
                let rgb = obs.rgb.as_ref().expect("image input needs an RGB observation");
                let mut v: Vec<T> = rgb.to_chw().into_iter().map(|x| T::of(f64::from(x))).collect();
                v.extend(obs.inventory_channel().into_iter().map(|x| T::of(f64::from(x))));
                Features::Dense(v)
            }
        }
    }

    fn check(&self, len: usize) -> Result<(), NetError> {
        match self {
            Features::Sparse(idx) => match idx.iter().find(|&&i| i as usize >= len) {
                Some(&i) => Err(NetError::ShapeMismatch { expected: len, found: i as usize + 1 }),
                None => Ok(()),
            },
            Features::Dense(v) if v.len() != len => Err(NetError::ShapeMismatch { expected: len, found: v.len() }),
            Features::Dense(_) => Ok(()),
        }
    }
}

/// Per-episode recurrent state threaded through acting.
#[derive(Debug, Clone, PartialEq)]
pub enum MemoryState<T> {
    None,
    /// The last `k` embeddings, oldest first; zeros before the episode start.
    Frames(Vec<Vec<T>>),
    Lstm { h: Vec<T>, c: Vec<T> },
}

/// A contiguous run of time steps fed through the network.
///
/// Outputs are produced for positions `first_output..inputs.len()`. For the
/// frame stack, steps before position 0 count as zeros, so a sequence must
/// either start at the episode start or include `k - 1` steps of context.
/// For the LSTM, `initial` is the state entering position 0 (zeros if absent);
/// gradients do not flow into it.
#[derive(Debug, Clone)]
pub struct Sequence<T> {
    pub inputs: Vec<Features<T>>,
    pub first_output: usize,
    pub initial: Option<(Vec<T>, Vec<T>)>,
}

impl<T> Sequence<T> {
    pub fn outputs(&self) -> usize {
        self.inputs.len().saturating_sub(self.first_output)
    }
}

/// Which heads to evaluate for each output row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadSel {
    All,
    /// Exactly one head per output row.
    PerRow(Vec<usize>),
}

#[derive(Debug, Clone)]
struct HeadTape<T> {
    /// Output rows evaluated by this head (`None` = all rows).
    rows: Option<Vec<usize>>,
    input: Option<Array2<T>>,
    hidden: Array2<T>,
    q: Array2<T>,
}

/// Activations recorded by [`ValueNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape<'a, T> {
    seqs: &'a [Sequence<T>],
    seq_start: Vec<usize>,
    /// Output row -> (sequence, position).
    out_pos: Vec<(usize, usize)>,
    embed: Array2<T>,
    conv1: Option<Array2<T>>,
    /// Per position: i, f, g, o, c, tanh(c), h.
    lstm: Option<Array2<T>>,
    x: Array2<T>,
    heads: Vec<Option<HeadTape<T>>>,
}

impl<T: Real> Tape<'_, T> {
    pub fn rows(&self) -> usize {
        self.out_pos.len()
    }

    /// Q-values of head `h` as `[rows evaluated by h] x actions`.
    pub fn q(&self, h: usize) -> Option<&Array2<T>> {
        self.heads[h].as_ref().map(|t| &t.q)
    }

    /// Output rows evaluated by head `h` (all rows when `None`).
    pub fn head_rows(&self, h: usize) -> Option<&[usize]> {
        self.heads[h].as_ref().and_then(|t| t.rows.as_deref())
    }

    pub fn evaluated(&self, h: usize) -> bool {
        self.heads[h].is_some()
    }

    /// Q-values of every evaluated head, row by row: `[rows x actions]` per head.
    pub fn q_for_row(&self, h: usize, row: usize) -> Option<Vec<T>> {
        let t = self.heads[h].as_ref()?;
        let r = match &t.rows {
            None => row,
            Some(rows) => rows.binary_search(&row).ok()?,
        };
        Some(t.q.row(r).to_vec())
    }
}

#[derive(Debug, Clone, Copy)]
struct HeadIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// A network architecture with precomputed parameter offsets.
#[derive(Debug, Clone)]
pub struct ValueNet {
    pub spec: NetworkSpec,
    pub layout: Layout,
    heads: Vec<HeadIdx>,
    embed: usize,
    mem: usize,
}

fn view<T>(p: &[T], off: usize, rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), &p[off..off + rows * cols]).expect("block shape")
}

fn view_mut<T>(p: &mut [T], off: usize, rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((rows, cols), &mut p[off..off + rows * cols]).expect("block shape")
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl ValueNet {
    pub fn new(spec: NetworkSpec) -> Result<ValueNet, NetError> {
        spec.validate()?;
        let layout = spec.layout();
        let heads = (0..spec.heads)
            .map(|i| HeadIdx {
                w1: layout.offset(&format!("head{i}.w1")),
                b1: layout.offset(&format!("head{i}.b1")),
                w2: layout.offset(&format!("head{i}.w2")),
                b2: layout.offset(&format!("head{i}.b2")),
            })
            .collect();
        Ok(ValueNet { embed: spec.embed_dim(), mem: spec.memory_dim(), spec, layout, heads })
    }

    pub fn num_params(&self) -> usize {
        self.layout.len
    }

    /// Parameter range owned by head `h` alone.
    pub fn head_range(&self, h: usize) -> std::ops::Range<usize> {
        let start = self.heads[h].w1;
        let end = if h + 1 < self.heads.len() { self.heads[h + 1].w1 } else { self.layout.len };
        start..end
    }

    /// Parameter range shared by all heads (encoder and memory).
    pub fn trunk_range(&self) -> std::ops::Range<usize> {
        0..self.heads[0].w1
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init<T: Real>(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![T::zero(); self.layout.len];
        for b in &self.layout.blocks {
            if b.shape.len() < 2 {
                continue;
            }
            let fan_in = if b.shape.len() == 4 { b.shape[1] * b.shape[2] * b.shape[3] } else { b.shape[0] };
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for v in &mut p[b.range()] {
                *v = T::of(rng.random_range(-bound..bound));
            }
        }
        p
    }

    pub fn zeros<T: Real>(&self) -> Vec<T> {
        vec![T::zero(); self.layout.len]
    }

    pub fn initial_state<T: Real>(&self) -> MemoryState<T> {
        match self.spec.memory {
            Memory::None => MemoryState::None,
            Memory::FrameStack(k) => MemoryState::Frames(vec![vec![T::zero(); self.embed]; k]),
            Memory::Lstm(h) => MemoryState::Lstm { h: vec![T::zero(); h], c: vec![T::zero(); h] },
        }
    }

    fn encode<T: Real>(&self, p: &[T], f: &Features<T>, out: &mut [T], conv1: Option<&mut [T]>) {
        match self.spec.encoder {
            Encoder::Dense { width } => {
                let w = self.layout.blocks[0].offset;
                let b = self.layout.blocks[1].offset;
                out.copy_from_slice(&p[b..b + width]);
                match f {
                    Features::Sparse(idx) => {
                        for &i in idx {
                            let row = &p[w + i as usize * width..w + (i as usize + 1) * width];
                            for (o, &r) in out.iter_mut().zip(row) {
                                *o += r;
                            }
                        }
                    }
                    Features::Dense(x) => {
                        for (i, &xi) in x.iter().enumerate() {
                            if xi != T::zero() {
                                let row = &p[w + i * width..w + (i + 1) * width];
                                for (o, &r) in out.iter_mut().zip(row) {
                                    *o += xi * r;
                                }
                            }
                        }
                    }
                }
                for o in out.iter_mut() {
                    *o = o.max(T::zero());
                }
            }
            Encoder::Conv { .. } => {
                let d = self.spec.conv_dims().expect("conv dims");
                let x = match f {
                    Features::Dense(x) => x,
                    Features::Sparse(_) => panic!("conv encoder needs dense image features"),
                };
                let mut local = Vec::new();
                let a1 = match conv1 {
                    Some(buf) => buf,
                    None => {
                        local.resize(d.c1 * d.h1 * d.w1, T::zero());
                        &mut local[..]
                    }
                };
                let (w1, b1, w2, b2) = (
                    self.layout.blocks[0].offset,
                    self.layout.blocks[1].offset,
                    self.layout.blocks[2].offset,
                    self.layout.blocks[3].offset,
                );
                conv_forward(p, w1, b1, x, (d.c0, d.h0, d.w0), (d.c1, d.h1, d.w1), d.k[0], d.s[0], a1);
                let n2 = d.c2 * d.h2 * d.w2;
                conv_forward(p, w2, b2, a1, (d.c1, d.h1, d.w1), (d.c2, d.h2, d.w2), d.k[1], d.s[1], &mut out[..n2]);
                out[n2..].copy_from_slice(&x[d.c0 * d.h0 * d.w0..]);
            }
        }
    }

    fn heads_input_from_frames<T: Real>(frames: &[Vec<T>]) -> Vec<T> {
        frames.iter().flat_map(|f| f.iter().copied()).collect()
    }

    fn lstm_step<T: Real>(&self, p: &[T], e: &[T], h_prev: &[T], c_prev: &[T], out: &mut [T]) {
        let Memory::Lstm(hd) = self.spec.memory else { unreachable!() };
        let wx = self.layout.offset("lstm.wx");
        let wh = self.layout.offset("lstm.wh");
        let b = self.layout.offset("lstm.b");
        let mut g: Vec<T> = p[b..b + 4 * hd].to_vec();
        for (i, &ei) in e.iter().enumerate() {
            if ei != T::zero() {
                for (gj, &w) in g.iter_mut().zip(&p[wx + i * 4 * hd..wx + (i + 1) * 4 * hd]) {
                    *gj += ei * w;
                }
            }
        }
        for (i, &hi) in h_prev.iter().enumerate() {
            if hi != T::zero() {
                for (gj, &w) in g.iter_mut().zip(&p[wh + i * 4 * hd..wh + (i + 1) * 4 * hd]) {
                    *gj += hi * w;
                }
            }
        }
        for j in 0..hd {
            let (i, f, gg, o) = (sigmoid(g[j]), sigmoid(g[hd + j]), g[2 * hd + j].tanh(), sigmoid(g[3 * hd + j]));
            let c = f * c_prev[j] + i * gg;
            let tc = c.tanh();
            out[j] = i;
            out[hd + j] = f;
            out[2 * hd + j] = gg;
            out[3 * hd + j] = o;
            out[4 * hd + j] = c;
            out[5 * hd + j] = tc;
            out[6 * hd + j] = o * tc;
        }
    }

    /// Runs the memory over `inputs` without recording anything, returning the
    /// state after the last one. Used for LSTM burn-in.
    pub fn burn_in<T: Real>(&self, p: &[T], inputs: &[Features<T>]) -> MemoryState<T> {
        let mut state = self.initial_state();
        for f in inputs {
            self.advance(p, &mut state, f);
        }
        state
    }

    /// Feeds one step into the memory and returns the heads' input features.
    fn advance<T: Real>(&self, p: &[T], state: &mut MemoryState<T>, f: &Features<T>) -> Vec<T> {
        let mut e = vec![T::zero(); self.embed];
        self.encode(p, f, &mut e, None);
        match state {
            MemoryState::None => e,
            MemoryState::Frames(frames) => {
                frames.remove(0);
                frames.push(e);
                Self::heads_input_from_frames(frames)
            }
            MemoryState::Lstm { h, c } => {
                let hd = h.len();
                let mut out = vec![T::zero(); 7 * hd];
                self.lstm_step(p, &e, h, c, &mut out);
                c.copy_from_slice(&out[4 * hd..5 * hd]);
                h.copy_from_slice(&out[6 * hd..]);
                h.clone()
            }
        }
    }

    fn head_q<T: Real>(&self, p: &[T], h: usize, x: &[T]) -> Vec<T> {
        let idx = self.heads[h];
        let (d, hid, a) = (self.mem, self.spec.head_hidden, self.spec.actions);
        let mut hidden: Vec<T> = p[idx.b1..idx.b1 + hid].to_vec();
        for (i, &xi) in x.iter().enumerate().take(d) {
            if xi != T::zero() {
                for (o, &w) in hidden.iter_mut().zip(&p[idx.w1 + i * hid..idx.w1 + (i + 1) * hid]) {
                    *o += xi * w;
                }
            }
        }
        let mut q: Vec<T> = p[idx.b2..idx.b2 + a].to_vec();
        for (j, &hj) in hidden.iter().enumerate() {
            if hj > T::zero() {
                for (o, &w) in q.iter_mut().zip(&p[idx.w2 + j * a..idx.w2 + (j + 1) * a]) {
                    *o += hj * w;
                }
            }
        }
        q
    }

    /// One acting step: advances `state` and returns the Q-values of `head`.
    pub fn act<T: Real>(&self, p: &[T], state: &mut MemoryState<T>, f: &Features<T>, head: usize) -> Vec<T> {
        let x = self.advance(p, state, f);
        self.head_q(p, head, &x)
    }

    /// One acting step returning every head's Q-values (`heads x actions`).
    pub fn act_all<T: Real>(&self, p: &[T], state: &mut MemoryState<T>, f: &Features<T>) -> Array2<T> {
        let x = self.advance(p, state, f);
        let mut q = Array2::zeros((self.spec.heads, self.spec.actions));
        for h in 0..self.spec.heads {
            q.row_mut(h).assign(&ndarray::ArrayView1::from(&self.head_q(p, h, &x)));
        }
        q
    }

    /// Batched forward pass over several sequences, recording activations.
    pub fn forward<'a, T: Real>(&self, p: &[T], seqs: &'a [Sequence<T>], sel: &HeadSel) -> Result<Tape<'a, T>, NetError> {
        if p.len() != self.layout.len {
            return Err(NetError::ShapeMismatch { expected: self.layout.len, found: p.len() });
        }
        let in_len = self.spec.input.len();
        let mut seq_start = Vec::with_capacity(seqs.len());
        let mut total = 0;
        let mut out_pos = Vec::new();
        for (si, s) in seqs.iter().enumerate() {
            for f in &s.inputs {
                f.check(in_len)?;
            }
            seq_start.push(total);
            total += s.inputs.len();
            out_pos.extend((s.first_output..s.inputs.len()).map(|t| (si, t)));
        }
        let rows = out_pos.len();
        if let HeadSel::PerRow(heads) = sel {
            if heads.len() != rows {
                return Err(NetError::ShapeMismatch { expected: rows, found: heads.len() });
            }
            if let Some(&h) = heads.iter().find(|&&h| h >= self.spec.heads) {
                return Err(NetError::ShapeMismatch { expected: self.spec.heads, found: h + 1 });
            }
        }

        // Encoder, one row per position.
        let mut embed = Array2::zeros((total, self.embed));
        let mut conv1 = self.spec.conv_dims().map(|d| Array2::zeros((total, d.c1 * d.h1 * d.w1)));
        for (si, s) in seqs.iter().enumerate() {
            for (t, f) in s.inputs.iter().enumerate() {
                let pos = seq_start[si] + t;
                let out = embed.row_mut(pos).into_slice().expect("contiguous row");
                let c1 = conv1.as_mut().map(|c| c.row_mut(pos).into_slice().expect("contiguous row"));
                self.encode(p, f, out, c1);
            }
        }

        // Memory, producing the heads' input rows.
        let mut x = Array2::zeros((rows, self.mem));
        let mut lstm = None;
        match self.spec.memory {
            Memory::None => {
                for (r, &(si, t)) in out_pos.iter().enumerate() {
                    x.row_mut(r).assign(&embed.row(seq_start[si] + t));
                }
            }
            Memory::FrameStack(k) => {
                let e = self.embed;
                for (r, &(si, t)) in out_pos.iter().enumerate() {
                    for j in 0..k {
                        if let Some(src) = (t + j + 1).checked_sub(k) {
                            x.slice_mut(s![r, j * e..(j + 1) * e]).assign(&embed.row(seq_start[si] + src));
                        }
                    }
                }
            }
            Memory::Lstm(hd) => {
                let mut acts = Array2::zeros((total, 7 * hd));
                for (si, s) in seqs.iter().enumerate() {
                    let (mut h, mut c) = s.initial.clone().unwrap_or((vec![T::zero(); hd], vec![T::zero(); hd]));
                    for t in 0..s.inputs.len() {
                        let pos = seq_start[si] + t;
                        let mut out = vec![T::zero(); 7 * hd];
                        self.lstm_step(p, embed.row(pos).as_slice().expect("contiguous"), &h, &c, &mut out);
                        c.copy_from_slice(&out[4 * hd..5 * hd]);
                        h.copy_from_slice(&out[6 * hd..]);
                        acts.row_mut(pos).assign(&ndarray::ArrayView1::from(&out));
                    }
                }
                for (r, &(si, t)) in out_pos.iter().enumerate() {
                    x.row_mut(r).assign(&acts.slice(s![seq_start[si] + t, 6 * hd..]));
                }
                lstm = Some(acts);
            }
        }

        // Heads.
        let mut heads = Vec::with_capacity(self.spec.heads);
        for h in 0..self.spec.heads {
            let rows_h: Option<Vec<usize>> = match sel {
                HeadSel::All => None,
                HeadSel::PerRow(hs) => {
                    let r: Vec<usize> = hs.iter().enumerate().filter(|(_, &x)| x == h).map(|(i, _)| i).collect();
                    if r.is_empty() {
                        heads.push(None);
                        continue;
                    }
                    Some(r)
                }
            };
            let input = rows_h.as_ref().map(|r| x.select(Axis(0), r));
            let xin = input.as_ref().map_or(x.view(), |a| a.view());
            let idx = self.heads[h];
            let (hid, a) = (self.spec.head_hidden, self.spec.actions);
            let n = xin.nrows();
            let mut hidden = Array2::zeros((n, hid));
            for mut row in hidden.rows_mut() {
                row.assign(&ndarray::ArrayView1::from(&p[idx.b1..idx.b1 + hid]));
            }
            general_mat_mul(T::one(), &xin, &view(p, idx.w1, self.mem, hid), T::one(), &mut hidden);
            hidden.mapv_inplace(|v| v.max(T::zero()));
            let mut q = Array2::zeros((n, a));
            for mut row in q.rows_mut() {
                row.assign(&ndarray::ArrayView1::from(&p[idx.b2..idx.b2 + a]));
            }
            general_mat_mul(T::one(), &hidden, &view(p, idx.w2, hid, a), T::one(), &mut q);
            heads.push(Some(HeadTape { rows: rows_h, input, hidden, q }));
        }
        Ok(Tape { seqs, seq_start, out_pos, embed, conv1, lstm, x, heads })
    }

    /// Gradient of `sum(dq[h] * q[h])` over the evaluated heads, i.e. the
    /// backward pass given the loss gradient with respect to each head's Q.
    /// `dq[h]` must match the shape of `tape.q(h)`; `None` means zero.
    pub fn backward<T: Real>(&self, p: &[T], tape: &Tape<'_, T>, dq: &[Option<Array2<T>>]) -> Vec<T> {
        let mut g = vec![T::zero(); self.layout.len];
        let rows = tape.rows();
        let (hid, a) = (self.spec.head_hidden, self.spec.actions);
        let mut dx: Array2<T> = Array2::zeros((rows, self.mem));
        for (h, d) in dq.iter().enumerate() {
            let (Some(d), Some(t)) = (d, tape.heads[h].as_ref()) else { continue };
            let idx = self.heads[h];
            let xin = t.input.as_ref().map_or(tape.x.view(), |a| a.view());
            general_mat_mul(T::one(), &t.hidden.t(), d, T::one(), &mut view_mut(&mut g, idx.w2, hid, a));
            for (gb, col) in g[idx.b2..idx.b2 + a].iter_mut().zip(d.columns()) {
                *gb += col.sum();
            }
            let mut dh = Array2::zeros((t.hidden.nrows(), hid));
            general_mat_mul(T::one(), d, &view(p, idx.w2, hid, a).t(), T::zero(), &mut dh);
            ndarray::Zip::from(&mut dh).and(&t.hidden).for_each(|g, &hv| {
                if hv <= T::zero() {
                    *g = T::zero();
                }
            });
            general_mat_mul(T::one(), &xin.t(), &dh, T::one(), &mut view_mut(&mut g, idx.w1, self.mem, hid));
            for (gb, col) in g[idx.b1..idx.b1 + hid].iter_mut().zip(dh.columns()) {
                *gb += col.sum();
            }
            match &t.rows {
                None => general_mat_mul(T::one(), &dh, &view(p, idx.w1, self.mem, hid).t(), T::one(), &mut dx),
                Some(r) => {
                    let mut dxh = Array2::zeros((r.len(), self.mem));
                    general_mat_mul(T::one(), &dh, &view(p, idx.w1, self.mem, hid).t(), T::zero(), &mut dxh);
                    for (k, &row) in r.iter().enumerate() {
                        let mut target = dx.row_mut(row);
                        target += &dxh.row(k);
                    }
                }
            }
        }

        // Memory backward into per-position embedding gradients.
        let total = tape.embed.nrows();
        let mut de: Array2<T> = Array2::zeros((total, self.embed));
        match self.spec.memory {
            Memory::None => {
                for (r, &(si, t)) in tape.out_pos.iter().enumerate() {
                    let mut row = de.row_mut(tape.seq_start[si] + t);
                    row += &dx.row(r);
                }
            }
            Memory::FrameStack(k) => {
                let e = self.embed;
                for (r, &(si, t)) in tape.out_pos.iter().enumerate() {
                    for j in 0..k {
                        if let Some(src) = (t + j + 1).checked_sub(k) {
                            let mut row = de.row_mut(tape.seq_start[si] + src);
                            row += &dx.slice(s![r, j * e..(j + 1) * e]);
                        }
                    }
                }
            }
            Memory::Lstm(hd) => self.lstm_backward(p, tape, &dx, &mut de, &mut g, hd),
        }

        // Encoder backward.
        match self.spec.encoder {
            Encoder::Dense { width } => {
                let w = self.layout.blocks[0].offset;
                let b = self.layout.blocks[1].offset;
                for (si, s) in tape.seqs.iter().enumerate() {
                    for (t, f) in s.inputs.iter().enumerate() {
                        let pos = tape.seq_start[si] + t;
                        let dz: Vec<T> = de
                            .row(pos)
                            .iter()
                            .zip(tape.embed.row(pos))
                            .map(|(&d, &e)| if e > T::zero() { d } else { T::zero() })
                            .collect();
                        if dz.iter().all(|&v| v == T::zero()) {
                            continue;
                        }
                        for (gb, &d) in g[b..b + width].iter_mut().zip(&dz) {
                            *gb += d;
                        }
                        match f {
                            Features::Sparse(idx) => {
                                for &i in idx {
                                    let row = &mut g[w + i as usize * width..w + (i as usize + 1) * width];
                                    for (gw, &d) in row.iter_mut().zip(&dz) {
                                        *gw += d;
                                    }
                                }
                            }
                            Features::Dense(x) => {
                                for (i, &xi) in x.iter().enumerate() {
                                    if xi != T::zero() {
                                        let row = &mut g[w + i * width..w + (i + 1) * width];
                                        for (gw, &d) in row.iter_mut().zip(&dz) {
                                            *gw += xi * d;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Encoder::Conv { .. } => {
                let d = self.spec.conv_dims().expect("conv dims");
                let conv1 = tape.conv1.as_ref().expect("conv activations");
                let (w1, b1, w2, b2) = (
                    self.layout.blocks[0].offset,
                    self.layout.blocks[1].offset,
                    self.layout.blocks[2].offset,
                    self.layout.blocks[3].offset,
                );
                let n2 = d.c2 * d.h2 * d.w2;
                for (si, s) in tape.seqs.iter().enumerate() {
                    for (t, f) in s.inputs.iter().enumerate() {
                        let pos = tape.seq_start[si] + t;
                        let Features::Dense(x) = f else { unreachable!() };
                        let a2 = tape.embed.row(pos);
                        let dz2: Vec<T> =
                            (0..n2).map(|i| if a2[i] > T::zero() { de[[pos, i]] } else { T::zero() }).collect();
                        let a1 = conv1.row(pos);
                        let a1 = a1.as_slice().expect("contiguous");
                        let mut da1 = vec![T::zero(); a1.len()];
                        conv_backward(p, &mut g, w2, b2, a1, (d.c1, d.h1, d.w1), (d.c2, d.h2, d.w2), d.k[1], d.s[1], &dz2, Some(&mut da1));
                        for (dv, &av) in da1.iter_mut().zip(a1) {
                            if av <= T::zero() {
                                *dv = T::zero();
                            }
                        }
                        conv_backward(p, &mut g, w1, b1, x, (d.c0, d.h0, d.w0), (d.c1, d.h1, d.w1), d.k[0], d.s[0], &da1, None);
                    }
                }
            }
        }
        g
    }

    fn lstm_backward<T: Real>(&self, p: &[T], tape: &Tape<'_, T>, dx: &Array2<T>, de: &mut Array2<T>, g: &mut [T], hd: usize) {
        let acts = tape.lstm.as_ref().expect("lstm activations");
        let wx = self.layout.offset("lstm.wx");
        let wh = self.layout.offset("lstm.wh");
        let b = self.layout.offset("lstm.b");
        let e = self.embed;
        // dh contributions from the heads, per position.
        let mut dh_out: Array2<T> = Array2::zeros((acts.nrows(), hd));
        for (r, &(si, t)) in tape.out_pos.iter().enumerate() {
            let mut row = dh_out.row_mut(tape.seq_start[si] + t);
            row += &dx.row(r);
        }
        for (si, s) in tape.seqs.iter().enumerate() {
            let (h0, c0) = s.initial.clone().unwrap_or((vec![T::zero(); hd], vec![T::zero(); hd]));
            let mut dh_next = vec![T::zero(); hd];
            let mut dc_next = vec![T::zero(); hd];
            for t in (0..s.inputs.len()).rev() {
                let pos = tape.seq_start[si] + t;
                let a = acts.row(pos);
                let (h_prev, c_prev): (Vec<T>, Vec<T>) = if t == 0 {
                    (h0.clone(), c0.clone())
                } else {
                    let prev = acts.row(pos - 1);
                    (prev.slice(s![6 * hd..]).to_vec(), prev.slice(s![4 * hd..5 * hd]).to_vec())
                };
                let mut dgate = vec![T::zero(); 4 * hd];
                for j in 0..hd {
                    let (i, f, gg, o, tc) = (a[j], a[hd + j], a[2 * hd + j], a[3 * hd + j], a[5 * hd + j]);
                    let dh = dh_out[[pos, j]] + dh_next[j];
                    let dc = dh * o * (T::one() - tc * tc) + dc_next[j];
                    let d_o = dh * tc;
                    dgate[j] = dc * gg * i * (T::one() - i);
                    dgate[hd + j] = dc * c_prev[j] * f * (T::one() - f);
                    dgate[2 * hd + j] = dc * i * (T::one() - gg * gg);
                    dgate[3 * hd + j] = d_o * o * (T::one() - o);
                    dc_next[j] = dc * f;
                }
                for (gb, &d) in g[b..b + 4 * hd].iter_mut().zip(&dgate) {
                    *gb += d;
                }
                let erow = tape.embed.row(pos);
                for (k, &ek) in erow.iter().enumerate() {
                    if ek != T::zero() {
                        for (gw, &d) in g[wx + k * 4 * hd..wx + (k + 1) * 4 * hd].iter_mut().zip(&dgate) {
                            *gw += ek * d;
                        }
                    }
                }
                for (k, &hk) in h_prev.iter().enumerate() {
                    if hk != T::zero() {
                        for (gw, &d) in g[wh + k * 4 * hd..wh + (k + 1) * 4 * hd].iter_mut().zip(&dgate) {
                            *gw += hk * d;
                        }
                    }
                }
                for k in 0..e {
                    let row = &p[wx + k * 4 * hd..wx + (k + 1) * 4 * hd];
                    de[[pos, k]] += row.iter().zip(&dgate).fold(T::zero(), |acc, (&w, &d)| acc + w * d);
                }
                for (k, dn) in dh_next.iter_mut().enumerate() {
                    let row = &p[wh + k * 4 * hd..wh + (k + 1) * 4 * hd];
                    *dn = row.iter().zip(&dgate).fold(T::zero(), |acc, (&w, &d)| acc + w * d);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Real>(
    p: &[T],
    w: usize,
    b: usize,
    x: &[T],
    (ci, hi, wi): (usize, usize, usize),
    (co, ho, wo): (usize, usize, usize),
    k: usize,
    stride: usize,
    out: &mut [T],
) {
    for o in 0..co {
        for y in 0..ho {
            for xo in 0..wo {
                let mut acc = p[b + o];
                for c in 0..ci {
                    for ky in 0..k {
                        let wrow = w + ((o * ci + c) * k + ky) * k;
                        let xrow = (c * hi + y * stride + ky) * wi + xo * stride;
                        for kx in 0..k {
                            acc += p[wrow + kx] * x[xrow + kx];
                        }
                    }
                }
                out[(o * ho + y) * wo + xo] = acc.max(T::zero());
            }
        }
    }
}

/// Accumulates weight/bias gradients for one conv layer given the gradient
/// `dz` of its pre-activation output, and optionally the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    p: &[T],
    g: &mut [T],
    w: usize,
    b: usize,
    x: &[T],
    (ci, hi, wi): (usize, usize, usize),
    (co, ho, wo): (usize, usize, usize),
    k: usize,
    stride: usize,
    dz: &[T],
    mut dx: Option<&mut [T]>,
) {
    for o in 0..co {
        for y in 0..ho {
            for xo in 0..wo {
                let d = dz[(o * ho + y) * wo + xo];
                if d == T::zero() {
                    continue;
                }
                g[b + o] += d;
                for c in 0..ci {
                    for ky in 0..k {
                        let wrow = w + ((o * ci + c) * k + ky) * k;
                        let xrow = (c * hi + y * stride + ky) * wi + xo * stride;
                        for kx in 0..k {
                            g[wrow + kx] += d * x[xrow + kx];
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[xrow + kx] += d * p[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_finite<T: Real>(grad: &[T]) -> Result<(), NetError> {
    match grad.iter().position(|g| !g.is_finite()) {
        Some(index) => Err(NetError::NonFiniteGradient { index }),
        None => Ok(()),
    }
}

/// Plain gradient descent: `p -= lr * g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step<T: Real>(&self, params: &mut [T], grad: &[T]) -> Result<(), NetError> {
        if params.len() != grad.len() {
            return Err(NetError::ShapeMismatch { expected: params.len(), found: grad.len() });
        }
        check_finite(grad)?;
        let lr = T::of(self.lr);
        for (p, &g) in params.iter_mut().zip(grad) {
            *p -= lr * g;
        }
        Ok(())
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) -> Result<(), NetError> {
        if params.len() != grad.len() || grad.len() != self.m.len() {
            return Err(NetError::ShapeMismatch { expected: self.m.len(), found: grad.len() });
        }
        check_finite(grad)?;
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ob1, ob2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        // Bias corrections folded into the step size and the second moment.
        let step = T::of(self.lr / (1.0 - self.beta1.powi(self.t)));
        let inv_c2 = T::of(1.0 / (1.0 - self.beta2.powi(self.t)));
        let (eps, tiny, zero) = (T::of(self.eps), T::min_positive_value(), T::zero());
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            let mt = b1 * *m + ob1 * g;
            let vt = b2 * *v + ob2 * g * g;
            // Moments of idle parameters decay geometrically; subnormals are very slow.
            let mt = if mt.abs() < tiny { zero } else { mt };
            let vt = if vt < tiny { zero } else { vt };
            *m = mt;
            *v = vt;
            *p -= step * mt / ((vt * inv_c2).sqrt() + eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetSync {
    /// Copy the online parameters every `every` learner steps.
    Hard { every: usize },
    /// Polyak averaging with rate `tau` after every learner step.
    Soft { tau: f64 },
}

impl Default for TargetSync {
    fn default() -> Self {
        TargetSync::Hard { every: 400 }
    }
}

/// Applies the sync rule after learner step number `step` (1-based).
/// Returns whether the target changed.
pub fn sync_target<T: Real>(online: &[T], target: &mut [T], mode: TargetSync, step: usize) -> bool {
    match mode {
        TargetSync::Hard { every } => {
            if every > 0 && step.is_multiple_of(every) {
                target.copy_from_slice(online);
                true
            } else {
                false
            }
        }
        TargetSync::Soft { tau } => {
            if tau == 0.0 {
                return false;
            }
            if tau == 1.0 {
                target.copy_from_slice(online);
                return true;
            }
            let (tau, keep) = (T::of(tau), T::of(1.0 - tau));
            for (t, &o) in target.iter_mut().zip(online) {
                *t = keep * *t + tau * o;
            }
            true
        }
    }
}

const MAGIC: &[u8; 4] = b"DTEQ";
const VERSION: u32 = 1;

/// Writes a versioned binary checkpoint: magic, version, spec text, block
/// layout, then little-endian `f32` values.
pub fn save_checkpoint(path: &Path, spec: &NetworkSpec, params: &[f32]) -> Result<(), NetError> {
    let io = |source| NetError::Io { path: path.display().to_string(), source };
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let text = spec.to_string();
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    let layout = spec.layout();
    buf.extend_from_slice(&(layout.blocks.len() as u32).to_le_bytes());
    for b in &layout.blocks {
        buf.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(b.name.as_bytes());
        buf.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
        for &d in &b.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkSpec, Vec<f32>), NetError> {
    let io = |source| NetError::Io { path: path.display().to_string(), source };
    let bad = |m: &str| NetError::Checkpoint { path: path.display().to_string(), message: m.to_string() };
    let mut data = Vec::new();
    std::fs::File::open(path).map_err(io)?.read_to_end(&mut data).map_err(io)?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8], NetError> {
        let s = data.get(at..at + n).ok_or_else(|| bad("truncated file"))?;
        at += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let u64_of = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
    if u32_of(take(4)?) != VERSION {
        return Err(bad("unsupported version"));
    }
    let n = u32_of(take(4)?) as usize;
    let text = String::from_utf8(take(n)?.to_vec()).map_err(|_| bad("spec is not UTF-8"))?;
    let spec: NetworkSpec = text.parse()?;
    let blocks = u32_of(take(4)?) as usize;
    let mut layout = Layout::default();
    for _ in 0..blocks {
        let n = u32_of(take(4)?) as usize;
        let name = String::from_utf8(take(n)?.to_vec()).map_err(|_| bad("block name is not UTF-8"))?;
        let dims = u32_of(take(4)?) as usize;
        let mut shape = Vec::with_capacity(dims);
        for _ in 0..dims {
            shape.push(u64_of(take(8)?) as usize);
        }
        layout.push(&name, &shape);
    }
    if layout != spec.layout() {
        return Err(bad("layout does not match the stored spec"));
    }
    let len = u64_of(take(8)?) as usize;
    if len != layout.len {
        return Err(bad("value count does not match layout"));
    }
    let mut params = Vec::with_capacity(len);
    for _ in 0..len {
        params.push(f32::from_le_bytes(take(4)?.try_into().expect("4 bytes")));
    }
    Ok((spec, params))
}
