//! Recurrent stacked hourglass network.
//!
//! Two hourglasses run in sequence; the first head's output is concatenated
//! with the input frame to feed the second. Contracting and expanding paths
//! use single 3x3 convolutions (64 outputs in the reference setup) followed
//! by ReLU; the skip connection at every level passes through a ConvGRU that
//! carries hidden state across video frames. No normalization layers or
//! dropout anywhere. Heads are 1x1 convolutions without nonlinearity.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::optim::he_init;
use crate::tape::{PadMode, Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// d-dimensional per-pixel embeddings (cosine loss).
    Embeddings,
    /// Raw class logits (softmax cross-entropy).
    ClassLogits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Hourglass depth; one ConvGRU site per level per stack.
    pub levels: usize,
    /// Feature channels of every path convolution and GRU.
    pub channels: usize,
    /// Spatial kernel extent of path and gate convolutions.
    pub kernel: usize,
    /// Number of chained hourglasses.
    pub stacks: usize,
    /// Embedding dimension d of the heads in embedding mode.
    pub embedding_dim: usize,
    /// `false` replaces every ConvGRU by a plain convolution of equal
    /// output count.
    pub recurrent: bool,
    pub head_mode: HeadMode,
    /// Classes of the semantic head; only meaningful for `ClassLogits`.
    pub num_classes: Option<usize>,
    /// Channels of the input frames (1 for grayscale).
    pub in_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            levels: 7,
            channels: 64,
            kernel: 3,
            stacks: 2,
            embedding_dim: 16,
            recurrent: true,
            head_mode: HeadMode::Embeddings,
            num_classes: None,
            in_channels: 1,
        }
    }
}

impl NetworkConfig {
    pub fn head_channels(&self) -> usize {
        match self.head_mode {
            HeadMode::Embeddings => self.embedding_dim,
            HeadMode::ClassLogits => self.num_classes.expect("num_classes required in semantic mode"),
        }
    }

    pub fn validate(&self) {
        assert!(self.levels >= 1, "levels must be >= 1");
        assert!(self.stacks >= 1, "stacks must be >= 1");
        assert!(self.kernel % 2 == 1, "kernel extent must be odd");
        if self.head_mode == HeadMode::Embeddings {
            assert!(self.embedding_dim >= 2, "embedding_dim must be >= 2");
        } else {
            assert!(self.num_classes.is_some(), "num_classes required in semantic mode");
        }
    }
}

// ---- parameter store --------------------------------------------------------

#[derive(Clone, Copy, Debug)]
struct GruIdx {
    wz: usize,
    uz: usize,
    bz: usize,
    wr: usize,
    ur: usize,
    br: usize,
    wh: usize,
    uh: usize,
    bh: usize,
}

#[derive(Clone, Copy, Debug)]
enum MidIdx {
    Gru(GruIdx),
    Conv { w: usize, b: usize },
}

#[derive(Clone, Copy, Debug)]
struct LevelIdx {
    contract_w: usize,
    contract_b: usize,
    mid: MidIdx,
    expand_w: usize,
    expand_b: usize,
}

#[derive(Clone, Debug)]
struct StackIdx {
    levels: Vec<LevelIdx>,
    head_w: usize,
    head_b: usize,
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
    by_name: BTreeMap<String, usize>,
}

impl Params {
    fn add<R: Rng + ?Sized>(&mut self, name: String, shape: &[usize], rng: &mut R) -> usize {
        let tensor = he_init(shape, rng);
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.entries.iter().map(|(_, t)| t.len()).collect()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name).map(|&i| &self.entries[i].1)
    }

    /// Attaches every parameter to the tape in declaration order.
    pub fn leaf_all(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| tape.leaf(t.clone(), trainable)).collect()
    }

    pub fn to_checkpoint(&self, prefix: &str) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (name, t) in &self.entries {
            ck.insert(format!("{prefix}{name}"), t.clone());
        }
        ck
    }

    /// Replaces parameter values from a checkpoint. Every parameter must be
    /// present with a matching shape.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        for (name, t) in &mut self.entries {
            let full = format!("{prefix}{name}");
            let src = ck
                .get(&full)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {full}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {full}: checkpoint {:?}, network {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

// ---- ConvGRU ----------------------------------------------------------------

/// Tape handles of one ConvGRU's parameters.
pub struct GruVars {
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wh: Var,
    pub uh: Var,
    pub bh: Var,
}

/// One ConvGRU step:
/// `z = sigmoid(conv(x) + conv(h))`, `r = sigmoid(conv(x) + conv(h))`,
/// `h~ = tanh(conv(x) + conv(r*h))`, `h' = (1-z)*h + z*h~`.
pub fn convgru_step(tape: &mut Tape, x: Var, h_prev: Var, g: &GruVars) -> Var {
    let (_, _, xh, xw) = tape.value(x).dims4();
    let (_, _, hh, hw) = tape.value(h_prev).dims4();
    assert_eq!((xh, xw), (hh, hw), "convgru_step: spatial mismatch {xh}x{xw} vs {hh}x{hw}");

    let zx = tape.conv2d(x, g.wz, Some(g.bz), PadMode::Zero);
    let zh = tape.conv2d(h_prev, g.uz, None, PadMode::Zero);
    let z_pre = tape.add(zx, zh);
    let z = tape.sigmoid(z_pre);

    let rx = tape.conv2d(x, g.wr, Some(g.br), PadMode::Zero);
    let rh = tape.conv2d(h_prev, g.ur, None, PadMode::Zero);
    let r_pre = tape.add(rx, rh);
    let r = tape.sigmoid(r_pre);

    let gated = tape.mul(r, h_prev);
    let hx = tape.conv2d(x, g.wh, Some(g.bh), PadMode::Zero);
    let hg = tape.conv2d(gated, g.uh, None, PadMode::Zero);
    let h_pre = tape.add(hx, hg);
    let h_tilde = tape.tanh(h_pre);

    // h' = h + z * (h~ - h)
    let delta = tape.sub(h_tilde, h_prev);
    let zd = tape.mul(z, delta);
    tape.add(h_prev, zd)
}

// ---- network ----------------------------------------------------------------

/// Hidden tensors of every ConvGRU site, indexed `stack * levels + level`.
/// All-zero after [`RecurrentState::reset`].
#[derive(Clone, Debug)]
pub struct RecurrentState {
    pub slices: Vec<Tensor>,
}

impl RecurrentState {
    pub fn zeros(config: &NetworkConfig, batch: usize, height: usize, width: usize) -> Self {
        let mut slices = Vec::with_capacity(config.stacks * config.levels);
        for _stack in 0..config.stacks {
            for level in 0..config.levels {
                slices.push(Tensor::zeros(&[
                    batch,
                    config.channels,
                    height >> level,
                    width >> level,
                ]));
            }
        }
        RecurrentState { slices }
    }

    pub fn reset(&mut self) {
        for s in &mut self.slices {
            *s = Tensor::zeros(s.shape());
        }
    }
}

/// Per-frame network output on a tape.
pub struct FrameOutput {
    /// Head output of the first hourglass (loss only).
    pub out1: Var,
    /// Head output of the second hourglass (loss and clustering).
    pub out2: Var,
    pub state: Vec<Var>,
}

pub struct StackedHourglass {
    pub config: NetworkConfig,
    pub params: Params,
    index: Vec<StackIdx>,
}

impl StackedHourglass {
    pub fn new<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Self {
        config.validate();
        let k = config.kernel;
        let c = config.channels;
        let head = config.head_channels();
        let mut params = Params::default();
        let mut index = Vec::with_capacity(config.stacks);
        for s in 0..config.stacks {
            let mut levels = Vec::with_capacity(config.levels);
            for l in 0..config.levels {
                let cin = if l == 0 {
                    if s == 0 {
                        config.in_channels
                    } else {
                        config.in_channels + head
                    }
                } else {
                    c
                };
                let p = format!("s{s}.l{l}");
                let contract_w = params.add(format!("{p}.contract.w"), &[c, cin, k, k], rng);
                let contract_b = params.add(format!("{p}.contract.b"), &[c], rng);
                let mid = if config.recurrent {
                    MidIdx::Gru(GruIdx {
                        wz: params.add(format!("{p}.gru.wz"), &[c, c, k, k], rng),
                        uz: params.add(format!("{p}.gru.uz"), &[c, c, k, k], rng),
                        bz: params.add(format!("{p}.gru.bz"), &[c], rng),
                        wr: params.add(format!("{p}.gru.wr"), &[c, c, k, k], rng),
                        ur: params.add(format!("{p}.gru.ur"), &[c, c, k, k], rng),
                        br: params.add(format!("{p}.gru.br"), &[c], rng),
                        wh: params.add(format!("{p}.gru.wh"), &[c, c, k, k], rng),
                        uh: params.add(format!("{p}.gru.uh"), &[c, c, k, k], rng),
                        bh: params.add(format!("{p}.gru.bh"), &[c], rng),
                    })
                } else {
                    MidIdx::Conv {
                        w: params.add(format!("{p}.mid.w"), &[c, c, k, k], rng),
                        b: params.add(format!("{p}.mid.b"), &[c], rng),
                    }
                };
                let expand_w = params.add(format!("{p}.expand.w"), &[c, c, k, k], rng);
                let expand_b = params.add(format!("{p}.expand.b"), &[c], rng);
                levels.push(LevelIdx { contract_w, contract_b, mid, expand_w, expand_b });
            }
            let head_w = params.add(format!("s{s}.head.w"), &[head, c, 1, 1], rng);
            let head_b = params.add(format!("s{s}.head.b"), &[head], rng);
            index.push(StackIdx { levels, head_w, head_b });
        }
        StackedHourglass { config, params, index }
    }

    pub fn zero_state(&self, batch: usize, height: usize, width: usize) -> RecurrentState {
        RecurrentState::zeros(&self.config, batch, height, width)
    }

    fn hourglass_level(
        &self,
        tape: &mut Tape,
        pvars: &[Var],
        stack: usize,
        level: usize,
        x: Var,
        state_in: &[Var],
        state_out: &mut [Option<Var>],
    ) -> Var {
        let idx = &self.index[stack].levels[level];
        let conv = tape.conv2d(x, pvars[idx.contract_w], Some(pvars[idx.contract_b]), PadMode::Zero);
        let contracted = tape.relu(conv);

        let site = stack * self.config.levels + level;
        let skip = match idx.mid {
            MidIdx::Gru(g) => {
                let gv = GruVars {
                    wz: pvars[g.wz],
                    uz: pvars[g.uz],
                    bz: pvars[g.bz],
                    wr: pvars[g.wr],
                    ur: pvars[g.ur],
                    br: pvars[g.br],
                    wh: pvars[g.wh],
                    uh: pvars[g.uh],
                    bh: pvars[g.bh],
                };
                let h_new = convgru_step(tape, contracted, state_in[site], &gv);
                state_out[site] = Some(h_new);
                h_new
            }
            MidIdx::Conv { w, b } => {
                let mid = tape.conv2d(contracted, pvars[w], Some(pvars[b]), PadMode::Zero);
                state_out[site] = Some(state_in[site]);
                tape.relu(mid)
            }
        };

        let merged = if level + 1 < self.config.levels {
            let down = tape.max_pool2d(contracted);
            let deeper = self.hourglass_level(tape, pvars, stack, level + 1, down, state_in, state_out);
            let up = tape.upsample2x(deeper);
            tape.add(skip, up)
        } else {
            skip
        };
        let expanded = tape.conv2d(merged, pvars[idx.expand_w], Some(pvars[idx.expand_b]), PadMode::Zero);
        tape.relu(expanded)
    }

    /// One frame through both hourglasses. `state_in` holds
    /// `stacks * levels` vars ordered by stack then level.
    pub fn forward_frame(
        &self,
        tape: &mut Tape,
        pvars: &[Var],
        frame: Var,
        state_in: &[Var],
    ) -> FrameOutput {
        let (_, cin, h, w) = tape.value(frame).dims4();
        assert_eq!(cin, self.config.in_channels, "forward_frame: expected {} input channels, got {cin}", self.config.in_channels);
        assert!(
            h % (1 << self.config.levels) == 0 && w % (1 << self.config.levels) == 0,
            "forward_frame: {h}x{w} not divisible by 2^{}",
            self.config.levels
        );
        assert_eq!(state_in.len(), self.config.stacks * self.config.levels);

        let mut state_out: Vec<Option<Var>> = vec![None; state_in.len()];

        // Chain the hourglasses; each later stack consumes the previous
        // head output concatenated with the raw frame.
        let mut x = frame;
        let mut heads = Vec::with_capacity(self.config.stacks);
        for s in 0..self.config.stacks {
            let features = self.hourglass_level(tape, pvars, s, 0, x, state_in, &mut state_out);
            let head = tape.conv2d(
                features,
                pvars[self.index[s].head_w],
                Some(pvars[self.index[s].head_b]),
                PadMode::Zero,
            );
            heads.push(head);
            if s + 1 < self.config.stacks {
                x = tape.concat_channels(head, frame);
            }
        }

        FrameOutput {
            out1: heads[0],
            out2: *heads.last().expect("at least one stack"),
            state: state_out.into_iter().map(|s| s.expect("state visited")).collect(),
        }
    }

    /// Threads recurrent state through `frames` in order, starting from the
    /// given state vars (zero state at a sequence start). Returns the two
    /// head outputs per frame.
    pub fn run_sequence(
        &self,
        tape: &mut Tape,
        pvars: &[Var],
        frames: &[Var],
        state0: &[Var],
    ) -> Vec<(Var, Var)> {
        assert!(!frames.is_empty(), "run_sequence: empty sequence");
        let mut state: Vec<Var> = state0.to_vec();
        let mut outputs = Vec::with_capacity(frames.len());
        for &frame in frames {
            let out = self.forward_frame(tape, pvars, frame, &state);
            state = out.state;
            outputs.push((out.out1, out.out2));
        }
        outputs
    }

    /// Inference over a possibly long video: one small tape per frame, no
    /// gradients, state carried as plain tensors. Returns the second head's
    /// output per frame, shaped `[d, H, W]`, and leaves the updated state in
    /// `state`.
    pub fn infer_frames(&self, frames: &[Tensor], state: &mut RecurrentState) -> Vec<Tensor> {
        let mut outputs = Vec::with_capacity(frames.len());
        for frame in frames {
            let mut tape = Tape::new();
            let pvars = self.params.leaf_all(&mut tape, false);
            let fvar = tape.constant(frame.clone());
            let svars: Vec<Var> = state.slices.iter().map(|s| tape.constant(s.clone())).collect();
            let out = self.forward_frame(&mut tape, &pvars, fvar, &svars);
            for (slot, var) in state.slices.iter_mut().zip(&out.state) {
                *slot = tape.value(*var).clone();
            }
            let (_, d, h, w) = tape.value(out.out2).dims4();
            let data = tape.value(out.out2).data().to_vec();
            outputs.push(Tensor::from_vec(&[d, h, w], data));
        }
        outputs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::tensor::Real;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(levels: usize, recurrent: bool) -> NetworkConfig {
        NetworkConfig {
            levels,
            channels: 4,
            kernel: 3,
            stacks: 2,
            embedding_dim: 3,
            recurrent,
            head_mode: HeadMode::Embeddings,
            num_classes: None,
            in_channels: 1,
        }
    }

    fn rand_frame(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[1, 1, h, w], (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn forward_once(net: &StackedHourglass, frame: &Tensor, state: &RecurrentState) -> (Tensor, Tensor, Vec<Tensor>) {
        let mut tape = Tape::new();
        let pvars = net.params.leaf_all(&mut tape, false);
        let f = tape.constant(frame.clone());
        let svars: Vec<Var> = state.slices.iter().map(|s| tape.constant(s.clone())).collect();
        let out = net.forward_frame(&mut tape, &pvars, f, &svars);
        let new_state = out.state.iter().map(|&v| tape.value(v).clone()).collect();
        (tape.value(out.out1).clone(), tape.value(out.out2).clone(), new_state)
    }

    #[test]
    fn zero_params_zero_input_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = StackedHourglass::new(tiny_config(2, true), &mut rng);
        for t in net.params.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let frame = Tensor::zeros(&[1, 1, 8, 8]);
        let state = net.zero_state(1, 8, 8);
        let (out1, out2, _) = forward_once(&net, &frame, &state);
        assert!(out1.data().iter().all(|&v| v == 0.0));
        assert!(out2.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_extent_matches_input_for_depths() {
        for levels in [1usize, 3] {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let net = StackedHourglass::new(tiny_config(levels, true), &mut rng);
            let size = 1 << (levels + 1);
            let frame = rand_frame(size, size, 3);
            let state = net.zero_state(1, size, size);
            let (out1, out2, _) = forward_once(&net, &frame, &state);
            assert_eq!(out1.shape(), &[1, 3, size, size]);
            assert_eq!(out2.shape(), &[1, 3, size, size]);
        }
    }

    #[test]
    fn seven_level_network_holds_shape_contract() {
        let mut config = tiny_config(7, true);
        config.channels = 2;
        config.stacks = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = StackedHourglass::new(config, &mut rng);
        let frame = rand_frame(128, 128, 5);
        let state = net.zero_state(1, 128, 128);
        let (_, out2, _) = forward_once(&net, &frame, &state);
        assert_eq!(out2.shape(), &[1, 3, 128, 128]);
    }

    #[test]
    #[should_panic(expected = "divisible")]
    fn indivisible_extent_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = StackedHourglass::new(tiny_config(3, true), &mut rng);
        let frame = rand_frame(12, 12, 1); // 12 not divisible by 8
        let state = net.zero_state(1, 12, 12);
        let _ = forward_once(&net, &frame, &state);
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // levels = 3, stacks = 1, channels = c, kernel 3, 1 input channel,
        // head d: contract convs (1 at cin=1, 2 at cin=c), one GRU per level
        // (6 kernels + 3 biases), 3 expanding convs, 1x1 head.
        let c = 4usize;
        let d = 3usize;
        let config = NetworkConfig {
            levels: 3,
            channels: c,
            kernel: 3,
            stacks: 1,
            embedding_dim: d,
            recurrent: true,
            head_mode: HeadMode::Embeddings,
            num_classes: None,
            in_channels: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = StackedHourglass::new(config, &mut rng);
        let contract = (c * 1 * 9 + c) + 2 * (c * c * 9 + c);
        let gru = 3 * (6 * c * c * 9 + 3 * c);
        let expand = 3 * (c * c * 9 + c);
        let head = d * c + d;
        assert_eq!(net.params.scalar_count(), contract + gru + expand + head);
    }

    fn gru_test_setup(bz_value: Real, seed: u64) -> (Tape, Var, Var, GruVars) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 3usize;
        let mut tape = Tape::new();
        let rt = |rng: &mut ChaCha8Rng, shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect())
        };
        let x = tape.constant(rt(&mut rng, &[1, c, 4, 4]));
        let h = tape.constant(rt(&mut rng, &[1, c, 4, 4]));
        let zeros_k = Tensor::zeros(&[c, c, 3, 3]);
        let g = GruVars {
            wz: tape.constant(zeros_k.clone()),
            uz: tape.constant(zeros_k.clone()),
            bz: tape.constant(Tensor::full(&[c], bz_value)),
            wr: tape.constant(rt(&mut rng, &[c, c, 3, 3])),
            ur: tape.constant(rt(&mut rng, &[c, c, 3, 3])),
            br: tape.constant(rt(&mut rng, &[c])),
            wh: tape.constant(rt(&mut rng, &[c, c, 3, 3])),
            uh: tape.constant(rt(&mut rng, &[c, c, 3, 3])),
            bh: tape.constant(rt(&mut rng, &[c])),
        };
        (tape, x, h, g)
    }

    #[test]
    fn gru_closed_update_gate_keeps_memory() {
        // z forced to ~0: h_new == h_prev.
        let (mut tape, x, h, g) = gru_test_setup(-40.0, 6);
        let h_new = convgru_step(&mut tape, x, h, &g);
        for (a, b) in tape.value(h_new).data().iter().zip(tape.value(h).data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn gru_open_update_gate_replaces_memory() {
        // z forced to ~1: h_new == tanh(conv(x) + conv(r*h)).
        let (mut tape, x, h, g) = gru_test_setup(40.0, 7);
        let h_new = convgru_step(&mut tape, x, h, &g);

        let rx = tape.conv2d(x, g.wr, Some(g.br), PadMode::Zero);
        let rh = tape.conv2d(h, g.ur, None, PadMode::Zero);
        let r_pre = tape.add(rx, rh);
        let r = tape.sigmoid(r_pre);
        let gated = tape.mul(r, h);
        let hx = tape.conv2d(x, g.wh, Some(g.bh), PadMode::Zero);
        let hg = tape.conv2d(gated, g.uh, None, PadMode::Zero);
        let pre = tape.add(hx, hg);
        let want = tape.tanh(pre);
        for (a, b) in tape.value(h_new).data().iter().zip(tape.value(want).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn gru_gradients_through_three_chained_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = 2usize;
        let rt = |rng: &mut ChaCha8Rng, shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect())
        };
        let leaves = vec![
            rt(&mut rng, &[1, c, 4, 4]), // x (same input each step)
            rt(&mut rng, &[1, c, 4, 4]), // h0
            rt(&mut rng, &[c, c, 3, 3]), // wz
            rt(&mut rng, &[c, c, 3, 3]), // uz
            rt(&mut rng, &[c]),          // bz
            rt(&mut rng, &[c, c, 3, 3]), // wr
            rt(&mut rng, &[c, c, 3, 3]), // ur
            rt(&mut rng, &[c]),          // br
            rt(&mut rng, &[c, c, 3, 3]), // wh
            rt(&mut rng, &[c, c, 3, 3]), // uh
            rt(&mut rng, &[c]),          // bh
        ];
        let result = check_gradients(
            "convgru_3_steps",
            &leaves,
            |tape, vars| {
                let g = GruVars {
                    wz: vars[2],
                    uz: vars[3],
                    bz: vars[4],
                    wr: vars[5],
                    ur: vars[6],
                    br: vars[7],
                    wh: vars[8],
                    uh: vars[9],
                    bh: vars[10],
                };
                let mut h = vars[1];
                for _ in 0..3 {
                    h = convgru_step(tape, vars[0], h, &g);
                }
                tape.sum(h)
            },
            1e-4,
            1e-4,
        );
        assert!(result.passed, "max rel err {}", result.max_rel_err);
    }

    #[test]
    fn non_recurrent_network_is_stateless() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = StackedHourglass::new(tiny_config(2, false), &mut rng);
        let frame = rand_frame(8, 8, 10);
        let state = net.zero_state(1, 8, 8);
        let (a1, a2, new_state) = forward_once(&net, &frame, &state);
        let st2 = RecurrentState { slices: new_state };
        let (b1, b2, _) = forward_once(&net, &frame, &st2);
        assert_eq!(a1.data(), b1.data());
        assert_eq!(a2.data(), b2.data());
    }

    #[test]
    fn recurrent_network_depends_on_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = StackedHourglass::new(tiny_config(2, true), &mut rng);
        let frame = rand_frame(8, 8, 12);
        let state = net.zero_state(1, 8, 8);
        let (_, a2, new_state) = forward_once(&net, &frame, &state);
        let st2 = RecurrentState { slices: new_state };
        let (_, b2, _) = forward_once(&net, &frame, &st2);
        let diff: Real = a2.data().iter().zip(b2.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6, "outputs identical despite recurrent state");
    }

    #[test]
    fn sequence_of_ten_frames_gives_ten_output_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let net = StackedHourglass::new(tiny_config(1, true), &mut rng);
        let mut tape = Tape::new();
        let pvars = net.params.leaf_all(&mut tape, false);
        let frames: Vec<Var> = (0..10).map(|i| tape.constant(rand_frame(4, 4, 20 + i))).collect();
        let state = net.zero_state(1, 4, 4);
        let svars: Vec<Var> = state.slices.iter().map(|s| tape.constant(s.clone())).collect();
        let outs = net.run_sequence(&mut tape, &pvars, &frames, &svars);
        assert_eq!(outs.len(), 10);
    }

    #[test]
    #[should_panic(expected = "empty sequence")]
    fn empty_sequence_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let net = StackedHourglass::new(tiny_config(1, true), &mut rng);
        let mut tape = Tape::new();
        let pvars = net.params.leaf_all(&mut tape, false);
        let state = net.zero_state(1, 4, 4);
        let svars: Vec<Var> = state.slices.iter().map(|s| tape.constant(s.clone())).collect();
        let _ = net.run_sequence(&mut tape, &pvars, &[], &svars);
    }

    #[test]
    fn frame_order_matters_in_recurrent_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let net = StackedHourglass::new(tiny_config(2, true), &mut rng);
        let f1 = rand_frame(8, 8, 30);
        let f2 = rand_frame(8, 8, 31);
        let run = |a: &Tensor, b: &Tensor| -> Tensor {
            let mut state = net.zero_state(1, 8, 8);
            let outs = net.infer_frames(&[a.clone(), b.clone()], &mut state);
            outs.into_iter().last().unwrap()
        };
        let ab = run(&f1, &f2);
        let ba = run(&f2, &f1);
        let diff: Real = ab.data().iter().zip(ba.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn non_recurrent_sequence_equals_per_frame_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let net = StackedHourglass::new(tiny_config(2, false), &mut rng);
        let frames: Vec<Tensor> = (0..3).map(|i| rand_frame(8, 8, 40 + i)).collect();
        let mut state = net.zero_state(1, 8, 8);
        let seq = net.infer_frames(&frames, &mut state);
        for (i, frame) in frames.iter().enumerate() {
            let mut fresh = net.zero_state(1, 8, 8);
            let single = net.infer_frames(std::slice::from_ref(frame), &mut fresh);
            assert_eq!(seq[i].data(), single[0].data());
        }
    }

    #[test]
    fn reset_forgets_history() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let net = StackedHourglass::new(tiny_config(2, true), &mut rng);
        let prefix: Vec<Tensor> = (0..3).map(|i| rand_frame(8, 8, 50 + i)).collect();
        let suffix: Vec<Tensor> = (0..2).map(|i| rand_frame(8, 8, 60 + i)).collect();
        let mut state = net.zero_state(1, 8, 8);
        let _ = net.infer_frames(&prefix, &mut state);
        state.reset();
        let after_reset = net.infer_frames(&suffix, &mut state);
        let mut fresh = net.zero_state(1, 8, 8);
        let from_scratch = net.infer_frames(&suffix, &mut fresh);
        for (a, b) in after_reset.iter().zip(&from_scratch) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn end_to_end_gradients_at_tiny_scale() {
        // levels=2, 8x8 input, 4 channels, d=3, two frames through the
        // recurrent network; every parameter gradient against central
        // finite differences.
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let net = StackedHourglass::new(tiny_config(2, true), &mut rng);
        let f0 = rand_frame(8, 8, 70);
        let f1 = rand_frame(8, 8, 71);
        let proj1 = {
            let mut r = ChaCha8Rng::seed_from_u64(72);
            Tensor::from_vec(&[1, 3, 8, 8], (0..192).map(|_| r.gen_range(-1.0..1.0)).collect())
        };
        let leaves: Vec<Tensor> = net.params.tensors().cloned().collect();
        let result = check_gradients(
            "stacked_hourglass_2frames",
            &leaves,
            |tape, vars| {
                let fa = tape.constant(f0.clone());
                let fb = tape.constant(f1.clone());
                let state = net.zero_state(1, 8, 8);
                let svars: Vec<Var> = state.slices.iter().map(|s| tape.constant(s.clone())).collect();
                let outs = net.run_sequence(tape, vars, &[fa, fb], &svars);
                let w = tape.constant(proj1.clone());
                let pa = tape.mul(outs[1].0, w);
                let pb = tape.mul(outs[1].1, w);
                let sa = tape.sum(pa);
                let sb = tape.sum(pb);
                tape.add(sa, sb)
            },
            1e-4,
            1e-3,
        );
        assert!(result.passed, "max rel err {}", result.max_rel_err);
    }

    #[test]
    fn checkpoint_roundtrip_restores_params() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.etck");
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let net = StackedHourglass::new(tiny_config(2, true), &mut rng);
        net.params.to_checkpoint("net.").save(&path).unwrap();

        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let mut net2 = StackedHourglass::new(tiny_config(2, true), &mut rng2);
        let ck = Checkpoint::load(&path).unwrap();
        net2.params.load_checkpoint(&ck, "net.").unwrap();
        for (a, b) in net.params.tensors().zip(net2.params.tensors()) {
            assert_eq!(a.data(), b.data());
        }
    }
}
