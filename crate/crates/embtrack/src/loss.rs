//! Cosine embedding loss with neighborhood relaxation, and masked softmax
//! cross-entropy for the semantic mode.
//!
//! Per instance `i` with pixel set `S_i`, mean embedding `m_i` and neighbor
//! pixel set `N_i` (pixels of other instances within radius `r_n`), the loss
//! over the instance set `I` is
//!
//! ```text
//! L = 1/|I| * sum_i [ (1 - 1/|S_i| * sum_{p in S_i} cos(m_i, e_p))
//!                   + (1/|N_i| * sum_{q in N_i} cos(m_i, e_q)^2) ]
//! ```
//!
//! Background counts as an ordinary instance (label 0). Instances whose
//! neighbor set is empty contribute only the first term. Pixels flagged
//! invalid (e.g. mirror padding) contribute to no term.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

const NORM_EPS: Real = 1e-12;

static ZERO_NORM_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of zero-norm embeddings encountered by cosine computations since
/// start (or the last [`reset_zero_norm_events`]). Diagnostic only.
pub fn zero_norm_events() -> u64 {
    ZERO_NORM_EVENTS.load(Ordering::Relaxed)
}

pub fn reset_zero_norm_events() {
    ZERO_NORM_EVENTS.store(0, Ordering::Relaxed);
}

/// Per-pixel instance IDs for one frame. Label 0 is background, which the
/// loss treats as an instance of its own. `valid` masks out pixels that
/// carry no annotation (padding); they contribute to no loss term.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceLabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub valid: Vec<bool>,
}

impl InstanceLabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Self {
        assert_eq!(labels.len(), height * width);
        let valid = vec![true; labels.len()];
        InstanceLabelMap { height, width, labels, valid }
    }

    pub fn with_valid(height: usize, width: usize, labels: Vec<u32>, valid: Vec<bool>) -> Self {
        assert_eq!(labels.len(), height * width);
        assert_eq!(valid.len(), labels.len());
        InstanceLabelMap { height, width, labels, valid }
    }

    /// Sorted IDs present among valid pixels, background included.
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .labels
            .iter()
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .map(|(&l, _)| l)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Flat indices of valid pixels labelled `id`, ascending.
    pub fn pixels_of(&self, id: u32) -> Vec<u32> {
        self.labels
            .iter()
            .zip(&self.valid)
            .enumerate()
            .filter(|(_, (&l, &v))| v && l == id)
            .map(|(p, _)| p as u32)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Neighborhood relaxation parameters. `radius` is measured in pixels at
/// the resolution of the label map; `INFINITY` makes every other instance a
/// neighbor (still-image mode).
#[derive(Clone, Copy, Debug)]
pub struct NeighborhoodSpec {
    pub radius: Real,
    pub max_instances: usize,
}

impl NeighborhoodSpec {
    pub fn new(radius: Real, max_instances: usize) -> Self {
        assert!(radius > 0.0, "neighborhood radius must be positive");
        NeighborhoodSpec { radius, max_instances }
    }

    pub fn all_neighbors(max_instances: usize) -> Self {
        NeighborhoodSpec { radius: Real::INFINITY, max_instances }
    }
}

impl Default for NeighborhoodSpec {
    fn default() -> Self {
        NeighborhoodSpec { radius: 50.0, max_instances: 32 }
    }
}

/// Cosine similarity of two embedding vectors, in `[-1, 1]`. A vector with
/// norm below 1e-12 yields similarity 0 and bumps the diagnostic counter.
pub fn cosine_similarity(e1: &[Real], e2: &[Real]) -> Real {
    assert_eq!(e1.len(), e2.len(), "cosine_similarity: dimension mismatch");
    let n1 = e1.iter().map(|v| v * v).sum::<Real>().sqrt();
    let n2 = e2.iter().map(|v| v * v).sum::<Real>().sqrt();
    if n1 < NORM_EPS || n2 < NORM_EPS {
        ZERO_NORM_EVENTS.fetch_add(1, Ordering::Relaxed);
        return 0.0;
    }
    let dot: Real = e1.iter().zip(e2).map(|(a, b)| a * b).sum();
    dot / (n1 * n2)
}

/// Arithmetic mean of the embeddings at `pixels` (un-normalized).
/// `emb` is `[d, H, W]`.
pub fn mean_embedding(emb: &Tensor, pixels: &[u32]) -> Vec<Real> {
    assert!(!pixels.is_empty(), "mean_embedding: empty pixel set");
    let (d, h, w) = emb.dims3();
    let hw = h * w;
    let data = emb.data();
    let mut mean = vec![0.0; d];
    for &p in pixels {
        for (k, m) in mean.iter_mut().enumerate() {
            *m += data[k * hw + p as usize];
        }
    }
    let n = pixels.len() as Real;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

// ---- neighborhoods ---------------------------------------------------------

/// Exact squared Euclidean distance transform (two-pass lower envelope).
/// Entries of `seed` that are `true` get distance 0.
pub fn squared_distance_field(seed: &[bool], height: usize, width: usize) -> Vec<Real> {
    const INF: Real = 1e20;
    assert_eq!(seed.len(), height * width);
    let mut field: Vec<Real> = seed.iter().map(|&s| if s { 0.0 } else { INF }).collect();

    let mut f = vec![0.0; height.max(width)];
    let mut d = vec![0.0; height.max(width)];
    let mut v = vec![0usize; height.max(width)];
    let mut z = vec![0.0; height.max(width) + 1];

    let mut transform = |line: &mut dyn Iterator<Item = usize>, n: usize, field: &mut [Real]| {
        let idx: Vec<usize> = line.collect();
        for (j, &i) in idx.iter().enumerate().take(n) {
            f[j] = field[i];
        }
        let mut k = 0usize;
        v[0] = 0;
        z[0] = -INF;
        z[1] = INF;
        for q in 1..n {
            loop {
                let s = ((f[q] + (q * q) as Real) - (f[v[k]] + (v[k] * v[k]) as Real))
                    / (2.0 * (q as Real - v[k] as Real));
                if s <= z[k] {
                    if k == 0 {
                        // Degenerate; replace the only parabola.
                        v[0] = q;
                        z[1] = INF;
                        break;
                    }
                    k -= 1;
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    z[k + 1] = INF;
                    break;
                }
            }
        }
        let mut k = 0usize;
        for q in 0..n {
            while z[k + 1] < q as Real {
                k += 1;
            }
            let dq = q as Real - v[k] as Real;
            d[q] = dq * dq + f[v[k]];
        }
        for (j, &i) in idx.iter().enumerate().take(n) {
            field[i] = d[j];
        }
    };

    for y in 0..height {
        transform(&mut (y * width..(y + 1) * width), width, &mut field);
    }
    for x in 0..width {
        transform(&mut (0..height).map(|y| y * width + x), height, &mut field);
    }
    field
}

/// Pixels of every other instance whose minimum Euclidean distance to the
/// mask of instance `id` is at most `spec.radius`. Sorted ascending.
pub fn neighbor_set(labels: &InstanceLabelMap, id: u32, spec: &NeighborhoodSpec) -> Vec<u32> {
    let others = |p: usize| labels.valid[p] && labels.labels[p] != id;
    if spec.radius.is_infinite() {
        return (0..labels.len()).filter(|&p| others(p)).map(|p| p as u32).collect();
    }
    let mask: Vec<bool> = labels
        .labels
        .iter()
        .zip(&labels.valid)
        .map(|(&l, &v)| v && l == id)
        .collect();
    assert!(mask.iter().any(|&m| m), "neighbor_set: instance {id} not present");
    let dist2 = squared_distance_field(&mask, labels.height, labels.width);
    let r2 = spec.radius * spec.radius;
    (0..labels.len())
        .filter(|&p| others(p) && dist2[p] <= r2)
        .map(|p| p as u32)
        .collect()
}

// ---- cosine embedding loss -------------------------------------------------

pub(crate) struct InstanceSets {
    pub id: u32,
    pub pixels: Vec<u32>,
    pub neighbors: Vec<u32>,
}

pub(crate) struct FrameSets {
    pub sets: Vec<InstanceSets>,
}

/// Saved context for the fused cosine-loss tape op: the pixel/neighbor sets
/// per batch element. The backward pass recomputes means and similarities.
pub struct CosineLossCtx {
    pub(crate) frames: Vec<FrameSets>,
}

fn build_frame_sets<R: Rng + ?Sized>(
    labels: &InstanceLabelMap,
    spec: &NeighborhoodSpec,
    rng: Option<&mut R>,
) -> FrameSets {
    let mut ids = labels.instance_ids();
    assert!(!ids.is_empty(), "cosine_embedding_loss: no instances in frame");
    if ids.len() > spec.max_instances {
        if let Some(rng) = rng {
            let chosen = rand::seq::index::sample(rng, ids.len(), spec.max_instances);
            let mut subset: Vec<u32> = chosen.iter().map(|i| ids[i]).collect();
            subset.sort_unstable();
            ids = subset;
        }
    }
    let sets = ids
        .iter()
        .map(|&id| InstanceSets {
            id,
            pixels: labels.pixels_of(id),
            neighbors: neighbor_set(labels, id, spec),
        })
        .collect();
    FrameSets { sets }
}

struct EmbView<'a> {
    data: &'a [Real],
    d: usize,
    hw: usize,
}

impl<'a> EmbView<'a> {
    fn get(&self, p: u32, out: &mut [Real]) {
        for k in 0..self.d {
            out[k] = self.data[k * self.hw + p as usize];
        }
    }

    fn norm(&self, p: u32) -> Real {
        (0..self.d)
            .map(|k| {
                let v = self.data[k * self.hw + p as usize];
                v * v
            })
            .sum::<Real>()
            .sqrt()
    }

    fn dot_with(&self, p: u32, v: &[Real]) -> Real {
        (0..self.d).map(|k| self.data[k * self.hw + p as usize] * v[k]).sum()
    }
}

/// Alignment and repulsion terms of one instance.
#[derive(Clone, Copy, Debug)]
pub struct InstanceTerm {
    pub id: u32,
    /// `1 - mean cos(mean_embedding, e_p)` over the instance's own pixels.
    pub align: Real,
    /// `mean cos(mean_embedding, e_q)^2` over the neighbor pixels.
    pub repel: Real,
}

fn frame_terms(view: &EmbView, frame: &FrameSets) -> Vec<InstanceTerm> {
    let d = view.d;
    let mut terms = Vec::with_capacity(frame.sets.len());
    let mut mean = vec![0.0; d];
    for set in &frame.sets {
        mean.iter_mut().for_each(|m| *m = 0.0);
        let mut buf = vec![0.0; d];
        for &p in &set.pixels {
            view.get(p, &mut buf);
            for (m, v) in mean.iter_mut().zip(&buf) {
                *m += v;
            }
        }
        let n = set.pixels.len() as Real;
        mean.iter_mut().for_each(|m| *m /= n);
        let norm_m = mean.iter().map(|v| v * v).sum::<Real>().sqrt();

        let cos_p = |p: u32| -> Real {
            let norm_p = view.norm(p);
            if norm_m < NORM_EPS || norm_p < NORM_EPS {
                ZERO_NORM_EVENTS.fetch_add(1, Ordering::Relaxed);
                0.0
            } else {
                view.dot_with(p, &mean) / (norm_m * norm_p)
            }
        };

        let align = 1.0 - set.pixels.iter().map(|&p| cos_p(p)).sum::<Real>() / n;
        let repel = if set.neighbors.is_empty() {
            0.0
        } else {
            set.neighbors.iter().map(|&p| cos_p(p).powi(2)).sum::<Real>()
                / set.neighbors.len() as Real
        };
        terms.push(InstanceTerm { id: set.id, align, repel });
    }
    terms
}

pub(crate) fn cosine_loss_forward(emb: &Tensor, ctx: &CosineLossCtx) -> Real {
    let (bs, d, h, w) = emb.dims4();
    assert_eq!(bs, ctx.frames.len());
    let hw = h * w;
    let mut total = 0.0;
    for (b, frame) in ctx.frames.iter().enumerate() {
        let view = EmbView { data: &emb.data()[b * d * hw..(b + 1) * d * hw], d, hw };
        let terms = frame_terms(&view, frame);
        let frame_loss: Real =
            terms.iter().map(|t| t.align + t.repel).sum::<Real>() / terms.len() as Real;
        total += frame_loss;
    }
    total / bs as Real
}

pub(crate) fn cosine_loss_backward(emb: &Tensor, ctx: &CosineLossCtx, adjoint: Real) -> Vec<Real> {
    let (bs, d, h, w) = emb.dims4();
    let hw = h * w;
    let mut grad = vec![0.0; emb.len()];

    for (b, frame) in ctx.frames.iter().enumerate() {
        let base = b * d * hw;
        let view = EmbView { data: &emb.data()[base..base + d * hw], d, hw };
        // d total / d frame-instance-term
        let scale = adjoint / (bs as Real * frame.sets.len() as Real);

        let mut mean = vec![0.0; d];
        let mut gmean = vec![0.0; d];
        let mut buf = vec![0.0; d];
        for set in &frame.sets {
            mean.iter_mut().for_each(|m| *m = 0.0);
            for &p in &set.pixels {
                view.get(p, &mut buf);
                for (m, v) in mean.iter_mut().zip(&buf) {
                    *m += v;
                }
            }
            let n = set.pixels.len() as Real;
            mean.iter_mut().for_each(|m| *m /= n);
            let norm_m = mean.iter().map(|v| v * v).sum::<Real>().sqrt();
            if norm_m < NORM_EPS {
                ZERO_NORM_EVENTS.fetch_add(1, Ordering::Relaxed);
                continue;
            }

            gmean.iter_mut().for_each(|g| *g = 0.0);
            let k_count = set.neighbors.len() as Real;

            // Own pixels: d/de_p of -(1/n) cos(m, e_p), plus the mean-path
            // contribution collected in gmean.
            for &p in &set.pixels {
                let norm_p = view.norm(p);
                if norm_p < NORM_EPS {
                    ZERO_NORM_EVENTS.fetch_add(1, Ordering::Relaxed);
                    continue;
                }
                view.get(p, &mut buf);
                let cos = view.dot_with(p, &mean) / (norm_m * norm_p);
                let w_direct = -scale / n;
                for k in 0..d {
                    let dcos_de = mean[k] / (norm_m * norm_p) - cos * buf[k] / (norm_p * norm_p);
                    grad[base + k * hw + p as usize] += w_direct * dcos_de;
                    gmean[k] +=
                        -(buf[k] / (norm_m * norm_p) - cos * mean[k] / (norm_m * norm_m)) / n;
                }
            }

            // Neighbor pixels: d/de_q of (1/K) cos(m, e_q)^2.
            for &q in &set.neighbors {
                let norm_q = view.norm(q);
                if norm_q < NORM_EPS {
                    ZERO_NORM_EVENTS.fetch_add(1, Ordering::Relaxed);
                    continue;
                }
                view.get(q, &mut buf);
                let cos = view.dot_with(q, &mean) / (norm_m * norm_q);
                let w_direct = scale * 2.0 * cos / k_count;
                for k in 0..d {
                    let dcos_de = mean[k] / (norm_m * norm_q) - cos * buf[k] / (norm_q * norm_q);
                    grad[base + k * hw + q as usize] += w_direct * dcos_de;
                    gmean[k] += (2.0 * cos / k_count)
                        * (buf[k] / (norm_m * norm_q) - cos * mean[k] / (norm_m * norm_m));
                }
            }

            // Chain through the mean embedding: dm/de_p = I/n for p in S.
            for &p in &set.pixels {
                for k in 0..d {
                    grad[base + k * hw + p as usize] += scale * gmean[k] / n;
                }
            }
        }
    }
    grad
}

/// Records the cosine embedding loss of `emb` (`[B, d, H, W]`) under the
/// per-element label maps. With more instances than `spec.max_instances`
/// and an RNG supplied (training mode), a uniform subset is used; without
/// an RNG every instance participates.
pub fn cosine_embedding_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    emb: Var,
    maps: &[InstanceLabelMap],
    spec: &NeighborhoodSpec,
    mut rng: Option<&mut R>,
) -> Var {
    let (bs, d, h, w) = tape.value(emb).dims4();
    assert!(d >= 2, "cosine_embedding_loss: embedding dimension must be >= 2, got {d}");
    assert_eq!(bs, maps.len(), "cosine_embedding_loss: batch/label count mismatch");
    for m in maps {
        assert_eq!((m.height, m.width), (h, w), "cosine_embedding_loss: label map extent mismatch");
    }
    let frames: Vec<FrameSets> = maps
        .iter()
        .map(|m| build_frame_sets(m, spec, rng.as_deref_mut()))
        .collect();
    let ctx = CosineLossCtx { frames };
    let value = cosine_loss_forward(tape.value(emb), &ctx);
    tape.record_cosine_loss(emb, value, ctx)
}

/// Loss value without tape participation; `emb` is `[d, H, W]`.
pub fn cosine_loss_value(emb: &Tensor, labels: &InstanceLabelMap, spec: &NeighborhoodSpec) -> Real {
    let terms = cosine_loss_terms(emb, labels, spec);
    terms.iter().map(|t| t.align + t.repel).sum::<Real>() / terms.len() as Real
}

/// Per-instance loss terms with every instance participating (evaluation
/// mode); `emb` is `[d, H, W]`.
pub fn cosine_loss_terms(
    emb: &Tensor,
    labels: &InstanceLabelMap,
    spec: &NeighborhoodSpec,
) -> Vec<InstanceTerm> {
    let (d, h, w) = emb.dims3();
    assert!(d >= 2, "cosine_loss_terms: embedding dimension must be >= 2, got {d}");
    assert_eq!((labels.height, labels.width), (h, w));
    let frame = build_frame_sets::<rand_chacha::ChaCha8Rng>(labels, spec, None);
    let view = EmbView { data: emb.data(), d, hw: h * w };
    frame_terms(&view, &frame)
}

// ---- softmax cross-entropy --------------------------------------------------

/// Per-pixel class targets with a validity mask.
#[derive(Clone, Debug)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u32>,
    pub valid: Vec<bool>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, classes: Vec<u32>) -> Self {
        assert_eq!(classes.len(), height * width);
        let valid = vec![true; classes.len()];
        ClassMap { height, width, classes, valid }
    }
}

pub struct CrossEntropyCtx {
    pub(crate) maps: Vec<ClassMap>,
    pub(crate) valid_count: usize,
}

fn log_softmax_at(data: &[Real], k_classes: usize, hw: usize, p: usize, out: &mut [Real]) {
    let mut max = Real::NEG_INFINITY;
    for k in 0..k_classes {
        max = max.max(data[k * hw + p]);
    }
    let mut sum = 0.0;
    for k in 0..k_classes {
        out[k] = data[k * hw + p] - max;
        sum += out[k].exp();
    }
    let lse = sum.ln();
    for v in out.iter_mut().take(k_classes) {
        *v -= lse;
    }
}

pub(crate) fn cross_entropy_forward(logits: &Tensor, ctx: &CrossEntropyCtx) -> Real {
    let (bs, k_classes, h, w) = logits.dims4();
    let hw = h * w;
    let mut buf = vec![0.0; k_classes];
    let mut total = 0.0;
    for (b, map) in ctx.maps.iter().enumerate().take(bs) {
        let data = &logits.data()[b * k_classes * hw..(b + 1) * k_classes * hw];
        for p in 0..hw {
            if !map.valid[p] {
                continue;
            }
            let class = map.classes[p] as usize;
            assert!(class < k_classes, "class id {class} out of range (K={k_classes})");
            log_softmax_at(data, k_classes, hw, p, &mut buf);
            total -= buf[class];
        }
    }
    total / ctx.valid_count as Real
}

pub(crate) fn cross_entropy_backward(logits: &Tensor, ctx: &CrossEntropyCtx, adjoint: Real) -> Vec<Real> {
    let (bs, k_classes, h, w) = logits.dims4();
    let hw = h * w;
    let mut grad = vec![0.0; logits.len()];
    let mut buf = vec![0.0; k_classes];
    let scale = adjoint / ctx.valid_count as Real;
    for (b, map) in ctx.maps.iter().enumerate().take(bs) {
        let base = b * k_classes * hw;
        let data = &logits.data()[base..base + k_classes * hw];
        for p in 0..hw {
            if !map.valid[p] {
                continue;
            }
            let class = map.classes[p] as usize;
            log_softmax_at(data, k_classes, hw, p, &mut buf);
            for k in 0..k_classes {
                let softmax = buf[k].exp();
                let indicator = if k == class { 1.0 } else { 0.0 };
                grad[base + k * hw + p] += scale * (softmax - indicator);
            }
        }
    }
    grad
}

/// Records the masked softmax cross-entropy of `logits` (`[B, K, H, W]`):
/// the mean of `-log softmax(logits)[class]` over all valid pixels.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, maps: &[ClassMap]) -> Var {
    let (bs, _k, h, w) = tape.value(logits).dims4();
    assert_eq!(bs, maps.len(), "softmax_cross_entropy: batch/target count mismatch");
    for m in maps {
        assert_eq!((m.height, m.width), (h, w), "softmax_cross_entropy: target extent mismatch");
    }
    let valid_count: usize = maps.iter().map(|m| m.valid.iter().filter(|&&v| v).count()).sum();
    assert!(valid_count > 0, "softmax_cross_entropy: every pixel is masked out");
    let ctx = CrossEntropyCtx { maps: maps.to_vec(), valid_count };
    let value = cross_entropy_forward(tape.value(logits), &ctx);
    tape.record_cross_entropy(logits, value, ctx)
}
