//! Data preparation: intensity normalization, augmentation, resizing, a
//! synthetic video generator, and image I/O.
//!
//! Augmentation samples one similarity transform (translation, flips,
//! rotation, scale) plus a cubic B-spline elastic field per draw; the same
//! draw is applied to every frame of a training sequence. Pixels sampled
//! from outside the original image domain are padded (zero or mirror) and
//! flagged invalid so the loss ignores them.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::loss::InstanceLabelMap;
use crate::tensor::{Real, Tensor};
use crate::track::{LineageForest, TrackedInstance};
use crate::{Error, Result};

// ---- resizing ----------------------------------------------------------------

#[inline]
fn nn_source(dst: usize, src_len: usize, dst_len: usize) -> usize {
    if src_len == dst_len {
        return dst;
    }
    let scale = src_len as Real / dst_len as Real;
    let src = ((dst as Real + 0.5) * scale) as usize;
    src.min(src_len - 1)
}

/// Nearest-neighbor resampling of a label map; every output id existed in
/// the input.
pub fn resize_labels_nearest(labels: &[u32], h: usize, w: usize, h2: usize, w2: usize) -> Vec<u32> {
    assert_eq!(labels.len(), h * w);
    let mut out = Vec::with_capacity(h2 * w2);
    for y in 0..h2 {
        let sy = nn_source(y, h, h2);
        for x in 0..w2 {
            out.push(labels[sy * w + nn_source(x, w, w2)]);
        }
    }
    out
}

pub fn resize_mask_nearest(mask: &[bool], h: usize, w: usize, h2: usize, w2: usize) -> Vec<bool> {
    assert_eq!(mask.len(), h * w);
    let mut out = Vec::with_capacity(h2 * w2);
    for y in 0..h2 {
        let sy = nn_source(y, h, h2);
        for x in 0..w2 {
            out.push(mask[sy * w + nn_source(x, w, w2)]);
        }
    }
    out
}

/// Bilinear resampling of a `[H, W]` image.
pub fn resize_bilinear(image: &Tensor, h2: usize, w2: usize) -> Tensor {
    let (h, w) = image.dims2();
    if (h, w) == (h2, w2) {
        return image.clone();
    }
    let data = image.data();
    let mut out = Vec::with_capacity(h2 * w2);
    let sy_scale = h as Real / h2 as Real;
    let sx_scale = w as Real / w2 as Real;
    for y in 0..h2 {
        let fy = ((y as Real + 0.5) * sy_scale - 0.5).clamp(0.0, (h - 1) as Real);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as Real;
        for x in 0..w2 {
            let fx = ((x as Real + 0.5) * sx_scale - 0.5).clamp(0.0, (w - 1) as Real);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as Real;
            let top = data[y0 * w + x0] * (1.0 - tx) + data[y0 * w + x1] * tx;
            let bot = data[y1 * w + x0] * (1.0 - tx) + data[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    Tensor::from_vec(&[h2, w2], out)
}

/// Resizes an image (bilinear) and its label map (nearest-neighbor) to the
/// network input extent; aspect ratio is handled by direct anisotropic
/// scaling.
pub fn resize_to_network(
    image: &Tensor,
    labels: &InstanceLabelMap,
    th: usize,
    tw: usize,
) -> (Tensor, InstanceLabelMap) {
    let (h, w) = image.dims2();
    assert_eq!((labels.height, labels.width), (h, w));
    let img = resize_bilinear(image, th, tw);
    let lab = resize_labels_nearest(&labels.labels, h, w, th, tw);
    let valid = resize_mask_nearest(&labels.valid, h, w, th, tw);
    (img, InstanceLabelMap::with_valid(th, tw, lab, valid))
}

// ---- intensity ----------------------------------------------------------------

/// Robust normalization to `[-1, 1]`: the minimum is the median of the
/// lowest `i_min` fraction of values, the maximum the median of the highest
/// `i_max` fraction. Values outside the interval are not clipped. A
/// constant image maps to all zeros.
pub fn normalize_intensity(image: &Tensor, i_min: Real, i_max: Real) -> Tensor {
    assert!(!image.is_empty(), "normalize_intensity: empty image");
    let n = image.len();
    let mut sorted: Vec<Real> = image.data().to_vec();
    sorted.sort_by(Real::total_cmp);
    let tail = |frac: Real| -> usize { ((frac * n as Real).round() as usize).clamp(1, n) };
    let median = |slice: &[Real]| -> Real {
        let m = slice.len();
        if m % 2 == 1 {
            slice[m / 2]
        } else {
            0.5 * (slice[m / 2 - 1] + slice[m / 2])
        }
    };
    let v_min = median(&sorted[..tail(i_min)]);
    let v_max = median(&sorted[n - tail(i_max)..]);
    if (v_max - v_min).abs() < 1e-12 {
        return Tensor::zeros(image.shape());
    }
    let scale = 2.0 / (v_max - v_min);
    image.map(|v| (v - v_min) * scale - 1.0)
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_smooth(image: &Tensor, sigma: Real) -> Tensor {
    if sigma <= 0.0 {
        return image.clone();
    }
    let (h, w) = image.dims2();
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-(i * i) as Real / (2.0 * sigma * sigma)).exp());
    }
    let sum: Real = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);

    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut m = i;
        if m < 0 {
            m = -m - 1;
        }
        if m >= n {
            m = 2 * n - 1 - m;
        }
        m.clamp(0, n - 1) as usize
    };

    let src = image.data();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = mirror(x as isize + ki as isize - radius, w);
                acc += k * src[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = mirror(y as isize + ki as isize - radius, h);
                acc += k * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    Tensor::from_vec(&[h, w], out)
}

// ---- augmentation --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadKind {
    Zero,
    Mirror,
}

/// Augmentation intervals; all draws are uniform within the interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Percentile fractions of the robust normalization.
    pub i_min: Real,
    pub i_max: Real,
    pub i_shift: (Real, Real),
    pub i_scale: (Real, Real),
    /// Translation interval in pixels, per axis.
    pub translate: (Real, Real),
    /// Probability of mirroring each axis.
    pub flip_probability: Real,
    pub rotate_degrees: (Real, Real),
    pub scale: (Real, Real),
    /// Elastic control-point displacement magnitude in pixels.
    pub elastic_displacement: Real,
    /// Elastic control-grid spacing in pixels.
    pub elastic_grid: Real,
    /// Optional pre-smoothing before normalization.
    pub gaussian_sigma: Option<Real>,
    pub pad_mode: PadKind,
}

impl AugmentConfig {
    /// No-op augmentation.
    pub fn identity() -> Self {
        AugmentConfig {
            i_min: 0.1,
            i_max: 0.1,
            i_shift: (0.0, 0.0),
            i_scale: (1.0, 1.0),
            translate: (0.0, 0.0),
            flip_probability: 0.0,
            rotate_degrees: (0.0, 0.0),
            scale: (1.0, 1.0),
            elastic_displacement: 0.0,
            elastic_grid: 10.0,
            gaussian_sigma: None,
            pad_mode: PadKind::Mirror,
        }
    }
}

/// Cubic B-spline displacement field over a coarse control grid.
#[derive(Clone, Debug)]
pub struct ElasticField {
    spacing: Real,
    margin: usize,
    nx: usize,
    ny: usize,
    dx: Vec<Real>,
    dy: Vec<Real>,
}

impl ElasticField {
    fn sample<R: Rng + ?Sized>(h: usize, w: usize, spacing: Real, amplitude: Real, rng: &mut R) -> Self {
        let margin = 2usize;
        let nx = ((w as Real - 1.0) / spacing).floor() as usize + 2 * margin + 2;
        let ny = ((h as Real - 1.0) / spacing).floor() as usize + 2 * margin + 2;
        let mut dx = Vec::with_capacity(nx * ny);
        let mut dy = Vec::with_capacity(nx * ny);
        for _ in 0..nx * ny {
            dx.push(rng.gen_range(-amplitude..=amplitude));
            dy.push(rng.gen_range(-amplitude..=amplitude));
        }
        ElasticField { spacing, margin, nx, ny, dx, dy }
    }

    /// Uniform cubic B-spline basis at fraction `t`.
    fn basis(t: Real) -> [Real; 4] {
        let t2 = t * t;
        let t3 = t2 * t;
        [
            (1.0 - t).powi(3) / 6.0,
            (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
            (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
            t3 / 6.0,
        ]
    }

    /// Displacement `(dx, dy)` at continuous image coordinates.
    pub fn displacement(&self, x: Real, y: Real) -> (Real, Real) {
        let ux = x / self.spacing + self.margin as Real;
        let uy = y / self.spacing + self.margin as Real;
        let ix = ux.floor();
        let iy = uy.floor();
        let bx = Self::basis(ux - ix);
        let by = Self::basis(uy - iy);
        let ix = ix as usize - 1;
        let iy = iy as usize - 1;
        let (mut ox, mut oy) = (0.0, 0.0);
        for (j, wy) in by.iter().enumerate() {
            let row = (iy + j).min(self.ny - 1) * self.nx;
            for (i, wx) in bx.iter().enumerate() {
                let idx = row + (ix + i).min(self.nx - 1);
                let wgt = wx * wy;
                ox += wgt * self.dx[idx];
                oy += wgt * self.dy[idx];
            }
        }
        (ox, oy)
    }
}

/// One concrete augmentation draw, applied identically to every frame of a
/// sequence.
#[derive(Clone, Debug)]
pub struct SampledAugment {
    pub flip_x: bool,
    pub flip_y: bool,
    pub angle_radians: Real,
    pub scale: Real,
    pub translate: (Real, Real),
    pub elastic: Option<ElasticField>,
    pub intensity_shift: Real,
    pub intensity_scale: Real,
    pub pad_mode: PadKind,
}

impl SampledAugment {
    pub fn identity() -> Self {
        SampledAugment {
            flip_x: false,
            flip_y: false,
            angle_radians: 0.0,
            scale: 1.0,
            translate: (0.0, 0.0),
            elastic: None,
            intensity_shift: 0.0,
            intensity_scale: 1.0,
            pad_mode: PadKind::Mirror,
        }
    }

    /// Source coordinates sampled for output pixel `(x, y)`.
    pub fn source_coords(&self, x: Real, y: Real, h: usize, w: usize) -> (Real, Real) {
        let (mut px, mut py) = (x, y);
        if self.flip_x {
            px = (w - 1) as Real - px;
        }
        if self.flip_y {
            py = (h - 1) as Real - py;
        }
        let cx = (w - 1) as Real / 2.0;
        let cy = (h - 1) as Real / 2.0;
        let (sin, cos) = (-self.angle_radians).sin_cos();
        let rx = (px - cx) * cos - (py - cy) * sin;
        let ry = (px - cx) * sin + (py - cy) * cos;
        let mut sx = rx / self.scale + cx - self.translate.0;
        let mut sy = ry / self.scale + cy - self.translate.1;
        if let Some(field) = &self.elastic {
            let (dx, dy) = field.displacement(px, py);
            sx += dx;
            sy += dy;
        }
        (sx, sy)
    }

    /// Applies the spatial transform and the intensity shift/scale.
    /// Returns the augmented image, labels and the validity mask marking
    /// pixels sampled from inside the original domain.
    pub fn apply(&self, image: &Tensor, labels: &InstanceLabelMap) -> (Tensor, InstanceLabelMap) {
        let (h, w) = image.dims2();
        assert_eq!((labels.height, labels.width), (h, w));
        let src = image.data();
        let sample_padded = |xi: isize, yi: isize| -> Real {
            let inside = xi >= 0 && xi < w as isize && yi >= 0 && yi < h as isize;
            match (inside, self.pad_mode) {
                (true, _) => src[yi as usize * w + xi as usize],
                (false, PadKind::Zero) => 0.0,
                (false, PadKind::Mirror) => {
                    let reflect = |i: isize, n: usize| -> usize {
                        let n = n as isize;
                        let mut m = i;
                        while m < 0 || m >= n {
                            if m < 0 {
                                m = -m - 1;
                            }
                            if m >= n {
                                m = 2 * n - 1 - m;
                            }
                        }
                        m as usize
                    };
                    src[reflect(yi, h) * w + reflect(xi, w)]
                }
            }
        };
        let mut out = Vec::with_capacity(h * w);
        let mut out_labels = Vec::with_capacity(h * w);
        let mut out_valid = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = self.source_coords(x as Real, y as Real, h, w);
                let inside =
                    sx >= 0.0 && sx <= (w - 1) as Real && sy >= 0.0 && sy <= (h - 1) as Real;
                // Bilinear image sample with padding.
                let x0 = sx.floor();
                let y0 = sy.floor();
                let tx = sx - x0;
                let ty = sy - y0;
                let (x0, y0) = (x0 as isize, y0 as isize);
                let v = sample_padded(x0, y0) * (1.0 - tx) * (1.0 - ty)
                    + sample_padded(x0 + 1, y0) * tx * (1.0 - ty)
                    + sample_padded(x0, y0 + 1) * (1.0 - tx) * ty
                    + sample_padded(x0 + 1, y0 + 1) * tx * ty;
                out.push(v * self.intensity_scale + self.intensity_shift);
                // Nearest-neighbor labels and validity.
                let (lx, ly) = (sx.round() as isize, sy.round() as isize);
                let label_inside = lx >= 0 && lx < w as isize && ly >= 0 && ly < h as isize;
                if inside && label_inside {
                    let p = ly as usize * w + lx as usize;
                    out_labels.push(labels.labels[p]);
                    out_valid.push(labels.valid[p]);
                } else {
                    out_labels.push(0);
                    out_valid.push(false);
                }
            }
        }
        (
            Tensor::from_vec(&[h, w], out),
            InstanceLabelMap::with_valid(h, w, out_labels, out_valid),
        )
    }
}

/// Draws one augmentation from the configured intervals.
pub fn sample_augmentation<R: Rng + ?Sized>(
    config: &AugmentConfig,
    h: usize,
    w: usize,
    rng: &mut R,
) -> SampledAugment {
    let draw = |rng: &mut R, (lo, hi): (Real, Real)| -> Real {
        if hi > lo {
            rng.gen_range(lo..=hi)
        } else {
            lo
        }
    };
    let flip_x = rng.gen::<f64>() < config.flip_probability as f64;
    let flip_y = rng.gen::<f64>() < config.flip_probability as f64;
    let angle = draw(rng, config.rotate_degrees).to_radians();
    let scale = draw(rng, config.scale);
    let tx = draw(rng, config.translate);
    let ty = draw(rng, config.translate);
    let elastic = (config.elastic_displacement > 0.0).then(|| {
        ElasticField::sample(h, w, config.elastic_grid, config.elastic_displacement, rng)
    });
    let intensity_shift = draw(rng, config.i_shift);
    let intensity_scale = draw(rng, config.i_scale);
    SampledAugment {
        flip_x,
        flip_y,
        angle_radians: angle,
        scale,
        translate: (tx, ty),
        elastic,
        intensity_shift,
        intensity_scale,
        pad_mode: config.pad_mode,
    }
}

// ---- synthetic videos ------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitEvent {
    pub frame: usize,
    pub instance: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionEvent {
    pub frame: usize,
    pub duration: usize,
    pub instance: u32,
}

/// Moving, deforming, splitting elliptical blobs on a noisy background,
/// with exact ground-truth labels and lineage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScenario {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub blob_count: usize,
    /// Per-frame speed interval in pixels.
    pub speed: (Real, Real),
    pub radius: (Real, Real),
    #[serde(default)]
    pub splits: Vec<SplitEvent>,
    /// Frames during which an instance is invisible in the image while
    /// still present in the ground truth.
    #[serde(default)]
    pub occlusions: Vec<OcclusionEvent>,
    pub noise: Real,
    pub background_level: Real,
}

impl SyntheticScenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Scenario(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).expect("serializable scenario");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub struct SyntheticVideo {
    /// `[H, W]` intensity images.
    pub frames: Vec<Tensor>,
    pub labels: Vec<InstanceLabelMap>,
    pub lineage: LineageForest,
}

struct Blob {
    id: u32,
    x: Real,
    y: Real,
    vx: Real,
    vy: Real,
    rx: Real,
    ry: Real,
    angle: Real,
    spin: Real,
    level: Real,
    phase: Real,
}

impl Blob {
    /// Squared normalized ellipse coordinate; <= 1 inside.
    fn rho2(&self, px: Real, py: Real, wobble: Real) -> Real {
        let (sin, cos) = self.angle.sin_cos();
        let dx = px - self.x;
        let dy = py - self.y;
        let ex = (dx * cos + dy * sin) / (self.rx * wobble);
        let ey = (-dx * sin + dy * cos) / (self.ry * wobble);
        ex * ex + ey * ey
    }
}

pub fn synth_generate<R: Rng + ?Sized>(
    scenario: &SyntheticScenario,
    rng: &mut R,
) -> Result<SyntheticVideo> {
    let (h, w) = (scenario.height, scenario.width);
    if scenario.frames == 0 || scenario.blob_count == 0 || h < 8 || w < 8 {
        return Err(Error::Scenario(
            "need at least one frame, one blob and an 8x8 extent".into(),
        ));
    }
    let max_radius = scenario.radius.1.max(scenario.radius.0);
    if 2.0 * max_radius + 4.0 >= h.min(w) as Real {
        return Err(Error::Scenario("blob radius too large for the extent".into()));
    }

    // Validate the split schedule against instance liveness.
    {
        let mut alive: Vec<u32> = (1..=scenario.blob_count as u32).collect();
        let mut next = scenario.blob_count as u32 + 1;
        let mut splits = scenario.splits.clone();
        splits.sort_by_key(|s| s.frame);
        for s in &splits {
            if s.frame == 0 || s.frame >= scenario.frames {
                return Err(Error::Scenario(format!(
                    "split of instance {} at frame {} is outside 1..{}",
                    s.instance, s.frame, scenario.frames
                )));
            }
            let Some(pos) = alive.iter().position(|&id| id == s.instance) else {
                return Err(Error::Scenario(format!(
                    "split schedule references instance {} which is not alive at frame {}",
                    s.instance, s.frame
                )));
            };
            alive.remove(pos);
            alive.push(next);
            alive.push(next + 1);
            next += 2;
        }
    }

    let margin = max_radius + 2.0;
    let rand_interval =
        |rng: &mut R, (lo, hi): (Real, Real)| if hi > lo { rng.gen_range(lo..=hi) } else { lo };

    let mut blobs: Vec<Blob> = Vec::new();
    for id in 1..=scenario.blob_count as u32 {
        // Rejection-sample a center away from existing blobs.
        let (mut x, mut y) = (0.0, 0.0);
        for attempt in 0..200 {
            x = rng.gen_range(margin..=(w as Real - 1.0 - margin));
            y = rng.gen_range(margin..=(h as Real - 1.0 - margin));
            let clear = blobs
                .iter()
                .all(|b| ((b.x - x).powi(2) + (b.y - y).powi(2)).sqrt() > 2.3 * max_radius);
            if clear || attempt == 199 {
                break;
            }
        }
        let speed = rand_interval(rng, scenario.speed);
        let dir = rng.gen_range(0.0..std::f64::consts::TAU) as Real;
        let r = rand_interval(rng, scenario.radius);
        blobs.push(Blob {
            id,
            x,
            y,
            vx: speed * dir.cos(),
            vy: speed * dir.sin(),
            rx: r,
            ry: r * rng.gen_range(0.75..=1.0),
            angle: rng.gen_range(0.0..std::f64::consts::PI) as Real,
            spin: rng.gen_range(-0.06..=0.06),
            level: rng.gen_range(0.55..=0.95),
            phase: rng.gen_range(0.0..std::f64::consts::TAU) as Real,
        });
    }
    let mut next_id = scenario.blob_count as u32 + 1;

    let mut frames = Vec::with_capacity(scenario.frames);
    let mut label_maps: Vec<Vec<u32>> = Vec::with_capacity(scenario.frames);
    let mut parent_links: Vec<(u32, u32)> = Vec::new(); // (child, parent)

    for f in 0..scenario.frames {
        // Splits scheduled for this frame replace the parent by two kids.
        let mut due: Vec<SplitEvent> =
            scenario.splits.iter().copied().filter(|s| s.frame == f).collect();
        due.sort_by_key(|s| s.instance);
        for split in due {
            let pos = blobs
                .iter()
                .position(|b| b.id == split.instance)
                .expect("validated schedule");
            let parent = blobs.remove(pos);
            let dir = rng.gen_range(0.0..std::f64::consts::TAU) as Real;
            let off = 0.55 * parent.rx.max(parent.ry);
            let speed = rand_interval(rng, scenario.speed).max(0.2);
            for k in 0..2u32 {
                let sign = if k == 0 { 1.0 } else { -1.0 };
                let id = next_id;
                next_id += 1;
                parent_links.push((id, parent.id));
                blobs.push(Blob {
                    id,
                    x: (parent.x + sign * off * dir.cos()).clamp(margin, w as Real - 1.0 - margin),
                    y: (parent.y + sign * off * dir.sin()).clamp(margin, h as Real - 1.0 - margin),
                    vx: sign * speed * dir.cos(),
                    vy: sign * speed * dir.sin(),
                    rx: parent.rx * 0.72,
                    ry: parent.ry * 0.72,
                    angle: parent.angle,
                    spin: parent.spin,
                    level: (parent.level + rng.gen_range(-0.05..=0.05)).clamp(0.5, 1.0),
                    phase: parent.phase + sign,
                });
            }
        }

        if f > 0 {
            // Motion with wall bounces and gentle pairwise separation.
            for b in &mut blobs {
                b.x += b.vx;
                b.y += b.vy;
                if b.x < margin || b.x > w as Real - 1.0 - margin {
                    b.vx = -b.vx;
                    b.x = b.x.clamp(margin, w as Real - 1.0 - margin);
                }
                if b.y < margin || b.y > h as Real - 1.0 - margin {
                    b.vy = -b.vy;
                    b.y = b.y.clamp(margin, h as Real - 1.0 - margin);
                }
                b.angle += b.spin;
            }
            for i in 0..blobs.len() {
                for j in i + 1..blobs.len() {
                    let dx = blobs[j].x - blobs[i].x;
                    let dy = blobs[j].y - blobs[i].y;
                    let dist = (dx * dx + dy * dy).sqrt().max(1e-6);
                    let min_sep = blobs[i].rx.max(blobs[i].ry) + blobs[j].rx.max(blobs[j].ry) + 2.0;
                    if dist < min_sep {
                        let push = 0.5 * (min_sep - dist);
                        let (ux, uy) = (dx / dist, dy / dist);
                        blobs[i].x = (blobs[i].x - push * ux).clamp(margin, w as Real - 1.0 - margin);
                        blobs[i].y = (blobs[i].y - push * uy).clamp(margin, h as Real - 1.0 - margin);
                        blobs[j].x = (blobs[j].x + push * ux).clamp(margin, w as Real - 1.0 - margin);
                        blobs[j].y = (blobs[j].y + push * uy).clamp(margin, h as Real - 1.0 - margin);
                    }
                }
            }
        }

        let hidden: Vec<u32> = scenario
            .occlusions
            .iter()
            .filter(|o| f >= o.frame && f < o.frame + o.duration)
            .map(|o| o.instance)
            .collect();

        let mut image = Vec::with_capacity(h * w);
        let mut labels = vec![0u32; h * w];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as Real, y as Real);
                let mut best: Option<(Real, &Blob)> = None;
                for b in &blobs {
                    let wobble = 1.0 + 0.08 * (0.35 * f as Real + b.phase).sin();
                    let rho2 = b.rho2(px, py, wobble);
                    if rho2 <= 1.0 && best.is_none_or(|(r, _)| rho2 < r) {
                        best = Some((rho2, b));
                    }
                }
                let mut v = scenario.background_level;
                if let Some((rho2, b)) = best {
                    labels[y * w + x] = b.id;
                    if !hidden.contains(&b.id) {
                        v = b.level * (1.0 - 0.45 * rho2);
                    }
                }
                v += scenario.noise * (rng.gen::<f64>() as Real - 0.5);
                image.push(v.max(0.0));
            }
        }
        frames.push(Tensor::from_vec(&[h, w], image));
        label_maps.push(labels);
    }

    let mut lineage = lineage_from_maps(&label_maps, h, w);
    for (child, parent) in parent_links {
        if let Some(inst) = lineage.instances.get_mut(&child) {
            inst.parent = Some(parent);
        }
    }
    lineage.validate();
    Ok(SyntheticVideo {
        frames,
        labels: label_maps
            .into_iter()
            .map(|m| InstanceLabelMap::new(h, w, m))
            .collect(),
        lineage,
    })
}

fn lineage_from_maps(frame_maps: &[Vec<u32>], h: usize, w: usize) -> LineageForest {
    let mut instances = std::collections::BTreeMap::new();
    for (f, map) in frame_maps.iter().enumerate() {
        let mut per_id: std::collections::BTreeMap<u32, Vec<u32>> = Default::default();
        for (p, &l) in map.iter().enumerate() {
            if l != 0 {
                per_id.entry(l).or_default().push(p as u32);
            }
        }
        for (id, mask) in per_id {
            let inst = instances.entry(id).or_insert_with(|| TrackedInstance {
                id,
                first_frame: f,
                last_frame: f,
                parent: None,
                masks: Default::default(),
            });
            inst.last_frame = f;
            inst.masks.insert(f, mask);
        }
    }
    LineageForest { instances, frames: frame_maps.len(), height: h, width: w }
}

// ---- image I/O -------------------------------------------------------------------

/// Writes a `[H, W]` image as 16-bit grayscale PNG; values are clamped to
/// `[0, 1]` and scaled.
pub fn save_gray16(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = image.dims2();
    let pixels: Vec<u16> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_vec(w as u32, h as u32, pixels)
        .expect("buffer size");
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Loads an 8- or 16-bit grayscale image (PNG or TIFF) scaled to `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let gray = img.to_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data: Vec<Real> = gray.into_raw().iter().map(|&v| v as Real / 65535.0).collect();
    Ok(Tensor::from_vec(&[h, w], data))
}

/// Writes an instance label map as 16-bit grayscale PNG, pixel value = id.
pub fn save_labels16(path: &Path, labels: &[u32], h: usize, w: usize) -> Result<()> {
    assert_eq!(labels.len(), h * w);
    let pixels: Vec<u16> = labels
        .iter()
        .map(|&l| u16::try_from(l).expect("instance id exceeds 16-bit range"))
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_vec(w as u32, h as u32, pixels)
        .expect("buffer size");
    buf.save(path).map_err(|e| Error::image(path, e))
}

pub fn load_labels16(path: &Path) -> Result<InstanceLabelMap> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let gray = img.to_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let labels: Vec<u32> = gray.into_raw().iter().map(|&v| v as u32).collect();
    Ok(InstanceLabelMap::new(h, w, labels))
}

/// Writes three embedding channels as an RGB overlay, each channel
/// normalized to its own range.
pub fn save_embedding_rgb(path: &Path, emb: &Tensor, channels: [usize; 3]) -> Result<()> {
    let (d, h, w) = emb.dims3();
    for &c in &channels {
        assert!(c < d, "channel {c} out of {d}");
    }
    let mut rgb = Vec::with_capacity(h * w * 3);
    let plane = |c: usize| &emb.data()[c * h * w..(c + 1) * h * w];
    let ranges: Vec<(Real, Real)> = channels
        .iter()
        .map(|&c| {
            let p = plane(c);
            let lo = p.iter().copied().fold(Real::INFINITY, Real::min);
            let hi = p.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            (lo, hi.max(lo + 1e-12))
        })
        .collect();
    for p in 0..h * w {
        for (i, &c) in channels.iter().enumerate() {
            let (lo, hi) = ranges[i];
            let v = (plane(c)[p] - lo) / (hi - lo);
            rgb.push((v * 255.0).round() as u8);
        }
    }
    let buf = image::ImageBuffer::<image::Rgb<u8>, _>::from_vec(w as u32, h as u32, rgb)
        .expect("buffer size");
    buf.save(path).map_err(|e| Error::image(path, e))
}
