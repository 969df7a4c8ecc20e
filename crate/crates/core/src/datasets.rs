//! Synthetic source/target domains with a controllable covariate shift.
//!
//! `grid-seg` images are split into a 2x2 grid of cells; each cell may hold
//! one axis-aligned rectangle or ellipse of a foreground class over the
//! background class 0. Pixels take their class color plus noise. The
//! target variant of the same scene applies per-channel gains, a faint
//! periodic texture and additive noise.
//!
//! `blobs` are Gaussian clusters in channel space, stored as 1x1 images so
//! both kinds flow through the same model. Their target variant rotates,
//! scales and translates the latent points, then adds noise.
//!
//! On disk a split is a directory holding `manifest.txt`, `images.tns1`
//! (`[N,H,W,C]`) and, for labeled splits, `labels.tns1` (`[N,H,W]`, class
//! indices stored as floats).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kv::{join_f64, KvMap};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";
pub const IMAGES: &str = "images.tns1";
pub const LABELS: &str = "labels.tns1";

pub const SOURCE_SPLIT: &str = "source";
pub const TARGET_TRAIN_SPLIT: &str = "target_train";
pub const TARGET_EVAL_SPLIT: &str = "target_eval";

/// Stream offset separating shift noise from scene generation.
const SHIFT_STREAM: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainKind {
    Blobs,
    GridSeg,
}

impl std::fmt::Display for DomainKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Blobs => "blobs",
            Self::GridSeg => "grid-seg",
        })
    }
}

impl std::str::FromStr for DomainKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "grid-seg" => Ok(Self::GridSeg),
            other => Err(Error::config("kind", format!("`{other}` is not blobs | grid-seg"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shift {
    /// added to every coordinate (blobs)
    pub mean_shift: f64,
    /// rotation of the first two coordinates, degrees (blobs)
    pub rotation_deg: f64,
    /// per-channel multiplicative gain
    pub gain: Vec<f64>,
    /// std of additive Gaussian noise
    pub noise: f64,
    /// amplitude of the periodic texture perturbation (grid-seg)
    pub texture: f64,
}

impl Shift {
    pub fn none(channels: usize) -> Self {
        Self {
            mean_shift: 0.0,
            rotation_deg: 0.0,
            gain: vec![1.0; channels],
            noise: 0.0,
            texture: 0.0,
        }
    }

    pub fn is_none(&self) -> bool {
        self.mean_shift == 0.0
            && self.rotation_deg == 0.0
            && self.gain.iter().all(|&g| g == 1.0)
            && self.noise == 0.0
            && self.texture == 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// probability that a grid cell holds a shape
    pub shape_prob: f64,
    /// per-pixel color noise present in both domains
    pub pixel_noise: f64,
    /// blob cluster std
    pub cluster_std: f64,
    /// blob center radius
    pub separation: f64,
    pub shift: Shift,
    pub seed: u64,
}

pub const SPEC_KEYS: &[&str] = &[
    "kind",
    "classes",
    "channels",
    "height",
    "width",
    "n_train",
    "n_eval",
    "shape_prob",
    "pixel_noise",
    "cluster_std",
    "separation",
    "mean_shift",
    "rotation_deg",
    "gain",
    "noise",
    "texture",
    "seed",
];

impl DomainSpec {
    /// Frozen "standard synthetic shift" preset, version 1.
    pub fn standard_shift(seed: u64) -> Self {
        Self {
            kind: DomainKind::GridSeg,
            num_classes: 5,
            channels: 3,
            height: 16,
            width: 16,
            n_train: 2000,
            n_eval: 500,
            shape_prob: 0.8,
            pixel_noise: 0.08,
            cluster_std: 0.5,
            separation: 3.0,
            shift: Shift {
                mean_shift: 0.0,
                rotation_deg: 0.0,
                gain: vec![1.4, 0.7, 1.0],
                noise: 0.1,
                texture: 0.05,
            },
            seed,
        }
    }

    pub fn blobs(num_classes: usize, channels: usize, n: usize, seed: u64) -> Self {
        Self {
            kind: DomainKind::Blobs,
            num_classes,
            channels,
            height: 1,
            width: 1,
            n_train: n,
            n_eval: n,
            shape_prob: 0.0,
            pixel_noise: 0.0,
            cluster_std: 0.5,
            separation: 3.0,
            shift: Shift::none(channels),
            seed,
        }
    }

    pub fn without_shift(&self) -> Self {
        Self {
            shift: Shift::none(self.channels),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("classes", "need at least 2 classes"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels", "must be >= 1"));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::config("n_train", "split sizes must be >= 1"));
        }
        if self.kind == DomainKind::GridSeg && (self.height < 4 || self.width < 4) {
            return Err(Error::config("height", "grid-seg images need at least 4x4 pixels"));
        }
        if self.shift.gain.len() != self.channels {
            return Err(Error::config(
                "gain",
                format!("{} gains for {} channels", self.shift.gain.len(), self.channels),
            ));
        }
        let finite = [
            self.shift.mean_shift,
            self.shift.rotation_deg,
            self.shift.noise,
            self.shift.texture,
            self.pixel_noise,
            self.cluster_std,
            self.separation,
            self.shape_prob,
        ];
        if finite.iter().chain(&self.shift.gain).any(|v| !v.is_finite()) {
            return Err(Error::config("shift", "parameters must be finite"));
        }
        if !(0.0..=1.0).contains(&self.shape_prob) {
            return Err(Error::config("shape_prob", "must be in [0, 1]"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        kv.reject_unknown(SPEC_KEYS)?;
        let seed = kv.parsed("seed")?.unwrap_or(0);
        let kind: DomainKind = kv.parsed("kind")?.unwrap_or(DomainKind::GridSeg);
        let mut s = match kind {
            DomainKind::GridSeg => Self::standard_shift(seed),
            DomainKind::Blobs => Self::blobs(3, 2, 1000, seed),
        };
        if let Some(v) = kv.parsed("classes")? {
            s.num_classes = v;
        }
        if let Some(v) = kv.parsed("channels")? {
            s.channels = v;
            if kv.get("gain").is_none() {
                s.shift.gain = vec![1.0; v];
            }
        }
        if let Some(v) = kv.parsed("height")? {
            s.height = v;
        }
        if let Some(v) = kv.parsed("width")? {
            s.width = v;
        }
        if let Some(v) = kv.parsed("n_train")? {
            s.n_train = v;
        }
        if let Some(v) = kv.parsed("n_eval")? {
            s.n_eval = v;
        }
        if let Some(v) = kv.parsed("shape_prob")? {
            s.shape_prob = v;
        }
        if let Some(v) = kv.parsed("pixel_noise")? {
            s.pixel_noise = v;
        }
        if let Some(v) = kv.parsed("cluster_std")? {
            s.cluster_std = v;
        }
        if let Some(v) = kv.parsed("separation")? {
            s.separation = v;
        }
        if let Some(v) = kv.parsed("mean_shift")? {
            s.shift.mean_shift = v;
        }
        if let Some(v) = kv.parsed("rotation_deg")? {
            s.shift.rotation_deg = v;
        }
        if let Some(v) = kv.list_f64("gain")? {
            s.shift.gain = v;
        }
        if let Some(v) = kv.parsed("noise")? {
            s.shift.noise = v;
        }
        if let Some(v) = kv.parsed("texture")? {
            s.shift.texture = v;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("kind", self.kind);
        kv.set("classes", self.num_classes);
        kv.set("channels", self.channels);
        kv.set("height", self.height);
        kv.set("width", self.width);
        kv.set("n_train", self.n_train);
        kv.set("n_eval", self.n_eval);
        kv.set("shape_prob", self.shape_prob);
        kv.set("pixel_noise", self.pixel_noise);
        kv.set("cluster_std", self.cluster_std);
        kv.set("separation", self.separation);
        kv.set("mean_shift", self.shift.mean_shift);
        kv.set("rotation_deg", self.shift.rotation_deg);
        kv.set("gain", join_f64(&self.shift.gain));
        kv.set("noise", self.shift.noise);
        kv.set("texture", self.shift.texture);
        kv.set("seed", self.seed);
        kv
    }

}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Source,
    Target,
}

/// Images `[N,H,W,C]` with per-pixel labels in row-major pixel order.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels_per_image(&self) -> usize {
        self.images.shape()[1] * self.images.shape()[2]
    }

    /// Images `idx` and their labels.
    pub fn select(&self, idx: &[usize]) -> LabeledImages {
        let ppi = self.pixels_per_image();
        let mut labels = Vec::with_capacity(idx.len() * ppi);
        for &i in idx {
            labels.extend_from_slice(&self.labels[i * ppi..(i + 1) * ppi]);
        }
        LabeledImages {
            images: self.images.select_rows(idx),
            labels,
        }
    }
}

/// Per-class base colors in `[0, 1]^channels`.
pub fn class_colors(num_classes: usize, channels: usize) -> Vec<Vec<f64>> {
    const PALETTE: [[f64; 3]; 8] = [
        [0.45, 0.45, 0.45],
        [0.80, 0.30, 0.30],
        [0.30, 0.70, 0.35],
        [0.30, 0.35, 0.80],
        [0.80, 0.75, 0.30],
        [0.70, 0.30, 0.75],
        [0.25, 0.75, 0.75],
        [0.95, 0.55, 0.20],
    ];
    (0..num_classes)
        .map(|k| {
            if channels == 3 && k < PALETTE.len() {
                PALETTE[k].to_vec()
            } else {
                (0..channels)
                    .map(|c| {
                        let phase = 2.0 * std::f64::consts::PI * k as f64 / num_classes as f64;
                        0.5 + 0.3 * (phase + 2.1 * c as f64).cos()
                    })
                    .collect()
            }
        })
        .collect()
}

/// Blob centers: evenly spaced on a circle in the first two channels,
/// alternating offsets along any further channels.
pub fn blob_centers(spec: &DomainSpec) -> Vec<Vec<f64>> {
    let k = spec.num_classes;
    (0..k)
        .map(|j| {
            let a = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
            (0..spec.channels)
                .map(|c| match c {
                    0 => spec.separation * a.cos(),
                    1 => spec.separation * a.sin(),
                    _ => {
                        let sign = if (j + c) % 2 == 0 { 1.0 } else { -1.0 };
                        0.5 * spec.separation * sign
                    }
                })
                .collect()
        })
        .collect()
}

/// Scene seeds per split; the target-train and eval splits never reuse
/// the source scenes.
pub fn split_seed(seed: u64, split: &str) -> u64 {
    let salt: u64 = match split {
        SOURCE_SPLIT => 0,
        TARGET_TRAIN_SPLIT => 0x9E37_79B9_7F4A_7C15,
        TARGET_EVAL_SPLIT => 0xC2B2_AE3D_27D4_EB4F,
        _ => 0x1656_67B1_9E37_79F9,
    };
    seed ^ salt
}

/// Generate `n` examples of `variant` from `spec` with scene seed `seed`.
pub fn generate(spec: &DomainSpec, variant: Variant, n: usize, seed: u64) -> Result<LabeledImages> {
    spec.validate()?;
    match spec.kind {
        DomainKind::Blobs => gen_blobs(spec, variant, n, seed),
        DomainKind::GridSeg => gen_grid_seg(spec, variant, n, seed),
    }
}

pub fn gen_blobs(spec: &DomainSpec, variant: Variant, n: usize, seed: u64) -> Result<LabeledImages> {
    let c = spec.channels;
    let centers = blob_centers(spec);
    let rot = spec.shift.rotation_deg.to_radians();
    let (sin, cos) = rot.sin_cos();
    let mut data = Vec::with_capacity(n * c);
    let mut labels = Vec::with_capacity(n);
    let mut scene = Rng::with_stream(seed, 0);
    let mut shift_rng = Rng::with_stream(seed, SHIFT_STREAM);
    let mut p = vec![0f64; c];
    for i in 0..n {
        let label = i % spec.num_classes;
        for (v, m) in p.iter_mut().zip(&centers[label]) {
            *v = m + spec.cluster_std * scene.normal();
        }
        if variant == Variant::Target && !spec.shift.is_none() {
            if c >= 2 {
                let (x, y) = (p[0], p[1]);
                p[0] = cos * x - sin * y;
                p[1] = sin * x + cos * y;
            }
            for (v, g) in p.iter_mut().zip(&spec.shift.gain) {
                *v = *v * g + spec.shift.mean_shift + spec.shift.noise * shift_rng.normal();
            }
        }
        data.extend(p.iter().map(|&v| v as f32));
        labels.push(label);
    }
    Ok(LabeledImages {
        images: Tensor::new(vec![n, 1, 1, c], data)?,
        labels,
    })
}

/// One shape placed in a grid cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeDraw {
    pub class: usize,
    pub ellipse: bool,
    pub w: usize,
    pub h: usize,
}

fn cell_layout(spec: &DomainSpec) -> (usize, usize, usize) {
    let ch = spec.height / 2;
    let cw = spec.width / 2;
    let min_side = 3.min(ch).min(cw).max(1);
    (ch, cw, min_side)
}

/// Whether pixel `(r, c)` of a `w x h` box belongs to the shape.
pub fn shape_covers(ellipse: bool, w: usize, h: usize, r: usize, c: usize) -> bool {
    if !ellipse {
        return true;
    }
    let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
    let dx = (c as f64 + 0.5 - rx) / rx;
    let dy = (r as f64 + 0.5 - ry) / ry;
    dx * dx + dy * dy <= 1.0
}

/// Rasterized pixel count of a shape.
pub fn shape_area(ellipse: bool, w: usize, h: usize) -> usize {
    (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| shape_covers(ellipse, w, h, r, c))
        .count()
}

/// Expected fraction of pixels per class under the scene generator.
pub fn class_area_priors(spec: &DomainSpec) -> Vec<f64> {
    let (ch, cw, min_side) = cell_layout(spec);
    let mut area_sum = 0f64;
    let mut combos = 0usize;
    for ellipse in [false, true] {
        for w in min_side..=cw {
            for h in min_side..=ch {
                area_sum += shape_area(ellipse, w, h) as f64;
                combos += 1;
            }
        }
    }
    let mean_area = area_sum / combos as f64;
    let fg = spec.num_classes - 1;
    let per_class = 4.0 * spec.shape_prob * mean_area / fg as f64 / (spec.height * spec.width) as f64;
    let mut priors = vec![per_class; spec.num_classes];
    priors[0] = 1.0 - per_class * fg as f64;
    priors
}

pub fn gen_grid_seg(spec: &DomainSpec, variant: Variant, n: usize, seed: u64) -> Result<LabeledImages> {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let (ch, cw, min_side) = cell_layout(spec);
    let colors = class_colors(spec.num_classes, c);
    let shifted = variant == Variant::Target && !spec.shift.is_none();
    let mut images = Vec::with_capacity(n * h * w * c);
    let mut labels = Vec::with_capacity(n * h * w);
    for i in 0..n {
        let mut scene = Rng::with_stream(seed, i as u64);
        let mut label_map = vec![0usize; h * w];
        for cell in 0..4 {
            let (r0, c0) = ((cell / 2) * ch, (cell % 2) * cw);
            if !scene.bernoulli(spec.shape_prob) {
                continue;
            }
            let class = 1 + scene.below(spec.num_classes - 1);
            let ellipse = scene.bernoulli(0.5);
            let sw = scene.int_range(min_side, cw);
            let sh = scene.int_range(min_side, ch);
            let or = scene.int_range(0, ch - sh);
            let oc = scene.int_range(0, cw - sw);
            for r in 0..sh {
                for cc in 0..sw {
                    if shape_covers(ellipse, sw, sh, r, cc) {
                        label_map[(r0 + or + r) * w + c0 + oc + cc] = class;
                    }
                }
            }
        }
        let mut shift_rng = Rng::with_stream(seed, SHIFT_STREAM + i as u64);
        let phase = if shifted {
            shift_rng.uniform() * 2.0 * std::f64::consts::PI
        } else {
            0.0
        };
        for (p, &label) in label_map.iter().enumerate() {
            let (r, col) = (p / w, p % w);
            let texture = if shifted {
                spec.shift.texture
                    * (2.0 * std::f64::consts::PI * (r as f64 + 0.5 * col as f64) / 5.0 + phase).sin()
            } else {
                0.0
            };
            for ch_i in 0..c {
                let mut v = colors[label][ch_i] + spec.pixel_noise * scene.normal();
                if shifted {
                    v = spec.shift.gain[ch_i] * (v + texture) + spec.shift.noise * shift_rng.normal();
                }
                images.push(v as f32);
            }
        }
        labels.extend(label_map);
    }
    Ok(LabeledImages {
        images: Tensor::new(vec![n, h, w, c], images)?,
        labels,
    })
}

/// Write one split directory.
pub fn write_split(
    dir: &Path,
    spec: &DomainSpec,
    split: &str,
    data: &LabeledImages,
    labeled: bool,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut kv = spec.to_kv();
    kv.set("format_version", FORMAT_VERSION);
    kv.set("split", split);
    kv.set("count", data.len());
    kv.set("labeled", labeled);
    kv.set("split_seed", split_seed(spec.seed, split));
    kv.save(&dir.join(MANIFEST))?;
    let ip = dir.join(IMAGES);
    fs::write(&ip, data.images.to_tns1_bytes()).map_err(|e| Error::io(&ip, e))?;
    if labeled {
        let (n, h, w) = (data.len(), data.images.shape()[1], data.images.shape()[2]);
        let l = Tensor::new(
            vec![n, h, w],
            data.labels.iter().map(|&v| v as f32).collect(),
        )?;
        let lp = dir.join(LABELS);
        fs::write(&lp, l.to_tns1_bytes()).map_err(|e| Error::io(&lp, e))?;
    }
    Ok(())
}

/// Generate and write the three splits under `root`; returns their paths
/// in the order source, target-train, target-eval.
pub fn write_splits(root: &Path, spec: &DomainSpec) -> Result<[PathBuf; 3]> {
    spec.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let source_dir = root.join(SOURCE_SPLIT);
    let train_dir = root.join(TARGET_TRAIN_SPLIT);
    let eval_dir = root.join(TARGET_EVAL_SPLIT);
    let src = generate(spec, Variant::Source, spec.n_train, split_seed(spec.seed, SOURCE_SPLIT))?;
    write_split(&source_dir, spec, SOURCE_SPLIT, &src, true)?;
    let tt = generate(
        spec,
        Variant::Target,
        spec.n_train,
        split_seed(spec.seed, TARGET_TRAIN_SPLIT),
    )?;
    write_split(&train_dir, spec, TARGET_TRAIN_SPLIT, &tt, false)?;
    let te = generate(
        spec,
        Variant::Target,
        spec.n_eval,
        split_seed(spec.seed, TARGET_EVAL_SPLIT),
    )?;
    write_split(&eval_dir, spec, TARGET_EVAL_SPLIT, &te, true)?;
    let mut kv = spec.to_kv();
    kv.set("format_version", FORMAT_VERSION);
    kv.set("splits", format!("{SOURCE_SPLIT},{TARGET_TRAIN_SPLIT},{TARGET_EVAL_SPLIT}"));
    kv.save(&root.join(MANIFEST))?;
    Ok([source_dir, train_dir, eval_dir])
}

pub fn read_manifest(dir: &Path) -> Result<KvMap> {
    KvMap::load(&dir.join(MANIFEST))
}

pub fn load_images(dir: &Path) -> Result<Tensor<f32>> {
    let p = dir.join(IMAGES);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let t = Tensor::from_tns1_bytes(&bytes)?;
    if t.rank() != 4 {
        return Err(Error::format("images.tns1", format!("expected rank 4, got {:?}", t.shape())));
    }
    Ok(t)
}

pub fn has_labels(dir: &Path) -> bool {
    dir.join(LABELS).exists()
}

pub fn load_labels(dir: &Path) -> Result<Vec<usize>> {
    let p = dir.join(LABELS);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let t = Tensor::<f32>::from_tns1_bytes(&bytes)?;
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::format("labels.tns1", format!("bad class index {v}")))
            }
        })
        .collect()
}

pub fn load_labeled(dir: &Path) -> Result<LabeledImages> {
    let images = load_images(dir)?;
    let labels = load_labels(dir)?;
    let px = images.shape()[..3].iter().product::<usize>();
    if labels.len() != px {
        return Err(Error::format(
            "labels.tns1",
            format!("{} labels for {px} pixels", labels.len()),
        ));
    }
    Ok(LabeledImages { images, labels })
}
