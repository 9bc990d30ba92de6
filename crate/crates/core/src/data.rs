//! Synthetic multi-label scenes, augmentation and dataset files.
//!
//! A scene draws a label set, then paints one coloured glyph per positive
//! class into its own cell of a coarse placement grid and adds Gaussian
//! pixel noise. Label sets come from independent per-class base draws, one
//! co-occurrence boost pass (each base-positive class `j` switches on class
//! `k` with probability `c[j][k]`), and rejection of empty sets. Base rates
//! are solved so that the class marginals after boosting and rejection equal
//! `density · f_k / Σ f`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LabelMatrix;
use crate::tensor::Tensor;
use crate::util::derive_seed_indexed;

/// Test examples are indexed from here so the splits never share an index.
pub const TEST_INDEX_OFFSET: u64 = 1 << 32;

const MAGIC: &[u8; 8] = b"L2DDATA1";
const FORMAT_VERSION: u32 = 1;

const COLORS: [(&str, [f64; 3]); 10] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.15, 0.25, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("magenta", [0.9, 0.15, 0.85]),
    ("cyan", [0.1, 0.85, 0.9]),
    ("orange", [1.0, 0.55, 0.05]),
    ("purple", [0.5, 0.1, 0.7]),
    ("white", [0.95, 0.95, 0.95]),
    ("olive", [0.5, 0.5, 0.1]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Glyph {
    Disc,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
    HBar,
    VBar,
}

const GLYPHS: [(&str, Glyph); 8] = [
    ("disc", Glyph::Disc),
    ("square", Glyph::Square),
    ("triangle", Glyph::Triangle),
    ("diamond", Glyph::Diamond),
    ("cross", Glyph::Cross),
    ("ring", Glyph::Ring),
    ("hbar", Glyph::HBar),
    ("vbar", Glyph::VBar),
];

/// Largest supported class count (distinct colour/glyph pairs).
pub const MAX_CLASSES: usize = COLORS.len() * GLYPHS.len();

fn class_style(k: usize) -> (usize, usize) {
    let color = k % COLORS.len();
    let glyph = (k + k / COLORS.len()) % GLYPHS.len();
    (color, glyph)
}

impl Glyph {
    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            Glyph::Disc => dx * dx + dy * dy <= r * r,
            Glyph::Square => ax <= 0.8 * r && ay <= 0.8 * r,
            Glyph::Triangle => dy.abs() <= r && ax <= (dy + r) / 2.0,
            Glyph::Diamond => ax + ay <= r,
            Glyph::Cross => (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r),
            Glyph::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= r * r / 4.0
            }
            Glyph::HBar => ay <= r / 3.0 && ax <= r,
            Glyph::VBar => ax <= r / 3.0 && ay <= r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Side of one placement cell in pixels.
    pub cell_size: usize,
    /// Mean positive labels per scene, at least 1.
    pub density: f64,
    /// Symmetric `[q × q]` boost probabilities with zero diagonal.
    pub cooccurrence: Vec<Vec<f64>>,
    /// Relative class frequencies; marginals are proportional to these.
    pub frequencies: Vec<f64>,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::with_classes(8, 2.0, 0)
    }
}

impl SceneSpec {
    /// 32×32×3 scenes with mild imbalance and boosted pairs (0,1), (2,3), ...
    pub fn with_classes(q: usize, density: f64, seed: u64) -> Self {
        let mut cooccurrence = vec![vec![0.0; q]; q];
        for k in (0..q.saturating_sub(1)).step_by(2) {
            cooccurrence[k][k + 1] = 0.5;
            cooccurrence[k + 1][k] = 0.5;
        }
        Self {
            num_classes: q,
            height: 32,
            width: 32,
            channels: 3,
            cell_size: 8,
            density,
            cooccurrence,
            frequencies: (0..q).map(|k| 1.0 / (1.0 + 0.25 * k as f64)).collect(),
            noise: 0.05,
            seed,
        }
    }

    pub fn cells(&self) -> usize {
        (self.height / self.cell_size.max(1)) * (self.width / self.cell_size.max(1))
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|k| {
                let (c, g) = class_style(k);
                format!("{}-{}", COLORS[c].0, GLYPHS[g].0)
            })
            .collect()
    }

    /// Class marginals the generator reproduces: `density · f_k / Σ f`.
    pub fn target_frequencies(&self) -> Vec<f64> {
        let total: f64 = self.frequencies.iter().sum();
        self.frequencies.iter().map(|f| self.density * f / total).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.num_classes;
        if !(2..=MAX_CLASSES).contains(&q) {
            return Err(Error::config(format!("class count {q} outside 2..={MAX_CLASSES}")));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.cell_size < 3 {
            return Err(Error::config("grid extents must be positive and cells at least 3 pixels"));
        }
        if q > self.cells() {
            return Err(Error::config(format!(
                "{q} classes cannot fit in {} placement cells",
                self.cells()
            )));
        }
        if !(self.density >= 1.0 && self.density.is_finite()) {
            return Err(Error::config(format!("density {} must be at least 1", self.density)));
        }
        if self.frequencies.len() != q || self.frequencies.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            return Err(Error::config("frequencies must be q positive finite values"));
        }
        if self.cooccurrence.len() != q || self.cooccurrence.iter().any(|r| r.len() != q) {
            return Err(Error::config("co-occurrence matrix must be q x q"));
        }
        for j in 0..q {
            if self.cooccurrence[j][j] != 0.0 {
                return Err(Error::config("co-occurrence diagonal must be zero"));
            }
            for k in 0..q {
                let c = self.cooccurrence[j][k];
                if !(0.0..=1.0).contains(&c) || c != self.cooccurrence[k][j] {
                    return Err(Error::config("co-occurrence must be symmetric with entries in [0, 1]"));
                }
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise level must be non-negative"));
        }
        if self.target_frequencies().iter().any(|&m| m >= 1.0) {
            return Err(Error::config(format!(
                "density {} forces a class marginal to 1 or more",
                self.density
            )));
        }
        Ok(())
    }

    fn marginals(&self, base: &[f64]) -> Vec<f64> {
        let q = self.num_classes;
        let none: f64 = base.iter().map(|r| 1.0 - r).product();
        let nonempty = 1.0 - none;
        (0..q)
            .map(|k| {
                let off: f64 = (1.0 - base[k])
                    * (0..q)
                        .filter(|&j| j != k)
                        .map(|j| 1.0 - self.cooccurrence[j][k] * base[j])
                        .product::<f64>();
                (1.0 - off) / nonempty
            })
            .collect()
    }

    /// Base rates whose boosted, non-empty marginals hit the targets.
    /// Returns `None` for the single-label limit (density exactly 1).
    fn base_rates(&self) -> Result<Option<Vec<f64>>> {
        let target = self.target_frequencies();
        if self.density - 1.0 < 1e-9 {
            return Ok(None);
        }
        let mut base: Vec<f64> = target.iter().map(|m| m.clamp(1e-6, 0.99)).collect();
        for _ in 0..20_000 {
            let got = self.marginals(&base);
            let worst = got
                .iter()
                .zip(&target)
                .map(|(g, t)| (g - t).abs())
                .fold(0.0, f64::max);
            if worst < 1e-12 {
                return Ok(Some(base));
            }
            for k in 0..base.len() {
                base[k] = (base[k] * (target[k] / got[k]).sqrt()).clamp(1e-12, 0.999_999);
            }
        }
        Err(Error::config(format!(
            "no base rates reproduce density {} under these co-occurrence boosts",
            self.density
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// `[H, W, C]` values in `[0, 1]`.
    pub grid: Vec<f32>,
    pub labels: Vec<u8>,
}

/// Samples scenes for one spec; base rates are solved once.
pub struct SceneGenerator {
    spec: SceneSpec,
    base: Option<Vec<f64>>,
}

impl SceneGenerator {
    pub fn new(spec: SceneSpec) -> Result<Self> {
        spec.validate()?;
        let base = spec.base_rates()?;
        Ok(Self { spec, base })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    /// A pure function of the spec and the global index.
    pub fn example(&self, index: u64) -> Example {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_indexed(self.spec.seed, "scene", index));
        let labels = self.sample_labels(&mut rng);
        let grid = self.render(&labels, &mut rng);
        Example { grid, labels }
    }

    fn sample_labels(&self, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let q = self.spec.num_classes;
        let Some(base) = &self.base else {
            let freqs = &self.spec.frequencies;
            let mut u = rng.gen::<f64>() * freqs.iter().sum::<f64>();
            let mut y = vec![0; q];
            let k = freqs
                .iter()
                .position(|&f| {
                    u -= f;
                    u < 0.0
                })
                .unwrap_or(q - 1);
            y[k] = 1;
            return y;
        };
        loop {
            let seeds: Vec<bool> = base.iter().map(|&r| rng.gen_bool(r)).collect();
            if !seeds.contains(&true) {
                continue;
            }
            let mut y: Vec<u8> = seeds.iter().map(|&s| s as u8).collect();
            for j in (0..q).filter(|&j| seeds[j]) {
                for k in 0..q {
                    let c = self.spec.cooccurrence[j][k];
                    if c > 0.0 && rng.gen_bool(c) {
                        y[k] = 1;
                    }
                }
            }
            return y;
        }
    }

    fn render(&self, labels: &[u8], rng: &mut ChaCha8Rng) -> Vec<f32> {
        let s = &self.spec;
        let (h, w, c) = (s.height, s.width, s.channels);
        let cell = s.cell_size as f64;
        let cols = s.width / s.cell_size;
        let mut grid = vec![0.0f64; h * w * c];
        let mut free: Vec<usize> = (0..s.cells()).collect();
        for k in (0..labels.len()).filter(|&k| labels[k] == 1) {
            let slot = free.swap_remove(rng.gen_range(0..free.len()));
            let (cy0, cx0) = ((slot / cols) as f64 * cell, (slot % cols) as f64 * cell);
            let r = cell * rng.gen_range(0.3..0.45);
            let cy = cy0 + cell / 2.0 + rng.gen_range(-0.1..0.1) * cell;
            let cx = cx0 + cell / 2.0 + rng.gen_range(-0.1..0.1) * cell;
            let (color, glyph) = class_style(k);
            let rgb = COLORS[color].1;
            let tint: Vec<f64> = (0..c)
                .map(|ch| (rgb[ch % 3] + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0))
                .collect();
            let glyph = GLYPHS[glyph].1;
            let y_lo = (cy0 as usize).min(h);
            let x_lo = (cx0 as usize).min(w);
            for py in y_lo..(y_lo + s.cell_size).min(h) {
                for px in x_lo..(x_lo + s.cell_size).min(w) {
                    let (dx, dy) = (px as f64 + 0.5 - cx, py as f64 + 0.5 - cy);
                    // the centre pixel is always painted so no glyph vanishes
                    if glyph.covers(dx, dy, r) || (dx.abs() <= 0.5 && dy.abs() <= 0.5) {
                        let at = (py * w + px) * c;
                        grid[at..at + c].copy_from_slice(&tint);
                    }
                }
            }
        }
        if s.noise > 0.0 {
            let normal = Normal::new(0.0, s.noise).expect("validated noise");
            for v in &mut grid {
                *v += normal.sample(rng);
            }
        }
        grid.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub split: Split,
    /// Global generator index of each example.
    pub indices: Vec<u64>,
    /// `[n, H, W, C]`.
    pub images: Vec<f32>,
    /// `[n, q]`.
    pub labels: Vec<u8>,
}

/// Train and test sets from one spec.
pub fn generate_dataset(spec: &SceneSpec, n_train: usize, n_test: usize) -> Result<(Dataset, Dataset)> {
    let generator = SceneGenerator::new(spec.clone())?;
    let build = |split: Split, indices: Vec<u64>| {
        let mut images = Vec::with_capacity(indices.len() * spec.height * spec.width * spec.channels);
        let mut labels = Vec::with_capacity(indices.len() * spec.num_classes);
        for &i in &indices {
            let ex = generator.example(i);
            images.extend(ex.grid);
            labels.extend(ex.labels);
        }
        Dataset {
            spec: spec.clone(),
            split,
            indices,
            images,
            labels,
        }
    };
    Ok((
        build(Split::Train, (0..n_train as u64).collect()),
        build(Split::Test, (0..n_test as u64).map(|i| TEST_INDEX_OFFSET + i).collect()),
    ))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn image_len(&self) -> usize {
        self.spec.height * self.spec.width * self.spec.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> &[u8] {
        let q = self.num_classes();
        &self.labels[i * q..(i + 1) * q]
    }

    /// Examples `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        let (n, q) = (self.image_len(), self.num_classes());
        Dataset {
            spec: self.spec.clone(),
            split: self.split,
            indices: self.indices[range.clone()].to_vec(),
            images: self.images[range.start * n..range.end * n].to_vec(),
            labels: self.labels[range.start * q..range.end * q].to_vec(),
        }
    }

    pub fn label_matrix(&self, rows: &[usize]) -> Result<LabelMatrix> {
        let bits = rows.iter().flat_map(|&i| self.label(i).iter().copied()).collect();
        LabelMatrix::new(bits, rows.len(), self.num_classes())
    }

    /// `[b, H, W, C]` batch of the given rows, each passed through `map`.
    pub fn batch<F>(&self, rows: &[usize], mut map: F) -> Result<Tensor<f32>>
    where
        F: FnMut(usize, &[f32]) -> Vec<f32>,
    {
        let s = &self.spec;
        let mut data = Vec::with_capacity(rows.len() * self.image_len());
        for &i in rows {
            data.extend(map(i, self.image(i)));
        }
        Ok(Tensor::new(data, &[rows.len(), s.height, s.width, s.channels])?)
    }

    /// Mean positive labels per example.
    pub fn label_density(&self) -> f64 {
        self.labels.iter().map(|&v| v as f64).sum::<f64>() / self.len().max(1) as f64
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            format: "l2d-dataset".into(),
            version: FORMAT_VERSION,
            split: self.split,
            count: self.len(),
            num_classes: self.num_classes(),
            label_width: self.num_classes(),
            class_names: self.spec.class_names(),
            spec: self.spec.clone(),
            indices: self.indices.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    split: Split,
    count: usize,
    num_classes: usize,
    label_width: usize,
    class_names: Vec<String>,
    spec: SceneSpec,
    indices: Vec<u64>,
}

/// Layout: magic, `u64` manifest length, JSON manifest, f32 grid block,
/// u8 label block (all little-endian).
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let manifest = serde_json::to_vec(&ds.manifest())?;
    let mut out = Vec::with_capacity(16 + manifest.len() + ds.images.len() * 4 + ds.labels.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for v in &ds.images {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&ds.labels);
    File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    parse_dataset(&bytes)
}

fn take<'a>(bytes: &'a [u8], at: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    bytes.get(at..at.saturating_add(len)).ok_or_else(|| {
        Error::format(
            bytes.len() as u64,
            format!("file ends before {what} ({len} bytes from offset {at})"),
        )
    })
}

pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    if take(bytes, 0, 8, "magic")? != MAGIC {
        return Err(Error::format(0, "not a dataset file"));
    }
    let len = u64::from_le_bytes(take(bytes, 8, 8, "manifest length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::format(8, "manifest length overflows"))?;
    let manifest: Manifest = serde_json::from_slice(take(bytes, 16, len, "manifest")?)
        .map_err(|e| Error::format(16, format!("bad manifest: {e}")))?;
    if manifest.format != "l2d-dataset" || manifest.version != FORMAT_VERSION {
        return Err(Error::format(16, format!("unsupported format {} v{}", manifest.format, manifest.version)));
    }
    let spec = manifest.spec;
    spec.validate().map_err(|e| Error::format(16, format!("manifest spec: {e}")))?;
    let q = manifest.num_classes;
    if q != manifest.label_width || q != spec.num_classes || manifest.class_names.len() != q {
        return Err(Error::format(
            16,
            format!(
                "class count {q} disagrees with label width {} / spec {} / {} names",
                manifest.label_width,
                spec.num_classes,
                manifest.class_names.len()
            ),
        ));
    }
    if manifest.indices.len() != manifest.count {
        return Err(Error::format(16, "index list length differs from count"));
    }
    let n = manifest.count;
    let grid_at = 16 + len;
    let grid_len = n * spec.height * spec.width * spec.channels;
    let grid = take(bytes, grid_at, grid_len * 4, "grid block")?;
    let images: Vec<f32> = grid
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(bad) = images.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::format((grid_at + 4 * bad) as u64, "grid value outside [0, 1]"));
    }
    let label_at = grid_at + grid_len * 4;
    let labels = take(bytes, label_at, n * q, "label block")?.to_vec();
    if let Some(bad) = labels.iter().position(|&v| v > 1) {
        return Err(Error::format((label_at + bad) as u64, "label byte is not 0 or 1"));
    }
    if let Some(row) = (0..n).find(|i| labels[i * q..(i + 1) * q].iter().all(|&v| v == 0)) {
        return Err(Error::format((label_at + row * q) as u64, "example without a positive label"));
    }
    if bytes.len() != label_at + n * q {
        return Err(Error::format((label_at + n * q) as u64, "trailing bytes after label block"));
    }
    Ok(Dataset {
        spec,
        split: manifest.split,
        indices: manifest.indices,
        images,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    None,
    #[default]
    Weak,
    Strong,
}

/// Mirrors columns of an `[H, W, C]` grid.
pub fn hflip(x: &[f32], h: usize, w: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for y in 0..h {
        for col in 0..w {
            let src = (y * w + col) * c;
            let dst = (y * w + (w - 1 - col)) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    out
}

/// Zeroes the `side × side` square at (`top`, `left`), clipped to the grid.
pub fn cutout(x: &mut [f32], h: usize, w: usize, c: usize, top: usize, left: usize, side: usize) {
    for y in top..(top + side).min(h) {
        for col in left..(left + side).min(w) {
            let at = (y * w + col) * c;
            x[at..at + c].fill(0.0);
        }
    }
}

/// Shifts content by (`dy`, `dx`) pixels, filling with zeros.
pub fn translate(x: &[f32], h: usize, w: usize, c: usize, dy: isize, dx: isize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for y in 0..h as isize {
        for col in 0..w as isize {
            let (sy, sx) = (y - dy, col - dx);
            if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                let src = (sy as usize * w + sx as usize) * c;
                let dst = (y as usize * w + col as usize) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

/// Weak: horizontal flip with probability ½. Strong: weak, then a cutout of
/// side ⌈H/4⌉, then one of brightness shift, channel scale or a translation
/// of up to ⌈H/16⌉ pixels. Output stays in `[0, 1]`.
pub fn augment(x: &[f32], h: usize, w: usize, c: usize, mode: AugmentMode, rng: &mut impl Rng) -> Vec<f32> {
    augment_view(x, h, w, c, mode, rng).0
}

/// [`augment`], also reporting whether the grid was flipped.
pub fn augment_view(
    x: &[f32],
    h: usize,
    w: usize,
    c: usize,
    mode: AugmentMode,
    rng: &mut impl Rng,
) -> (Vec<f32>, bool) {
    if mode == AugmentMode::None {
        return (x.to_vec(), false);
    }
    let flipped = rng.gen_bool(0.5);
    let mut out = if flipped { hflip(x, h, w, c) } else { x.to_vec() };
    if mode == AugmentMode::Weak {
        return (out, flipped);
    }
    let side = h.div_ceil(4);
    let top = rng.gen_range(0..h);
    let left = rng.gen_range(0..w);
    cutout(&mut out, h, w, c, top, left, side);
    match rng.gen_range(0..3) {
        0 => {
            let shift = rng.gen_range(-0.2f32..0.2);
            out.iter_mut().for_each(|v| *v = (*v + shift).clamp(0.0, 1.0));
        }
        1 => {
            let scales: Vec<f32> = (0..c).map(|_| rng.gen_range(0.7f32..1.3)).collect();
            for (i, v) in out.iter_mut().enumerate() {
                *v = (*v * scales[i % c]).clamp(0.0, 1.0);
            }
        }
        _ => {
            let reach = h.div_ceil(16) as isize;
            let dy = rng.gen_range(-reach..=reach);
            let dx = rng.gen_range(-reach..=reach);
            out = translate(&out, h, w, c, dy, dx);
        }
    }
    (out, flipped)
}
