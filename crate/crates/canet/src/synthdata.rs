//! Deterministic synthetic bitemporal dataset generator.
//!
//! Each sample plants simple parametric shapes (boxes, discs, bars) on a
//! textured background; objects appear, vanish, or persist between the two
//! frames. Datasets differ along two axes: appearance (brightness, channel
//! gain, noise, texture) and labeling (which shape classes count as
//! interesting, and whether masks are fine or dilated). Every sample is a
//! pure function of (spec, index).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netpbm;
use crate::tensor::{Dims, LabelMap, Tensor};
use crate::DatasetId;

/// Parametric object classes; footprints are analytic so label soundness is
/// checkable exactly.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Box,
    Disc,
    Bar,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Fine,
    Coarse,
}

/// Appearance parameters of one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleSpec {
    /// Additive brightness offset, in [-0.3, 0.3].
    pub brightness: f64,
    /// Per-channel multiplicative gain, each in [0.7, 1.3].
    pub gain: [f64; 3],
    /// Additive Gaussian noise sigma, in [0, 0.1].
    pub noise_sigma: f64,
    /// Spatial frequency scale of the background texture.
    pub texture_freq: f64,
}

impl Default for StyleSpec {
    fn default() -> Self {
        StyleSpec { brightness: 0.0, gain: [1.0, 1.0, 1.0], noise_sigma: 0.02, texture_freq: 1.0 }
    }
}

/// Recipe for one synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub name: String,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub style: StyleSpec,
    /// Shape classes whose changes are labeled; others change silently.
    pub interest: Vec<ShapeClass>,
    pub granularity: Granularity,
    /// Dilation radius used when granularity is coarse.
    pub coarse_radius: usize,
    /// Probability that an object appears or vanishes between frames.
    pub change_rate: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            name: "synthetic".into(),
            seed: 0,
            n_train: 400,
            n_val: 100,
            n_test: 100,
            image_h: 64,
            image_w: 64,
            style: StyleSpec::default(),
            interest: vec![ShapeClass::Box, ShapeClass::Disc],
            granularity: Granularity::Fine,
            coarse_radius: 2,
            change_rate: 0.5,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.interest.is_empty() {
            return Err(Error::Config("interest classes must be non-empty".into()));
        }
        if self.image_h < 16 || self.image_w < 16 {
            return Err(Error::Config("image size must be at least 16x16".into()));
        }
        if !(0.0..=1.0).contains(&self.change_rate) {
            return Err(Error::Config(format!("change_rate {} not in [0, 1]", self.change_rate)));
        }
        Ok(())
    }

    pub fn id(&self) -> DatasetId {
        DatasetId::new(self.name.clone())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Presence {
    Persistent,
    Appeared,
    Vanished,
}

/// One planted object, kept as provenance on every sample.
#[derive(Clone, Debug)]
pub struct ObjectSpec {
    pub class: ShapeClass,
    pub cx: f64,
    pub cy: f64,
    /// Half extent along x (radius for discs).
    pub a: f64,
    /// Half extent along y.
    pub b: f64,
    pub color: [f32; 3],
    pub presence: Presence,
}

impl ObjectSpec {
    /// Analytic footprint test at a pixel center.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let px = x as f64 + 0.5;
        let py = y as f64 + 0.5;
        match self.class {
            ShapeClass::Box | ShapeClass::Bar => {
                (px - self.cx).abs() <= self.a && (py - self.cy).abs() <= self.b
            }
            ShapeClass::Disc => {
                let dx = px - self.cx;
                let dy = py - self.cy;
                dx * dx + dy * dy <= self.a * self.a
            }
        }
    }

    pub fn changed(&self) -> bool {
        self.presence != Presence::Persistent
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        (self.cx - self.a, self.cy - self.b, self.cx + self.a, self.cy + self.b)
    }

    fn overlaps(&self, other: &ObjectSpec) -> bool {
        let (ax0, ay0, ax1, ay1) = self.bbox();
        let (bx0, by0, bx1, by1) = other.bbox();
        ax0 <= bx1 + 1.0 && bx0 <= ax1 + 1.0 && ay0 <= by1 + 1.0 && by0 <= ay1 + 1.0
    }
}

/// One bitemporal training sample.
#[derive(Clone, Debug)]
pub struct SamplePair {
    /// First frame, dims (1, 3, h, w), values in [0, 1].
    pub x1: Tensor<f32>,
    /// Second frame, same dims.
    pub x2: Tensor<f32>,
    /// Change label, dims (1, h, w).
    pub label: LabelMap,
    /// Planted objects; empty for samples loaded from disk.
    pub provenance: Vec<ObjectSpec>,
}

impl SamplePair {
    /// Horizontal flip applied jointly to both frames and the label.
    pub fn hflipped(&self) -> SamplePair {
        let flip_img = |t: &Tensor<f32>| {
            let d = t.dims();
            let mut out = vec![0.0f32; d.count()];
            for c in 0..d.c {
                for y in 0..d.h {
                    for x in 0..d.w {
                        out[d.at(0, c, y, x)] = t.data()[d.at(0, c, y, d.w - 1 - x)];
                    }
                }
            }
            Tensor::new(d, out).expect("same dims")
        };
        let (h, w) = (self.label.h, self.label.w);
        let mut label = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                label[y * w + x] = self.label.at(0, y, w - 1 - x);
            }
        }
        SamplePair {
            x1: flip_img(&self.x1),
            x2: flip_img(&self.x2),
            label: LabelMap::new(1, h, w, label).expect("same dims"),
            provenance: Vec::new(),
        }
    }
}

// ── generation ───────────────────────────────────────────────────────

fn luminance(c: &[f32; 3]) -> f32 {
    (c[0] + c[1] + c[2]) / 3.0
}

/// Render one frame: textured background plus the objects present in it.
fn render_frame(
    spec: &DatasetSpec,
    bg: &[f32],
    objects: &[ObjectSpec],
    present: impl Fn(&ObjectSpec) -> bool,
) -> Vec<f32> {
    let (h, w) = (spec.image_h, spec.image_w);
    let mut img = bg.to_vec();
    for obj in objects.iter().filter(|o| present(o)) {
        let x0 = (obj.cx - obj.a - 1.0).max(0.0) as usize;
        let x1 = ((obj.cx + obj.a + 1.0) as usize).min(w - 1);
        let y0 = (obj.cy - obj.b - 1.0).max(0.0) as usize;
        let y1 = ((obj.cy + obj.b + 1.0) as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if obj.contains(x, y) {
                    for c in 0..3 {
                        img[(c * h + y) * w + x] = obj.color[c];
                    }
                }
            }
        }
    }
    img
}

/// Apply the dataset style plus small per-frame jitter; clamps to [0, 1].
fn apply_style(img: &mut [f32], spec: &DatasetSpec, h: usize, w: usize, rng: &mut ChaCha8Rng) {
    let style = &spec.style;
    let brightness = style.brightness + rng.gen_range(-0.02..0.02);
    let gains: Vec<f64> = style.gain.iter().map(|g| g * (1.0 + rng.gen_range(-0.02..0.02))).collect();
    let noise = Normal::new(0.0f64, style.noise_sigma.max(1e-12)).expect("valid sigma");
    for c in 0..3 {
        for p in 0..h * w {
            let i = c * h * w + p;
            let mut v = img[i] as f64 * gains[c] + brightness;
            if style.noise_sigma > 0.0 {
                v += noise.sample(rng);
            }
            img[i] = v.clamp(0.0, 1.0) as f32;
        }
    }
}

/// Generate the sample at `index`. The result is fully determined by
/// `(spec.seed, index)`; splits address disjoint index ranges.
pub fn generate_pair(spec: &DatasetSpec, index: u64) -> SamplePair {
    let (h, w) = (spec.image_h, spec.image_w);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index.wrapping_add(1));

    // background: smooth two-mode texture around a per-channel base level
    let base: [f64; 3] = [
        rng.gen_range(0.30..0.50),
        rng.gen_range(0.30..0.50),
        rng.gen_range(0.30..0.50),
    ];
    let amp = rng.gen_range(0.03..0.08);
    let fx = spec.style.texture_freq * rng.gen_range(1.0..2.0);
    let fy = spec.style.texture_freq * rng.gen_range(1.0..2.0);
    let (phx, phy) = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU));
    let mut bg = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let t = amp
                * ((std::f64::consts::TAU * fx * x as f64 / w as f64 + phx).sin()
                    + (std::f64::consts::TAU * fy * y as f64 / h as f64 + phy).sin());
            for c in 0..3 {
                bg[(c * h + y) * w + x] = (base[c] + t) as f32;
            }
        }
    }
    let bg_lum = ((base[0] + base[1] + base[2]) / 3.0) as f32;

    // plant 3..=8 non-overlapping objects
    let count = rng.gen_range(3..=8);
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = [ShapeClass::Box, ShapeClass::Disc, ShapeClass::Bar][rng.gen_range(0..3)];
        let presence = if rng.gen_bool(spec.change_rate) {
            if rng.gen_bool(0.5) {
                Presence::Appeared
            } else {
                Presence::Vanished
            }
        } else {
            Presence::Persistent
        };
        let mut color = [0.0f32; 3];
        for _ in 0..20 {
            for c in &mut color {
                *c = rng.gen_range(0.0..1.0);
            }
            if (luminance(&color) - bg_lum).abs() >= 0.25 {
                break;
            }
        }
        // largest half-extent that keeps an object inside the frame
        let lim = (h.min(w) as f64 / 2.0 - 2.5).max(3.2);
        for _attempt in 0..50 {
            let (a, b) = match class {
                ShapeClass::Box => {
                    let a = rng.gen_range(3.0..7.0f64.min(lim));
                    (a, (a * rng.gen_range(0.8..1.25)).min(lim))
                }
                ShapeClass::Disc => {
                    let r = rng.gen_range(3.0..7.0f64.min(lim));
                    (r, r)
                }
                ShapeClass::Bar => {
                    let long = rng.gen_range(5.0..11.0f64.min(lim).max(5.2));
                    let thin = rng.gen_range(1.0..2.0);
                    if rng.gen_bool(0.5) {
                        (long, thin)
                    } else {
                        (thin, long)
                    }
                }
            };
            let cx = rng.gen_range(a + 1.0..w as f64 - a - 1.0);
            let cy = rng.gen_range(b + 1.0..h as f64 - b - 1.0);
            let candidate = ObjectSpec { class, cx, cy, a, b, color, presence };
            if objects.iter().all(|o| !o.overlaps(&candidate)) {
                objects.push(candidate);
                break;
            }
        }
    }

    let mut img1 = render_frame(spec, &bg, &objects, |o| o.presence != Presence::Appeared);
    let mut img2 = render_frame(spec, &bg, &objects, |o| o.presence != Presence::Vanished);
    apply_style(&mut img1, spec, h, w, &mut rng);
    apply_style(&mut img2, spec, h, w, &mut rng);

    // label: changed interest-class footprints, optionally dilated
    let mut fine = vec![0u8; h * w];
    for obj in objects.iter().filter(|o| o.changed() && spec.interest.contains(&o.class)) {
        for y in 0..h {
            for x in 0..w {
                if obj.contains(x, y) {
                    fine[y * w + x] = 1;
                }
            }
        }
    }
    let label = match spec.granularity {
        Granularity::Fine => fine,
        Granularity::Coarse => coarsen_label(&fine, h, w, spec.coarse_radius),
    };

    SamplePair {
        x1: Tensor::new(Dims::new(1, 3, h, w), img1).expect("render dims"),
        x2: Tensor::new(Dims::new(1, 3, h, w), img2).expect("render dims"),
        label: LabelMap::new(1, h, w, label).expect("label dims"),
        provenance: objects,
    }
}

/// Morphological dilation with a disc structuring element.
pub fn coarsen_label(fine: &[u8], h: usize, w: usize, radius: usize) -> Vec<u8> {
    if radius == 0 {
        return fine.to_vec();
    }
    let r = radius as isize;
    let mut out = vec![0u8; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if fine[(y * w as isize + x) as usize] == 0 {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy > r * r {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                        out[(ny * w as isize + nx) as usize] = 1;
                    }
                }
            }
        }
    }
    out
}

/// The four-dataset family realizing the two difference axes: historical,
/// appearance-shifted, labeling-shifted, and both shifts together.
pub fn make_dataset_family(base_seed: u64) -> [DatasetSpec; 4] {
    let hist_style = StyleSpec::default();
    let shifted_style = StyleSpec {
        brightness: 0.18,
        gain: [1.25, 0.80, 1.10],
        noise_sigma: 0.06,
        texture_freq: 2.5,
    };
    let hist = DatasetSpec {
        name: "hist".into(),
        seed: base_seed.wrapping_add(1),
        ..DatasetSpec::default()
    };
    let style = DatasetSpec {
        name: "style".into(),
        seed: base_seed.wrapping_add(2),
        style: shifted_style.clone(),
        ..hist.clone()
    };
    let label = DatasetSpec {
        name: "label".into(),
        seed: base_seed.wrapping_add(3),
        style: hist_style,
        interest: vec![ShapeClass::Bar],
        granularity: Granularity::Coarse,
        ..hist.clone()
    };
    let both = DatasetSpec {
        name: "both".into(),
        seed: base_seed.wrapping_add(4),
        style: shifted_style,
        interest: vec![ShapeClass::Bar],
        granularity: Granularity::Coarse,
        ..hist.clone()
    };
    [hist, style, label, both]
}

// ── disk layout ──────────────────────────────────────────────────────

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Global index offset: splits address disjoint index ranges of the
    /// same deterministic stream.
    pub fn offset(self, spec: &DatasetSpec) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => spec.n_train as u64,
            Split::Test => (spec.n_train + spec.n_val) as u64,
        }
    }

    pub fn len(self, spec: &DatasetSpec) -> usize {
        match self {
            Split::Train => spec.n_train,
            Split::Val => spec.n_val,
            Split::Test => spec.n_test,
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_rgb8(t: &Tensor<f32>) -> Vec<u8> {
    let d = t.dims();
    let mut out = vec![0u8; 3 * d.plane()];
    for c in 0..3 {
        for p in 0..d.plane() {
            out[p * 3 + c] = quantize(t.data()[d.at(0, c, 0, 0) + p]);
        }
    }
    out
}

fn from_rgb8(w: usize, h: usize, rgb: &[u8]) -> Tensor<f32> {
    let d = Dims::new(1, 3, h, w);
    let mut out = vec![0.0f32; d.count()];
    for c in 0..3 {
        for p in 0..h * w {
            out[d.at(0, c, 0, 0) + p] = rgb[p * 3 + c] as f32 / 255.0;
        }
    }
    Tensor::new(d, out).expect("rgb dims")
}

/// Write one sample as `A/<index>.ppm`, `B/<index>.ppm`, `label/<index>.pgm`
/// under `dir`.
pub fn save_pair(pair: &SamplePair, dir: &Path, index: usize) -> Result<()> {
    for sub in ["A", "B", "label"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let d = pair.x1.dims();
    netpbm::write_ppm(&dir.join(format!("A/{index:05}.ppm")), d.w, d.h, &to_rgb8(&pair.x1))?;
    netpbm::write_ppm(&dir.join(format!("B/{index:05}.ppm")), d.w, d.h, &to_rgb8(&pair.x2))?;
    let gray: Vec<u8> = pair.label.data().iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
    netpbm::write_pgm(&dir.join(format!("label/{index:05}.pgm")), d.w, d.h, &gray)?;
    Ok(())
}

/// Read the sample at `index` from a split directory, checking that the
/// three files agree on dimensions.
pub fn load_pair(dir: &Path, index: usize) -> Result<SamplePair> {
    let (wa, ha, a) = netpbm::read_ppm(&dir.join(format!("A/{index:05}.ppm")))?;
    let (wb, hb, b) = netpbm::read_ppm(&dir.join(format!("B/{index:05}.ppm")))?;
    let (wl, hl, l) = netpbm::read_pgm(&dir.join(format!("label/{index:05}.pgm")))?;
    if (wa, ha) != (wb, hb) || (wa, ha) != (wl, hl) {
        return Err(Error::format(
            format!("{}", dir.display()),
            format!("sample {index:05}: A is {wa}x{ha}, B is {wb}x{hb}, label is {wl}x{hl}"),
        ));
    }
    let label: Vec<u8> = l.iter().map(|&v| u8::from(v >= 128)).collect();
    Ok(SamplePair {
        x1: from_rgb8(wa, ha, &a),
        x2: from_rgb8(wb, hb, &b),
        label: LabelMap::new(1, ha, wa, label)?,
        provenance: Vec::new(),
    })
}

/// An in-memory dataset with its three splits.
pub struct Dataset {
    pub id: DatasetId,
    pub spec: Option<DatasetSpec>,
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

impl Dataset {
    /// Generate all splits in memory.
    pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
        spec.validate()?;
        let gen_split = |split: Split| -> Vec<SamplePair> {
            let off = split.offset(spec);
            (0..split.len(spec) as u64).map(|i| generate_pair(spec, off + i)).collect()
        };
        Ok(Dataset {
            id: spec.id(),
            spec: Some(spec.clone()),
            train: gen_split(Split::Train),
            val: gen_split(Split::Val),
            test: gen_split(Split::Test),
        })
    }

    /// Write all splits plus the `spec.txt` manifest under `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        for (split, pairs) in
            [(Split::Train, &self.train), (Split::Val, &self.val), (Split::Test, &self.test)]
        {
            let dir = root.join(split.as_str());
            for (i, pair) in pairs.iter().enumerate() {
                save_pair(pair, &dir, i)?;
            }
        }
        if let Some(spec) = &self.spec {
            let text = toml::to_string_pretty(spec)
                .map_err(|e| Error::format("spec manifest", e.to_string()))?;
            fs::write(root.join("spec.txt"), text).map_err(|e| Error::io(root.join("spec.txt"), e))?;
        }
        Ok(())
    }

    /// Load a dataset directory in the `<split>/{A,B,label}` layout. The
    /// manifest is optional so external real-image directories also load;
    /// without one the dataset is named after the directory.
    pub fn load(root: &Path) -> Result<Dataset> {
        let spec = match fs::read_to_string(root.join("spec.txt")) {
            Ok(text) => Some(
                toml::from_str::<DatasetSpec>(&text)
                    .map_err(|e| Error::format("spec manifest", e.to_string()))?,
            ),
            Err(_) => None,
        };
        let id = match &spec {
            Some(s) => s.id(),
            None => DatasetId::new(
                root.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into()),
            ),
        };
        let load_split = |split: Split| -> Result<Vec<SamplePair>> {
            let dir = root.join(split.as_str());
            if !dir.join("A").is_dir() {
                return Ok(Vec::new());
            }
            let mut indices: Vec<usize> = fs::read_dir(dir.join("A"))
                .map_err(|e| Error::io(dir.join("A"), e))?
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    let name = e.file_name().to_string_lossy().into_owned();
                    name.strip_suffix(".ppm").and_then(|s| s.parse::<usize>().ok())
                })
                .collect();
            indices.sort_unstable();
            indices.iter().map(|&i| load_pair(&dir, i)).collect()
        };
        Ok(Dataset {
            id,
            spec,
            train: load_split(Split::Train)?,
            val: load_split(Split::Val)?,
            test: load_split(Split::Test)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(t: &Tensor<f32>) -> Vec<u32> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let spec = DatasetSpec { seed: 5, ..DatasetSpec::default() };
        for index in [0u64, 7, 123] {
            let a = generate_pair(&spec, index);
            let b = generate_pair(&spec, index);
            assert_eq!(bits(&a.x1), bits(&b.x1));
            assert_eq!(bits(&a.x2), bits(&b.x2));
            assert_eq!(a.label, b.label);
        }
        // different indices differ
        let a = generate_pair(&spec, 0);
        let b = generate_pair(&spec, 1);
        assert_ne!(bits(&a.x1), bits(&b.x1));
    }

    #[test]
    fn zero_change_rate_gives_empty_labels_and_jitter_only_differences() {
        let spec = DatasetSpec { seed: 9, change_rate: 0.0, ..DatasetSpec::default() };
        for index in 0..10 {
            let pair = generate_pair(&spec, index);
            assert!(pair.label.data().iter().all(|&v| v == 0));
            assert!(pair.provenance.iter().all(|o| !o.changed()));
            // frames differ only by style jitter and noise: bounded error
            let max_diff = pair
                .x1
                .data()
                .iter()
                .zip(pair.x2.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_diff < 0.5, "jitter-only difference too large: {max_diff}");
        }
    }

    #[test]
    fn changed_non_interest_objects_are_not_labeled() {
        let spec = DatasetSpec {
            seed: 11,
            interest: vec![ShapeClass::Box],
            granularity: Granularity::Fine,
            ..DatasetSpec::default()
        };
        let mut saw_silent_change = false;
        for index in 0..30 {
            let pair = generate_pair(&spec, index);
            for obj in pair.provenance.iter().filter(|o| o.changed() && o.class != ShapeClass::Box) {
                saw_silent_change = true;
                for y in 0..spec.image_h {
                    for x in 0..spec.image_w {
                        if obj.contains(x, y) {
                            assert_eq!(
                                pair.label.at(0, y, x),
                                0,
                                "non-interest change must stay unlabeled"
                            );
                        }
                    }
                }
            }
        }
        assert!(saw_silent_change, "fixture never produced a non-interest change");
    }

    #[test]
    fn labels_are_sound_against_provenance() {
        // every labeled pixel lies in the (granularity-adjusted) footprint
        // of a changed interest object: rebuild the mask from provenance
        let spec = DatasetSpec { seed: 13, ..DatasetSpec::default() };
        let coarse_spec = DatasetSpec {
            seed: 13,
            granularity: Granularity::Coarse,
            coarse_radius: 2,
            ..DatasetSpec::default()
        };
        for s in [&spec, &coarse_spec] {
            for index in 0..10 {
                let pair = generate_pair(s, index);
                let (h, w) = (s.image_h, s.image_w);
                let mut fine = vec![0u8; h * w];
                for obj in
                    pair.provenance.iter().filter(|o| o.changed() && s.interest.contains(&o.class))
                {
                    for y in 0..h {
                        for x in 0..w {
                            if obj.contains(x, y) {
                                fine[y * w + x] = 1;
                            }
                        }
                    }
                }
                let expect = match s.granularity {
                    Granularity::Fine => fine,
                    Granularity::Coarse => coarsen_label(&fine, h, w, s.coarse_radius),
                };
                assert_eq!(pair.label.data(), &expect[..]);
            }
        }
    }

    #[test]
    fn coarsen_trivial_cases() {
        let mut fine = vec![0u8; 25];
        fine[12] = 1;
        assert_eq!(coarsen_label(&fine, 5, 5, 0), fine);
        let plus = coarsen_label(&fine, 5, 5, 1);
        let mut expect = vec![0u8; 25];
        for &i in &[7, 11, 12, 13, 17] {
            expect[i] = 1;
        }
        assert_eq!(plus, expect, "radius-1 disc is the 5-pixel plus shape");
    }

    proptest! {
        #[test]
        fn coarse_masks_contain_fine_masks(
            mask in proptest::collection::vec(0u8..=1, 64),
            radius in 0usize..4,
        ) {
            let out = coarsen_label(&mask, 8, 8, radius);
            for (f, c) in mask.iter().zip(&out) {
                prop_assert!(c >= f, "dilation must be monotone");
            }
        }
    }

    #[test]
    fn family_realizes_both_difference_axes() {
        let [hist, style, label, both] = make_dataset_family(100);
        assert_eq!(hist.interest, style.interest);
        assert_eq!(hist.granularity, style.granularity);
        assert_eq!(label.style, hist.style);
        assert_ne!(label.interest, hist.interest);
        assert_eq!(both.style, style.style);
        assert_eq!(both.interest, label.interest);

        // appearance shift moves pixel-intensity histograms
        let histogram = |spec: &DatasetSpec| -> Vec<f64> {
            let mut bins = vec![0f64; 32];
            let mut total = 0f64;
            for index in 0..100 {
                let pair = generate_pair(spec, index);
                for v in pair.x1.data().iter().chain(pair.x2.data()) {
                    let b = ((v * 32.0) as usize).min(31);
                    bins[b] += 1.0;
                    total += 1.0;
                }
            }
            bins.iter().map(|b| b / total).collect()
        };
        let ha = histogram(&hist);
        let hb = histogram(&style);
        let dist: f64 = ha.iter().zip(&hb).map(|(a, b)| (a - b).abs()).sum::<f64>() / 32.0;
        assert!(dist > 0.01, "style shift must move the histogram, distance {dist}");
    }

    #[test]
    fn disk_roundtrip_is_lossless_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            seed: 21,
            n_train: 3,
            n_val: 2,
            n_test: 2,
            ..DatasetSpec::default()
        };
        let ds = Dataset::generate(&spec).unwrap();
        ds.save(dir.path()).unwrap();
        let loaded = Dataset::load(dir.path()).unwrap();
        assert_eq!(loaded.id, ds.id);
        assert_eq!(loaded.spec.as_ref(), Some(&spec));
        assert_eq!(loaded.train.len(), 3);
        assert_eq!(loaded.val.len(), 2);
        assert_eq!(loaded.test.len(), 2);
        for (a, b) in ds.train.iter().zip(&loaded.train) {
            assert_eq!(a.label, b.label, "labels roundtrip bitwise");
            for (x, y) in a.x1.data().iter().zip(b.x1.data()) {
                assert_eq!(quantize(*x), quantize(*y), "images roundtrip after quantization");
            }
        }
        // saving the loaded dataset reproduces identical files
        let dir2 = tempfile::tempdir().unwrap();
        let mut loaded = loaded;
        loaded.spec = Some(spec);
        loaded.save(dir2.path()).unwrap();
        let a = std::fs::read(dir.path().join("train/A/00000.ppm")).unwrap();
        let b = std::fs::read(dir2.path().join("train/A/00000.ppm")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec { seed: 3, n_train: 1, n_val: 0, n_test: 0, ..DatasetSpec::default() };
        let ds = Dataset::generate(&spec).unwrap();
        ds.save(dir.path()).unwrap();
        // replace B/00000.ppm with a smaller image
        let small = vec![0u8; 3 * 8 * 8];
        netpbm::write_ppm(&dir.path().join("train/B/00000.ppm"), 8, 8, &small).unwrap();
        let err = Dataset::load(dir.path()).err().expect("must fail");
        assert!(err.to_string().contains("00000"), "error must name the sample: {err}");
    }

    #[test]
    fn hflip_is_a_joint_involution() {
        let spec = DatasetSpec { seed: 31, ..DatasetSpec::default() };
        let pair = generate_pair(&spec, 4);
        let flipped = pair.hflipped();
        assert_ne!(bits(&pair.x1), bits(&flipped.x1));
        let back = flipped.hflipped();
        assert_eq!(bits(&pair.x1), bits(&back.x1));
        assert_eq!(bits(&pair.x2), bits(&back.x2));
        assert_eq!(pair.label, back.label);
        // the label flips with the images: labeled columns mirror
        let (h, w) = (pair.label.h, pair.label.w);
        for y in 0..h {
            for x in 0..w {
                assert_eq!(pair.label.at(0, y, x), flipped.label.at(0, y, w - 1 - x));
            }
        }
    }
}
