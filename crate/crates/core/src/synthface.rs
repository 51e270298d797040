//! Procedural face-like images with localized, caption-describable artifacts.
//!
//! A real sample is a smooth radial-gradient face template whose geometry and
//! colours are jittered per index. A fake sample is the real sample for the
//! same `(seed, index)` with one artifact painted into a fixed face region.
//! Pixel values are quantized to multiples of 1/255 so PNG storage is lossless.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::ops::Range;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use ndarray::Array3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Region;
use crate::io::{file_err, read_json, write_json};
use crate::seed::{rng_for, sha256_hex};
use crate::{Error, Label, Result};

pub const DEFAULT_SIDE: usize = 64;
pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    BlendBoundary,
    EyeAsymmetry,
    TextureNoise,
    MouthWarp,
    None,
}

impl ArtifactKind {
    /// The fake kinds, in the order corpora cycle through them.
    pub const FAKE: [ArtifactKind; 4] = [
        ArtifactKind::BlendBoundary,
        ArtifactKind::EyeAsymmetry,
        ArtifactKind::TextureNoise,
        ArtifactKind::MouthWarp,
    ];

    /// Face region a caption should mention for this artifact.
    pub fn region(self) -> Region {
        match self {
            ArtifactKind::BlendBoundary => Region::Chin,
            ArtifactKind::EyeAsymmetry => Region::Eyes,
            ArtifactKind::TextureNoise => Region::Skin,
            ArtifactKind::MouthWarp => Region::Mouth,
            ArtifactKind::None => Region::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::BlendBoundary => "blend_boundary",
            ArtifactKind::EyeAsymmetry => "eye_asymmetry",
            ArtifactKind::TextureNoise => "texture_noise",
            ArtifactKind::MouthWarp => "mouth_warp",
            ArtifactKind::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    /// `side × side × 3`, row-major, values in `[0, 1]`.
    pub pixels: Array3<f32>,
    pub label: Label,
    pub artifact_kind: ArtifactKind,
}

impl LabeledImage {
    pub fn side(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }
}

pub fn sample_id(index: usize) -> String {
    format!("face_{index:06}")
}

/// Rows touched by the `blend_boundary` seam.
pub fn seam_rows(side: usize) -> Range<usize> {
    let start = (0.66 * side as f64).floor() as usize;
    let end = (0.78 * side as f64).ceil() as usize;
    start..end.min(side)
}

struct Geometry {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    skin: [f64; 3],
    background: [f64; 3],
    hair: [f64; 3],
    eye_dx: f64,
    eye_y: f64,
    mouth_y: f64,
    mouth_w: f64,
}

impl Geometry {
    fn jittered<R: Rng>(rng: &mut R) -> Self {
        let mut j = |a: f64| rng.random_range(-a..a);
        let tone = j(0.06);
        Self {
            cx: 0.5 + j(0.02),
            cy: 0.52 + j(0.02),
            rx: 0.30 + j(0.015),
            ry: 0.38 + j(0.015),
            skin: [0.85 + tone + j(0.03), 0.68 + tone + j(0.03), 0.55 + tone + j(0.03)],
            background: [0.25 + j(0.08), 0.35 + j(0.08), 0.45 + j(0.08)],
            hair: [0.22 + j(0.07), 0.15 + j(0.05), 0.10 + j(0.04)],
            eye_dx: 0.12 + j(0.01),
            eye_y: -0.08 + j(0.01),
            mouth_y: 0.17 + j(0.01),
            mouth_w: 0.09 + j(0.01),
        }
    }
}

/// 1 inside, 0 outside, linear ramp of width `soft` around the ellipse boundary.
fn ellipse(u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64, soft: f64) -> f64 {
    let d = (((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2)).sqrt();
    ((1.0 - d) / soft + 0.5).clamp(0.0, 1.0)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn render_face(geo: &Geometry, side: usize) -> Array3<f64> {
    let mut img = Array3::<f64>::zeros((side, side, CHANNELS));
    let s = side as f64;
    for y in 0..side {
        for x in 0..side {
            let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let mut c = geo.background;
            let hair = ellipse(u, v, geo.cx, geo.cy - 0.08, geo.rx * 1.12, geo.ry * 0.95, 0.08);
            c = mix(c, geo.hair, hair);
            let face = ellipse(u, v, geo.cx, geo.cy + 0.02, geo.rx, geo.ry, 0.06);
            let r2 = ((u - geo.cx) / geo.rx).powi(2) + ((v - geo.cy) / geo.ry).powi(2);
            let shade = (1.0 - 0.25 * r2).max(0.6);
            let skin = geo.skin.map(|ch| ch * shade);
            // Hair covers the forehead; the face shows below the hairline.
            let below_hairline = ((v - (geo.cy - geo.ry * 0.55)) / 0.05 + 0.5).clamp(0.0, 1.0);
            c = mix(c, skin, face * below_hairline);
            for side_sign in [-1.0, 1.0] {
                let ex = geo.cx + side_sign * geo.eye_dx;
                let ey = geo.cy + geo.eye_y;
                let white = ellipse(u, v, ex, ey, 0.055, 0.028, 0.3);
                c = mix(c, [0.95, 0.95, 0.93], white);
                let iris = ellipse(u, v, ex, ey, 0.022, 0.022, 0.3);
                c = mix(c, [0.12, 0.09, 0.07], iris);
            }
            let nose = ellipse(u, v, geo.cx, geo.cy + 0.04, 0.025, 0.07, 0.5);
            c = mix(c, geo.skin.map(|ch| ch * 0.78), 0.6 * nose);
            let mouth = ellipse(u, v, geo.cx, geo.cy + geo.mouth_y, geo.mouth_w, 0.026, 0.3);
            c = mix(c, [0.68, 0.22, 0.24], mouth);
            for (ch, &val) in c.iter().enumerate() {
                img[[y, x, ch]] = val;
            }
        }
    }
    img
}

fn box_range(center: f64, half: f64, side: usize) -> Range<usize> {
    let s = side as f64;
    let lo = ((center - half) * s).floor().max(0.0) as usize;
    let hi = ((center + half) * s).ceil().min(s) as usize;
    lo..hi
}

/// Nearest-neighbour resample of a rectangular patch about its centre.
fn resample_patch(img: &mut Array3<f64>, rows: Range<usize>, cols: Range<usize>, map: impl Fn(f64, f64) -> (f64, f64)) {
    let src = img.clone();
    let side = img.dim().0 as isize;
    for y in rows {
        for x in cols.clone() {
            let (sx, sy) = map(x as f64, y as f64);
            let sx = (sx.round() as isize).clamp(0, side - 1) as usize;
            let sy = (sy.round() as isize).clamp(0, side - 1) as usize;
            for ch in 0..CHANNELS {
                img[[y, x, ch]] = src[[sy, sx, ch]];
            }
        }
    }
}

fn apply_artifact<R: Rng>(img: &mut Array3<f64>, kind: ArtifactKind, rng: &mut R) {
    let side = img.dim().0;
    let s = side as f64;
    match kind {
        ArtifactKind::None => {}
        ArtifactKind::BlendBoundary => {
            let rows = seam_rows(side);
            let mid = (rows.start + rows.end) as f64 / 2.0 - 0.5;
            let half = (rows.end - rows.start) as f64 / 2.0;
            let tint = [0.10, 0.02, -0.04];
            for y in rows {
                let a = 0.85 * (1.0 - ((y as f64 - mid).abs() / half)).max(0.0);
                for x in box_range(0.5, 0.32, side) {
                    for (ch, t) in tint.iter().enumerate() {
                        let p = img[[y, x, ch]];
                        img[[y, x, ch]] = p * (1.0 - a) + (0.72 * p + t) * a;
                    }
                }
            }
        }
        ArtifactKind::EyeAsymmetry => {
            let (cx, cy) = (0.38 * s, 0.44 * s);
            let scale = 1.7;
            resample_patch(img, box_range(0.44, 0.08, side), box_range(0.38, 0.11, side), |x, y| {
                (cx + (x - cx) / scale, cy + (y - cy) / scale)
            });
        }
        ArtifactKind::TextureNoise => {
            for (ux, vy) in [(0.33, 0.60), (0.67, 0.60)] {
                for y in box_range(vy, 0.08, side) {
                    for x in box_range(ux, 0.08, side) {
                        if rng.random_bool(0.4) {
                            let bump = rng.random_range(0.15..0.35);
                            for ch in 0..CHANNELS {
                                img[[y, x, ch]] += bump;
                            }
                        }
                    }
                }
            }
        }
        ArtifactKind::MouthWarp => {
            let (rows, cols) = (box_range(0.69, 0.07, side), box_range(0.5, 0.17, side));
            let (y0, h) = (rows.start as f64, (rows.end - rows.start) as f64);
            resample_patch(img, rows, cols, |x, y| {
                let phase = 2.0 * std::f64::consts::PI * (y - y0) / h;
                (x - 0.06 * s * phase.sin() - 0.03 * s, y - 0.03 * s)
            });
        }
    }
}

fn sample_rng(seed: u64, index: usize, what: &str) -> rand_chacha::ChaCha8Rng {
    rng_for(seed, &format!("synthface/{what}/{index}"))
}

/// Deterministic sample for `(seed, index, label, artifact_kind)`.
pub fn make_sample(seed: u64, index: usize, label: Label, artifact_kind: ArtifactKind, side: usize) -> Result<LabeledImage> {
    match (label, artifact_kind) {
        (Label::Fake, ArtifactKind::None) => return Err(Error::Contract("a fake sample needs an artifact kind".into())),
        (Label::Real, k) if k != ArtifactKind::None => {
            return Err(Error::Contract(format!("a real sample cannot carry artifact {}", k.as_str())))
        }
        _ => {}
    }
    if side < 16 {
        return Err(Error::InvalidArgument(format!("image side {side} is too small")));
    }
    let geo = Geometry::jittered(&mut sample_rng(seed, index, "geometry"));
    let mut img = render_face(&geo, side);
    apply_artifact(&mut img, artifact_kind, &mut sample_rng(seed, index, "artifact"));
    let pixels = img.mapv(|v| ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32);
    Ok(LabeledImage {
        id: sample_id(index),
        pixels,
        label,
        artifact_kind,
    })
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub seed: u64,
    pub image_side: usize,
    pub samples: Vec<LabeledImage>,
    pub split: BTreeMap<String, Split>,
}

/// Label and artifact assigned to corpus index `index`: even indices are real,
/// odd indices are fake with the four artifact kinds cycled in order.
pub fn corpus_slot(index: usize) -> (Label, ArtifactKind) {
    if index % 2 == 0 {
        (Label::Real, ArtifactKind::None)
    } else {
        (Label::Fake, ArtifactKind::FAKE[(index / 2) % ArtifactKind::FAKE.len()])
    }
}

pub fn make_corpus(seed: u64, n: usize) -> Result<SynthCorpus> {
    make_corpus_with_side(seed, n, DEFAULT_SIDE)
}

pub fn make_corpus_with_side(seed: u64, n: usize, side: usize) -> Result<SynthCorpus> {
    if n < 4 {
        return Err(Error::InvalidArgument(format!("corpus size {n} < 4")));
    }
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let (label, kind) = corpus_slot(i);
            make_sample(seed, i, label, kind, side)
        })
        .collect::<Result<Vec<_>>>()?;
    let split = assign_splits(&samples);
    Ok(SynthCorpus {
        seed,
        image_side: side,
        samples,
        split,
    })
}

/// 80/10/10 split. Within each class, ids are ranked by a hash of the id and
/// the first 80% go to train, the next 10% to val, the rest to test, so each
/// split's class counts differ by at most one.
fn assign_splits(samples: &[LabeledImage]) -> BTreeMap<String, Split> {
    let mut split = BTreeMap::new();
    for label in [Label::Real, Label::Fake] {
        let mut ids: Vec<(String, &str)> = samples
            .iter()
            .filter(|s| s.label == label)
            .map(|s| (sha256_hex(s.id.as_bytes()), s.id.as_str()))
            .collect();
        ids.sort();
        let c = ids.len() as f64;
        let n_train = (0.8 * c).round() as usize;
        let n_val = (0.1 * c).round() as usize;
        for (rank, (_, id)) in ids.into_iter().enumerate() {
            let s = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            split.insert(id.to_string(), s);
        }
    }
    split
}

impl SynthCorpus {
    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.split.get(id).copied()
    }

    pub fn samples_in(&self, split: Split) -> impl Iterator<Item = &LabeledImage> {
        self.samples.iter().filter(move |s| self.split.get(&s.id) == Some(&split))
    }

    pub fn get(&self, id: &str) -> Option<&LabeledImage> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(file_err(dir))?;
        let meta = CorpusFile {
            seed: self.seed,
            n: self.samples.len(),
            image_side: self.image_side,
            samples: self
                .samples
                .iter()
                .enumerate()
                .map(|(index, s)| CorpusEntry {
                    id: s.id.clone(),
                    index,
                    label: s.label,
                    artifact_kind: s.artifact_kind,
                    split: self.split[&s.id],
                })
                .collect(),
        };
        write_json(&dir.join("corpus.json"), &meta)?;
        for s in &self.samples {
            let path = dir.join(format!("{}.png", s.id));
            let w = BufWriter::new(File::create(&path).map_err(file_err(&path))?);
            let side = s.side() as u32;
            PngEncoder::new(w).write_image(&s.to_rgb8(), side, side, ExtendedColorType::Rgb8)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: CorpusFile = read_json(&dir.join("corpus.json"))?;
        let samples = meta
            .samples
            .par_iter()
            .map(|e| {
                let pixels = load_png(&dir.join(format!("{}.png", e.id)), meta.image_side)?;
                Ok(LabeledImage {
                    id: e.id.clone(),
                    pixels,
                    label: e.label,
                    artifact_kind: e.artifact_kind,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let split = meta.samples.iter().map(|e| (e.id.clone(), e.split)).collect();
        Ok(Self {
            seed: meta.seed,
            image_side: meta.image_side,
            samples,
            split,
        })
    }
}

pub fn load_png(path: &Path, side: usize) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    if img.width() as usize != side || img.height() as usize != side {
        return Err(Error::Shape(format!(
            "{}: expected {side}x{side}, found {}x{}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let data: Vec<f32> = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    Array3::from_shape_vec((side, side, CHANNELS), data).map_err(|e| Error::Shape(e.to_string()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CorpusFile {
    seed: u64,
    n: usize,
    image_side: usize,
    samples: Vec<CorpusEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CorpusEntry {
    id: String,
    index: usize,
    label: Label,
    artifact_kind: ArtifactKind,
    split: Split,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_inputs_give_identical_bytes() {
        let a = make_sample(7, 0, Label::Real, ArtifactKind::None, 64).unwrap();
        let b = make_sample(7, 0, Label::Real, ArtifactKind::None, 64).unwrap();
        assert_eq!(a.to_rgb8(), b.to_rgb8());
    }

    #[test]
    fn blend_boundary_differs_only_inside_seam_band() {
        let real = make_sample(7, 0, Label::Real, ArtifactKind::None, 64).unwrap();
        let fake = make_sample(7, 0, Label::Fake, ArtifactKind::BlendBoundary, 64).unwrap();
        let band = seam_rows(64);
        let mut l2 = 0.0f64;
        for ((y, x, c), &a) in real.pixels.indexed_iter() {
            let d = (a - fake.pixels[[y, x, c]]) as f64;
            if !band.contains(&y) {
                assert_eq!(d, 0.0, "pixel outside the seam band changed at row {y}");
            }
            l2 += d * d;
        }
        assert!(l2.sqrt() > 0.0);
    }

    #[test]
    fn every_kind_stays_in_unit_range_and_changes_pixels() {
        let real = make_sample(3, 5, Label::Real, ArtifactKind::None, 64).unwrap();
        for kind in ArtifactKind::FAKE {
            let fake = make_sample(3, 5, Label::Fake, kind, 64).unwrap();
            let (lo, hi) = fake.pixels.iter().fold((1f32, 0f32), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            assert!(lo >= 0.0 && hi <= 1.0);
            assert_ne!(real.pixels, fake.pixels, "{kind:?} left the image unchanged");
        }
    }

    #[test]
    fn label_artifact_contract_is_enforced() {
        assert!(matches!(
            make_sample(1, 0, Label::Fake, ArtifactKind::None, 64),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            make_sample(1, 0, Label::Real, ArtifactKind::MouthWarp, 64),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn small_corpus_is_rejected() {
        assert!(matches!(make_corpus(1, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn corpus_is_balanced_and_split_is_stable() {
        let c = make_corpus_with_side(1, 100, 32).unwrap();
        let fakes = c.samples.iter().filter(|s| s.label == Label::Fake).count();
        assert_eq!(fakes, 50);
        for split in [Split::Train, Split::Val, Split::Test] {
            let (mut real, mut fake) = (0i64, 0i64);
            for s in c.samples_in(split) {
                match s.label {
                    Label::Real => real += 1,
                    Label::Fake => fake += 1,
                }
            }
            assert!((real - fake).abs() <= 1, "{split:?}: {real} real vs {fake} fake");
        }
        let again = make_corpus_with_side(1, 100, 32).unwrap();
        assert_eq!(c.split, again.split);
        assert_eq!(c.samples_in(Split::Train).count(), 80);
    }

    #[test]
    fn odd_sized_corpus_stays_within_one_per_split() {
        let c = make_corpus_with_side(4, 101, 32).unwrap();
        for split in [Split::Train, Split::Val, Split::Test] {
            let real = c.samples_in(split).filter(|s| s.label == Label::Real).count() as i64;
            let fake = c.samples_in(split).filter(|s| s.label == Label::Fake).count() as i64;
            assert!((real - fake).abs() <= 1);
        }
    }
}
