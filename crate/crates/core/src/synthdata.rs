//! Seeded generator of paired source/target dense-labeling worlds.
//!
//! A grid is partitioned into class regions by nearest-anchor assignment
//! under a smooth coordinate warp; anchor classes follow a power-law
//! (long-tailed) frequency profile. Pixel colors combine a per-class palette
//! color, a per-class texture, a smooth illumination field and sensor noise.
//! Target-domain grids additionally go through a hue rotation, contrast gain,
//! brightness offset and extra noise.
//!
//! Image files use the binary netpbm layouts: PPM (`P6`, 8-bit RGB,
//! row-major, channel-interleaved) for pixels and PGM (`P5`, 8-bit, one byte
//! per pixel holding the class id) for labels.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rng::labeled;

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// Covariate shift applied to target grids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    pub brightness: f64,
    /// Multiplies deviations from mid-gray; 1.0 means no change.
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Rotation about the gray axis, radians.
    pub hue_rotation: f64,
}

impl DomainShift {
    pub fn is_identity(&self) -> bool {
        *self == Self::none()
    }

    pub fn none() -> Self {
        Self {
            brightness: 0.0,
            contrast: 1.0,
            noise_sigma: 0.0,
            hue_rotation: 0.0,
        }
    }
}

impl Default for DomainShift {
    fn default() -> Self {
        Self::none()
    }
}

/// Parameters of a synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Class `c` has relative frequency `(c + 1)^-exponent`.
    pub freq_exponent: f64,
    /// Per-class RGB palette; generated from `classes` when empty.
    #[serde(default)]
    pub palette: Vec<[f64; 3]>,
    /// Typical region diameter in pixels.
    pub blob_scale: f64,
    /// Amplitude of the boundary warp in pixels.
    pub warp: f64,
    /// Per-class texture amplitude scale.
    pub texture: f64,
    /// Relative amplitude of the smooth illumination field.
    pub illumination: f64,
    /// Sensor noise present in both domains.
    pub noise_sigma: f64,
    pub shift: DomainShift,
    /// Supplied by the caller; experiment configs derive it from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl WorldSpec {
    /// Desk-scale benchmark world: 8 classes on 96×96 grids.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            height: 96,
            width: 96,
            classes: 8,
            freq_exponent: 1.0,
            palette: Vec::new(),
            blob_scale: 14.0,
            warp: 3.0,
            texture: 0.06,
            illumination: 0.15,
            noise_sigma: 0.03,
            shift: DomainShift {
                brightness: -0.08,
                contrast: 0.8,
                noise_sigma: 0.03,
                hue_rotation: 0.35,
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        contract!(self.height >= 1 && self.width >= 1, "grid must be at least 1×1");
        contract!(
            self.classes >= 1 && self.classes <= 255,
            "class count {} outside 1..=255",
            self.classes
        );
        contract!(
            self.freq_exponent.is_finite() && self.freq_exponent >= 0.0,
            "frequency exponent must be finite and non-negative"
        );
        contract!(
            self.palette.is_empty() || self.palette.len() == self.classes,
            "palette has {} colors for {} classes",
            self.palette.len(),
            self.classes
        );
        contract!(self.blob_scale > 0.0, "blob scale must be positive");
        let s = &self.shift;
        contract!(
            [
                s.brightness,
                s.contrast,
                s.noise_sigma,
                s.hue_rotation,
                self.warp,
                self.texture,
                self.illumination,
                self.noise_sigma
            ]
            .iter()
            .all(|x| x.is_finite()),
            "world parameters must be finite"
        );
        contract!(
            s.noise_sigma >= 0.0 && self.noise_sigma >= 0.0,
            "noise levels must be non-negative"
        );
        Ok(())
    }

    /// Normalized power-law class frequencies.
    pub fn class_frequencies(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.classes)
            .map(|c| ((c + 1) as f64).powf(-self.freq_exponent))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|r| r / total).collect()
    }

    pub fn palette(&self) -> Vec<[f64; 3]> {
        if self.palette.is_empty() {
            default_palette(self.classes)
        } else {
            self.palette.clone()
        }
    }
}

/// Unit vectors spanning the plane orthogonal to the gray axis.
fn chroma_basis() -> ([f64; 3], [f64; 3]) {
    let s2 = std::f64::consts::FRAC_1_SQRT_2;
    let s6 = 1.0 / 6f64.sqrt();
    ([s2, -s2, 0.0], [s6, s6, -2.0 * s6])
}

/// Hues spread around the color wheel; neighbouring classes alternate in
/// lightness so that hue-adjacent pairs stay separable.
pub fn default_palette(classes: usize) -> Vec<[f64; 3]> {
    let (u, v) = chroma_basis();
    (0..classes)
        .map(|c| {
            let hue = std::f64::consts::TAU * c as f64 / classes as f64;
            let light = if c % 2 == 0 { 0.45 } else { 0.58 };
            let sat = 0.22;
            let mut rgb = [0.0; 3];
            for k in 0..3 {
                rgb[k] = light + sat * (hue.cos() * u[k] + hue.sin() * v[k]);
            }
            rgb
        })
        .collect()
}

/// Rotates `rgb` about the gray axis through mid-gray.
fn rotate_hue(rgb: [f64; 3], angle: f64) -> [f64; 3] {
    if angle == 0.0 {
        return rgb;
    }
    let k = 1.0 / 3f64.sqrt();
    let axis = [k, k, k];
    let p = [rgb[0] - 0.5, rgb[1] - 0.5, rgb[2] - 0.5];
    let (s, c) = angle.sin_cos();
    let dot = axis[0] * p[0] + axis[1] * p[1] + axis[2] * p[2];
    let cross = [
        axis[1] * p[2] - axis[2] * p[1],
        axis[2] * p[0] - axis[0] * p[2],
        axis[0] * p[1] - axis[1] * p[0],
    ];
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = 0.5 + p[i] * c + cross[i] * s + axis[i] * dot * (1.0 - c);
    }
    out
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.h * self.w
    }

    /// Row-major flat indices of the covered pixels in a grid of `width`.
    pub fn indices(&self, width: usize) -> impl Iterator<Item = usize> + '_ {
        (self.y..self.y + self.h).flat_map(move |y| (self.x..self.x + self.w).map(move |x| y * width + x))
    }

    /// Uniformly placed `size × size` rectangle inside `height × width`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, size: usize) -> Result<Self> {
        contract!(
            size >= 1 && size <= height && size <= width,
            "crop size {size} does not fit a {height}×{width} grid"
        );
        Ok(Self {
            y: rng.random_range(0..=height - size),
            x: rng.random_range(0..=width - size),
            h: size,
            w: size,
        })
    }
}

/// One generated image with its dense labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledGrid {
    pub height: usize,
    pub width: usize,
    /// `height × width × 3`, row-major, channels last, in `[0, 1]`.
    pub pixels: Vec<f64>,
    /// Class id per pixel. Target labels exist for evaluation only.
    pub labels: Vec<u8>,
    pub domain: Domain,
}

impl LabeledGrid {
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let at = (y * self.width + x) * CHANNELS;
        &self.pixels[at..at + CHANNELS]
    }

    pub fn label(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn full_rect(&self) -> Rect {
        Rect {
            y: 0,
            x: 0,
            h: self.height,
            w: self.width,
        }
    }

    pub fn crop_labels(&self, rect: Rect) -> Vec<u8> {
        rect.indices(self.width).map(|i| self.labels[i]).collect()
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| to_byte(v)).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn write_label_pgm<W: Write>(&self, w: W) -> Result<()> {
        write_pgm(w, self.width, self.height, &self.labels)
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary 8-bit PGM.
pub fn write_pgm<W: Write>(mut w: W, width: usize, height: usize, values: &[u8]) -> Result<()> {
    contract!(
        values.len() == width * height,
        "pgm needs {} values, got {}",
        width * height,
        values.len()
    );
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(values)?;
    Ok(())
}

/// Low-frequency random field: a sum of a few random plane waves.
struct SmoothField {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl SmoothField {
    fn new(rng: &mut ChaCha8Rng, count: usize, wavelength: f64) -> Self {
        let waves = (0..count)
            .map(|_| {
                let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / (wavelength * rng.random_range(0.7..1.4));
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = rng.random_range(0.5..1.0);
                (k * theta.cos(), k * theta.sin(), phase, amp)
            })
            .collect();
        Self { waves }
    }

    /// Value in roughly `[-1, 1]`.
    fn at(&self, y: f64, x: f64) -> f64 {
        let norm: f64 = self.waves.iter().map(|w| w.3).sum();
        self.waves
            .iter()
            .map(|(ky, kx, ph, a)| a * (ky * y + kx * x + ph).sin())
            .sum::<f64>()
            / norm.max(1e-12)
    }
}

fn draw_class(rng: &mut ChaCha8Rng, cumulative: &[f64]) -> usize {
    let u: f64 = rng.random();
    cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1)
}

/// Generates `count` grids. Layout and source appearance depend only on
/// `(spec.seed, index)`; the domain only decides whether the shift applies,
/// so a zero shift reproduces the source grids exactly.
pub fn generate(spec: &WorldSpec, count: usize, domain: Domain) -> Result<Vec<LabeledGrid>> {
    spec.validate()?;
    contract!(count >= 1, "grid count must be at least 1");
    Ok((0..count).map(|i| generate_one(spec, i, domain)).collect())
}

fn generate_one(spec: &WorldSpec, index: usize, domain: Domain) -> LabeledGrid {
    let (h, w) = (spec.height, spec.width);
    let mut rng = labeled(spec.seed, &format!("grid/{index}"));
    let freqs = spec.class_frequencies();
    let cumulative: Vec<f64> = freqs
        .iter()
        .scan(0.0, |acc, f| {
            *acc += f;
            Some(*acc)
        })
        .collect();
    let palette = spec.palette();

    let n_anchors = (((h * w) as f64) / (spec.blob_scale * spec.blob_scale)).ceil().max(1.0) as usize;
    let anchors: Vec<(f64, f64, usize)> = (0..n_anchors)
        .map(|_| {
            let y = rng.random_range(0.0..h as f64);
            let x = rng.random_range(0.0..w as f64);
            (y, x, draw_class(&mut rng, &cumulative))
        })
        .collect();
    let warp_y = SmoothField::new(&mut rng, 3, spec.blob_scale * 1.5);
    let warp_x = SmoothField::new(&mut rng, 3, spec.blob_scale * 1.5);
    let light = SmoothField::new(&mut rng, 3, (h.max(w)) as f64);
    let texture_phase: Vec<(f64, f64)> = (0..spec.classes)
        .map(|_| {
            (
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::PI),
            )
        })
        .collect();

    let mut labels = vec![0u8; h * w];
    let mut pixels = vec![0.0; h * w * CHANNELS];
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64, x as f64);
            let qy = fy + spec.warp * warp_y.at(fy, fx);
            let qx = fx + spec.warp * warp_x.at(fy, fx);
            let mut best = (f64::INFINITY, 0usize);
            for &(ay, ax, c) in &anchors {
                let d = (ay - qy).powi(2) + (ax - qx).powi(2);
                if d < best.0 {
                    best = (d, c);
                }
            }
            let class = best.1;
            labels[y * w + x] = class as u8;

            // Class texture: oriented stripes whose amplitude depends on class.
            let (phase, orient) = texture_phase[class];
            let tex_amp = spec.texture * ((class * 3) % 4) as f64 / 3.0;
            let stripe = (1.9 * (fy * orient.cos() + fx * orient.sin()) + phase).sin();
            let illum = 1.0 + spec.illumination * light.at(fy, fx);
            let base = palette[class];
            for k in 0..CHANNELS {
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * spec.noise_sigma;
                pixels[(y * w + x) * CHANNELS + k] = base[k] * illum + tex_amp * stripe + noise;
            }
        }
    }

    if domain == Domain::Target && !spec.shift.is_identity() {
        let mut shift_rng = labeled(spec.seed, &format!("grid/{index}/shift"));
        let s = spec.shift;
        for px in pixels.chunks_mut(CHANNELS) {
            let rot = rotate_hue([px[0], px[1], px[2]], s.hue_rotation);
            for k in 0..CHANNELS {
                let mut v = s.contrast * (rot[k] - 0.5) + 0.5 + s.brightness;
                if s.noise_sigma > 0.0 {
                    v += rng_normal(&mut shift_rng) * s.noise_sigma;
                }
                px[k] = v;
            }
        }
    }
    for v in pixels.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    LabeledGrid {
        height: h,
        width: w,
        pixels,
        labels,
        domain,
    }
}

fn rng_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Normalized label histogram over all grids.
pub fn empirical_frequencies(grids: &[LabeledGrid], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    let mut total = 0usize;
    for g in grids {
        for &l in &g.labels {
            counts[l as usize] += 1;
            total += 1;
        }
    }
    counts
        .into_iter()
        .map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> WorldSpec {
        WorldSpec {
            height: 24,
            width: 20,
            ..WorldSpec::benchmark(seed)
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate(&small(5), 3, Domain::Target).unwrap();
        let b = generate(&small(5), 3, Domain::Target).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(6), 3, Domain::Target).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_shift_makes_domains_identical() {
        let spec = WorldSpec {
            shift: DomainShift::none(),
            ..small(9)
        };
        let s = generate(&spec, 2, Domain::Source).unwrap();
        let t = generate(&spec, 2, Domain::Target).unwrap();
        for (a, b) in s.iter().zip(&t) {
            assert_eq!(a.pixels, b.pixels);
            assert_eq!(a.labels, b.labels);
        }
    }

    #[test]
    fn shift_changes_pixels_not_labels() {
        let s = generate(&small(2), 1, Domain::Source).unwrap();
        let t = generate(&small(2), 1, Domain::Target).unwrap();
        assert_eq!(s[0].labels, t[0].labels);
        assert_ne!(s[0].pixels, t[0].pixels);
    }

    #[test]
    fn invariants_hold() {
        let spec = small(3);
        for g in generate(&spec, 4, Domain::Target).unwrap() {
            assert!(g.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(g.labels.iter().all(|&l| (l as usize) < spec.classes));
            assert_eq!(g.pixels.len(), spec.height * spec.width * CHANNELS);
        }
        let f = spec.class_frequencies();
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_world_is_one_hot() {
        let spec = WorldSpec { classes: 1, ..small(4) };
        let grids = generate(&spec, 2, Domain::Source).unwrap();
        assert_eq!(empirical_frequencies(&grids, 1), vec![1.0]);
    }

    #[test]
    fn hue_rotation_preserves_gray_and_full_turn() {
        let g = [0.3, 0.3, 0.3];
        let r = rotate_hue(g, 1.0);
        for v in r {
            assert!((v - 0.3).abs() < 1e-12);
        }
        let c = [0.7, 0.2, 0.4];
        let full = rotate_hue(c, std::f64::consts::TAU);
        for k in 0..3 {
            assert!((full[k] - c[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn netpbm_layouts() {
        let g = &generate(&small(1), 1, Domain::Source).unwrap()[0];
        let mut ppm = Vec::new();
        g.write_ppm(&mut ppm).unwrap();
        let header = format!("P6\n{} {}\n255\n", g.width, g.height);
        assert!(ppm.starts_with(header.as_bytes()));
        assert_eq!(ppm.len(), header.len() + g.width * g.height * 3);
        let mut pgm = Vec::new();
        g.write_label_pgm(&mut pgm).unwrap();
        let header = format!("P5\n{} {}\n255\n", g.width, g.height);
        assert_eq!(&pgm[header.len()..], g.labels.as_slice());
    }

    #[test]
    fn validation_rejects_bad_specs() {
        assert!(generate(&small(1), 0, Domain::Source).is_err());
        let bad = WorldSpec {
            palette: vec![[0.0; 3]; 2],
            ..small(1)
        };
        assert!(bad.validate().is_err());
        let bad = WorldSpec {
            freq_exponent: f64::NAN,
            ..small(1)
        };
        assert!(bad.validate().is_err());
    }
}
