//! Synthetic anterior-thorax bone-scan phantoms.
//!
//! Each phantom is a rib cage of analytic arcs (left/right bands around a
//! spine) with a single hot lesion sitting on one rib. Metastatic lesions are
//! anisotropic Gaussians stretched along the local rib tangent; traumatic
//! lesions are round and punctate. The lesion mask is the half-maximum region
//! of the lesion restricted to the rib band, so it doubles as localization
//! ground truth for heatmaps.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SIDE: usize = 256;

/// Grayscale scan with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub id: String,
}

impl ScanImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>, id: impl Into<String>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation("image", "width and height must be positive"));
        }
        if pixels.len() != width * height {
            return Err(Error::shape(format!(
                "{width}×{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::validation("pixels", format!("value {bad} outside [0, 1]")));
        }
        Ok(ScanImage {
            width,
            height,
            pixels,
            id: id.into(),
        })
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        ScanImage {
            width,
            height,
            pixels: vec![value; width * height],
            id: String::new(),
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

/// Binary grid; `true` marks a lesion pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::shape(format!(
                "{width}×{height} mask needs {} cells, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Mask { width, height, bits })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    /// Mask with the axis-aligned rectangle `[x0, x0+w) × [y0, y0+h)` set.
    pub fn rect(width: usize, height: usize, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        let mut m = Mask::empty(width, height);
        for y in y0..(y0 + h).min(height) {
            for x in x0..(x0 + w).min(width) {
                m.bits[y * width + x] = true;
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn coords(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionLabel {
    Metastasis,
    Trauma,
}

impl LesionLabel {
    /// Output index in the two-class network head.
    pub fn class_index(self) -> usize {
        match self {
            LesionLabel::Metastasis => 0,
            LesionLabel::Trauma => 1,
        }
    }

    pub fn from_class_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(LesionLabel::Metastasis),
            1 => Some(LesionLabel::Trauma),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LesionLabel::Metastasis => "metastasis",
            LesionLabel::Trauma => "trauma",
        }
    }
}

impl fmt::Display for LesionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LesionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "metastasis" => Ok(LesionLabel::Metastasis),
            "trauma" => Ok(LesionLabel::Trauma),
            other => Err(Error::validation("label", format!("unknown label {other:?}"))),
        }
    }
}

/// Parameters of one phantom. Geometry is expressed for a 256-pixel side
/// and scales with `side`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub side: usize,
    /// Rib bands per side of the chest.
    pub rib_count: usize,
    /// Lateral drop of each rib arc, as a multiple of 10% of the image height.
    pub rib_curvature: f64,
    pub lesion_label: LesionLabel,
    /// Major/minor axis ratio of the lesion.
    pub elongation_ratio: f64,
    /// Minor-axis Gaussian width in pixels at side 256.
    pub lesion_sigma: f64,
    pub lesion_peak_intensity: f64,
    /// Mean simulated counts at unit intensity.
    pub noise_mean_counts: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn metastasis(seed: u64) -> Self {
        PhantomSpec {
            side: DEFAULT_SIDE,
            rib_count: 10,
            rib_curvature: 1.0,
            lesion_label: LesionLabel::Metastasis,
            elongation_ratio: 4.0,
            lesion_sigma: 5.0,
            lesion_peak_intensity: 0.9,
            noise_mean_counts: 200.0,
            seed,
        }
    }

    pub fn trauma(seed: u64) -> Self {
        PhantomSpec {
            lesion_label: LesionLabel::Trauma,
            elongation_ratio: 1.0,
            ..PhantomSpec::metastasis(seed)
        }
    }

    pub fn for_label(label: LesionLabel, seed: u64) -> Self {
        match label {
            LesionLabel::Metastasis => PhantomSpec::metastasis(seed),
            LesionLabel::Trauma => PhantomSpec::trauma(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 32 {
            return Err(Error::validation("side", "must be at least 32 pixels"));
        }
        if self.rib_count == 0 {
            return Err(Error::validation("rib_count", "must be at least 1"));
        }
        if !(self.rib_curvature.is_finite() && self.rib_curvature >= 0.0) {
            return Err(Error::validation("rib_curvature", "must be finite and nonnegative"));
        }
        if !(self.elongation_ratio >= 1.0 && self.elongation_ratio.is_finite()) {
            return Err(Error::validation("elongation_ratio", "must be at least 1"));
        }
        match self.lesion_label {
            LesionLabel::Metastasis if self.elongation_ratio < 3.0 => {
                return Err(Error::validation(
                    "elongation_ratio",
                    "metastasis lesions need a ratio of at least 3",
                ))
            }
            LesionLabel::Trauma if self.elongation_ratio > 1.5 => {
                return Err(Error::validation(
                    "elongation_ratio",
                    "trauma lesions need a ratio of at most 1.5",
                ))
            }
            _ => {}
        }
        if !(self.lesion_sigma > 0.0 && self.lesion_sigma.is_finite()) {
            return Err(Error::validation("lesion_sigma", "must be positive"));
        }
        if !(self.lesion_peak_intensity > 0.0 && self.lesion_peak_intensity <= 1.0) {
            return Err(Error::validation("lesion_peak_intensity", "must lie in (0, 1]"));
        }
        if !(self.noise_mean_counts > 0.0 && self.noise_mean_counts.is_finite()) {
            return Err(Error::validation("noise_mean_counts", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PhantomCase {
    pub image: ScanImage,
    pub mask: Mask,
    pub label: LesionLabel,
    /// Generating spec; `None` for cases read back from disk.
    pub spec: Option<PhantomSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train_metastasis: usize,
    pub train_trauma: usize,
    pub test_metastasis: usize,
    pub test_trauma: usize,
}

impl Default for DatasetSplit {
    fn default() -> Self {
        DatasetSplit {
            train_metastasis: 347,
            train_trauma: 328,
            test_metastasis: 90,
            test_trauma: 73,
        }
    }
}

impl DatasetSplit {
    pub fn total(&self) -> usize {
        self.train_metastasis + self.train_trauma + self.test_metastasis + self.test_trauma
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<PhantomCase>,
    pub test: Vec<PhantomCase>,
}

// Rib-cage layout, as fractions of the image side.
const RIB_TOP: f64 = 0.10;
const RIB_SPAN: f64 = 0.74;
const RIB_INNER: f64 = 0.05;
const RIB_OUTER: f64 = 0.42;
const RIB_HALF_THICKNESS: f64 = 0.38; // of the rib pitch
const SPINE_HALF_WIDTH: f64 = 0.035;

const SOFT_TISSUE: f64 = 0.08;
const AIR: f64 = 0.02;
const SPINE_LEVEL: f64 = 0.25;
const RIB_LEVEL: f64 = 0.32;

/// Analytic rib skeleton for a spec.
#[derive(Clone, Debug)]
pub struct RibCage {
    side: f64,
    rib_count: usize,
    pitch: f64,
    drop: f64,
    half_thickness: f64,
}

impl RibCage {
    pub fn new(spec: &PhantomSpec) -> Self {
        let side = spec.side as f64;
        let pitch = side * RIB_SPAN / spec.rib_count as f64;
        RibCage {
            side,
            rib_count: spec.rib_count,
            pitch,
            drop: 0.10 * side * spec.rib_curvature,
            half_thickness: RIB_HALF_THICKNESS * pitch,
        }
    }

    fn inner(&self) -> f64 {
        RIB_INNER * self.side
    }

    fn outer(&self) -> f64 {
        RIB_OUTER * self.side
    }

    /// Centerline height of rib `i` at lateral distance `d` from the midline.
    fn centerline(&self, i: usize, d: f64) -> f64 {
        let u = (d - self.inner()) / (self.outer() - self.inner());
        self.side * RIB_TOP + i as f64 * self.pitch + self.drop * u * u
    }

    fn slope(&self, d: f64) -> f64 {
        let span = self.outer() - self.inner();
        2.0 * self.drop * (d - self.inner()) / (span * span)
    }

    /// Signed vertical offset from the nearest rib centerline, if the pixel
    /// lies laterally within the rib extent.
    fn offset(&self, x: f64, y: f64) -> Option<f64> {
        let d = (x - self.side / 2.0).abs();
        if d < self.inner() || d > self.outer() {
            return None;
        }
        let base = self.centerline(0, d);
        let i = ((y - base) / self.pitch).round();
        if i < 0.0 || i >= self.rib_count as f64 {
            return None;
        }
        Some(y - self.centerline(i as usize, d))
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.offset(x as f64, y as f64)
            .is_some_and(|dy| dy.abs() <= self.half_thickness)
    }

    /// Rib coverage in `[0, 1]` with a one-pixel anti-aliased edge.
    fn coverage(&self, x: f64, y: f64) -> f64 {
        match self.offset(x, y) {
            Some(dy) => (self.half_thickness - dy.abs() + 0.5).clamp(0.0, 1.0),
            None => 0.0,
        }
    }

    pub fn band_mask(&self) -> Mask {
        let n = self.side as usize;
        let mut m = Mask::empty(n, n);
        for y in 0..n {
            for x in 0..n {
                m.bits[y * n + x] = self.contains(x, y);
            }
        }
        m
    }
}

/// Where the lesion landed and its shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionPlacement {
    pub center: (f64, f64),
    /// Unit vector along the rib tangent.
    pub direction: (f64, f64),
    pub sigma_major: f64,
    pub sigma_minor: f64,
}

impl LesionPlacement {
    fn sample(spec: &PhantomSpec, cage: &RibCage, rng: &mut ChaCha8Rng) -> Self {
        let rib = rng.random_range(0..spec.rib_count);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let u: f64 = rng.random_range(0.25..0.8);
        let d = cage.inner() + u * (cage.outer() - cage.inner());
        let x = cage.side / 2.0 + side * d;
        let y = cage.centerline(rib, d);
        let slope = cage.slope(d);
        let norm = (1.0 + slope * slope).sqrt();
        let jitter: f64 = rng.random_range(0.85..1.15);
        let scale = cage.side / DEFAULT_SIDE as f64;
        let sigma_minor = spec.lesion_sigma * jitter * scale;
        LesionPlacement {
            center: (x.round(), y.round()),
            direction: (side / norm, slope / norm),
            sigma_major: sigma_minor * spec.elongation_ratio,
            sigma_minor,
        }
    }

    /// Gaussian profile in `[0, 1]` at a pixel.
    pub fn profile(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let along = dx * self.direction.0 + dy * self.direction.1;
        let across = -dx * self.direction.1 + dy * self.direction.0;
        (-0.5 * ((along / self.sigma_major).powi(2) + (across / self.sigma_minor).powi(2))).exp()
    }
}

/// Noiseless rendering of a spec before any noise is added.
#[derive(Clone, Debug)]
pub struct NoiselessPhantom {
    pub image: ScanImage,
    pub mask: Mask,
    /// Lesion profile over the full grid, not restricted to bone.
    pub lesion_field: Vec<f64>,
    pub placement: LesionPlacement,
    pub cage: RibCage,
}

impl NoiselessPhantom {
    /// Half-maximum support of the unrestricted lesion profile.
    pub fn lesion_support(&self) -> Mask {
        let n = self.image.width;
        Mask {
            width: n,
            height: n,
            bits: self.lesion_field.iter().map(|&g| g >= 0.5).collect(),
        }
    }
}

pub fn render_noiseless(spec: &PhantomSpec) -> Result<NoiselessPhantom> {
    spec.validate()?;
    let n = spec.side;
    let cage = RibCage::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let placement = LesionPlacement::sample(spec, &cage, &mut rng);
    let half = n as f64 / 2.0;
    let peak = spec.lesion_peak_intensity;

    let mut pixels = Vec::with_capacity(n * n);
    let mut field = Vec::with_capacity(n * n);
    let mut mask = Mask::empty(n, n);
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64, y as f64);
            let ex = (fx - half) / (0.46 * n as f64);
            let ey = (fy - half) / (0.48 * n as f64);
            let mut base = if ex * ex + ey * ey <= 1.0 { SOFT_TISSUE } else { AIR };
            if (fx - half).abs() <= SPINE_HALF_WIDTH * n as f64 && fy >= 0.05 * n as f64 {
                base = base.max(SPINE_LEVEL);
            }
            let bone = cage.coverage(fx, fy);
            base = base.max(RIB_LEVEL * bone);
            let g = placement.profile(fx, fy);
            let value = base + (peak - base).max(0.0) * g * bone;
            pixels.push(value.clamp(0.0, 1.0) as f32);
            field.push(g);
            if g >= 0.5 && cage.contains(x, y) {
                mask.bits[y * n + x] = true;
            }
        }
    }
    Ok(NoiselessPhantom {
        image: ScanImage {
            width: n,
            height: n,
            pixels,
            id: format!("phantom-{:016x}", spec.seed),
        },
        mask,
        lesion_field: field,
        placement,
        cage,
    })
}

/// Renders the phantom described by `spec`, including count noise.
pub fn generate_case(spec: &PhantomSpec) -> Result<PhantomCase> {
    let clean = render_noiseless(spec)?;
    let image = apply_count_noise(&clean.image, spec.noise_mean_counts, derive_seed(spec.seed, 0x6e6f697365))?;
    Ok(PhantomCase {
        image,
        mask: clean.mask,
        label: spec.lesion_label,
        spec: Some(spec.clone()),
    })
}

/// Replaces each pixel by `Poisson(pixel · mean_counts) / mean_counts`,
/// clamped to `[0, 1]`.
pub fn apply_count_noise(image: &ScanImage, mean_counts: f64, seed: u64) -> Result<ScanImage> {
    if !(mean_counts > 0.0 && mean_counts.is_finite()) {
        return Err(Error::validation("mean_counts", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = image
        .pixels
        .iter()
        .map(|&p| {
            let lambda = p as f64 * mean_counts;
            let counts = if lambda > 0.0 {
                Poisson::new(lambda).map(|d| d.sample(&mut rng)).unwrap_or(lambda)
            } else {
                0.0
            };
            (counts / mean_counts).clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(ScanImage {
        width: image.width,
        height: image.height,
        pixels,
        id: image.id.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionGeometry {
    pub area: usize,
    pub moment_ratio: f64,
}

/// Area and `sqrt(λmax/λmin)` of the second central moments of the set
/// pixels. When `λmin` vanishes (a single row or column) the ratio is
/// reported as the area.
pub fn lesion_geometry_stats(mask: &Mask) -> Result<LesionGeometry> {
    let area = mask.count();
    if area == 0 {
        return Err(Error::validation("mask", "no lesion pixels set"));
    }
    let n = area as f64;
    let (sx, sy) = mask
        .coords()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x as f64, b + y as f64));
    let (mx, my) = (sx / n, sy / n);
    let (mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0);
    for (x, y) in mask.coords() {
        let (dx, dy) = (x as f64 - mx, y as f64 - my);
        cxx += dx * dx;
        cyy += dy * dy;
        cxy += dx * dy;
    }
    let (cxx, cyy, cxy) = (cxx / n, cyy / n, cxy / n);
    let mid = (cxx + cyy) / 2.0;
    let rad = (((cxx - cyy) / 2.0).powi(2) + cxy * cxy).sqrt();
    let (hi, lo) = (mid + rad, mid - rad);
    let moment_ratio = if lo <= 1e-12 * hi.max(1.0) {
        area as f64
    } else {
        (hi / lo).sqrt()
    };
    Ok(LesionGeometry { area, moment_ratio })
}

/// SplitMix64-style mixing of a base seed with a stream index.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates the train and test sets. Case `i` (counted across
/// train-metastasis, train-trauma, test-metastasis, test-trauma in that
/// order) uses seed `derive_seed(seed, i)`.
pub fn generate_dataset(
    split: &DatasetSplit,
    base_metastasis: &PhantomSpec,
    base_trauma: &PhantomSpec,
    seed: u64,
) -> Result<Dataset> {
    let mut m = base_metastasis.clone();
    m.lesion_label = LesionLabel::Metastasis;
    m.validate()?;
    let mut t = base_trauma.clone();
    t.lesion_label = LesionLabel::Trauma;
    t.validate()?;

    let groups = [
        ("train", "m", &m, split.train_metastasis),
        ("train", "t", &t, split.train_trauma),
        ("test", "m", &m, split.test_metastasis),
        ("test", "t", &t, split.test_trauma),
    ];
    let mut jobs = Vec::with_capacity(split.total());
    for (part, tag, base, count) in groups {
        for k in 0..count {
            let index = jobs.len() as u64;
            jobs.push((part, format!("{part}-{tag}-{k:04}"), base, derive_seed(seed, index)));
        }
    }
    let cases: Vec<(&str, PhantomCase)> = jobs
        .into_par_iter()
        .map(|(part, id, base, case_seed)| {
            let spec = PhantomSpec {
                seed: case_seed,
                ..(*base).clone()
            };
            let mut case = generate_case(&spec)?;
            case.image.id = id;
            Ok((part, case))
        })
        .collect::<Result<_>>()?;

    let mut out = Dataset::default();
    for (part, case) in cases {
        if part == "train" {
            out.train.push(case);
        } else {
            out.test.push(case);
        }
    }
    Ok(out)
}
