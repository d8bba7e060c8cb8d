//! Procedural brightfield/fluorescence cell phantoms with exact boxes.
//!
//! Each cell is an ellipse. In the brightfield channel it appears as a
//! slightly brighter plateau bounded by a dark rim and surrounded by a faint
//! bright halo, all drawn over a flat background. The fluorescence channel
//! is a filled plateau over the ellipse, which is what the labeling stage
//! thresholds.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;

use crate::dataset::{DatasetManifest, Record, Source, Split};
use crate::error::{Error, Result};
use crate::image::{BBox, Image};
use crate::rng;

/// Width of the dark rim band, in pixels of signed distance.
const RIM_WIDTH: f64 = 1.0;
/// Softness of the interior plateau edge.
const EDGE_SOFTNESS: f64 = 0.5;
/// Placement attempts per cell before it is skipped.
const MAX_ATTEMPTS: usize = 100;
/// Gap kept between the bounding circles of non-overlapping cells.
const MIN_GAP: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub width: usize,
    pub height: usize,
    pub cell_count_range: (usize, usize),
    pub radius_range: (f64, f64),
    pub eccentricity_range: (f64, f64),
    pub rim_darkness: f64,
    pub interior_brightness: f64,
    pub halo_width: f64,
    pub background_level: f64,
    pub noise_sigma: f64,
    pub fluorescence_level: f64,
    pub overlap_allowed: bool,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            width: 64,
            height: 64,
            cell_count_range: (2, 6),
            radius_range: (5.0, 9.0),
            eccentricity_range: (1.0, 1.5),
            rim_darkness: 0.3,
            interior_brightness: 0.65,
            halo_width: 2.0,
            background_level: 0.5,
            noise_sigma: 0.02,
            fluorescence_level: 0.8,
            overlap_allowed: false,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad("phantom size must be nonzero".into());
        }
        if self.cell_count_range.0 > self.cell_count_range.1 {
            return bad(format!("cell_count_range {:?} has min > max", self.cell_count_range));
        }
        let (r0, r1) = self.radius_range;
        if !(r0 > 0.0 && r0 <= r1) {
            return bad(format!("radius_range {:?} must satisfy 0 < min <= max", self.radius_range));
        }
        let (e0, e1) = self.eccentricity_range;
        if !(1.0..=2.0).contains(&e0) || !(1.0..=2.0).contains(&e1) || e0 > e1 {
            return bad(format!("eccentricity_range {:?} must be ordered within [1,2]", self.eccentricity_range));
        }
        for (name, v) in [
            ("rim_darkness", self.rim_darkness),
            ("interior_brightness", self.interior_brightness),
            ("background_level", self.background_level),
            ("noise_sigma", self.noise_sigma),
            ("fluorescence_level", self.fluorescence_level),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name}={v} outside [0,1]"));
            }
        }
        if !(self.halo_width > 0.0) {
            return bad(format!("halo_width {} must be positive", self.halo_width));
        }
        Ok(())
    }
}

/// Geometry of one rendered cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellParams {
    pub center: (f64, f64),
    /// Semi-axes along the rotated x and y directions.
    pub radii: (f64, f64),
    /// Rotation in radians.
    pub angle: f64,
}

impl CellParams {
    /// Half extents of the ellipse's axis-aligned bounding rectangle.
    pub fn half_extents(&self) -> (f64, f64) {
        let (a, b) = self.radii;
        let (s, c) = self.angle.sin_cos();
        ((a * a * c * c + b * b * s * s).sqrt(), (a * a * s * s + b * b * c * c).sqrt())
    }

    /// Normalized radial coordinate: 1 on the boundary, <1 inside.
    fn radial(&self, px: f64, py: f64) -> f64 {
        let (dx, dy) = (px - self.center.0, py - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.radii.0).powi(2) + (v / self.radii.1).powi(2)).sqrt()
    }

    fn bounding_radius(&self) -> f64 {
        self.radii.0.max(self.radii.1)
    }

    fn bbox(&self, width: usize, height: usize) -> BBox {
        let (ex, ey) = self.half_extents();
        BBox::new(self.center.0 - ex, self.center.1 - ey, 2.0 * ex, 2.0 * ey)
            .clip(width as f64, height as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub brightfield: Image,
    pub fluorescence: Image,
    pub boxes: Vec<BBox>,
    pub cells: Vec<CellParams>,
}

impl PhantomSample {
    /// Pixels whose centers fall inside some cell ellipse.
    pub fn interior_mask(&self) -> Vec<bool> {
        let (w, h) = (self.brightfield.width(), self.brightfield.height());
        let mut mask = vec![false; w * h];
        for cell in &self.cells {
            for y in 0..h {
                for x in 0..w {
                    if cell.radial(x as f64 + 0.5, y as f64 + 0.5) <= 1.0 {
                        mask[y * w + x] = true;
                    }
                }
            }
        }
        mask
    }
}

fn uniform(rng: &mut rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn place_cells(config: &PhantomConfig, rng: &mut rng::Rng) -> Vec<CellParams> {
    let (cmin, cmax) = config.cell_count_range;
    let count = rng.gen_range(cmin..=cmax);
    let mut cells: Vec<CellParams> = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..MAX_ATTEMPTS {
            let r = uniform(rng, config.radius_range);
            let e = uniform(rng, config.eccentricity_range);
            let angle = uniform(rng, (0.0, PI));
            let mut cell = CellParams {
                center: (0.0, 0.0),
                radii: (r * e.sqrt(), r / e.sqrt()),
                angle,
            };
            let (ex, ey) = cell.half_extents();
            let coord = |rng: &mut rng::Rng, extent: f64, size: usize| {
                let (lo, hi) = (extent + 1.0, size as f64 - extent - 1.0);
                if lo < hi {
                    rng.gen_range(lo..hi)
                } else {
                    size as f64 / 2.0
                }
            };
            cell.center = (coord(rng, ex, config.width), coord(rng, ey, config.height));
            let clear = config.overlap_allowed
                || cells.iter().all(|other| {
                    let d = ((cell.center.0 - other.center.0).powi(2)
                        + (cell.center.1 - other.center.1).powi(2))
                    .sqrt();
                    d >= cell.bounding_radius() + other.bounding_radius() + MIN_GAP
                });
            if clear {
                cells.push(cell);
                break;
            }
        }
    }
    cells
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Renders one phantom. Deterministic for a fixed `(config, seed)`.
pub fn generate_sample(config: &PhantomConfig, seed: u64) -> Result<PhantomSample> {
    config.validate()?;
    let mut rng = rng::rng(seed);
    let cells = place_cells(config, &mut rng);
    let (w, h) = (config.width, config.height);
    let mut bf = Image::filled(w, h, config.background_level);
    let mut fl = Image::new(w, h);
    let plateau = config.interior_brightness - config.background_level;
    let halo_amp = config.rim_darkness / 3.0;
    for cell in &cells {
        let mean_radius = (cell.radii.0 * cell.radii.1).sqrt();
        for y in 0..h {
            for x in 0..w {
                let rho = cell.radial(x as f64 + 0.5, y as f64 + 0.5);
                // approximate signed distance to the boundary, in pixels
                let s = (rho - 1.0) * mean_radius;
                let inside = sigmoid(-s / EDGE_SOFTNESS);
                let rim = (-(s / RIM_WIDTH).powi(2)).exp();
                let halo = (-(s.max(0.0) / config.halo_width).powi(2)).exp() * sigmoid(s / EDGE_SOFTNESS);
                let delta = plateau * inside - config.rim_darkness * rim + halo_amp * halo;
                let i = y * w + x;
                bf.data_mut()[i] += delta;
                if rho <= 1.0 {
                    fl.data_mut()[i] = config.fluorescence_level;
                }
            }
        }
    }
    if config.noise_sigma > 0.0 {
        for img in [&mut bf, &mut fl] {
            for v in img.data_mut() {
                *v += config.noise_sigma * rng::normal(&mut rng);
            }
        }
    }
    bf.clamp_unit();
    fl.clamp_unit();
    let boxes = cells.iter().map(|c| c.bbox(w, h)).collect();
    Ok(PhantomSample {
        brightfield: bf,
        fluorescence: fl,
        boxes,
        cells,
    })
}

/// A dark refraction arc: the band of pixels within `thickness` of a circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WellArc {
    pub center: (f64, f64),
    pub radius: f64,
    pub thickness: f64,
    pub darkness: f64,
}

/// Darkens pixels near the arc circle multiplicatively by `1 - darkness`.
pub fn add_well_edge(image: &Image, arc: &WellArc) -> Result<Image> {
    if !(arc.radius > 0.0 && arc.thickness > 0.0) {
        return Err(Error::Config("well arc needs positive radius and thickness".into()));
    }
    let mut out = image.clone();
    let factor = 1.0 - arc.darkness.clamp(0.0, 1.0);
    for y in 0..image.height() {
        for x in 0..image.width() {
            let d = ((x as f64 + 0.5 - arc.center.0).powi(2) + (y as f64 + 0.5 - arc.center.1).powi(2)).sqrt();
            if (d - arc.radius).abs() <= arc.thickness {
                out.set(x, y, image.get(x, y) * factor);
            }
        }
    }
    Ok(out)
}

/// Fluorescence file name paired with a brightfield image reference.
pub fn fluorescence_ref(image_ref: &str) -> String {
    match image_ref.strip_suffix("_bf.pgm") {
        Some(stem) => format!("{stem}_fl.pgm"),
        None => format!("{image_ref}.fl.pgm"),
    }
}

/// Writes `n` phantoms into `out_dir` together with `manifest.txt`.
/// Sample `i` uses `derive_seed(config.seed, i)`.
pub fn generate_dataset(config: &PhantomConfig, n: usize, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let sample = generate_sample(config, rng::derive_seed(config.seed, i as u64))?;
        let image_ref = format!("phantom_{i:05}_bf.pgm");
        sample.brightfield.save_pgm(&out_dir.join(&image_ref))?;
        sample
            .fluorescence
            .save_pgm(&out_dir.join(fluorescence_ref(&image_ref)))?;
        records.push(Record::new(image_ref, Source::Real, Split::Unassigned, sample.boxes));
    }
    let manifest = DatasetManifest::new("phantoms", config.seed, records);
    if n > 0 {
        manifest.save(&out_dir.join("manifest.txt"))?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PhantomConfig {
        PhantomConfig::default()
    }

    /// Bounding rectangle from densely sampling the rotated ellipse boundary.
    fn sampled_extent(c: &CellParams) -> (f64, f64, f64, f64) {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        let (sa, ca) = c.angle.sin_cos();
        for k in 0..20_000 {
            let t = 2.0 * PI * k as f64 / 20_000.0;
            let (u, v) = (c.radii.0 * t.cos(), c.radii.1 * t.sin());
            let x = c.center.0 + u * ca - v * sa;
            let y = c.center.1 + u * sa + v * ca;
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        (x0, y0, x1, y1)
    }

    #[test]
    fn zero_cells_gives_background_only() {
        let c = PhantomConfig { cell_count_range: (0, 0), noise_sigma: 0.0, ..cfg() };
        let s = generate_sample(&c, 1).unwrap();
        assert!(s.boxes.is_empty());
        assert!(s.brightfield.data().iter().all(|&v| v == c.background_level));
        assert!(s.fluorescence.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn boxes_match_sampled_ellipse_extent() {
        let c = PhantomConfig { cell_count_range: (3, 3), ..cfg() };
        for seed in 0..20 {
            let s = generate_sample(&c, seed).unwrap();
            assert_eq!(s.boxes.len(), 3, "seed {seed}");
            for (b, cell) in s.boxes.iter().zip(&s.cells) {
                let (x0, y0, x1, y1) = sampled_extent(cell);
                let (x0, y0) = (x0.max(0.0), y0.max(0.0));
                let (x1, y1) = (x1.min(c.width as f64), y1.min(c.height as f64));
                assert!((b.x - x0).abs() < 1e-3 && (b.y - y0).abs() < 1e-3);
                assert!((b.x + b.w - x1).abs() < 1e-3 && (b.y + b.h - y1).abs() < 1e-3);
                assert!(b.contains(cell.center.0, cell.center.1));
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_sample(&cfg(), 99).unwrap();
        let b = generate_sample(&cfg(), 99).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_sample(&cfg(), 100).unwrap());
    }

    #[test]
    fn inverted_ranges_are_config_errors() {
        let c = PhantomConfig { cell_count_range: (4, 2), ..cfg() };
        assert!(matches!(generate_sample(&c, 0), Err(Error::Config(_))));
        let c = PhantomConfig { radius_range: (6.0, 3.0), ..cfg() };
        assert!(generate_sample(&c, 0).is_err());
        let c = PhantomConfig { noise_sigma: 1.5, ..cfg() };
        assert!(generate_sample(&c, 0).is_err());
    }

    #[test]
    fn non_overlapping_cells_keep_their_gap() {
        let c = PhantomConfig { cell_count_range: (6, 6), ..cfg() };
        for seed in 0..10 {
            let s = generate_sample(&c, seed).unwrap();
            for (i, a) in s.cells.iter().enumerate() {
                for b in &s.cells[i + 1..] {
                    let d = ((a.center.0 - b.center.0).powi(2) + (a.center.1 - b.center.1).powi(2)).sqrt();
                    assert!(d >= a.bounding_radius() + b.bounding_radius() + MIN_GAP);
                }
            }
        }
    }

    #[test]
    fn interiors_fluoresce_above_background_noise_band() {
        let c = cfg();
        let floor = c.background_level + 3.0 * c.noise_sigma;
        for seed in 0..10 {
            let s = generate_sample(&c, seed).unwrap();
            let mask = s.interior_mask();
            for (v, &m) in s.fluorescence.data().iter().zip(&mask) {
                if m {
                    assert!(*v > floor, "interior value {v} <= {floor}");
                }
            }
        }
    }

    #[test]
    fn well_edge_identity_and_full_darkening() {
        let img = Image::filled(16, 16, 0.7);
        let arc = WellArc { center: (8.0, 8.0), radius: 5.0, thickness: 1.0, darkness: 0.0 };
        assert_eq!(add_well_edge(&img, &arc).unwrap(), img);
        let dark = add_well_edge(&img, &WellArc { darkness: 1.0, ..arc }).unwrap();
        assert_eq!(dark.get(8, 2), 0.0);
        assert_eq!(dark.get(8, 8), 0.7);
        let far = WellArc { center: (500.0, 500.0), ..arc };
        assert_eq!(add_well_edge(&img, &far).unwrap(), img);
        assert!(add_well_edge(&img, &WellArc { radius: 0.0, ..arc }).is_err());
    }

    #[test]
    fn dataset_writes_every_referenced_file() {
        let dir = tempfile::tempdir().unwrap();
        let c = PhantomConfig { width: 16, height: 16, radius_range: (2.0, 3.0), ..cfg() };
        let m = generate_dataset(&c, 5, dir.path()).unwrap();
        assert_eq!(m.records.len(), 5);
        for r in &m.records {
            assert!(dir.path().join(&r.image_ref).exists());
            assert!(dir.path().join(fluorescence_ref(&r.image_ref)).exists());
        }
        let again = tempfile::tempdir().unwrap();
        let m2 = generate_dataset(&c, 5, again.path()).unwrap();
        assert_eq!(m, m2);
        for r in &m.records {
            assert_eq!(
                std::fs::read(dir.path().join(&r.image_ref)).unwrap(),
                std::fs::read(again.path().join(&r.image_ref)).unwrap()
            );
        }
        let empty = tempfile::tempdir().unwrap();
        assert!(generate_dataset(&c, 0, empty.path()).unwrap().records.is_empty());
        assert_eq!(std::fs::read_dir(empty.path()).unwrap().count(), 0);
    }

    proptest::proptest! {
        #[test]
        fn pixels_stay_in_unit_interval(seed in 0u64..1000, noise in 0.0f64..0.3) {
            let c = PhantomConfig { width: 24, height: 24, radius_range: (2.0, 4.0), noise_sigma: noise, overlap_allowed: true, ..cfg() };
            let s = generate_sample(&c, seed).unwrap();
            proptest::prop_assert!(s.brightfield.data().iter().chain(s.fluorescence.data()).all(|v| (0.0..=1.0).contains(v)));
            for (b, cell) in s.boxes.iter().zip(&s.cells) {
                proptest::prop_assert!(b.contains(cell.center.0, cell.center.1));
            }
        }
    }
}
