//! Fluorescence-driven box labeling and model-assisted draft labels.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{BBox, Image};

pub const DEFAULT_MIN_AREA: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Otsu,
    Fixed(f64),
}

/// Binary mask, row-major, same size as its source image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

fn bin_of(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * 256.0) as usize).min(255)
}

/// Otsu's threshold on a 256-bin histogram. Returns the upper edge of the
/// last background bin, so foreground is `value > threshold`.
pub fn otsu_threshold(image: &Image) -> f64 {
    let mut hist = [0usize; 256];
    for &v in image.data() {
        hist[bin_of(v)] += 1;
    }
    let total = image.data().len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best_k, mut best_var) = (0usize, -1.0);
    for (k, &c) in hist.iter().enumerate().take(255) {
        w0 += c as f64;
        sum0 += k as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best_var {
            best_var = between;
            best_k = k;
        }
    }
    if best_var < 0.0 {
        // single-valued histogram: everything is background
        return 1.0;
    }
    (best_k + 1) as f64 / 256.0
}

pub fn binarize(image: &Image, method: Threshold) -> Mask {
    let tau = match method {
        Threshold::Otsu => otsu_threshold(image),
        Threshold::Fixed(t) => t,
    };
    Mask {
        width: image.width(),
        height: image.height(),
        bits: image.data().iter().map(|&v| v > tau).collect(),
    }
}

/// Pixel coordinates `(x, y)` of one connected region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub pixels: Vec<(usize, usize)>,
}

impl Region {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn touches_border(&self, width: usize, height: usize) -> bool {
        self.pixels
            .iter()
            .any(|&(x, y)| x == 0 || y == 0 || x + 1 == width || y + 1 == height)
    }

    pub fn bbox(&self) -> BBox {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for &(x, y) in &self.pixels {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        BBox::new(x0 as f64, y0 as f64, (x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64)
    }
}

/// 8-connected components, ordered by their first pixel in raster order.
pub fn connected_components(mask: &Mask) -> Vec<Region> {
    let (w, h) = (mask.width, mask.height);
    let mut visited = vec![false; w * h];
    let mut regions = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.bits[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            pixels.push((x, y));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.bits[j] && !visited[j] {
                        visited[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        pixels.sort_unstable_by_key(|&(x, y)| (y, x));
        regions.push(Region { pixels });
    }
    regions
}

/// Tight boxes of regions with at least `min_area` pixels.
pub fn boxes_from_regions(regions: &[Region], min_area: usize) -> Vec<BBox> {
    regions
        .iter()
        .filter(|r| r.area() >= min_area)
        .map(Region::bbox)
        .collect()
}

/// Full fluorescence labeling: threshold, components, boxes.
pub fn label_fluorescence(fluor: &Image, method: Threshold, min_area: usize) -> Vec<BBox> {
    boxes_from_regions(&connected_components(&binarize(fluor, method)), min_area)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Provenance {
    AutoFluorescence,
    ModelAssisted,
    Reviewed,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::AutoFluorescence => "auto_fluorescence",
            Provenance::ModelAssisted => "model_assisted",
            Provenance::Reviewed => "reviewed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub image_id: String,
    pub boxes: Vec<BBox>,
    pub provenance: Provenance,
}

/// Anything that proposes scored boxes for an image.
pub trait BoxPredictor {
    fn predict(&self, image: &Image) -> Result<Vec<BBox>>;
}

/// Runs the detector over `images` and keeps boxes scoring strictly above
/// `conf_thresh` as draft labels.
pub fn model_assisted_label<P: BoxPredictor + ?Sized>(
    detector: Option<&P>,
    images: &[(String, Image)],
    conf_thresh: f64,
) -> Result<Vec<LabelRecord>> {
    let detector =
        detector.ok_or_else(|| Error::Config("model-assisted labeling needs a trained detector".into()))?;
    images
        .iter()
        .map(|(id, img)| {
            let boxes = detector
                .predict(img)?
                .into_iter()
                .filter(|b| b.score.unwrap_or(0.0) > conf_thresh)
                .collect();
            Ok(LabelRecord {
                image_id: id.clone(),
                boxes,
                provenance: Provenance::ModelAssisted,
            })
        })
        .collect()
}

/// Review file: one line per image, the id followed by space-separated
/// `x,y,w,h,score` tuples.
pub fn review_text(records: &[LabelRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.image_id);
        for b in &r.boxes {
            out.push(' ');
            out.push_str(&b.with_score(b.score.unwrap_or(1.0)).to_tuple());
        }
        out.push('\n');
    }
    out
}

pub fn write_review(path: &Path, records: &[LabelRecord]) -> Result<()> {
    if let Some(r) = records.iter().find(|r| r.image_id.is_empty() || r.image_id.contains(char::is_whitespace)) {
        return Err(Error::Input(format!("image id {:?} cannot go in a review file", r.image_id)));
    }
    fs::write(path, review_text(records)).map_err(|e| Error::io(path, e))
}

pub fn parse_review(text: &str, origin: &Path) -> Result<BTreeMap<String, Vec<BBox>>> {
    let mut edits = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(id) = parts.next() else { continue };
        let boxes = parts
            .map(BBox::parse_tuple)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|m| Error::format(origin, format!("line {}: {m}", no + 1)))?;
        edits.insert(id.to_string(), boxes);
    }
    Ok(edits)
}

/// Applies reviewed box lists. Listed images get their boxes replaced; every
/// record ends up with provenance `reviewed`.
pub fn apply_review(records: &[LabelRecord], edits: &BTreeMap<String, Vec<BBox>>) -> Vec<LabelRecord> {
    records
        .iter()
        .map(|r| LabelRecord {
            image_id: r.image_id.clone(),
            boxes: edits.get(&r.image_id).cloned().unwrap_or_else(|| r.boxes.clone()),
            provenance: Provenance::Reviewed,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_sample, PhantomConfig};

    fn mask_from(rows: &[&str]) -> Mask {
        let mut m = Mask::new(rows[0].len(), rows.len());
        for (y, row) in rows.iter().enumerate() {
            for (x, c) in row.chars().enumerate() {
                m.set(x, y, c == '#');
            }
        }
        m
    }

    #[test]
    fn fixed_threshold_above_constant_is_empty() {
        let img = Image::filled(5, 5, 0.4);
        assert_eq!(binarize(&img, Threshold::Fixed(0.5)).count(), 0);
        assert_eq!(binarize(&img, Threshold::Otsu).count(), 0);
    }

    #[test]
    fn otsu_splits_two_level_image() {
        let data: Vec<f64> = (0..64).map(|i| if i < 32 { 0.0 } else { 1.0 }).collect();
        let img = Image::from_vec(8, 8, data).unwrap();
        let m = binarize(&img, Threshold::Otsu);
        assert!(m.bits[..32].iter().all(|&b| !b));
        assert!(m.bits[32..].iter().all(|&b| b));
    }

    #[test]
    fn diagonal_touch_is_one_component() {
        let m = mask_from(&["#.", ".#"]);
        assert_eq!(connected_components(&m).len(), 1);
        assert!(connected_components(&Mask::new(4, 4)).is_empty());
    }

    #[test]
    fn one_pixel_gap_separates_blobs() {
        let m = mask_from(&["##...", "##...", "..##.", "..##."]);
        assert_eq!(connected_components(&m).len(), 1, "diagonal neighbours join");
        let m = mask_from(&["##....", "##....", "......", "...###", "...###"]);
        let regions = connected_components(&m);
        assert_eq!(regions.len(), 2);
        assert_eq!(regions[0].pixels[0], (0, 0));
        assert_eq!(regions[1].pixels[0], (3, 3));
    }

    #[test]
    fn rectangle_region_gives_its_box() {
        let mut m = Mask::new(20, 20);
        for y in 4..9 {
            for x in 3..13 {
                m.set(x, y, true);
            }
        }
        m.set(18, 18, true);
        let boxes = boxes_from_regions(&connected_components(&m), 4);
        assert_eq!(boxes, vec![BBox::new(3.0, 4.0, 10.0, 5.0)]);
    }

    #[test]
    fn otsu_recovers_phantom_interiors() {
        let cfg = PhantomConfig::default();
        for seed in 0..20 {
            let s = generate_sample(&cfg, seed).unwrap();
            let interior = s.interior_mask();
            let mask = binarize(&s.fluorescence, Threshold::Otsu);
            let total = interior.iter().filter(|&&b| b).count();
            let hit = interior.iter().zip(&mask.bits).filter(|(&a, &b)| a && b).count();
            if total > 0 {
                assert!(hit as f64 >= 0.95 * total as f64, "seed {seed}: {hit}/{total}");
            }
        }
    }

    #[test]
    fn phantom_boxes_recovered_with_high_iou() {
        let cfg = PhantomConfig::default();
        for seed in 0..20 {
            let s = generate_sample(&cfg, seed).unwrap();
            let found = label_fluorescence(&s.fluorescence, Threshold::Otsu, DEFAULT_MIN_AREA);
            assert_eq!(found.len(), s.boxes.len(), "seed {seed}");
            for gt in &s.boxes {
                let best = found.iter().map(|b| crate::eval::iou(b, gt)).fold(0.0, f64::max);
                assert!(best >= 0.8, "seed {seed}: iou {best}");
            }
        }
    }

    struct Fixed(Vec<BBox>);
    impl BoxPredictor for Fixed {
        fn predict(&self, _: &Image) -> Result<Vec<BBox>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn exclusive_confidence_cut() {
        let det = Fixed(vec![BBox::new(0.0, 0.0, 2.0, 2.0).with_score(1.0), BBox::new(1.0, 1.0, 2.0, 2.0).with_score(0.4)]);
        let imgs = vec![("a".to_string(), Image::new(4, 4))];
        assert!(model_assisted_label(Some(&det), &imgs, 1.0).unwrap()[0].boxes.is_empty());
        assert_eq!(model_assisted_label(Some(&det), &imgs, 0.3).unwrap()[0].boxes.len(), 2);
        assert!(matches!(model_assisted_label::<Fixed>(None, &imgs, 0.3), Err(Error::Config(_))));
    }

    #[test]
    fn empty_review_only_changes_provenance() {
        let recs = vec![LabelRecord {
            image_id: "img1".into(),
            boxes: vec![BBox::new(1.0, 2.0, 3.0, 4.0).with_score(0.9)],
            provenance: Provenance::ModelAssisted,
        }];
        let edits = parse_review("", Path::new("r.txt")).unwrap();
        let out = apply_review(&recs, &edits);
        assert_eq!(out[0].boxes, recs[0].boxes);
        assert_eq!(out[0].provenance, Provenance::Reviewed);
    }

    #[test]
    fn review_edits_replace_box_lists() {
        let recs = vec![
            LabelRecord { image_id: "a".into(), boxes: vec![BBox::new(0.0, 0.0, 1.0, 1.0)], provenance: Provenance::ModelAssisted },
            LabelRecord { image_id: "b".into(), boxes: vec![], provenance: Provenance::ModelAssisted },
        ];
        let text = review_text(&recs);
        assert_eq!(text, "a 0,0,1,1,1\nb\n");
        let edits = parse_review("b 2,2,3,3,0.5\n", Path::new("r")).unwrap();
        let out = apply_review(&recs, &edits);
        assert_eq!(out[0].boxes, recs[0].boxes);
        assert_eq!(out[1].boxes, vec![BBox::new(2.0, 2.0, 3.0, 3.0).with_score(0.5)]);
    }

    proptest::proptest! {
        #[test]
        fn raising_fixed_threshold_never_adds_pixels(data in proptest::collection::vec(0.0f64..1.0, 36), t in 0.0f64..1.0, dt in 0.0f64..0.5) {
            let img = Image::from_vec(6, 6, data).unwrap();
            let lo = binarize(&img, Threshold::Fixed(t));
            let hi = binarize(&img, Threshold::Fixed(t + dt));
            proptest::prop_assert!(lo.bits.iter().zip(&hi.bits).all(|(&a, &b)| a || !b));
        }

        #[test]
        fn regions_partition_the_mask(bits in proptest::collection::vec(proptest::bool::ANY, 49)) {
            let m = Mask { width: 7, height: 7, bits };
            let regions = connected_components(&m);
            let mut seen = std::collections::HashSet::new();
            for r in &regions {
                for p in &r.pixels {
                    proptest::prop_assert!(seen.insert(*p));
                }
            }
            proptest::prop_assert_eq!(seen.len(), m.count());
        }
    }
}
