//! Non-overlapping patch extraction and well-edge screening.

use crate::autolabel::{connected_components, Mask};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

pub const DEFAULT_DARK_THRESH: f64 = 0.2;
pub const DEFAULT_AREA_FRAC: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub source_id: String,
    pub offset: (usize, usize),
    pub patch: Image,
}

/// A patch together with its well-edge screening result.
#[derive(Debug, Clone, PartialEq)]
pub struct ScreenedPatch {
    pub record: PatchRecord,
    pub flagged: bool,
    pub score: f64,
}

/// Tiles `image` from the origin with `patch_size` squares, discarding the
/// remainder rows and columns.
pub fn extract_patches(source_id: &str, image: &Image, patch_size: usize) -> Result<Vec<PatchRecord>> {
    if patch_size == 0 {
        return Err(Error::Config("patch_size must be at least 1".into()));
    }
    let (nx, ny) = (image.width() / patch_size, image.height() / patch_size);
    let mut out = Vec::with_capacity(nx * ny);
    for py in 0..ny {
        for px in 0..nx {
            let offset = (px * patch_size, py * patch_size);
            out.push(PatchRecord {
                source_id: source_id.to_string(),
                offset,
                patch: image.crop(offset.0, offset.1, patch_size, patch_size)?,
            });
        }
    }
    Ok(out)
}

/// Scores a patch by the largest dark (below `dark_thresh`) 8-connected
/// region that touches the patch border, as a fraction of the patch area.
pub fn detect_well_edge(patch: &Image, dark_thresh: f64, area_frac: f64) -> (bool, f64) {
    let (w, h) = (patch.width(), patch.height());
    if patch.is_empty() {
        return (false, 0.0);
    }
    let mask = Mask {
        width: w,
        height: h,
        bits: patch.data().iter().map(|&v| v < dark_thresh).collect(),
    };
    let largest = connected_components(&mask)
        .iter()
        .filter(|r| r.touches_border(w, h))
        .map(|r| r.area())
        .max()
        .unwrap_or(0);
    let score = largest as f64 / (w * h) as f64;
    (score >= area_frac, score)
}

pub fn screen(patches: Vec<PatchRecord>, dark_thresh: f64, area_frac: f64) -> Vec<ScreenedPatch> {
    patches
        .into_iter()
        .map(|record| {
            let (flagged, score) = detect_well_edge(&record.patch, dark_thresh, area_frac);
            ScreenedPatch { record, flagged, score }
        })
        .collect()
}

/// Uniformly samples `k` unflagged patches without replacement.
pub fn sample_filtered(patches: &[ScreenedPatch], k: usize, seed: u64) -> Result<Vec<PatchRecord>> {
    let pool: Vec<&ScreenedPatch> = patches.iter().filter(|p| !p.flagged).collect();
    if k > pool.len() {
        return Err(Error::Size(format!("asked for {k} patches, only {} unflagged", pool.len())));
    }
    Ok(rng::sample_indices(&mut rng::rng(seed), pool.len(), k)
        .into_iter()
        .map(|i| pool[i].record.clone())
        .collect())
}

/// Patch manifest line: `source_id offset_x offset_y flagged score`.
pub fn manifest_line(p: &ScreenedPatch) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{:.6}",
        p.record.source_id, p.record.offset.0, p.record.offset.1, p.flagged, p.score
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{add_well_edge, generate_sample, PhantomConfig, WellArc};

    #[test]
    fn full_size_source_gives_twenty_five_tiles() {
        let img = Image::new(3056, 3056);
        let patches = extract_patches("s", &img, 512).unwrap();
        assert_eq!(patches.len(), 25);
        assert!(patches.iter().all(|p| p.offset.0 % 512 == 0 && p.offset.1 % 512 == 0));
        assert!(patches.iter().all(|p| p.offset.0 + 512 <= 3056 && p.offset.1 + 512 <= 3056));
    }

    #[test]
    fn exact_and_undersized_sources() {
        let p = extract_patches("s", &Image::new(512, 512), 512).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].offset, (0, 0));
        assert!(extract_patches("s", &Image::new(511, 512), 512).unwrap().is_empty());
        assert!(extract_patches("s", &Image::new(4, 4), 0).is_err());
    }

    #[test]
    fn patches_are_disjoint_tiles() {
        let data: Vec<f64> = (0..70 * 50).map(|i| i as f64 / 3500.0).collect();
        let img = Image::from_vec(70, 50, data).unwrap();
        let patches = extract_patches("s", &img, 16).unwrap();
        assert_eq!(patches.len(), 4 * 3);
        let mut covered = std::collections::HashSet::new();
        for p in &patches {
            for y in 0..16 {
                for x in 0..16 {
                    assert!(covered.insert((p.offset.0 + x, p.offset.1 + y)));
                    assert_eq!(p.patch.get(x, y), img.get(p.offset.0 + x, p.offset.1 + y));
                }
            }
        }
    }

    #[test]
    fn uniform_and_dark_patches() {
        assert_eq!(detect_well_edge(&Image::filled(16, 16, 0.8), 0.2, 0.05), (false, 0.0));
        assert_eq!(detect_well_edge(&Image::new(16, 16), 0.2, 0.05), (true, 1.0));
    }

    fn arc_fixture(darkness: f64) -> Image {
        let cfg = PhantomConfig { width: 64, height: 64, ..PhantomConfig::default() };
        let s = generate_sample(&cfg, 11).unwrap();
        // circle centred off the patch so its band crosses the left edge
        let arc = WellArc { center: (-60.0, 32.0), radius: 66.0, thickness: 6.5, darkness };
        add_well_edge(&s.brightfield, &arc).unwrap()
    }

    #[test]
    fn injected_arc_is_flagged() {
        let fixture = arc_fixture(1.0);
        let dark = fixture.data().iter().filter(|&&v| v < 0.2).count() as f64 / 4096.0;
        assert!((0.15..0.25).contains(&dark), "arc covers {dark}");
        let (flag, score) = detect_well_edge(&fixture, DEFAULT_DARK_THRESH, DEFAULT_AREA_FRAC);
        assert!(flag);
        assert!(score > 0.15);
    }

    #[test]
    fn score_monotone_in_arc_darkness() {
        let mut prev = 0.0;
        for k in 0..=10 {
            let (_, score) = detect_well_edge(&arc_fixture(k as f64 / 10.0), DEFAULT_DARK_THRESH, DEFAULT_AREA_FRAC);
            assert!(score >= prev);
            prev = score;
        }
    }

    fn screened(n: usize) -> Vec<ScreenedPatch> {
        (0..n)
            .map(|i| ScreenedPatch {
                record: PatchRecord { source_id: format!("s{i}"), offset: (0, 0), patch: Image::new(1, 1) },
                flagged: i % 3 == 0,
                score: 0.0,
            })
            .collect()
    }

    #[test]
    fn sampling_draws_from_unflagged_pool() {
        let all = screened(9);
        let picked = sample_filtered(&all, 6, 1).unwrap();
        let mut ids: Vec<_> = picked.iter().map(|p| p.source_id.clone()).collect();
        ids.sort();
        assert_eq!(ids, ["s1", "s2", "s4", "s5", "s7", "s8"]);
        assert!(sample_filtered(&all, 0, 1).unwrap().is_empty());
        assert_eq!(sample_filtered(&all, 4, 5).unwrap(), sample_filtered(&all, 4, 5).unwrap());
        assert!(matches!(sample_filtered(&all, 7, 1), Err(Error::Size(_))));
    }
}
