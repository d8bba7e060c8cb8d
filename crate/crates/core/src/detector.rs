//! Center-heatmap cell detector and a difference-of-Gaussians baseline.
//!
//! The network downsamples by `stride = 2^(levels − 1)` and predicts, per
//! grid cell, a center logit, the box size in stride units and the sub-cell
//! offset of the center. Boxes come from 3×3 local maxima of the sigmoid
//! heatmap followed by greedy NMS.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::autolabel::BoxPredictor;
use crate::error::{Error, Result};
use crate::eval::{self, confidence_order, iou};
use crate::image::{BBox, Image};
use crate::nn::{adamw_step, AdamWConfig, Bound, Init, OptState, ParamSet, Tape, Tensor, Var};
use crate::rng;

/// Initial heatmap bias, `−ln((1 − 0.1)/0.1)`.
const HEAT_PRIOR_BIAS: f64 = -2.19;
const SIZE_WEIGHT: f64 = 0.5;
const OFFSET_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augment {
    pub hflip: bool,
    pub vflip: bool,
    /// Gain in `[0.9, 1.1]` and offset in `[−0.05, 0.05]`.
    pub intensity_jitter: bool,
    pub mosaic: bool,
    /// Reserved; enabling it is a configuration error.
    pub mixup: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Augment { hflip: true, vflip: true, intensity_jitter: true, mosaic: true, mixup: false }
    }
}

impl Augment {
    pub fn none() -> Self {
        Augment { hflip: false, vflip: false, intensity_jitter: false, mosaic: false, mixup: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub channels: Vec<usize>,
    pub conf_thresh: f64,
    pub nms_iou: f64,
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub augment: Augment,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            channels: vec![8, 16, 32],
            conf_thresh: 0.3,
            nms_iou: 0.5,
            epochs: 40,
            patience: 35,
            lr: 2e-3,
            batch_size: 8,
            weight_decay: 1e-4,
            augment: Augment::default(),
        }
    }
}

impl DetectorConfig {
    pub fn stride(&self) -> usize {
        1 << self.channels.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("detector channels must be a nonempty list of positive counts".into()));
        }
        for (name, v) in [("conf_thresh", self.conf_thresh), ("nms_iou", self.nms_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0,1]")));
            }
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("lr and batch_size must be positive".into()));
        }
        if self.augment.mixup {
            return Err(Error::Config("mixup augmentation is not implemented".into()));
        }
        Ok(())
    }
}

/// Training targets on the `stride`-downsampled grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub grid: (usize, usize),
    /// `[gh·gw]` center heatmap.
    pub heat: Vec<f64>,
    /// `[2, gh, gw]` width and height in stride units.
    pub size: Vec<f64>,
    /// `[2, gh, gw]` center offset within the cell.
    pub offset: Vec<f64>,
    /// `[gh·gw]`, 1 at center cells.
    pub mask: Vec<f64>,
}

fn center_cell(b: &BBox, stride: usize, grid: (usize, usize)) -> (usize, usize, f64, f64) {
    let (cx, cy) = b.center();
    let (gx, gy) = (cx / stride as f64, cy / stride as f64);
    let ix = (gx.floor().max(0.0) as usize).min(grid.0 - 1);
    let iy = (gy.floor().max(0.0) as usize).min(grid.1 - 1);
    (ix, iy, gx - ix as f64, gy - iy as f64)
}

/// Gaussian splats with `sigma = max(1, min(w,h)/(3·stride))` centred on
/// each box's cell, combined by maximum.
pub fn encode_targets(boxes: &[BBox], image_size: (usize, usize), stride: usize) -> Targets {
    let grid = (image_size.0 / stride, image_size.1 / stride);
    let cells = grid.0 * grid.1;
    let mut t = Targets {
        grid,
        heat: vec![0.0; cells],
        size: vec![0.0; 2 * cells],
        offset: vec![0.0; 2 * cells],
        mask: vec![0.0; cells],
    };
    if cells == 0 {
        return t;
    }
    for b in boxes {
        let (ix, iy, ox, oy) = center_cell(b, stride, grid);
        let sigma = (b.w.min(b.h) / (3.0 * stride as f64)).max(1.0);
        let reach = (3.0 * sigma).ceil() as isize;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (x, y) = (ix as isize + dx, iy as isize + dy);
                if x < 0 || y < 0 || x >= grid.0 as isize || y >= grid.1 as isize {
                    continue;
                }
                let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                let k = y as usize * grid.0 + x as usize;
                t.heat[k] = t.heat[k].max(v);
            }
        }
        let k = iy * grid.0 + ix;
        t.mask[k] = 1.0;
        t.size[k] = b.w / stride as f64;
        t.size[cells + k] = b.h / stride as f64;
        t.offset[k] = ox;
        t.offset[cells + k] = oy;
    }
    t
}

/// Greedy non-maximum suppression in confidence order; a box is dropped
/// when its IoU with an already kept box exceeds `iou_thresh`.
pub fn nms(boxes: &[BBox], iou_thresh: f64) -> Vec<BBox> {
    let mut order = boxes.to_vec();
    order.sort_by(confidence_order);
    let mut kept: Vec<BBox> = Vec::new();
    for b in order {
        if kept.iter().all(|k| iou(k, &b) <= iou_thresh) {
            kept.push(b);
        }
    }
    kept
}

/// Raw head outputs for one image on its grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMaps {
    pub grid: (usize, usize),
    /// Center probabilities (after the sigmoid).
    pub heat: Vec<f64>,
    pub size: Vec<f64>,
    pub offset: Vec<f64>,
}

/// Turns head maps into boxes: 3×3 local maxima strictly above
/// `conf_thresh`, clipped to the image, then NMS.
pub fn decode(maps: &HeadMaps, stride: usize, image_size: (usize, usize), conf_thresh: f64, nms_iou: f64) -> Vec<BBox> {
    let (gw, gh) = maps.grid;
    let cells = gw * gh;
    let s = stride as f64;
    let mut found = Vec::new();
    for y in 0..gh {
        for x in 0..gw {
            let v = maps.heat[y * gw + x];
            if v <= conf_thresh {
                continue;
            }
            let mut peak = true;
            for ny in y.saturating_sub(1)..=(y + 1).min(gh - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(gw - 1) {
                    if maps.heat[ny * gw + nx] > v {
                        peak = false;
                    }
                }
            }
            if !peak {
                continue;
            }
            let k = y * gw + x;
            let w = maps.size[k].max(0.0) * s;
            let h = maps.size[cells + k].max(0.0) * s;
            let cx = (x as f64 + maps.offset[k]) * s;
            let cy = (y as f64 + maps.offset[cells + k]) * s;
            let b = BBox::new(cx - w / 2.0, cy - h / 2.0, w, h).clip(image_size.0 as f64, image_size.1 as f64);
            if b.w > 0.0 && b.h > 0.0 {
                found.push(b.with_score(v));
            }
        }
    }
    nms(&found, nms_iou)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn conv_init(cin: usize, k: usize) -> Init {
    Init::Normal((2.0 / (cin * k * k) as f64).sqrt())
}

/// Declares the detector weights for `channels`.
pub fn init_params(config: &DetectorConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = rng::rng(seed);
    let mut p = ParamSet::new();
    let mut cin = 1;
    for (l, &c) in config.channels.iter().enumerate() {
        p.declare(format!("l{l}.a.w"), vec![c, cin, 3, 3], conv_init(cin, 3), &mut rng);
        p.declare(format!("l{l}.a.b"), vec![c], Init::Zeros, &mut rng);
        p.declare(format!("l{l}.b.w"), vec![c, c, 3, 3], conv_init(c, 3), &mut rng);
        p.declare(format!("l{l}.b.b"), vec![c], Init::Zeros, &mut rng);
        cin = c;
    }
    p.declare("head.w", vec![cin, cin, 3, 3], conv_init(cin, 3), &mut rng);
    p.declare("head.b", vec![cin], Init::Zeros, &mut rng);
    p.declare("heat.w", vec![1, cin, 1, 1], Init::Normal(0.01), &mut rng);
    p.declare("heat.b", vec![1], Init::Constant(HEAT_PRIOR_BIAS), &mut rng);
    p.declare("size.w", vec![2, cin, 1, 1], Init::Normal(0.01), &mut rng);
    p.declare("size.b", vec![2], Init::Constant(1.0), &mut rng);
    p.declare("off.w", vec![2, cin, 1, 1], Init::Normal(0.01), &mut rng);
    p.declare("off.b", vec![2], Init::Constant(0.5), &mut rng);
    Ok(p)
}

struct Heads {
    heat: Var,
    size: Var,
    offset: Var,
}

fn check_side(config: &DetectorConfig, width: usize, height: usize) -> Result<()> {
    let s = config.stride();
    if width == 0 || height == 0 || width % s != 0 || height % s != 0 {
        return Err(Error::Shape(format!("image {width}x{height} is not a positive multiple of stride {s}")));
    }
    Ok(())
}

fn forward(config: &DetectorConfig, tape: &mut Tape, p: &Bound<'_>, x: Var) -> Heads {
    let levels = config.channels.len();
    let mut h = x;
    for l in 0..levels {
        h = tape.conv2d(h, p.var(&format!("l{l}.a.w")), p.var(&format!("l{l}.a.b")));
        h = tape.silu(h);
        h = tape.conv2d(h, p.var(&format!("l{l}.b.w")), p.var(&format!("l{l}.b.b")));
        h = tape.silu(h);
        if l + 1 < levels {
            h = tape.avg_pool2(h);
        }
    }
    h = tape.conv2d(h, p.var("head.w"), p.var("head.b"));
    h = tape.silu(h);
    Heads {
        heat: tape.conv2d(h, p.var("heat.w"), p.var("heat.b")),
        size: tape.conv2d(h, p.var("size.w"), p.var("size.b")),
        offset: tape.conv2d(h, p.var("off.w"), p.var("off.b")),
    }
}

/// A labeled training image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub boxes: Vec<BBox>,
}

/// Loss terms for a batch of equally sized samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub heat: f64,
    pub size: f64,
    pub offset: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.heat + SIZE_WEIGHT * self.size + OFFSET_WEIGHT * self.offset
    }
}

/// Focal heatmap loss plus masked L1 on sizes and offsets, with gradients
/// in `params` order.
pub fn loss_and_grad(config: &DetectorConfig, params: &ParamSet, batch: &[Sample]) -> Result<(LossParts, Vec<Tensor>)> {
    let first = batch.first().ok_or_else(|| Error::Size("empty detector batch".into()))?;
    let (w, h) = (first.image.width(), first.image.height());
    check_side(config, w, h)?;
    let stride = config.stride();
    let n = batch.len();
    let (gw, gh) = (w / stride, h / stride);
    let cells = gw * gh;
    let mut pixels = Vec::with_capacity(n * w * h);
    let (mut heat, mut size, mut offset, mut mask2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut positives = 0.0;
    for s in batch {
        if (s.image.width(), s.image.height()) != (w, h) {
            return Err(Error::Shape("detector batch images must share a size".into()));
        }
        pixels.extend_from_slice(s.image.data());
        let t = encode_targets(&s.boxes, (w, h), stride);
        positives += t.mask.iter().sum::<f64>();
        heat.extend(t.heat);
        size.extend(t.size);
        offset.extend(t.offset);
        mask2.extend_from_slice(&t.mask);
        mask2.extend_from_slice(&t.mask);
    }
    let norm = positives.max(1.0);
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let x = tape.leaf(Tensor::from_vec(vec![n, 1, h, w], pixels));
    let heads = forward(config, &mut tape, &bound, x);
    let lh = tape.focal_loss(heads.heat, Tensor::from_vec(vec![n, 1, gh, gw], heat));
    let mask = Tensor::from_vec(vec![n, 2, gh, gw], mask2);
    let ls = tape.masked_l1(heads.size, Tensor::from_vec(vec![n, 2, gh, gw], size), mask.clone(), norm);
    let lo = tape.masked_l1(heads.offset, Tensor::from_vec(vec![n, 2, gh, gw], offset), mask, norm);
    let parts = LossParts {
        heat: tape.value(lh).item(),
        size: tape.value(ls).item(),
        offset: tape.value(lo).item(),
    };
    let ls = tape.scale(ls, SIZE_WEIGHT);
    let lo = tape.scale(lo, OFFSET_WEIGHT);
    let total = tape.add(lh, ls);
    let total = tape.add(total, lo);
    debug_assert_eq!(cells * n, tape.value(heads.heat).len());
    let grads = tape.backward(total);
    Ok((parts, grads.for_params(&tape, &bound)))
}

/// Head maps for each image; all images must share a size.
pub fn head_maps(config: &DetectorConfig, params: &ParamSet, images: &[Image]) -> Result<Vec<HeadMaps>> {
    let Some(first) = images.first() else {
        return Ok(Vec::new());
    };
    let (w, h) = (first.width(), first.height());
    check_side(config, w, h)?;
    let mut pixels = Vec::with_capacity(images.len() * w * h);
    for im in images {
        if (im.width(), im.height()) != (w, h) {
            return Err(Error::Shape("images must share a size".into()));
        }
        pixels.extend_from_slice(im.data());
    }
    let stride = config.stride();
    let (gw, gh) = (w / stride, h / stride);
    let cells = gw * gh;
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let x = tape.leaf(Tensor::from_vec(vec![images.len(), 1, h, w], pixels));
    let heads = forward(config, &mut tape, &bound, x);
    let (heat, size, offset) = (tape.value(heads.heat), tape.value(heads.size), tape.value(heads.offset));
    Ok((0..images.len())
        .map(|i| HeadMaps {
            grid: (gw, gh),
            heat: heat.data()[i * cells..(i + 1) * cells].iter().map(|&z| sigmoid(z)).collect(),
            size: size.data()[2 * i * cells..2 * (i + 1) * cells].to_vec(),
            offset: offset.data()[2 * i * cells..2 * (i + 1) * cells].to_vec(),
        })
        .collect())
}

/// Trained weights bundled with the settings needed to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: ParamSet,
}

impl Detector {
    pub fn detect(&self, image: &Image) -> Result<Vec<BBox>> {
        Ok(self.detect_all(std::slice::from_ref(image))?.remove(0))
    }

    /// Runs images in chunks that share a size.
    pub fn detect_all(&self, images: &[Image]) -> Result<Vec<Vec<BBox>>> {
        let stride = self.config.stride();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let same = chunk.iter().all(|im| (im.width(), im.height()) == (chunk[0].width(), chunk[0].height()));
            let maps = if same {
                head_maps(&self.config, &self.params, chunk)?
            } else {
                chunk
                    .iter()
                    .map(|im| head_maps(&self.config, &self.params, std::slice::from_ref(im)).map(|mut v| v.remove(0)))
                    .collect::<Result<Vec<_>>>()?
            };
            for (im, m) in chunk.iter().zip(&maps) {
                out.push(decode(m, stride, (im.width(), im.height()), self.config.conf_thresh, self.config.nms_iou));
            }
        }
        Ok(out)
    }
}

impl BoxPredictor for Detector {
    fn predict(&self, image: &Image) -> Result<Vec<BBox>> {
        self.detect(image)
    }
}

fn flip_boxes_h(boxes: &[BBox], width: f64) -> Vec<BBox> {
    boxes.iter().map(|b| BBox { x: width - b.x - b.w, ..*b }).collect()
}

fn flip_boxes_v(boxes: &[BBox], height: f64) -> Vec<BBox> {
    boxes.iter().map(|b| BBox { y: height - b.y - b.h, ..*b }).collect()
}

/// Four images share one canvas: each quadrant around a random split point
/// keeps the pixels of a different source at the same coordinates. Boxes
/// are clipped to their quadrant and dropped when a side falls below 2 px
/// or less than 30% of the area survives.
pub fn mosaic(parts: [&Sample; 4], split: (usize, usize)) -> Sample {
    let (w, h) = (parts[0].image.width(), parts[0].image.height());
    let (sx, sy) = split;
    let mut image = Image::new(w, h);
    let mut boxes = Vec::new();
    let regions = [(0, 0, sx, sy), (sx, 0, w, sy), (0, sy, sx, h), (sx, sy, w, h)];
    for (src, &(x0, y0, x1, y1)) in parts.iter().zip(&regions) {
        for y in y0..y1 {
            for x in x0..x1 {
                image.set(x, y, src.image.get(x, y));
            }
        }
        for b in &src.boxes {
            let cx0 = b.x.max(x0 as f64);
            let cy0 = b.y.max(y0 as f64);
            let cx1 = (b.x + b.w).min(x1 as f64);
            let cy1 = (b.y + b.h).min(y1 as f64);
            let (cw, ch) = (cx1 - cx0, cy1 - cy0);
            if cw >= 2.0 && ch >= 2.0 && cw * ch >= 0.3 * b.area() {
                boxes.push(BBox::new(cx0, cy0, cw, ch));
            }
        }
    }
    Sample { image, boxes }
}

fn augment_sample(pool: &[Sample], index: usize, aug: &Augment, stride: usize, rng: &mut rng::Rng) -> Sample {
    let mut s = if aug.mosaic && pool.len() >= 4 && rng.gen_bool(0.5) {
        let (w, h) = (pool[index].image.width(), pool[index].image.height());
        let others: Vec<usize> = (0..3).map(|_| rng.gen_range(0..pool.len())).collect();
        let lo = |n: usize| (n / 4 / stride).max(1) * stride;
        let hi = |n: usize| (3 * n / 4 / stride).max(1) * stride;
        let sx = if lo(w) < hi(w) { rng.gen_range(lo(w)..=hi(w)) } else { w / 2 };
        let sy = if lo(h) < hi(h) { rng.gen_range(lo(h)..=hi(h)) } else { h / 2 };
        mosaic([&pool[index], &pool[others[0]], &pool[others[1]], &pool[others[2]]], (sx, sy))
    } else {
        pool[index].clone()
    };
    let (w, h) = (s.image.width() as f64, s.image.height() as f64);
    if aug.hflip && rng.gen_bool(0.5) {
        s = Sample { image: s.image.flip_horizontal(), boxes: flip_boxes_h(&s.boxes, w) };
    }
    if aug.vflip && rng.gen_bool(0.5) {
        s = Sample { image: s.image.flip_vertical(), boxes: flip_boxes_v(&s.boxes, h) };
    }
    if aug.intensity_jitter {
        let gain = rng.gen_range(0.9..=1.1);
        let shift = rng.gen_range(-0.05..=0.05);
        for v in s.image.data_mut() {
            *v = (*v * gain + shift).clamp(0.0, 1.0);
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutcome {
    pub detector: Detector,
    /// Epoch whose weights were kept; 0 means the initialization.
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Validation mAP@50 after each epoch.
    pub val_map50: Vec<f64>,
    /// Mean loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// mAP@50 of `detector` on labeled samples.
pub fn map50(detector: &Detector, samples: &[Sample]) -> Result<f64> {
    let images: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
    let found = detector.detect_all(&images)?;
    let mut preds = BTreeMap::new();
    let mut gts = BTreeMap::new();
    for (i, (s, p)) in samples.iter().zip(found).enumerate() {
        preds.insert(format!("{i:06}"), p);
        gts.insert(format!("{i:06}"), s.boxes.clone());
    }
    Ok(eval::map_suite(&preds, &gts)?.map50)
}

/// Trains with AdamW. With a validation set, the weights with the best
/// validation mAP@50 are returned and training stops once `patience`
/// epochs pass without improvement.
pub fn train_detector(train: &[Sample], val: &[Sample], config: &DetectorConfig, seed: u64) -> Result<DetectorOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("detector training split is empty".into()));
    }
    let mut params = init_params(config, seed)?;
    let mut opt = OptState::new(&params);
    let adamw = AdamWConfig { lr: config.lr, weight_decay: config.weight_decay, ..AdamWConfig::default() };
    let stride = config.stride();
    let mut aug_rng = rng::rng(rng::derive_seed(seed, 0xA06));
    let mut best = Detector { config: config.clone(), params: params.clone() };
    let mut best_map = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut val_map50 = Vec::new();
    let mut loss_curve = Vec::new();
    let mut epochs_run = 0;
    for epoch in 1..=config.epochs {
        let order = rng::sample_indices(&mut rng::rng(rng::derive_seed(seed, epoch as u64)), train.len(), train.len());
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample> =
                chunk.iter().map(|&i| augment_sample(train, i, &config.augment, stride, &mut aug_rng)).collect();
            let (parts, grads) = loss_and_grad(config, &params, &batch)?;
            let loss = parts.total();
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite detector loss at epoch {epoch}")));
            }
            sum += loss;
            steps += 1;
            adamw_step(&mut params, &grads, &mut opt, &adamw);
        }
        loss_curve.push(sum / steps as f64);
        epochs_run = epoch;
        let current = Detector { config: config.clone(), params: params.clone() };
        if val.is_empty() {
            best = current;
            best_epoch = epoch;
            continue;
        }
        let m = map50(&current, val)?;
        val_map50.push(m);
        if m > best_map {
            best_map = m;
            best_epoch = epoch;
            best = current;
        } else if epoch - best_epoch >= config.patience {
            break;
        }
    }
    Ok(DetectorOutcome { detector: best, best_epoch, epochs_run, val_map50, loss_curve })
}

fn gaussian_blur(image: &Image, sigma: f64) -> Vec<f64> {
    let (w, h) = (image.width(), image.height());
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ksum: f64 = kernel.iter().sum();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * image.get(clampi(x as isize + k as isize - r, w), y);
            }
            tmp[y * w + x] = acc / ksum;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[clampi(y as isize + k as isize - r, h) * w + x];
            }
            out[y * w + x] = acc / ksum;
        }
    }
    out
}

/// Difference-of-Gaussians blob detector. The image is first mapped to its
/// absolute deviation from the median, so a cell's bright interior and
/// dark rim both count as foreground. Each scale's response is
/// `G(σ) − G(1.6σ)`; local maxima over space and neighbouring scales above
/// `thresh` become square boxes of side `2√2·σ`, scored by response
/// relative to the strongest one in the image.
pub fn blob_baseline(image: &Image, sigmas: &[f64], thresh: f64) -> Result<Vec<BBox>> {
    if sigmas.is_empty() || sigmas.windows(2).any(|p| p[0] >= p[1]) || sigmas[0] <= 0.0 {
        return Err(Error::Config("sigmas must be positive and strictly ascending".into()));
    }
    let (w, h) = (image.width(), image.height());
    if w == 0 || h == 0 {
        return Ok(Vec::new());
    }
    let mut sorted = image.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let deviation = Image::from_vec(w, h, image.data().iter().map(|v| (v - median).abs()).collect())?;
    let responses: Vec<Vec<f64>> = sigmas
        .iter()
        .map(|&s| {
            let a = gaussian_blur(&deviation, s);
            let b = gaussian_blur(&deviation, 1.6 * s);
            a.iter().zip(&b).map(|(u, v)| u - v).collect()
        })
        .collect();
    let mut found = Vec::new();
    for (si, resp) in responses.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let v = resp[y * w + x];
                if v <= thresh {
                    continue;
                }
                let lo = si.saturating_sub(1);
                let hi = (si + 1).min(sigmas.len() - 1);
                let is_max = (lo..=hi).all(|sj| {
                    (y.saturating_sub(1)..=(y + 1).min(h - 1)).all(|ny| {
                        (x.saturating_sub(1)..=(x + 1).min(w - 1)).all(|nx| {
                            (sj == si && nx == x && ny == y) || responses[sj][ny * w + nx] < v
                        })
                    })
                });
                if is_max {
                    found.push((x, y, sigmas[si], v));
                }
            }
        }
    }
    let top = found.iter().map(|f| f.3).fold(0.0, f64::max);
    Ok(found
        .into_iter()
        .map(|(x, y, s, v)| {
            let side = 2.0 * 2f64.sqrt() * s;
            BBox::new(x as f64 + 0.5 - side / 2.0, y as f64 + 0.5 - side / 2.0, side, side)
                .clip(w as f64, h as f64)
                .with_score(v / top)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_sample, PhantomConfig};
    use proptest::prelude::*;

    fn tiny() -> DetectorConfig {
        DetectorConfig { channels: vec![4, 6, 8], batch_size: 4, ..DetectorConfig::default() }
    }

    #[test]
    fn no_boxes_zero_heatmap() {
        let t = encode_targets(&[], (32, 32), 4);
        assert_eq!(t.grid, (8, 8));
        assert!(t.heat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_box_peaks_at_its_center_cell() {
        let t = encode_targets(&[BBox::new(9.0, 13.0, 8.0, 6.0)], (32, 32), 4);
        let (arg, _) = t.heat.iter().enumerate().fold((0, -1.0), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
        assert_eq!(arg, 4 * 8 + 3);
        assert_eq!(t.heat.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(t.size[arg], 2.0);
        assert_eq!(t.size[64 + arg], 1.5);
        assert!((t.offset[arg] - 0.25).abs() < 1e-12 && (t.offset[64 + arg] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn two_distant_boxes_give_two_unit_peaks() {
        let t = encode_targets(&[BBox::new(0.0, 0.0, 6.0, 6.0), BBox::new(40.0, 40.0, 6.0, 6.0)], (64, 64), 4);
        let peaks: Vec<usize> = (0..t.heat.len()).filter(|&i| t.heat[i] == 1.0).collect();
        assert_eq!(peaks, vec![0, 10 * 16 + 10]);
        let maps = HeadMaps { grid: t.grid, heat: t.heat.clone(), size: t.size.clone(), offset: t.offset.clone() };
        let boxes = decode(&maps, 4, (64, 64), 0.5, 0.5);
        assert_eq!(boxes.len(), 2);
    }

    #[test]
    fn identical_boxes_collapse_under_nms() {
        let b = BBox::new(1.0, 1.0, 5.0, 5.0);
        let kept = nms(&[b.with_score(0.9), b.with_score(0.8)], 0.5);
        assert_eq!(kept, vec![b.with_score(0.9)]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..50.0f64, 0.0..50.0f64, 1.0..20.0f64, 1.0..20.0f64, 0.0..1.0f64)
            .prop_map(|(x, y, w, h, s)| BBox::new(x, y, w, h).with_score(s))
    }

    proptest! {
        #[test]
        fn nms_is_idempotent(boxes in prop::collection::vec(arb_box(), 0..12), thr in 0.0..1.0f64) {
            let once = nms(&boxes, thr);
            prop_assert_eq!(nms(&once, thr), once);
        }
    }

    #[test]
    fn strongly_negative_heat_bias_detects_nothing() {
        let cfg = tiny();
        let mut p = init_params(&cfg, 1).unwrap();
        p.get_mut("heat.b").unwrap().data_mut()[0] = -50.0;
        p.get_mut("heat.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let det = Detector { config: cfg, params: p };
        let img = generate_sample(&PhantomConfig { width: 32, height: 32, ..PhantomConfig::default() }, 3).unwrap();
        assert!(det.detect(&img.brightfield).unwrap().is_empty());
    }

    /// Weights that pass channel 0 straight through every layer, so a bright
    /// square in the input produces a single heatmap peak.
    fn passthrough(cfg: &DetectorConfig) -> ParamSet {
        let mut p = init_params(cfg, 0).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let names: Vec<String> =
            p.names().iter().filter(|n| n.ends_with(".w") && !n.starts_with("size") && !n.starts_with("off")).cloned().collect();
        for n in names {
            let t = p.get_mut(&n).unwrap();
            let (_, _, kh, kw) = t.dims4();
            t.data_mut()[(kh / 2) * kw + kw / 2] = 4.0;
        }
        p.get_mut("heat.w").unwrap().data_mut()[0] = 40.0;
        p.get_mut("heat.b").unwrap().data_mut()[0] = -10.0;
        p.get_mut("size.b").unwrap().data_mut().copy_from_slice(&[2.0, 3.0]);
        p.get_mut("off.b").unwrap().data_mut().copy_from_slice(&[0.5, 0.5]);
        p
    }

    #[test]
    fn constructed_peak_yields_one_box() {
        let cfg = DetectorConfig { conf_thresh: 0.5, ..tiny() };
        let det = Detector { config: cfg.clone(), params: passthrough(&cfg) };
        let mut img = Image::new(32, 32);
        for y in 12..16 {
            for x in 20..24 {
                img.set(x, y, 1.0);
            }
        }
        let boxes = det.detect(&img).unwrap();
        assert_eq!(boxes.len(), 1, "{boxes:?}");
        let (cx, cy) = boxes[0].center();
        assert_eq!((cx, cy), (22.0, 14.0));
        assert_eq!((boxes[0].w, boxes[0].h), (8.0, 12.0));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let cfg = tiny();
        let mut p = init_params(&cfg, 7).unwrap();
        for t in p.tensors_mut() {
            let mut r = rng::rng(t.len() as u64 + 1);
            t.data_mut().iter_mut().for_each(|v| *v += 0.05 * rng::normal(&mut r));
        }
        let pcfg = PhantomConfig { width: 16, height: 16, cell_count_range: (1, 2), radius_range: (2.5, 4.0), ..PhantomConfig::default() };
        let batch: Vec<Sample> = (0..2)
            .map(|i| {
                let s = generate_sample(&pcfg, i).unwrap();
                Sample { image: s.brightfield, boxes: s.boxes }
            })
            .collect();
        let (_, grads) = loss_and_grad(&cfg, &p, &batch).unwrap();
        let h = 1e-6;
        let names: Vec<String> = p.names().to_vec();
        for (k, name) in names.iter().enumerate() {
            for idx in [0, p.get(name).unwrap().len() / 2] {
                let shift = |d: f64| {
                    let mut q = p.clone();
                    q.get_mut(name).unwrap().data_mut()[idx] += d;
                    loss_and_grad(&cfg, &q, &batch).unwrap().0.total()
                };
                let fd = (shift(h) - shift(-h)) / (2.0 * h);
                let an = grads[k].data()[idx];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-3, "{name}[{idx}]: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = DetectorConfig { epochs: 0, ..tiny() };
        let s = generate_sample(&PhantomConfig { width: 32, height: 32, ..PhantomConfig::default() }, 1).unwrap();
        let train = vec![Sample { image: s.brightfield, boxes: s.boxes }];
        let out = train_detector(&train, &[], &cfg, 4).unwrap();
        assert_eq!(out.detector.params, init_params(&cfg, 4).unwrap());
        assert_eq!(out.epochs_run, 0);
        assert!(train_detector(&[], &[], &cfg, 4).is_err());
    }

    #[test]
    fn mixup_is_rejected() {
        let cfg = DetectorConfig { augment: Augment { mixup: true, ..Augment::default() }, ..tiny() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn training_is_deterministic_and_patience_bounds_epochs() {
        let pcfg = PhantomConfig { width: 16, height: 16, cell_count_range: (1, 2), radius_range: (2.5, 4.0), ..PhantomConfig::default() };
        let samples: Vec<Sample> = (0..8)
            .map(|i| {
                let s = generate_sample(&pcfg, i).unwrap();
                Sample { image: s.brightfield, boxes: s.boxes }
            })
            .collect();
        let cfg = DetectorConfig { epochs: 6, patience: 1, ..tiny() };
        let a = train_detector(&samples[..6], &samples[6..], &cfg, 3).unwrap();
        let b = train_detector(&samples[..6], &samples[6..], &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.epochs_run <= a.best_epoch.max(1) + cfg.patience);
    }

    #[test]
    fn mosaic_keeps_quadrant_pixels_and_clips_boxes() {
        let mk = |v: f64, b: BBox| Sample { image: Image::filled(16, 16, v), boxes: vec![b] };
        let a = mk(0.1, BBox::new(2.0, 2.0, 4.0, 4.0));
        let b = mk(0.2, BBox::new(6.0, 2.0, 4.0, 4.0));
        let c = mk(0.3, BBox::new(0.0, 0.0, 3.0, 3.0));
        let d = mk(0.4, BBox::new(10.0, 10.0, 4.0, 4.0));
        let m = mosaic([&a, &b, &c, &d], (8, 8));
        assert_eq!(m.image.get(0, 0), 0.1);
        assert_eq!(m.image.get(15, 0), 0.2);
        assert_eq!(m.image.get(0, 15), 0.3);
        assert_eq!(m.image.get(15, 15), 0.4);
        assert_eq!(m.boxes, vec![BBox::new(2.0, 2.0, 4.0, 4.0), BBox::new(8.0, 2.0, 2.0, 4.0), BBox::new(10.0, 10.0, 4.0, 4.0)]);
    }

    #[test]
    fn blob_baseline_cases() {
        assert!(blob_baseline(&Image::filled(32, 32, 0.5), &[1.5, 2.0, 3.0], 0.01).unwrap().is_empty());
        let cfg = PhantomConfig {
            width: 48,
            height: 48,
            cell_count_range: (1, 1),
            eccentricity_range: (1.0, 1.0),
            noise_sigma: 0.0,
            ..PhantomConfig::default()
        };
        let s = generate_sample(&cfg, 2).unwrap();
        let sigmas = [2.0, 3.0, 4.0, 5.0, 6.0];
        let boxes = blob_baseline(&s.brightfield, &sigmas, 0.02).unwrap();
        assert_eq!(boxes.len(), 1, "{boxes:?}");
        assert!(iou(&boxes[0], &s.boxes[0]) >= 0.5, "{:?} vs {:?}", boxes[0], s.boxes[0]);
        let fewer = blob_baseline(&s.brightfield, &sigmas, 0.05).unwrap();
        assert!(fewer.len() <= boxes.len());
    }
}
