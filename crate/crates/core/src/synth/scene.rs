//! Synthetic glyph scenes with exact masks and attention-like seeds.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::glyphs::{self, Glyph, ALPHABET};
use crate::error::{Error, Result};
use crate::init;
use crate::tar::{binarize, SoftLabel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundKind {
    Flat,
    Gradient,
    Noise,
}

impl BackgroundKind {
    pub const ALL: [BackgroundKind; 3] = [Self::Flat, Self::Gradient, Self::Noise];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "flat" => Some(Self::Flat),
            "gradient" => Some(Self::Gradient),
            "noise" => Some(Self::Noise),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Flat => "flat",
            Self::Gradient => "gradient",
            Self::Noise => "noise",
        }
    }
}

/// Inclusive pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.y0 + self.y1) as f64 / 2.0,
            (self.x0 + self.x1) as f64 / 2.0,
        )
    }

    pub fn contains(&self, y: f64, x: f64) -> bool {
        y >= self.y0 as f64 && y <= self.y1 as f64 && x >= self.x0 as f64 && x <= self.x1 as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_glyphs: usize,
    pub max_glyphs: usize,
    pub min_glyph_height: usize,
    pub max_glyph_height: usize,
    /// Stroke width as a fraction of glyph height, drawn uniformly from this range.
    pub stroke_fraction: (f32, f32),
    pub min_stroke: f32,
    /// Minimum gap between glyph boxes and from the image border.
    pub margin: usize,
    /// Minimum gap between a glyph's mean intensity and the surrounding background's.
    pub contrast_floor: f32,
    pub noise_amplitude: f32,
    /// Fraction of the mask the binarized seed must cover.
    pub seed_coverage: f64,
    pub seed_threshold: f64,
    pub backgrounds: Vec<BackgroundKind>,
    /// Glyph names to draw from; empty means the whole alphabet.
    pub alphabet: Vec<char>,
    /// Shrink attempts before a layout is declared unplaceable.
    pub retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 48,
            width: 160,
            min_glyphs: 1,
            max_glyphs: 6,
            min_glyph_height: 16,
            max_glyph_height: 40,
            stroke_fraction: (0.10, 0.16),
            min_stroke: 2.0,
            margin: 2,
            contrast_floor: 0.3,
            noise_amplitude: 0.05,
            seed_coverage: 0.25,
            seed_threshold: 0.5,
            backgrounds: BackgroundKind::ALL.to_vec(),
            alphabet: Vec::new(),
            retries: 200,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.height == 0
            || !self.height.is_multiple_of(8)
            || self.width == 0
            || !self.width.is_multiple_of(4)
        {
            return Err(Error::config(format!(
                "scene size {}x{} must have height divisible by 8 and width by 4",
                self.height, self.width
            )));
        }
        if self.min_glyphs == 0 || self.min_glyphs > self.max_glyphs || self.max_glyphs > 8 {
            return bad("glyph count range must satisfy 1 <= min <= max <= 8");
        }
        if self.min_glyph_height < 4 || self.min_glyph_height > self.max_glyph_height {
            return bad("glyph height range must satisfy 4 <= min <= max");
        }
        if self.min_glyph_height + 2 * self.margin > self.height {
            return bad("smallest glyph does not fit the scene height");
        }
        let (lo, hi) = self.stroke_fraction;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) || !(self.min_stroke >= 1.0) {
            return bad("stroke fraction range must lie in (0, 0.5) and min_stroke >= 1");
        }
        if !(0.0..0.5).contains(&self.contrast_floor) {
            return bad("contrast floor must lie in [0, 0.5)");
        }
        if !(0.0..=0.5).contains(&self.noise_amplitude) {
            return bad("noise amplitude must lie in [0, 0.5]");
        }
        if !(self.seed_coverage > 0.0 && self.seed_coverage <= 1.0) {
            return bad("seed coverage must lie in (0, 1]");
        }
        if !(self.seed_threshold > 0.0 && self.seed_threshold < 1.0) {
            return bad("seed threshold must lie in (0, 1)");
        }
        if self.backgrounds.is_empty() {
            return bad("at least one background kind is required");
        }
        if let Some(c) = self
            .alphabet
            .iter()
            .find(|&&c| glyphs::symbol_of(c).is_none())
        {
            return Err(Error::config(format!(
                "glyph '{c}' is not in the built-in alphabet"
            )));
        }
        Ok(())
    }

    fn glyph_pool(&self) -> Vec<&'static Glyph> {
        if self.alphabet.is_empty() {
            ALPHABET.iter().collect()
        } else {
            ALPHABET
                .iter()
                .filter(|g| self.alphabet.contains(&g.name))
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    /// `[H,W]` with entries in `{0,1}`.
    pub mask: Tensor,
    pub symbol: usize,
    pub seed: SoftLabel,
    pub bbox: BBox,
}

impl Instance {
    pub fn area(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v > 0.5).count()
    }

    /// Background pixels in the glyph box that are walled in by the glyph in
    /// all four axis directions (the counter of O, D and most of C).
    pub fn enclosed_background(&self) -> Tensor {
        let (h, w) = (self.mask.shape()[0], self.mask.shape()[1]);
        let m = self.mask.data();
        let on = |y: usize, x: usize| m[y * w + x] > 0.5;
        let b = self.bbox;
        let mut out = Tensor::zeros(&[h, w]);
        let o = out.data_mut();
        for y in b.y0..=b.y1 {
            for x in b.x0..=b.x1 {
                if on(y, x) {
                    continue;
                }
                let left = (b.x0..x).any(|xx| on(y, xx));
                let right = (x + 1..=b.x1).any(|xx| on(y, xx));
                let up = (b.y0..y).any(|yy| on(yy, x));
                let down = (y + 1..=b.y1).any(|yy| on(yy, x));
                if left && right && up && down {
                    o[y * w + x] = 1.0;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphScene {
    pub rng_seed: u64,
    /// `[3,H,W]` in `[0,1]`.
    pub image: Tensor,
    pub instances: Vec<Instance>,
    pub background: BackgroundKind,
}

/// Seed of the `index`-th scene of a corpus.
pub fn scene_seed(corpus_seed: u64, index: usize) -> u64 {
    // splitmix64 finaliser
    let mut z = corpus_seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_corpus(
    corpus_seed: u64,
    count: usize,
    cfg: &SceneConfig,
) -> Result<Vec<GlyphScene>> {
    (0..count)
        .map(|i| {
            generate_scene(scene_seed(corpus_seed, i), cfg).map_err(|e| Error::Scene {
                scene: i,
                source: Box::new(e),
            })
        })
        .collect()
}

pub fn generate_scene(rng_seed: u64, cfg: &SceneConfig) -> Result<GlyphScene> {
    cfg.validate()?;
    let mut rng = init::rng_for(rng_seed, init::stream_id("scene"));
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;

    let background = *cfg
        .backgrounds
        .choose(&mut rng)
        .expect("validated nonempty");
    let mut image = render_background(&mut rng, background, h, w, cfg.noise_amplitude);

    let pool = cfg.glyph_pool();
    let count = rng.random_range(cfg.min_glyphs..=cfg.max_glyphs);
    let chosen: Vec<&'static Glyph> = (0..count)
        .map(|_| *pool.choose(&mut rng).expect("validated nonempty"))
        .collect();
    let placed = layout(&mut rng, &chosen, cfg)?;

    let mut masks = Vec::with_capacity(count);
    let mut occupied = vec![false; n];
    for (bbox, g, stroke) in &placed {
        let local = g.rasterize(bbox.height(), bbox.width(), *stroke);
        let mut mask = vec![0f32; n];
        for (i, &on) in local.iter().enumerate() {
            if on {
                let p = (bbox.y0 + i / bbox.width()) * w + bbox.x0 + i % bbox.width();
                mask[p] = 1.0;
                occupied[p] = true;
            }
        }
        masks.push(mask);
    }

    let mut instances = Vec::with_capacity(count);
    for ((bbox, g, _), mask) in placed.iter().zip(masks) {
        let colour = pick_colour(&mut rng, &image, &occupied, bbox, cfg)?;
        let img = image.data_mut();
        for (p, &m) in mask.iter().enumerate() {
            if m > 0.5 {
                for (c, &v) in colour.iter().enumerate() {
                    img[c * n + p] = v;
                }
            }
        }
        let mask = Tensor::new(&[h, w], mask)?;
        let seed = coverage_seed(&mask, bbox, cfg)?;
        instances.push(Instance {
            mask,
            symbol: glyphs::symbol_of(g.name).expect("alphabet glyph"),
            seed,
            bbox: *bbox,
        });
    }

    let scene = GlyphScene {
        rng_seed,
        image,
        instances,
        background,
    };
    let problems = scene.violations(cfg.contrast_floor, cfg.margin);
    if !problems.is_empty() {
        return Err(Error::Generation(problems.join("; ")));
    }
    Ok(scene)
}

fn render_background(
    rng: &mut ChaCha8Rng,
    kind: BackgroundKind,
    h: usize,
    w: usize,
    noise: f32,
) -> Tensor {
    let n = h * w;
    let base: [f32; 3] = [rng.random(), rng.random(), rng.random()];
    let mut data = vec![0f32; 3 * n];
    match kind {
        BackgroundKind::Flat => {
            for c in 0..3 {
                data[c * n..(c + 1) * n].fill(base[c]);
            }
        }
        BackgroundKind::Gradient => {
            let end: [f32; 3] = [rng.random(), rng.random(), rng.random()];
            let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let (dy, dx) = (angle.sin(), angle.cos());
            let proj = |y: usize, x: usize| y as f32 * dy + x as f32 * dx;
            let corners = [
                proj(0, 0),
                proj(0, w - 1),
                proj(h - 1, 0),
                proj(h - 1, w - 1),
            ];
            let lo = corners.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = corners.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            for p in 0..n {
                let t = (proj(p / w, p % w) - lo) / (hi - lo).max(1e-6);
                for c in 0..3 {
                    data[c * n + p] = base[c] + (end[c] - base[c]) * t;
                }
            }
        }
        BackgroundKind::Noise => {
            for c in 0..3 {
                for v in &mut data[c * n..(c + 1) * n] {
                    *v = (base[c] + rng.random_range(-noise..=noise)).clamp(0.0, 1.0);
                }
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("sized above")
}

/// Places the glyphs left to right with random sizes, gaps and vertical
/// offsets, shrinking them until the row fits.
fn layout(
    rng: &mut ChaCha8Rng,
    chosen: &[&'static Glyph],
    cfg: &SceneConfig,
) -> Result<Vec<(BBox, &'static Glyph, f32)>> {
    let (h, w, m) = (cfg.height, cfg.width, cfg.margin);
    let max_h = cfg.max_glyph_height.min(h - 2 * m);
    let mut heights: Vec<usize> = chosen
        .iter()
        .map(|_| rng.random_range(cfg.min_glyph_height..=max_h))
        .collect();
    let fracs: Vec<f32> = chosen
        .iter()
        .map(|_| rng.random_range(cfg.stroke_fraction.0..=cfg.stroke_fraction.1))
        .collect();
    let size = |gh: usize, frac: f32, g: &Glyph| {
        let stroke = (gh as f32 * frac).max(cfg.min_stroke);
        let gw = ((gh as f32 * g.aspect).round() as usize).max(stroke.ceil() as usize + 2);
        (gw, stroke)
    };
    for _ in 0..cfg.retries {
        let widths: Vec<(usize, f32)> = chosen
            .iter()
            .zip(&heights)
            .zip(&fracs)
            .map(|((g, &gh), &f)| size(gh, f, g))
            .collect();
        let used: usize = widths.iter().map(|(gw, _)| gw).sum::<usize>() + (chosen.len() + 1) * m;
        if used <= w {
            // random split of the slack into len+1 gaps
            let slack = w - used;
            let cuts: Vec<f64> = (0..=chosen.len())
                .map(|_| rng.random::<f64>() + 1e-3)
                .collect();
            let total: f64 = cuts.iter().sum();
            let mut x = m;
            let mut out = Vec::with_capacity(chosen.len());
            for (i, (g, &(gw, stroke))) in chosen.iter().zip(&widths).enumerate() {
                x += (slack as f64 * cuts[i] / total).floor() as usize;
                let gh = heights[i];
                let y0 = rng.random_range(m..=h - m - gh);
                out.push((
                    BBox {
                        y0,
                        x0: x,
                        y1: y0 + gh - 1,
                        x1: x + gw - 1,
                    },
                    *g,
                    stroke,
                ));
                x += gw + m;
            }
            return Ok(out);
        }
        if heights.iter().all(|&gh| gh <= cfg.min_glyph_height) {
            break;
        }
        for gh in &mut heights {
            *gh = ((*gh as f32 * 0.9) as usize).max(cfg.min_glyph_height);
        }
    }
    Err(Error::Generation(format!(
        "{} glyphs do not fit a {h}x{w} scene",
        chosen.len()
    )))
}

fn intensity(image: &Tensor, p: usize) -> f32 {
    let n = image.shape()[1] * image.shape()[2];
    let d = image.data();
    (d[p] + d[n + p] + d[2 * n + p]) / 3.0
}

/// Background pixels around a glyph: its box grown by the margin, minus every glyph.
fn surround<'a>(
    bbox: &BBox,
    occupied: &'a [bool],
    h: usize,
    w: usize,
    margin: usize,
) -> impl Iterator<Item = usize> + 'a {
    let (y0, y1) = (
        bbox.y0.saturating_sub(margin),
        (bbox.y1 + margin).min(h - 1),
    );
    let (x0, x1) = (
        bbox.x0.saturating_sub(margin),
        (bbox.x1 + margin).min(w - 1),
    );
    (y0..=y1)
        .flat_map(move |y| (x0..=x1).map(move |x| y * w + x))
        .filter(move |&p| !occupied[p])
}

fn pick_colour(
    rng: &mut ChaCha8Rng,
    image: &Tensor,
    occupied: &[bool],
    bbox: &BBox,
    cfg: &SceneConfig,
) -> Result<[f32; 3]> {
    let (h, w) = (cfg.height, cfg.width);
    let (sum, cnt) = surround(bbox, occupied, h, w, cfg.margin)
        .fold((0f64, 0usize), |(s, c), p| {
            (s + intensity(image, p) as f64, c + 1)
        });
    if cnt == 0 {
        return Err(Error::Generation(
            "glyph box has no surrounding background".into(),
        ));
    }
    let bg = (sum / cnt as f64) as f32;
    let gap = cfg.contrast_floor + 0.02;
    let below = (bg - gap).max(0.0);
    let above = (1.0 - (bg + gap)).max(0.0);
    if below + above <= 0.0 {
        return Err(Error::Generation(format!(
            "background intensity {bg:.3} leaves no room for contrast {}",
            cfg.contrast_floor
        )));
    }
    for _ in 0..cfg.retries {
        let u = rng.random_range(0.0..below + above);
        let target = if u < below { u } else { bg + gap + (u - below) };
        let mut c = [0f32; 3];
        for v in &mut c {
            *v = target + rng.random_range(-0.15f32..=0.15);
        }
        let shift = target - (c[0] + c[1] + c[2]) / 3.0;
        for v in &mut c {
            *v = (*v + shift).clamp(0.0, 1.0);
        }
        if ((c[0] + c[1] + c[2]) / 3.0 - bg).abs() >= cfg.contrast_floor {
            return Ok(c);
        }
    }
    let grey = if below > 0.0 { 0.0 } else { 1.0 };
    Ok([grey; 3])
}

/// Isotropic Gaussian centred on the glyph box, widened until its binarized
/// footprint covers the configured fraction of the mask.
fn coverage_seed(mask: &Tensor, bbox: &BBox, cfg: &SceneConfig) -> Result<SoftLabel> {
    let (h, w) = (cfg.height, cfg.width);
    let area = mask.data().iter().filter(|&&v| v > 0.5).count();
    if area == 0 {
        return Err(Error::Generation(
            "glyph rasterized to an empty mask".into(),
        ));
    }
    let centre = bbox.center();
    let mut sigma = 0.5f64;
    let limit = (h + w) as f64;
    while sigma <= limit {
        let seed = gaussian_blob(h, w, centre, sigma)?;
        if coverage(&seed, mask, cfg.seed_threshold) >= cfg.seed_coverage {
            return Ok(seed);
        }
        sigma *= 1.08;
    }
    Err(Error::Generation(
        "no seed width reaches the required coverage".into(),
    ))
}

/// `exp(-d^2 / (2 sigma^2))` around `(cy, cx)`.
pub fn gaussian_blob(h: usize, w: usize, (cy, cx): (f64, f64), sigma: f64) -> Result<SoftLabel> {
    if !(sigma > 0.0) {
        return Err(Error::config("blob width must be positive"));
    }
    let t = Tensor::from_fn(&[h, w], |p| {
        let (dy, dx) = ((p / w) as f64 - cy, (p % w) as f64 - cx);
        (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp() as f32
    });
    SoftLabel::new(t)
}

/// Fraction of `mask` inside the binarized seed.
pub fn coverage(seed: &SoftLabel, mask: &Tensor, threshold: f64) -> f64 {
    let b = binarize(seed, threshold);
    let (mut hit, mut total) = (0usize, 0usize);
    for (&s, &m) in b.data().iter().zip(mask.data()) {
        if m > 0.5 {
            total += 1;
            if s > 0.5 {
                hit += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

impl GlyphScene {
    pub fn dims(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }

    /// Every violated scene invariant, empty when the scene is well formed.
    pub fn violations(&self, contrast_floor: f32, margin: usize) -> Vec<String> {
        let (h, w) = self.dims();
        let n = h * w;
        let mut out = Vec::new();
        let mut owner = vec![usize::MAX; n];
        for (i, inst) in self.instances.iter().enumerate() {
            for (p, &v) in inst.mask.data().iter().enumerate() {
                if v > 0.5 {
                    if owner[p] != usize::MAX {
                        out.push(format!(
                            "instances {} and {i} overlap at pixel {p}",
                            owner[p]
                        ));
                        break;
                    }
                    owner[p] = i;
                }
            }
        }
        let occupied: Vec<bool> = owner.iter().map(|&o| o != usize::MAX).collect();
        for (i, inst) in self.instances.iter().enumerate() {
            let (cy, cx) = seed_centroid(&inst.seed);
            if !inst.bbox.contains(cy, cx) {
                out.push(format!(
                    "instance {i}: seed centroid ({cy:.2}, {cx:.2}) outside its box"
                ));
            }
            let fg: Vec<usize> = (0..n).filter(|&p| inst.mask.data()[p] > 0.5).collect();
            if fg.is_empty() {
                out.push(format!("instance {i}: empty mask"));
                continue;
            }
            let fg_mean = fg
                .iter()
                .map(|&p| intensity(&self.image, p) as f64)
                .sum::<f64>()
                / fg.len() as f64;
            let (s, c) = surround(&inst.bbox, &occupied, h, w, margin)
                .fold((0f64, 0usize), |(s, c), p| {
                    (s + intensity(&self.image, p) as f64, c + 1)
                });
            let gap = (fg_mean - s / c.max(1) as f64).abs();
            if c == 0 || gap < contrast_floor as f64 - 1e-6 {
                out.push(format!(
                    "instance {i}: contrast {gap:.3} below floor {contrast_floor}"
                ));
            }
        }
        out
    }
}

/// Value-weighted centroid `(y, x)` of a seed.
pub fn seed_centroid(seed: &SoftLabel) -> (f64, f64) {
    let (_, w) = seed.dims();
    let (mut sy, mut sx, mut s) = (0.0, 0.0, 0.0);
    for (p, &v) in seed.values().data().iter().enumerate() {
        let v = v as f64;
        sy += v * (p / w) as f64;
        sx += v * (p % w) as f64;
        s += v;
    }
    if s == 0.0 {
        (f64::NAN, f64::NAN)
    } else {
        (sy / s, sx / s)
    }
}
