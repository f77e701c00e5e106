//! Scene parsing: color segmentation followed by occlusion-aware template
//! matching against the renderer's sprites.
//!
//! Every pixel is assigned to the nearest of background, gripper grey and the
//! object palette (or "unknown" when nothing is close). Each connected color
//! region is matched against every (shape, stack-cue size, offset) sprite;
//! sprite pixels covered by another object or by the gripper count as
//! occluded rather than missing. The verdict is plausible iff the image
//! parses, every detection lies in bounds, stacks are supported, no two
//! detections overlap beyond tolerance and, when a reference is given, the
//! (shape, color) multiset matches it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::render::{base_sprite, rgb, sprite_growth, sprite_mask, BACKGROUND_RGB, GRIPPER_GREY, PALETTE_RGB};
use super::{dist2, Color, EnvConfig, Shape};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParseConfig {
    /// Max RGB distance for a pixel to join a class.
    pub class_threshold: f32,
    /// Minimum template score for a color region to count as an object.
    pub min_score: f32,
    /// Weight of occluded sprite pixels relative to matched ones.
    pub occlusion_weight: f32,
    pub max_unknown_fraction: f32,
    /// Isolated single pixels tolerated before the image is unparseable.
    pub max_stray_pixels: usize,
    /// Overlap slack between detections, in pixels.
    pub overlap_tolerance_px: f64,
    pub max_stack_cue: usize,
}

impl Default for ParseConfig {
    fn default() -> Self {
        Self {
            class_threshold: 0.3,
            min_score: 0.5,
            occlusion_weight: 0.75,
            max_unknown_fraction: 0.08,
            max_stray_pixels: 4,
            overlap_tolerance_px: 1.0,
            max_stack_cue: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub shape: Shape,
    pub color: Color,
    /// Estimated (x, y) in workspace units.
    pub pos: [f64; 2],
    /// Number of objects stacked on this one, read from the sprite size.
    pub objects_above: usize,
    pub score: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ParseVerdict {
    Plausible,
    Implausible(String),
    Unparseable(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParseOutcome {
    pub detections: Vec<Detection>,
    pub verdict: ParseVerdict,
}

impl ParseOutcome {
    pub fn is_plausible(&self) -> bool {
        self.verdict == ParseVerdict::Plausible
    }

    pub fn multiset(&self) -> Vec<(Shape, Color)> {
        let mut m: Vec<_> = self.detections.iter().map(|d| (d.shape, d.color)).collect();
        m.sort();
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Px {
    Background,
    Gripper,
    Object(u8),
    Unknown,
}

fn classify(p: [f32; 3], threshold: f32) -> Px {
    let d = |c: [f32; 3]| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt();
    let mut best = (d(rgb(BACKGROUND_RGB)), Px::Background);
    for (i, c) in PALETTE_RGB.iter().enumerate() {
        let di = d(rgb(*c));
        if di < best.0 {
            best = (di, Px::Object(i as u8));
        }
    }
    let level = ((p[0] + p[1] + p[2]) / 3.0).clamp(GRIPPER_GREY.0, GRIPPER_GREY.1);
    let dg = d([level; 3]);
    if dg < best.0 {
        best = (dg, Px::Gripper);
    }
    if best.0 > threshold {
        Px::Unknown
    } else {
        best.1
    }
}

struct Region {
    color: u8,
    pixels: Vec<(usize, usize)>,
}

/// Connected regions of one color. Gripper and other-object pixels connect
/// but are not members, so a support split by the object on top stays whole.
fn regions(classes: &[Px], n: usize) -> Vec<Region> {
    let mut seen = vec![false; n * n];
    let mut out = Vec::new();
    for start in 0..n * n {
        let Px::Object(color) = classes[start] else { continue };
        if seen[start] {
            continue;
        }
        let mut visited = vec![false; n * n];
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            if classes[i] == Px::Object(color) {
                seen[i] = true;
                pixels.push((i / n, i % n));
            }
            let (r, c) = (i / n, i % n);
            let mut nbrs = Vec::with_capacity(4);
            if r > 0 {
                nbrs.push(i - n);
            }
            if r + 1 < n {
                nbrs.push(i + n);
            }
            if c > 0 {
                nbrs.push(i - 1);
            }
            if c + 1 < n {
                nbrs.push(i + 1);
            }
            for j in nbrs {
                if !visited[j] && matches!(classes[j], Px::Object(_) | Px::Gripper) {
                    visited[j] = true;
                    queue.push_back(j);
                }
            }
        }
        out.push(Region { color, pixels });
    }
    out
}

struct Match {
    shape: Shape,
    level: usize,
    center: (f64, f64),
    score: f32,
}

fn best_template(region: &Region, classes: &[Px], n: usize, base: usize, growth: usize, pc: &ParseConfig) -> Option<Match> {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for &(r, c) in &region.pixels {
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
    }
    let member = |r: i64, c: i64| -> Option<Px> {
        if r < 0 || c < 0 || r as usize >= n || c as usize >= n {
            None
        } else {
            Some(classes[r as usize * n + c as usize])
        }
    };
    let area = region.pixels.len() as f32;
    let mut best: Option<Match> = None;
    for level in 0..=pc.max_stack_cue {
        let size = base + growth * level;
        let masks: Vec<(Shape, Vec<bool>)> = Shape::ALL.iter().map(|&s| (s, sprite_mask(s, size))).collect();
        let (lo_r, hi_r) = (r1 as i64 - size as i64 + 1, r0 as i64);
        let (lo_c, hi_c) = (c1 as i64 - size as i64 + 1, c0 as i64);
        let (lo_r, hi_r) = if lo_r > hi_r { (hi_r - 1, lo_r + 1) } else { (lo_r - 1, hi_r + 1) };
        let (lo_c, hi_c) = if lo_c > hi_c { (hi_c - 1, lo_c + 1) } else { (lo_c - 1, hi_c + 1) };
        for (shape, mask) in &masks {
            let t_area = mask.iter().filter(|&&b| b).count() as f32;
            for or in lo_r..=hi_r {
                for oc in lo_c..=hi_c {
                    let (mut matched, mut occluded, mut outside) = (0f32, 0f32, 0f32);
                    for rr in 0..size {
                        for cc in 0..size {
                            if !mask[rr * size + cc] {
                                continue;
                            }
                            match member(or + rr as i64, oc + cc as i64) {
                                Some(Px::Object(k)) if k == region.color => matched += 1.0,
                                Some(Px::Object(_)) | Some(Px::Gripper) => occluded += 1.0,
                                None => outside += 1.0,
                                _ => {}
                            }
                        }
                    }
                    if matched < 2.0f32.min(area) {
                        continue;
                    }
                    // sprite pixels past the image border are clipped, not missing
                    let visible = t_area - outside;
                    let missing = visible - matched - occluded;
                    let extra = area - matched;
                    let score = (matched + pc.occlusion_weight * occluded - missing - extra) / visible;
                    if best.as_ref().is_none_or(|b| score > b.score) {
                        let h = size as f64 / 2.0;
                        best = Some(Match { shape: *shape, level, center: (or as f64 + h, oc as f64 + h), score });
                    }
                }
            }
        }
    }
    best
}

/// Parses a rendered (or generated) scene image. `reference`, when given, is
/// the (shape, color) multiset the scene must contain.
pub fn parse(image: &Image, cfg: &EnvConfig, pc: &ParseConfig, reference: Option<&[(Shape, Color)]>) -> Result<ParseOutcome> {
    let n = cfg.image_size;
    if image.dims() != (n, n) {
        return Err(Error::shape(format!("{n}x{n}"), format!("{}x{}", image.height(), image.width())));
    }
    let classes: Vec<Px> =
        (0..n * n).map(|i| classify(image.pixel(i / n, i % n), pc.class_threshold)).collect();
    let unparseable = |why: String| Ok(ParseOutcome { detections: vec![], verdict: ParseVerdict::Unparseable(why) });

    let unknown = classes.iter().filter(|&&c| c == Px::Unknown).count();
    if unknown as f32 > pc.max_unknown_fraction * (n * n) as f32 {
        return unparseable(format!("{unknown} unclassifiable pixels"));
    }

    let base = base_sprite(cfg, n);
    let growth = sprite_growth(base);
    let px = cfg.workspace[0] / n as f64;
    let mut detections = Vec::new();
    let mut stray = 0;
    for region in regions(&classes, n) {
        if region.pixels.len() < 2 {
            stray += 1;
            continue;
        }
        match best_template(&region, &classes, n, base, growth, pc) {
            Some(m) if m.score >= pc.min_score => detections.push(Detection {
                shape: m.shape,
                color: Color::ALL[region.color as usize],
                pos: [m.center.1 * px, m.center.0 * cfg.workspace[1] / n as f64],
                objects_above: m.level,
                score: m.score,
            }),
            m => {
                return unparseable(format!(
                    "{:?} fragment of {} px matches no template (best score {:.2})",
                    Color::ALL[region.color as usize],
                    region.pixels.len(),
                    m.map_or(f32::NEG_INFINITY, |m| m.score)
                ))
            }
        }
    }
    if stray > pc.max_stray_pixels {
        return unparseable(format!("{stray} stray pixels"));
    }
    detections.sort_by(|a, b| (a.color, a.shape).cmp(&(b.color, b.shape)));
    let verdict = judge(&detections, cfg, pc, px, reference);
    Ok(ParseOutcome { detections, verdict })
}

fn judge(detections: &[Detection], cfg: &EnvConfig, pc: &ParseConfig, px: f64, reference: Option<&[(Shape, Color)]>) -> ParseVerdict {
    let slack = px;
    let r = cfg.object_radius;
    for d in detections {
        let inside = d.pos[0] >= r - slack
            && d.pos[0] <= cfg.workspace[0] - r + slack
            && d.pos[1] >= r - slack
            && d.pos[1] <= cfg.workspace[1] - r + slack;
        if !inside {
            return ParseVerdict::Implausible(format!("{:?} {:?} out of bounds", d.color, d.shape));
        }
    }
    let stack_tol = cfg.stack_tolerance + slack;
    let stacked = |a: &Detection, b: &Detection| a.objects_above != b.objects_above && dist2(a.pos, b.pos) <= stack_tol;
    for d in detections.iter().filter(|d| d.objects_above > 0) {
        let supported = detections.iter().any(|o| o.objects_above + 1 == d.objects_above && dist2(o.pos, d.pos) <= stack_tol);
        if !supported {
            return ParseVerdict::Implausible(format!("{:?} stack cue without an object on top", d.color));
        }
    }
    let min_d = 2.0 * r - pc.overlap_tolerance_px * px;
    for (i, a) in detections.iter().enumerate() {
        for b in &detections[i + 1..] {
            if !stacked(a, b) && dist2(a.pos, b.pos) < min_d {
                return ParseVerdict::Implausible(format!("{:?} and {:?} overlap", a.color, b.color));
            }
        }
    }
    if let Some(reference) = reference {
        let mut want = reference.to_vec();
        want.sort();
        let mut got: Vec<_> = detections.iter().map(|d| (d.shape, d.color)).collect();
        got.sort();
        if want != got {
            return ParseVerdict::Implausible(format!("objects {got:?} differ from reference {want:?}"));
        }
    }
    ParseVerdict::Plausible
}
