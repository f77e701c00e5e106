//! Orthographic top-down rendering.
//!
//! Objects are pixel-snapped sprites so a scene renders identically on every
//! platform. A supporting object is drawn enlarged by one ring per object
//! stacked on it; that ring is the visible stack cue. Draw order is by stack
//! height, then held objects, then the gripper marker.

use super::{Color, EnvConfig, SceneState, Shape};
use crate::image::{unit_from_u8, Image};

pub const BACKGROUND_RGB: [u8; 3] = [51, 51, 51];

pub const PALETTE_RGB: [[u8; 3]; 6] = [
    [230, 25, 25],
    [25, 204, 25],
    [25, 51, 230],
    [242, 230, 25],
    [230, 25, 230],
    [25, 230, 230],
];

/// Gripper marker grey level spans this range, low to high z.
pub(crate) const GRIPPER_GREY: (f32, f32) = (0.55, 1.0);

pub(crate) fn rgb(c: [u8; 3]) -> [f32; 3] {
    [unit_from_u8(c[0]), unit_from_u8(c[1]), unit_from_u8(c[2])]
}

pub(crate) fn color_rgb(c: Color) -> [f32; 3] {
    rgb(PALETTE_RGB[c.index()])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub size: usize,
    pub gripper: bool,
}

impl From<&EnvConfig> for RenderOptions {
    fn from(cfg: &EnvConfig) -> Self {
        Self { size: cfg.image_size, gripper: cfg.render_gripper }
    }
}

/// Side length in pixels of an object sprite with nothing stacked on it.
pub(crate) fn base_sprite(cfg: &EnvConfig, size: usize) -> usize {
    let d = 2.0 * cfg.object_radius / cfg.workspace[0] * size as f64;
    (d.round() as usize).max(2)
}

pub(crate) fn sprite_growth(base: usize) -> usize {
    (base / 2).max(2)
}

/// Row-major n×n silhouette.
pub(crate) fn sprite_mask(shape: Shape, n: usize) -> Vec<bool> {
    let half = n as f64 / 2.0;
    let mut m = vec![false; n * n];
    for r in 0..n {
        for c in 0..n {
            let (y, x) = (r as f64 + 0.5 - half, c as f64 + 0.5 - half);
            m[r * n + c] = match shape {
                Shape::Cube => true,
                Shape::Sphere => (x * x + y * y).sqrt() <= half - 0.25,
                Shape::Bottle => x.abs() <= (n / 2).max(1) as f64 / 2.0,
            };
        }
    }
    m
}

pub(crate) fn to_px(cfg: &EnvConfig, size: usize, p: [f64; 2]) -> (f64, f64) {
    (p[1] / cfg.workspace[1] * size as f64, p[0] / cfg.workspace[0] * size as f64)
}

pub(crate) fn sprite_origin(center: (f64, f64), n: usize) -> (i64, i64) {
    let h = n as f64 / 2.0;
    ((center.0 - h).round() as i64, (center.1 - h).round() as i64)
}

fn stamp(img: &mut Image, origin: (i64, i64), mask: &[bool], n: usize, color: [f32; 3]) {
    for r in 0..n {
        for c in 0..n {
            if !mask[r * n + c] {
                continue;
            }
            let (y, x) = (origin.0 + r as i64, origin.1 + c as i64);
            if y >= 0 && x >= 0 && (y as usize) < img.height() && (x as usize) < img.width() {
                img.set_pixel(y as usize, x as usize, color);
            }
        }
    }
}

pub fn background(size: usize) -> Image {
    Image::filled(size, size, rgb(BACKGROUND_RGB))
}

pub fn render(state: &SceneState, cfg: &EnvConfig) -> Image {
    render_with(state, cfg, RenderOptions::from(cfg))
}

pub fn render_with(state: &SceneState, cfg: &EnvConfig, opts: RenderOptions) -> Image {
    let n = opts.size;
    let mut img = background(n);
    let base = base_sprite(cfg, n);
    let growth = sprite_growth(base);

    let mut order: Vec<usize> = (0..state.objects.len()).collect();
    order.sort_by_key(|&i| {
        let o = &state.objects[i];
        (state.is_held(o.id), o.stack_height, o.id)
    });
    for i in order {
        let o = &state.objects[i];
        let size = base + growth * state.objects_above(i, cfg.stack_tolerance) as usize;
        let origin = sprite_origin(to_px(cfg, n, o.pos), size);
        stamp(&mut img, origin, &sprite_mask(o.shape, size), size, color_rgb(o.color));
    }

    if opts.gripper {
        let g = state.gripper_pos;
        let t = (g[2] / cfg.workspace[2]).clamp(0.0, 1.0) as f32;
        let level = unit_from_u8(crate::image::u8_from_unit(GRIPPER_GREY.0 + (GRIPPER_GREY.1 - GRIPPER_GREY.0) * t));
        let mut mask = vec![true; 9];
        if state.gripper_open {
            mask[4] = false;
        }
        let origin = sprite_origin(to_px(cfg, n, [g[0], g[1]]), 3);
        stamp(&mut img, origin, &mask, 3, [level; 3]);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::super::{reset, Object};
    use super::*;

    #[test]
    fn render_is_deterministic_and_in_range() {
        let cfg = EnvConfig::default();
        let s = reset(&cfg, 5).unwrap();
        let a = render(&s, &cfg);
        assert_eq!(a, render(&s, &cfg));
        assert_eq!(a.dims(), (32, 32));
        assert!(a.is_finite_unit());
    }

    #[test]
    fn empty_table_is_background() {
        let cfg = EnvConfig { min_objects: 0, max_objects: 0, render_gripper: false, ..Default::default() };
        let s = reset(&cfg, 0).unwrap();
        assert_eq!(render(&s, &cfg), background(32));
    }

    #[test]
    fn silhouettes_differ() {
        let areas: Vec<usize> =
            Shape::ALL.iter().map(|&s| sprite_mask(s, 4).iter().filter(|&&b| b).count()).collect();
        assert_eq!(areas, vec![16, 12, 8]);
    }

    #[test]
    fn support_is_drawn_enlarged() {
        let cfg = EnvConfig { render_gripper: false, ..Default::default() };
        let objects = vec![
            Object { id: 0, shape: Shape::Cube, color: Color::Red, pos: [0.5, 0.5], stack_height: 0 },
            Object { id: 1, shape: Shape::Cube, color: Color::Blue, pos: [0.5, 0.5], stack_height: 1 },
        ];
        let s = SceneState { gripper_pos: cfg.home, gripper_open: true, held_object: None, objects };
        let img = render(&s, &cfg);
        let count = |c: Color| {
            let want = color_rgb(c);
            (0..32).flat_map(|r| (0..32).map(move |c| (r, c))).filter(|&(r, c)| img.pixel(r, c) == want).count()
        };
        assert_eq!(count(Color::Blue), 16);
        assert_eq!(count(Color::Red), 36 - 16);
    }
}
