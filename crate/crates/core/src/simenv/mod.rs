//! Deterministic 2.5D tabletop simulator.
//!
//! Objects live on a unit-square table at integer stack heights; a gripper
//! moves in 3D, pushes objects at table height, grasps object tops and
//! releases them onto the table or onto other objects. Everything here is a
//! pure function of its inputs.

mod parse;
mod physics;
mod render;
pub mod scripted;

pub use parse::{parse, Detection, ParseConfig, ParseOutcome, ParseVerdict};
pub use physics::step;
pub use render::{background, render, render_with, RenderOptions, BACKGROUND_RGB, PALETTE_RGB};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub type ObjectId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Cube,
    Sphere,
    Bottle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Cube, Shape::Sphere, Shape::Bottle];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Magenta, Color::Cyan];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub id: ObjectId,
    pub shape: Shape,
    pub color: Color,
    pub pos: [f64; 2],
    /// 0 = on the table.
    pub stack_height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub gripper_pos: [f64; 3],
    pub gripper_open: bool,
    pub held_object: Option<ObjectId>,
    /// Sorted by id.
    pub objects: Vec<Object>,
}

/// End-effector displacement in meters plus a gripper command (> 0 closes).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub grip: f64,
}

impl Action {
    pub fn new(dx: f64, dy: f64, dz: f64, grip: f64) -> Self {
        Self { dx, dy, dz, grip }
    }

    pub fn idle() -> Self {
        Self::new(0.0, 0.0, 0.0, -1.0)
    }

    pub fn clamped(&self, max_step: f64) -> Action {
        let c = |v: f64| if v.is_finite() { v.clamp(-max_step, max_step) } else { 0.0 };
        Action {
            dx: c(self.dx),
            dy: c(self.dy),
            dz: c(self.dz),
            grip: if self.grip.is_finite() { self.grip.clamp(-1.0, 1.0) } else { -1.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Workspace extent (x, y, z); the table spans [0, x] × [0, y].
    pub workspace: [f64; 3],
    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<Shape>,
    /// Episode horizon T.
    pub horizon: usize,
    pub object_radius: f64,
    pub object_height: f64,
    /// ε_grasp: max gripper distance to an object's top for a grasp.
    pub grasp_radius: f64,
    /// The gripper must be at or below this height to grasp.
    pub grasp_height: f64,
    /// Gripper/object center distance at which pushing starts.
    pub push_radius: f64,
    /// The gripper pushes only at or below this height.
    pub push_height: f64,
    pub stack_tolerance: f64,
    /// ε_succ.
    pub success_radius: f64,
    /// Per-step displacement cap on each axis.
    pub max_step: f64,
    pub home: [f64; 3],
    /// No object is placed at reset within this xy distance of `home`.
    pub home_clearance: f64,
    /// Extra spacing between objects at reset.
    pub placement_gap: f64,
    pub placement_attempts: usize,
    pub image_size: usize,
    pub render_gripper: bool,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            workspace: [1.0, 1.0, 0.4],
            min_objects: 2,
            max_objects: 3,
            shapes: Shape::ALL.to_vec(),
            horizon: 25,
            object_radius: 0.06,
            object_height: 0.05,
            grasp_radius: 0.06,
            grasp_height: 0.2,
            push_radius: 0.08,
            push_height: 0.03,
            stack_tolerance: 0.06,
            success_radius: 0.08,
            max_step: 0.06,
            home: [0.5, 0.5, 0.2],
            home_clearance: 0.1,
            placement_gap: 0.04,
            placement_attempts: 1000,
            image_size: 32,
            render_gripper: true,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("env: {m}")));
        if self.workspace.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("workspace extents must be positive");
        }
        for (name, v) in [
            ("object_radius", self.object_radius),
            ("object_height", self.object_height),
            ("grasp_radius", self.grasp_radius),
            ("push_radius", self.push_radius),
            ("stack_tolerance", self.stack_tolerance),
            ("success_radius", self.success_radius),
            ("max_step", self.max_step),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(&format!("{name} must be > 0"));
            }
        }
        if self.horizon < 2 {
            return bad("horizon must be >= 2");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects > max_objects");
        }
        if self.max_objects > Color::ALL.len() {
            return bad("max_objects exceeds the color palette");
        }
        if self.max_objects > 0 && self.shapes.is_empty() {
            return bad("shapes must not be empty");
        }
        if 2.0 * self.object_radius >= self.workspace[0].min(self.workspace[1]) {
            return bad("objects do not fit in the workspace");
        }
        if self.stack_tolerance >= 2.0 * self.object_radius {
            return bad("stack_tolerance must be below the object diameter");
        }
        if self.image_size < 8 {
            return bad("image_size must be >= 8");
        }
        Ok(())
    }

    pub(crate) fn clamp_object_xy(&self, p: [f64; 2]) -> [f64; 2] {
        let r = self.object_radius;
        [p[0].clamp(r, self.workspace[0] - r), p[1].clamp(r, self.workspace[1] - r)]
    }

    pub(crate) fn object_xy_in_bounds(&self, p: [f64; 2]) -> bool {
        let r = self.object_radius - 1e-9;
        p[0] >= r && p[0] <= self.workspace[0] - r && p[1] >= r && p[1] <= self.workspace[1] - r
    }

    /// Top surface height of an object at `stack_height`.
    pub fn top_z(&self, stack_height: u32) -> f64 {
        (stack_height as f64 + 1.0) * self.object_height
    }
}

pub(crate) fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl SceneState {
    pub fn object(&self, id: ObjectId) -> Option<&Object> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub(crate) fn index_of(&self, id: ObjectId) -> Option<usize> {
        self.objects.iter().position(|o| o.id == id)
    }

    pub fn is_held(&self, id: ObjectId) -> bool {
        self.held_object == Some(id)
    }

    /// Unheld objects resting on the table.
    pub fn base_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.objects
            .iter()
            .enumerate()
            .filter(|(_, o)| o.stack_height == 0 && !self.is_held(o.id))
            .map(|(i, _)| i)
    }

    /// Indices of the unheld objects stacked on base `base` (excluding it), by height.
    pub fn column_above(&self, base: usize, tol: f64) -> Vec<usize> {
        let p = self.objects[base].pos;
        let mut members: Vec<usize> = self
            .objects
            .iter()
            .enumerate()
            .filter(|(i, o)| *i != base && o.stack_height > 0 && !self.is_held(o.id) && dist2(o.pos, p) <= tol)
            .map(|(i, _)| i)
            .collect();
        members.sort_by_key(|&i| self.objects[i].stack_height);
        members
    }

    /// True if no unheld object rests on object `idx`.
    pub fn is_top(&self, idx: usize, tol: f64) -> bool {
        let o = &self.objects[idx];
        !self.objects.iter().any(|other| {
            other.id != o.id
                && !self.is_held(other.id)
                && other.stack_height == o.stack_height + 1
                && dist2(other.pos, o.pos) <= tol
        })
    }

    /// Number of unheld objects above object `idx` in its column.
    pub fn objects_above(&self, idx: usize, tol: f64) -> u32 {
        let o = &self.objects[idx];
        if self.is_held(o.id) {
            return 0;
        }
        self.objects
            .iter()
            .filter(|other| {
                !self.is_held(other.id) && other.stack_height > o.stack_height && dist2(other.pos, o.pos) <= tol
            })
            .count() as u32
    }

    pub fn multiset(&self) -> Vec<(Shape, Color)> {
        let mut m: Vec<_> = self.objects.iter().map(|o| (o.shape, o.color)).collect();
        m.sort();
        m
    }

    /// Checks every scene invariant; returns a description of the first violation.
    pub fn check_invariants(&self, cfg: &EnvConfig) -> std::result::Result<(), String> {
        let [wx, wy, wz] = cfg.workspace;
        let g = self.gripper_pos;
        if !(0.0..=wx).contains(&g[0]) || !(0.0..=wy).contains(&g[1]) || !(0.0..=wz).contains(&g[2]) {
            return Err(format!("gripper out of bounds: {g:?}"));
        }
        if self.objects.windows(2).any(|w| w[0].id >= w[1].id) {
            return Err("objects not sorted by unique id".into());
        }
        if let Some(h) = self.held_object {
            if self.object(h).is_none() {
                return Err(format!("held object {h} does not exist"));
            }
            if self.gripper_open {
                return Err("gripper open while holding".into());
            }
        }
        for o in &self.objects {
            if !cfg.object_xy_in_bounds(o.pos) {
                return Err(format!("object {} out of bounds: {:?}", o.id, o.pos));
            }
        }
        let r2 = 2.0 * cfg.object_radius;
        let bases: Vec<usize> = self.base_indices().collect();
        for (k, &i) in bases.iter().enumerate() {
            for &j in &bases[k + 1..] {
                let d = dist2(self.objects[i].pos, self.objects[j].pos);
                if d < r2 - 1e-9 {
                    return Err(format!("objects {} and {} overlap (d={d:.4})", self.objects[i].id, self.objects[j].id));
                }
            }
        }
        for o in self.objects.iter().filter(|o| o.stack_height > 0 && !self.is_held(o.id)) {
            let supports = self
                .objects
                .iter()
                .filter(|s| {
                    !self.is_held(s.id) && s.stack_height + 1 == o.stack_height && dist2(s.pos, o.pos) <= cfg.stack_tolerance
                })
                .count();
            if supports != 1 {
                return Err(format!("object {} at height {} has {supports} supports", o.id, o.stack_height));
            }
        }
        Ok(())
    }
}

/// Samples a fresh scene: gripper open at home, every object on the table.
pub fn reset(cfg: &EnvConfig, seed: u64) -> Result<SceneState> {
    cfg.validate()?;
    let mut rng = seed::rng(seed);
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let colors = sample(&mut rng, Color::ALL.len(), n);
    let r = cfg.object_radius;
    let spacing = 2.0 * r + cfg.placement_gap;
    let home = [cfg.home[0], cfg.home[1]];
    let mut objects: Vec<Object> = Vec::with_capacity(n);
    for (k, color) in colors.iter().enumerate() {
        let shape = cfg.shapes[rng.random_range(0..cfg.shapes.len())];
        let mut placed = None;
        for _ in 0..cfg.placement_attempts {
            let p = [rng.random_range(r..=cfg.workspace[0] - r), rng.random_range(r..=cfg.workspace[1] - r)];
            if dist2(p, home) < cfg.home_clearance + r {
                continue;
            }
            if objects.iter().all(|o| dist2(o.pos, p) >= spacing) {
                placed = Some(p);
                break;
            }
        }
        let pos = placed.ok_or(Error::Placement { count: n, attempts: cfg.placement_attempts })?;
        objects.push(Object { id: k as ObjectId, shape, color: Color::ALL[color], pos, stack_height: 0 });
    }
    Ok(SceneState { gripper_pos: cfg.home, gripper_open: true, held_object: None, objects })
}

/// True iff every object is within `eps` of its goal position (xy) at the same stack height.
pub fn success(state: &SceneState, goal: &SceneState, eps: f64) -> Result<bool> {
    let ids = |s: &SceneState| s.objects.iter().map(|o| o.id).collect::<Vec<_>>();
    if ids(state) != ids(goal) {
        return Err(Error::ObjectMismatch(format!("{:?} vs {:?}", ids(state), ids(goal))));
    }
    Ok(state.objects.iter().zip(&goal.objects).all(|(o, g)| {
        state.is_held(o.id) == goal.is_held(g.id) && o.stack_height == g.stack_height && dist2(o.pos, g.pos) <= eps
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_has_gripper_at_home() {
        let cfg = EnvConfig { min_objects: 0, max_objects: 0, ..Default::default() };
        let s = reset(&cfg, 7).unwrap();
        assert!(s.objects.is_empty());
        assert_eq!(s.gripper_pos, cfg.home);
        assert!(s.gripper_open);
        assert_eq!(s.held_object, None);
    }

    #[test]
    fn reset_is_deterministic() {
        let cfg = EnvConfig::default();
        assert_eq!(reset(&cfg, 3).unwrap(), reset(&cfg, 3).unwrap());
        assert_ne!(reset(&cfg, 3).unwrap(), reset(&cfg, 4).unwrap());
    }

    #[test]
    fn two_cubes_never_overlap() {
        let cfg = EnvConfig { min_objects: 2, max_objects: 2, shapes: vec![Shape::Cube], ..Default::default() };
        for seed in 0..1000 {
            let s = reset(&cfg, seed).unwrap();
            assert_eq!(s.objects.len(), 2);
            let d = dist2(s.objects[0].pos, s.objects[1].pos);
            assert!(d >= 2.0 * cfg.object_radius, "seed {seed}: d={d}");
            assert!(s.objects.iter().all(|o| o.stack_height == 0 && o.shape == Shape::Cube));
            s.check_invariants(&cfg).unwrap();
        }
    }

    #[test]
    fn crowded_table_fails_placement() {
        let cfg = EnvConfig {
            min_objects: 6,
            max_objects: 6,
            object_radius: 0.2,
            stack_tolerance: 0.1,
            placement_attempts: 50,
            ..Default::default()
        };
        assert!(matches!(reset(&cfg, 1), Err(Error::Placement { .. })));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = EnvConfig { horizon: 1, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = EnvConfig { grasp_radius: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = EnvConfig { max_objects: 7, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    fn oracle_success(a: &SceneState, b: &SceneState, eps: f64) -> bool {
        let mut ok = true;
        for i in 0..a.objects.len() {
            let dx = a.objects[i].pos[0] - b.objects[i].pos[0];
            let dy = a.objects[i].pos[1] - b.objects[i].pos[1];
            if dx * dx + dy * dy > eps * eps || a.objects[i].stack_height != b.objects[i].stack_height {
                ok = false;
            }
        }
        ok
    }

    #[test]
    fn success_identity_and_threshold() {
        let cfg = EnvConfig::default();
        let s = reset(&cfg, 9).unwrap();
        assert!(success(&s, &s, 1e-9).unwrap());
        let mut g = s.clone();
        g.objects[0].pos[0] += 2.0 * cfg.success_radius;
        assert!(!success(&s, &g, cfg.success_radius).unwrap());
    }

    #[test]
    fn success_agrees_with_distance_oracle() {
        let cfg = EnvConfig::default();
        let mut rng = seed::rng(42);
        for k in 0..1000 {
            let a = reset(&cfg, k).unwrap();
            let mut b = a.clone();
            for o in &mut b.objects {
                o.pos[0] += rng.random_range(-0.12..0.12);
                o.pos[1] += rng.random_range(-0.12..0.12);
                if rng.random_bool(0.1) {
                    o.stack_height = 1;
                }
            }
            let eps = rng.random_range(0.01..0.15);
            assert_eq!(success(&a, &b, eps).unwrap(), oracle_success(&a, &b, eps), "case {k}");
        }
    }

    #[test]
    fn success_rejects_mismatched_objects() {
        let cfg = EnvConfig { min_objects: 2, max_objects: 2, ..Default::default() };
        let a = reset(&cfg, 1).unwrap();
        let mut b = a.clone();
        b.objects.pop();
        assert!(matches!(success(&a, &b, 0.1), Err(Error::ObjectMismatch(_))));
    }
}
