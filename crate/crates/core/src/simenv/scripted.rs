//! Oracle controllers that act on ground-truth state: move-to, grasp, lift,
//! place. They produce the outcome frames of the training corpus and serve as
//! the upper-bound policy during evaluation.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{dist2, step, Action, EnvConfig, SceneState};

/// Height at which the gripper travels between contacts.
const HOVER_Z: f64 = 0.12;
/// Extra run-up behind an object before a push.
const PUSH_RUN_UP: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Behavior {
    Push,
    PickPlace,
    Stack,
    /// Lift an object and set it down close to where it was.
    Reorient,
}

impl Behavior {
    pub const ALL: [Behavior; 4] = [Behavior::Push, Behavior::PickPlace, Behavior::Stack, Behavior::Reorient];
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Waypoint {
    Move([f64; 3]),
    Close,
    Open,
}

/// Follows a waypoint list with capped per-step moves. A grip command that
/// directly follows a move is issued on the step that reaches the target.
#[derive(Clone, Debug)]
pub struct Controller {
    plan: VecDeque<Waypoint>,
}

impl Controller {
    pub fn new(plan: Vec<Waypoint>) -> Self {
        Self { plan: plan.into() }
    }

    pub fn is_done(&self) -> bool {
        self.plan.is_empty()
    }

    pub fn next_action(&mut self, state: &SceneState, cfg: &EnvConfig) -> Option<Action> {
        let hold = if state.gripper_open { -1.0 } else { 1.0 };
        while let Some(wp) = self.plan.front().copied() {
            match wp {
                Waypoint::Close => {
                    self.plan.pop_front();
                    return Some(Action::new(0.0, 0.0, 0.0, 1.0));
                }
                Waypoint::Open => {
                    self.plan.pop_front();
                    return Some(Action::new(0.0, 0.0, 0.0, -1.0));
                }
                Waypoint::Move(t) => {
                    let g = state.gripper_pos;
                    let d = [t[0] - g[0], t[1] - g[1], t[2] - g[2]];
                    if d.iter().all(|v| v.abs() < 1e-9) {
                        self.plan.pop_front();
                        continue;
                    }
                    // scale the whole displacement so moves follow straight lines
                    let peak = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    let f = if peak > cfg.max_step { cfg.max_step / peak } else { 1.0 };
                    let mut a = Action::new(d[0] * f, d[1] * f, d[2] * f, hold).clamped(cfg.max_step);
                    if d.iter().all(|v| v.abs() <= cfg.max_step) {
                        self.plan.pop_front();
                        match self.plan.front() {
                            Some(Waypoint::Close) => {
                                a.grip = 1.0;
                                self.plan.pop_front();
                            }
                            Some(Waypoint::Open) => {
                                a.grip = -1.0;
                                self.plan.pop_front();
                            }
                            _ => {}
                        }
                    }
                    return Some(a);
                }
            }
        }
        None
    }
}

/// Runs a controller to completion (or `max_steps`), returning every visited state.
pub fn execute(start: &SceneState, plan: Vec<Waypoint>, cfg: &EnvConfig, max_steps: usize) -> Vec<SceneState> {
    let mut ctl = Controller::new(plan);
    let mut states = vec![start.clone()];
    while states.len() <= max_steps {
        let s = states.last().expect("non-empty");
        let Some(a) = ctl.next_action(s, cfg) else { break };
        let next = step(s, &a, cfg);
        states.push(next);
    }
    states
}

fn at(p: [f64; 2], z: f64) -> [f64; 3] {
    [p[0], p[1], z]
}

pub fn plan_push(state: &SceneState, cfg: &EnvConfig, idx: usize, dir: [f64; 2], dist: f64) -> Vec<Waypoint> {
    let c = state.objects[idx].pos;
    let back = cfg.push_radius + PUSH_RUN_UP;
    let start = [c[0] - dir[0] * back, c[1] - dir[1] * back];
    let end = [c[0] + dir[0] * (dist - cfg.push_radius), c[1] + dir[1] * (dist - cfg.push_radius)];
    vec![
        Waypoint::Move(at(start, HOVER_Z)),
        Waypoint::Move(at(start, 0.0)),
        Waypoint::Move(at(end, 0.0)),
        Waypoint::Move(at(end, HOVER_Z)),
    ]
}

pub fn plan_pick_place(state: &SceneState, cfg: &EnvConfig, idx: usize, target: [f64; 2]) -> Vec<Waypoint> {
    let o = &state.objects[idx];
    vec![
        Waypoint::Move(at(o.pos, HOVER_Z)),
        Waypoint::Move(at(o.pos, cfg.top_z(o.stack_height))),
        Waypoint::Close,
        Waypoint::Move(at(o.pos, HOVER_Z)),
        Waypoint::Move(at(target, HOVER_Z)),
        Waypoint::Open,
    ]
}

/// Waypoints that move every displaced object to its place in `goal`.
/// Objects resting on the table are pushed when `prefer_push`, otherwise
/// carried; objects stacked in the goal are carried onto their support's
/// current position.
pub fn plan_to_goal(state: &SceneState, goal: &SceneState, cfg: &EnvConfig, prefer_push: bool) -> Vec<Waypoint> {
    let mut plan = Vec::new();
    let tol = 0.25 * cfg.success_radius;
    let mut predicted = state.clone();
    for (i, g) in goal.objects.iter().enumerate() {
        let Some(cur) = predicted.objects.get(i).cloned() else { continue };
        if cur.stack_height == g.stack_height && dist2(cur.pos, g.pos) <= tol {
            continue;
        }
        if g.stack_height > 0 {
            let support = goal.objects.iter().position(|s| {
                s.stack_height + 1 == g.stack_height && dist2(s.pos, g.pos) <= cfg.stack_tolerance
            });
            if let Some(s) = support {
                let target = predicted.objects[s].pos;
                plan.extend(plan_pick_place(&predicted, cfg, i, target));
                predicted.objects[i].pos = target;
                predicted.objects[i].stack_height = g.stack_height;
            }
        } else if prefer_push && cur.stack_height == 0 {
            let d = dist2(cur.pos, g.pos);
            let dir = [(g.pos[0] - cur.pos[0]) / d, (g.pos[1] - cur.pos[1]) / d];
            plan.extend(plan_push(&predicted, cfg, i, dir, d));
            predicted.objects[i].pos = g.pos;
        } else {
            plan.extend(plan_pick_place(&predicted, cfg, i, g.pos));
            predicted.objects[i].pos = g.pos;
            predicted.objects[i].stack_height = 0;
        }
    }
    plan
}

/// Point-to-segment distance in the plane.
fn seg_dist(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 { (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    dist2(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

fn clear_spot(state: &SceneState, cfg: &EnvConfig, skip: usize, p: [f64; 2]) -> bool {
    let home = [cfg.home[0], cfg.home[1]];
    let r = cfg.object_radius;
    cfg.object_xy_in_bounds(p)
        && dist2(p, home) >= cfg.home_clearance + r
        && state
            .base_indices()
            .filter(|&b| b != skip)
            .all(|b| dist2(state.objects[b].pos, p) >= 2.0 * r + cfg.placement_gap)
}

fn random_point<R: Rng>(rng: &mut R, cfg: &EnvConfig) -> [f64; 2] {
    let r = cfg.object_radius;
    [rng.random_range(r..=cfg.workspace[0] - r), rng.random_range(r..=cfg.workspace[1] - r)]
}

/// Proposes a plan for `behavior` from `state`, or None if the sampled
/// parameters are infeasible.
fn propose<R: Rng>(state: &SceneState, cfg: &EnvConfig, behavior: Behavior, rng: &mut R) -> Option<(usize, Vec<Waypoint>)> {
    let n = state.objects.len();
    if n == 0 || state.held_object.is_some() {
        return None;
    }
    let tops: Vec<usize> = (0..n).filter(|&i| state.is_top(i, cfg.stack_tolerance)).collect();
    let bases: Vec<usize> = state.base_indices().collect();
    match behavior {
        Behavior::Push => {
            let b = bases[rng.random_range(0..bases.len())];
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let dir = [theta.cos(), theta.sin()];
            let dist = rng.random_range(0.1..0.25);
            let c = state.objects[b].pos;
            let fin = [c[0] + dir[0] * dist, c[1] + dir[1] * dist];
            if !clear_spot(state, cfg, b, fin) {
                return None;
            }
            let back = cfg.push_radius + PUSH_RUN_UP;
            let start = [c[0] - dir[0] * back, c[1] - dir[1] * back];
            let end = [fin[0] - dir[0] * cfg.push_radius, fin[1] - dir[1] * cfg.push_radius];
            let margin = cfg.push_radius + 0.02;
            let path_clear = bases.iter().filter(|&&o| o != b).all(|&o| {
                let p = state.objects[o].pos;
                seg_dist(p, start, end) >= margin && seg_dist(p, c, fin) >= 2.0 * cfg.object_radius + 0.01
            });
            if !path_clear || start.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return None;
            }
            Some((b, plan_push(state, cfg, b, dir, dist)))
        }
        Behavior::PickPlace | Behavior::Reorient => {
            let i = tops[rng.random_range(0..tops.len())];
            let c = state.objects[i].pos;
            let target = if behavior == Behavior::PickPlace {
                random_point(rng, cfg)
            } else {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let d = rng.random_range(0.07..0.12);
                [c[0] + d * theta.cos(), c[1] + d * theta.sin()]
            };
            if behavior == Behavior::PickPlace && dist2(c, target) < 0.15 {
                return None;
            }
            let skip = if state.objects[i].stack_height == 0 { i } else { usize::MAX };
            if !clear_spot(state, cfg, skip, target) {
                return None;
            }
            Some((i, plan_pick_place(state, cfg, i, target)))
        }
        Behavior::Stack => {
            let i = tops[rng.random_range(0..tops.len())];
            let targets: Vec<usize> = bases
                .iter()
                .copied()
                .filter(|&b| b != i && dist2(state.objects[b].pos, state.objects[i].pos) > cfg.stack_tolerance)
                .collect();
            if targets.is_empty() {
                return None;
            }
            let b = targets[rng.random_range(0..targets.len())];
            Some((i, plan_pick_place(state, cfg, i, state.objects[b].pos)))
        }
    }
}

fn outcome_ok(before: &SceneState, after: &SceneState, cfg: &EnvConfig, behavior: Behavior, moved: usize) -> bool {
    if after.held_object.is_some() || after.check_invariants(cfg).is_err() {
        return false;
    }
    let (b, a) = (&before.objects[moved], &after.objects[moved]);
    let others_fixed = before
        .objects
        .iter()
        .zip(&after.objects)
        .enumerate()
        .filter(|(k, _)| *k != moved)
        .all(|(_, (x, y))| x == y || (behavior == Behavior::Push && x.stack_height > 0 && y.stack_height == x.stack_height));
    if !others_fixed {
        return false;
    }
    match behavior {
        Behavior::Push => a.stack_height == b.stack_height && dist2(a.pos, b.pos) >= 0.05,
        Behavior::PickPlace | Behavior::Reorient => a.stack_height == 0 && dist2(a.pos, b.pos) >= 0.05,
        Behavior::Stack => a.stack_height > 0,
    }
}

/// Executes `behavior` on `state` with rejection of infeasible or failed
/// attempts, then returns the gripper home. The result is the outcome scene
/// and the id of the manipulated object.
pub fn perform<R: Rng>(state: &SceneState, cfg: &EnvConfig, behavior: Behavior, rng: &mut R) -> Option<(SceneState, u32)> {
    for _ in 0..64 {
        let Some((moved, mut plan)) = propose(state, cfg, behavior, rng) else { continue };
        plan.push(Waypoint::Move(cfg.home));
        let states = execute(state, plan, cfg, 400);
        let last = states.last().expect("non-empty").clone();
        if outcome_ok(state, &last, cfg, behavior, moved) {
            return Some((last, state.objects[moved].id));
        }
    }
    None
}
