use super::{dist2, Action, EnvConfig, ObjectId, SceneState};

const EPS: f64 = 1e-9;

/// Advances the scene by one action. Never fails: every input resolves to a
/// state that satisfies the scene invariants.
pub fn step(state: &SceneState, action: &Action, cfg: &EnvConfig) -> SceneState {
    let a = action.clamped(cfg.max_step);
    let mut next = state.clone();
    let prev = state.gripper_pos;
    let g = [
        (prev[0] + a.dx).clamp(0.0, cfg.workspace[0]),
        (prev[1] + a.dy).clamp(0.0, cfg.workspace[1]),
        (prev[2] + a.dz).clamp(0.0, cfg.workspace[2]),
    ];
    next.gripper_pos = g;

    if let Some(held) = next.held_object {
        let i = next.index_of(held).expect("held object exists");
        next.objects[i].pos = cfg.clamp_object_xy([g[0], g[1]]);
    }

    if g[2] <= cfg.push_height {
        push(&mut next, [g[0] - prev[0], g[1] - prev[1]], cfg);
    }

    if a.grip > 0.0 {
        if next.gripper_open {
            if let Some(id) = grasp_candidate(&next, cfg) {
                let i = next.index_of(id).expect("candidate exists");
                next.objects[i].stack_height = 0;
                next.objects[i].pos = cfg.clamp_object_xy([g[0], g[1]]);
                next.held_object = Some(id);
            }
        }
        next.gripper_open = false;
    } else {
        if let Some(id) = next.held_object.take() {
            settle(&mut next, id, cfg);
        }
        next.gripper_open = true;
    }
    next
}

/// Table-level objects inside the contact radius are pushed out along the
/// gripper→object direction; whole columns move rigidly. A push that would
/// make the column overlap another column is blocked.
fn push(state: &mut SceneState, motion: [f64; 2], cfg: &EnvConfig) {
    let g = [state.gripper_pos[0], state.gripper_pos[1]];
    let bases: Vec<usize> = state.base_indices().collect();
    for &b in &bases {
        let c = state.objects[b].pos;
        let d = dist2(c, g);
        if d >= cfg.push_radius - EPS {
            continue;
        }
        let dir = if d > 1e-12 {
            [(c[0] - g[0]) / d, (c[1] - g[1]) / d]
        } else {
            let m = (motion[0].powi(2) + motion[1].powi(2)).sqrt();
            if m > 1e-12 {
                [motion[0] / m, motion[1] / m]
            } else {
                [1.0, 0.0]
            }
        };
        let target = cfg.clamp_object_xy([g[0] + dir[0] * cfg.push_radius, g[1] + dir[1] * cfg.push_radius]);
        let blocked = state
            .base_indices()
            .filter(|&o| o != b)
            .any(|o| dist2(state.objects[o].pos, target) < 2.0 * cfg.object_radius - EPS);
        if blocked {
            continue;
        }
        let delta = [target[0] - c[0], target[1] - c[1]];
        let column = state.column_above(b, cfg.stack_tolerance);
        for i in std::iter::once(b).chain(column) {
            let p = state.objects[i].pos;
            state.objects[i].pos = [p[0] + delta[0], p[1] + delta[1]];
        }
    }
}

/// Nearest graspable object top within ε_grasp; ties go to the lowest id.
fn grasp_candidate(state: &SceneState, cfg: &EnvConfig) -> Option<ObjectId> {
    let g = state.gripper_pos;
    if g[2] > cfg.grasp_height {
        return None;
    }
    let mut best: Option<(f64, ObjectId)> = None;
    for (i, o) in state.objects.iter().enumerate() {
        if !state.is_top(i, cfg.stack_tolerance) {
            continue;
        }
        let top = cfg.top_z(o.stack_height);
        let d = ((o.pos[0] - g[0]).powi(2) + (o.pos[1] - g[1]).powi(2) + (top - g[2]).powi(2)).sqrt();
        if d > cfg.grasp_radius {
            continue;
        }
        // objects are sorted by id, so strict < keeps the lowest id on ties
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, o.id));
        }
    }
    best.map(|(_, id)| id)
}

/// Drops a released object: onto the nearest column within stacking
/// tolerance, else onto the table at the nearest free spot.
fn settle(state: &mut SceneState, id: ObjectId, cfg: &EnvConfig) {
    let i = state.index_of(id).expect("released object exists");
    let p = state.objects[i].pos;

    let mut support: Option<(f64, usize)> = None;
    for b in state.base_indices().filter(|&b| b != i) {
        let d = dist2(state.objects[b].pos, p);
        if d <= cfg.stack_tolerance && support.is_none_or(|(bd, _)| d < bd) {
            support = Some((d, b));
        }
    }
    if let Some((_, b)) = support {
        let height = 1 + state.column_above(b, cfg.stack_tolerance).len() as u32;
        state.objects[i].pos = state.objects[b].pos;
        state.objects[i].stack_height = height;
        return;
    }

    state.objects[i].stack_height = 0;
    state.objects[i].pos = free_spot(state, i, p, cfg);
}

fn overlaps(state: &SceneState, idx: usize, p: [f64; 2], cfg: &EnvConfig) -> Option<usize> {
    state
        .base_indices()
        .filter(|&o| o != idx)
        .find(|&o| dist2(state.objects[o].pos, p) < 2.0 * cfg.object_radius - EPS)
}

fn free_spot(state: &SceneState, idx: usize, start: [f64; 2], cfg: &EnvConfig) -> [f64; 2] {
    let min_d = 2.0 * cfg.object_radius;
    let mut p = cfg.clamp_object_xy(start);
    for _ in 0..20 {
        let Some(o) = overlaps(state, idx, p, cfg) else { return p };
        let c = state.objects[o].pos;
        let d = dist2(c, p);
        let dir = if d > 1e-12 { [(p[0] - c[0]) / d, (p[1] - c[1]) / d] } else { [1.0, 0.0] };
        p = cfg.clamp_object_xy([c[0] + dir[0] * (min_d + 1e-6), c[1] + dir[1] * (min_d + 1e-6)]);
    }
    if overlaps(state, idx, p, cfg).is_none() {
        return p;
    }
    // Expanding ring search; the table always has room for a handful of objects.
    let step = cfg.object_radius / 2.0;
    for ring in 1..400 {
        let radius = ring as f64 * step;
        let samples = 8 * ring;
        for k in 0..samples {
            let t = std::f64::consts::TAU * k as f64 / samples as f64;
            let q = [start[0] + radius * t.cos(), start[1] + radius * t.sin()];
            if cfg.object_xy_in_bounds(q) && overlaps(state, idx, q, cfg).is_none() {
                return q;
            }
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::super::{reset, Color, Object, Shape};
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> EnvConfig {
        EnvConfig::default()
    }

    fn cube(id: ObjectId, x: f64, y: f64, h: u32) -> Object {
        Object { id, shape: Shape::Cube, color: Color::ALL[id as usize], pos: [x, y], stack_height: h }
    }

    fn scene(gripper: [f64; 3], objects: Vec<Object>) -> SceneState {
        SceneState { gripper_pos: gripper, gripper_open: true, held_object: None, objects }
    }

    #[test]
    fn null_action_leaves_open_state_unchanged() {
        let c = cfg();
        for seed in 0..50 {
            let s = reset(&c, seed).unwrap();
            assert_eq!(step(&s, &Action::idle(), &c), s);
        }
    }

    #[test]
    fn displacement_is_capped_and_bounded() {
        let c = cfg();
        let s = scene([0.98, 0.5, 0.2], vec![]);
        let n = step(&s, &Action::new(1.0, -1.0, 1.0, -1.0), &c);
        assert_eq!(n.gripper_pos, [1.0, 0.5 - c.max_step, 0.2 + c.max_step]);
    }

    /// Closed-form contact resolution: the cube ends at exactly the contact
    /// radius from the gripper along the center line.
    fn push_oracle(gripper: [f64; 2], cube: [f64; 2], radius: f64) -> [f64; 2] {
        let (vx, vy) = (cube[0] - gripper[0], cube[1] - gripper[1]);
        let d = (vx * vx + vy * vy).sqrt();
        if d >= radius {
            return cube;
        }
        [gripper[0] + vx / d * radius, gripper[1] + vy / d * radius]
    }

    #[test]
    fn push_moves_cube_by_overlap_vector() {
        let c = cfg();
        // gripper touching the cube's contact circle, then 3 cm into it
        let start = [0.3, 0.31, 0.0];
        let s = scene(start, vec![cube(0, 0.3 + c.push_radius, 0.3, 0)]);
        let n = step(&s, &Action::new(0.03, 0.0, 0.0, -1.0), &c);
        let expected = push_oracle([0.33, 0.31], [0.3 + c.push_radius, 0.3], c.push_radius);
        assert!((n.objects[0].pos[0] - expected[0]).abs() < 1e-12);
        assert!((n.objects[0].pos[1] - expected[1]).abs() < 1e-12);
        assert!(n.objects[0].pos[0] > s.objects[0].pos[0]);
    }

    #[test]
    fn push_needs_table_height() {
        let c = cfg();
        let s = scene([0.3, 0.3, 0.1], vec![cube(0, 0.36, 0.3, 0)]);
        let n = step(&s, &Action::new(0.03, 0.0, 0.0, -1.0), &c);
        assert_eq!(n.objects, s.objects);
    }

    #[test]
    fn blocked_push_leaves_objects_in_place() {
        let c = cfg();
        let s = scene([0.2, 0.5, 0.0], vec![cube(0, 0.3, 0.5, 0), cube(1, 0.42, 0.5, 0)]);
        let n = step(&s, &Action::new(0.05, 0.0, 0.0, -1.0), &c);
        assert_eq!(n.objects, s.objects);
        n.check_invariants(&c).unwrap();
    }

    #[test]
    fn grasp_takes_nearest_then_lowest_id() {
        let c = cfg();
        let top = c.top_z(0);
        let mut s = scene([0.5, 0.5, top], vec![cube(0, 0.53, 0.5, 0), cube(1, 0.47, 0.5, 0)]);
        s.objects[1].pos = [0.47, 0.5];
        let n = step(&s, &Action::new(0.0, 0.0, 0.0, 1.0), &c);
        assert_eq!(n.held_object, Some(0), "equidistant: lowest id wins");
        let s2 = scene([0.52, 0.5, top], s.objects.clone());
        assert_eq!(step(&s2, &Action::new(0.0, 0.0, 0.0, 1.0), &c).held_object, Some(0));
        let s3 = scene([0.48, 0.5, top], s.objects.clone());
        assert_eq!(step(&s3, &Action::new(0.0, 0.0, 0.0, 1.0), &c).held_object, Some(1));
    }

    #[test]
    fn grasp_requires_open_gripper_and_reach() {
        let c = cfg();
        let mut s = scene([0.5, 0.5, c.top_z(0)], vec![cube(0, 0.5, 0.5, 0)]);
        s.gripper_open = false;
        assert_eq!(step(&s, &Action::new(0.0, 0.0, 0.0, 1.0), &c).held_object, None);
        let far = scene([0.5, 0.5, 0.3], vec![cube(0, 0.5, 0.5, 0)]);
        let n = step(&far, &Action::new(0.0, 0.0, 0.0, 1.0), &c);
        assert_eq!(n.held_object, None);
        assert!(!n.gripper_open);
    }

    #[test]
    fn cannot_grasp_a_supporting_object() {
        let c = cfg();
        // the support's top is in reach, the stacked cube's top is not
        let s = scene([0.5, 0.5, 0.0], vec![cube(0, 0.5, 0.5, 0), cube(1, 0.5, 0.5, 1)]);
        let n = step(&s, &Action::new(0.0, 0.0, 0.0, 1.0), &c);
        assert_eq!(n.held_object, None);
    }

    #[test]
    fn held_object_tracks_gripper() {
        let c = cfg();
        let mut s = scene([0.5, 0.5, 0.2], vec![cube(0, 0.5, 0.5, 0)]);
        s.held_object = Some(0);
        s.gripper_open = false;
        let n = step(&s, &Action::new(0.05, -0.02, 0.0, 1.0), &c);
        assert_eq!(n.objects[0].pos, [0.55, 0.48]);
        assert_eq!(n.held_object, Some(0));
    }

    struct ReleaseCase {
        name: &'static str,
        release_at: [f64; 2],
        others: Vec<Object>,
        expect_height: u32,
        expect_pos: Option<[f64; 2]>,
    }

    #[test]
    fn release_cases() {
        let c = cfg();
        let cases = vec![
            ReleaseCase {
                name: "open table",
                release_at: [0.3, 0.3],
                others: vec![cube(1, 0.7, 0.7, 0)],
                expect_height: 0,
                expect_pos: Some([0.3, 0.3]),
            },
            ReleaseCase {
                name: "directly above a cube",
                release_at: [0.6, 0.6],
                others: vec![cube(1, 0.6, 0.6, 0)],
                expect_height: 1,
                expect_pos: Some([0.6, 0.6]),
            },
            ReleaseCase {
                name: "within stacking tolerance snaps onto support",
                release_at: [0.63, 0.58],
                others: vec![cube(1, 0.6, 0.6, 0)],
                expect_height: 1,
                expect_pos: Some([0.6, 0.6]),
            },
            ReleaseCase {
                name: "onto a two-high column",
                release_at: [0.6, 0.6],
                others: vec![cube(1, 0.6, 0.6, 0), cube(2, 0.6, 0.6, 1)],
                expect_height: 2,
                expect_pos: Some([0.6, 0.6]),
            },
            ReleaseCase {
                name: "overlapping but outside tolerance is pushed clear",
                release_at: [0.6 + 0.09, 0.6],
                others: vec![cube(1, 0.6, 0.6, 0)],
                expect_height: 0,
                expect_pos: Some([0.6 + 2.0 * 0.06 + 1e-6, 0.6]),
            },
        ];
        for case in cases {
            let mut objects = vec![cube(0, case.release_at[0], case.release_at[1], 0)];
            objects.extend(case.others);
            let mut s = scene([case.release_at[0], case.release_at[1], 0.15], objects);
            s.held_object = Some(0);
            s.gripper_open = false;
            let n = step(&s, &Action::new(0.0, 0.0, 0.0, -1.0), &c);
            assert_eq!(n.held_object, None, "{}", case.name);
            assert!(n.gripper_open, "{}", case.name);
            assert_eq!(n.objects[0].stack_height, case.expect_height, "{}", case.name);
            if let Some(p) = case.expect_pos {
                assert!(dist2(n.objects[0].pos, p) < 1e-9, "{}: {:?} vs {p:?}", case.name, n.objects[0].pos);
            }
            n.check_invariants(&c).unwrap_or_else(|e| panic!("{}: {e}", case.name));
        }
    }

    #[test]
    fn pushing_a_base_moves_its_column() {
        let c = cfg();
        let s = scene([0.3, 0.5, 0.0], vec![cube(0, 0.37, 0.5, 0), cube(1, 0.37, 0.5, 1)]);
        let n = step(&s, &Action::new(0.02, 0.0, 0.0, -1.0), &c);
        assert!(n.objects[0].pos[0] > 0.37);
        assert_eq!(n.objects[0].pos, n.objects[1].pos);
        n.check_invariants(&c).unwrap();
    }

    fn arb_action() -> impl Strategy<Value = Action> {
        (-0.1f64..0.1, -0.1f64..0.1, -0.1f64..0.1, -1.0f64..1.0).prop_map(|(x, y, z, g)| Action::new(x, y, z, g))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn random_action_sequences_preserve_invariants(seed in 0u64..10_000, actions in prop::collection::vec(arb_action(), 1..80)) {
            let c = EnvConfig { min_objects: 1, max_objects: 5, ..cfg() };
            let mut s = reset(&c, seed).unwrap();
            let n0 = s.objects.len();
            for a in &actions {
                s = step(&s, a, &c);
                prop_assert!(s.check_invariants(&c).is_ok(), "{:?}", s.check_invariants(&c));
                prop_assert_eq!(s.objects.len(), n0);
            }
        }

        #[test]
        fn replay_is_bit_exact(seed in 0u64..1000, actions in prop::collection::vec(arb_action(), 1..40)) {
            let c = cfg();
            let run = || {
                let mut s = reset(&c, seed).unwrap();
                for a in &actions {
                    s = step(&s, a, &c);
                }
                s
            };
            prop_assert_eq!(run(), run());
        }
    }
}
