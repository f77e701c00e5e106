//! Goal-reaching evaluation, affordance plausibility/diversity metrics and
//! report assembly.
//!
//! A [`TaskSuite`] holds two goals per task type. Each goal is the outcome of
//! a scripted behavior and is certified at construction: the scripted oracle
//! must reach it within the horizon from the nominal start and from a set of
//! jittered starts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::affordance::{image_diversity, GoalSampler};
use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};
use crate::explorer::{EpisodeMetrics, Policy};
use crate::image::{contact_sheet, Image};
use crate::seed;
use crate::simenv::scripted::{perform, plan_to_goal, Behavior, Controller};
use crate::simenv::{dist2, parse, render, reset, step, success, Action, EnvConfig, ParseConfig, SceneState};
use crate::vqvae::{LatentCode, VqVae};

pub const REPORT_FILE: &str = "eval_report.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SAMPLES_FILE: &str = "samples.png";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Pushing,
    PickPlace,
    Stacking,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Pushing, TaskKind::PickPlace, TaskKind::Stacking];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Pushing => "pushing",
            TaskKind::PickPlace => "pick-place",
            TaskKind::Stacking => "stacking",
        }
    }

    fn behavior(self) -> Behavior {
        match self {
            TaskKind::Pushing => Behavior::Push,
            TaskKind::PickPlace => Behavior::PickPlace,
            TaskKind::Stacking => Behavior::Stack,
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task kind {s:?} (expected pushing, pick-place or stacking)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub goals_per_kind: usize,
    pub kinds: Vec<TaskKind>,
    /// Max displacement of each object at trial start.
    pub jitter: f64,
    /// Jittered starts the oracle must also solve during certification.
    pub certify_probes: usize,
    pub max_attempts: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { goals_per_kind: 2, kinds: TaskKind::ALL.to_vec(), jitter: 0.05, certify_probes: 16, max_attempts: 2_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub name: String,
    pub kind: TaskKind,
    pub initial: SceneState,
    pub goal: SceneState,
}

/// Certified test tasks plus the environment they were certified in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub env: EnvConfig,
    pub jitter: f64,
    pub tasks: Vec<Task>,
}

impl TaskSuite {
    pub fn goal_image(&self, task: &Task) -> Image {
        render(&task.goal, &self.env)
    }

    pub fn of_kind(&self, kind: TaskKind) -> TaskSuite {
        TaskSuite { tasks: self.tasks.iter().filter(|t| t.kind == kind).cloned().collect(), ..self.clone() }
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::file(path, e))
    }

    /// Loads a suite and re-checks that the oracle solves every task.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let suite: TaskSuite = serde_json::from_str(&text).map_err(|e| Error::file(path, format!("not a task suite: {e}")))?;
        suite.env.validate()?;
        for t in &suite.tasks {
            if !oracle_reaches(&suite.env, &t.initial, &t.goal, t.kind)? {
                return Err(Error::file(path, format!("task {} is not reachable by the scripted oracle", t.name)));
            }
        }
        Ok(suite)
    }
}

/// Runs the scripted oracle from `start` for the horizon and checks success.
pub fn oracle_reaches(env: &EnvConfig, start: &SceneState, goal: &SceneState, kind: TaskKind) -> Result<bool> {
    plan_reaches(env, start, goal, kind == TaskKind::Pushing)
}

fn plan_reaches(env: &EnvConfig, start: &SceneState, goal: &SceneState, prefer_push: bool) -> Result<bool> {
    let mut c = Controller::new(plan_to_goal(start, goal, env, prefer_push));
    let mut state = start.clone();
    for _ in 0..env.horizon {
        let a = c.next_action(&state, env).unwrap_or_else(|| hold(&state));
        state = step(&state, &a.clamped(env.max_step), env);
    }
    success(&state, goal, env.success_radius)
}

fn hold(state: &SceneState) -> Action {
    Action::new(0.0, 0.0, 0.0, if state.gripper_open { -1.0 } else { 1.0 })
}

/// `state` with every object moved by at most `radius`, keeping the scene
/// valid; falls back to `state` itself after 100 rejected draws.
pub fn jitter<R: Rng>(state: &SceneState, env: &EnvConfig, radius: f64, rng: &mut R) -> SceneState {
    if radius <= 0.0 {
        return state.clone();
    }
    'draw: for _ in 0..100 {
        let mut s = state.clone();
        let mut offsets = vec![[0.0; 2]; s.objects.len()];
        for b in state.base_indices() {
            let (r, th) = (radius * rng.random::<f64>().sqrt(), rng.random_range(0.0..std::f64::consts::TAU));
            let d = [r * th.cos(), r * th.sin()];
            // a stack moves as one column
            offsets[b] = d;
            for i in state.column_above(b, env.stack_tolerance) {
                offsets[i] = d;
            }
        }
        for (o, d) in s.objects.iter_mut().zip(&offsets) {
            o.pos = [o.pos[0] + d[0], o.pos[1] + d[1]];
        }
        let bases: Vec<usize> = s.base_indices().collect();
        for (k, &a) in bases.iter().enumerate() {
            if !env.object_xy_in_bounds(s.objects[a].pos) {
                continue 'draw;
            }
            for &b in &bases[k + 1..] {
                if dist2(s.objects[a].pos, s.objects[b].pos) < 2.0 * env.object_radius + 1e-6 {
                    continue 'draw;
                }
            }
        }
        if s.check_invariants(env).is_ok() {
            return s;
        }
    }
    state.clone()
}

/// Builds and certifies a suite. Every goal displaces one object by more
/// than ε_succ plus the jitter radius, or changes its stack height, so an
/// idle policy cannot succeed.
pub fn build_suite(env: &EnvConfig, cfg: &SuiteConfig, seed: u64) -> Result<TaskSuite> {
    env.validate()?;
    let mut tasks = Vec::new();
    for kind in &cfg.kinds {
        let kind = *kind;
        let mut found = 0;
        let mut attempt = 0u64;
        while found < cfg.goals_per_kind {
            if attempt as usize >= cfg.max_attempts {
                return Err(Error::Config(format!(
                    "no certifiable {} task after {} attempts; raise the horizon or max_attempts",
                    kind.as_str(),
                    cfg.max_attempts
                )));
            }
            let s = seed::derive_seed(seed::derive_named(seed, kind.as_str()), attempt);
            attempt += 1;
            let initial = reset(env, s)?;
            let mut rng = seed::rng(seed::derive_named(s, "goal"));
            let Some((goal, id)) = perform(&initial, env, kind.behavior(), &mut rng) else { continue };
            let (a, b) = (initial.object(id).expect("moved object"), goal.object(id).expect("moved object"));
            let displaced = a.stack_height != b.stack_height || dist2(a.pos, b.pos) > env.success_radius + cfg.jitter;
            if !displaced || !oracle_reaches(env, &initial, &goal, kind)? {
                continue;
            }
            let mut ok = true;
            for p in 0..cfg.certify_probes {
                let start = jitter(&initial, env, cfg.jitter, &mut seed::rng(seed::derive_seed(s, p as u64)));
                if !oracle_reaches(env, &start, &goal, kind)? {
                    ok = false;
                    break;
                }
            }
            if ok {
                tasks.push(Task { name: format!("{}-{found}", kind.as_str()), kind, initial, goal });
                found += 1;
            }
        }
    }
    Ok(TaskSuite { env: env.clone(), jitter: cfg.jitter, tasks })
}

/// A policy evaluated on goal images. `begin` is called once per trial.
pub trait GoalPolicy {
    fn name(&self) -> String;
    fn begin(&mut self, start: &SceneState, goal: &SceneState, goal_image: &Image) -> Result<()>;
    fn act(&mut self, state: &SceneState, observation: &Image) -> Result<Action>;
}

/// Scripted controller with access to the true goal scene: the upper bound.
/// Without a fixed strategy it rehearses pushing, then pick-and-place, and
/// commits to the first that reaches the goal.
pub struct OraclePolicy {
    env: EnvConfig,
    pub prefer_push: Option<bool>,
    controller: Option<Controller>,
}

impl OraclePolicy {
    pub fn new(env: EnvConfig) -> Self {
        Self { env, prefer_push: None, controller: None }
    }
}

impl GoalPolicy for OraclePolicy {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn begin(&mut self, start: &SceneState, goal: &SceneState, _goal_image: &Image) -> Result<()> {
        let push = match self.prefer_push {
            Some(p) => p,
            None => plan_reaches(&self.env, start, goal, true)? || !plan_reaches(&self.env, start, goal, false)?,
        };
        self.controller = Some(Controller::new(plan_to_goal(start, goal, &self.env, push)));
        Ok(())
    }

    fn act(&mut self, state: &SceneState, _observation: &Image) -> Result<Action> {
        let c = self.controller.as_mut().ok_or_else(|| Error::Invalid("oracle used before begin".into()))?;
        Ok(c.next_action(state, &self.env).unwrap_or_else(|| hold(state)))
    }
}

/// Never moves.
pub struct ZeroPolicy;

impl GoalPolicy for ZeroPolicy {
    fn name(&self) -> String {
        "zero".into()
    }

    fn begin(&mut self, _: &SceneState, _: &SceneState, _: &Image) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, _: &SceneState, _: &Image) -> Result<Action> {
        Ok(Action::idle())
    }
}

/// A learned policy reading VQ-VAE codes of the observation and goal image.
pub struct LearnedPolicy<'a> {
    pub label: String,
    policy: &'a Policy,
    vqvae: &'a VqVae,
    goal: Option<LatentCode>,
}

impl<'a> LearnedPolicy<'a> {
    pub fn new(label: impl Into<String>, policy: &'a Policy, vqvae: &'a VqVae) -> Self {
        Self { label: label.into(), policy, vqvae, goal: None }
    }
}

impl GoalPolicy for LearnedPolicy<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn begin(&mut self, _: &SceneState, _: &SceneState, goal_image: &Image) -> Result<()> {
        self.goal = Some(self.vqvae.codes(&[goal_image])?.remove(0));
        Ok(())
    }

    fn act(&mut self, _: &SceneState, observation: &Image) -> Result<Action> {
        let goal = self.goal.as_ref().ok_or_else(|| Error::Invalid("policy used before begin".into()))?;
        let obs = self.vqvae.codes(&[observation])?.remove(0);
        Ok(self.policy.act(&obs.indices, &goal.indices)?.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub kind: TaskKind,
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffordanceMetrics {
    pub sampler: String,
    pub conditioning_images: usize,
    pub samples_per_image: usize,
    /// Fraction of samples the scene parser judges plausible.
    pub plausibility: f64,
    /// Mean over conditioning images of the pairwise code diversity.
    pub diversity: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub trials: usize,
    pub seed: u64,
    pub jitter: f64,
    pub suite_hash: String,
    pub tasks: Vec<TaskResult>,
    /// Success rate per task kind over all its tasks and trials.
    pub by_kind: BTreeMap<String, f64>,
    pub affordances: Vec<AffordanceMetrics>,
    /// Config hashes of every checkpoint involved, by role.
    pub config_hashes: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn rate(&self, kind: TaskKind) -> Option<f64> {
        self.by_kind.get(kind.as_str()).copied()
    }

    /// Writes the JSON report and its CSV table into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let p = dir.join(REPORT_FILE);
        fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::file(&p, e))?;
        let p = dir.join("results.csv");
        fs::write(&p, results_csv(std::slice::from_ref(self))).map_err(|e| Error::file(&p, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::file(path, format!("corrupt evaluation report: {e}")))
    }
}

/// Trial starts: the task's initial scene jittered by (seed, task, trial).
pub fn trial_start(suite: &TaskSuite, task: usize, trial: usize, seed: u64) -> SceneState {
    let s = seed::derive_seed(seed::derive_seed(seed, task as u64), trial as u64);
    jitter(&suite.tasks[task].initial, &suite.env, suite.jitter, &mut seed::rng(s))
}

/// Runs `trials` noise-free episodes of the horizon per task.
pub fn eval_policy(policy: &mut dyn GoalPolicy, suite: &TaskSuite, trials: usize, seed: u64) -> Result<EvalReport> {
    let env = &suite.env;
    let mut tasks = Vec::with_capacity(suite.tasks.len());
    let mut by_kind: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (ti, task) in suite.tasks.iter().enumerate() {
        let goal_image = suite.goal_image(task);
        let mut successes = 0;
        for trial in 0..trials {
            let mut state = trial_start(suite, ti, trial, seed);
            policy.begin(&state, &task.goal, &goal_image)?;
            for _ in 0..env.horizon {
                let a = policy.act(&state, &render(&state, env))?;
                state = step(&state, &a.clamped(env.max_step), env);
            }
            if success(&state, &task.goal, env.success_radius)? {
                successes += 1;
            }
        }
        let e = by_kind.entry(task.kind.as_str().to_string()).or_default();
        e.0 += successes;
        e.1 += trials;
        let rate = if trials == 0 { 0.0 } else { successes as f64 / trials as f64 };
        tracing::info!(policy = %policy.name(), task = %task.name, successes, trials, "eval");
        tasks.push(TaskResult { task: task.name.clone(), kind: task.kind, successes, trials, rate });
    }
    Ok(EvalReport {
        policy: policy.name(),
        trials,
        seed,
        jitter: suite.jitter,
        suite_hash: suite.hash()?,
        tasks,
        by_kind: by_kind.into_iter().map(|(k, (s, n))| (k, if n == 0 { 0.0 } else { s as f64 / n as f64 })).collect(),
        affordances: vec![],
        config_hashes: BTreeMap::new(),
    })
}

/// Plausibility against each conditioning scene's objects, and mean code
/// diversity, for `n` samples per conditioning scene.
pub fn eval_affordances(
    sampler: &dyn GoalSampler,
    scenes: &[SceneState],
    env: &EnvConfig,
    parse_cfg: &ParseConfig,
    vqvae: &VqVae,
    n: usize,
    seed: u64,
) -> Result<AffordanceMetrics> {
    if n < 2 {
        return Err(Error::Invalid(format!("diversity needs at least 2 samples per image, got {n}")));
    }
    let (mut plausible, mut total, mut div) = (0usize, 0usize, 0.0);
    for (i, scene) in scenes.iter().enumerate() {
        let o_c = render(scene, env);
        let goals = sampler.sample_goals(&o_c, Some(scene), n, seed::derive_seed(seed, i as u64))?;
        let reference = scene.multiset();
        for g in &goals {
            total += 1;
            if parse(g, env, parse_cfg, Some(&reference))?.is_plausible() {
                plausible += 1;
            }
        }
        div += image_diversity(&goals, vqvae)?;
    }
    let m = scenes.len().max(1) as f64;
    Ok(AffordanceMetrics {
        sampler: sampler.name().to_string(),
        conditioning_images: scenes.len(),
        samples_per_image: n,
        plausibility: if total == 0 { 0.0 } else { plausible as f64 / total as f64 },
        diversity: div / m,
    })
}

/// Columns: policy, task, kind, successes, trials, rate.
pub fn results_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("policy,task,kind,successes,trials,rate\n");
    for r in reports {
        for t in &r.tasks {
            s.push_str(&format!("{},{},{},{},{},{:.4}\n", r.policy, t.task, t.kind.as_str(), t.successes, t.trials, t.rate));
        }
    }
    s
}

/// One row per report, one success-rate column per task kind.
pub fn results_markdown(reports: &[EvalReport]) -> String {
    let mut s = String::from("| policy | pushing | pick-place | stacking |\n|---|---|---|---|\n");
    for r in reports {
        let cell = |k: TaskKind| r.rate(k).map_or("-".to_string(), |v| format!("{:.0}%", 100.0 * v));
        s.push_str(&format!("| {} | {} | {} | {} |\n", r.policy, cell(TaskKind::Pushing), cell(TaskKind::PickPlace), cell(TaskKind::Stacking)));
    }
    s
}

/// Columns: policy, sampler, conditioning_images, samples_per_image, plausibility, diversity.
pub fn affordance_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("policy,sampler,conditioning_images,samples_per_image,plausibility,diversity\n");
    for r in reports {
        for a in &r.affordances {
            s.push_str(&format!(
                "{},{},{},{},{:.4},{:.4}\n",
                r.policy, a.sampler, a.conditioning_images, a.samples_per_image, a.plausibility, a.diversity
            ));
        }
    }
    s
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpisodeMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::file(path, format!("corrupt record on line {}: {e}", i + 1))))
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct ReportOutput {
    pub reports: Vec<EvalReport>,
    pub curves: usize,
    pub panels: usize,
    pub warnings: Vec<String>,
    pub files: Vec<PathBuf>,
}

/// Collects evaluation reports, exploration metric logs and sample sheets
/// from run directories into tables and figures under `out`.
///
/// A directory must hold an evaluation report or an exploration metric log;
/// anything unreadable is an error naming the file.
pub fn report(dirs: &[PathBuf], out: &Path) -> Result<ReportOutput> {
    fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    let mut res = ReportOutput::default();
    if dirs.is_empty() {
        res.warnings.push("no run directories given; writing an empty table".into());
    }
    let mut curves = Vec::new();
    let mut sheets = Vec::new();
    for dir in dirs {
        if !dir.is_dir() {
            return Err(Error::file(dir, "run directory not found"));
        }
        let (rp, mp) = (dir.join(REPORT_FILE), dir.join(METRICS_FILE));
        if !rp.exists() && !mp.exists() {
            return Err(Error::file(dir, format!("neither {REPORT_FILE} nor {METRICS_FILE} present")));
        }
        if rp.exists() {
            res.reports.push(EvalReport::load(&rp)?);
        }
        if mp.exists() {
            let m = read_metrics(&mp)?;
            curves.push(m.iter().map(|e| e.bc_loss.unwrap_or(f64::NAN)).collect::<Vec<_>>());
        }
        let sp = dir.join(SAMPLES_FILE);
        if sp.exists() {
            sheets.push(Image::load(&sp)?);
        }
    }
    let mut write = |name: &str, text: String| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::file(&p, e))?;
        res.files.push(p);
        Ok(())
    };
    write("results.csv", results_csv(&res.reports))?;
    write("results.md", results_markdown(&res.reports))?;
    write("affordances.csv", affordance_csv(&res.reports))?;
    write("results.json", serde_json::to_string_pretty(&res.reports)?)?;
    if !curves.is_empty() {
        let p = out.join("progress.png");
        line_plot(&curves, 320, 200, 10).save_png(&p)?;
        res.files.push(p);
        res.curves = curves.len();
    }
    if !sheets.is_empty() {
        let p = out.join("panels.png");
        stack_rows(&sheets).upscaled(4).save_png(&p)?;
        res.files.push(p);
        res.panels = sheets.len();
    }
    for w in &res.warnings {
        tracing::warn!("{w}");
    }
    Ok(res)
}

/// Images stacked top to bottom on a dark background, left aligned.
fn stack_rows(rows: &[Image]) -> Image {
    let w = rows.iter().map(|r| r.width()).max().unwrap_or(1);
    let h = rows.iter().map(|r| r.height() + 1).sum::<usize>().max(1);
    let mut out = Image::filled(h, w, [0.1; 3]);
    let mut y = 0;
    for r in rows {
        for i in 0..r.height() {
            for j in 0..r.width() {
                out.set_pixel(y + i, j, r.pixel(i, j));
            }
        }
        y += r.height() + 1;
    }
    out
}

const SERIES_RGB: [[f32; 3]; 6] =
    [[0.9, 0.1, 0.1], [0.1, 0.5, 0.9], [0.1, 0.7, 0.2], [0.9, 0.6, 0.1], [0.6, 0.2, 0.8], [0.2, 0.7, 0.7]];

/// Moving-average curves of each series on shared axes. NaNs are skipped.
pub fn line_plot(series: &[Vec<f64>], width: usize, height: usize, smooth: usize) -> Image {
    let mut img = Image::filled(height, width, [1.0; 3]);
    let (x0, y0, x1, y1) = (8usize, 4usize, width - 4, height - 8);
    for x in x0..=x1 {
        img.set_pixel(y1, x, [0.3; 3]);
    }
    for y in y0..=y1 {
        img.set_pixel(y, x0, [0.3; 3]);
    }
    let smoothed: Vec<Vec<(usize, f64)>> = series
        .iter()
        .map(|s| {
            let pts: Vec<(usize, f64)> = s.iter().copied().enumerate().filter(|(_, v)| v.is_finite()).collect();
            let k = smooth.max(1);
            (0..pts.len())
                .map(|i| {
                    let lo = i.saturating_sub(k - 1);
                    (pts[i].0, pts[lo..=i].iter().map(|p| p.1).sum::<f64>() / (i - lo + 1) as f64)
                })
                .collect()
        })
        .collect();
    let all = smoothed.iter().flatten();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut n = 1usize;
    for &(i, v) in all {
        lo = lo.min(v);
        hi = hi.max(v);
        n = n.max(i + 1);
    }
    if !lo.is_finite() {
        return img;
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let px = |i: usize, v: f64| -> (i64, i64) {
        let x = x0 as f64 + (x1 - x0) as f64 * i as f64 / (n.max(2) - 1) as f64;
        let y = y1 as f64 - (y1 - y0) as f64 * (v - lo) / (hi - lo);
        (x.round() as i64, y.round() as i64)
    };
    for (k, s) in smoothed.iter().enumerate() {
        let c = SERIES_RGB[k % SERIES_RGB.len()];
        for w in s.windows(2) {
            draw_line(&mut img, px(w[0].0, w[0].1), px(w[1].0, w[1].1), c);
        }
        if let [only] = s.as_slice() {
            let (x, y) = px(only.0, only.1);
            draw_line(&mut img, (x, y), (x, y), c);
        }
    }
    img
}

fn draw_line(img: &mut Image, a: (i64, i64), b: (i64, i64), c: [f32; 3]) {
    let (dx, dy) = ((b.0 - a.0).abs(), -(b.1 - a.1).abs());
    let (sx, sy) = (if a.0 < b.0 { 1 } else { -1 }, if a.1 < b.1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (a.0, a.1, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as usize) < img.width() && (y as usize) < img.height() {
            img.set_pixel(y as usize, x as usize, c);
        }
        if x == b.0 && y == b.1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Contact sheet of the conditioning image followed by its sampled goals.
pub fn sample_panel(o_c: &Image, goals: &[Image]) -> Option<Image> {
    let mut all: Vec<&Image> = vec![o_c];
    all.extend(goals);
    contact_sheet(&all, [1.0; 3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affordance::{IdentitySampler, NoiseSampler};
    use crate::vqvae::VqVaeConfig;
    use candle_core::DType;

    fn small_suite() -> TaskSuite {
        let env = EnvConfig::default();
        build_suite(&env, &SuiteConfig { certify_probes: 4, ..Default::default() }, 7).unwrap()
    }

    #[test]
    fn suite_has_two_certified_goals_per_kind() {
        let suite = small_suite();
        assert_eq!(suite.tasks.len(), 6);
        for kind in TaskKind::ALL {
            assert_eq!(suite.tasks.iter().filter(|t| t.kind == kind).count(), 2);
        }
        for t in &suite.tasks {
            assert!(oracle_reaches(&suite.env, &t.initial, &t.goal, t.kind).unwrap(), "{}", t.name);
        }
        assert_eq!(build_suite(&suite.env, &SuiteConfig { certify_probes: 4, ..Default::default() }, 7).unwrap(), suite);
    }

    #[test]
    fn oracle_is_perfect_and_zero_fails() {
        let suite = small_suite();
        let env = suite.env.clone();
        let r = eval_policy(&mut OraclePolicy::new(env), &suite, 5, 3).unwrap();
        assert!(r.tasks.iter().all(|t| t.successes == t.trials), "{:?}", r.tasks);
        let z = eval_policy(&mut ZeroPolicy, &suite, 5, 3).unwrap();
        assert!(z.tasks.iter().all(|t| t.successes == 0), "{:?}", z.tasks);
        assert_eq!(z.trials, 5);
        assert!(r.by_kind.values().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let suite = small_suite();
        let a = eval_policy(&mut OraclePolicy::new(suite.env.clone()), &suite, 3, 9).unwrap();
        let b = eval_policy(&mut OraclePolicy::new(suite.env.clone()), &suite, 3, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jitter_stays_within_radius_and_valid() {
        let env = EnvConfig::default();
        let mut rng = seed::rng(3);
        for s in 0..200 {
            let st = reset(&env, s).unwrap();
            let j = jitter(&st, &env, 0.05, &mut rng);
            j.check_invariants(&env).unwrap();
            for (a, b) in st.objects.iter().zip(&j.objects) {
                assert!(dist2(a.pos, b.pos) <= 0.05 + 1e-12);
            }
        }
    }

    #[test]
    fn suite_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let suite = small_suite();
        let p = dir.path().join("suite.json");
        suite.save(&p).unwrap();
        assert_eq!(TaskSuite::load(&p).unwrap(), suite);
        fs::write(&p, "{").unwrap();
        assert!(TaskSuite::load(&p).is_err());
    }

    #[test]
    fn identity_and_noise_samplers() {
        let env = EnvConfig::default();
        let vq = VqVae::new(&VqVaeConfig { hidden: 8, res_hidden: 4, code_dim: 8, codebook_size: 16, ..Default::default() }, DType::F32, 1)
            .unwrap();
        let scenes: Vec<SceneState> = (0..5).map(|s| reset(&env, s).unwrap()).collect();
        let pc = ParseConfig::default();
        let id = eval_affordances(&IdentitySampler, &scenes, &env, &pc, &vq, 4, 1).unwrap();
        assert_eq!((id.plausibility, id.diversity), (1.0, 0.0));
        let noise = eval_affordances(&NoiseSampler, &scenes, &env, &pc, &vq, 4, 1).unwrap();
        assert_eq!(noise.plausibility, 0.0);
        assert!(eval_affordances(&IdentitySampler, &scenes, &env, &pc, &vq, 1, 1).is_err());
    }

    #[test]
    fn report_passthrough_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let empty = report(&[], &out).unwrap();
        assert!(empty.reports.is_empty() && !empty.warnings.is_empty());
        assert_eq!(fs::read_to_string(out.join("results.csv")).unwrap().lines().count(), 1);

        let suite = small_suite();
        let r = eval_policy(&mut OraclePolicy::new(suite.env.clone()), &suite, 2, 1).unwrap();
        let run = dir.path().join("run");
        r.save(&run).unwrap();
        let got = report(std::slice::from_ref(&run), &out).unwrap();
        assert_eq!(got.reports, vec![r.clone()]);
        let table = fs::read_to_string(out.join("results.csv")).unwrap();
        assert_eq!(table, fs::read_to_string(run.join("results.csv")).unwrap());

        let run2 = dir.path().join("run2");
        r.save(&run2).unwrap();
        let out2 = dir.path().join("out2");
        report(&[run2.clone()], &out2).unwrap();
        assert_eq!(fs::read_to_string(out2.join("results.csv")).unwrap(), table);

        let missing = dir.path().join("nothing");
        fs::create_dir_all(&missing).unwrap();
        let e = report(&[missing], &out).unwrap_err().to_string();
        assert!(e.contains("nothing") && e.contains(REPORT_FILE), "{e}");

        fs::write(run2.join(REPORT_FILE), "not json").unwrap();
        let e = report(&[run2], &out).unwrap_err().to_string();
        assert!(e.contains(REPORT_FILE) && e.contains("corrupt"), "{e}");

        let bad = dir.path().join("bad-metrics");
        fs::create_dir_all(&bad).unwrap();
        fs::write(bad.join(METRICS_FILE), "{}\n").unwrap();
        let e = report(&[bad], &out).unwrap_err().to_string();
        assert!(e.contains(METRICS_FILE) && e.contains("line 1"), "{e}");
    }

    #[test]
    fn plot_draws_something() {
        let img = line_plot(&[vec![3.0, 2.0, 1.0, f64::NAN, 0.5], vec![1.0]], 64, 48, 2);
        assert_eq!(img.dims(), (48, 64));
        assert!(img.data().chunks(3).any(|p| p[0] > 0.8 && p[1] < 0.2));
    }
}
