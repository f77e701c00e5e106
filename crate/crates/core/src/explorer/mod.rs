//! Affordance-driven exploration: sample a goal for the first frame, roll
//! out the goal-conditioned policy, relabel every transition with the
//! trajectory's final frame and clone the executed actions.

mod policy;

pub use policy::{Policy, PolicyConfig, PolicyInput, PolicyOutput};

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::affordance::GoalSampler;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed;
use crate::simenv::{render, reset, step, Action, EnvConfig, SceneState};
use crate::vqvae::{LatentCode, VqVae};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplorerConfig {
    pub episodes: usize,
    /// Behavior-cloning steps after each episode.
    pub updates_per_episode: usize,
    pub batch_size: usize,
    /// In trajectories.
    pub buffer_capacity: usize,
    /// Gaussian noise on displacements, in action units.
    pub noise_sigma: f64,
    /// Probability of inverting the gripper command.
    pub grip_flip: f64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub policy: PolicyConfig,
}

impl Default for ExplorerConfig {
    fn default() -> Self {
        Self {
            episodes: 2_000,
            updates_per_episode: 50,
            batch_size: 32,
            buffer_capacity: 500,
            noise_sigma: 0.1,
            grip_flip: 0.1,
            checkpoint_every: 500,
            policy: PolicyConfig::default(),
        }
    }
}

impl ExplorerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(Error::Config("explorer: batch_size and buffer_capacity must be >= 1".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&self.grip_flip) {
            return Err(Error::Config("explorer: noise_sigma must be >= 0 and grip_flip in [0, 1]".into()));
        }
        self.policy.validate()
    }
}

/// One episode: T+1 observations and the T actions between them.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub episode: u64,
    pub observations: Vec<Arc<Image>>,
    pub codes: Vec<Arc<LatentCode>>,
    pub states: Vec<SceneState>,
    pub actions: Vec<Action>,
    /// The goal the policy was conditioned on; logged, never trained on.
    pub sampled_goal: Arc<Image>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Transition `t` relabeled with the final frame as its goal.
    pub fn tuple(&self, t: usize) -> Tuple {
        let last = self.observations.len() - 1;
        Tuple {
            episode: self.episode,
            t,
            o_t: self.observations[t].clone(),
            action: self.actions[t],
            o_next: self.observations[t + 1].clone(),
            goal: self.observations[last].clone(),
            code_t: self.codes[t].clone(),
            code_goal: self.codes[last].clone(),
            terminal: t + 1 == last,
        }
    }
}

/// A relabeled training tuple (o_t, a_t, o_{t+1}, o_g = o_T).
#[derive(Clone, Debug)]
pub struct Tuple {
    pub episode: u64,
    pub t: usize,
    pub o_t: Arc<Image>,
    pub action: Action,
    pub o_next: Arc<Image>,
    pub goal: Arc<Image>,
    pub code_t: Arc<LatentCode>,
    pub code_goal: Arc<LatentCode>,
    pub terminal: bool,
}

/// All transitions of `traj`, each with the final observation as goal.
pub fn relabel(traj: &Trajectory) -> Result<Vec<Tuple>> {
    if traj.observations.len() < 2 {
        return Err(Error::Invalid(format!("episode {} has {} observations, need >= 2", traj.episode, traj.observations.len())));
    }
    Ok((0..traj.observations.len() - 1).map(|t| traj.tuple(t)).collect())
}

/// Bounded FIFO of complete trajectories.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    trajectories: VecDeque<Arc<Trajectory>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), trajectories: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Inserts `traj`, returning the evicted episode id when full.
    pub fn push(&mut self, traj: Trajectory) -> Option<u64> {
        let evicted = if self.trajectories.len() == self.capacity { self.trajectories.pop_front().map(|t| t.episode) } else { None };
        self.trajectories.push_back(Arc::new(traj));
        evicted
    }

    pub fn episodes(&self) -> Vec<u64> {
        self.trajectories.iter().map(|t| t.episode).collect()
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter().map(|t| t.as_ref())
    }

    /// Uniform draw over trajectories, then over their transitions.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Tuple> {
        if self.trajectories.is_empty() {
            return vec![];
        }
        (0..n)
            .map(|_| {
                let tr = &self.trajectories[rng.random_range(0..self.trajectories.len())];
                tr.tuple(rng.random_range(0..tr.len()))
            })
            .collect()
    }
}

/// Exploration noise applied on top of the policy's deterministic action.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Noise {
    pub sigma: f64,
    pub grip_flip: f64,
}

impl Noise {
    pub const NONE: Noise = Noise { sigma: 0.0, grip_flip: 0.0 };
}

/// Executes exactly `horizon` policy actions from `start` towards `goal`.
#[allow(clippy::too_many_arguments)]
pub fn rollout<R: Rng>(
    env: &EnvConfig,
    start: &SceneState,
    policy: &Policy,
    vqvae: &VqVae,
    goal: &Image,
    horizon: usize,
    noise: Noise,
    rng: &mut R,
    episode: u64,
) -> Result<Trajectory> {
    let goal_code = vqvae.codes(&[goal])?.remove(0);
    let scale = policy.config().action_scale;
    let gauss = Normal::new(0.0, noise.sigma.max(0.0)).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut state = start.clone();
    let first = render(&state, env);
    let mut traj = Trajectory {
        episode,
        codes: vec![Arc::new(vqvae.codes(&[&first])?.remove(0))],
        observations: vec![Arc::new(first)],
        states: vec![state.clone()],
        actions: Vec::with_capacity(horizon),
        sampled_goal: Arc::new(goal.clone()),
    };
    for _ in 0..horizon {
        let code = traj.codes.last().expect("non-empty");
        let (mut a, _, _) = policy.act(&code.indices, &goal_code.indices)?;
        if noise.sigma > 0.0 {
            a.dx += gauss.sample(rng) * scale;
            a.dy += gauss.sample(rng) * scale;
            a.dz += gauss.sample(rng) * scale;
        }
        if noise.grip_flip > 0.0 && rng.random::<f64>() < noise.grip_flip {
            a.grip = -a.grip;
        }
        let a = a.clamped(env.max_step);
        state = step(&state, &a, env);
        let obs = render(&state, env);
        traj.codes.push(Arc::new(vqvae.codes(&[&obs])?.remove(0)));
        traj.observations.push(Arc::new(obs));
        traj.states.push(state.clone());
        traj.actions.push(a);
    }
    Ok(traj)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub sampler: String,
    /// Mean behavior-cloning loss over this episode's updates.
    pub bc_loss: Option<f64>,
    pub buffer_len: usize,
    /// Pixel MSE between the final frame and the sampled goal.
    pub goal_mse: f64,
    /// Objects whose position changed during the episode.
    pub objects_moved: usize,
}

/// Callbacks for logging and checkpointing during [`explore_loop`].
pub trait ExploreObserver {
    fn episode(&mut self, _metrics: &EpisodeMetrics, _traj: &Trajectory) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _episodes_done: usize, _policy: &Policy) -> Result<()> {
        Ok(())
    }
}

impl ExploreObserver for () {}

pub struct ExploreSummary {
    pub metrics: Vec<EpisodeMetrics>,
    pub sampler_calls: usize,
    pub buffer: ReplayBuffer,
}

/// Repeats: reset, sample one goal for the first frame, roll out, then run
/// `updates_per_episode` behavior-cloning steps on uniformly drawn relabeled
/// tuples.
pub fn explore_loop(
    env: &EnvConfig,
    sampler: &dyn GoalSampler,
    vqvae: &VqVae,
    policy: &mut Policy,
    cfg: &ExplorerConfig,
    seed: u64,
    observer: &mut dyn ExploreObserver,
) -> Result<ExploreSummary> {
    cfg.validate()?;
    let vc = vqvae.config();
    if vc.image_size != env.image_size {
        return Err(Error::shape(format!("{0}x{0} frames for the codec", vc.image_size), format!("{0}x{0} renders", env.image_size)));
    }
    let pc = policy.config();
    if pc.seq_len != vc.seq_len() || pc.vocab != vc.codebook_size {
        return Err(Error::Incompatible(format!(
            "policy expects {}-token codes over {} entries, codec produces {} over {}",
            pc.seq_len,
            pc.vocab,
            vc.seq_len(),
            vc.codebook_size
        )));
    }
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut rng = seed::rng(seed::derive_named(seed, "explore.updates"));
    let noise = Noise { sigma: cfg.noise_sigma, grip_flip: cfg.grip_flip };
    let mut metrics = Vec::with_capacity(cfg.episodes);
    let mut sampler_calls = 0;

    for ep in 0..cfg.episodes {
        let ep_seed = seed::derive_seed(seed, ep as u64);
        let start = reset(env, ep_seed)?;
        let o1 = render(&start, env);
        let goal = sampler.sample_goals(&o1, Some(&start), 1, seed::derive_named(ep_seed, "goal"))?;
        sampler_calls += 1;
        let goal = goal.into_iter().next().ok_or_else(|| Error::Invalid(format!("sampler {} returned no goal", sampler.name())))?;
        if goal.dims() != o1.dims() {
            return Err(Error::shape(format!("{:?} goal", o1.dims()), format!("{:?}", goal.dims())));
        }
        let mut ep_rng = seed::rng(seed::derive_named(ep_seed, "rollout"));
        let traj = rollout(env, &start, policy, vqvae, &goal, env.horizon, noise, &mut ep_rng, ep as u64)?;
        let last = traj.states.last().expect("non-empty");
        let objects_moved = start.objects.iter().zip(&last.objects).filter(|(a, b)| a.pos != b.pos || a.stack_height != b.stack_height).count();
        let goal_mse = traj.observations.last().expect("non-empty").mse(&goal) as f64;
        buffer.push(traj.clone());

        let mut losses = Vec::with_capacity(cfg.updates_per_episode);
        for _ in 0..cfg.updates_per_episode {
            let batch = buffer.sample(cfg.batch_size, &mut rng);
            losses.push(policy.bc_update(&batch)?);
        }
        let m = EpisodeMetrics {
            episode: ep,
            sampler: sampler.name().to_string(),
            bc_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
            buffer_len: buffer.len(),
            goal_mse,
            objects_moved,
        };
        tracing::debug!(episode = ep, bc_loss = ?m.bc_loss, goal_mse, objects_moved, "explore");
        observer.episode(&m, &traj)?;
        metrics.push(m);
        if cfg.checkpoint_every > 0 && (ep + 1) % cfg.checkpoint_every == 0 {
            observer.checkpoint(ep + 1, policy)?;
        }
    }
    Ok(ExploreSummary { metrics, sampler_calls, buffer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vqvae::VqVaeConfig;
    use candle_core::DType;

    pub(crate) fn fixtures() -> (EnvConfig, VqVae, Policy) {
        let env = EnvConfig::default();
        let vq = VqVae::new(&VqVaeConfig { hidden: 8, res_hidden: 4, code_dim: 8, codebook_size: 16, ..Default::default() }, DType::F32, 1)
            .unwrap();
        let pol = Policy::new(&PolicyConfig { vocab: 16, hidden: vec![32, 16], ..Default::default() }, DType::F32, 2).unwrap();
        (env, vq, pol)
    }

    fn traj(episode: u64, n_obs: usize, rng: &mut impl Rng) -> Trajectory {
        let obs: Vec<Arc<Image>> = (0..n_obs).map(|_| Arc::new(Image::filled(2, 2, [rng.random(), 0.0, 0.0]))).collect();
        let codes = (0..n_obs).map(|_| Arc::new(LatentCode::new(1, 2, vec![rng.random_range(0..4), 0]).unwrap())).collect();
        Trajectory {
            episode,
            codes,
            states: vec![],
            actions: (1..n_obs).map(|_| Action::new(rng.random(), 0.0, 0.0, 1.0)).collect(),
            sampled_goal: obs[0].clone(),
            observations: obs,
        }
    }

    #[test]
    fn relabel_counts_and_goals() {
        let mut rng = seed::rng(1);
        let t = traj(0, 2, &mut rng);
        let r = relabel(&t).unwrap();
        assert_eq!(r.len(), 1);
        assert!(Arc::ptr_eq(&r[0].goal, &t.observations[1]));
        assert!(relabel(&traj(0, 1, &mut rng)).is_err());
        for n in 2..30 {
            let t = traj(n as u64, n, &mut rng);
            let r = relabel(&t).unwrap();
            assert_eq!(r.len(), n - 1);
            assert!(r.iter().all(|x| *x.goal == **t.observations.last().unwrap()));
            assert!(r.last().unwrap().terminal);
        }
    }

    #[test]
    fn buffer_evicts_oldest_first() {
        let mut rng = seed::rng(2);
        let mut b = ReplayBuffer::new(3);
        let mut evicted = vec![];
        for ep in 0..7 {
            if let Some(e) = b.push(traj(ep, 3, &mut rng)) {
                evicted.push(e);
            }
            assert!(b.len() <= 3);
        }
        assert_eq!(evicted, vec![0, 1, 2, 3]);
        assert_eq!(b.episodes(), vec![4, 5, 6]);
    }

    #[test]
    fn rollout_horizon_one_and_determinism() {
        let (env, vq, pol) = fixtures();
        let start = reset(&env, 3).unwrap();
        let goal = render(&start, &env);
        let t = rollout(&env, &start, &pol, &vq, &goal, 1, Noise::NONE, &mut seed::rng(0), 0).unwrap();
        assert_eq!((t.len(), t.observations.len()), (1, 2));
        let r = relabel(&t).unwrap();
        assert!(Arc::ptr_eq(&r[0].goal, &t.observations[1]));
        let a = rollout(&env, &start, &pol, &vq, &goal, 10, Noise::NONE, &mut seed::rng(0), 0).unwrap();
        let b = rollout(&env, &start, &pol, &vq, &goal, 10, Noise::NONE, &mut seed::rng(9), 0).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.actions, b.actions);
    }

    #[test]
    fn buffer_grows_by_one_per_rollout() {
        let (env, vq, pol) = fixtures();
        let mut b = ReplayBuffer::new(60);
        let noise = Noise { sigma: 0.1, grip_flip: 0.1 };
        for ep in 0..100u64 {
            let start = reset(&env, ep).unwrap();
            let goal = render(&start, &env);
            let t = rollout(&env, &start, &pol, &vq, &goal, 2, noise, &mut seed::rng(ep), ep).unwrap();
            b.push(t);
            assert_eq!(b.len(), (ep as usize + 1).min(60));
        }
    }

    #[test]
    fn loss_does_not_depend_on_buffer_order() {
        let (env, vq, pol) = fixtures();
        let mut b = ReplayBuffer::new(10);
        for ep in 0..5u64 {
            let start = reset(&env, ep).unwrap();
            let goal = render(&start, &env);
            b.push(rollout(&env, &start, &pol, &vq, &goal, 4, Noise { sigma: 0.3, grip_flip: 0.2 }, &mut seed::rng(ep), ep).unwrap());
        }
        let batch = b.sample(16, &mut seed::rng(4));
        let keys: Vec<(u64, usize)> = batch.iter().map(|t| (t.episode, t.t)).collect();
        let mut trajs: Vec<Trajectory> = b.trajectories().cloned().collect();
        trajs.reverse();
        let mut shuffled = ReplayBuffer::new(10);
        for t in trajs {
            shuffled.push(t);
        }
        let same: Vec<Tuple> = keys
            .iter()
            .map(|&(ep, t)| shuffled.trajectories().find(|tr| tr.episode == ep).unwrap().tuple(t))
            .collect();
        assert_eq!(pol.loss(&same).unwrap(), pol.loss(&batch).unwrap());
    }

    struct CountingSampler(std::cell::Cell<usize>);

    impl GoalSampler for CountingSampler {
        fn name(&self) -> &str {
            "counting"
        }

        fn sample_goals(&self, o_c: &Image, _: Option<&SceneState>, n: usize, _: u64) -> Result<Vec<Image>> {
            self.0.set(self.0.get() + 1);
            Ok(vec![o_c.clone(); n])
        }
    }

    #[test]
    fn zero_budget_leaves_policy_untouched() {
        let (env, vq, mut pol) = fixtures();
        let before = pol.fingerprint().unwrap();
        let cfg = ExplorerConfig { episodes: 0, policy: pol.config().clone(), ..Default::default() };
        let s = explore_loop(&env, &CountingSampler(0.into()), &vq, &mut pol, &cfg, 1, &mut ()).unwrap();
        assert_eq!(s.sampler_calls, 0);
        assert_eq!(pol.fingerprint().unwrap(), before);
    }

    #[test]
    fn one_goal_per_episode() {
        let (env, vq, mut pol) = fixtures();
        let env = EnvConfig { horizon: 3, ..env };
        let cfg = ExplorerConfig { episodes: 4, updates_per_episode: 2, batch_size: 4, policy: pol.config().clone(), ..Default::default() };
        let sampler = CountingSampler(0.into());
        let s = explore_loop(&env, &sampler, &vq, &mut pol, &cfg, 1, &mut ()).unwrap();
        assert_eq!((s.sampler_calls, sampler.0.get(), s.metrics.len()), (4, 4, 4));
        assert!(s.metrics.iter().all(|m| m.bc_loss.is_some_and(f64::is_finite)));
    }
}
