use std::path::Path;

use rand::seq::SliceRandom;

use super::env::{scripted_expert, EnvConfig, EnvState, Observation, ToyEnv, ACTION_DIM};
use crate::encoder::Encoder;
use crate::nn::Linear;
use crate::numerics::{Graph, ParamRegistry, ParamStore, Tensor};
use crate::rng::{stream_rng, Stream};
use crate::training::checkpoint::{Container, Entry};
use crate::training::{adamw_step, AdamState, AdamWConfig};
use crate::{Error, Result};

/// Observation/action pairs of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<(Observation, Vec<f32>)>,
}

impl Trajectory {
    pub fn validate(&self) -> Result<()> {
        let Some((o0, a0)) = self.steps.first() else {
            return Err(Error::Data("empty trajectory".into()));
        };
        let shape = |o: &Observation| (o.views.iter().map(|v| v.shape().to_vec()).collect::<Vec<_>>(), o.proprio.len());
        let s0 = shape(o0);
        if self.steps.iter().any(|(o, a)| shape(o) != s0 || a.len() != a0.len()) {
            return Err(Error::Data("trajectory dims change between steps".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    /// Frames of visual history fed to the policy.
    pub history: usize,
    pub views: usize,
    pub proprio_dim: usize,
    pub action_dim: usize,
    /// Width of one visual feature vector (the encoder's CLS dim).
    pub feature_dim: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl PolicyConfig {
    pub fn desk(feature_dim: usize) -> Self {
        PolicyConfig {
            hidden: vec![256, 256],
            history: 1,
            views: 1,
            proprio_dim: super::env::PROPRIO_DIM,
            action_dim: ACTION_DIM,
            feature_dim,
            lr: 1e-3,
            epochs: 100,
            batch: 64,
            weight_decay: 0.0,
            seed: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.views * self.history * self.feature_dim + self.proprio_dim
    }
}

/// Policy input for the newest observation of `window` (oldest first):
/// CLS features of every frame and view, then the newest proprio vector.
/// The encoder parameters are only read.
pub fn extract_features(encoder: &Encoder, params: &ParamStore<f32>, window: &[Observation], cfg: &PolicyConfig) -> Result<Vec<f32>> {
    if window.len() != cfg.history {
        return Err(Error::Shape(format!("history window of {} frames, policy expects {}", window.len(), cfg.history)));
    }
    if encoder.config().dim != cfg.feature_dim {
        return Err(Error::Shape(format!("encoder width {} differs from policy feature dim {}", encoder.config().dim, cfg.feature_dim)));
    }
    let mut out = Vec::with_capacity(cfg.input_dim());
    for obs in window {
        if obs.views.len() != cfg.views {
            return Err(Error::Shape(format!("observation has {} views, policy expects {}", obs.views.len(), cfg.views)));
        }
        for v in &obs.views {
            out.extend_from_slice(encoder.encode_full(params, v)?.cls.data());
        }
    }
    let last = window.last().expect("nonempty window");
    if last.proprio.len() != cfg.proprio_dim {
        return Err(Error::Shape(format!("proprio has {} values, policy expects {}", last.proprio.len(), cfg.proprio_dim)));
    }
    out.extend_from_slice(&last.proprio);
    Ok(out)
}

/// The `history` observations ending at `t`, padded at the start by
/// repeating the first one.
fn window_at(obs: &[&Observation], t: usize, history: usize) -> Vec<Observation> {
    (0..history).map(|i| obs[(t + i + 1).saturating_sub(history)].clone()).collect()
}

/// MLP with GELU hidden layers over standardized inputs.
#[derive(Clone, Debug)]
pub struct MlpPolicy {
    pub cfg: PolicyConfig,
    registry: ParamRegistry,
    layers: Vec<Linear>,
    pub params: ParamStore<f32>,
    in_mean: Vec<f32>,
    in_std: Vec<f32>,
}

impl MlpPolicy {
    pub fn new(cfg: &PolicyConfig) -> Self {
        let mut registry = ParamRegistry::new();
        let mut dims = vec![cfg.input_dim()];
        dims.extend_from_slice(&cfg.hidden);
        dims.push(cfg.action_dim);
        let layers = dims.windows(2).enumerate().map(|(i, w)| Linear::declare(&mut registry, &format!("policy.{i}"), w[0], w[1])).collect();
        let params = ParamStore::init(&registry, &mut stream_rng(cfg.seed, Stream::Policy, 0));
        let n = cfg.input_dim();
        MlpPolicy { cfg: cfg.clone(), registry, layers, params, in_mean: vec![0.0; n], in_std: vec![1.0; n] }
    }

    fn standardize(&self, x: &[f32]) -> Vec<f32> {
        x.iter().enumerate().map(|(i, v)| (v - self.in_mean[i % self.in_mean.len()]) / self.in_std[i % self.in_std.len()]).collect()
    }

    fn forward(&self, g: &mut Graph<f32>, rows: usize, x: &[f32]) -> Result<crate::numerics::Var> {
        let mut h = g.constant(Tensor::new(vec![rows, self.cfg.input_dim()], self.standardize(x))?);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.gelu(h)?;
            }
        }
        Ok(h)
    }

    pub fn act(&self, features: &[f32]) -> Result<Vec<f32>> {
        if features.len() != self.cfg.input_dim() {
            return Err(Error::Shape(format!("policy input has {} values, expected {}", features.len(), self.cfg.input_dim())));
        }
        let mut g = Graph::new(&self.params);
        let y = self.forward(&mut g, 1, features)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Mean squared action error over a feature matrix.
    pub fn mse(&self, x: &[Vec<f32>], y: &[Vec<f32>]) -> Result<f64> {
        let flat: Vec<f32> = x.concat();
        let mut g = Graph::new(&self.params);
        let pred = self.forward(&mut g, x.len(), &flat)?;
        let t = g.constant(Tensor::new(vec![y.len(), self.cfg.action_dim], y.concat())?);
        let l = g.mse(pred, t)?;
        Ok(g.value(l).item() as f64)
    }

    /// Fits the policy to `(x, y)` by minibatch AdamW on the mean squared
    /// action error; returns the final full-data error.
    pub fn fit(&mut self, x: &[Vec<f32>], y: &[Vec<f32>]) -> Result<f64> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::InvalidArgument(format!("{} inputs for {} targets", x.len(), y.len())));
        }
        let d = self.cfg.input_dim();
        if x.iter().any(|r| r.len() != d) || y.iter().any(|r| r.len() != self.cfg.action_dim) {
            return Err(Error::Shape("feature or action width differs from the policy config".into()));
        }
        let n = x.len() as f64;
        self.in_mean = (0..d).map(|j| (x.iter().map(|r| r[j] as f64).sum::<f64>() / n) as f32).collect();
        self.in_std = (0..d)
            .map(|j| {
                let m = self.in_mean[j] as f64;
                let var = x.iter().map(|r| (r[j] as f64 - m).powi(2)).sum::<f64>() / n;
                (var.sqrt().max(1e-6)) as f32
            })
            .collect();
        let mut opt = AdamState::new(&self.registry);
        let adam = AdamWConfig { weight_decay: self.cfg.weight_decay, ..AdamWConfig::default() };
        let mut order: Vec<usize> = (0..x.len()).collect();
        let mut rng = stream_rng(self.cfg.seed, Stream::Policy, 1);
        for _ in 0..self.cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.cfg.batch.max(1)) {
                let xs: Vec<f32> = chunk.iter().flat_map(|&i| x[i].iter().copied()).collect();
                let ys: Vec<f32> = chunk.iter().flat_map(|&i| y[i].iter().copied()).collect();
                let grads = {
                    let mut g = Graph::new(&self.params);
                    let pred = self.forward(&mut g, chunk.len(), &xs)?;
                    let t = g.constant(Tensor::new(vec![chunk.len(), self.cfg.action_dim], ys)?);
                    let l = g.mse(pred, t)?;
                    g.backward(l)?
                };
                self.params.zero_grads();
                grads.accumulate_into(&mut self.params);
                adamw_step(&mut self.params, &mut opt, self.cfg.lr, &adam, 1.0);
            }
        }
        self.params.zero_grads();
        self.mse(x, y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BcReport {
    pub samples: usize,
    pub final_mse: f64,
}

/// Behavior cloning on frozen encoder features of every demo step.
pub fn bc_train(encoder: &Encoder, enc_params: &ParamStore<f32>, demos: &[Trajectory], cfg: &PolicyConfig) -> Result<(MlpPolicy, BcReport)> {
    if demos.is_empty() {
        return Err(Error::Data("no demonstrations".into()));
    }
    let before = enc_params.digest();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for demo in demos {
        demo.validate()?;
        let obs: Vec<&Observation> = demo.steps.iter().map(|(o, _)| o).collect();
        for (t, (_, a)) in demo.steps.iter().enumerate() {
            x.push(extract_features(encoder, enc_params, &window_at(&obs, t, cfg.history), cfg)?);
            y.push(a.clone());
        }
    }
    let mut policy = MlpPolicy::new(cfg);
    let final_mse = policy.fit(&x, &y)?;
    if enc_params.digest() != before {
        return Err(Error::InvalidArgument("encoder parameters changed during behavior cloning".into()));
    }
    Ok((policy, BcReport { samples: x.len(), final_mse }))
}

/// Anything that maps observations to actions inside an episode.
pub trait Controller {
    fn reset(&mut self, _seed: u64) {}
    fn act(&mut self, obs: &Observation, state: &EnvState) -> Result<Vec<f64>>;
}

/// The scripted expert (reads the true state).
pub struct Expert(pub EnvConfig);

impl Controller for Expert {
    fn act(&mut self, _obs: &Observation, state: &EnvState) -> Result<Vec<f64>> {
        Ok(scripted_expert(&self.0, state).to_vec())
    }
}

/// Uniform random actions.
pub struct RandomController(pub rand_chacha::ChaCha8Rng);

impl Controller for RandomController {
    fn reset(&mut self, seed: u64) {
        self.0 = stream_rng(seed, Stream::Policy, 2);
    }

    fn act(&mut self, _obs: &Observation, _state: &EnvState) -> Result<Vec<f64>> {
        use rand::Rng;
        Ok((0..ACTION_DIM).map(|_| self.0.random_range(-1.0..=1.0)).collect())
    }
}

/// A trained policy reading frozen encoder features.
pub struct BcController<'a> {
    pub policy: &'a MlpPolicy,
    pub encoder: &'a Encoder,
    pub enc_params: &'a ParamStore<f32>,
    history: Vec<Observation>,
}

impl<'a> BcController<'a> {
    pub fn new(policy: &'a MlpPolicy, encoder: &'a Encoder, enc_params: &'a ParamStore<f32>) -> Self {
        BcController { policy, encoder, enc_params, history: Vec::new() }
    }
}

impl Controller for BcController<'_> {
    fn reset(&mut self, _seed: u64) {
        self.history.clear();
    }

    fn act(&mut self, obs: &Observation, _state: &EnvState) -> Result<Vec<f64>> {
        let h = self.policy.cfg.history;
        if self.history.is_empty() {
            self.history = vec![obs.clone(); h];
        } else {
            self.history.remove(0);
            self.history.push(obs.clone());
        }
        let f = extract_features(self.encoder, self.enc_params, &self.history, &self.policy.cfg)?;
        Ok(self.policy.act(&f)?.into_iter().map(f64::from).collect())
    }
}

/// Runs one episode from `seed`; returns the trajectory and success.
pub fn run_episode(env_cfg: &EnvConfig, ctl: &mut dyn Controller, seed: u64) -> Result<(Trajectory, bool)> {
    let mut env = ToyEnv::new(env_cfg.clone());
    let mut obs = env.reset(seed);
    ctl.reset(seed);
    let mut steps = Vec::new();
    while !env.done() {
        let a = ctl.act(&obs, &env.state)?;
        let (next, _) = env.step(&a)?;
        steps.push((obs, a.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect()));
        obs = next;
    }
    Ok((Trajectory { steps }, env.success()))
}

/// Success rate over `episodes` episodes; episode `ep` uses seed
/// `base_seed + ep`.
pub fn rollout_eval(env_cfg: &EnvConfig, ctl: &mut dyn Controller, episodes: usize, base_seed: u64) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("need at least one episode".into()));
    }
    let mut wins = 0;
    for ep in 0..episodes {
        wins += run_episode(env_cfg, ctl, base_seed + ep as u64)?.1 as usize;
    }
    Ok(wins as f64 / episodes as f64)
}

/// Expert demonstrations from seeds `base_seed ..`.
pub fn collect_demos(env_cfg: &EnvConfig, n: usize, base_seed: u64) -> Result<Vec<Trajectory>> {
    let mut expert = Expert(env_cfg.clone());
    (0..n).map(|i| run_episode(env_cfg, &mut expert, base_seed + i as u64).map(|(t, _)| t)).collect()
}

pub fn save_demos(path: &Path, demos: &[Trajectory], digest: u64) -> Result<()> {
    let mut c = Container { entries: Vec::new(), digest };
    c.push("meta/count", Entry::scalar_u64(demos.len() as u64));
    for (i, d) in demos.iter().enumerate() {
        d.validate()?;
        let (o0, a0) = &d.steps[0];
        let t = d.steps.len();
        let mut vshape = vec![t, o0.views.len()];
        vshape.extend_from_slice(o0.views[0].shape());
        let views: Vec<f32> = d.steps.iter().flat_map(|(o, _)| o.views.iter().flat_map(|v| v.data().iter().copied())).collect();
        let proprio: Vec<f32> = d.steps.iter().flat_map(|(o, _)| o.proprio.iter().copied()).collect();
        let actions: Vec<f32> = d.steps.iter().flat_map(|(_, a)| a.iter().copied()).collect();
        c.push(format!("demo/{i}/views"), Entry::F32(Tensor::new(vshape, views)?));
        c.push(format!("demo/{i}/proprio"), Entry::F32(Tensor::new(vec![t, o0.proprio.len()], proprio)?));
        c.push(format!("demo/{i}/actions"), Entry::F32(Tensor::new(vec![t, a0.len()], actions)?));
    }
    c.save(path)
}

pub fn load_demos(path: &Path) -> Result<Vec<Trajectory>> {
    let c = Container::load(path)?;
    let n = c.u64("meta/count")? as usize;
    (0..n)
        .map(|i| {
            let views = c.f32(&format!("demo/{i}/views"))?;
            let proprio = c.f32(&format!("demo/{i}/proprio"))?;
            let actions = c.f32(&format!("demo/{i}/actions"))?;
            let vs = views.shape();
            if vs.len() != 5 || proprio.shape()[0] != vs[0] || actions.shape()[0] != vs[0] {
                return Err(Error::Checkpoint(format!("demo {i} has inconsistent shapes")));
            }
            let img = vs[2] * vs[3] * vs[4];
            let steps = (0..vs[0])
                .map(|t| {
                    let obs = Observation {
                        views: (0..vs[1])
                            .map(|v| {
                                let at = (t * vs[1] + v) * img;
                                Tensor::new(vs[2..].to_vec(), views.data()[at..at + img].to_vec()).expect("view slice")
                            })
                            .collect(),
                        proprio: proprio.row(t).to_vec(),
                    };
                    (obs, actions.row(t).to_vec())
                })
                .collect();
            let traj = Trajectory { steps };
            traj.validate()?;
            Ok(traj)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::model::{ModelConfig, StpModel};

    fn small_env() -> EnvConfig {
        EnvConfig { size: 16, ..EnvConfig::default() }
    }

    fn small_encoder() -> (StpModel, ParamStore<f32>) {
        let cfg = ModelConfig { encoder: EncoderConfig { image_size: 16, dim: 32, depth: 1, ..EncoderConfig::desk() }, ..ModelConfig::desk() };
        let model = StpModel::new(&cfg).unwrap();
        let params = model.init_params(0);
        (model, params)
    }

    #[test]
    fn expert_solves_and_random_mostly_fails() {
        let env = EnvConfig::default();
        assert!(rollout_eval(&env, &mut Expert(env.clone()), 100, 0).unwrap() >= 0.99);
        let mut random = RandomController(rand_chacha::ChaCha8Rng::seed_from_u64(0));
        assert!(rollout_eval(&env, &mut random, 100, 0).unwrap() <= 0.2);
    }

    #[test]
    fn feature_width_follows_history_and_views() {
        let model = StpModel::new(&ModelConfig::desk()).unwrap();
        let params = model.init_params(0);
        let mut env = ToyEnv::new(EnvConfig::default());
        let obs = env.reset(3);
        let one = PolicyConfig::desk(128);
        assert_eq!(one.input_dim(), 132);
        assert_eq!(extract_features(&model.encoder, &params, &[obs.clone()], &one).unwrap().len(), 132);
        let three = PolicyConfig { history: 3, ..one.clone() };
        let f = extract_features(&model.encoder, &params, &vec![obs.clone(); 3], &three).unwrap();
        assert_eq!(f.len(), 3 * 128 + 4);
        assert!(extract_features(&model.encoder, &params, &[obs.clone()], &three).is_err());
        assert!(extract_features(&model.encoder, &params, &[obs], &PolicyConfig::desk(64)).is_err());
    }

    #[test]
    fn zero_actions_are_learned_as_zero() {
        let (model, params) = small_encoder();
        let env = small_env();
        let mut demos = collect_demos(&env, 3, 10).unwrap();
        for d in &mut demos {
            for (_, a) in &mut d.steps {
                a.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let cfg = PolicyConfig { hidden: vec![16], epochs: 40, ..PolicyConfig::desk(32) };
        let (policy, report) = bc_train(&model.encoder, &params, &demos, &cfg).unwrap();
        assert!(report.final_mse < 1e-4, "{}", report.final_mse);
        let mut fresh = ToyEnv::new(env);
        let f = extract_features(&model.encoder, &params, &[fresh.reset(99)], &cfg).unwrap();
        assert!(policy.act(&f).unwrap().iter().all(|a| a.abs() < 0.05));
    }

    #[test]
    fn encoder_stays_frozen() {
        let (model, params) = small_encoder();
        let before = params.clone();
        let demos = collect_demos(&small_env(), 2, 0).unwrap();
        let cfg = PolicyConfig { hidden: vec![8], epochs: 2, ..PolicyConfig::desk(32) };
        let (_, report) = bc_train(&model.encoder, &params, &demos, &cfg).unwrap();
        assert_eq!(params, before);
        assert_eq!(report.samples, demos.iter().map(|d| d.steps.len()).sum::<usize>());
    }

    #[test]
    fn policy_loss_gradient_matches_finite_differences() {
        let cfg = PolicyConfig { hidden: vec![5], feature_dim: 3, proprio_dim: 1, ..PolicyConfig::desk(3) };
        let policy = MlpPolicy::new(&cfg);
        let x: Vec<f32> = (0..12).map(|i| ((i * 7 % 5) as f32 - 2.0) * 0.3).collect();
        let y: Vec<f32> = (0..6).map(|i| (i as f32 - 2.5) * 0.2).collect();
        let loss = |p: &ParamStore<f64>| -> f64 {
            let mut g = Graph::new(p);
            let mut h = g.constant(Tensor::new(vec![3, 4], x.iter().map(|&v| v as f64).collect()).unwrap());
            for (i, layer) in policy.layers.iter().enumerate() {
                h = layer.forward(&mut g, h).unwrap();
                if i + 1 < policy.layers.len() {
                    h = g.gelu(h).unwrap();
                }
            }
            let t = g.constant(Tensor::new(vec![3, 2], y.iter().map(|&v| v as f64).collect()).unwrap());
            let l = g.mse(h, t).unwrap();
            g.value(l).item()
        };
        let p64 = policy.params.cast::<f64>();
        let mut g = Graph::new(&policy.params);
        let pred = policy.forward(&mut g, 3, &x).unwrap();
        let t = g.constant(Tensor::new(vec![3, 2], y.clone()).unwrap());
        let l = g.mse(pred, t).unwrap();
        let grads = g.backward(l).unwrap();
        let h = 1e-6;
        for id in p64.ids() {
            let an = grads.param(id).unwrap();
            for k in 0..p64.value(id).len() {
                let mut p = p64.clone();
                p.value_mut(id).data_mut()[k] += h;
                let up = loss(&p);
                p.value_mut(id).data_mut()[k] -= 2.0 * h;
                let fd = (up - loss(&p)) / (2.0 * h);
                let a = an.data()[k] as f64;
                assert!((fd - a).abs() <= 1e-3 * fd.abs().max(a.abs()).max(1e-3), "{} [{k}]: {fd} vs {a}", p64.name(id));
            }
        }
    }

    #[test]
    fn demos_roundtrip_through_a_container() {
        let demos = collect_demos(&small_env(), 3, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demos.stpc");
        save_demos(&path, &demos, 7).unwrap();
        assert_eq!(load_demos(&path).unwrap(), demos);
    }

    #[test]
    fn rollouts_are_reproducible() {
        let env = small_env();
        let mut a = RandomController(rand_chacha::ChaCha8Rng::seed_from_u64(0));
        let mut b = RandomController(rand_chacha::ChaCha8Rng::seed_from_u64(1));
        assert_eq!(run_episode(&env, &mut a, 4).unwrap(), run_episode(&env, &mut b, 4).unwrap());
        assert!(rollout_eval(&env, &mut a, 0, 0).is_err());
    }
}
