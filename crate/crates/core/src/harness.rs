//! Experiment orchestration: the collect/learn loop, run logs, checkpoints
//! and the noise-robustness evaluation protocol.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::envs::{Env, NoiseGen, NoiseKind};
use crate::flows::{WorldModel, WorldModelDims};
use crate::learner::{collect_episode, Learner, ReplayBuffer};
use crate::planner::{warm_start, Dynamics, Planner, PlannerConfig, PlannerPolicy};
use crate::stats::iqm;
use crate::{LiraRng, Result};

pub const LOG_FILE: &str = "log.csv";
pub const SCORE_FILE: &str = "score.csv";
pub const GAP_FILE: &str = "gap.csv";
pub const LAMBDA_FILE: &str = "lambda.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.txt";

/// One row of the run log, written after each episode's learning phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub loss_marginal: f64,
    pub loss_aware: f64,
    pub gap: f64,
    pub lambda_mean: f64,
    pub gamma: f64,
    pub adversary_scale: f64,
    pub wall_time: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveRow {
    episode: usize,
    value: f64,
}

pub fn dims_of(env: &dyn Env) -> WorldModelDims {
    let s = env.spec();
    WorldModelDims { state: s.state_dim, action: s.action_dim, reward: s.reward_dim, disturbance: s.disturbance_dim }
}

pub fn build_learner(config: &ExperimentConfig, env: &dyn Env, rng: &mut LiraRng) -> Result<Learner> {
    Learner::new(config.run.mode, config.lira.clone(), &config.network, dims_of(env), env.spec().d_max, rng)
}

/// Receding-horizon controller on a learned model.
pub struct Controller<'a> {
    planner: Planner,
    model: &'a dyn Dynamics,
    policy: Option<PlannerPolicy>,
    explore: bool,
}

impl<'a> Controller<'a> {
    pub fn new(config: &PlannerConfig, env: &dyn Env, model: &'a dyn Dynamics, explore: bool) -> Result<Self> {
        let spec = env.spec();
        Ok(Self { planner: Planner::new(config.clone(), spec.action_dim, spec.action_bound)?, model, policy: None, explore })
    }

    pub fn act(&mut self, s: &[f64], rng: &mut LiraRng) -> Result<Vec<f64>> {
        let init = self.planner.initial_policy();
        let mut policy = match &self.policy {
            Some(prev) => warm_start(prev, &init, self.planner.config.step_size),
            None => init,
        };
        let a = self.planner.plan(s, self.model, &mut policy, self.explore, rng)?;
        self.policy = Some(policy);
        Ok(a)
    }
}

/// In-memory training state of one seed.
pub struct Trainer {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub env: Box<dyn Env>,
    pub learner: Learner,
    pub buffer: ReplayBuffer,
    rng: LiraRng,
    episode: usize,
    started: Instant,
}

impl Trainer {
    pub fn new(config: ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let env = config.env.build()?;
        let mut rng = LiraRng::seed_from_u64(seed);
        let learner = build_learner(&config, env.as_ref(), &mut rng)?;
        let buffer = ReplayBuffer::new(config.lira.buffer_capacity);
        Ok(Self { config, seed, env, learner, buffer, rng, episode: 0, started: Instant::now() })
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    /// Collects one episode with the current model and adversary, then
    /// learns from the whole buffer.
    pub fn run_episode(&mut self) -> Result<LogRow> {
        let learner = &self.learner;
        let mut ctrl = Controller::new(&self.config.planner, self.env.as_ref(), &learner.model, true)?;
        let mut act = |_: usize, s: &[f64], rng: &mut LiraRng| ctrl.act(s, rng);
        let mut disturb = |_: usize, s: &[f64], rng: &mut LiraRng| learner.disturbance(s, rng);
        let res = collect_episode(self.env.as_ref(), &mut act, &mut disturb, Some(&mut self.buffer), &mut self.rng)?;

        let mut diag = Default::default();
        for _ in 0..self.config.run.epochs_per_episode {
            diag = self.learner.train_epoch(&self.buffer, &mut self.rng)?;
        }
        self.episode += 1;
        let lambda_mean = match self.learner.fixed_lambda() {
            Some(l) => l,
            None => diag.lambda_mean,
        };
        Ok(LogRow {
            episode: self.episode,
            ret: res.ret,
            loss_marginal: diag.loss_marginal,
            loss_aware: diag.loss_aware,
            gap: diag.gap,
            lambda_mean,
            gamma: diag.gamma,
            adversary_scale: diag.adversary_scale,
            wall_time: self.started.elapsed().as_secs_f64(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { config: self.config.to_toml(), params: self.learner.named_values() }
    }
}

/// Rebuilds a learner from a checkpoint: configuration plus parameters.
pub fn load_learner(ck: &Checkpoint) -> Result<(ExperimentConfig, Box<dyn Env>, Learner)> {
    let config = ExperimentConfig::from_toml(&ck.config)?;
    let env = config.env.build()?;
    let mut rng = LiraRng::seed_from_u64(0);
    let mut learner = build_learner(&config, env.as_ref(), &mut rng)?;
    learner.load_values(&ck.params)?;
    Ok((config, env, learner))
}

fn append_writer(path: &Path) -> Result<csv::Writer<File>> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    Ok(csv::WriterBuilder::new().has_headers(fresh).from_writer(file))
}

/// Files written by a training run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub rows: Vec<LogRow>,
    pub out_dir: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// Runs the configured number of episodes for `seed`, logging into `out`.
///
/// On a mid-run failure the current parameters are saved to
/// `checkpoint_failed.txt` and earlier checkpoints are left untouched.
pub fn train(config: &ExperimentConfig, seed: u64, out: &Path) -> Result<TrainSummary> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(CONFIG_FILE), config.to_toml())?;
    let mut trainer = Trainer::new(config.clone(), seed)?;
    let mut log = append_writer(&out.join(LOG_FILE))?;
    let mut curves = [SCORE_FILE, GAP_FILE, LAMBDA_FILE]
        .iter()
        .map(|f| append_writer(&out.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for _ in 0..config.run.episodes {
        let row = match trainer.run_episode() {
            Ok(r) => r,
            Err(e) => {
                let path = out.join("checkpoint_failed.txt");
                if let Err(save) = trainer.checkpoint().save(&path) {
                    log::error!("could not save {}: {save}", path.display());
                }
                return Err(e);
            }
        };
        log::info!(
            "seed {seed} episode {}: return {:.3} gap {:.3} lambda {:.3}",
            row.episode,
            row.ret,
            row.gap,
            row.lambda_mean
        );
        log.serialize(&row)?;
        log.flush()?;
        for (w, value) in curves.iter_mut().zip([row.ret, row.gap, row.lambda_mean]) {
            w.serialize(CurveRow { episode: row.episode, value })?;
            w.flush()?;
        }
        let every = config.run.checkpoint_every;
        if every > 0 && row.episode % every == 0 {
            trainer.checkpoint().save(&out.join(format!("checkpoint_{:05}.txt", row.episode)))?;
        }
        rows.push(row);
    }
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainSummary { rows, out_dir: out.to_path_buf(), final_checkpoint })
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Returns of `trials` test episodes under a fixed noise kind. The planner
/// acts on the first-step mean; each trial draws its own noise sequence.
pub fn evaluate(
    model: &WorldModel,
    env: &dyn Env,
    planner: &PlannerConfig,
    kind: NoiseKind,
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = LiraRng::seed_from_u64(seed);
    let spec = env.spec();
    (0..trials)
        .map(|_| {
            let noise = NoiseGen::new(kind, &spec, &mut rng)?;
            let mut ctrl = Controller::new(planner, env, model, false)?;
            let mut act = |_: usize, s: &[f64], rng: &mut LiraRng| ctrl.act(s, rng);
            let mut disturb = |t: usize, _: &[f64], rng: &mut LiraRng| Ok(noise.at(t, rng));
            Ok(collect_episode(env, &mut act, &mut disturb, None, &mut rng)?.ret)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub disturbance: NoiseKind,
    pub returns: Vec<f64>,
    pub iqm: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrialRow {
    trial: usize,
    #[serde(rename = "return")]
    ret: f64,
}

/// Evaluates a checkpoint and, when `out` is given, writes per-trial returns
/// there as CSV.
pub fn eval_checkpoint(path: &Path, kind: NoiseKind, trials: usize, seed: u64, out: Option<&Path>) -> Result<EvalReport> {
    let ck = Checkpoint::load(path)?;
    let (config, env, learner) = load_learner(&ck)?;
    let returns = evaluate(&learner.model, env.as_ref(), &config.planner, kind, trials, seed)?;
    if let Some(out) = out {
        if let Some(dir) = out.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(out)?;
        for (trial, &ret) in returns.iter().enumerate() {
            w.serialize(TrialRow { trial, ret })?;
        }
        w.flush()?;
    }
    Ok(EvalReport { disturbance: kind, iqm: iqm(&returns)?, returns })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{ChainParams, EnvConfig, PointMassParams};
    use crate::learner::LiraMode;

    fn tiny(mode: LiraMode) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.run.mode = mode;
        cfg.run.episodes = 2;
        cfg.run.checkpoint_every = 1;
        cfg.env = EnvConfig::PointMassPush(PointMassParams { t_max: 12, ..Default::default() });
        cfg.network.width = 8;
        cfg.network.flow.width = 8;
        cfg.planner = PlannerConfig { candidates: 16, iterations: 2, horizon: 3, ..Default::default() };
        cfg
    }

    #[test]
    fn smoke_run_logs_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let summary = train(&tiny(LiraMode::Proposal), 3, dir.path()).unwrap();
        assert_eq!(summary.rows.len(), 2);
        assert_eq!(read_log(&dir.path().join(LOG_FILE)).unwrap(), summary.rows);
        assert!(dir.path().join("checkpoint_00001.txt").exists());
        let ck = Checkpoint::load(&summary.final_checkpoint).unwrap();
        let (_, _, learner) = load_learner(&ck).unwrap();
        assert_eq!(learner.named_values(), ck.params);
    }

    #[test]
    fn full_mode_logs_zero_lambda() {
        let dir = tempfile::tempdir().unwrap();
        let summary = train(&tiny(LiraMode::Full), 0, dir.path()).unwrap();
        assert!(summary.rows.iter().all(|r| r.lambda_mean == 0.0));
    }

    #[test]
    fn training_is_reproducible() {
        let run = || {
            let mut t = Trainer::new(tiny(LiraMode::Proposal), 11).unwrap();
            let mut rows = vec![t.run_episode().unwrap(), t.run_episode().unwrap()];
            rows.iter_mut().for_each(|r| r.wall_time = 0.0);
            (rows, t.learner.named_values())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_reward_env_has_zero_iqm() {
        // a frozen chain never moves, so every trial earns exactly 0
        let env = crate::envs::ChainCrawler::new(ChainParams { max_rate: 0.0, t_max: 5, ..Default::default() }).unwrap();
        let mut rng = LiraRng::seed_from_u64(0);
        let mut cfg = tiny(LiraMode::Nominal);
        cfg.env = EnvConfig::ChainCrawler(env.params.clone());
        let learner = build_learner(&cfg, &env, &mut rng).unwrap();
        let returns = evaluate(&learner.model, &env, &cfg.planner, NoiseKind::Brown3, 4, 0).unwrap();
        assert_eq!(iqm(&returns).unwrap(), 0.0);
    }
}
