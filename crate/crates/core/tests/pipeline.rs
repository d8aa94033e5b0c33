use std::path::Path;

use lira::checkpoint::Checkpoint;
use lira::config::ExperimentConfig;
use lira::envs::NoiseKind;
use lira::harness::{eval_checkpoint, evaluate, load_learner, read_log, train, Trainer, LOG_FILE};
use lira::learner::LiraMode;

fn tiny(mode: LiraMode) -> ExperimentConfig {
    let text = format!(
        r#"
[run]
mode = "{}"
episodes = 3
checkpoint_every = 2

[env]
name = "point_mass_push"
t_max = 20

[network]
width = 8

[network.flow]
width = 8

[planner]
candidates = 16
iterations = 2
horizon = 3
"#,
        mode.name()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

fn without_wall_time(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn train_and_eval_are_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(LiraMode::Proposal);
    let a = train(&cfg, 9, &dir.path().join("a")).unwrap();
    let b = train(&cfg, 9, &dir.path().join("b")).unwrap();
    assert_eq!(without_wall_time(&a.out_dir.join(LOG_FILE)), without_wall_time(&b.out_dir.join(LOG_FILE)));
    let (ca, cb) = (Checkpoint::load(&a.final_checkpoint).unwrap(), Checkpoint::load(&b.final_checkpoint).unwrap());
    assert_eq!(ca, cb);
    let ea = eval_checkpoint(&a.final_checkpoint, NoiseKind::Brown3, 3, 1, None).unwrap();
    let eb = eval_checkpoint(&b.final_checkpoint, NoiseKind::Brown3, 3, 1, None).unwrap();
    assert_eq!(ea, eb);

    let c = train(&cfg, 10, &dir.path().join("c")).unwrap();
    assert_ne!(Checkpoint::load(&c.final_checkpoint).unwrap(), ca);
}

#[test]
fn log_parses_back_exactly_and_only_grows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(LiraMode::Proposal);
    let first = train(&cfg, 2, dir.path()).unwrap();
    let path = dir.path().join(LOG_FILE);
    let parsed = read_log(&path).unwrap();
    assert_eq!(parsed.len(), first.rows.len());
    for (p, r) in parsed.iter().zip(&first.rows) {
        assert_eq!(p.episode, r.episode);
        for (x, y) in [
            (p.ret, r.ret),
            (p.loss_marginal, r.loss_marginal),
            (p.loss_aware, r.loss_aware),
            (p.gap, r.gap),
            (p.lambda_mean, r.lambda_mean),
            (p.gamma, r.gamma),
            (p.adversary_scale, r.adversary_scale),
            (p.wall_time, r.wall_time),
        ] {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
    let before = std::fs::read_to_string(&path).unwrap();
    train(&cfg, 2, dir.path()).unwrap();
    let after = std::fs::read_to_string(&path).unwrap();
    assert!(after.starts_with(&before));
    assert_eq!(after.matches("episode,").count(), 1);
    assert_eq!(read_log(&path).unwrap().len(), 2 * first.rows.len());
    for curve in ["score.csv", "gap.csv", "lambda.csv"] {
        let text = std::fs::read_to_string(dir.path().join(curve)).unwrap();
        assert_eq!(text.lines().next(), Some("episode,value"));
        assert_eq!(text.lines().count(), 1 + 2 * first.rows.len());
    }
    assert!(dir.path().join("checkpoint_00002.txt").exists());
}

#[test]
fn every_mode_runs_from_config_alone() {
    for mode in LiraMode::ALL {
        let mut trainer = Trainer::new(tiny(mode), 1).unwrap();
        let row = trainer.run_episode().unwrap();
        assert!(row.gap.is_finite(), "{mode:?}");
        assert!((0.0..=1.0).contains(&row.lambda_mean) && (0.0..=1.0).contains(&row.gamma), "{mode:?}");
        match mode {
            LiraMode::Nominal => assert_eq!(row.lambda_mean, 1.0),
            LiraMode::Full | LiraMode::AblateLira => assert_eq!(row.lambda_mean, 0.0),
            _ => {}
        }
        assert_eq!(trainer.learner.model.rnf().shape().odd, mode != LiraMode::AblateRnf, "{mode:?}");
    }
}

#[test]
fn checkpoint_reload_reproduces_evaluation() {
    let mut trainer = Trainer::new(tiny(LiraMode::Proposal), 4).unwrap();
    trainer.run_episode().unwrap();
    let ck = trainer.checkpoint();
    let (cfg, env, learner) = load_learner(&Checkpoint::from_text(&ck.to_text()).unwrap()).unwrap();
    let direct = evaluate(&trainer.learner.model, trainer.env.as_ref(), &cfg.planner, NoiseKind::Nominal, 3, 5).unwrap();
    let reloaded = evaluate(&learner.model, env.as_ref(), &cfg.planner, NoiseKind::Nominal, 3, 5).unwrap();
    assert_eq!(direct, reloaded);
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let trainer = Trainer::new(tiny(LiraMode::Proposal), 4).unwrap();
    let mut ck = trainer.checkpoint();
    ck.params.retain(|(n, _)| n != "gamma");
    assert!(load_learner(&ck).is_err());
    let mut ck = trainer.checkpoint();
    ck.config = ck.config.replace("width = 8", "width = 9");
    assert!(load_learner(&ck).is_err());
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.env.build().unwrap();
    }
}
