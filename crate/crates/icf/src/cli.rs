//! Command-line entry points: train, eval, plan, render.
//!
//! Exit-code contract (enforced by the binary): 0 on success, 1 on usage or
//! configuration errors, 2 on numerical abort.

use crate::analysis::{
    bound_gap_report, cluster_by_action, collect_variations, feature_recovery_csv,
    feature_recovery_from, latent_grid, latent_grid_csv, variations_csv, TabularMDP,
};
use crate::autodiff::Tensor;
use crate::env::{enumerate_states, observe, step as env_step, Cell, EnvState, GridSpec};
use crate::error::{IcfError, Result};
use crate::models::encode_value;
use crate::objective::kernel_score_value;
use crate::planner::{decompose, execute_multiset, extract_prototypes, FactorPrototypeSet};
use crate::ppm;
use crate::trainer::{encode_state, metrics_csv_header, TrainConfig, Trainer};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(name = "icf", version, about = "Selectivity-driven controllable-factor learning on gridworlds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and populate a run directory.
    Train(TrainArgs),
    /// Export analysis artifacts from a checkpoint.
    Eval(EvalArgs),
    /// Decompose a start-to-goal change into factor moves and execute it.
    Plan(PlanArgs),
    /// Write observation and reconstruction images for a state.
    Render(RenderArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON config file; see TrainConfig for the schema.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Environment preset name, used with defaults when no config file is given.
    #[arg(long)]
    pub preset: Option<String>,
    /// Run directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Override the learning rate (useful for cooldown after --resume).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Resume from a checkpoint instead of initializing fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of variation records to collect.
    #[arg(long, default_value_t = 1000)]
    pub variations: usize,
    /// Also run the exact conditional-MI oracle on the tabular reduction.
    #[arg(long)]
    pub mi_oracle: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// Predict h' = h + dh.
    Additive,
    /// Predict h' with the learned transition model.
    Learned,
}

#[derive(Args, Debug)]
pub struct PlanArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Start agent cell as "x,y".
    #[arg(long)]
    pub start: String,
    /// Goal agent cell as "x,y".
    #[arg(long)]
    pub goal: String,
    #[arg(long, value_enum, default_value_t = PlanMode::Additive)]
    pub mode: PlanMode,
    /// Variation records used to extract action prototypes.
    #[arg(long, default_value_t = 1000)]
    pub variations: usize,
    #[arg(long, default_value_t = 16)]
    pub max_steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the plan JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Agent cell as "x,y".
    #[arg(long)]
    pub state: String,
    /// Output directory for observation.ppm and reconstruction.ppm.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Plan(args) => cmd_plan(args),
        Command::Render(args) => cmd_render(args),
    }
}

fn load_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<TrainConfig>(&text).map_err(|e| {
                IcfError::Config(format!("{}: {e}", path.display()))
            })?
        }
        (None, Some(preset)) => TrainConfig::for_preset(preset),
        (None, None) => {
            return Err(IcfError::Config(
                "either --config or --preset is required".into(),
            ))
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.steps = steps;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let ckpt_dir = args.out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;

    let (mut trainer, mut metrics_text) = if let Some(resume) = &args.resume {
        let mut t = Trainer::from_checkpoint(resume)?;
        if let Some(steps) = args.steps {
            t.cfg.steps = steps;
        }
        if let Some(lr) = args.lr {
            t.cfg.learning_rate = lr;
            t.optimizer.lr = lr;
        }
        let existing = args.out.join("metrics.csv");
        let text = if existing.exists() {
            std::fs::read_to_string(&existing)?
        } else {
            metrics_csv_header(t.grid.n_actions()) + "\n"
        };
        (t, text)
    } else {
        let cfg = load_config(&args)?;
        let t = Trainer::new(cfg)?;
        let header = metrics_csv_header(t.grid.n_actions()) + "\n";
        (t, header)
    };

    ppm::write_atomic(
        &args.out.join("config.json"),
        serde_json::to_string_pretty(&trainer.cfg)?.as_bytes(),
    )?;

    let metrics_path = args.out.join("metrics.csv");
    let result = trainer.run(
        |m| {
            metrics_text.push_str(&m.csv_row());
            metrics_text.push('\n');
            Ok(())
        },
        Some(&ckpt_dir),
    );
    // keep whatever was logged even when the run aborts
    ppm::write_atomic(&metrics_path, metrics_text.as_bytes())?;
    result
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let trainer = Trainer::from_checkpoint(&args.ckpt)?;
    let exports = args.out.join("exports");
    std::fs::create_dir_all(&exports)?;
    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);

    let records = collect_variations(
        &trainer.model,
        &trainer.grid,
        trainer.cfg.obs_mode,
        args.variations,
        trainer.cfg.t_option,
        trainer.cfg.permissible_only,
        &mut rng,
    )?;
    ppm::write_atomic(
        &exports.join("variations.csv"),
        variations_csv(&records).as_bytes(),
    )?;
    // Action clustering only makes sense for single-step variations; with
    // multi-step options the export is skipped.
    if trainer.cfg.t_option == 1 {
        let report = cluster_by_action(&records)?;
        ppm::write_atomic(
            &exports.join("clusters.json"),
            serde_json::to_string_pretty(&report)?.as_bytes(),
        )?;
    }
    let rows = latent_grid(&trainer.model, &trainer.grid, trainer.cfg.obs_mode)?;
    ppm::write_atomic(
        &exports.join("latent_grid.csv"),
        latent_grid_csv(&rows).as_bytes(),
    )?;
    let fr = feature_recovery_from(&rows)?;
    ppm::write_atomic(
        &exports.join("feature_recovery.csv"),
        feature_recovery_csv(&fr).as_bytes(),
    )?;

    if args.mi_oracle {
        let gap = mi_oracle_report(&trainer, &records, &mut rng)?;
        ppm::write_atomic(
            &exports.join("mi_oracle.json"),
            serde_json::to_string_pretty(&gap)?.as_bytes(),
        )?;
    }
    Ok(())
}

/// Tabular reduction of the preset: one factor per action whose policy takes
/// that action deterministically, scored with the trained encoder and the
/// per-action latent prototypes.
fn mi_oracle_report(
    trainer: &Trainer,
    records: &[crate::analysis::VariationRecord],
    rng: &mut ChaCha20Rng,
) -> Result<crate::analysis::BoundGap> {
    let grid = &trainer.grid;
    let states = enumerate_states(grid)?;
    let n_states = states.len();
    let n_actions = grid.n_actions();
    let index_of = |s: &EnvState| -> usize {
        states.iter().position(|t| t == s).expect("state enumerable")
    };

    let mut transition = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
    for (si, s) in states.iter().enumerate() {
        for a in 0..n_actions {
            let next = env_step(grid, s, a)?;
            transition[si][a][index_of(&next)] = 1.0;
        }
    }
    let policies: Vec<Vec<Vec<f64>>> = (0..n_actions)
        .map(|f| {
            (0..n_states)
                .map(|_| {
                    let mut row = vec![0.0; n_actions];
                    row[f] = 1.0;
                    row
                })
                .collect()
        })
        .collect();
    let mdp = TabularMDP {
        n_states,
        n_actions,
        policies,
        transition,
    };

    let prototypes = extract_prototypes(records, 1)?;
    let mut proto_by_action: Vec<Option<Vec<f64>>> = vec![None; n_actions];
    for p in &prototypes.prototypes {
        proto_by_action[p.action] = Some(p.dh.clone());
    }
    let latents: Vec<Tensor> = states
        .iter()
        .map(|s| encode_state(&trainer.model, grid, trainer.cfg.obs_mode, s))
        .collect::<Result<_>>()?;
    let spec = trainer.cfg.kernel_spec();
    let score = |s0: usize, s_end: usize, factor: usize| -> f64 {
        let phi = match &proto_by_action[factor] {
            Some(v) => Tensor::vector(v.clone()),
            None => Tensor::zeros(&[trainer.model.cfg.latent_dim]),
        };
        kernel_score_value(&latents[s_end], &latents[s0], &phi, &spec).unwrap_or(0.0)
    };
    bound_gap_report(&mdp, trainer.cfg.t_option, score, 20_000, rng)
}

fn parse_cell(text: &str) -> Result<Cell> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        return Err(IcfError::Config(format!(
            "expected \"x,y\", got `{text}`"
        )));
    }
    let x = parts[0].trim().parse::<i32>();
    let y = parts[1].trim().parse::<i32>();
    match (x, y) {
        (Ok(x), Ok(y)) => Ok(Cell::new(x, y)),
        _ => Err(IcfError::Config(format!("expected \"x,y\", got `{text}`"))),
    }
}

fn agent_state(grid: &GridSpec, cell: Cell, what: &str) -> Result<EnvState> {
    if !grid.has_agent {
        return Err(IcfError::Config(
            "plan/render needs an agent-based preset".into(),
        ));
    }
    if !grid.free(cell) {
        return Err(IcfError::Config(format!(
            "{what} cell ({}, {}) is blocked or out of bounds",
            cell.x, cell.y
        )));
    }
    let mut state = grid.initial_state();
    state.agent = Some(cell);
    Ok(state)
}

#[derive(Serialize)]
struct PlanOutput {
    start: [i32; 2],
    goal: [i32; 2],
    mode: PlanMode,
    /// Prototype indices, one per decomposed move.
    labels: Vec<usize>,
    /// Environment action index for each label.
    actions: Vec<usize>,
    action_names: Vec<String>,
    residual_norm: f64,
    converged: bool,
    executed: bool,
    reached_goal: bool,
    /// Euclidean distance between the latent prediction and the goal encoding.
    prediction_error: Option<f64>,
}

pub fn cmd_plan(args: PlanArgs) -> Result<()> {
    let trainer = Trainer::from_checkpoint(&args.ckpt)?;
    let grid = &trainer.grid;
    let start_cell = parse_cell(&args.start)?;
    let goal_cell = parse_cell(&args.goal)?;
    let start = agent_state(grid, start_cell, "start")?;
    let goal = agent_state(grid, goal_cell, "goal")?;

    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
    let records = collect_variations(
        &trainer.model,
        grid,
        trainer.cfg.obs_mode,
        args.variations,
        1,
        trainer.cfg.permissible_only,
        &mut rng,
    )?;
    let prototypes = extract_prototypes(&records, 2)?;

    let h_start = encode_state(&trainer.model, grid, trainer.cfg.obs_mode, &start)?;
    let h_goal = encode_state(&trainer.model, grid, trainer.cfg.obs_mode, &goal)?;
    let decomposition = decompose(&h_start, &h_goal, &prototypes, args.max_steps)?;

    let actions: Vec<usize> = decomposition
        .labels
        .iter()
        .map(|&l| prototypes.prototypes[l].action)
        .collect();
    let outcome = execute_multiset(grid, &start, &actions, |s| s.agent == Some(goal_cell))?;
    let prediction_error = prediction_error(
        &trainer,
        args.mode,
        &h_start,
        &h_goal,
        &decomposition.labels,
        &prototypes,
    )?;

    let output = PlanOutput {
        start: [start_cell.x, start_cell.y],
        goal: [goal_cell.x, goal_cell.y],
        mode: args.mode,
        labels: decomposition.labels.clone(),
        action_names: actions
            .iter()
            .map(|&a| grid.actions[a].name.clone())
            .collect(),
        actions,
        residual_norm: decomposition.residual_norm,
        converged: decomposition.converged,
        executed: outcome.is_some(),
        reached_goal: outcome.is_some(),
        prediction_error,
    };
    let json = serde_json::to_string_pretty(&output)?;
    match &args.out {
        Some(path) => ppm::write_atomic(path, json.as_bytes())?,
        None => println!("{json}"),
    }
    Ok(())
}

fn prediction_error(
    trainer: &Trainer,
    mode: PlanMode,
    h_start: &Tensor,
    h_goal: &Tensor,
    labels: &[usize],
    prototypes: &FactorPrototypeSet,
) -> Result<Option<f64>> {
    let mut h = h_start.clone();
    for &l in labels {
        let dh = &prototypes.prototypes[l].dh;
        h = match mode {
            PlanMode::Additive => crate::planner::predict_additive(&h, dh),
            PlanMode::Learned => {
                if trainer.model.cfg.is_discrete() {
                    return Ok(None);
                }
                crate::planner::predict_learned(&trainer.model, &h, &Tensor::vector(dh.clone()))?
            }
        };
    }
    let err = h
        .data()
        .iter()
        .zip(h_goal.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(Some(err))
}

/// Map an arbitrary [C, H, W] tensor to RGB: pass 3-channel data through,
/// otherwise replicate the channel mean.
fn to_rgb(t: &Tensor) -> Result<Tensor> {
    if t.rank() != 3 {
        return Err(IcfError::Dimension(format!(
            "image export expects rank 3, got {:?}",
            t.shape()
        )));
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if c == 3 {
        return Ok(t.clone());
    }
    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let mean: f64 =
                (0..c).map(|ch| t.data()[(ch * h + y) * w + x]).sum::<f64>() / c as f64;
            for ch in 0..3 {
                out.data_mut()[(ch * h + y) * w + x] = mean;
            }
        }
    }
    Ok(out)
}

pub fn cmd_render(args: RenderArgs) -> Result<()> {
    let trainer = Trainer::from_checkpoint(&args.ckpt)?;
    let grid = &trainer.grid;
    let cell = parse_cell(&args.state)?;
    let state = agent_state(grid, cell, "state")?;
    std::fs::create_dir_all(&args.out)?;

    let obs = observe(grid, &state, trainer.cfg.obs_mode);
    ppm::write(&args.out.join("observation.ppm"), &to_rgb(&obs.data)?)?;

    let h = encode_value(&trainer.model, &obs)?;
    let recon = crate::models::decode_value(&trainer.model, &h)?;
    let shaped = recon.reshaped(obs.data.shape().to_vec())?;
    ppm::write(&args.out.join("reconstruction.ppm"), &to_rgb(&shaped)?)?;
    Ok(())
}

/// Exit code for an error per the CLI contract.
pub fn exit_code(err: &IcfError) -> i32 {
    match err {
        IcfError::NumericalAbort { .. } => 2,
        _ => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_parsing() {
        assert_eq!(parse_cell("3,4").unwrap(), Cell::new(3, 4));
        assert_eq!(parse_cell(" 0 , 7 ").unwrap(), Cell::new(0, 7));
        assert!(parse_cell("3").is_err());
        assert!(parse_cell("a,b").is_err());
    }

    #[test]
    fn blocked_goal_rejected() {
        let grid = crate::env::preset("mazebase-small", false).unwrap();
        let err = agent_state(&grid, Cell::new(4, 3), "goal").unwrap_err();
        assert!(err.to_string().contains("goal"));
        assert!(agent_state(&grid, Cell::new(0, 0), "goal").is_ok());
    }

    #[test]
    fn exit_codes_follow_contract() {
        assert_eq!(
            exit_code(&IcfError::NumericalAbort {
                step: 3,
                detail: "x".into()
            }),
            2
        );
        assert_eq!(exit_code(&IcfError::Config("bad".into())), 1);
    }

    #[test]
    fn rgb_passthrough_and_grayscale() {
        let img = Tensor::zeros(&[3, 2, 2]);
        assert_eq!(to_rgb(&img).unwrap().shape(), &[3, 2, 2]);
        let mut sym = Tensor::zeros(&[4, 2, 2]);
        sym.data_mut()[0] = 1.0;
        let rgb = to_rgb(&sym).unwrap();
        assert_eq!(rgb.shape(), &[3, 2, 2]);
        assert!((rgb.data()[0] - 0.25).abs() < 1e-12);
        assert_eq!(rgb.data()[0], rgb.data()[4]);
    }
}
