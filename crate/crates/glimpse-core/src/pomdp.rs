//! The active-perception POMDP contract: observation/action/trajectory types,
//! the environment trait, rollout collection, and episode recording.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("environment stepped before reset")]
    NotReset,
    #[error("bad action: {0}")]
    BadAction(String),
    #[error("episode already finished; call reset")]
    EpisodeOver,
    #[error("recording i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("recording format: {0}")]
    Format(String),
}

/// One timestep's sensory input: a small grayscale patch plus optional
/// normalized scalar state (e.g. the glimpse center).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlimpseObservation {
    /// Patch intensities in `[0, 1]`, square, side length fixed per env.
    pub patch: Array2<f64>,
    /// Normalized state values in `[-1, 1]`; length fixed per env (may be 0).
    pub scalars: Vec<f64>,
}

/// What the agent must predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Classify { classes: usize },
    Pose,
}

impl TaskKind {
    /// Dimension of the prediction vector: logits for classification,
    /// `(x, y, sin θ, cos θ)` for pose.
    pub fn prediction_dim(&self) -> usize {
        match self {
            TaskKind::Classify { classes } => *classes,
            TaskKind::Pose => 4,
        }
    }
}

/// Ground truth for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TaskLabel {
    Class(usize),
    /// Position normalized to `[-1, 1]` about the canvas center; angle in
    /// `(-π, π]`.
    Pose { x: f64, y: f64, theta: f64 },
}

/// Composite action: a movement control in `[-1, 1]²` and the current
/// prediction of the task property.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentAction {
    pub control: [f64; 2],
    /// Logits (classification) or `(x, y, sin θ, cos θ)` (pose).
    pub prediction: Vec<f64>,
}

impl AgentAction {
    pub fn validate(&self, task: TaskKind) -> Result<(), EnvError> {
        if self.prediction.len() != task.prediction_dim() {
            return Err(EnvError::BadAction(format!(
                "prediction dim {} does not match task dim {}",
                self.prediction.len(),
                task.prediction_dim()
            )));
        }
        Ok(())
    }
}

/// Result of one environment step. `ground_truth` is the label of the scene
/// state at which the control was applied (pre-transition), so it pairs with
/// the prediction the agent emitted alongside that control.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub obs: GlimpseObservation,
    pub env_reward: f64,
    pub done: bool,
    pub ground_truth: TaskLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Star,
    Wrench,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub kind: ShapeKind,
    /// Center in pixel coordinates `(row, col)`.
    pub center: (f64, f64),
    pub orientation: f64,
    /// Characteristic size in pixels (radius or half-side).
    pub size: f64,
}

/// Lightweight description of the hidden scene returned by `reset` for
/// inspection and export. The canvas itself stays inside the environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub objects: Vec<ObjectSpec>,
    pub label: TaskLabel,
}

/// Ordered per-episode record.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Length `T + 1`.
    pub observations: Vec<GlimpseObservation>,
    /// Length `T`.
    pub actions: Vec<AgentAction>,
    /// Length `T`.
    pub env_rewards: Vec<f64>,
    /// Length `T`; label at the time each action/prediction was made.
    pub labels: Vec<TaskLabel>,
    /// Index of the step at which `done` fired.
    pub done_at: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        let t = self.actions.len();
        if self.observations.len() != t + 1 {
            return Err(format!(
                "observations {} != actions {} + 1",
                self.observations.len(),
                t
            ));
        }
        if self.env_rewards.len() != t || self.labels.len() != t {
            return Err("rewards/labels length mismatch".into());
        }
        if t > 0 && self.done_at != t - 1 {
            return Err(format!("done_at {} != {} (last step)", self.done_at, t - 1));
        }
        Ok(())
    }
}

/// The environment contract. A single instance is stepped sequentially;
/// distinct instances are independent and may run in parallel.
pub trait GlimpseEnv {
    /// Start a new episode. Identical seeds yield bit-identical observations
    /// and hidden scenes.
    fn reset(&mut self, seed: u64) -> (GlimpseObservation, SceneSummary);

    /// Apply a movement control. Errors if called before `reset`, after the
    /// episode finished, or with non-finite / out-of-range components.
    fn step(&mut self, control: [f64; 2]) -> Result<StepResult, EnvError>;

    /// Fixed number of steps per episode.
    fn budget(&self) -> usize;

    /// Side length of the observation patch.
    fn glimpse_size(&self) -> usize;

    /// Number of scalar state values per observation.
    fn scalar_dim(&self) -> usize;

    fn task(&self) -> TaskKind;

    /// Current glimpse center in pixel coordinates, if reset.
    fn window_center(&self) -> Option<(f64, f64)>;

    /// Current canvas, if reset (for export and debugging).
    fn canvas(&self) -> Option<&Array2<f64>>;

    /// Label of the current scene state, if reset.
    fn current_label(&self) -> Option<TaskLabel>;
}

/// Roll out one full episode. The actor sees the observation history only,
/// never the hidden scene or labels.
pub fn episode_rollout<E, A>(env: &mut E, mut actor: A, seed: u64) -> Result<Trajectory, EnvError>
where
    E: GlimpseEnv + ?Sized,
    A: FnMut(&[GlimpseObservation]) -> AgentAction,
{
    let (obs0, _) = env.reset(seed);
    let mut observations = vec![obs0];
    let mut actions = Vec::new();
    let mut env_rewards = Vec::new();
    let mut labels = Vec::new();
    let done_at;

    loop {
        let action = actor(&observations);
        action.validate(env.task())?;
        let result = env.step(action.control)?;
        env_rewards.push(result.env_reward);
        labels.push(result.ground_truth);
        actions.push(action);
        observations.push(result.obs);
        if result.done {
            done_at = actions.len() - 1;
            break;
        }
    }

    Ok(Trajectory {
        observations,
        actions,
        env_rewards,
        labels,
        done_at,
    })
}

const RECORD_FORMAT: &str = "glimpse-episode";
const RECORD_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    format: String,
    version: u32,
    steps: usize,
}

#[derive(Serialize, Deserialize)]
struct StepRecord {
    step: usize,
    observation: GlimpseObservation,
    action: AgentAction,
    env_reward: f64,
    label: TaskLabel,
}

#[derive(Serialize, Deserialize)]
struct FinalRecord {
    final_observation: GlimpseObservation,
}

/// Write an episode as versioned JSON lines: a header, one record per step,
/// and the final observation.
pub fn record_episode<W: Write>(trajectory: &Trajectory, mut out: W) -> Result<(), EnvError> {
    let header = RecordHeader {
        format: RECORD_FORMAT.into(),
        version: RECORD_VERSION,
        steps: trajectory.len(),
    };
    serde_json::to_writer(&mut out, &header).map_err(|e| EnvError::Format(e.to_string()))?;
    out.write_all(b"\n")?;
    for t in 0..trajectory.len() {
        let rec = StepRecord {
            step: t,
            observation: trajectory.observations[t].clone(),
            action: trajectory.actions[t].clone(),
            env_reward: trajectory.env_rewards[t],
            label: trajectory.labels[t],
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| EnvError::Format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    let fin = FinalRecord {
        final_observation: trajectory.observations[trajectory.len()].clone(),
    };
    serde_json::to_writer(&mut out, &fin).map_err(|e| EnvError::Format(e.to_string()))?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Read an episode previously written by [`record_episode`].
pub fn read_episode<R: BufRead>(input: R) -> Result<Trajectory, EnvError> {
    let mut lines = input.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| EnvError::Format("empty recording".into()))??;
    let header: RecordHeader =
        serde_json::from_str(&header_line).map_err(|e| EnvError::Format(e.to_string()))?;
    if header.format != RECORD_FORMAT {
        return Err(EnvError::Format(format!("unknown format {}", header.format)));
    }
    if header.version != RECORD_VERSION {
        return Err(EnvError::Format(format!(
            "unsupported version {}",
            header.version
        )));
    }

    let mut observations = Vec::with_capacity(header.steps + 1);
    let mut actions = Vec::with_capacity(header.steps);
    let mut env_rewards = Vec::with_capacity(header.steps);
    let mut labels = Vec::with_capacity(header.steps);
    for _ in 0..header.steps {
        let line = lines
            .next()
            .ok_or_else(|| EnvError::Format("truncated recording".into()))??;
        let rec: StepRecord =
            serde_json::from_str(&line).map_err(|e| EnvError::Format(e.to_string()))?;
        observations.push(rec.observation);
        actions.push(rec.action);
        env_rewards.push(rec.env_reward);
        labels.push(rec.label);
    }
    let line = lines
        .next()
        .ok_or_else(|| EnvError::Format("missing final observation".into()))??;
    let fin: FinalRecord =
        serde_json::from_str(&line).map_err(|e| EnvError::Format(e.to_string()))?;
    observations.push(fin.final_observation);

    let done_at = actions.len().saturating_sub(1);
    let traj = Trajectory {
        observations,
        actions,
        env_rewards,
        labels,
        done_at,
    };
    traj.check_invariants().map_err(EnvError::Format)?;
    Ok(traj)
}
