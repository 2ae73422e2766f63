//! Concrete glimpse environments: Circle-Square (classification on a gradient
//! background), GlimpseCount (star counting among distractors), and
//! GlimpsePose (wrench pose regression), sharing one stepping core.

pub mod kernels;
pub mod scenes;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::action_regularizer;
use crate::pomdp::{
    EnvError, GlimpseEnv, GlimpseObservation, SceneSummary, StepResult, TaskKind, TaskLabel,
};
use kernels::{action_to_displacement, bilinear_glimpse, GlimpseWindow};
use scenes::{evolve_scene, Scene, SceneExport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    CircleSquare,
    GlimpseCount,
    GlimpsePose,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [
        EnvKind::CircleSquare,
        EnvKind::GlimpseCount,
        EnvKind::GlimpsePose,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EnvKind::CircleSquare => "circle-square",
            EnvKind::GlimpseCount => "glimpse-count",
            EnvKind::GlimpsePose => "glimpse-pose",
        }
    }

    pub fn parse(s: &str) -> Option<EnvKind> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Static parameters of one environment.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub canvas_size: usize,
    pub glimpse_size: usize,
    pub budget: usize,
    /// Pixels of motion per unit of control (20% of the canvas side).
    pub action_scale_px: f64,
    /// Whether observations carry the normalized glimpse center.
    pub position_scalars: bool,
    pub jitter_sigma_pos: f64,
    pub jitter_sigma_rot: f64,
    /// Coefficient of the `‖a‖²` reward term.
    pub action_reg_coeff: f64,
}

impl EnvConfig {
    pub fn circle_square() -> Self {
        Self {
            kind: EnvKind::CircleSquare,
            canvas_size: scenes::CIRCLE_SQUARE_CANVAS,
            glimpse_size: 5,
            budget: 16,
            action_scale_px: 5.6,
            position_scalars: false,
            jitter_sigma_pos: 0.0,
            jitter_sigma_rot: 0.0,
            action_reg_coeff: -1e-3,
        }
    }

    pub fn glimpse_count() -> Self {
        Self {
            kind: EnvKind::GlimpseCount,
            canvas_size: scenes::COUNT_CANVAS,
            glimpse_size: 9,
            budget: 32,
            action_scale_px: 12.8,
            position_scalars: true,
            jitter_sigma_pos: 0.5,
            jitter_sigma_rot: 0.01,
            action_reg_coeff: -1e-3,
        }
    }

    pub fn glimpse_pose() -> Self {
        Self {
            kind: EnvKind::GlimpsePose,
            canvas_size: scenes::POSE_CANVAS,
            glimpse_size: 9,
            budget: 64,
            action_scale_px: 19.2,
            position_scalars: true,
            jitter_sigma_pos: 0.5,
            jitter_sigma_rot: 0.01,
            action_reg_coeff: -1e-3,
        }
    }

    pub fn for_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::CircleSquare => Self::circle_square(),
            EnvKind::GlimpseCount => Self::glimpse_count(),
            EnvKind::GlimpsePose => Self::glimpse_pose(),
        }
    }

    pub fn task(&self) -> TaskKind {
        match self.kind {
            EnvKind::CircleSquare => TaskKind::Classify { classes: 2 },
            EnvKind::GlimpseCount => TaskKind::Classify { classes: 3 },
            EnvKind::GlimpsePose => TaskKind::Pose,
        }
    }

    fn has_gradient_background(&self) -> bool {
        self.kind == EnvKind::CircleSquare
    }
}

struct EpisodeState {
    scene: Scene,
    window: GlimpseWindow,
    steps_taken: usize,
    finished: bool,
    rng: ChaCha8Rng,
}

/// One environment instance. Instances are independent; a single instance is
/// stepped sequentially.
pub struct GlimpseEnvironment {
    config: EnvConfig,
    state: Option<EpisodeState>,
}

impl GlimpseEnvironment {
    pub fn new(config: EnvConfig) -> Self {
        Self {
            config,
            state: None,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    fn observe(&self, state: &EpisodeState) -> GlimpseObservation {
        let patch = bilinear_glimpse(&state.scene.canvas, state.window);
        let scalars = if self.config.position_scalars {
            let c = (self.config.canvas_size as f64 - 1.0) / 2.0;
            vec![
                (state.window.center.1 - c) / c,
                (state.window.center.0 - c) / c,
            ]
        } else {
            Vec::new()
        };
        GlimpseObservation { patch, scalars }
    }

    fn generate_scene(&self, rng: &mut ChaCha8Rng) -> Scene {
        match self.config.kind {
            EnvKind::CircleSquare => scenes::circle_square_render(rng),
            EnvKind::GlimpseCount => scenes::glimpse_count_generate(rng),
            EnvKind::GlimpsePose => scenes::glimpse_pose_generate(rng),
        }
    }

    /// Serializable scene description for export.
    pub fn scene_export(&self) -> Option<SceneExport> {
        self.state.as_ref().map(|s| SceneExport {
            canvas_size: self.config.canvas_size,
            objects: s.scene.objects.clone(),
            label: s.scene.label,
        })
    }
}

impl GlimpseEnv for GlimpseEnvironment {
    fn reset(&mut self, seed: u64) -> (GlimpseObservation, SceneSummary) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = self.generate_scene(&mut rng);
        let n = self.config.canvas_size as f64;
        let half = (self.config.glimpse_size as f64 - 1.0) / 2.0;
        let window = GlimpseWindow {
            center: (
                rng.random_range(half..=(n - 1.0 - half)),
                rng.random_range(half..=(n - 1.0 - half)),
            ),
            size: self.config.glimpse_size,
        };
        let state = EpisodeState {
            scene,
            window,
            steps_taken: 0,
            finished: false,
            rng,
        };
        let obs = self.observe(&state);
        let summary = state.scene.summary();
        self.state = Some(state);
        (obs, summary)
    }

    fn step(&mut self, control: [f64; 2]) -> Result<StepResult, EnvError> {
        let state = self.state.as_mut().ok_or(EnvError::NotReset)?;
        if state.finished {
            return Err(EnvError::EpisodeOver);
        }
        if control.iter().any(|c| !c.is_finite()) {
            return Err(EnvError::BadAction(format!("non-finite control {control:?}")));
        }
        if control.iter().any(|c| c.abs() > 1.0) {
            return Err(EnvError::BadAction(format!(
                "control {control:?} outside [-1, 1]"
            )));
        }

        // The label the concurrent prediction is scored against: the scene
        // as it stood when the action was chosen.
        let ground_truth = state.scene.label;

        evolve_scene(
            &mut state.scene,
            self.config.canvas_size,
            self.config.jitter_sigma_pos,
            self.config.jitter_sigma_rot,
            self.config.has_gradient_background(),
            &mut state.rng,
        );

        let [dx, dy] = action_to_displacement(control, self.config.action_scale_px);
        state.window.center.0 += dy;
        state.window.center.1 += dx;
        state.window = state.window.clamped(self.config.canvas_size);

        state.steps_taken += 1;
        let done = state.steps_taken >= self.config.budget;
        state.finished = done;

        let env_reward = action_regularizer(control, self.config.action_reg_coeff);
        let state = self.state.as_ref().unwrap();
        Ok(StepResult {
            obs: self.observe(state),
            env_reward,
            done,
            ground_truth,
        })
    }

    fn budget(&self) -> usize {
        self.config.budget
    }

    fn glimpse_size(&self) -> usize {
        self.config.glimpse_size
    }

    fn scalar_dim(&self) -> usize {
        if self.config.position_scalars {
            2
        } else {
            0
        }
    }

    fn task(&self) -> TaskKind {
        self.config.task()
    }

    fn window_center(&self) -> Option<(f64, f64)> {
        self.state.as_ref().map(|s| s.window.center)
    }

    fn canvas(&self) -> Option<&Array2<f64>> {
        self.state.as_ref().map(|s| &s.scene.canvas)
    }

    fn current_label(&self) -> Option<TaskLabel> {
        self.state.as_ref().map(|s| s.scene.label)
    }
}

/// Write a grayscale image as a plain-text PGM (values scaled to 0-255).
pub fn write_pgm<W: std::io::Write>(canvas: &Array2<f64>, mut out: W) -> std::io::Result<()> {
    let (h, w) = canvas.dim();
    writeln!(out, "P2\n{w} {h}\n255")?;
    for i in 0..h {
        let row: Vec<String> = (0..w)
            .map(|j| format!("{}", (canvas[[i, j]].clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}
