//! `gen-scenes`, `train-toy`, `predict-toy` and `gradcheck`.
//!
//! All four read the same key-value config file (TOML syntax, every key
//! optional):
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `seed` | 0 | model init and batch shuffling |
//! | `scene_seed` | `seed` | first scene seed |
//! | `scenes` | 32 | number of synthetic scenes |
//! | `scene_preset` | `"separable"` | `"separable"` or `"free"` placement |
//! | `mode` | `"two_head"` | `"two_head"` or `"flat_multi_class"` |
//! | `steps` | 500 | gradient steps |
//! | `learning_rate` | 0.1 | step size |
//! | `batch_size` | 8 | scenes per step |
//! | `gamma`, `alpha` | 2.5, 0.25 | focal parameters |
//! | `w_reg`, `w_art`, `w_pol` | 1, 1, 1 | task weights |
//! | `reg_coeff` | 0 | squared-norm regularizer coefficient |
//! | `polyp_share` | unset | flat mode: polyp class weight, rest split equally |
//! | `regress_artifacts` | true | regress artifact boxes too |
//! | `labels` | unset | dataset whose frames replace scene targets (matched by frame id) |
//! | `grad_samples` | 64 | gradcheck coordinates per parameter block |
//! | `grad_scenes` | 2 | gradcheck scenes |

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use polypart_core::datamodel::{class_weighting, save_dataset, LabelMode};
use polypart_core::loss::{FocalParams, LossConfig, TaskWeights};
use polypart_core::toy::{
    generate_scenes, grad_check, load_checkpoint, predict_dataset, save_checkpoint,
    scene_frame_id, scenes_to_dataset, train, Architecture, GradCheckOptions, SceneKnobs,
    SyntheticScene, ToyModel, TrainConfig, TrainingExample,
};
use polypart_core::ArtifactClass;

use crate::error::{exit, CliError, CliResult};
use crate::manifest::RunManifest;
use crate::reports::read_dataset;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub seed: u64,
    pub scene_seed: Option<u64>,
    pub scenes: usize,
    pub scene_preset: String,
    pub mode: LabelMode,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub w_reg: f64,
    pub w_art: f64,
    pub w_pol: f64,
    pub reg_coeff: f64,
    pub polyp_share: Option<f64>,
    pub regress_artifacts: bool,
    pub labels: Option<PathBuf>,
    pub grad_samples: usize,
    pub grad_scenes: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        let focal = FocalParams::default();
        Self {
            seed: 0,
            scene_seed: None,
            scenes: 32,
            scene_preset: "separable".into(),
            mode: LabelMode::TwoHead,
            steps: 500,
            learning_rate: 0.1,
            batch_size: 8,
            gamma: focal.gamma,
            alpha: focal.alpha,
            w_reg: 1.0,
            w_art: 1.0,
            w_pol: 1.0,
            reg_coeff: 0.0,
            polyp_share: None,
            regress_artifacts: true,
            labels: None,
            grad_samples: 64,
            grad_scenes: 2,
        }
    }
}

impl ToyConfig {
    pub fn load(path: &Path, m: &mut RunManifest) -> CliResult<Self> {
        m.input(path)?;
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text)
            .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        m.set("config", &cfg);
        m.seed = Some(cfg.seed);
        Ok(cfg)
    }

    fn knobs(&self) -> CliResult<SceneKnobs> {
        match self.scene_preset.as_str() {
            "separable" => Ok(SceneKnobs::separable()),
            "free" => Ok(SceneKnobs::default()),
            other => Err(CliError::input(format!(
                "unknown scene_preset '{other}' (expected separable or free)"
            ))),
        }
    }

    fn scenes(&self, count: usize) -> CliResult<Vec<SyntheticScene>> {
        if count == 0 {
            return Err(CliError::empty("scene set"));
        }
        Ok(generate_scenes(self.scene_seed.unwrap_or(self.seed), count, &self.knobs()?)?)
    }

    fn loss(&self) -> CliResult<LossConfig> {
        let focal = FocalParams::new(self.gamma, self.alpha)
            .map_err(|e| CliError::input(e.to_string()))?;
        let class_weights = match (self.mode, self.polyp_share) {
            (_, None) => None,
            (LabelMode::FlatMultiClass, share) => {
                Some(class_weighting(share, &ArtifactClass::ANALYSIS)?)
            }
            (LabelMode::TwoHead, Some(_)) => {
                return Err(CliError::input("polyp_share only applies to flat_multi_class"))
            }
        };
        let cfg = LossConfig {
            focal,
            task_weights: TaskWeights::new(self.w_reg, self.w_art, self.w_pol),
            class_weights,
            reg_coeff: self.reg_coeff,
        };
        cfg.validate().map_err(|e| CliError::input(e.to_string()))?;
        Ok(cfg)
    }

    fn train_config(&self) -> CliResult<TrainConfig> {
        let cfg = TrainConfig {
            loss: self.loss()?,
            steps: self.steps,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.seed,
            mode: self.mode,
            regress_artifacts: self.regress_artifacts,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn examples(
        &self,
        scenes: &[SyntheticScene],
        m: &mut RunManifest,
    ) -> CliResult<Vec<TrainingExample>> {
        let Some(path) = &self.labels else {
            return Ok(scenes.iter().map(TrainingExample::from_scene).collect());
        };
        let labels = read_dataset(path, m)?;
        scenes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let id = scene_frame_id(i);
                let f = labels.frame(&id).ok_or_else(|| CliError {
                    code: exit::ALIGNMENT,
                    message: format!("labels {} have no frame '{id}'", path.display()),
                })?;
                Ok(TrainingExample::from_frame(s.grid.clone(), s.size, f))
            })
            .collect()
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    pub config: PathBuf,
    /// Scene dataset output (canonical JSON).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn gen_scenes(a: &GenArgs) -> CliResult<()> {
    let mut m = RunManifest::new("gen-scenes");
    let cfg = ToyConfig::load(&a.config, &mut m)?;
    let scenes = cfg.scenes(cfg.scenes)?;
    save_dataset(&scenes_to_dataset("synthetic-scenes", &scenes), &a.out)?;
    m.output(&a.out);
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    m.write(&crate::manifest::sidecar(&a.out))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub config: PathBuf,
    /// Directory for checkpoint.json, trace.csv and manifest.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

pub fn train_toy(a: &TrainArgs) -> CliResult<()> {
    let mut m = RunManifest::new("train-toy");
    let cfg = ToyConfig::load(&a.config, &mut m)?;
    let tcfg = cfg.train_config()?;
    let scenes = cfg.scenes(cfg.scenes)?;
    let data = cfg.examples(&scenes, &mut m)?;
    let model = match &a.init {
        Some(p) => {
            m.input(p)?;
            load_checkpoint(p)?
        }
        None => ToyModel::init(Architecture::new(cfg.mode), cfg.seed)?,
    };
    let out = train(model, &data, &tcfg)?;

    std::fs::create_dir_all(&a.out_dir)?;
    let ck = a.out_dir.join("checkpoint.json");
    let trace = a.out_dir.join("trace.csv");
    save_checkpoint(&out.model, &ck)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in out.trace.iter().enumerate() {
        csv += &format!("{i},{l:.9}\n");
    }
    std::fs::write(&trace, csv)?;
    m.output(&ck).output(&trace);
    m.set("initial_loss", out.initial_loss)
        .set("final_loss", out.final_loss);
    println!(
        "initial_loss,final_loss,ratio\n{:.6},{:.6},{:.6}",
        out.initial_loss,
        out.final_loss,
        out.final_loss / out.initial_loss
    );
    m.write(&a.out_dir.join("manifest.json"))
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub score_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    pub nms_iou: f64,
    /// Prediction dataset output (canonical JSON).
    #[arg(long)]
    pub out: PathBuf,
}

pub fn predict_toy(a: &PredictArgs) -> CliResult<()> {
    let mut m = RunManifest::new("predict-toy");
    let cfg = ToyConfig::load(&a.config, &mut m)?;
    m.input(&a.checkpoint)?;
    m.set("score_threshold", a.score_threshold)
        .set("nms_iou", a.nms_iou);
    let model = load_checkpoint(&a.checkpoint)?;
    let scenes = cfg.scenes(cfg.scenes)?;
    let d = predict_dataset(&model, "toy-predictions", &scenes, a.score_threshold, a.nms_iou)?;
    save_dataset(&d, &a.out)?;
    m.output(&a.out);
    println!("wrote predictions for {} scenes to {}", d.len(), a.out.display());
    m.write(&crate::manifest::sidecar(&a.out))
}

#[derive(Debug, Args)]
pub struct GradArgs {
    pub config: PathBuf,
    /// Check this checkpoint instead of a fresh model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Returns whether the check passed.
pub fn gradcheck(a: &GradArgs) -> CliResult<bool> {
    let mut m = RunManifest::new("gradcheck");
    let cfg = ToyConfig::load(&a.config, &mut m)?;
    let loss = cfg.loss()?;
    let scenes = cfg.scenes(cfg.grad_scenes)?;
    let data = cfg.examples(&scenes, &mut m)?;
    let model = match &a.checkpoint {
        Some(p) => {
            m.input(p)?;
            load_checkpoint(p)?
        }
        None => ToyModel::init(Architecture::new(cfg.mode), cfg.seed)?,
    };
    let opts = GradCheckOptions {
        per_block: cfg.grad_samples,
        seed: cfg.seed,
        regress_artifacts: cfg.regress_artifacts,
        ..GradCheckOptions::default()
    };
    let r = grad_check(&model, &data, &loss, &opts)?;
    let pass = r.passed(GRAD_TOLERANCE);
    let text = format!(
        "coordinates: {}\nmax relative error: {:.3e}\ntolerance: {GRAD_TOLERANCE:e}\n{}\n",
        r.coordinates,
        r.max_rel_error,
        if pass { "PASS" } else { "FAIL" }
    );
    m.set("max_rel_error", r.max_rel_error).set("passed", pass);
    crate::emit(&text, a.out.as_deref(), &mut m)?;
    Ok(pass)
}
