//! Composite loss of the toy detector, gradient descent and the
//! finite-difference gradient check.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{backward, OutputGrads, ParamBlock, ParamBlocks, ToyModel, FLAT_OUTPUTS};
use super::scene::SyntheticScene;
use super::ToyError;
use crate::datamodel::{ArtifactClass, FrameRecord, Label, LabelMode};
use crate::geometry::BBox;
use crate::loss::{assign_anchors, focal_loss_logit, smooth_l1, Assignment, LossConfig};

/// One training image with its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub grid: Vec<f64>,
    pub side: usize,
    pub polyps: Vec<BBox>,
    pub artifacts: Vec<(BBox, ArtifactClass)>,
}

impl TrainingExample {
    pub fn from_scene(s: &SyntheticScene) -> Self {
        Self {
            grid: s.grid.clone(),
            side: s.size,
            polyps: s.gt_polyps.clone(),
            artifacts: s.gt_artifacts.clone(),
        }
    }

    /// Pixels from `grid`, polyp targets from the frame's ground truth and
    /// artifact targets from its (pseudo-)labels. Instrument boxes are
    /// skipped.
    pub fn from_frame(grid: Vec<f64>, side: usize, frame: &FrameRecord) -> Self {
        let artifacts = frame
            .artifacts
            .iter()
            .filter_map(|d| d.artifact_class().filter(|c| c.is_analyzed()).map(|c| (d.bbox, c)))
            .collect();
        Self {
            grid,
            side,
            polyps: frame.gt_polyps.clone(),
            artifacts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: LabelMode,
    /// Also regress artifact boxes through the shared regression head.
    pub regress_artifacts: bool,
}

impl TrainConfig {
    pub fn new(mode: LabelMode) -> Self {
        Self {
            loss: LossConfig::default(),
            steps: 500,
            learning_rate: 0.1,
            batch_size: 8,
            seed: 0,
            mode,
            regress_artifacts: true,
        }
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        self.loss.validate()?;
        if self.steps == 0 {
            return Err(ToyError::Config("steps must be at least 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(ToyError::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(ToyError::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Unweighted loss components, averaged over the batch, and the weighted
/// total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub polyp: f64,
    pub artifact: f64,
    pub regression: f64,
    /// Sum of squared parameters.
    pub regularizer: f64,
    pub total: f64,
}

fn flat_label(k: usize) -> Label {
    if k == 0 {
        Label::Polyp
    } else {
        Label::Artifact(ArtifactClass::from_code((k - 1) as u8).expect("flat index below 7"))
    }
}

/// Weighted focal sum over anchors for a head with `k` outputs per anchor.
/// `column_weight(j)` scales output column `j`; `split(j)` routes it to the
/// polyp (true) or artifact (false) term.
#[allow(clippy::too_many_arguments)]
fn classification(
    logits: &[f64],
    grads: &mut [f64],
    k: usize,
    assignments: &[Assignment],
    cfg: &LossConfig,
    column_weight: &dyn Fn(usize) -> f64,
    split: &dyn Fn(usize) -> bool,
    scale_pol: f64,
    scale_art: f64,
) -> (f64, f64) {
    let n_fg = assignments
        .iter()
        .filter(|a| matches!(a, Assignment::Foreground { .. }))
        .count()
        .max(1) as f64;
    let (mut pol, mut art) = (0.0, 0.0);
    for (a, asg) in assignments.iter().enumerate() {
        let target = match asg {
            Assignment::Ignored => continue,
            Assignment::Background => None,
            Assignment::Foreground { class, .. } => Some(*class),
        };
        for j in 0..k {
            let w = column_weight(j);
            if w == 0.0 {
                continue;
            }
            let (l, dz) = focal_loss_logit(logits[a * k + j], target == Some(j), cfg.focal);
            let to_polyp = split(j);
            if to_polyp {
                pol += w * l / n_fg;
                grads[a * k + j] += scale_pol * w * dz / n_fg;
            } else {
                art += w * l / n_fg;
                grads[a * k + j] += scale_art * w * dz / n_fg;
            }
        }
    }
    (pol, art)
}

fn example_loss(
    m: &ToyModel,
    anchors: &[BBox],
    ex: &TrainingExample,
    cfg: &LossConfig,
    regress_artifacts: bool,
    scale: f64,
) -> Result<(LossBreakdown, ParamBlocks), ToyError> {
    let fwd = m.forward(&ex.grid, ex.side)?;
    let mut d = OutputGrads::zeros_like(&fwd);
    let w = cfg.task_weights;
    let mut parts = LossBreakdown::default();

    let polyp_gts: Vec<(BBox, usize)> = ex.polyps.iter().map(|b| (*b, 0)).collect();
    let art_gts: Vec<(BBox, usize)> =
        ex.artifacts.iter().map(|(b, c)| (*b, c.code() as usize)).collect();
    let polyp_t = assign_anchors(anchors, &polyp_gts);
    let art_t = assign_anchors(anchors, &art_gts);

    match m.arch.mode {
        LabelMode::TwoHead => {
            let (p, _) = classification(
                &fwd.polyp_logits,
                &mut d.polyp_logits,
                1,
                &polyp_t.assignments,
                cfg,
                &|_| 1.0,
                &|_| true,
                scale * w.pol,
                0.0,
            );
            let (_, a) = classification(
                &fwd.artifact_logits,
                &mut d.artifact_logits,
                m.arch.artifact_outputs(),
                &art_t.assignments,
                cfg,
                &|_| 1.0,
                &|_| false,
                0.0,
                scale * w.art,
            );
            parts.polyp = p;
            parts.artifact = a;
        }
        LabelMode::FlatMultiClass => {
            let mut gts = polyp_gts.clone();
            gts.extend(art_gts.iter().map(|(b, c)| (*b, c + 1)));
            let flat_t = assign_anchors(anchors, &gts);
            let weight = |j: usize| match &cfg.class_weights {
                None => 1.0,
                Some(cw) => cw.get(flat_label(j)).unwrap_or(0.0),
            };
            let (p, a) = classification(
                &fwd.polyp_logits,
                &mut d.polyp_logits,
                FLAT_OUTPUTS,
                &flat_t.assignments,
                cfg,
                &weight,
                &|j| j == 0,
                scale * w.pol,
                scale * w.art,
            );
            parts.polyp = p;
            parts.artifact = a;
        }
    }

    let mut targets: Vec<(usize, [f64; 4])> = Vec::new();
    let mut push = |offsets: &[Option<[f64; 4]>]| {
        for (a, t) in offsets.iter().enumerate() {
            if let Some(t) = t {
                targets.push((a, *t));
            }
        }
    };
    push(&polyp_t.offsets);
    if regress_artifacts {
        push(&art_t.offsets);
    }
    let n_reg = targets.len().max(1) as f64;
    for (a, t) in targets {
        for (i, ti) in t.iter().enumerate() {
            let (l, dr) = smooth_l1(fwd.offsets[a * 4 + i] - ti);
            parts.regression += l / n_reg;
            d.offsets[a * 4 + i] += scale * w.reg * dr / n_reg;
        }
    }

    Ok((parts, backward(m, &fwd, &d)))
}

/// Batch-averaged composite loss and its gradient with respect to every
/// parameter. The regularizer is added once.
pub fn loss_and_grad(
    m: &ToyModel,
    batch: &[TrainingExample],
    cfg: &LossConfig,
    regress_artifacts: bool,
) -> Result<(LossBreakdown, ParamBlocks), ToyError> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(ToyError::Config("empty batch".into()));
    }
    let anchors = m.arch.anchors();
    let scale = 1.0 / batch.len() as f64;
    let mut total = LossBreakdown::default();
    let mut grad = ParamBlocks::zeros_for(&m.arch);
    for ex in batch {
        let (parts, g) = example_loss(m, &anchors, ex, cfg, regress_artifacts, scale)?;
        total.polyp += scale * parts.polyp;
        total.artifact += scale * parts.artifact;
        total.regression += scale * parts.regression;
        grad.add_scaled(&g, 1.0);
    }
    total.regularizer = m.params.squared_norm();
    if cfg.reg_coeff > 0.0 {
        grad.add_scaled(&m.params, 2.0 * cfg.reg_coeff);
    }
    let w = cfg.task_weights;
    total.total = w.pol * total.polyp
        + w.art * total.artifact
        + w.reg * total.regression
        + cfg.reg_coeff * total.regularizer;
    Ok((total, grad))
}

/// True when the polyp loss leaves the artifact head untouched and the
/// artifact loss leaves the polyp head untouched (exactly zero gradients).
pub fn head_isolation(
    m: &ToyModel,
    batch: &[TrainingExample],
    cfg: &LossConfig,
) -> Result<bool, ToyError> {
    let only = |pol: f64, art: f64| {
        let mut c = cfg.clone();
        c.task_weights.pol = pol;
        c.task_weights.art = art;
        c.task_weights.reg = 0.0;
        c.reg_coeff = 0.0;
        c
    };
    let (_, g_pol) = loss_and_grad(m, batch, &only(1.0, 0.0), false)?;
    let (_, g_art) = loss_and_grad(m, batch, &only(0.0, 1.0), false)?;
    let zero = |v: &[f64]| v.iter().all(|x| *x == 0.0);
    Ok(zero(&g_pol.artifact) && zero(&g_pol.regression) && zero(&g_art.regression) && {
        match m.arch.mode {
            LabelMode::TwoHead => zero(&g_art.polyp),
            // the flat head serves both tasks
            LabelMode::FlatMultiClass => true,
        }
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyModel,
    /// Batch loss before each step.
    pub trace: Vec<f64>,
    /// Full-data composite loss before training.
    pub initial_loss: f64,
    /// Full-data composite loss after training.
    pub final_loss: f64,
}

/// Passed to the observer of [`train_observed`] before each update.
pub struct StepInfo<'a> {
    pub step: usize,
    pub model: &'a ToyModel,
    pub batch: &'a [TrainingExample],
    pub loss: LossBreakdown,
    pub grad: &'a ParamBlocks,
}

pub fn train(
    m: ToyModel,
    data: &[TrainingExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ToyError> {
    train_observed(m, data, cfg, |_| {})
}

/// Plain gradient descent on shuffled minibatches. Shuffling is seeded, so
/// equal inputs give bitwise-equal outcomes.
pub fn train_observed(
    mut m: ToyModel,
    data: &[TrainingExample],
    cfg: &TrainConfig,
    mut observe: impl FnMut(&StepInfo<'_>),
) -> Result<TrainOutcome, ToyError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ToyError::Config("no training data".into()));
    }
    if cfg.mode != m.arch.mode {
        return Err(ToyError::Config(format!(
            "train config mode {:?} does not match model mode {:?}",
            cfg.mode, m.arch.mode
        )));
    }
    let full = |m: &ToyModel| -> Result<f64, ToyError> {
        Ok(loss_and_grad(m, data, &cfg.loss, cfg.regress_artifacts)?.0.total)
    };
    let initial_loss = full(&m)?;
    if !initial_loss.is_finite() {
        return Err(ToyError::Divergence {
            step: 0,
            loss: initial_loss,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let bs = cfg.batch_size.min(data.len());
    let mut picks = Vec::with_capacity(bs);
    let mut batch = Vec::with_capacity(bs);
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        picks.clear();
        while picks.len() < bs {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picks.push(order[cursor]);
            cursor += 1;
        }
        picks.sort_unstable();
        batch.clear();
        batch.extend(picks.iter().map(|i| data[*i].clone()));
        let (loss, grad) = loss_and_grad(&m, &batch, &cfg.loss, cfg.regress_artifacts)?;
        if !loss.total.is_finite() || !grad.is_finite() {
            return Err(ToyError::Divergence {
                step,
                loss: loss.total,
            });
        }
        observe(&StepInfo {
            step,
            model: &m,
            batch: &batch,
            loss,
            grad: &grad,
        });
        trace.push(loss.total);
        m.params.add_scaled(&grad, -cfg.learning_rate);
    }

    let final_loss = full(&m)?;
    if !final_loss.is_finite() {
        return Err(ToyError::Divergence {
            step: cfg.steps,
            loss: final_loss,
        });
    }
    Ok(TrainOutcome {
        model: m,
        trace,
        initial_loss,
        final_loss,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    /// Coordinates sampled per non-empty block.
    pub per_block: usize,
    pub step: f64,
    pub seed: u64,
    /// Relative errors use `max(|analytic|, |numeric|, floor * max(1, |loss|))`
    /// as denominator, so gradients below the finite-difference resolution
    /// of the loss are compared in absolute terms.
    pub floor: f64,
    pub regress_artifacts: bool,
    /// Negate the analytic gradient of this block before comparing.
    pub corrupt: Option<ParamBlock>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            per_block: 64,
            step: 1e-6,
            seed: 0,
            floor: 2e-5,
            regress_artifacts: true,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Worst coordinate: block, index, analytic, numeric.
    pub worst: Option<(ParamBlock, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares analytic gradients with central differences on a random,
/// block-stratified subsample of coordinates.
pub fn grad_check(
    m: &ToyModel,
    batch: &[TrainingExample],
    cfg: &LossConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, ToyError> {
    let (loss, mut grad) = loss_and_grad(m, batch, cfg, opts.regress_artifacts)?;
    let floor = opts.floor * loss.total.abs().max(1.0);
    if let Some(b) = opts.corrupt {
        for g in grad.block_mut(b).iter_mut() {
            *g = -*g;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = m.clone();
    let mut report = GradCheckReport {
        coordinates: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let eval = |probe: &ToyModel| -> Result<f64, ToyError> {
        Ok(loss_and_grad(probe, batch, cfg, opts.regress_artifacts)?.0.total)
    };
    for block in ParamBlock::ALL {
        let n = m.params.block(block).len();
        if n == 0 {
            continue;
        }
        let picks: Vec<usize> = if n <= opts.per_block {
            (0..n).collect()
        } else {
            (0..opts.per_block).map(|_| rng.random_range(0..n)).collect()
        };
        for i in picks {
            let x = m.params.block(block)[i];
            probe.params.block_mut(block)[i] = x + opts.step;
            let up = eval(&probe)?;
            probe.params.block_mut(block)[i] = x - opts.step;
            let down = eval(&probe)?;
            probe.params.block_mut(block)[i] = x;
            let numeric = (up - down) / (2.0 * opts.step);
            let analytic = grad.block(block)[i];
            let denom = analytic.abs().max(numeric.abs()).max(floor);
            let rel = (analytic - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((block, i, analytic, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::super::model::Architecture;
    use super::super::scene::{generate_scenes, SceneKnobs};
    use super::*;
    use crate::loss::TaskWeights;

    fn examples(n: usize) -> Vec<TrainingExample> {
        generate_scenes(3, n, &SceneKnobs::separable())
            .unwrap()
            .iter()
            .map(TrainingExample::from_scene)
            .collect()
    }

    #[test]
    fn zero_model_probabilities_are_half() {
        let m = ToyModel::zeros(Architecture::new(LabelMode::TwoHead)).unwrap();
        let ex = &examples(1)[0];
        let f = m.forward(&ex.grid, ex.side).unwrap();
        assert_eq!(f.polyp_probs().len(), 192);
        assert_eq!(f.artifact_probs().len(), 192 * 6);
        assert!(f.polyp_probs().iter().chain(&f.artifact_probs()).all(|q| *q == 0.5));
        assert!(f.offsets.iter().all(|o| *o == 0.0));
    }

    #[test]
    fn grid_mismatch_is_shape_error() {
        let m = ToyModel::zeros(Architecture::new(LabelMode::TwoHead)).unwrap();
        assert!(matches!(m.forward(&[0.0; 32 * 32], 32), Err(ToyError::Shape(_))));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = examples(4);
        let m = ToyModel::init(Architecture::new(LabelMode::TwoHead), 0).unwrap();
        let mut cfg = TrainConfig::new(LabelMode::TwoHead);
        cfg.learning_rate = 0.0;
        cfg.steps = 3;
        cfg.batch_size = 4;
        let out = train(m.clone(), &data, &cfg).unwrap();
        assert_eq!(out.model, m);
        assert!(out.trace.iter().all(|l| *l == out.trace[0]));
    }

    #[test]
    fn bad_train_config() {
        let data = examples(1);
        let m = ToyModel::zeros(Architecture::new(LabelMode::TwoHead)).unwrap();
        let mut cfg = TrainConfig::new(LabelMode::TwoHead);
        cfg.steps = 0;
        assert!(matches!(train(m.clone(), &data, &cfg), Err(ToyError::Config(_))));
        let cfg = TrainConfig::new(LabelMode::FlatMultiClass);
        assert!(matches!(train(m.clone(), &data, &cfg), Err(ToyError::Config(_))));
        assert!(matches!(
            train(m, &[], &TrainConfig::new(LabelMode::TwoHead)),
            Err(ToyError::Config(_))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let data = examples(2);
        let m = ToyModel::init(Architecture::new(LabelMode::TwoHead), 0).unwrap();
        let mut cfg = TrainConfig::new(LabelMode::TwoHead);
        cfg.learning_rate = 1e300;
        cfg.steps = 5;
        assert!(matches!(train(m, &data, &cfg), Err(ToyError::Divergence { .. })));
    }

    #[test]
    fn zero_polyp_weight_freezes_polyp_head_without_regularizer() {
        let data = examples(2);
        let m = ToyModel::init(Architecture::new(LabelMode::TwoHead), 1).unwrap();
        let mut cfg = LossConfig {
            task_weights: TaskWeights::new(1.0, 1.0, 0.0),
            ..LossConfig::default()
        };
        let (_, g) = loss_and_grad(&m, &data, &cfg, true).unwrap();
        assert!(g.polyp.iter().all(|x| *x == 0.0));
        cfg.reg_coeff = 0.1;
        let (_, g) = loss_and_grad(&m, &data, &cfg, true).unwrap();
        for (gi, pi) in g.polyp.iter().zip(&m.params.polyp) {
            assert_eq!(*gi, 0.2 * pi);
        }
    }

    #[test]
    fn polyp_weight_scales_polyp_gradient() {
        let data = examples(2);
        let m = ToyModel::init(Architecture::new(LabelMode::TwoHead), 2).unwrap();
        let mut cfg = LossConfig::default();
        let (_, g1) = loss_and_grad(&m, &data, &cfg, true).unwrap();
        cfg.task_weights.pol = 4.0;
        let (_, g4) = loss_and_grad(&m, &data, &cfg, true).unwrap();
        for (a, b) in g1.polyp.iter().zip(&g4.polyp) {
            assert_eq!(4.0 * a, *b);
        }
        assert_eq!(g1.artifact, g4.artifact);
    }

    #[test]
    fn isolation_holds() {
        let data = examples(2);
        let m = ToyModel::init(Architecture::new(LabelMode::TwoHead), 5).unwrap();
        assert!(head_isolation(&m, &data, &LossConfig::default()).unwrap());
    }

    #[test]
    fn grad_check_zero_model_passes() {
        let data = examples(1);
        let m = ToyModel::zeros(Architecture::new(LabelMode::TwoHead)).unwrap();
        let r = grad_check(&m, &data, &LossConfig::default(), &GradCheckOptions::default()).unwrap();
        assert!(r.passed(1e-4), "{r:?}");
    }

    #[test]
    fn grad_check_flat_mode() {
        let data = examples(1);
        let m = ToyModel::init(Architecture::new(LabelMode::FlatMultiClass), 4).unwrap();
        let cfg = LossConfig {
            reg_coeff: 0.01,
            ..LossConfig::default()
        };
        let opts = GradCheckOptions {
            per_block: 40,
            ..Default::default()
        };
        let r = grad_check(&m, &data, &cfg, &opts).unwrap();
        assert!(r.passed(1e-4), "{r:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = examples(6);
        let mut cfg = TrainConfig::new(LabelMode::TwoHead);
        cfg.steps = 5;
        cfg.batch_size = 4;
        let m = ToyModel::init(Architecture::new(LabelMode::TwoHead), 9).unwrap();
        let a = train(m.clone(), &data, &cfg).unwrap();
        let b = train(m, &data, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model, b.model);
    }
}
