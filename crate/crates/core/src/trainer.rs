//! Mean-teacher training: one iteration of reflection, mixing, guidance and
//! the weight updates, plus a session driver with logging, validation and
//! checkpointing.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{validate_config, TrainConfig};
use crate::error::{shape_err, Error, Result};
use crate::losses::{guidance_loss, seg_loss, softmax_backward, ssim_loss, total_loss, LossValues, SsimParams};
use crate::metrics::{evaluate, MetricsReport};
use crate::network::{self, ema_update, Architecture, Grads, Head, NetworkParams, Sgd};
use crate::puzzle::{self, MixLayout};
use crate::reflection::{decouple, error_map, guidance_mask, guided_regions, softmax_unreliable_mask, unreliable_mask};
use crate::sketch::{build_reflection_input, SketchParams};
use crate::types::{BinaryMask, Image, LabelMask, ProbMap};

const INIT_STREAM: u64 = 0;
const LAYOUT_STREAM: u64 = 1;
const DATA_STREAM: u64 = 2;

/// Where the unreliable-region map comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnreliableSource {
    /// Thresholded reconstruction error.
    ErrorMap,
    /// Teacher max-probability below the threshold.
    TeacherConfidence(f64),
}

/// Which parts of the pipeline one configuration runs.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineVariant {
    /// Batches carry no unlabeled image.
    pub labeled_only: bool,
    /// Student reconstruction and `l_rec`.
    pub reconstruct: bool,
    /// Guidance correction and `l_g`; `None` when removed.
    pub guidance: Option<UnreliableSource>,
    /// Merge the Canny sketch of the image into the reflection input.
    pub aux_sketch: bool,
    /// Grid sizes to draw from; empty means no mixing.
    pub grid_sizes: Vec<usize>,
}

impl PipelineVariant {
    pub fn mixing(&self) -> bool {
        !self.grid_sizes.is_empty()
    }

    pub fn name(&self) -> &'static str {
        if self.labeled_only {
            "supervised"
        } else if !self.reconstruct && self.guidance.is_none() {
            if self.mixing() {
                "mixing-only"
            } else {
                "teacher-only"
            }
        } else if matches!(self.guidance, Some(UnreliableSource::TeacherConfidence(_))) {
            "all-s1"
        } else if self.guidance.is_none() {
            "all-s2"
        } else if !self.aux_sketch {
            "all-as"
        } else if !self.mixing() {
            "no-mixing"
        } else {
            "full"
        }
    }
}

/// Resolves the ablation switches of a configuration.
pub fn ablation_mode(cfg: &TrainConfig) -> Result<PipelineVariant> {
    let cfg = validate_config(cfg.clone())?;
    let ers = !cfg.disable_ers;
    let grid_sizes = match (cfg.disable_mms, cfg.fixed_n) {
        (true, _) => Vec::new(),
        (false, Some(n)) => vec![n],
        (false, None) => cfg.n_choices.clone(),
    };
    Ok(PipelineVariant {
        labeled_only: cfg.labeled_only,
        reconstruct: ers && !cfg.disable_s1,
        guidance: match (ers, cfg.disable_s1, cfg.disable_s2) {
            (false, _, _) | (true, _, true) => None,
            (true, true, _) => Some(UnreliableSource::TeacherConfidence(cfg.s1_confidence_threshold)),
            (true, false, false) => Some(UnreliableSource::ErrorMap),
        },
        aux_sketch: !cfg.disable_aux_sketch,
        grid_sizes,
    })
}

/// One labeled pair and, unless training supervised-only, one unlabeled image.
#[derive(Debug, Clone)]
pub struct BatchPair {
    pub labeled: (Image, LabelMask),
    pub unlabeled: Option<Image>,
}

pub struct TrainState {
    pub iter: u64,
    pub student: NetworkParams,
    pub teacher: NetworkParams,
    pub optimizer: Sgd,
    pub layout_rng: ChaCha8Rng,
    pub data_rng: ChaCha8Rng,
    pub best_dice: Option<f64>,
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

impl TrainState {
    /// Fresh student from `cfg.seed`; the teacher starts as an exact copy.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let cfg = validate_config(cfg.clone())?;
        let arch = Architecture::from_config(&cfg);
        let student = NetworkParams::init(&arch, &mut stream(cfg.seed, INIT_STREAM));
        Ok(Self {
            iter: 0,
            teacher: student.clone(),
            optimizer: Sgd::new(&student, cfg.lr, cfg.momentum, cfg.weight_decay),
            student,
            layout_rng: stream(cfg.seed, LAYOUT_STREAM),
            data_rng: stream(cfg.seed, DATA_STREAM),
            best_dice: None,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = &ck.config;
        let mut optimizer = Sgd::new(&ck.student, cfg.lr, cfg.momentum, cfg.weight_decay);
        optimizer.velocity = ck.velocity.clone();
        Ok(Self {
            iter: ck.iter,
            student: ck.student.clone(),
            teacher: ck.teacher.clone(),
            optimizer,
            layout_rng: ck.layout_rng.restore()?,
            data_rng: ck.data_rng.restore()?,
            best_dice: ck.best_dice,
        })
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            config: cfg.clone(),
            iter: self.iter,
            best_dice: self.best_dice,
            layout_rng: RngState::capture(&self.layout_rng),
            data_rng: RngState::capture(&self.data_rng),
            student: self.student.clone(),
            teacher: self.teacher.clone(),
            velocity: self.optimizer.velocity.clone(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct StepOptions {
    /// Also backpropagate the loss into the teacher and report its gradient.
    pub probe_teacher_grads: bool,
}

/// Everything one iteration produced besides the state update.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub losses: LossValues,
    /// Grid size used for mixing; 1 without mixing.
    pub n: usize,
    pub pseudo_label: Option<LabelMask>,
    pub unreliable: Option<BinaryMask>,
    pub guided: Option<BinaryMask>,
    pub teacher_grads: Option<Grads>,
}

fn check_batch(batch: &BatchPair, cfg: &TrainConfig, variant: &PipelineVariant) -> Result<()> {
    let (xl, yl) = &batch.labeled;
    let s = cfg.image_size;
    if xl.height() != s || xl.width() != s || xl.channels() != cfg.in_channels {
        return Err(shape_err(format!(
            "labeled image is {}x{}x{}, config expects {s}x{s}x{}",
            xl.height(),
            xl.width(),
            xl.channels(),
            cfg.in_channels
        )));
    }
    if yl.height() != s || yl.width() != s {
        return Err(shape_err("labeled mask is not aligned with its image"));
    }
    yl.check_classes(cfg.k_fg)?;
    match (&batch.unlabeled, variant.labeled_only) {
        (Some(xu), false) if xu.same_shape(xl) => Ok(()),
        (Some(_), false) => Err(shape_err("unlabeled image is not aligned with the labeled image")),
        (None, true) => Ok(()),
        (None, false) => Err(Error::InvalidValue("batch has no unlabeled image".into())),
        (Some(_), true) => Err(Error::InvalidValue("labeled-only training got an unlabeled image".into())),
    }
}

fn divergence(iter: u64, l: &LossValues) -> Error {
    Error::Divergence {
        iter,
        message: format!(
            "non-finite loss: l_a={} l_b={} l_rec={} l_g={}",
            l.l_a, l.l_b, l.l_rec, l.l_g
        ),
    }
}

/// Gradient of the student's class probabilities, split over the two mixed
/// images, pulled back to logits.
fn logits_grad(p: &ProbMap, seg_grad: &[f64], seg_weight: f64, extra: Option<&[f64]>) -> Vec<f64> {
    let g: Vec<f64> = match extra {
        Some(e) => seg_grad.iter().zip(e).map(|(s, e)| seg_weight * s + e).collect(),
        None => seg_grad.iter().map(|s| seg_weight * s).collect(),
    };
    softmax_backward(p, &g)
}

/// Runs one training iteration and updates `state` in place.
pub fn train_step(
    state: &mut TrainState,
    batch: &BatchPair,
    cfg: &TrainConfig,
    opts: &StepOptions,
) -> Result<StepReport> {
    let variant = ablation_mode(cfg)?;
    check_batch(batch, cfg, &variant)?;
    let weights = cfg.loss_weights();
    let (xl, yl) = &batch.labeled;

    if variant.labeled_only || state.iter < cfg.warmup_iters {
        return supervised_step(state, xl, yl, cfg, opts, !variant.labeled_only);
    }
    let xu = batch.unlabeled.as_ref().expect("checked above");

    // (1) teacher pseudo-label
    let t_fwd = network::forward(&state.teacher, xu, Head::Seg)?;
    let pt = t_fwd.probs()?;
    let pseudo = network::argmax_labels(&pt);

    // (2) sketch and (3) reconstruction
    let recon = if variant.reconstruct {
        let mut sketch_cfg = cfg.clone();
        sketch_cfg.disable_aux_sketch = !variant.aux_sketch;
        let sketch = build_reflection_input(xu, &pseudo, &SketchParams::from_config(cfg), &sketch_cfg)?;
        let fwd = network::forward(&state.student, &sketch, Head::Recon)?;
        let proxy = fwd.recon_image()?;
        let loss = ssim_loss(&proxy, xu, &SsimParams::default())?;
        Some((fwd, proxy, loss))
    } else {
        None
    };

    // (4) mixing
    let layout = if variant.mixing() {
        let n = puzzle::sample_grid_size(&variant.grid_sizes, &mut state.layout_rng);
        puzzle::make_layout(cfg.image_size, cfg.image_size, n, &mut state.layout_rng)?
    } else {
        MixLayout::identity(cfg.image_size, cfg.image_size)
    };
    let (xa, xb) = puzzle::mix(xl, xu, &layout)?;
    let (ya, yb) = puzzle::mix_labels(yl, &pseudo, &layout)?;
    let (fa, fb) = rayon::join(
        || network::forward(&state.student, &xa, Head::Seg),
        || network::forward(&state.student, &xb, Head::Seg),
    );
    let (fa, fb) = (fa?, fb?);
    let (pa, pb) = (fa.probs()?, fb.probs()?);
    let (seg_a, seg_b) = (seg_loss(&pa, &ya)?, seg_loss(&pb, &yb)?);

    // (5) guidance correction
    let mut unreliable = None;
    let mut guided = None;
    let mut l_g = 0.0;
    let mut guide_grads: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut teacher_prob_grad = vec![0.0; pt.data().len()];
    if let Some(source) = variant.guidance {
        let ps = puzzle::inverse_mix(&pa, &pb, &layout)?;
        let ur = match source {
            UnreliableSource::ErrorMap => {
                let (_, proxy, _) = recon.as_ref().expect("reconstruction runs with error-map guidance");
                unreliable_mask(&error_map(proxy, xu)?)
            }
            UnreliableSource::TeacherConfidence(thr) => softmax_unreliable_mask(&pt, thr),
        };
        let (ps_ur, pt_ur) = decouple(&ps, &pt, &ur)?;
        let g = guidance_mask(&ps_ur, &pt_ur)?;
        let (pt_mc, ps_lc) = guided_regions(&ps_ur, &pt_ur, &g)?;
        let gl = guidance_loss(&ps_lc, &pt_mc)?;
        l_g = gl.value;
        // d(ps_lc)/d(ps) is the indicator of M^ur and M^g.
        let n = ps.height() * ps.width();
        let mut d_ps = gl.grad_student;
        for (i, v) in d_ps.iter_mut().enumerate() {
            let px = i % n;
            if ur.data()[px] && g.data()[px] {
                *v *= weights.beta;
            } else {
                *v = 0.0;
            }
        }
        guide_grads = Some(puzzle::inverse_mix_backward(&d_ps, ps.classes(), &layout));
        for (t, v) in teacher_prob_grad.iter_mut().zip(&gl.grad_teacher) {
            *t = weights.beta * v;
        }
        unreliable = Some(ur);
        guided = Some(g);
    }

    let l_rec = recon.as_ref().map_or(0.0, |(_, _, l)| l.value);
    let mut losses = LossValues {
        l_a: seg_a.value,
        l_b: seg_b.value,
        l_rec,
        l_g,
        l_all: 0.0,
    };
    losses.l_all =
        total_loss(losses.l_a, losses.l_b, losses.l_rec, losses.l_g, &weights).map_err(|_| divergence(state.iter, &losses))?;

    // (6) backward through every student branch, summed in a fixed order
    let da = logits_grad(&pa, &seg_a.grad, 0.5, guide_grads.as_ref().map(|g| g.0.as_slice()));
    let db = logits_grad(&pb, &seg_b.grad, 0.5, guide_grads.as_ref().map(|g| g.1.as_slice()));
    let student = &state.student;
    let ((ga, gb), grec) = rayon::join(
        || rayon::join(|| network::backward(student, &fa, &da), || network::backward(student, &fb, &db)),
        || {
            recon.as_ref().map(|(fwd, _, loss)| {
                let g: Vec<f64> = loss.grad.iter().map(|v| weights.alpha * v).collect();
                network::backward(student, fwd, &g)
            })
        },
    );
    let mut grads = ga?;
    grads.add_assign(&gb?);
    if let Some(g) = grec {
        grads.add_assign(&g?);
    }
    let teacher_grads = if opts.probe_teacher_grads {
        let dt = softmax_backward(&pt, &teacher_prob_grad);
        Some(network::backward(&state.teacher, &t_fwd, &dt)?)
    } else {
        None
    };

    finish_step(state, &grads, cfg)?;
    Ok(StepReport {
        losses,
        n: layout.n(),
        pseudo_label: Some(pseudo),
        unreliable,
        guided,
        teacher_grads,
    })
}

/// Plain CE + Dice step on the labeled image. During warm-up the teacher
/// is set to the updated student instead of averaged.
fn supervised_step(
    state: &mut TrainState,
    xl: &Image,
    yl: &LabelMask,
    cfg: &TrainConfig,
    opts: &StepOptions,
    warmup: bool,
) -> Result<StepReport> {
    let fwd = network::forward(&state.student, xl, Head::Seg)?;
    let p = fwd.probs()?;
    let seg = seg_loss(&p, yl)?;
    let mut losses = LossValues {
        l_a: seg.value,
        l_b: seg.value,
        ..LossValues::default()
    };
    losses.l_all = total_loss(losses.l_a, losses.l_b, 0.0, 0.0, &cfg.loss_weights())
        .map_err(|_| divergence(state.iter, &losses))?;
    // Both halves of the batch are the same image: 0.5 + 0.5.
    let grads = network::backward(&state.student, &fwd, &logits_grad(&p, &seg.grad, 1.0, None))?;
    finish_step(state, &grads, cfg)?;
    if warmup {
        state.teacher = state.student.clone();
    }
    Ok(StepReport {
        losses,
        n: 1,
        pseudo_label: None,
        unreliable: None,
        guided: None,
        teacher_grads: opts.probe_teacher_grads.then(|| state.teacher.zeros_like()),
    })
}

/// (6) SGD on the student, (7) EMA into the teacher.
fn finish_step(state: &mut TrainState, grads: &Grads, cfg: &TrainConfig) -> Result<()> {
    state.optimizer.step(&mut state.student, grads);
    ema_update(&mut state.teacher, &state.student, cfg.ema_lambda)?;
    state.iter += 1;
    Ok(())
}

/// Student predictions on `val_set`, scored per class.
pub fn validate(params: &NetworkParams, val_set: &[Sample], k_fg: usize) -> Result<MetricsReport> {
    if val_set.is_empty() {
        return Err(Error::Dataset("validation set is empty".into()));
    }
    use rayon::prelude::*;
    let cases = val_set
        .par_iter()
        .map(|s| {
            let p = network::forward_seg(params, &s.image)?;
            let mask = s.mask.as_ref().ok_or_else(|| Error::Dataset(format!("{} has no mask", s.id)))?;
            Ok((s.id.clone(), network::argmax_labels(&p), mask.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&cases, k_fg)
}

/// One in-memory image with an optional mask.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Option<LabelMask>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl TrainData {
    fn check(&self, cfg: &TrainConfig) -> Result<()> {
        if self.labeled.is_empty() {
            return Err(Error::Dataset("no labeled samples".into()));
        }
        if !cfg.labeled_only && self.unlabeled.is_empty() {
            return Err(Error::Dataset("no unlabeled samples".into()));
        }
        if let Some(s) = self.labeled.iter().find(|s| s.mask.is_none()) {
            return Err(Error::Dataset(format!("labeled sample {} has no mask", s.id)));
        }
        if let Some(s) = self.val.iter().find(|s| s.mask.is_none()) {
            return Err(Error::Dataset(format!("validation sample {} has no mask", s.id)));
        }
        Ok(())
    }

    /// Draws the next batch from the state's data stream.
    pub fn sample_batch(&self, rng: &mut ChaCha8Rng, labeled_only: bool) -> BatchPair {
        let l = &self.labeled[rng.random_range(0..self.labeled.len())];
        let unlabeled = (!labeled_only).then(|| self.unlabeled[rng.random_range(0..self.unlabeled.len())].image.clone());
        BatchPair {
            labeled: (l.image.clone(), l.mask.clone().expect("checked")),
            unlabeled,
        }
    }
}

pub struct SessionOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    /// Print progress to standard error every `log_interval` iterations.
    pub progress: bool,
}

#[derive(Debug, Clone)]
pub struct SessionSummary {
    pub iters: u64,
    pub final_losses: Option<LossValues>,
    pub best_dice: Option<f64>,
    pub final_report: Option<MetricsReport>,
}

pub const TRAIN_LOG: &str = "train_log.csv";
pub const VAL_LOG: &str = "val_log.csv";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.erck";
pub const LAST_CHECKPOINT: &str = "checkpoint_last.erck";
pub const EFFECTIVE_CONFIG: &str = "config.effective.toml";
pub const METRICS_SUMMARY: &str = "metrics.csv";
pub const METRICS_CASES: &str = "metrics_cases.csv";

const TRAIN_LOG_HEADER: [&str; 8] = ["iter", "l_a", "l_b", "l_rec", "l_g", "l_all", "lr", "n"];

/// Row of the training log.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LogRow {
    pub iter: u64,
    pub l_a: f64,
    pub l_b: f64,
    pub l_rec: f64,
    pub l_g: f64,
    pub l_all: f64,
    pub lr: f64,
    pub n: usize,
}

pub fn read_train_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Keeps the log rows for iterations before `iter` (used when resuming).
fn truncate_log(path: &Path, iter: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut keep = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let row_iter = line.split(',').next().and_then(|v| v.parse::<u64>().ok());
        if i == 0 || row_iter.is_some_and(|r| r < iter) {
            keep.push(line);
        }
    }
    Ok(keep)
}

fn open_log(path: &Path, header: &[&str], resume_at: Option<u64>) -> Result<csv::Writer<File>> {
    let kept = match resume_at {
        Some(iter) => truncate_log(path, iter)?,
        None => Vec::new(),
    };
    let file = File::create(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if kept.is_empty() {
        w.write_record(header)?;
    } else {
        for line in kept {
            w.write_record(line.split(','))?;
        }
    }
    w.flush()?;
    Ok(w)
}

/// Trains to `cfg.max_iters`, writing the log, validation history,
/// checkpoints and a final metrics report into `opts.out_dir`.
pub fn run_session(cfg: &TrainConfig, data: &TrainData, opts: &SessionOptions) -> Result<SessionSummary> {
    let cfg = validate_config(cfg.clone())?;
    data.check(&cfg)?;
    std::fs::create_dir_all(&opts.out_dir)?;

    let mut state = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if Architecture::from_config(&ck.config) != Architecture::from_config(&cfg) {
                return Err(Error::Checkpoint("checkpoint architecture differs from the config".into()));
            }
            TrainState::from_checkpoint(&ck)?
        }
        None => TrainState::new(&cfg)?,
    };
    cfg.save(&opts.out_dir.join(EFFECTIVE_CONFIG))?;
    let resume_at = opts.resume.as_ref().map(|_| state.iter);
    let mut log = open_log(&opts.out_dir.join(TRAIN_LOG), &TRAIN_LOG_HEADER, resume_at)?;
    let mut val_log = open_log(
        &opts.out_dir.join(VAL_LOG),
        &["iter", "mean_dice", "mean_jaccard", "mean_hd95", "mean_asd"],
        // validation rows count completed iterations
        resume_at.map(|i| i + 1),
    )?;

    let step_opts = StepOptions::default();
    let mut last = None;
    while state.iter < cfg.max_iters {
        let batch = data.sample_batch(&mut state.data_rng, cfg.labeled_only);
        let iter = state.iter;
        let report = train_step(&mut state, &batch, &cfg, &step_opts)?;
        let l = report.losses;
        log.serialize(LogRow {
            iter,
            l_a: l.l_a,
            l_b: l.l_b,
            l_rec: l.l_rec,
            l_g: l.l_g,
            l_all: l.l_all,
            lr: cfg.lr,
            n: report.n,
        })?;
        last = Some(l);
        if opts.progress && (iter + 1) % cfg.log_interval == 0 {
            eprintln!(
                "iter {:>6}  l_all {:.5}  l_a {:.5}  l_b {:.5}  l_rec {:.5}  l_g {:.6}",
                iter + 1,
                l.l_all,
                l.l_a,
                l.l_b,
                l.l_rec,
                l.l_g
            );
        }

        let done = state.iter == cfg.max_iters;
        if !data.val.is_empty() && (state.iter % cfg.val_interval == 0 || done) {
            let report = validate(&state.student, &data.val, cfg.k_fg)?;
            let m = &report.mean;
            val_log.write_record(&[
                state.iter.to_string(),
                m.dice.to_string(),
                m.jaccard.to_string(),
                m.hd95.map_or(String::new(), |v| v.to_string()),
                m.asd.map_or(String::new(), |v| v.to_string()),
            ])?;
            val_log.flush()?;
            if opts.progress {
                eprintln!("iter {:>6}  validation mean dice {:.2}", state.iter, m.dice);
            }
            if state.best_dice.is_none_or(|b| m.dice > b) {
                state.best_dice = Some(m.dice);
                state.to_checkpoint(&cfg).save(&opts.out_dir.join(BEST_CHECKPOINT))?;
            }
        }
        if cfg.checkpoint_interval > 0 && state.iter % cfg.checkpoint_interval == 0 {
            log.flush()?;
            state
                .to_checkpoint(&cfg)
                .save(&opts.out_dir.join(format!("checkpoint_{:06}.erck", state.iter)))?;
        }
    }
    log.flush()?;
    state.to_checkpoint(&cfg).save(&opts.out_dir.join(LAST_CHECKPOINT))?;

    let final_report = if data.val.is_empty() {
        None
    } else {
        let report = validate(&state.student, &data.val, cfg.k_fg)?;
        report.write_summary_csv(&opts.out_dir.join(METRICS_SUMMARY))?;
        report.write_cases_csv(&opts.out_dir.join(METRICS_CASES))?;
        Some(report)
    };
    Ok(SessionSummary {
        iters: state.iter,
        final_losses: last,
        best_dice: state.best_dice,
        final_report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            image_size: 16,
            k_fg: 2,
            widths: vec![4, 8],
            ..TrainConfig::default()
        }
    }

    fn blob(seed: u64) -> (Image, LabelMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cy, cx) = (rng.random_range(5..11), rng.random_range(5..11));
        let mask = LabelMask::from_fn(16, 16, |y, x| {
            let d = (y as i64 - cy).pow(2) + (x as i64 - cx).pow(2);
            if d < 9 {
                1
            } else if y < 3 {
                2
            } else {
                0
            }
        });
        let img = Image::from_fn(16, 16, 1, |_, y, x| {
            0.2 + 0.3 * mask.get(y, x) as f64 + rng.random_range(0.0..0.1)
        })
        .unwrap();
        (img, mask)
    }

    fn batch(seed: u64) -> BatchPair {
        BatchPair {
            labeled: blob(seed),
            unlabeled: Some(blob(seed + 100).0),
        }
    }

    #[test]
    fn variants_follow_flags() {
        let base = small_cfg();
        assert_eq!(ablation_mode(&base).unwrap().name(), "full");
        let v = ablation_mode(&TrainConfig { disable_s2: true, ..base.clone() }).unwrap();
        assert!(v.reconstruct && v.guidance.is_none());
        let v = ablation_mode(&TrainConfig { disable_s1: true, ..base.clone() }).unwrap();
        assert_eq!(v.guidance, Some(UnreliableSource::TeacherConfidence(0.8)));
        assert!(!v.reconstruct);
        let v = ablation_mode(&TrainConfig { fixed_n: Some(4), ..base.clone() }).unwrap();
        assert_eq!(v.grid_sizes, vec![4]);
        let v = ablation_mode(&TrainConfig { disable_ers: true, ..base.clone() }).unwrap();
        assert_eq!(v.name(), "mixing-only");
        assert!(ablation_mode(&TrainConfig { disable_s1: true, disable_s2: true, ..base }).is_err());
    }

    #[test]
    fn full_step_reports_consistent_losses() {
        let cfg = small_cfg();
        let mut state = TrainState::new(&cfg).unwrap();
        let before = state.student.clone();
        let r = train_step(&mut state, &batch(1), &cfg, &StepOptions { probe_teacher_grads: true }).unwrap();
        let l = r.losses;
        assert_eq!(l.l_all, (l.l_a + l.l_b) / 2.0 + 0.01 * l.l_rec + 0.01 * l.l_g);
        assert!(l.l_rec > 0.0);
        assert!(r.teacher_grads.unwrap().is_zero());
        assert!(r.guided.unwrap().is_subset_of(&r.unreliable.unwrap()));
        assert_eq!(state.iter, 1);
        assert_ne!(state.student, before);
        assert!([2, 3].contains(&r.n));
    }

    #[test]
    fn disabled_components_report_zero() {
        let cfg = TrainConfig { disable_ers: true, ..small_cfg() };
        let mut state = TrainState::new(&cfg).unwrap();
        let l = train_step(&mut state, &batch(2), &cfg, &StepOptions::default()).unwrap().losses;
        assert_eq!((l.l_rec, l.l_g), (0.0, 0.0));
        assert_eq!(l.l_all, (l.l_a + l.l_b) / 2.0);

        let cfg = TrainConfig { labeled_only: true, disable_ers: true, disable_mms: true, ..small_cfg() };
        let mut state = TrainState::new(&cfg).unwrap();
        let b = BatchPair { labeled: blob(3), unlabeled: None };
        let l = train_step(&mut state, &b, &cfg, &StepOptions::default()).unwrap().losses;
        assert_eq!(l.l_a, l.l_b);
        assert_eq!(l.l_all, l.l_a);
    }

    #[test]
    fn rejects_misaligned_batches() {
        let cfg = small_cfg();
        let mut state = TrainState::new(&cfg).unwrap();
        let mut b = batch(4);
        b.unlabeled = None;
        assert!(train_step(&mut state, &b, &cfg, &StepOptions::default()).is_err());
        let b = BatchPair {
            labeled: blob(4),
            unlabeled: Some(Image::filled(8, 8, 1, 0.5).unwrap()),
        };
        assert!(train_step(&mut state, &b, &cfg, &StepOptions::default()).is_err());
        assert_eq!(state.iter, 0);
    }

    #[test]
    fn steps_are_deterministic() {
        let cfg = small_cfg();
        let run = || {
            let mut state = TrainState::new(&cfg).unwrap();
            (0..5)
                .map(|i| train_step(&mut state, &batch(i), &cfg, &StepOptions::default()).unwrap().losses)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
