//! Momentum SGD and the pretraining loop.
//!
//! Every random draw is keyed by `(seed, step)` or `(seed, step, video id)`,
//! so a run resumed from a checkpoint replays exactly the batches and
//! augmentations of an uninterrupted run.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rayon::prelude::*;

use crate::augmentation::{make_triplet, stack_clips};
use crate::checkpoint::{Checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::dataset::{Video, sample_batch};
use crate::encoder::{self, Params, init_params};
use crate::error::{HdcError, Result};
use crate::loss::{LossBreakdown, VariantBatches, hdc_objective};
use crate::seeding::{self, stream};
use crate::tensor::{Element, GradTape, Tensor};

pub const METRICS_HEADER: [&str; 9] = [
    "step", "lr", "L_total", "L_s_3", "L_t_3", "L_s_4", "L_t_4", "L_s_5", "L_t_5",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState<F: Element> {
    pub velocity: BTreeMap<String, Tensor<F>>,
    /// Number of updates applied so far.
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    pub l2: f64,
}

impl SgdConfig {
    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr / (1.0 + self.lr_decay * step as f64)
    }
}

/// One momentum update. Parameters without a gradient are left untouched.
/// Nothing is modified if any gradient is non-finite.
pub fn sgd_step<F: Element>(
    params: &mut Params<F>,
    grads: &BTreeMap<String, Vec<F>>,
    state: &mut OptimizerState<F>,
    cfg: &SgdConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.numel() != g.len() {
            return Err(HdcError::shape(
                "sgd_step",
                format!("{name}: {} values vs {} gradients", p.numel(), g.len()),
            ));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(HdcError::Diverged {
                step: state.step,
                reason: format!("non-finite gradient in {name} at entry {i}"),
            });
        }
    }
    let lr = F::lit(cfg.lr_at(state.step));
    let momentum = F::lit(cfg.momentum);
    let l2 = F::lit(cfg.l2);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        for ((p, v), g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g) {
            *v = momentum * *v + *g + l2 * *p;
            *p -= lr * *v;
        }
    }
    state.step += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub losses: LossBreakdown,
}

impl StepRecord {
    pub fn csv_row(&self) -> Vec<String> {
        let mut row = vec![
            self.step.to_string(),
            self.lr.to_string(),
            self.losses.total.to_string(),
        ];
        for k in [3, 4, 5] {
            for m in [&self.losses.spatial, &self.losses.temporal] {
                row.push(m.get(&k).map(f64::to_string).unwrap_or_default());
            }
        }
        row
    }
}

/// Writes the full log to `path`, replacing any existing file.
pub fn write_metrics(path: &Path, log: &[StepRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in log {
        w.write_record(r.csv_row())?;
    }
    w.flush().map_err(|e| HdcError::io(path, e))
}

/// Appends rows one step at a time so a crash keeps everything logged so far.
struct MetricsSink {
    writer: csv::Writer<fs::File>,
    path: PathBuf,
}

impl MetricsSink {
    fn open(path: &Path) -> Result<Self> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| HdcError::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        if fresh {
            writer.write_record(METRICS_HEADER)?;
        }
        Ok(MetricsSink {
            writer,
            path: path.to_path_buf(),
        })
    }

    fn push(&mut self, r: &StepRecord) -> Result<()> {
        self.writer.write_record(r.csv_row())?;
        self.writer.flush().map_err(|e| HdcError::io(&self.path, e))
    }
}

/// Where a run writes its artifacts. Unset entries are skipped.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub metrics: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:06}.hdck"))
}

pub struct TrainResult {
    pub params: Params<f32>,
    pub state: OptimizerState<f32>,
    /// Records for the steps run in this call.
    pub log: Vec<StepRecord>,
}

/// Stacked `[original, spatial, temporal]` clips for one step.
pub struct PreparedBatch {
    pub step: u64,
    pub batches: [Tensor<f32>; 3],
}

pub fn prepare_batch(config: &RunConfig, videos: &[Video], step: u64) -> Result<PreparedBatch> {
    build_batch(config, videos, step, true)
}

/// `parallel = false` keeps the work off the rayon pool. The prefetch thread
/// needs that: the training thread may itself be a pool worker blocked on
/// the channel, and with a one-thread pool nothing else could run the tasks.
fn build_batch(
    config: &RunConfig,
    videos: &[Video],
    step: u64,
    parallel: bool,
) -> Result<PreparedBatch> {
    let tc = &config.trainer;
    let mut rng = seeding::rng_from(&[config.seed, stream::BATCH, step]);
    let picks = sample_batch(videos, tc.batch, &mut rng)?;
    let one = |&i: &usize| {
        let v = &videos[i];
        let mut rng = seeding::rng_from(&[config.seed, stream::AUGMENT, step, u64::from(v.id)]);
        make_triplet(v, tc.clip_len, &config.augmentation, &mut rng)
    };
    let triplets = if parallel {
        picks.par_iter().map(one).collect::<Result<Vec<_>>>()?
    } else {
        picks.iter().map(one).collect::<Result<Vec<_>>>()?
    };
    Ok(PreparedBatch {
        step,
        batches: [
            stack_clips(triplets.iter().map(|t| &t.original))?,
            stack_clips(triplets.iter().map(|t| &t.spatial))?,
            stack_clips(triplets.iter().map(|t| &t.temporal))?,
        ],
    })
}

/// Forward, backward and update for one batch. Returns the logged losses.
fn train_step(
    config: &RunConfig,
    params: &mut Params<f32>,
    state: &mut OptimizerState<f32>,
    batch: PreparedBatch,
) -> Result<StepRecord> {
    let sgd = sgd_config(config);
    let lr = sgd.lr_at(state.step);
    let mut tape = GradTape::new();
    let bound = encoder::bind(&mut tape, params, true);
    let [o, s, t] = batch.batches;
    let vars = VariantBatches {
        original: tape.constant(o),
        spatial: tape.constant(s),
        temporal: tape.constant(t),
    };
    let objective = hdc_objective(&mut tape, &config.encoder, &config.loss, &bound, &vars)?;
    if let Some(total) = objective.total {
        if !tape.value(total).item().is_finite() {
            return Err(HdcError::Diverged {
                step: batch.step,
                reason: "non-finite loss".into(),
            });
        }
        tape.backward(total)?;
        let grads = bound
            .iter()
            .filter_map(|(name, var)| tape.grad(*var).map(|g| (name.clone(), g.to_vec())))
            .collect();
        sgd_step(params, &grads, state, &sgd)?;
    }
    Ok(StepRecord {
        step: batch.step,
        lr,
        losses: objective.breakdown,
    })
}

pub fn sgd_config(config: &RunConfig) -> SgdConfig {
    let t = &config.trainer;
    SgdConfig {
        lr: t.lr,
        momentum: t.momentum,
        lr_decay: t.lr_decay,
        l2: t.l2,
    }
}

/// Runs steps `resume.step + 1 ..= trainer.steps` (or from step 1 on a fresh
/// start). Step `s` always uses the batch and augmentations keyed by `s`.
pub fn pretrain(
    config: &RunConfig,
    videos: &[Video],
    outputs: &TrainOutputs,
    resume: Option<Checkpoint<f32>>,
) -> Result<TrainResult> {
    config.validate()?;
    if videos.len() < config.trainer.batch {
        return Err(HdcError::InvalidArgument(format!(
            "dataset has {} videos, batch needs {}",
            videos.len(),
            config.trainer.batch
        )));
    }
    let (mut params, mut state, first) = match resume {
        Some(c) => {
            c.params.check_matches(&config.encoder)?;
            let first = c.state.step + 1;
            (c.params, c.state, first)
        }
        None => (
            init_params(
                &config.encoder,
                seeding::derive_seed(&[config.seed, stream::INIT]),
            )?,
            OptimizerState::default(),
            1,
        ),
    };
    let last = config.trainer.steps as u64;
    let mut sink = outputs
        .metrics
        .as_deref()
        .map(MetricsSink::open)
        .transpose()?;
    let (sc, tc) = config.loss.active_scales();
    let idle = sc.is_empty() && tc.is_empty();
    let mut log = Vec::new();

    let mut handle = |rec: StepRecord, params: &Params<f32>, state: &mut OptimizerState<f32>| {
        // The optimizer counter tracks steps even when nothing was updated,
        // so checkpoints and resumes stay aligned with the loop.
        state.step = rec.step;
        if let Some(s) = sink.as_mut() {
            s.push(&rec)?;
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            let every = config.trainer.checkpoint_every as u64;
            if rec.step == last || (every > 0 && rec.step % every == 0) {
                let ckpt = Checkpoint {
                    params: params.clone(),
                    state: state.clone(),
                };
                save_checkpoint(&ckpt, &checkpoint_path(dir, rec.step))?;
            }
        }
        log.push(rec);
        Ok::<(), HdcError>(())
    };

    if idle {
        for step in first..=last {
            let rec = StepRecord {
                step,
                lr: sgd_config(config).lr_at(state.step),
                losses: LossBreakdown::default(),
            };
            handle(rec, &params, &mut state)?;
        }
    } else if config.trainer.prefetch && first <= last {
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel::<Result<PreparedBatch>>(1);
            scope.spawn(move || {
                for step in first..=last {
                    if tx.send(build_batch(config, videos, step, false)).is_err() {
                        break;
                    }
                }
            });
            for batch in rx.iter() {
                let rec = train_step(config, &mut params, &mut state, batch?)?;
                handle(rec, &params, &mut state)?;
            }
            Ok(())
        })?;
    } else {
        for step in first..=last {
            let batch = prepare_batch(config, videos, step)?;
            let rec = train_step(config, &mut params, &mut state, batch)?;
            handle(rec, &params, &mut state)?;
        }
    }
    Ok(TrainResult { params, state, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f64) -> Params<f64> {
        Params::from_map([("p".to_string(), Tensor::scalar(v))].into())
    }

    fn grads(v: f64) -> BTreeMap<String, Vec<f64>> {
        [("p".to_string(), vec![v])].into()
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = scalar_params(1.5);
        let mut st = OptimizerState::default();
        let cfg = SgdConfig {
            lr: 0.0,
            momentum: 0.9,
            lr_decay: 0.0,
            l2: 0.1,
        };
        sgd_step(&mut p, &grads(3.0), &mut st, &cfg).unwrap();
        assert_eq!(p.get("p").unwrap().item(), 1.5);
    }

    #[test]
    fn plain_sgd() {
        let mut p = scalar_params(1.0);
        let mut st = OptimizerState::default();
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            lr_decay: 0.0,
            l2: 0.0,
        };
        sgd_step(&mut p, &grads(2.0), &mut st, &cfg).unwrap();
        assert!((p.get("p").unwrap().item() - 0.8).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn momentum_on_quadratic() {
        let mut p = scalar_params(1.0);
        let mut st = OptimizerState::default();
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            lr_decay: 0.0,
            l2: 0.0,
        };
        for _ in 0..2 {
            let x = p.get("p").unwrap().item();
            sgd_step(&mut p, &grads(x), &mut st, &cfg).unwrap();
        }
        assert!((p.get("p").unwrap().item() - 0.72).abs() < 1e-12);
    }

    #[test]
    fn decay_and_l2() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            lr_decay: 0.5,
            l2: 0.25,
        };
        assert_eq!(cfg.lr_at(2), 0.05);
        let mut p = scalar_params(2.0);
        let mut st = OptimizerState {
            step: 2,
            ..Default::default()
        };
        sgd_step(&mut p, &grads(1.0), &mut st, &cfg).unwrap();
        // g = 1 + 0.25 * 2 = 1.5, lr = 0.05
        assert!((p.get("p").unwrap().item() - 1.925).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = Params::from_map(
            [
                ("a".to_string(), Tensor::scalar(1.0)),
                ("b".to_string(), Tensor::scalar(1.0)),
            ]
            .into(),
        );
        let mut st = OptimizerState::default();
        let g: BTreeMap<String, Vec<f64>> =
            [("a".to_string(), vec![1.0]), ("b".to_string(), vec![f64::NAN])].into();
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.0,
            lr_decay: 0.0,
            l2: 0.0,
        };
        assert!(matches!(
            sgd_step(&mut p, &g, &mut st, &cfg),
            Err(HdcError::Diverged { .. })
        ));
        assert_eq!(p.get("a").unwrap().item(), 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn csv_row_leaves_absent_terms_empty() {
        let rec = StepRecord {
            step: 4,
            lr: 0.5,
            losses: LossBreakdown {
                spatial: [(5, 1.5)].into(),
                temporal: BTreeMap::new(),
                total: 1.5,
            },
        };
        assert_eq!(
            rec.csv_row(),
            vec!["4", "0.5", "1.5", "", "", "", "", "1.5", ""]
        );
    }
}
