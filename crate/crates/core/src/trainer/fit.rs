use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{steps_per_epoch, Batch, BatchPlan, SplitData};
use crate::metrics::{aggregate, Aggregate};
use crate::model::UNet;
use crate::schedules::ScheduleConfig;
use crate::{Error, Result};

use super::eval::{evaluate, Which};
use super::{
    evaluate_checkpoint, train_step, Checkpoint, EpochAccumulator, ModelChoice, Reports, StepReport, TrainConfig,
    TrainState,
};

pub const LOG_HEADER: &str = "epoch,step,seg_loss,cons_loss,w,lr,val_dice_student,val_dice_teacher";

/// One line of the training log. Validation columns are empty on epochs
/// without validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Global step counter at the end of the epoch.
    pub step: u64,
    pub seg_loss: f64,
    pub cons_loss: f64,
    /// Consistency weight and learning rate of the epoch's last step.
    pub w: f64,
    pub lr: f64,
    pub val_dice_student: Option<f64>,
    pub val_dice_teacher: Option<f64>,
}

impl EpochLog {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.8},{:.8},{:.8},{:.8e},{},{}",
            self.epoch,
            self.step,
            self.seg_loss,
            self.cons_loss,
            self.w,
            self.lr,
            opt(self.val_dice_student),
            opt(self.val_dice_teacher)
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<EpochLog> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::config(format!("malformed training log line: {line}"));
        if f.len() != 8 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        Ok(EpochLog {
            epoch: f[0].parse().map_err(|_| bad())?,
            step: f[1].parse().map_err(|_| bad())?,
            seg_loss: num(f[2])?,
            cons_loss: num(f[3])?,
            w: num(f[4])?,
            lr: num(f[5])?,
            val_dice_student: opt(f[6])?,
            val_dice_teacher: opt(f[7])?,
        })
    }
}

/// Drives [`train_step`] over the batch plan of each epoch and keeps the
/// bookkeeping needed for logging, model selection and resumption.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    net: UNet,
    data: &'a SplitData,
    sched: ScheduleConfig,
    state: TrainState,
    acc: EpochAccumulator,
    best: Option<(f64, usize)>,
    best_state: Option<TrainState>,
    plan: Option<(usize, BatchPlan)>,
    last: Option<StepReport>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a SplitData) -> Result<Self> {
        let net = UNet::new(cfg.model.clone())?;
        let state = TrainState::init(&net, cfg.seed);
        Self::assemble(cfg, net, data, state, EpochAccumulator::default(), None)
    }

    /// Continue a run from a checkpoint; the configuration comes from the checkpoint.
    pub fn from_checkpoint(ckpt: Checkpoint, data: &'a SplitData) -> Result<Self> {
        let net = UNet::new(ckpt.config.model.clone())?;
        Self::assemble(ckpt.config, net, data, ckpt.state, ckpt.accumulator, ckpt.best)
    }

    fn assemble(
        cfg: TrainConfig,
        net: UNet,
        data: &'a SplitData,
        state: TrainState,
        acc: EpochAccumulator,
        best: Option<(f64, usize)>,
    ) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        let (h, w) = data.slice_shape().expect("validated data has labeled slices");
        let m = net.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::config(format!("slice size {h}x{w} must be a multiple of {m} for this U-Net depth")));
        }
        let mut sched = cfg.schedule.clone();
        sched.steps_per_epoch = steps_per_epoch(&cfg.batch_spec(), data.labeled.len(), data.unlabeled.len())?;
        Ok(Trainer { cfg, net, data, sched, state, acc, best, best_state: None, plan: None, last: None })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn schedule(&self) -> &ScheduleConfig {
        &self.sched
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.sched.steps_per_epoch
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.sched.total_epochs
    }

    pub fn best(&self) -> Option<(f64, usize)> {
        self.best
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { config: self.cfg.clone(), state: self.state.clone(), accumulator: self.acc, best: self.best }
    }

    /// Checkpoint of the best validated weights seen in this process, if any.
    pub fn best_checkpoint(&self) -> Option<Checkpoint> {
        self.best_state.as_ref().map(|s| Checkpoint {
            config: self.cfg.clone(),
            state: s.clone(),
            accumulator: EpochAccumulator::default(),
            best: self.best,
        })
    }

    /// The batch the next step will consume.
    pub fn next_batch(&mut self) -> Result<Batch> {
        let epoch = self.state.epoch;
        if self.plan.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let (nl, nu) = (self.data.labeled.len(), self.data.unlabeled.len());
            self.plan = Some((epoch, BatchPlan::for_epoch(&self.cfg.batch_spec(), nl, nu, self.cfg.seed, epoch)?));
        }
        let plan = &self.plan.as_ref().unwrap().1;
        let k = self.state.step_in_epoch;
        let items = plan.labeled[k]
            .iter()
            .map(|&i| &self.data.labeled[i])
            .chain(plan.unlabeled[k].iter().map(|&i| &self.data.unlabeled[i]));
        Batch::from_samples(items)
    }

    /// Run the next training step.
    pub fn step(&mut self) -> Result<StepReport> {
        if self.is_done() {
            return Err(Error::contract("training already finished"));
        }
        let batch = self.next_batch()?;
        let report = train_step(&self.net, &mut self.state, &batch, &self.cfg, &self.sched)?;
        self.acc.seg_sum += report.seg_loss;
        self.acc.cons_sum += report.cons_loss;
        self.acc.steps += 1;
        self.state.step_in_epoch += 1;
        if self.state.step_in_epoch == self.sched.steps_per_epoch {
            self.state.step_in_epoch = 0;
            self.state.epoch += 1;
        }
        self.last = Some(report);
        Ok(report)
    }

    fn validate_now(&self, epoch: usize) -> bool {
        !self.data.validation.is_empty()
            && ((epoch + 1) % self.cfg.eval.every_epochs == 0 || epoch + 1 == self.sched.total_epochs)
    }

    /// Finish the current epoch, validate if due, and return its log line.
    /// The boolean is true when the selected model reached a new best.
    pub fn run_epoch(&mut self) -> Result<(EpochLog, bool)> {
        let epoch = self.state.epoch;
        while self.state.epoch == epoch {
            self.step()?;
        }
        let last = self.last.expect("an epoch has at least one step");
        let n = self.acc.steps.max(1) as f64;
        let mut log = EpochLog {
            epoch,
            step: self.state.step,
            seg_loss: self.acc.seg_sum / n,
            cons_loss: self.acc.cons_sum / n,
            w: last.weight,
            lr: last.lr,
            val_dice_student: None,
            val_dice_teacher: None,
        };
        self.acc = EpochAccumulator::default();
        let mut improved = false;
        if self.validate_now(epoch) {
            let (th, pool) = (self.cfg.eval.threshold, self.cfg.eval.pooling);
            let val = &self.data.validation;
            let s = evaluate(&self.net, &self.state.student, val, th, pool)?.dice;
            let t = evaluate(&self.net, &self.state.teacher.weights, val, th, pool)?.dice;
            log.val_dice_student = Some(s);
            log.val_dice_teacher = Some(t);
            let score = match self.cfg.eval.selection {
                ModelChoice::Student => s,
                ModelChoice::Teacher => t,
            };
            if self.best.map_or(true, |(b, _)| score > b) {
                self.best = Some((score, epoch));
                self.best_state = Some(self.state.clone());
                improved = true;
            }
        }
        Ok((log, improved))
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Option<Checkpoint>,
    pub log: Vec<EpochLog>,
    /// Test metrics of the reported weights (best or final per the config).
    pub test: Option<Reports>,
}

fn append_log(path: &Path, log: &EpochLog) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{LOG_HEADER}")?;
    }
    writeln!(f, "{}", log.csv_line())?;
    Ok(())
}

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LATEST_CHECKPOINT: &str = "latest.safetensors";

/// Train to completion. With a run directory, writes the CSV log, the best
/// and final checkpoints and a rolling `latest` checkpoint after each epoch.
pub fn fit(cfg: &TrainConfig, data: &SplitData, run_dir: Option<&Path>) -> Result<FitOutput> {
    fit_trainer(Trainer::new(cfg.clone(), data)?, run_dir)
}

pub fn fit_trainer(mut tr: Trainer<'_>, run_dir: Option<&Path>) -> Result<FitOutput> {
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut logs = Vec::new();
    while !tr.is_done() {
        let (log, improved) = match tr.run_epoch() {
            Ok(v) => v,
            Err(e) => {
                if let (Error::Diverged(d), Some(dir)) = (&e, run_dir) {
                    let json = serde_json::to_string_pretty(d.as_ref()).expect("serializes");
                    std::fs::write(dir.join("divergence.json"), json)?;
                }
                return Err(e);
            }
        };
        log::info!(
            "epoch {} step {} seg {:.4} cons {:.4} w {:.3} lr {:.2e} val student {:?} teacher {:?}",
            log.epoch,
            log.step,
            log.seg_loss,
            log.cons_loss,
            log.w,
            log.lr,
            log.val_dice_student,
            log.val_dice_teacher
        );
        if let Some(dir) = run_dir {
            append_log(&dir.join(LOG_FILE), &log)?;
            if improved {
                tr.best_checkpoint().expect("just improved").save(&dir.join(BEST_CHECKPOINT))?;
            }
            tr.checkpoint().save(&dir.join(LATEST_CHECKPOINT))?;
        }
        logs.push(log);
    }
    let final_checkpoint = tr.checkpoint();
    let mut best_checkpoint = tr.best_checkpoint();
    if let Some(dir) = run_dir {
        final_checkpoint.save(&dir.join(FINAL_CHECKPOINT))?;
        if best_checkpoint.is_none() && dir.join(BEST_CHECKPOINT).exists() {
            best_checkpoint = Some(Checkpoint::load(&dir.join(BEST_CHECKPOINT))?);
        }
    }
    let test = if tr.data.test.is_empty() {
        None
    } else {
        let chosen = match (tr.cfg.eval.report, &best_checkpoint) {
            (Which::Best, Some(b)) => b,
            _ => &final_checkpoint,
        };
        Some(evaluate_checkpoint(chosen, &tr.data.test)?)
    };
    if let (Some(dir), Some(t)) = (run_dir, &test) {
        std::fs::write(dir.join("test_metrics.json"), serde_json::to_string_pretty(t).expect("serializes"))?;
    }
    Ok(FitOutput { final_checkpoint, best_checkpoint, log: logs, test })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub run_dir: Option<PathBuf>,
    pub test: Option<Reports>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct MultiRunReport {
    pub runs: Vec<RunOutcome>,
    /// Aggregates over the successful runs.
    pub student: Option<Aggregate>,
    pub teacher: Option<Aggregate>,
}

impl MultiRunReport {
    pub fn get(&self, which: ModelChoice) -> Option<&Aggregate> {
        match which {
            ModelChoice::Student => self.student.as_ref(),
            ModelChoice::Teacher => self.teacher.as_ref(),
        }
    }

    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.error.is_some()).count()
    }
}

/// `n_runs` independent fits with seeds `seed, seed + 1, …`. A failed run is
/// recorded and the remaining runs continue.
pub fn multi_run(cfg: &TrainConfig, data: &SplitData, n_runs: usize, root: Option<&Path>) -> Result<MultiRunReport> {
    if n_runs < 2 {
        return Err(Error::config("multi_run needs at least 2 runs"));
    }
    if data.test.is_empty() {
        return Err(Error::config("multi_run needs a test pool"));
    }
    let mut runs = Vec::with_capacity(n_runs);
    for i in 0..n_runs {
        let mut c = cfg.clone();
        c.seed = cfg.seed.wrapping_add(i as u64);
        let dir = root.map(|r| r.join(format!("run-{i:02}")));
        let outcome = match fit(&c, data, dir.as_deref()) {
            Ok(out) => RunOutcome { seed: c.seed, run_dir: dir, test: out.test, error: None },
            Err(e) => {
                log::error!("run {i} (seed {}) failed: {e}", c.seed);
                RunOutcome { seed: c.seed, run_dir: dir, test: None, error: Some(e.to_string()) }
            }
        };
        runs.push(outcome);
    }
    let collect = |which: ModelChoice| {
        let reports: Vec<_> = runs.iter().filter_map(|r| r.test.as_ref().map(|t| *t.get(which))).collect();
        aggregate(&reports).ok()
    };
    let (student, teacher) = (collect(ModelChoice::Student), collect(ModelChoice::Teacher));
    Ok(MultiRunReport { runs, student, teacher })
}
