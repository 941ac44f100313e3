use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::checkpoint::Checkpoint;
use super::listops::{self, gen_listops_sample};
use super::loss::label_smoothed_ce_sum;
use super::schedule::lr_at;
use super::tasks::{gen_copy_batch, Seq2SeqSample, Task};
use crate::depth::derive_seed;
use crate::error::{Error, Result};
use crate::model::{argmax, Architecture, Model, ModelConfig, Session, PAD};
use crate::tensor::Real;

const TRAIN_STREAM: u64 = 1;
const HELDOUT_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

fn default_smoothing() -> f64 {
    0.1
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_adam_eps() -> f64 {
    1e-9
}
fn default_min_len() -> usize {
    1
}
fn default_task_len() -> usize {
    16
}
fn default_listops_depth() -> usize {
    3
}
fn default_eval_samples() -> usize {
    200
}
fn default_decode_samples() -> usize {
    50
}

/// Optimisation and task settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub total_steps: u64,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Shortest generated task sequence.
    #[serde(default = "default_min_len")]
    pub task_min_len: usize,
    /// Longest generated task sequence (content tokens, before framing).
    #[serde(default = "default_task_len")]
    pub task_max_len: usize,
    #[serde(default = "default_listops_depth")]
    pub listops_depth: usize,
    /// Held-out samples scored at each evaluation.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Held-out sequences greedily decoded at each evaluation (seq2seq only).
    #[serde(default = "default_decode_samples")]
    pub decode_samples: usize,
    /// Stop once held-out accuracy reaches this value and, for seq2seq
    /// tasks, every decoded held-out sequence is exact.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup_steps < 1 {
            return bad("warmup_steps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.task_min_len == 0 || self.task_min_len > self.task_max_len {
            return bad(format!("task length range {}..={}", self.task_min_len, self.task_max_len));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let run: RunConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        run.model.validate()?;
        run.train.validate()?;
        Ok(run)
    }

    /// Checks that the model can consume the task's samples.
    pub fn check_task(&self, task: Task) -> Result<()> {
        let (m, t) = (&self.model, &self.train);
        match task {
            Task::Copy | Task::Reverse => {
                if m.architecture != Architecture::EncoderDecoder {
                    return Err(Error::Config(format!("{task:?} needs an encoder-decoder model")));
                }
                if t.task_max_len + 1 > m.max_len {
                    return Err(Error::Config(format!(
                        "framed sequences of {} tokens exceed max_len {}",
                        t.task_max_len + 1,
                        m.max_len
                    )));
                }
            }
            Task::Listops => {
                if m.architecture != Architecture::EncoderOnly
                    || m.vocab_size < listops::VOCAB
                    || m.num_classes != listops::CLASSES
                {
                    return Err(Error::Config(format!(
                        "listops needs an encoder-only model with vocab ≥ {} and {} classes",
                        listops::VOCAB,
                        listops::CLASSES
                    )));
                }
                if t.task_max_len > m.max_len {
                    return Err(Error::Config("task_max_len exceeds model max_len".into()));
                }
            }
        }
        Ok(())
    }
}

/// One batch of training or evaluation samples.
#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    Seq2Seq(Vec<Seq2SeqSample>),
    Classify(Vec<(Vec<usize>, usize)>),
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Seq2Seq(v) => v.len(),
            Batch::Classify(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn make_batch(task: Task, vocab: usize, t: &TrainConfig, size: usize, seed: u64) -> Result<Batch> {
    match task {
        Task::Copy | Task::Reverse => Ok(Batch::Seq2Seq(gen_copy_batch(
            vocab,
            (t.task_min_len, t.task_max_len),
            size,
            task == Task::Reverse,
            seed,
        )?)),
        Task::Listops => (0..size)
            .map(|i| {
                let (_, s) = gen_listops_sample(t.listops_depth, t.task_max_len, derive_seed(seed, &[i as u64]))?;
                Ok((s.tokens, s.label))
            })
            .collect::<Result<_>>()
            .map(Batch::Classify),
    }
}

/// Held-out samples, drawn from a stream disjoint from training batches.
pub fn heldout_batch(task: Task, vocab: usize, t: &TrainConfig, size: usize) -> Result<Batch> {
    make_batch(task, vocab, t, size, derive_seed(t.seed, &[HELDOUT_STREAM]))
}

/// Records the summed loss of every sample on one session.
/// Returns `(loss_sum, scored, correct)`.
fn batch_loss<R: Real>(
    model: &Model<R>,
    s: &mut Session<'_, R>,
    batch: &Batch,
    eps: f64,
) -> Result<(crate::tensor::Var, usize, usize)> {
    let mut total = None;
    let (mut scored, mut correct) = (0, 0);
    let mut add = |s: &mut Session<'_, R>, (l, n, c): (crate::tensor::Var, usize, usize)| -> Result<()> {
        scored += n;
        correct += c;
        total = Some(match total {
            None => l,
            Some(acc) => s.tape.add(acc, l)?,
        });
        Ok(())
    };
    match batch {
        Batch::Seq2Seq(samples) => {
            for sample in samples {
                let logits = model.seq2seq_logits(s, &sample.encoder_input(), &sample.decoder_input())?;
                let r = label_smoothed_ce_sum(&mut s.tape, logits, &sample.labels(), eps, Some(PAD))?;
                add(s, r)?;
            }
        }
        Batch::Classify(samples) => {
            for (tokens, label) in samples {
                let logits = model.classify(s, tokens, None)?;
                let logits = s.tape.reshape(logits, &[1, model.config().num_classes])?;
                let r = label_smoothed_ce_sum(&mut s.tape, logits, &[*label], eps, None)?;
                add(s, r)?;
            }
        }
    }
    let total = total.ok_or_else(|| Error::Input("empty batch".into()))?;
    Ok((total, scored, correct))
}

/// Held-out quality of a model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub step: u64,
    /// Mean cross-entropy without smoothing.
    pub loss: f64,
    /// Teacher-forced token accuracy, or classification accuracy.
    pub accuracy: f64,
    /// Greedy decodes that reproduce the target exactly, out of `decoded`.
    pub exact: usize,
    pub decoded: usize,
}

pub fn evaluate<R: Real>(model: &Model<R>, task: Task, t: &TrainConfig, step: u64, decode: bool) -> Result<EvalReport> {
    let batch = heldout_batch(task, model.config().vocab_size, t, t.eval_samples.max(t.decode_samples))?;
    let (mut loss, mut scored, mut correct) = (0.0, 0, 0);
    let scoring = match &batch {
        Batch::Seq2Seq(v) => Batch::Seq2Seq(v[..t.eval_samples.min(v.len())].to_vec()),
        Batch::Classify(v) => Batch::Classify(v[..t.eval_samples.min(v.len())].to_vec()),
    };
    let chunks: Vec<Batch> = match scoring {
        Batch::Seq2Seq(v) => v.into_iter().map(|x| Batch::Seq2Seq(vec![x])).collect(),
        Batch::Classify(v) => v.into_iter().map(|x| Batch::Classify(vec![x])).collect(),
    };
    for chunk in &chunks {
        let mut s = Session::inference(model.registry());
        let (l, n, c) = batch_loss(model, &mut s, chunk, 0.0)?;
        loss += s.tape.value(l)[0].as_f64();
        scored += n;
        correct += c;
    }
    let (mut exact, mut decoded) = (0, 0);
    if decode {
        if let Batch::Seq2Seq(v) = &batch {
            for sample in &v[..t.decode_samples.min(v.len())] {
                decoded += 1;
                if model.greedy_decode(&sample.src, sample.tgt.len() + 1)? == sample.tgt {
                    exact += 1;
                }
            }
        }
    }
    Ok(EvalReport {
        step,
        loss: loss / scored.max(1) as f64,
        accuracy: correct as f64 / scored.max(1) as f64,
        exact,
        decoded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub accuracy: f64,
}

impl MetricRow {
    fn csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.loss, self.lr, self.accuracy)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub last_step: u64,
    pub history: Vec<MetricRow>,
    pub evals: Vec<EvalReport>,
    pub reached_target: bool,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "summary.json";

/// Rewrites a CSV keeping the header and rows whose first field is ≤ `step`.
fn truncate_csv(path: &Path, header: &str, step: u64) -> Result<()> {
    let kept: Vec<String> = match fs::read_to_string(path) {
        Ok(text) => text
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step))
            .map(str::to_string)
            .collect(),
        Err(_) => Vec::new(),
    };
    let mut body = format!("{header}\n");
    for l in kept {
        body.push_str(&l);
        body.push('\n');
    }
    fs::write(path, body)?;
    Ok(())
}

/// Runs training for `task`, writing metrics, evaluations and checkpoints
/// under `out_dir`. With `resume`, continues from that checkpoint's step.
pub fn train(
    run: &RunConfig,
    task: Task,
    out_dir: &Path,
    resume: Option<&Path>,
    mut log: impl FnMut(&str),
) -> Result<TrainOutcome> {
    run.model.validate()?;
    run.train.validate()?;
    run.check_task(task)?;
    let t = &run.train;
    fs::create_dir_all(out_dir)?;

    let (mut model, mut adam, start) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path, Some(run.model.hash()))?;
            let model: Model<f32> = ckpt.restore()?;
            let adam = ckpt
                .restore_adam(&model, t.adam())?
                .ok_or_else(|| Error::CorruptCheckpoint("no optimizer state to resume from".into()))?;
            (model, adam, ckpt.step)
        }
        None => {
            let model = Model::<f32>::build(&run.model)?;
            let adam = Adam::new(model.registry(), t.adam());
            (model, adam, 0)
        }
    };

    let metrics_path = out_dir.join(METRICS_FILE);
    let eval_path = out_dir.join(EVAL_FILE);
    const METRICS_HEADER: &str = "step,loss,lr,accuracy";
    const EVAL_HEADER: &str = "step,loss,accuracy,exact,decoded";
    truncate_csv(&metrics_path, METRICS_HEADER, start)?;
    truncate_csv(&eval_path, EVAL_HEADER, start)?;
    let mut metrics = fs::OpenOptions::new().append(true).open(&metrics_path)?;
    let mut evals_out = fs::OpenOptions::new().append(true).open(&eval_path)?;

    let vocab = run.model.vocab_size;
    let mut history = Vec::new();
    let mut evals = Vec::new();
    let mut reached_target = false;
    let mut last_step = start;
    for step in start + 1..=t.total_steps {
        let batch = make_batch(task, vocab, t, t.batch_size, derive_seed(t.seed, &[TRAIN_STREAM, step]))?;
        let lr = lr_at(step, run.model.d, t.lr_max, t.warmup_steps);
        let (loss, accuracy, grads) = {
            let mut s = Session::training(model.registry(), run.model.dropout, derive_seed(t.seed, &[DROPOUT_STREAM, step]));
            let (sum, scored, correct) = batch_loss(&model, &mut s, &batch, t.label_smoothing)?;
            let mean = s.tape.scale(sum, 1.0 / scored as f64)?;
            let loss = s.tape.value(mean)[0].as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            (loss, correct as f64 / scored as f64, s.backward(mean)?)
        };
        adam.update(model.registry_mut(), &grads, lr)?;
        let row = MetricRow { step, loss, lr, accuracy };
        writeln!(metrics, "{}", row.csv())?;
        history.push(row);
        last_step = step;

        if t.eval_every > 0 && step % t.eval_every == 0 {
            let target = t.target_accuracy.unwrap_or(f64::INFINITY);
            let mut report = evaluate(&model, task, t, step, false)?;
            if task.is_seq2seq() && report.accuracy >= target {
                report = evaluate(&model, task, t, step, true)?;
            }
            writeln!(
                evals_out,
                "{},{},{},{},{}",
                report.step, report.loss, report.accuracy, report.exact, report.decoded
            )?;
            log(&format!(
                "step {step}: train loss {loss:.4}, held-out accuracy {:.4}{}",
                report.accuracy,
                if report.decoded > 0 {
                    format!(", exact decodes {}/{}", report.exact, report.decoded)
                } else {
                    String::new()
                }
            ));
            reached_target = report.accuracy >= target && (!task.is_seq2seq() || report.exact == report.decoded);
            evals.push(report);
            if reached_target {
                break;
            }
        }
        if t.checkpoint_every > 0 && step % t.checkpoint_every == 0 {
            Checkpoint::capture(&model, Some(&adam), step).save(&out_dir.join(CHECKPOINT_FILE))?;
        }
    }
    Checkpoint::capture(&model, Some(&adam), last_step).save(&out_dir.join(CHECKPOINT_FILE))?;
    let summary = serde_json::json!({
        "task": task,
        "last_step": last_step,
        "final_loss": history.last().map(|r| r.loss),
        "reached_target": reached_target,
        "last_eval": evals.last(),
    });
    fs::write(out_dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(TrainOutcome {
        model,
        last_step,
        history,
        evals,
        reached_target,
    })
}

/// Predicted class for one ListOps-style token sequence.
pub fn predict_class<R: Real>(model: &Model<R>, tokens: &[usize]) -> Result<usize> {
    let mut s = Session::inference(model.registry());
    let logits = model.classify(&mut s, tokens, None)?;
    Ok(argmax(s.tape.value(logits)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FfVariant;

    pub(crate) fn tiny_run() -> RunConfig {
        let mut model = ModelConfig::tiny(Architecture::EncoderDecoder, FfVariant::Full);
        model.vocab_size = 8;
        RunConfig {
            model,
            train: TrainConfig {
                lr_max: 1.0,
                warmup_steps: 10,
                batch_size: 4,
                total_steps: 12,
                label_smoothing: 0.1,
                adam_beta1: 0.9,
                adam_beta2: 0.98,
                adam_eps: 1e-9,
                seed: 3,
                eval_every: 4,
                checkpoint_every: 6,
                task_min_len: 1,
                task_max_len: 4,
                listops_depth: 3,
                eval_samples: 8,
                decode_samples: 4,
                target_accuracy: None,
            },
        }
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        let run = tiny_run();
        let mut v = serde_json::to_value(&run).unwrap();
        assert_eq!(serde_json::from_value::<RunConfig>(v.clone()).unwrap(), run);
        v["train"]["nope"] = 1.into();
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn first_step_loss_is_near_log_vocab() {
        let mut run = tiny_run();
        run.train.total_steps = 1;
        run.train.eval_every = 0;
        let dir = tempfile::tempdir().unwrap();
        let out = train(&run, Task::Copy, dir.path(), None, |_| {}).unwrap();
        let l = out.history[0].loss;
        assert!((l - 8f64.ln()).abs() < 1.0, "{l}");
    }

    #[test]
    fn metrics_rows_increase_and_resume_matches() {
        let run = tiny_run();
        let full = tempfile::tempdir().unwrap();
        train(&run, Task::Reverse, full.path(), None, |_| {}).unwrap();
        let csv = fs::read_to_string(full.path().join(METRICS_FILE)).unwrap();
        let steps: Vec<u64> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(steps, (1..=12).collect::<Vec<_>>());

        let part = tempfile::tempdir().unwrap();
        let mut short = run.clone();
        short.train.total_steps = 6;
        train(&short, Task::Reverse, part.path(), None, |_| {}).unwrap();
        let ckpt = part.path().join(CHECKPOINT_FILE);
        let resumed = tempfile::tempdir().unwrap();
        fs::copy(&ckpt, resumed.path().join("start.bin")).unwrap();
        train(&run, Task::Reverse, part.path(), Some(&resumed.path().join("start.bin")), |_| {}).unwrap();
        assert_eq!(
            fs::read(full.path().join(CHECKPOINT_FILE)).unwrap(),
            fs::read(part.path().join(CHECKPOINT_FILE)).unwrap()
        );
        assert_eq!(csv, fs::read_to_string(part.path().join(METRICS_FILE)).unwrap());
    }
}
