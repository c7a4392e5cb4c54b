//! Memorization training.
//!
//! Importance mode draws `⌈n·alpha⌉` items per epoch without replacement with
//! probability proportional to each item's importance, walks them in draw
//! order as mini-batches, and after each forward pass sets a drawn item's
//! importance to `max(loss, floor)`. Items never drawn keep the initial
//! importance, which is large enough that unseen data is picked first.
//! Uniform mode is one shuffled pass per epoch.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_items, EvalItem};
use crate::kb::{Dataset, Triplet};
use crate::memorizer::{format_input, format_question, gradients, Batch, Parameters, Sample, TemplateTable, Vocab};
use crate::seed::{derive_seed, rng_from_seed, Rng};

/// Finetuning patience in epochs.
pub const QA_PATIENCE_EPOCHS: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Importance,
    Uniform,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Importance => "importance",
            Mode::Uniform => "uniform",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "importance" => Ok(Mode::Importance),
            "uniform" => Ok(Mode::Uniform),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub init_importance: f64,
    pub importance_floor: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: u64,
    /// Optional hard cap on optimizer steps.
    pub max_steps: Option<u64>,
    pub eval_every: u64,
    pub patience_epochs: u64,
    pub em_stop_threshold: f64,
    pub seed: u64,
    /// Redraw the importance sample before every batch instead of once per
    /// epoch.
    pub resample_per_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.3,
            init_importance: 1e6,
            importance_floor: 1e-4,
            batch_size: 32,
            learning_rate: 1e-3,
            max_epochs: 200,
            max_steps: None,
            eval_every: 100,
            patience_epochs: 10,
            em_stop_threshold: 0.96,
            seed: 0,
            resample_per_batch: false,
        }
    }
}

impl TrainConfig {
    /// Defaults with the shorter finetuning patience.
    pub fn for_qa() -> Self {
        TrainConfig {
            patience_epochs: QA_PATIENCE_EPOCHS,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(self.importance_floor > 0.0 && self.importance_floor.is_finite()) {
            return bad("importance_floor must be positive");
        }
        if !(self.init_importance > self.importance_floor && self.init_importance.is_finite()) {
            return bad("init_importance must be finite and exceed importance_floor");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if !(0.0..=1.0).contains(&self.em_stop_threshold) {
            return bad("em_stop_threshold must lie in [0, 1]");
        }
        Ok(())
    }

    /// Items drawn per importance epoch: `⌈n·alpha⌉`.
    pub fn subset_size(&self, n: usize) -> usize {
        (((n as f64) * self.alpha - 1e-9).ceil() as usize).clamp(1, n.max(1))
    }
}

/// Weighted sampling of `k` distinct indices, each drawn with probability
/// proportional to its weight among those not yet drawn. Every index gets the
/// key `-ln(u)/w` with `u` uniform on (0, 1]; the `k` smallest keys win and are
/// returned in ascending key order.
pub fn sample_subset(weights: &[f64], k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if k > weights.len() {
        return Err(Error::SampleTooLarge { k, n: weights.len() });
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::Config(format!("sampling weight {w} is not positive and finite")));
    }
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let u = 1.0 - rng.random::<f64>();
            (-libm::log(u) / w, i)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(keyed.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Bias-corrected adaptive-moment optimizer with constant learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Everything besides the parameters that a resumed run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub importance: Vec<f64>,
    pub epoch: u64,
    pub step: u64,
    pub adam: Adam,
    pub rng: Rng,
    pub best_f1: Option<f64>,
    pub best_step: Option<u64>,
    /// Epoch count at the time of the last eval-F1 improvement.
    pub last_improve_epoch: u64,
}

impl TrainState {
    pub fn new(n_items: usize, n_params: usize, cfg: &TrainConfig) -> Self {
        TrainState {
            importance: vec![cfg.init_importance; n_items],
            epoch: 0,
            step: 0,
            adam: Adam::new(n_params),
            rng: rng_from_seed(derive_seed(cfg.seed, "train")),
            best_f1: None,
            best_step: None,
            last_improve_epoch: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub epoch: u64,
    pub em: f64,
    pub f1: f64,
    pub train_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub points: Vec<CurvePoint>,
}

pub const CURVE_HEADER: &str = "step,epoch,em,f1,train_loss,seconds";

impl Curve {
    pub fn push(&mut self, p: CurvePoint) -> Result<()> {
        if let Some(last) = self.points.last() {
            if p.step <= last.step {
                return Err(Error::Config(format!(
                    "curve steps must increase: {} after {}",
                    p.step, last.step
                )));
            }
        }
        self.points.push(p);
        Ok(())
    }

    pub fn last(&self) -> Option<&CurvePoint> {
        self.points.last()
    }

    /// First step whose eval EM reaches `threshold`.
    pub fn steps_to(&self, threshold: f64) -> Option<u64> {
        self.points.iter().find(|p| p.em >= threshold).map(|p| p.step)
    }

    pub fn best_f1(&self) -> Option<f64> {
        self.points.iter().map(|p| p.f1).reduce(f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{CURVE_HEADER}")?;
        for p in &self.points {
            writeln!(
                out,
                "{},{},{},{},{},{:.3}",
                p.step, p.epoch, p.em, p.f1, p.train_loss, p.seconds
            )?;
        }
        out.flush()
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut curve = Curve::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line.trim() != CURVE_HEADER {
                    return Err(Error::Config(format!("unexpected curve header {line:?}")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Config(format!("malformed curve line {}", i + 1));
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            curve.push(CurvePoint {
                step: f[0].parse().map_err(|_| bad())?,
                epoch: f[1].parse().map_err(|_| bad())?,
                em: num(f[2])?,
                f1: num(f[3])?,
                train_loss: num(f[4])?,
                seconds: num(f[5])?,
            })?;
        }
        Ok(curve)
    }
}

/// A prompt and the continuation the model should produce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub prompt: String,
    pub target: String,
}

/// Fixed-form examples: triplet prompt → object.
pub fn memorization_examples(triplets: &[Triplet]) -> Vec<Example> {
    triplets
        .iter()
        .map(|t| Example {
            prompt: format_input(t),
            target: t.object().to_string(),
        })
        .collect()
}

/// Question → object pairs; fails listing every relation without a template.
pub fn qa_examples(triplets: &[Triplet], table: &TemplateTable) -> Result<Vec<Example>> {
    let missing = table.missing(triplets.iter().map(|t| t.relation()));
    if !missing.is_empty() {
        return Err(Error::MissingTemplate(missing));
    }
    triplets
        .iter()
        .map(|t| {
            Ok(Example {
                prompt: format_question(t, table)?,
                target: t.object().to_string(),
            })
        })
        .collect()
}

pub fn eval_items(examples: &[Example]) -> Vec<EvalItem> {
    examples
        .iter()
        .map(|e| EvalItem {
            prompt: e.prompt.clone(),
            golds: vec![e.target.clone()],
            group: None,
        })
        .collect()
}

/// Vocabulary covering the triplet prompts and objects of `triplets` and the
/// words of every question template, so one checkpoint serves both formats.
pub fn vocab_for(triplets: &[Triplet], templates: Option<&TemplateTable>) -> Result<Vocab> {
    let mut texts: Vec<String> = Vec::with_capacity(2 * triplets.len());
    for t in triplets {
        texts.push(format_input(t));
        texts.push(t.object().to_string());
    }
    if let Some(table) = templates {
        for t in triplets {
            if let Ok(q) = format_question(t, table) {
                texts.push(q);
            }
        }
    }
    Vocab::build(texts.iter().map(String::as_str))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EmThreshold,
    Patience,
    MaxEpochs,
    MaxSteps,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub curve: Curve,
    pub stop: StopReason,
    /// Parameters and state at the best eval F1, if any eval ran.
    pub best: Option<(Parameters, TrainState)>,
}

enum Plan {
    Fixed(VecDeque<Vec<usize>>),
    Resample { remaining: usize, k: usize },
}

pub struct Trainer<'v> {
    cfg: TrainConfig,
    vocab: &'v Vocab,
    samples: Vec<Sample>,
    pub params: Parameters,
    pub state: TrainState,
}

impl<'v> Trainer<'v> {
    pub fn new(params: Parameters, vocab: &'v Vocab, examples: &[Example], cfg: TrainConfig) -> Result<Self> {
        let state = TrainState::new(examples.len(), params.len(), &cfg);
        Self::resume(params, state, vocab, examples, cfg)
    }

    pub fn resume(
        params: Parameters,
        state: TrainState,
        vocab: &'v Vocab,
        examples: &[Example],
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if examples.is_empty() {
            return Err(Error::Empty("training set"));
        }
        if params.config().vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model vocabulary size {} does not match vocabulary of {} tokens",
                params.config().vocab_size,
                vocab.len()
            )));
        }
        if state.importance.len() != examples.len() {
            return Err(Error::Config(format!(
                "training state covers {} items, dataset has {}",
                state.importance.len(),
                examples.len()
            )));
        }
        if state.adam.m.len() != params.len() || state.adam.v.len() != params.len() {
            return Err(Error::Config("optimizer state does not match the parameters".into()));
        }
        let max = params.config().max_seq_len;
        let samples: Vec<Sample> = examples
            .iter()
            .enumerate()
            .map(|(i, e)| Sample::new(vocab, &e.prompt, &e.target, i))
            .collect();
        if let Some(s) = samples.iter().find(|s| s.len() > max) {
            return Err(Error::SequenceTooLong { len: s.len(), max });
        }
        Ok(Trainer {
            cfg,
            vocab,
            samples,
            params,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn plan(&mut self, mode: Mode) -> Result<Plan> {
        let n = self.samples.len();
        let bs = self.cfg.batch_size;
        match mode {
            Mode::Uniform => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut self.state.rng);
                Ok(Plan::Fixed(order.chunks(bs).map(<[usize]>::to_vec).collect()))
            }
            Mode::Importance => {
                let k = self.cfg.subset_size(n);
                if self.cfg.resample_per_batch {
                    Ok(Plan::Resample {
                        remaining: k.div_ceil(bs),
                        k: bs.min(n),
                    })
                } else {
                    let s = sample_subset(&self.state.importance, k, &mut self.state.rng)?;
                    Ok(Plan::Fixed(s.chunks(bs).map(<[usize]>::to_vec).collect()))
                }
            }
        }
    }

    fn next_batch(&mut self, plan: &mut Plan) -> Result<Option<Vec<usize>>> {
        match plan {
            Plan::Fixed(q) => Ok(q.pop_front()),
            Plan::Resample { remaining, k } => {
                if *remaining == 0 {
                    return Ok(None);
                }
                *remaining -= 1;
                sample_subset(&self.state.importance, *k, &mut self.state.rng).map(Some)
            }
        }
    }

    /// One optimizer step on the given items; returns the mean batch loss.
    /// Importance is refreshed for the batch before the update. On a
    /// non-finite loss nothing is modified.
    pub fn train_batch(&mut self, items: &[usize], mode: Mode) -> Result<f64> {
        let batch = Batch::new(items.iter().map(|&i| self.samples[i].clone()).collect());
        let (out, grads) = gradients(&self.params, &batch)?;
        for (&item, &l) in items.iter().zip(&out.per_sample) {
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss {
                    item,
                    step: self.state.step,
                    loss: l,
                });
            }
        }
        if mode == Mode::Importance {
            for (&item, &l) in items.iter().zip(&out.per_sample) {
                self.state.importance[item] = l.max(self.cfg.importance_floor);
            }
        }
        self.state
            .adam
            .step(self.params.data_mut(), &grads.data, self.cfg.learning_rate);
        self.state.step += 1;
        Ok(out.mean)
    }

    fn epoch(&mut self, mode: Mode, mut after_step: impl FnMut(&mut Self, f64) -> Result<bool>) -> Result<bool> {
        let mut plan = self.plan(mode)?;
        while let Some(items) = self.next_batch(&mut plan)? {
            let loss = self.train_batch(&items, mode)?;
            if after_step(self, loss)? {
                return Ok(true);
            }
        }
        self.state.epoch += 1;
        Ok(false)
    }

    /// One importance-sampled epoch; returns the mean batch loss.
    pub fn train_epoch(&mut self) -> Result<f64> {
        self.plain_epoch(Mode::Importance)
    }

    /// One shuffled pass over every item; importance is left untouched.
    pub fn train_uniform_epoch(&mut self) -> Result<f64> {
        self.plain_epoch(Mode::Uniform)
    }

    fn plain_epoch(&mut self, mode: Mode) -> Result<f64> {
        let (mut sum, mut count) = (0.0, 0usize);
        self.epoch(mode, |_, l| {
            sum += l;
            count += 1;
            Ok(false)
        })?;
        Ok(sum / count.max(1) as f64)
    }

    /// Scores the current parameters on `items`.
    pub fn evaluate(&self, items: &[EvalItem]) -> Result<(f64, f64)> {
        let r = evaluate_items(&self.params, self.vocab, "eval", items)?;
        Ok((r.em, r.f1))
    }

    /// Trains until the eval EM threshold, patience, `max_epochs` or
    /// `max_steps` stops the run, evaluating every `eval_every` steps and once
    /// more at the end if the final step was not evaluated. `seconds_offset`
    /// continues the wall-clock column of a resumed curve.
    pub fn run(&mut self, mode: Mode, eval: &[EvalItem], seconds_offset: f64) -> Result<RunOutcome> {
        self.run_observed(mode, eval, seconds_offset, &mut |_, _| {})
    }

    /// [`Trainer::run`] that also hands every new curve point and the
    /// parameters it was measured on to `observe`.
    pub fn run_observed(
        &mut self,
        mode: Mode,
        eval: &[EvalItem],
        seconds_offset: f64,
        observe: &mut dyn FnMut(&CurvePoint, &Parameters),
    ) -> Result<RunOutcome> {
        if eval.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let start = Instant::now();
        let mut curve = Curve::default();
        let mut best: Option<(Parameters, TrainState)> = None;
        let mut pending = (0.0f64, 0usize);
        let mut stop = StopReason::MaxEpochs;

        let checkpoint = |t: &mut Self,
                              pending: &mut (f64, usize),
                              curve: &mut Curve,
                              best: &mut Option<(Parameters, TrainState)>,
                              observe: &mut dyn FnMut(&CurvePoint, &Parameters)|
         -> Result<Option<StopReason>> {
            let (em, f1) = t.evaluate(eval)?;
            let train_loss = if pending.1 > 0 { pending.0 / pending.1 as f64 } else { f64::NAN };
            *pending = (0.0, 0);
            let point = CurvePoint {
                step: t.state.step,
                epoch: t.state.epoch,
                em,
                f1,
                train_loss,
                seconds: seconds_offset + start.elapsed().as_secs_f64(),
            };
            observe(&point, &t.params);
            curve.push(point)?;
            if t.state.best_f1.is_none_or(|b| f1 > b) {
                t.state.best_f1 = Some(f1);
                t.state.best_step = Some(t.state.step);
                t.state.last_improve_epoch = t.state.epoch + 1;
                *best = Some((t.params.clone(), t.state.clone()));
            }
            if em >= t.cfg.em_stop_threshold {
                return Ok(Some(StopReason::EmThreshold));
            }
            if t.cfg.max_steps.is_some_and(|m| t.state.step >= m) {
                return Ok(Some(StopReason::MaxSteps));
            }
            Ok(None)
        };

        let mut stopped = None;
        if self.cfg.max_steps.is_some_and(|m| self.state.step >= m) {
            stopped = Some(StopReason::MaxSteps);
        }
        while stopped.is_none() && self.state.epoch < self.cfg.max_epochs {
            let eval_every = self.cfg.eval_every;
            let mid = self.epoch(mode, |t, loss| {
                pending.0 += loss;
                pending.1 += 1;
                if t.state.step % eval_every == 0 {
                    stopped = checkpoint(t, &mut pending, &mut curve, &mut best, &mut *observe)?;
                }
                Ok(stopped.is_some())
            })?;
            if mid {
                break;
            }
            if self.state.best_f1.is_some()
                && self.state.epoch.saturating_sub(self.state.last_improve_epoch) >= self.cfg.patience_epochs
            {
                stopped = Some(StopReason::Patience);
            }
        }
        if pending.1 > 0 {
            if let Some(r) = checkpoint(self, &mut pending, &mut curve, &mut best, observe)? {
                stopped.get_or_insert(r);
            }
        }
        if let Some(r) = stopped {
            stop = r;
        }
        Ok(RunOutcome { curve, stop, best })
    }
}

/// Finetunes on question → answer pairs with uniform passes and a fresh
/// optimizer.
pub fn qa_finetune(
    params: Parameters,
    vocab: &Vocab,
    qa_train: &[Example],
    qa_eval: &[EvalItem],
    cfg: TrainConfig,
) -> Result<(RunOutcome, Parameters)> {
    if qa_train.is_empty() {
        return Err(Error::Empty("question-answer training set"));
    }
    let mut trainer = Trainer::new(params, vocab, qa_train, cfg)?;
    let outcome = trainer.run(Mode::Uniform, qa_eval, 0.0)?;
    Ok((outcome, trainer.params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub mode: Mode,
    pub stop: StopReason,
    pub final_step: u64,
    /// Threshold (as printed) → first step reaching it, `null` if never.
    pub steps_to: BTreeMap<String, Option<u64>>,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub importance: RunOutcome,
    pub uniform: RunOutcome,
    pub summary: Vec<ArmSummary>,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

/// Config for one arm of a convergence comparison: patience is switched off,
/// so an arm ends at `em_stop_threshold` or `max_epochs`. From scratch the
/// eval F1 sits flat for tens of epochs before recall starts, and patience
/// would end both arms there.
pub fn comparison_config(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        patience_epochs: cfg.max_epochs,
        ..cfg.clone()
    }
}

/// Runs both modes from the same initial parameters and the same seeds.
pub fn compare_convergence(
    init: &Parameters,
    vocab: &Vocab,
    examples: &[Example],
    eval: &[EvalItem],
    cfg: &TrainConfig,
    thresholds: &[f64],
) -> Result<Comparison> {
    let cfg = comparison_config(cfg);
    let arm = |mode: Mode| -> Result<(RunOutcome, ArmSummary)> {
        let mut t = Trainer::new(init.clone(), vocab, examples, cfg.clone())?;
        let out = t.run(mode, eval, 0.0)?;
        let summary = ArmSummary {
            mode,
            stop: out.stop,
            final_step: t.state.step,
            steps_to: thresholds
                .iter()
                .map(|&th| (threshold_key(th), out.curve.steps_to(th)))
                .collect(),
        };
        Ok((out, summary))
    };
    let (importance, s_imp) = arm(Mode::Importance)?;
    let (uniform, s_uni) = arm(Mode::Uniform)?;
    Ok(Comparison {
        importance,
        uniform,
        summary: vec![s_imp, s_uni],
    })
}

/// Fixed-form training and eval data for a dataset.
pub fn memorization_task(train: &Dataset, eval: &Dataset) -> (Vec<Example>, Vec<EvalItem>) {
    (
        memorization_examples(&train.triplets),
        eval_items(&memorization_examples(&eval.triplets)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_size_rounds_up() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.subset_size(10), 3);
        assert_eq!(cfg.subset_size(11), 4);
        assert_eq!(cfg.subset_size(1), 1);
        let full = TrainConfig {
            alpha: 1.0,
            ..cfg
        };
        assert_eq!(full.subset_size(7), 7);
    }

    #[test]
    fn sampler_edge_cases() {
        let mut rng = rng_from_seed(1);
        let mut all = sample_subset(&[1.0, 2.0, 3.0], 3, &mut rng).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(matches!(
            sample_subset(&[1.0], 2, &mut rng),
            Err(Error::SampleTooLarge { k: 2, n: 1 })
        ));
        assert!(sample_subset(&[1.0, 0.0], 1, &mut rng).is_err());
        assert!(sample_subset(&[], 0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { alpha: 0.0, ..Default::default() },
            TrainConfig { alpha: 1.5, ..Default::default() },
            TrainConfig { importance_floor: 2e6, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { eval_every: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!(TrainConfig::for_qa().patience_epochs, 5);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // with bias correction the first update is lr·g/(|g|+eps)
        let mut adam = Adam::new(2);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[0.5, -2.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn curve_csv_round_trip() {
        let mut c = Curve::default();
        c.push(CurvePoint { step: 5, epoch: 0, em: 0.25, f1: 0.5, train_loss: 3.5, seconds: 1.25 }).unwrap();
        c.push(CurvePoint { step: 10, epoch: 1, em: 0.9, f1: 0.95, train_loss: 0.125, seconds: 2.5 }).unwrap();
        assert!(c
            .clone()
            .push(CurvePoint { step: 10, epoch: 1, em: 0.0, f1: 0.0, train_loss: 0.0, seconds: 0.0 })
            .is_err());
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with(CURVE_HEADER));
        assert_eq!(Curve::read_csv(buf.as_slice()).unwrap(), c);
        assert_eq!(c.steps_to(0.9), Some(10));
        assert_eq!(c.steps_to(0.95), None);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("importance".parse::<Mode>().unwrap(), Mode::Importance);
        assert_eq!("uniform".parse::<Mode>().unwrap(), Mode::Uniform);
        assert!("other".parse::<Mode>().is_err());
    }
}
