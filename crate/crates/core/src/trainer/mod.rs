//! Training the toy model on k-varied counterfactual addition, and the
//! base/contrast accuracy harness.

pub mod backprop;
mod eval;

pub use eval::{
    bucket, eval_accuracy, eval_accuracy_with, eval_items, greedy_decode, in_distribution_accuracy, Bucket, DecodeAblation,
    EvalItem, EvalReport, ModelPredictor, Predictor,
};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::model::{save_model, Model, ModelConfig};
use crate::tasks::{sample_instance, TaskSpec};
use crate::tokenizer::{render_prompt, Example, TokenSeq, Vocab};
use backprop::Packed;

/// Weighted task specs plus the per-sequence shot range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub entries: Vec<(TaskSpec, f64)>,
    /// Inclusive range the shot count of each sequence is drawn from.
    pub shots: (usize, usize),
}

impl Mixture {
    /// Off-by-k addition with `k ∈ {-2..2}` equally likely, a fifth of the
    /// mass on single-operand prompts, 1 to 16 shots.
    pub fn k_varied() -> Self {
        let mut entries = Vec::new();
        for k in -2..=2 {
            entries.push((TaskSpec::off_by_k(k, 16).with_constraint(crate::tasks::Constraint::None), 0.16));
            entries.push((
                TaskSpec::off_by_k(k, 16)
                    .with_constraint(crate::tasks::Constraint::None)
                    .with_unary(true),
                0.04,
            ));
        }
        Self {
            entries,
            shots: (1, 16),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::InvalidArgument("mixture is empty".into()));
        }
        if self.entries.iter().any(|(_, w)| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidArgument("mixture weights must be positive".into()));
        }
        let (lo, hi) = self.shots;
        if lo > hi {
            return Err(Error::InvalidArgument(format!("shot range {lo}..={hi} is empty")));
        }
        for (spec, _) in &self.entries {
            spec.validate()?;
        }
        Ok(())
    }

    /// Weights normalised to sum to one.
    pub fn normalized(&self) -> Vec<f64> {
        let total: f64 = self.entries.iter().map(|(_, w)| w).sum();
        self.entries.iter().map(|(_, w)| w / total).collect()
    }
}

/// One training sequence: a k-varied prompt with every answer rendered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainSeq {
    pub tokens: TokenSeq,
    /// True at answer tokens (the loss targets).
    pub mask: Vec<bool>,
    /// Mixture entry the sequence was drawn from.
    pub entry: usize,
    pub k: i32,
    /// The query's answer.
    pub answer: String,
    /// Length of the prompt before the query answer.
    pub prompt_len: usize,
}

fn sample_seq<R: Rng + ?Sized>(
    mixture: &Mixture,
    dist: &WeightedIndex<f64>,
    vocab: &Vocab,
    max_seq: usize,
    rng: &mut R,
) -> Result<TrainSeq> {
    let entry = dist.sample(rng);
    let mut spec = mixture.entries[entry].0.clone();
    spec.n_shots = rng.gen_range(mixture.shots.0..=mixture.shots.1);
    let inst = sample_instance(&spec, rng, false)?;
    let mut examples: Vec<Example> = inst
        .shots
        .iter()
        .map(|s| Example::new(s.input.clone(), s.contrast.clone()))
        .collect();
    examples.push(Example::query(inst.query.input.clone()));
    let style = spec.kind.style();
    let (text, positions) = render_prompt(&examples, style)?;
    let mut tokens = vocab.encode(&text)?;
    tokens.extend(vocab.encode_raw(style.lead_in())?);
    let prompt_len = tokens.len();
    tokens.extend(vocab.encode_raw(&inst.query.contrast)?);
    if tokens.len() > max_seq {
        return Err(Error::InvalidTask(format!(
            "{} with {} shots renders {} tokens, above max_seq {max_seq}",
            spec.name(),
            spec.n_shots,
            tokens.len()
        )));
    }
    let mut mask = vec![false; tokens.len()];
    for span in positions.examples.iter().filter_map(|e| e.answer) {
        mask[span.start..span.end].iter_mut().for_each(|m| *m = true);
    }
    mask[prompt_len..].iter_mut().for_each(|m| *m = true);
    Ok(TrainSeq {
        tokens,
        mask,
        entry,
        k: spec.k,
        answer: inst.query.contrast,
        prompt_len,
    })
}

/// `n` sequences drawn from `mixture`, deterministic in `seed`.
pub fn build_dataset(mixture: &Mixture, n: usize, seed: u64, max_seq: usize) -> Result<Vec<TrainSeq>> {
    let mut rng = crate::rng(seed);
    sample_stream(mixture, n, max_seq, &mut rng)
}

fn sample_stream<R: Rng + ?Sized>(mixture: &Mixture, n: usize, max_seq: usize, rng: &mut R) -> Result<Vec<TrainSeq>> {
    mixture.validate()?;
    let dist = WeightedIndex::new(mixture.normalized()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let vocab = Vocab::new();
    (0..n).map(|_| sample_seq(mixture, &dist, &vocab, max_seq, rng)).collect()
}

/// Missing fields in a serialized config take their [`Default`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f32,
    pub batch: usize,
    pub steps: usize,
    /// Linear warm-up steps.
    pub warmup: usize,
    /// Cosine decay floor as a fraction of `lr`.
    pub min_lr_frac: f32,
    /// Global gradient-norm clip (0 disables).
    pub clip: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub seed: u64,
    pub mixture: Mixture,
    /// Steps between loss-curve entries.
    pub log_every: usize,
    /// Steps between checkpoints (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(Vocab::new().len()),
            lr: 3e-4,
            batch: 64,
            steps: 20_000,
            warmup: 200,
            min_lr_frac: 0.1,
            clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            mixture: Mixture::k_varied(),
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Shorter schedule with a larger step size, sized for one CPU core.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            batch: 32,
            steps: 6_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mixture.validate()?;
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f32 {
        let warm = ((step + 1) as f32 / self.warmup.max(1) as f32).min(1.0);
        let progress = step as f32 / self.steps.max(1) as f32;
        let cosine = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
        self.lr * warm * (self.min_lr_frac + (1.0 - self.min_lr_frac) * cosine)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
}

pub struct TrainOutcome {
    pub model: Model,
    pub curve: Vec<CurvePoint>,
}

pub fn write_curve_csv<W: Write>(curve: &[CurvePoint], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["step", "loss", "lr"])?;
    for p in curve {
        wtr.write_record([p.step.to_string(), format!("{:.6}", p.loss), format!("{:.8}", p.lr)])?;
    }
    wtr.flush().map_err(Error::IoBare)?;
    Ok(())
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model, grad: &Model, lr: f32, cfg: &TrainConfig, scale: f32) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in model.params_mut().into_iter().zip(grad.params()).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
            }
        }
    }
}

/// Options that do not affect the trained weights.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub checkpoint_dir: Option<PathBuf>,
    /// Called with every logged curve point.
    pub on_log: Option<&'a mut dyn FnMut(&CurvePoint)>,
}

/// Trains a fresh model. Deterministic given `config`.
pub fn train(config: &TrainConfig, hooks: TrainHooks<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = Model::init(config.model.clone(), config.seed)?;
    let mut adam = Adam::new(&model);
    let mut rng = crate::rng(config.seed ^ 0x5eed_da7a);
    let mut curve = Vec::new();
    let TrainHooks {
        checkpoint_dir,
        mut on_log,
    } = hooks;
    for step in 0..config.steps {
        let seqs = sample_stream(&config.mixture, config.batch, config.model.max_seq, &mut rng)?;
        let mut batch = Packed::default();
        for s in &seqs {
            batch.push(&s.tokens, &s.mask);
        }
        let (loss, tape) = backprop::forward(&model, &batch);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let grad = backprop::backward(&model, &batch, tape);
        let norm = grad
            .params()
            .iter()
            .flat_map(|p| p.iter())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt() as f32;
        if !norm.is_finite() {
            return Err(Error::Diverged { step, loss: norm });
        }
        let scale = if config.clip > 0.0 && norm > config.clip {
            config.clip / norm
        } else {
            1.0
        };
        let lr = config.lr_at(step);
        adam.step(&mut model, &grad, lr, config, scale);
        if step % config.log_every.max(1) == 0 || step + 1 == config.steps {
            let p = CurvePoint { step, loss, lr };
            if let Some(f) = on_log.as_mut() {
                f(&p);
            }
            curve.push(p);
        }
        if let Some(dir) = &checkpoint_dir {
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
                save_model(&model, dir.join(format!("step{:06}.filab", step + 1)))?;
            }
        }
    }
    Ok(TrainOutcome { model, curve })
}

/// Mean loss of `model` on `seqs` computed by the training forward pass.
pub fn batch_loss(model: &Model, seqs: &[TrainSeq]) -> f32 {
    let mut batch = Packed::default();
    for s in seqs {
        batch.push(&s.tokens, &s.mask);
    }
    backprop::forward(model, &batch).0
}

pub fn save_curve(curve: &[CurvePoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    write_curve_csv(curve, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_cover_exactly_the_answers() {
        let v = Vocab::new();
        let seqs = build_dataset(&Mixture::k_varied(), 50, 3, 256).unwrap();
        for s in &seqs {
            let text: Vec<Option<char>> = s.tokens.iter().map(|&t| v.symbol(t)).collect();
            for (i, &m) in s.mask.iter().enumerate() {
                let eq = text[..i].iter().rposition(|&c| c == Some('='));
                let nl = text[..i].iter().rposition(|&c| c == Some('\n'));
                let in_answer = match (eq, nl) {
                    (Some(e), Some(n)) => n < e && text[i] != Some('\n'),
                    (Some(_), None) => text[i] != Some('\n'),
                    _ => false,
                };
                assert_eq!(m, in_answer, "position {i} of {:?}", v.decode(&s.tokens));
            }
        }
    }

    #[test]
    fn identity_mixture_answers_are_sums() {
        let mix = Mixture {
            entries: vec![(TaskSpec::off_by_k(0, 4).with_constraint(crate::tasks::Constraint::None), 1.0)],
            shots: (2, 4),
        };
        let v = Vocab::new();
        for s in build_dataset(&mix, 30, 1, 256).unwrap() {
            let text = v.decode(&s.tokens).unwrap();
            for line in text.lines() {
                let (lhs, rhs) = line.split_once('=').unwrap();
                let sum: i64 = lhs.split('+').map(|p| p.parse::<i64>().unwrap()).sum();
                assert_eq!(rhs.parse::<i64>().unwrap(), sum);
            }
        }
    }

    #[test]
    fn overflow_names_the_spec() {
        match build_dataset(&Mixture::k_varied(), 10, 0, 20) {
            Err(Error::InvalidTask(m)) => assert!(m.contains("off-by-"), "{m}"),
            other => panic!("unexpected {:?}", other.map(|v| v.len())),
        }
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"steps": 7, "lr": 0.01}"#).unwrap();
        assert_eq!(c.steps, 7);
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.batch, TrainConfig::default().batch);
        assert_eq!(c.mixture, Mixture::k_varied());
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let mut cfg = TrainConfig::default();
        cfg.steps = 0;
        cfg.seed = 4;
        let out = train(&cfg, TrainHooks::default()).unwrap();
        assert!(out.model.bit_eq(&Model::init(cfg.model.clone(), 4).unwrap()));
        assert!(out.curve.is_empty());
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        let cfg = TrainConfig::desk();
        assert!(cfg.lr_at(0) < cfg.lr_at(cfg.warmup));
        assert!((cfg.lr_at(cfg.warmup) - cfg.lr).abs() < 1e-5);
        assert!((cfg.lr_at(cfg.steps) - cfg.lr * cfg.min_lr_frac).abs() < 1e-6);
    }
}
