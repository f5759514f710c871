//! Two-stage training: emotion-encoder pre-training on labeled data, then
//! joint training of everything under the weighted six-term objective.
//!
//! Every sample in a batch gets its own graph; gradients are accumulated in
//! batch order, so a run is a pure function of the config and the data.
//! All randomness (batch choice, crops, dropout) is derived from
//! `(seed, stage, step, sample)`, which makes resuming exact.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::checkpoint::Checkpoint;
use crate::dataset::{Dataset, Sample};
use crate::emotion::EmotionVars;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, EMO_PREFIX};
use crate::nn::{Adam, AdamConfig, GradBuffer, Graph};
use crate::npc::{usage_entropy, NpcInput};
use crate::scalar::Scalar;
use crate::seed::mix_seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainEmotion,
    Joint,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::PretrainEmotion => 1,
            Stage::Joint => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MelLoss {
    Mse,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mel: f64,
    pub pitch: f64,
    pub energy: f64,
    pub duration: f64,
    pub npc: f64,
    pub emo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mel: 1.0,
            pitch: 1.0,
            energy: 1.0,
            duration: 1.0,
            npc: 1.0,
            emo: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub mel_loss: MelLoss,
    /// Linear warmup length in steps; 0 disables it.
    pub warmup_steps: u64,
    /// Global gradient-norm clip; absent means no clipping.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    pub freeze_emotion: bool,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Declared data-loading workers; recorded for the determinism contract.
    pub workers: usize,
    pub adam: AdamConfig,
    pub loss_weights: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Joint,
            lr: 0.002,
            batch_size: 32,
            max_steps: 2000,
            seed: 0,
            mel_loss: MelLoss::Mse,
            warmup_steps: 0,
            grad_clip: None,
            freeze_emotion: false,
            checkpoint_every: 0,
            workers: 1,
            adam: AdamConfig::default(),
            loss_weights: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.workers != 1 {
            return Err(Error::Config("only a single worker is supported".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Learning rate at (1-based) `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Fills the data-dependent architecture fields from a dataset.
pub fn fit_model_config<F: Scalar>(cfg: &ModelConfig, data: &Dataset<F>) -> ModelConfig {
    let mut m = cfg.clone();
    let (layers, dim) = data.ssl_shape();
    m.backbone.vocab_size = data.frontend.vocab_size();
    m.backbone.n_speakers = data.registry.n_speakers as usize;
    m.backbone.n_languages = data.registry.n_languages as usize;
    m.backbone.n_mels = data.n_mels();
    m.emotion.input_dim = dim;
    m.emotion.n_layers = layers;
    m.emotion.n_classes = data.emotions.len().max(2);
    m.emotion.emotion_dim = m.backbone.emotion_dim;
    m
}

/// Batch means of the six objective terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mel: f64,
    pub pitch: f64,
    pub energy: f64,
    pub duration: f64,
    pub npc: f64,
    pub emo: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("mel", self.mel),
            ("pitch", self.pitch),
            ("energy", self.energy),
            ("duration", self.duration),
            ("npc", self.npc),
            ("emo", self.emo),
        ]
    }

    pub fn total(&self, w: &LossWeights) -> f64 {
        w.mel * self.mel
            + w.pitch * self.pitch
            + w.energy * self.energy
            + w.duration * self.duration
            + w.npc * self.npc
            + w.emo * self.emo
    }

    /// Weighted total, or the first non-finite term by name.
    pub fn checked_total(&self, w: &LossWeights, step: u64, batch: &[String]) -> Result<f64> {
        if let Some((name, _)) = self.terms().iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: name.to_string(),
                step,
                batch: batch.to_vec(),
            });
        }
        Ok(self.total(w))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: u64,
    pub losses: LossBreakdown,
    /// Weighted sum of the logged terms.
    pub total: f64,
    /// The differentiated objective, summed sample by sample as the
    /// per-sample graphs were built; equals `total` up to rounding.
    pub objective: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub labeled: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub code_entropy: Option<f64>,
    pub wall_time_s: f64,
}

impl StepRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serialises")
    }
}

/// Progress markers kept in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    pub step: u64,
    pub variance_init: bool,
    pub codebook_init: bool,
}

impl TrainState {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            step: 0,
            variance_init: false,
            codebook_init: false,
        }
    }
}

/// Graph outputs of one training sample.
struct SampleTerms<F> {
    mel: Option<Var>,
    pitch: Option<Var>,
    energy: Option<Var>,
    duration: Option<Var>,
    npc: Option<Var>,
    emo: Option<Var>,
    assignments: Option<Vec<(Array2<F>, Vec<usize>)>>,
}

fn mean_abs_error<F: Scalar>(g: &Graph<'_, F>, pred: Var, target: &Array2<F>) -> Var {
    g.mean_all(g.abs(g.add_const(pred, &target.mapv(|v| -v))))
}

fn mel_error<F: Scalar>(g: &Graph<'_, F>, pred: Var, target: &Array2<F>, kind: MelLoss) -> Var {
    let diff = g.add_const(pred, &target.mapv(|v| -v));
    match kind {
        MelLoss::Mse => g.mean_all(g.square(diff)),
        MelLoss::L1 => g.mean_all(g.abs(diff)),
    }
}

pub struct Trainer<F: Scalar> {
    pub model: Model<F>,
    pub cfg: TrainConfig,
    pub adam: Adam<F>,
    pub state: TrainState,
    pub emotions: Vec<String>,
}

impl<F: Scalar> Trainer<F> {
    /// Fresh trainer for `cfg.stage`; the model config is fitted to `data`.
    pub fn new(cfg: &TrainConfig, data: &Dataset<F>) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&fit_model_config(&cfg.model, data))?;
        Ok(Self::assemble(
            model,
            cfg,
            TrainState::new(cfg.stage),
            None,
            data.emotions.clone(),
        ))
    }

    /// Continues from a checkpoint. A checkpoint of the same stage resumes
    /// (optimizer state and step kept); one from the other stage starts the
    /// configured stage from step 0 with those parameters.
    pub fn from_checkpoint(cfg: &TrainConfig, data: &Dataset<F>, ckpt: Checkpoint<F>) -> Result<Self> {
        cfg.validate()?;
        let expected = fit_model_config(&cfg.model, data);
        let same_stage = ckpt.state.stage == cfg.stage;
        let (model, state, adam) = ckpt.into_training_parts(&expected)?;
        let (state, adam) = if same_stage {
            (state, adam)
        } else {
            let mut fresh = TrainState::new(cfg.stage);
            fresh.codebook_init = state.codebook_init;
            (fresh, None)
        };
        Ok(Self::assemble(model, cfg, state, adam, data.emotions.clone()))
    }

    fn assemble(
        mut model: Model<F>,
        cfg: &TrainConfig,
        state: TrainState,
        adam: Option<Adam<F>>,
        emotions: Vec<String>,
    ) -> Self {
        let n = model.store.len();
        match cfg.stage {
            Stage::PretrainEmotion => {
                model.store.set_all_trainable(false);
                model.store.set_trainable_prefix(&format!("{EMO_PREFIX}."), true);
            }
            Stage::Joint => {
                model.store.set_all_trainable(true);
                if cfg.freeze_emotion {
                    model.store.set_trainable_prefix(&format!("{EMO_PREFIX}."), false);
                }
            }
        }
        let mut adam = adam.unwrap_or_else(|| Adam::new(cfg.adam, n));
        adam.cfg = cfg.adam;
        Self {
            model,
            cfg: cfg.clone(),
            adam,
            state,
            emotions,
        }
    }

    pub fn checkpoint(&self, frontend: Option<&crate::frontend::Frontend>) -> Checkpoint<F> {
        Checkpoint::capture(
            &self.model,
            Some(&self.cfg),
            self.state,
            Some(&self.adam),
            frontend.cloned(),
            self.emotions.clone(),
        )
    }

    fn pool(&self, data: &Dataset<F>) -> Result<Vec<usize>> {
        match self.cfg.stage {
            Stage::PretrainEmotion => {
                let idx = data.labeled_indices();
                if idx.is_empty() {
                    return Err(Error::Config("emotion pre-training needs labeled utterances".into()));
                }
                Ok(idx)
            }
            Stage::Joint => Ok((0..data.len()).collect()),
        }
    }

    /// Indices of the batch used at (1-based) `step`.
    pub fn batch_indices(&self, data: &Dataset<F>, step: u64) -> Result<Vec<usize>> {
        let pool = self.pool(data)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seeds(&[self.cfg.seed, self.cfg.stage.tag(), step]));
        let k = self.cfg.batch_size.min(pool.len());
        Ok(sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect())
    }

    fn sample_seed(&self, step: u64, index: usize, stream: u64) -> u64 {
        mix_seeds(&[self.cfg.seed, self.cfg.stage.tag(), step, index as u64, stream])
    }

    fn emotion_vars(&self, g: &Graph<'_, F>, s: &Sample<F>, step: u64, i: usize) -> Result<EmotionVars> {
        let mut crop = ChaCha8Rng::seed_from_u64(self.sample_seed(step, i, 1));
        self.model.emotion.encode_reference(g, &s.ssl, &mut crop)
    }

    fn forward_sample(&self, g: &Graph<'_, F>, s: &Sample<F>, step: u64, i: usize) -> Result<SampleTerms<F>> {
        let m = &self.model;
        let e = self.emotion_vars(g, s, step, i)?;
        let emo = m.emotion.emotion_loss(g, e, s.utt.emotion_label)?;
        if self.cfg.stage == Stage::PretrainEmotion {
            return Ok(SampleTerms {
                mel: None,
                pitch: None,
                energy: None,
                duration: None,
                npc: None,
                emo,
                assignments: None,
            });
        }
        let am = &m.acoustic;
        let lang = s.utt.language_id as usize;
        let spk = s.utt.speaker_id as usize;
        let hidden = am.encode_text(g, &s.ids, lang, spk, e.deep)?;
        let var = am.predict_variances(g, hidden);
        let adapted = am.add_variance_embeddings(g, hidden, g.constant(s.pitch.clone()), g.constant(s.energy.clone()));
        let frames = am.length_regulate(g, adapted, &s.utt.durations);
        let cond = g.concat_cols(&[e.shallow, e.deep]);
        let mel = am.decode_mel(g, frames, e.shallow, cond);
        let mut terms = SampleTerms {
            mel: Some(mel_error(g, mel, &s.mel, self.cfg.mel_loss)),
            pitch: Some(mean_abs_error(g, var.pitch, &s.pitch)),
            energy: Some(mean_abs_error(g, var.energy, &s.energy)),
            duration: Some(mean_abs_error(g, var.log_durations, &s.log_durations)),
            npc: None,
            emo,
            assignments: None,
        };
        if self.cfg.loss_weights.npc != 0.0 && s.n_frames() > m.cfg.npc.mask_size {
            let input = match m.cfg.npc.input {
                NpcInput::Hidden => frames,
                NpcInput::Mel => g.constant(s.mel.clone()),
            };
            let out = m.npc.forward(g, input, &s.mel, &m.codebooks)?;
            terms.npc = Some(out.loss);
            terms.assignments = Some(out.assignments);
        }
        Ok(terms)
    }

    fn initialise_joint(&mut self, data: &Dataset<F>) {
        if self.cfg.stage != Stage::Joint || self.state.variance_init {
            return;
        }
        let (d, p, e) = data.target_means();
        self.model.acoustic.init_variance_biases(&mut self.model.store, d, p, e);
        self.state.variance_init = true;
    }

    /// One optimisation step over the next batch.
    pub fn step(&mut self, data: &Dataset<F>) -> Result<StepRecord> {
        let started = Instant::now();
        self.initialise_joint(data);
        let step = self.state.step + 1;
        let batch = self.batch_indices(data, step)?;
        let w = self.cfg.loss_weights;
        let n = batch.len() as f64;
        let labeled = batch.iter().filter(|&&i| data.samples[i].utt.is_labeled()).count();
        let npc_count = batch
            .iter()
            .filter(|&&i| data.samples[i].n_frames() > self.model.cfg.npc.mask_size)
            .count();
        let scale = |count: usize| if count == 0 { 0.0 } else { 1.0 / count as f64 };
        let coef = [
            w.mel / n,
            w.pitch / n,
            w.energy / n,
            w.duration / n,
            w.npc * scale(npc_count),
            w.emo * scale(labeled),
        ];
        let mut losses = LossBreakdown::default();
        let mut grads = GradBuffer::new(self.model.store.len());
        let mut assignments = Vec::new();
        let mut objective = 0.0;
        for (k, &i) in batch.iter().enumerate() {
            let s = &data.samples[i];
            let g = Graph::new(&self.model.store, true, self.sample_seed(step, k, 0));
            let t = self.forward_sample(&g, s, step, k)?;
            let parts = [t.mel, t.pitch, t.energy, t.duration, t.npc, t.emo];
            let mut total: Option<Var> = None;
            for (j, (part, c)) in parts.iter().zip(coef).enumerate() {
                let Some(v) = *part else { continue };
                let value = g.scalar(v).as_f64();
                objective += c * value;
                match j {
                    0 => losses.mel += value / n,
                    1 => losses.pitch += value / n,
                    2 => losses.energy += value / n,
                    3 => losses.duration += value / n,
                    4 => losses.npc += value * scale(npc_count),
                    _ => losses.emo += value * scale(labeled),
                }
                if c != 0.0 {
                    let term = g.scale(v, F::lit(c));
                    total = Some(match total {
                        Some(acc) => g.add(acc, term),
                        None => term,
                    });
                }
            }
            if let Some(total) = total {
                if g.requires_grad(total) {
                    for (id, gr) in g.backward(total).into_params() {
                        grads.accumulate(id, gr);
                    }
                }
            }
            if let Some(a) = t.assignments {
                assignments.push(a);
            }
        }
        let ids: Vec<String> = batch.iter().map(|&i| data.samples[i].utt.utt_id.clone()).collect();
        let total = losses.checked_total(&w, step, &ids)?;
        let grad_norm = grads.global_norm();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                term: "gradient".into(),
                step,
                batch: ids,
            });
        }
        if let Some(clip) = self.cfg.grad_clip {
            if grad_norm > clip {
                grads.scale(clip / grad_norm);
            }
        }
        let lr = self.cfg.lr_at(step);
        self.adam.update(&mut self.model.store, &grads, lr);
        let code_entropy = self.update_codebooks(&assignments, step);
        self.state.step = step;
        Ok(StepRecord {
            stage: self.cfg.stage,
            step,
            losses,
            total,
            objective,
            lr,
            grad_norm,
            labeled,
            code_entropy,
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    }

    fn update_codebooks(&mut self, batch: &[Vec<(Array2<F>, Vec<usize>)>], step: u64) -> Option<f64> {
        if batch.is_empty() {
            return None;
        }
        let k = self.model.cfg.npc.codebook_size;
        let mut counts = vec![0usize; k];
        for a in batch {
            for (_, idx) in a {
                idx.iter().for_each(|&i| counts[i] += 1);
            }
        }
        let model = &mut self.model;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seeds(&[self.cfg.seed, self.cfg.stage.tag(), step, 0xC0DE]));
        if !self.state.codebook_init {
            for (gi, book) in model.codebooks.iter_mut().enumerate() {
                let rows: Vec<_> = batch.iter().map(|a| a[gi].0.view()).collect();
                let samples = ndarray::concatenate(ndarray::Axis(0), &rows).expect("equal widths");
                book.init_from_samples(&samples, &mut rng);
            }
            self.state.codebook_init = true;
        } else {
            model.npc.update_codebooks(&mut model.codebooks, batch, &mut rng);
        }
        Some(usage_entropy(&counts))
    }

    /// Runs until `max_steps`, passing each record to `on_step`; the callback
    /// may stop the run early by returning `false`.
    pub fn run(
        &mut self,
        data: &Dataset<F>,
        mut on_step: impl FnMut(&Self, &StepRecord) -> Result<bool>,
    ) -> Result<()> {
        while self.state.step < self.cfg.max_steps {
            let rec = self.step(data)?;
            if !on_step(self, &rec)? {
                break;
            }
        }
        Ok(())
    }

    /// Gradient norm per parameter group on the next batch, without updating.
    pub fn gradient_probe(&self, data: &Dataset<F>) -> Result<Vec<(String, f64)>> {
        let step = self.state.step + 1;
        let batch = self.batch_indices(data, step)?;
        let mut grads = GradBuffer::new(self.model.store.len());
        for (k, &i) in batch.iter().enumerate() {
            let g = Graph::new(&self.model.store, true, self.sample_seed(step, k, 0));
            let t = self.forward_sample(&g, &data.samples[i], step, k)?;
            let parts: Vec<Var> = [t.mel, t.pitch, t.energy, t.duration, t.npc, t.emo]
                .into_iter()
                .flatten()
                .collect();
            let mut total = parts[0];
            for &p in &parts[1..] {
                total = g.add(total, p);
            }
            for (id, gr) in g.backward(total).into_params() {
                grads.accumulate(id, gr);
            }
        }
        let store = &self.model.store;
        Ok(self
            .model
            .parameter_groups()
            .into_iter()
            .map(|group| {
                let sq: f64 = store
                    .ids()
                    .filter(|&id| store.name(id).starts_with(&group))
                    .filter_map(|id| grads.get(id))
                    .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()).collect::<Vec<_>>())
                    .sum();
                (group, sq.sqrt())
            })
            .collect())
    }
}

/// Classification accuracy of the shallow head, the deep head and their
/// summed logits, in evaluation mode with a fixed crop seed per utterance.
pub fn emotion_accuracy<F: Scalar>(model: &Model<F>, data: &Dataset<F>, crop_seed: u64) -> Result<(f64, f64, f64)> {
    let labeled = data.labeled_indices();
    if labeled.is_empty() {
        return Err(Error::Config("no labeled utterances to score".into()));
    }
    let argmax = |v: &[f64]| {
        v.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
            .0
    };
    let mut hits = [0usize; 3];
    for &i in &labeled {
        let s = &data.samples[i];
        let g = Graph::eval(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seeds(&[crop_seed, i as u64]));
        let e = model.emotion.encode_reference(&g, &s.ssl, &mut rng)?;
        let (ls, ld) = model.emotion.classify(&g, e);
        let ls: Vec<f64> = g.value(ls).iter().map(|v| v.as_f64()).collect();
        let ld: Vec<f64> = g.value(ld).iter().map(|v| v.as_f64()).collect();
        let lc: Vec<f64> = ls.iter().zip(&ld).map(|(a, b)| a + b).collect();
        let label = s.utt.emotion_label.unwrap() as usize;
        for (h, logits) in hits.iter_mut().zip([&ls, &ld, &lc]) {
            if argmax(logits) == label {
                *h += 1;
            }
        }
    }
    let n = labeled.len() as f64;
    Ok((hits[0] as f64 / n, hits[1] as f64 / n, hits[2] as f64 / n))
}

/// Appends records to a line-delimited log.
pub fn append_log(path: impl AsRef<Path>, records: &[StepRecord]) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(f, "{}", r.to_json_line()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(LossBreakdown::default().total(&w), 0.0);
        let l = LossBreakdown {
            mel: 1.0,
            pitch: 2.0,
            energy: 3.0,
            duration: 4.0,
            npc: 5.0,
            emo: 6.0,
        };
        assert_eq!(l.total(&w), 21.0);
        let bad = LossBreakdown { npc: f64::NAN, ..l };
        match bad.checked_total(&w, 7, &["u1".into()]) {
            Err(Error::NonFinite { term, step, batch }) => {
                assert_eq!(term, "npc");
                assert_eq!(step, 7);
                assert_eq!(batch, vec!["u1".to_string()]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_toml_roundtrip_and_defaults() {
        let cfg = TrainConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        let partial = TrainConfig::from_toml("lr = 0.001\n[loss_weights]\nnpc = 0.5\n").unwrap();
        assert_eq!(partial.lr, 0.001);
        assert_eq!(partial.loss_weights.npc, 0.5);
        assert_eq!(partial.loss_weights.mel, 1.0);
        assert_eq!(partial.batch_size, 32);
        assert!(TrainConfig::from_toml("lr = -1.0").is_err());
        assert!(TrainConfig::from_toml("batch_size = 0").is_err());
    }

    #[test]
    fn warmup_is_linear() {
        let cfg = TrainConfig {
            warmup_steps: 4,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(1), 0.0005);
        assert_eq!(cfg.lr_at(8), 0.002);
    }
}
