//! Scripted desk-scale experiments, one per acceptance criterion.
//!
//! Each experiment measures a set of named metrics and compares them with
//! the bounds in `expected_metrics.toml`. Corpus and checkpoints are built on
//! demand inside a work directory and reused by later experiments.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustic::{expansion_index, length_regulate, BackboneConfig};
use crate::checkpoint::Checkpoint;
use crate::data::synthetic::{load_texts, CorpusInfo};
use crate::data::{generate_synthetic_corpus, load_manifest, write_manifest, SyntheticCorpusSpec};
use crate::dataset::Dataset;
use crate::emotion::{cross_entropy, semi_supervised_ce, HierarchicalEmotionEncoder, ReferenceEncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{cluster_report, mean_pitch_proxy, rank_order};
use crate::model::{hex, ModelConfig};
use crate::nn::{normal, CondLayerNorm, Graph, LayerNorm, ParamStore};
use crate::npc::{Npc, NpcConfig};
use crate::synth::{extract_emotion, synthesize};
use crate::tensor_io::FeatureTensor;
use crate::training::{append_log, emotion_accuracy, Stage, StepRecord, TrainConfig, Trainer};

const EXPECTED: &str = include_str!("../expected_metrics.toml");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

impl Bound {
    pub fn holds(&self, v: f64) -> bool {
        v.is_finite() && self.min.is_none_or(|m| v >= m) && self.max.is_none_or(|m| v <= m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expected {
    pub criterion: u32,
    pub description: String,
    pub metrics: BTreeMap<String, Bound>,
    /// Values measured in the run that fixed the bounds.
    #[serde(default)]
    pub oracle: BTreeMap<String, f64>,
}

pub fn expected_metrics() -> Result<BTreeMap<String, Expected>> {
    Ok(toml::from_str(EXPECTED)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCheck {
    pub name: String,
    pub measured: Option<f64>,
    pub bound: Bound,
    pub pass: bool,
}

/// One line of a report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: String,
    pub criterion: u32,
    pub config_hash: String,
    pub pass: bool,
    pub checks: Vec<MetricCheck>,
    /// Measured values without a bound.
    pub info: BTreeMap<String, f64>,
    pub runtime_s: f64,
}

impl Report {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }

    pub fn summary(&self) -> String {
        let failed: Vec<String> = self
            .checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| format!("{}={}", c.name, c.measured.map_or("missing".into(), fmt_value)))
            .collect();
        let shown: Vec<String> = self
            .checks
            .iter()
            .map(|c| format!("{}={}", c.name, c.measured.map_or("missing".into(), fmt_value)))
            .collect();
        format!(
            "criterion {:>2} {:<20} {}  [{}]{}",
            self.criterion,
            self.experiment,
            if self.pass { "PASS" } else { "FAIL" },
            shown.join(", "),
            if failed.is_empty() {
                String::new()
            } else {
                format!(" failed: {}", failed.join(", "))
            }
        )
    }
}

fn fmt_value(v: f64) -> String {
    if v == 0.0 || (1e-3..1e5).contains(&v.abs()) {
        format!("{v:.4}")
    } else {
        format!("{v:.3e}")
    }
}

/// What an experiment measured.
#[derive(Debug, Clone, Default)]
pub struct Measured {
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
}

impl Measured {
    fn new(config: &impl Serialize) -> Self {
        let json = serde_json::to_string(config).expect("config serialises");
        Self {
            config_hash: hex(&Sha256::digest(json.as_bytes())),
            metrics: BTreeMap::new(),
        }
    }

    fn with_hash(hash: String) -> Self {
        Self {
            config_hash: hash,
            metrics: BTreeMap::new(),
        }
    }

    fn set(&mut self, name: &str, v: f64) {
        self.metrics.insert(name.to_string(), v);
    }
}

type RunFn = fn(&mut Workspace) -> Result<Measured>;

pub struct Experiment {
    pub name: &'static str,
    pub run: RunFn,
}

pub fn experiments() -> Vec<Experiment> {
    vec![
        Experiment {
            name: "npc_mask_probe",
            run: npc_mask_probe,
        },
        Experiment {
            name: "vq_straight_through",
            run: vq_straight_through,
        },
        Experiment {
            name: "cln_identity",
            run: cln_identity,
        },
        Experiment {
            name: "length_regulator",
            run: length_regulator,
        },
        Experiment {
            name: "loss_additivity",
            run: loss_additivity,
        },
        Experiment {
            name: "group_separation",
            run: group_separation,
        },
        Experiment {
            name: "emotion_pretrain",
            run: emotion_pretrain,
        },
        Experiment {
            name: "joint_convergence",
            run: joint_convergence,
        },
        Experiment {
            name: "emotion_cluster",
            run: emotion_cluster,
        },
        Experiment {
            name: "inference_purity",
            run: inference_purity,
        },
        Experiment {
            name: "ce_sanity",
            run: ce_sanity,
        },
        Experiment {
            name: "roundtrips",
            run: roundtrips,
        },
    ]
}

/// Runs one experiment and scores it against the expected-metrics file.
pub fn run_experiment(name: &str, ws: &mut Workspace) -> Result<Report> {
    let exp = experiments()
        .into_iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Setup(format!("no experiment named {name:?}")))?;
    let expected = expected_metrics()?;
    let spec = expected
        .get(name)
        .ok_or_else(|| Error::Setup(format!("{name} has no entry in the expected-metrics file")))?;
    let started = Instant::now();
    let measured = (exp.run)(ws)?;
    let runtime_s = started.elapsed().as_secs_f64();
    Ok(score(name, spec, measured, runtime_s))
}

pub fn score(name: &str, spec: &Expected, measured: Measured, runtime_s: f64) -> Report {
    let checks: Vec<MetricCheck> = spec
        .metrics
        .iter()
        .map(|(metric, bound)| {
            let v = measured.metrics.get(metric).copied();
            MetricCheck {
                name: metric.clone(),
                measured: v,
                bound: *bound,
                pass: v.is_some_and(|v| bound.holds(v)),
            }
        })
        .collect();
    let info = measured
        .metrics
        .iter()
        .filter(|(k, _)| !spec.metrics.contains_key(*k))
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    Report {
        experiment: name.to_string(),
        criterion: spec.criterion,
        config_hash: measured.config_hash,
        pass: checks.iter().all(|c| c.pass),
        checks,
        info,
        runtime_s,
    }
}

/// Work directory holding the corpus and the checkpoints shared between
/// experiments.
pub struct Workspace {
    pub dir: PathBuf,
    /// Build missing artifacts; otherwise a missing artifact is a setup error.
    pub build: bool,
    pub progress: bool,
    data: Option<Dataset<f32>>,
}

pub fn desk_corpus() -> SyntheticCorpusSpec {
    SyntheticCorpusSpec::default()
}

pub fn desk_pretrain() -> TrainConfig {
    TrainConfig {
        stage: Stage::PretrainEmotion,
        batch_size: 16,
        max_steps: 500,
        ..TrainConfig::default()
    }
}

pub fn desk_joint() -> TrainConfig {
    TrainConfig {
        stage: Stage::Joint,
        batch_size: 8,
        max_steps: 2000,
        ..TrainConfig::default()
    }
}

impl Workspace {
    pub fn new(dir: impl Into<PathBuf>, build: bool) -> Result<Self> {
        let dir = dir.into();
        if dir.is_file() {
            return Err(Error::Setup(format!(
                "{} is a file, not a work directory",
                dir.display()
            )));
        }
        if build {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(Self {
            dir,
            build,
            progress: false,
            data: None,
        })
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.dir.join("corpus")
    }

    pub fn pretrain_path(&self) -> PathBuf {
        self.dir.join("pretrain.ckpt")
    }

    pub fn joint_path(&self) -> PathBuf {
        self.dir.join("joint.ckpt")
    }

    fn missing(&self, path: &Path, hint: &str) -> Error {
        Error::Setup(format!("missing {} ({hint})", path.display()))
    }

    fn note(&self, msg: impl AsRef<str>) {
        if self.progress {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn data(&mut self) -> Result<&Dataset<f32>> {
        if self.data.is_none() {
            let dir = self.corpus_dir();
            let manifest = dir.join("manifest.jsonl");
            if !manifest.exists() {
                if !self.build {
                    return Err(self.missing(&manifest, "generate the desk corpus first"));
                }
                self.note("generating desk corpus");
                generate_synthetic_corpus(&desk_corpus(), &dir)?;
            }
            self.data = Some(Dataset::load(manifest)?);
        }
        Ok(self.data.as_ref().unwrap())
    }

    pub fn heldout(&mut self) -> Result<Dataset<f32>> {
        self.data()?;
        Dataset::load(self.corpus_dir().join("heldout.jsonl"))
    }

    /// Trains `cfg` (optionally from `init`), logging to `log` if given.
    fn train(
        &mut self,
        cfg: &TrainConfig,
        init: Option<&Path>,
        log: Option<&Path>,
    ) -> Result<(Trainer<f32>, Vec<StepRecord>)> {
        let progress = self.progress;
        let data = self.data()?;
        let mut tr = match init {
            Some(p) => Trainer::from_checkpoint(cfg, data, Checkpoint::load(p, None)?)?,
            None => Trainer::new(cfg, data)?,
        };
        if let Some(log) = log {
            let _ = fs::remove_file(log);
        }
        let mut records = Vec::new();
        tr.run(data, |_, r| {
            if progress && r.step % 100 == 0 {
                eprintln!(
                    "  {:?} step {} total {:.4} mel {:.4}",
                    r.stage, r.step, r.total, r.losses.mel
                );
            }
            if let Some(log) = log {
                append_log(log, std::slice::from_ref(r))?;
            }
            records.push(r.clone());
            Ok(true)
        })?;
        Ok((tr, records))
    }

    pub fn pretrained(&mut self) -> Result<PathBuf> {
        let path = self.pretrain_path();
        if !path.exists() {
            if !self.build {
                return Err(self.missing(&path, "run emotion_pretrain first"));
            }
            self.note("pre-training the emotion encoder");
            let log = self.dir.join("pretrain.jsonl");
            let (tr, _) = self.train(&desk_pretrain(), None, Some(&log))?;
            tr.checkpoint(None).save(&path)?;
        }
        Ok(path)
    }

    pub fn joint(&mut self) -> Result<PathBuf> {
        let path = self.joint_path();
        if !path.exists() {
            if !self.build {
                return Err(self.missing(&path, "run joint_convergence first"));
            }
            let init = self.pretrained()?;
            self.note("joint training");
            let log = self.dir.join("joint.jsonl");
            let (tr, _) = self.train(&desk_joint(), Some(&init), Some(&log))?;
            let data = self.data()?;
            let mut ck = tr.checkpoint(Some(&data.frontend));
            ck.mel = data.mel.clone();
            ck.save(&path)?;
        }
        Ok(path)
    }
}

fn onehot(shape: (usize, usize), at: (usize, usize)) -> Array2<f64> {
    let mut a = Array2::zeros(shape);
    a[at] = 1.0;
    a
}

fn npc_mask_probe(_: &mut Workspace) -> Result<Measured> {
    let (t_len, h, n_mels) = (64, 32, 8);
    let mut m = Measured::new(&("npc_mask_probe", t_len, h, n_mels, [3, 5], 17u64));
    let mut masked_max = 0.0f64;
    let mut outside_max = 0.0f64;
    for mask in [3usize, 5] {
        let cfg = NpcConfig {
            mask_size: mask,
            ..NpcConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17 + mask as u64);
        let mut store = ParamStore::<f64>::new();
        let npc = Npc::new(&mut store, &mut rng, "npc", &cfg, h, n_mels)?;
        let books = npc.new_codebooks(&mut rng);
        let x = normal::<f64>(&mut rng, t_len, h, 1.0);
        let target = Array2::zeros((t_len, n_mels));
        let g = Graph::eval(&store);
        let input = g.input(x);
        let out = npc.forward(&g, input, &target, &books)?;
        let k = cfg.half_mask();
        let mut this_mask = 0.0f64;
        for t in 0..t_len {
            for c in 0..n_mels {
                let grads = g.backward_with(out.prediction, onehot((t_len, n_mels), (t, c)));
                let jac = grads.wrt(input).expect("input reaches the prediction");
                for (tau, row) in jac.rows().into_iter().enumerate() {
                    let peak = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    if tau + k >= t && tau <= t + k {
                        this_mask = this_mask.max(peak);
                    } else {
                        outside_max = outside_max.max(peak);
                    }
                }
            }
        }
        m.set(&format!("masked_jacobian_max_mask{mask}"), this_mask);
        masked_max = masked_max.max(this_mask);
    }
    m.set("masked_jacobian_max", masked_max);
    m.set("outside_band_jacobian_max", outside_max);
    Ok(m)
}

fn vq_straight_through(_: &mut Workspace) -> Result<Measured> {
    let trials = 200;
    let mut m = Measured::new(&("vq_straight_through", trials, 23u64));
    let cfg = NpcConfig {
        code_dim: 2,
        codebook_size: 8,
        ..NpcConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut store = ParamStore::<f64>::new();
    let npc = Npc::new(&mut store, &mut rng, "npc", &cfg, 2, 2)?;
    let books = npc.new_codebooks(&mut rng);
    let mut max_rel = 0.0f64;
    let mut inexact = 0usize;
    for _ in 0..trials {
        let h0 = normal::<f64>(&mut rng, 1, 2, 0.6);
        let c = normal::<f64>(&mut rng, 1, 2, 1.0);
        let b = normal::<f64>(&mut rng, 1, 2, 1.0);
        let g = Graph::eval(&store);
        let h = g.input(h0);
        let vq = npc.quantize(&g, h, &books)?;
        let q = g.to_array(vq.quantized);
        let idx = vq.assignments[0].1[0];
        if q.row(0) != books[0].vectors.row(idx) {
            inexact += 1;
        }
        // f(q) = Σ c ⊙ q² + b ⊙ q
        let f = g.sum_all(g.add(
            g.mul(g.square(vq.quantized), g.constant(c.clone())),
            g.mul(vq.quantized, g.constant(b.clone())),
        ));
        let grad = g.backward(f).wrt(h).expect("straight-through path").clone();
        let obj = |q: &Array2<f64>| (q.mapv(|v| v * v) * &c + q * &b).sum();
        let eps = 1e-6;
        for j in 0..2 {
            let (mut up, mut dn) = (q.clone(), q.clone());
            up[[0, j]] += eps;
            dn[[0, j]] -= eps;
            let fd = (obj(&up) - obj(&dn)) / (2.0 * eps);
            let rel = (fd - grad[[0, j]]).abs() / fd.abs().max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    m.set("vq_max_relative_error", max_rel);
    m.set("vq_inexact_rows", inexact as f64);
    Ok(m)
}

fn cln_identity(_: &mut Workspace) -> Result<Measured> {
    let b = BackboneConfig::default();
    let (dim, cond_dim, pairs) = (b.hidden_dim, 2 * b.emotion_dim, 100);
    let mut m = Measured::new(&("cln_identity", dim, cond_dim, pairs, 29u64, "f32"));
    let mut store = ParamStore::<f32>::new();
    let cln = CondLayerNorm::new(&mut store, "cln", cond_dim, dim);
    let ln = LayerNorm::new(&mut store, "ln", dim);
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let rows = rng.random_range(1..=16);
        let shift: f32 = rng.random_range(-5.0..5.0);
        let x = normal::<f32>(&mut rng, rows, dim, 2.0).mapv(|v| v + shift);
        let cond = normal::<f32>(&mut rng, 1, cond_dim, 3.0);
        let g = Graph::eval(&store);
        let xv = g.constant(x);
        let a = g.to_array(cln.forward(&g, xv, g.constant(cond)));
        let l = g.to_array(ln.forward(&g, xv));
        for (p, q) in a.iter().zip(l.iter()) {
            worst = worst.max((*p as f64 - *q as f64).abs());
        }
    }
    m.set("cln_max_abs_diff", worst);
    Ok(m)
}

fn length_regulator(_: &mut Workspace) -> Result<Measured> {
    let lists = 1000;
    let mut m = Measured::new(&("length_regulator", lists, 31u64));
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut len_bad, mut row_bad, mut ident_bad) = (0usize, 0usize, 0usize);
    for _ in 0..lists {
        let n = rng.random_range(1..=40);
        let durs: Vec<i64> = (0..n).map(|_| rng.random_range(0..=8)).collect();
        let h = normal::<f64>(&mut rng, n, 4, 1.0);
        let out = length_regulate(&h, &durs)?;
        if out.nrows() as i64 != durs.iter().sum::<i64>() {
            len_bad += 1;
        }
        let idx = expansion_index(&durs.iter().map(|&d| d as usize).collect::<Vec<_>>());
        if idx
            .iter()
            .enumerate()
            .any(|(t, i)| out.row(t) != h.row(i.expect("in range")))
        {
            row_bad += 1;
        }
        if length_regulate(&h, &vec![1; n])? != h {
            ident_bad += 1;
        }
    }
    m.set("length_mismatches", len_bad as f64);
    m.set("row_mismatches", row_bad as f64);
    m.set("identity_failures", ident_bad as f64);
    Ok(m)
}

fn loss_additivity(ws: &mut Workspace) -> Result<Measured> {
    let init = ws.pretrained()?;
    let cfg = TrainConfig {
        max_steps: 100,
        ..desk_joint()
    };
    let (tr, recs) = ws.train(&cfg, Some(&init), None)?;
    let mut m = Measured::with_hash(tr.model.cfg.hash());
    let w = cfg.loss_weights;
    let mut worst = 0.0f64;
    for r in &recs {
        let l = r.losses;
        let sum = w.mel * l.mel
            + w.pitch * l.pitch
            + w.energy * l.energy
            + w.duration * l.duration
            + w.npc * l.npc
            + w.emo * l.emo;
        worst = worst.max((r.total - sum).abs()).max((r.objective - sum).abs());
    }
    m.set("additivity_max_abs_diff", worst);
    m.set("steps", recs.len() as f64);
    Ok(m)
}

fn group_separation(_: &mut Workspace) -> Result<Measured> {
    let cfg = ReferenceEncoderConfig::default();
    let t_len = 40;
    let mut m = Measured::new(&("group_separation", &cfg, t_len, 37u64));
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut store = ParamStore::<f64>::new();
    let enc = HierarchicalEmotionEncoder::new(&mut store, &mut rng, "emo", &cfg)?;
    let g = Graph::eval(&store);
    let layers: Vec<_> = (0..cfg.n_layers)
        .map(|_| g.input(normal::<f64>(&mut rng, t_len, cfg.input_dim, 1.0)))
        .collect();
    let e = enc.encode_layers(&g, &layers)?;
    let half = cfg.n_layers / 2;
    let mut cross = [0.0f64; 2];
    let mut own = [0.0f64; 2];
    for (branch, out) in [e.shallow, e.deep].into_iter().enumerate() {
        for j in 0..cfg.emotion_dim {
            let grads = g.backward_with(out, onehot((1, cfg.emotion_dim), (0, j)));
            for (l, &v) in layers.iter().enumerate() {
                let peak = grads
                    .wrt(v)
                    .map_or(0.0, |a| a.iter().fold(0.0f64, |acc, x| acc.max(x.abs())));
                let same = (l < half) == (branch == 0);
                if same {
                    own[branch] = own[branch].max(peak);
                } else {
                    cross[branch] = cross[branch].max(peak);
                }
            }
        }
    }
    m.set("shallow_wrt_deep_max", cross[0]);
    m.set("deep_wrt_shallow_max", cross[1]);
    m.set("own_group_jacobian_min", own[0].min(own[1]));
    Ok(m)
}

fn emotion_pretrain(ws: &mut Workspace) -> Result<Measured> {
    let cfg = desk_pretrain();
    let started = Instant::now();
    let progress = ws.progress;
    let log = ws.dir.join("pretrain.jsonl");
    let _ = fs::remove_file(&log);
    let data = ws.data()?;
    let mut tr = Trainer::new(&cfg, data)?;
    let mut m = Measured::with_hash(tr.model.cfg.hash());
    let mut first_hit: Option<u64> = None;
    let mut losses = Vec::new();
    let mut final_acc = 0.0;
    tr.run(data, |tr, r| {
        losses.push(r.losses.emo);
        append_log(&log, std::slice::from_ref(r))?;
        if r.step % 50 == 0 {
            let (_, _, acc) = emotion_accuracy(&tr.model, data, 0)?;
            if progress {
                eprintln!("  pretrain step {} loss {:.4} accuracy {acc:.3}", r.step, r.losses.emo);
            }
            if acc >= 0.95 && first_hit.is_none() {
                first_hit = Some(r.step);
            }
            final_acc = acc;
        }
        Ok(true)
    })?;
    let runtime = started.elapsed().as_secs_f64();
    tr.checkpoint(None).save(ws.pretrain_path())?;
    let windows: Vec<f64> = losses
        .chunks(50)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let increases = windows.windows(2).filter(|w| w[1] > w[0]).count();
    let (acc_s, acc_d, acc_c) = emotion_accuracy(&tr.model, ws.data()?, 0)?;
    m.set("final_accuracy", acc_c);
    m.set("last_probe_accuracy", final_acc);
    m.set("shallow_head_accuracy", acc_s);
    m.set("deep_head_accuracy", acc_d);
    m.set("steps_to_95", first_hit.map_or(f64::INFINITY, |s| s as f64));
    m.set("smoothed_loss_increases", increases as f64);
    m.set("first_window_loss", windows[0]);
    m.set("last_window_loss", *windows.last().unwrap());
    m.set("runtime_s", runtime);
    Ok(m)
}

fn joint_convergence(ws: &mut Workspace) -> Result<Measured> {
    let init = ws.pretrained()?;
    let cfg = desk_joint();
    let mut runtimes = Vec::new();
    let mut runs = Vec::new();
    for pass in 0..2 {
        let started = Instant::now();
        let log = ws
            .dir
            .join(if pass == 0 { "joint.jsonl" } else { "joint_repeat.jsonl" });
        let (tr, recs) = ws.train(&cfg, Some(&init), Some(&log))?;
        runtimes.push(started.elapsed().as_secs_f64());
        let data = ws.data()?;
        let mut ck = tr.checkpoint(Some(&data.frontend));
        ck.mel = data.mel.clone();
        let bytes = ck.to_bytes()?;
        if pass == 0 {
            crate::tensor_io::atomic_write(&ws.joint_path(), &bytes)?;
        }
        runs.push((tr.model.cfg.hash(), recs, bytes));
    }
    let (hash, a, bytes_a) = &runs[0];
    let (_, b, bytes_b) = &runs[1];
    let mut m = Measured::with_hash(hash.clone());
    let differing = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x.losses != y.losses || x.total.to_bits() != y.total.to_bits())
        .count()
        + a.len().abs_diff(b.len());
    let first = a.first().map_or(f64::NAN, |r| r.losses.mel);
    let last = a.last().map_or(f64::NAN, |r| r.losses.mel);
    m.set("mel_ratio", last / first);
    m.set("first_mel", first);
    m.set("final_mel", last);
    m.set("steps", a.len() as f64);
    m.set(
        "determinism_mismatches",
        differing as f64 + f64::from(u8::from(bytes_a != bytes_b)),
    );
    m.set("runtime_s", runtimes.iter().cloned().fold(0.0, f64::max));
    Ok(m)
}

/// Held-out references of language 0 and training texts of language 1.
fn zero_shot_inputs(ws: &mut Workspace) -> Result<(Dataset<f32>, Vec<String>, u32, CorpusInfo)> {
    let held = ws.heldout()?;
    let info = CorpusInfo::load(ws.corpus_dir())?;
    let texts: Vec<String> = load_texts(ws.corpus_dir())?
        .into_iter()
        .filter(|(id, _)| id.starts_with("L1_") && !id.contains("_H"))
        .take(4)
        .map(|(_, t)| t)
        .collect();
    let speaker = info.spec.speaker_id(1, 0);
    Ok((held, texts, speaker, info))
}

fn emotion_cluster(ws: &mut Workspace) -> Result<Measured> {
    let ckpt = Checkpoint::<f32>::load(ws.joint()?, None)?;
    let frontend = ckpt
        .frontend
        .clone()
        .ok_or_else(|| Error::Setup("joint checkpoint carries no frontend".into()))?;
    let (held, texts, speaker, info) = zero_shot_inputs(ws)?;
    let mut m = Measured::with_hash(ckpt.model.cfg.hash());
    let n_emotions = info.emotions.len();
    let mut embeddings = Vec::new();
    let mut labels = Vec::new();
    let mut per_ref = Vec::new();
    let mut bad_lengths = 0usize;
    let mut n_synth = 0usize;
    for (i, s) in held.samples.iter().filter(|s| s.utt.language_id == 0).enumerate() {
        let label = s
            .utt
            .emotion_label
            .ok_or_else(|| Error::Setup("held-out reference without label".into()))? as usize;
        let e = extract_emotion(&ckpt.model, &s.ssl, i as u64)?;
        embeddings.push(
            e.shallow
                .iter()
                .chain(e.deep.iter())
                .map(|&v| v as f64)
                .collect::<Vec<_>>(),
        );
        labels.push(label);
        let mut pitch = 0.0;
        for t in &texts {
            let out = synthesize(&ckpt.model, &frontend, t, 1, speaker, &s.ssl, i as u64)?;
            n_synth += 1;
            if out.mel.nrows() != out.durations.iter().sum::<usize>() {
                bad_lengths += 1;
            }
            pitch += mean_pitch_proxy(&out.mel, info.spec.pitch_bins).unwrap_or(f64::NAN);
        }
        per_ref.push((label, pitch / texts.len() as f64));
    }
    let report = cluster_report(&embeddings, &labels)?;
    let mut means = vec![0.0; n_emotions];
    for (k, mean) in means.iter_mut().enumerate() {
        let v: Vec<f64> = per_ref.iter().filter(|(l, _)| *l == k).map(|(_, p)| *p).collect();
        *mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
    }
    let offsets: Vec<f64> = info.spec.emotion_set.iter().map(|e| e.pitch_offset).collect();
    let order = rank_order(&means);
    let mut sorted = means.clone();
    sorted.sort_by(f64::total_cmp);
    let min_gap = sorted.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let (mut within, mut between) = ((0.0, 0usize), (0.0, 0usize));
    for (a, (la, pa)) in per_ref.iter().enumerate() {
        for (lb, pb) in &per_ref[a + 1..] {
            let d = (pa - pb).abs();
            if la == lb {
                within = (within.0 + d, within.1 + 1);
            } else {
                between = (between.0 + d, between.1 + 1);
            }
        }
    }
    m.set("intra_mean_cosine", report.intra_mean_cosine);
    m.set("inter_mean_cosine", report.inter_mean_cosine);
    m.set("intra_minus_inter", report.margin());
    m.set("nearest_centroid_accuracy", report.nearest_centroid_accuracy);
    m.set(
        "pitch_order_matches",
        f64::from(u8::from(order == rank_order(&offsets))),
    );
    m.set("pitch_min_gap", min_gap);
    m.set(
        "pitch_within_over_between",
        (within.0 / within.1 as f64) / (between.0 / between.1 as f64),
    );
    for (k, name) in info.emotions.iter().enumerate() {
        m.set(&format!("pitch_proxy_{name}"), means[k]);
    }
    m.set("synth_length_mismatches", bad_lengths as f64);
    m.set("n_synthesized", n_synth as f64);
    Ok(m)
}

fn inference_purity(ws: &mut Workspace) -> Result<Measured> {
    let full_path = ws.joint()?;
    let stripped_path = ws.dir.join("joint_inference.ckpt");
    Checkpoint::<f32>::load(&full_path, None)?
        .strip_npc()
        .save(&stripped_path)?;
    let full = Checkpoint::<f32>::load(&full_path, None)?;
    let stripped = Checkpoint::<f32>::load(&stripped_path, None)?;
    let (held, texts, speaker, _) = zero_shot_inputs(ws)?;
    let mut m = Measured::with_hash(full.model.cfg.hash());
    let frontend = full
        .frontend
        .clone()
        .ok_or_else(|| Error::Setup("checkpoint has no frontend".into()))?;
    let reference = &held.samples[0].ssl;
    let mel_bytes = |c: &Checkpoint<f32>, spk: u32| -> Result<Vec<u8>> {
        let out = synthesize(&c.model, &frontend, &texts[0], 1, spk, reference, 3)?;
        Ok(FeatureTensor::from_matrix(&out.mel).to_bytes())
    };
    let a = mel_bytes(&full, speaker)?;
    let b = mel_bytes(&stripped, speaker)?;
    let again = mel_bytes(&full, speaker)?;
    let other = mel_bytes(&full, speaker + 1)?;
    let differing = a.iter().zip(&b).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len());
    m.set("stripped_vs_full_differing_bytes", differing as f64);
    m.set("repeat_differing_bytes", f64::from(u8::from(a != again)));
    m.set("speaker_change_differs", f64::from(u8::from(a != other)));
    m.set("stripped_npc_present", f64::from(u8::from(stripped.npc_present)));
    Ok(m)
}

fn ce_sanity(ws: &mut Workspace) -> Result<Measured> {
    let mut m = Measured::new(&("ce_sanity", 2..=16, "unlabeled tiny corpus"));
    let mut worst = 0.0f64;
    for n in 2..=16usize {
        let store = ParamStore::<f64>::new();
        let g = Graph::eval(&store);
        for label in [0, n - 1] {
            let v = g.scalar(g.cross_entropy(g.constant(Array2::zeros((1, n))), label));
            worst = worst.max((v - (n as f64).ln()).abs());
            worst = worst.max((cross_entropy(&vec![0.0; n], label)? - (n as f64).ln()).abs());
        }
    }
    m.set("uniform_ce_max_error", worst);
    let rows = vec![vec![0.2, -1.0, 0.5, 3.0]; 5];
    m.set("unlabeled_ce", semi_supervised_ce(&rows, &rows, &[None; 5])?);

    let dir = ws.dir.join("unlabeled_corpus");
    let spec = SyntheticCorpusSpec {
        utterances_per_speaker: 4,
        heldout_per_speaker: 1,
        ssl_layers: 4,
        ssl_dim: 3,
        labeled_fraction: vec![0.0, 0.0],
        ..SyntheticCorpusSpec::default()
    };
    if !dir.join("manifest.jsonl").exists() {
        generate_synthetic_corpus(&spec, &dir)?;
    }
    let data = Dataset::<f64>::load(dir.join("manifest.jsonl"))?;
    let model = ModelConfig {
        backbone: BackboneConfig {
            hidden_dim: 16,
            ff_dim: 16,
            predictor_channels: 8,
            emotion_dim: 4,
            ..BackboneConfig::default()
        },
        emotion: ReferenceEncoderConfig {
            conv_channels: 8,
            emotion_dim: 4,
            crop_frames: 24,
            ..ReferenceEncoderConfig::default()
        },
        npc: NpcConfig {
            channels: 8,
            code_dim: 4,
            codebook_size: 8,
            ..NpcConfig::default()
        },
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        batch_size: 4,
        max_steps: 3,
        model,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(&cfg, &data)?;
    let before = tr.model.store.clone();
    let mut emo = 0.0f64;
    tr.run(&data, |_, r| {
        emo = emo.max(r.losses.emo.abs());
        Ok(true)
    })?;
    let changed = before
        .iter()
        .filter(|(id, name, v)| name.contains("_classifier") && tr.model.store.get(*id) != *v)
        .count();
    m.set("unlabeled_batch_emo_loss", emo);
    m.set("unlabeled_classifier_changes", changed as f64);
    Ok(m)
}

fn roundtrips(ws: &mut Workspace) -> Result<Measured> {
    let cfg = TrainConfig {
        max_steps: 2,
        ..desk_joint()
    };
    let (tr, _) = ws.train(&cfg, None, None)?;
    let mut m = Measured::with_hash(tr.model.cfg.hash());
    let frontend = ws.data()?.frontend.clone();
    let path = ws.dir.join("roundtrip.ckpt");
    tr.checkpoint(Some(&frontend)).save(&path)?;
    let first = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let loaded = Checkpoint::<f32>::load(&path, Some(&tr.model.cfg))?;
    let second = loaded.to_bytes()?;
    let param_diffs = tr
        .model
        .store
        .iter()
        .filter(|(id, _, v)| {
            let w = loaded.model.store.get(*id);
            v.iter().zip(w.iter()).any(|(a, b)| a.to_bits() != b.to_bits())
        })
        .count();
    m.set("checkpoint_byte_mismatch", f64::from(u8::from(first != second)));
    m.set("checkpoint_param_mismatches", param_diffs as f64);

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut emtf_bad = 0usize;
    let special = [0.0f32, -0.0, f32::MIN_POSITIVE, f32::MAX, -1e-38, 1.0e-45];
    for k in 0..20 {
        let (a, b, c) = (rng.random_range(1..5), rng.random_range(1..30), rng.random_range(1..20));
        let mut data: Vec<f32> = (0..a * b * c).map(|_| rng.random_range(-1e3..1e3)).collect();
        data[0] = special[k % special.len()];
        let t = FeatureTensor::new(vec![a, b, c], data)?;
        let p = ws.dir.join("roundtrip.emtf");
        t.write(&p)?;
        let back = FeatureTensor::read(&p)?;
        let bitwise = back.dims == t.dims && back.data.iter().zip(&t.data).all(|(x, y)| x.to_bits() == y.to_bits());
        let arr: Array3<f32> = back.into_array3()?;
        if !bitwise || arr.len() != t.data.len() {
            emtf_bad += 1;
        }
    }
    m.set("emtf_mismatches", emtf_bad as f64);

    let corpus = ws.corpus_dir();
    let mut utts = load_manifest(corpus.join("manifest.jsonl"), None)?;
    let victim = 7.min(utts.len() - 1);
    utts[victim].durations[0] += 1;
    let bad_path = ws.dir.join("manifest_bad_duration.jsonl");
    write_manifest(&bad_path, &utts)?;
    let detected = match load_manifest(&bad_path, None) {
        Err(Error::Validation { utt_id, .. }) => utt_id == utts[victim].utt_id,
        _ => false,
    };
    let _ = fs::remove_file(&bad_path);
    m.set("duration_violation_detected", f64::from(u8::from(detected)));
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_experiment_has_expected_metrics() {
        let expected = expected_metrics().unwrap();
        let names: Vec<&str> = experiments().iter().map(|e| e.name).collect();
        assert_eq!(names.len(), 12);
        let mut criteria: Vec<u32> = names.iter().map(|n| expected[*n].criterion).collect();
        criteria.sort();
        assert_eq!(criteria, (1..=12).collect::<Vec<_>>());
        assert_eq!(expected.len(), 12);
    }

    #[test]
    fn recorded_oracle_values_satisfy_their_bounds() {
        for (name, e) in expected_metrics().unwrap() {
            for (metric, v) in &e.oracle {
                if let Some(b) = e.metrics.get(metric) {
                    assert!(b.holds(*v), "{name}.{metric} = {v}");
                }
            }
        }
    }

    #[test]
    fn scoring_flags_missing_and_out_of_range_metrics() {
        let spec = Expected {
            criterion: 1,
            description: String::new(),
            metrics: [
                (
                    "a".to_string(),
                    Bound {
                        min: None,
                        max: Some(0.0),
                    },
                ),
                (
                    "b".to_string(),
                    Bound {
                        min: Some(1.0),
                        max: None,
                    },
                ),
            ]
            .into(),
            oracle: BTreeMap::new(),
        };
        let mut m = Measured::new(&1);
        m.set("a", 0.0);
        m.set("c", 5.0);
        let r = score("x", &spec, m.clone(), 0.0);
        assert!(!r.pass);
        assert_eq!(r.info["c"], 5.0);
        m.set("b", 1.0);
        assert!(score("x", &spec, m.clone(), 0.0).pass);
        m.set("a", f64::NAN);
        assert!(!score("x", &spec, m, 0.0).pass);
    }

    #[test]
    fn fast_probes_pass() {
        let dir = tempfile::tempdir().unwrap();
        let mut ws = Workspace::new(dir.path(), false).unwrap();
        for name in ["vq_straight_through", "cln_identity", "length_regulator"] {
            let r = run_experiment(name, &mut ws).unwrap();
            assert!(r.pass, "{}", r.summary());
        }
    }

    #[test]
    fn missing_artifacts_are_setup_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut ws = Workspace::new(dir.path(), false).unwrap();
        assert!(matches!(
            run_experiment("emotion_cluster", &mut ws),
            Err(Error::Setup(_))
        ));
        assert!(matches!(run_experiment("nope", &mut ws), Err(Error::Setup(_))));
    }
}
