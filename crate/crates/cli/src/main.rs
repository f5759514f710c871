//! `xlemo`: corpus generation, training, synthesis and evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::json;
use xlemo::checkpoint::Checkpoint;
use xlemo::data::{generate_synthetic_corpus, MelConfig, SyntheticCorpusSpec};
use xlemo::dataset::Dataset;
use xlemo::eval::{character_error_rate, cluster_report, edit_distance, speaker_cosine};
use xlemo::ssl::load_stack;
use xlemo::synth::{extract_emotion, griffin_lim, synthesize, write_wav, GRIFFIN_LIM_ITERS};
use xlemo::tensor_io::FeatureTensor;
use xlemo::training::{append_log, Stage, TrainConfig, Trainer};

/// Used when a checkpoint does not record the SSL frame rate.
const DEFAULT_SSL_FRAME_RATE: f64 = 80.0;

#[derive(Parser)]
#[command(name = "xlemo", version, about = "Cross-lingual emotional speech synthesis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic two-language corpus.
    MakeCorpus {
        /// TOML corpus spec; missing fields take their defaults.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the hierarchical emotion encoder on labeled utterances.
    PretrainEmotion {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint training of the acoustic model, NPC and emotion encoder.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint to start from, usually the pre-trained emotion encoder.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesise text with the emotion of a reference SSL stack.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        language: u32,
        #[arg(long)]
        speaker: u32,
        /// Reference SSL stack (EMTF, rank 3) in any language.
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = 0)]
        crop_seed: u64,
        #[arg(long)]
        out_mel: PathBuf,
        #[arg(long)]
        out_wav: Option<PathBuf>,
    },
    /// Write the shallow and deep emotion embeddings of a reference.
    ExtractEmotion {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = 0)]
        crop_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emotion clustering report over the labeled utterances of a manifest.
    EvalCluster {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        crop_seed: u64,
    },
    /// Cosine similarity between two embedding files.
    EvalCosine {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Character error rate of a hypothesis transcript against a reference.
    EvalCer {
        #[arg(long)]
        hypothesis: String,
        #[arg(long)]
        reference: String,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<xlemo::Error>().map_or("other", |e| e.kind());
            eprintln!("error kind={kind} message={:?}", format!("{e:#}"));
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::MakeCorpus { spec, out } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let spec: SyntheticCorpusSpec = toml::from_str(&text).map_err(xlemo::Error::from)?;
            spec.validate()?;
            let info = generate_synthetic_corpus(&spec, &out)?;
            println!(
                "{}",
                json!({"out": out, "train": info.n_train, "heldout": info.n_heldout, "emotions": info.emotions})
            );
        }
        Cmd::PretrainEmotion { config, manifest, out } => {
            let mut cfg = TrainConfig::load(&config)?;
            cfg.stage = Stage::PretrainEmotion;
            train(&cfg, &manifest, None, &out)?;
        }
        Cmd::Train {
            config,
            manifest,
            init,
            out,
        } => {
            let mut cfg = TrainConfig::load(&config)?;
            cfg.stage = Stage::Joint;
            if init.is_none() {
                eprintln!("warning: no --init checkpoint; the emotion encoder starts untrained");
            }
            train(&cfg, &manifest, init.as_deref(), &out)?;
        }
        Cmd::Synthesize {
            checkpoint,
            text,
            language,
            speaker,
            reference,
            crop_seed,
            out_mel,
            out_wav,
        } => {
            let ck = Checkpoint::<f32>::load(&checkpoint, None)?;
            let frontend = ck
                .frontend
                .as_ref()
                .ok_or_else(|| xlemo::Error::Checkpoint("checkpoint carries no text frontend".into()))?;
            let reference = load_stack::<f32>(&reference, ssl_rate(&ck))?;
            let mel_cfg = out_wav.as_ref().map(|_| wav_config(&ck)).transpose()?;
            let out = synthesize(&ck.model, frontend, &text, language, speaker, &reference, crop_seed)?;
            let wave = match &mel_cfg {
                Some(cfg) if out.mel.nrows() >= 2 => Some(griffin_lim(&out.mel, cfg, GRIFFIN_LIM_ITERS)?),
                Some(_) => bail!(xlemo::Error::InputTooShort {
                    len: out.mel.nrows(),
                    required: 2
                }),
                None => None,
            };
            FeatureTensor::from_matrix(&out.mel).write(&out_mel)?;
            if let (Some(path), Some(wave), Some(cfg)) = (&out_wav, &wave, &mel_cfg) {
                write_wav(path, wave, cfg.sample_rate_hz)?;
            }
            println!(
                "{}",
                json!({"frames": out.mel.nrows(), "n_mels": out.mel.ncols(), "durations": out.durations, "out_mel": out_mel, "out_wav": out_wav})
            );
        }
        Cmd::ExtractEmotion {
            checkpoint,
            reference,
            crop_seed,
            out,
        } => {
            let ck = Checkpoint::<f32>::load(&checkpoint, None)?;
            let reference = load_stack::<f32>(&reference, ssl_rate(&ck))?;
            let e = extract_emotion(&ck.model, &reference, crop_seed)?;
            let pair: Vec<f32> = e.shallow.iter().chain(e.deep.iter()).copied().collect();
            FeatureTensor::from_vector(&pair).write(&out)?;
            println!("{}", json!({"dim": e.shallow.len(), "out": out}));
        }
        Cmd::EvalCluster {
            checkpoint,
            manifest,
            crop_seed,
        } => {
            let ck = Checkpoint::<f32>::load(&checkpoint, None)?;
            let data = Dataset::<f32>::load(&manifest)?;
            let mut embeddings = Vec::new();
            let mut labels = Vec::new();
            for (i, s) in data.samples.iter().enumerate() {
                if let Some(l) = s.utt.emotion_label {
                    let e = extract_emotion(&ck.model, &s.ssl, crop_seed.wrapping_add(i as u64))?;
                    embeddings.push(e.shallow.iter().chain(e.deep.iter()).map(|&v| v as f64).collect());
                    labels.push(l as usize);
                }
            }
            let report = cluster_report(&embeddings, &labels)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Cmd::EvalCosine { a, b } => {
            let read = |p: &Path| -> anyhow::Result<Vec<f64>> {
                Ok(FeatureTensor::read(p)?.data.iter().map(|&v| v as f64).collect())
            };
            let c = speaker_cosine(&read(&a)?, &read(&b)?)?;
            println!("{}", json!({"cosine": c}));
        }
        Cmd::EvalCer { hypothesis, reference } => {
            let cer = character_error_rate(&hypothesis, &reference)?;
            println!(
                "{}",
                json!({"cer": cer, "edits": edit_distance(&hypothesis, &reference), "reference_chars": reference.chars().count()})
            );
        }
    }
    Ok(())
}

fn ssl_rate(ck: &Checkpoint<f32>) -> f64 {
    ck.mel.as_ref().map_or(DEFAULT_SSL_FRAME_RATE, MelConfig::frame_rate_hz)
}

fn wav_config(ck: &Checkpoint<f32>) -> anyhow::Result<MelConfig> {
    let cfg = ck.mel.clone().unwrap_or_default();
    let n_mels = ck.model.cfg.backbone.n_mels;
    if cfg.n_mels != n_mels {
        bail!(xlemo::Error::Config(format!(
            "checkpoint records no feature settings for its {n_mels} mel bins"
        )));
    }
    Ok(cfg)
}

fn train(cfg: &TrainConfig, manifest: &Path, init: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let data = Dataset::<f32>::load(manifest)?;
    let mut tr = match init {
        Some(p) => Trainer::from_checkpoint(cfg, &data, Checkpoint::load(p, None)?)?,
        None => Trainer::new(cfg, &data)?,
    };
    let log = out.with_extension("jsonl");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let _ = fs::remove_file(&log);
    let save = |tr: &Trainer<f32>| -> xlemo::Result<()> {
        let mut ck = tr.checkpoint(Some(&data.frontend));
        ck.mel = data.mel.clone();
        ck.save(out)
    };
    tr.run(&data, |tr, r| {
        append_log(&log, std::slice::from_ref(r))?;
        if r.step % 100 == 0 || r.step == cfg.max_steps {
            eprintln!("step {} total {:.5} lr {:.2e}", r.step, r.total, r.lr);
        }
        if cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0 {
            save(tr)?;
        }
        Ok(true)
    })?;
    save(&tr)?;
    println!(
        "{}",
        json!({"out": out, "log": log, "steps": tr.state.step, "config_hash": tr.model.cfg.hash()})
    );
    Ok(())
}
