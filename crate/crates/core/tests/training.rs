use std::path::Path;

use xlemo::acoustic::BackboneConfig;
use xlemo::checkpoint::Checkpoint;
use xlemo::data::{generate_synthetic_corpus, SyntheticCorpusSpec};
use xlemo::dataset::Dataset;
use xlemo::emotion::ReferenceEncoderConfig;
use xlemo::model::ModelConfig;
use xlemo::npc::NpcConfig;
use xlemo::training::{emotion_accuracy, LossBreakdown, Stage, StepRecord, TrainConfig, Trainer};
use xlemo::Error;

fn corpus(dir: &Path, labeled: [f64; 2]) -> Dataset<f64> {
    let spec = SyntheticCorpusSpec {
        utterances_per_speaker: 4,
        heldout_per_speaker: 1,
        ssl_layers: 4,
        ssl_dim: 3,
        labeled_fraction: labeled.to_vec(),
        ..SyntheticCorpusSpec::default()
    };
    generate_synthetic_corpus(&spec, dir).unwrap();
    Dataset::load(dir.join("manifest.jsonl")).unwrap()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        init_seed: 5,
        backbone: BackboneConfig {
            hidden_dim: 16,
            ff_dim: 16,
            conv_kernel: 3,
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
            n_blocks: 2,
            channels: 8,
            code_dim: 4,
            codebook_size: 8,
            ..NpcConfig::default()
        },
    }
}

fn cfg(stage: Stage, steps: u64) -> TrainConfig {
    TrainConfig {
        stage,
        batch_size: 4,
        max_steps: steps,
        seed: 9,
        model: tiny_model(),
        ..TrainConfig::default()
    }
}

fn run(tr: &mut Trainer<f64>, data: &Dataset<f64>) -> Vec<StepRecord> {
    let mut out = Vec::new();
    tr.run(data, |_, r| {
        out.push(r.clone());
        Ok(true)
    })
    .unwrap();
    out
}

fn same_losses(a: &[StepRecord], b: &[StepRecord]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.step, y.step);
        assert_eq!(x.losses, y.losses);
        assert_eq!(x.total.to_bits(), y.total.to_bits());
        assert_eq!(x.grad_norm.to_bits(), y.grad_norm.to_bits());
    }
}

#[test]
fn pretraining_touches_only_the_emotion_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), [1.0, 0.0]);
    let mut tr = Trainer::new(&cfg(Stage::PretrainEmotion, 3), &data).unwrap();
    let before = tr.model.store.clone();
    let recs = run(&mut tr, &data);
    assert_eq!(recs.len(), 3);
    assert!(recs.iter().all(|r| r.losses.mel == 0.0 && r.losses.emo > 0.0));
    let mut moved = false;
    for (id, name, v) in before.iter() {
        let now = tr.model.store.get(id);
        if name.starts_with("emo.") {
            moved |= now != v;
        } else {
            assert_eq!(now, v, "{name} changed during pre-training");
        }
    }
    assert!(moved);
    let (_, _, acc) = emotion_accuracy(&tr.model, &data, 1).unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn pretraining_without_labels_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), [0.0, 0.0]);
    let mut tr = Trainer::new(&cfg(Stage::PretrainEmotion, 1), &data).unwrap();
    assert!(matches!(tr.step(&data), Err(Error::Config(_))));
}

#[test]
fn unlabeled_batches_leave_classifier_heads_alone() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), [0.0, 0.0]);
    let mut tr = Trainer::new(&cfg(Stage::Joint, 2), &data).unwrap();
    let before = tr.model.store.clone();
    let recs = run(&mut tr, &data);
    assert!(recs.iter().all(|r| r.losses.emo == 0.0 && r.labeled == 0));
    for (id, name, v) in before.iter() {
        if name.contains("_classifier") {
            assert_eq!(tr.model.store.get(id), v, "{name}");
        }
    }
}

#[test]
fn logged_terms_add_up_to_the_total() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), [1.0, 0.0]);
    let c = TrainConfig {
        loss_weights: xlemo::training::LossWeights {
            mel: 1.5,
            npc: 0.5,
            emo: 2.0,
            ..Default::default()
        },
        ..cfg(Stage::Joint, 5)
    };
    let mut tr = Trainer::new(&c, &data).unwrap();
    for r in run(&mut tr, &data) {
        let l: LossBreakdown = r.losses;
        let sum = 1.5 * l.mel + l.pitch + l.energy + l.duration + 0.5 * l.npc + 2.0 * l.emo;
        assert!((r.total - sum).abs() < 1e-6);
        assert!((r.objective - sum).abs() < 1e-6);
        assert!(r.code_entropy.is_some());
    }
}

#[test]
fn identical_seeds_give_identical_runs_and_resume_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), [1.0, 0.0]);
    let c = cfg(Stage::Joint, 6);
    let full = run(&mut Trainer::new(&c, &data).unwrap(), &data);
    let again = run(&mut Trainer::new(&c, &data).unwrap(), &data);
    same_losses(&full, &again);

    let half = TrainConfig {
        max_steps: 3,
        ..c.clone()
    };
    let mut first = Trainer::new(&half, &data).unwrap();
    run(&mut first, &data);
    let bytes = first.checkpoint(Some(&data.frontend)).to_bytes().unwrap();
    let ck = Checkpoint::<f64>::from_bytes(&bytes, None).unwrap();
    let mut resumed = Trainer::from_checkpoint(&c, &data, ck).unwrap();
    assert_eq!(resumed.state.step, 3);
    let rest = run(&mut resumed, &data);
    same_losses(&full[3..], &rest);
}

#[test]
fn gradient_reaches_every_group_at_step_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), [1.0, 0.0]);
    let c = TrainConfig {
        batch_size: data.len(),
        ..cfg(Stage::Joint, 1)
    };
    let tr = Trainer::new(&c, &data).unwrap();
    for (group, norm) in tr.gradient_probe(&data).unwrap() {
        assert!(norm > 0.0 && norm.is_finite(), "{group}: {norm}");
    }
}

#[test]
fn pretrained_heads_survive_the_stage_switch() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), [1.0, 0.0]);
    let mut pre = Trainer::new(&cfg(Stage::PretrainEmotion, 2), &data).unwrap();
    run(&mut pre, &data);
    let path = dir.path().join("pre.ckpt");
    pre.checkpoint(None).save(&path).unwrap();
    let ck = Checkpoint::<f64>::load(&path, None).unwrap();
    let joint = Trainer::from_checkpoint(&cfg(Stage::Joint, 4), &data, ck).unwrap();
    assert_eq!(joint.state.step, 0);
    assert_eq!(joint.adam.step, 0);
    for (id, name, v) in pre.model.store.iter() {
        assert_eq!(joint.model.store.get(id), v, "{name}");
        assert!(joint.model.store.is_trainable(id));
    }
    let frozen = TrainConfig {
        freeze_emotion: true,
        ..cfg(Stage::Joint, 4)
    };
    let t = Trainer::new(&frozen, &data).unwrap();
    for (id, name, _) in t.model.store.iter() {
        assert_eq!(t.model.store.is_trainable(id), !name.starts_with("emo."), "{name}");
    }
}

#[test]
fn mismatched_architecture_is_refused_on_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path(), [1.0, 0.0]);
    let tr = Trainer::new(&cfg(Stage::Joint, 1), &data).unwrap();
    let ck = tr.checkpoint(None);
    let mut other = cfg(Stage::Joint, 1);
    other.model.npc.mask_size = 3;
    assert!(matches!(
        Trainer::from_checkpoint(&other, &data, ck),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn non_finite_targets_abort_with_the_term_and_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = corpus(dir.path(), [1.0, 0.0]);
    for s in &mut data.samples {
        s.mel[[0, 0]] = f64::NAN;
    }
    let mut tr = Trainer::new(&cfg(Stage::Joint, 1), &data).unwrap();
    match tr.step(&data) {
        Err(Error::NonFinite { term, step, batch }) => {
            assert_eq!(term, "mel");
            assert_eq!(step, 1);
            assert_eq!(batch.len(), 4);
        }
        other => panic!("unexpected {other:?}"),
    }
}
