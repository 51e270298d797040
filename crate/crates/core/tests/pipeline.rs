use authguard_core::datagen::{build_instruction_samples, generate_captions, StubClient};
use authguard_core::encoder::VisionBackboneConfig;
use authguard_core::objectives::LossConfig;
use authguard_core::reasoning::{train_stage2, Stage2Config, ToyLmConfig};
use authguard_core::synthface::{make_corpus_with_side, LabeledImage, Split, SynthCorpus};
use authguard_core::train::{ablation_preset, train_stage1, RunConfig, Stage1Model, TrainConfig};

fn tiny(preset: &str, epochs: usize) -> RunConfig {
    let warmup_steps = if epochs > 2 { 5 } else { 1 };
    RunConfig {
        backbone: VisionBackboneConfig {
            image_side: 32,
            patch_size: 8,
            embed_dim: 32,
            layers: 2,
            heads: 4,
            mlp_ratio: 2.0,
        },
        train: TrainConfig {
            lr_base: 1e-3,
            warmup_steps,
            epochs,
            batch_size: 16,
            seed: 2,
            ablation: ablation_preset(preset).unwrap(),
            ..TrainConfig::default()
        },
        loss: LossConfig::default(),
    }
}

fn corpus(n: usize) -> SynthCorpus {
    make_corpus_with_side(9, n, 32).unwrap()
}

#[test]
fn encoder_separates_the_synthetic_classes() {
    let c = corpus(240);
    let dir = tempfile::tempdir().unwrap();
    let out = train_stage1(&c, &[], &tiny("none", 12), dir.path()).unwrap();
    let model = Stage1Model::load(&out.final_checkpoint).unwrap();
    let train: Vec<&LabeledImage> = c.samples_in(Split::Train).collect();
    let auc = model.auc_on(&train).unwrap();
    assert!(auc > 0.9, "train AUC {auc}");
    assert!(out.epochs.last().unwrap().train_cls_mean < out.initial_cls_loss);
}

#[test]
fn full_stage1_keeps_text_encoder_frozen() {
    let c = corpus(64);
    let caps = generate_captions(c.samples.iter(), &StubClient, 2, false).unwrap().records;
    let dir = tempfile::tempdir().unwrap();
    let out = train_stage1(&c, &caps, &tiny("full", 1), dir.path()).unwrap();
    assert_eq!(out.text_checksum_before, out.text_checksum_after);
    let reloaded = Stage1Model::load(&out.final_checkpoint).unwrap();
    assert_eq!(reloaded.text_checksum(), out.text_checksum_before);
    assert_eq!(reloaded.checksum(), out.final_checksum);
}

#[test]
fn stage2_freezes_what_it_should_and_descends() {
    let c = corpus(64);
    let caps = generate_captions(c.samples.iter(), &StubClient, 2, false).unwrap().records;
    let instructions = build_instruction_samples(&caps).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let s1 = train_stage1(&c, &caps, &tiny("full", 1), &dir.path().join("s1")).unwrap();
    let encoder = Stage1Model::load(&s1.final_checkpoint).unwrap();
    let cfg = Stage2Config {
        lm: ToyLmConfig {
            vocab_size: 128,
            layers: 1,
            d_l: 32,
            heads: 4,
            max_seq: 64,
        },
        epochs_projector: 1,
        epochs_joint: 3,
        batch_size: 8,
        max_samples: Some(48),
        ..Stage2Config::default()
    };
    let train: Vec<&LabeledImage> = c.samples_in(Split::Train).collect();
    let before = encoder.checksum();
    let (_, out) = train_stage2(&encoder, &s1.final_checkpoint, &train, &instructions, &cfg, &dir.path().join("s2")).unwrap();
    assert_eq!(encoder.checksum(), before);
    assert_eq!(out.encoder_checksum_before, out.encoder_checksum_after);
    assert_eq!(out.lm_checksum_initial, out.lm_checksum_after_projector);
    assert_ne!(out.projector_checksum_initial, out.projector_checksum_after_projector);
    assert!(out.after_projector_loss < out.initial_loss);
    assert!(out.final_loss < out.after_projector_loss);
}
