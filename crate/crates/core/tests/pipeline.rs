use signtok_core::corpus::synth::SyntheticSpec;
use signtok_core::nncore::{Checkpoint, Graph};
use signtok_core::pipeline::*;
use signtok_core::translate::TransferPolicy;
use signtok_core::Error;

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.arch = ArchConfig {
        frame_dim: 16,
        model_dim: 16,
        heads: 2,
        ff_mult: 2,
        context_layers: 1,
        language_layers: 1,
        mapper_blocks: 1,
        translation_encoder_layers: 1,
        translation_decoder_layers: 1,
        ..ArchConfig::default()
    };
    cfg.seed = 11;
    cfg.pretrain.batch_size = 8;
    cfg.pretrain.optim.epochs = 3;
    cfg.finetune.batch_size = 8;
    cfg.finetune.optim.epochs = 3;
    cfg.finetune.optim.lr = 0.1;
    cfg.finetune.validate_every = 2;
    cfg.finetune.max_decode_len = 12;
    cfg
}

fn tiny_data() -> ExperimentData {
    let spec = SyntheticSpec {
        seed: 5,
        ..SyntheticSpec::default()
    };
    ExperimentData::synthetic(&spec, [32, 6, 6], &SegmenterChoice::default(), 1).unwrap()
}

fn bytes(ck: &Checkpoint<f32>) -> Vec<u8> {
    ck.to_bytes().unwrap()
}

fn masked(logs: &[EpochLog]) -> Vec<EpochLog> {
    logs.iter().map(EpochLog::masked).collect()
}

#[test]
fn defaults_are_the_published_settings() {
    let c = RunConfig::default();
    assert_eq!(c.pretrain.batch_size, 16);
    assert_eq!(c.pretrain.optim.lr, 0.03);
    assert_eq!(c.pretrain.optim.momentum, 0.9);
    assert_eq!(c.pretrain.optim.weight_decay, 0.0);
    assert_eq!(c.pretrain.optim.grad_clip, 1.0);
    assert_eq!(c.pretrain.optim.epochs, 80);
    assert_eq!(c.pretrain.beta, 0.6);
    assert_eq!(c.finetune.batch_size, 8);
    assert_eq!(c.finetune.optim.lr, 0.004);
    assert_eq!(c.finetune.optim.weight_decay, 0.001);
    assert_eq!(c.finetune.optim.grad_clip, 5.0);
    assert_eq!(c.finetune.label_smoothing, 0.2);
    assert_eq!(c.finetune.beam_width, 4);
    assert_eq!(c.finetune.max_decode_len, 150);
    assert_eq!(c.arch.dropout, 0.1);
    c.validate().unwrap();
}

#[test]
fn config_round_trips_through_json_with_a_stable_hash() {
    let c = tiny_config();
    let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.hash(), c.hash());
    let mut d = c.clone();
    d.pretrain.beta = 0.4;
    assert_ne!(d.hash(), c.hash());
}

#[test]
fn single_sample_pretraining_batches_are_rejected() {
    let mut cfg = tiny_config();
    cfg.pretrain.batch_size = 1;
    let data = tiny_data();
    let err = pretrain(&cfg, &data.train, &data.vocab, data.c_in, None, |_, _| Ok(())).err();
    assert!(matches!(err, Some(Error::Invalid(_))), "{err:?}");
}

#[test]
fn pretraining_is_deterministic() {
    let cfg = tiny_config();
    let data = tiny_data();
    let a = pretrain(&cfg, &data.train, &data.vocab, data.c_in, None, |_, _| Ok(())).unwrap();
    let b = pretrain(&cfg, &data.train, &data.vocab, data.c_in, None, |_, _| Ok(())).unwrap();
    assert_eq!(masked(&a.logs), masked(&b.logs));
    assert_eq!(bytes(&a.checkpoint), bytes(&b.checkpoint));
    let epochs: Vec<usize> = a.logs.iter().map(|l| l.epoch).collect();
    assert_eq!(epochs, vec![1, 2, 3]);
    for l in &a.logs {
        assert!(l.losses.contains_key("ce") && l.losses.contains_key("hs"));
    }
}

#[test]
fn resumed_pretraining_matches_an_uninterrupted_run() {
    let cfg = tiny_config();
    let data = tiny_data();
    let full = pretrain(&cfg, &data.train, &data.vocab, data.c_in, None, |_, _| Ok(())).unwrap();
    let mut saved = None;
    let stopped = pretrain(&cfg, &data.train, &data.vocab, data.c_in, None, |log, ck| {
        if log.epoch == 1 {
            saved = Some(ck.clone());
            return Err(Error::Invalid("interrupted".into()));
        }
        Ok(())
    });
    assert!(stopped.is_err());
    let ck = Checkpoint::<f32>::from_bytes(&bytes(&saved.unwrap())).unwrap();
    let rest = pretrain(&cfg, &data.train, &data.vocab, data.c_in, Some(ck), |_, _| Ok(())).unwrap();
    assert_eq!(masked(&rest.logs), masked(&full.logs[1..]));
    assert_eq!(bytes(&rest.checkpoint), bytes(&full.checkpoint));
}

#[test]
fn empty_gloss_samples_do_not_change_pretraining() {
    let cfg = tiny_config();
    let data = tiny_data();
    let base = pretrain(&cfg, &data.train, &data.vocab, data.c_in, None, |_, _| Ok(())).unwrap();
    let mut padded = data.train.clone();
    for s in data.val.samples.iter().cloned() {
        let mut s = s;
        s.gloss_ids.clear();
        s.gloss_words.clear();
        padded.samples.push(s);
    }
    let other = pretrain(&cfg, &padded, &data.vocab, data.c_in, None, |_, _| Ok(())).unwrap();
    assert_eq!(masked(&base.logs), masked(&other.logs));
    assert_eq!(bytes(&base.checkpoint), bytes(&other.checkpoint));
}

#[test]
fn clip_without_dual_logs_a_single_term() {
    let mut cfg = tiny_config();
    cfg.pretrain.loss_mode = LossMode::Clip;
    cfg.pretrain.dual = false;
    cfg.pretrain.optim.epochs = 1;
    let data = tiny_data();
    let out = pretrain(&cfg, &data.train, &data.vocab, data.c_in, None, |_, _| Ok(())).unwrap();
    let keys: Vec<&str> = out.logs[0].losses.keys().map(String::as_str).collect();
    assert_eq!(keys, vec!["hs", "total"]);
    assert_eq!(out.logs[0].losses["hs"], out.logs[0].losses["total"]);
}

#[test]
fn transfer_policies_need_a_stage1_checkpoint() {
    let cfg = tiny_config();
    let data = tiny_data();
    let err = finetune(&cfg, &data.train, &data.val, &data.vocab, data.c_in, None, None, |_, _| Ok(()));
    assert!(err.is_err());
    let mut none = cfg.clone();
    none.finetune.policy = TransferPolicy::None;
    none.finetune.optim.epochs = 1;
    finetune(&none, &data.train, &data.val, &data.vocab, data.c_in, None, None, |_, _| Ok(())).unwrap();
}

#[test]
fn finetuning_validates_on_schedule_and_resumes_exactly() {
    let cfg = tiny_config();
    let data = tiny_data();
    let s1 = pretrain(&cfg, &data.train, &data.vocab, data.c_in, None, |_, _| Ok(())).unwrap();
    let stage1 = Some(&s1.checkpoint.params);
    let full = finetune(&cfg, &data.train, &data.val, &data.vocab, data.c_in, stage1, None, |_, _| Ok(())).unwrap();
    let validated: Vec<usize> = full
        .logs
        .iter()
        .filter(|l| l.validation.is_some())
        .map(|l| l.epoch)
        .collect();
    assert_eq!(validated, vec![0, 2, 3]);
    let best_bleu = full
        .logs
        .iter()
        .filter_map(|l| l.validation.as_ref().map(|r| r.bleu4))
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(full.best_bleu4, Some(best_bleu));

    // Interrupt after epoch 2, keeping what a caller would persist: the
    // latest checkpoint and the best validated one so far.
    let mut last = None;
    let mut best: Option<(f64, Checkpoint<f32>)> = None;
    let stopped = finetune(&cfg, &data.train, &data.val, &data.vocab, data.c_in, stage1, None, |log, ck| {
        if let Some(r) = &log.validation {
            if best.as_ref().is_none_or(|(b, _)| r.bleu4 > *b) {
                let mut ck = ck.clone();
                ck.meta["bleu4"] = serde_json::json!(r.bleu4);
                best = Some((r.bleu4, ck));
            }
        }
        if log.epoch == 2 {
            last = Some(ck.clone());
            return Err(Error::Invalid("interrupted".into()));
        }
        Ok(())
    });
    assert!(stopped.is_err());
    let last = last.unwrap();
    let best = best.map(|(_, ck)| ck);
    let resumed = finetune(
        &cfg,
        &data.train,
        &data.val,
        &data.vocab,
        data.c_in,
        stage1,
        Some(FinetuneResume { last, best }),
        |_, _| Ok(()),
    )
    .unwrap();
    assert_eq!(masked(&resumed.logs), masked(&full.logs[3..]));
    assert_eq!(bytes(&resumed.last), bytes(&full.last));
    assert_eq!(resumed.best_epoch, full.best_epoch);
    assert_eq!(resumed.best, full.best);
}

#[test]
fn checkpoint_round_trip_preserves_outputs_bitwise() {
    let mut cfg = tiny_config();
    cfg.finetune.policy = TransferPolicy::None;
    cfg.finetune.optim.epochs = 1;
    let data = tiny_data();
    let ft = finetune(&cfg, &data.train, &data.val, &data.vocab, data.c_in, None, None, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    best_checkpoint(&cfg, &ft, &data.vocab, data.c_in).save(&path).unwrap();
    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    let (cfg2, vocab2, c_in2) = checkpoint_context(&loaded).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(vocab2.tokens(), data.vocab.tokens());
    assert_eq!(c_in2, data.c_in);

    let s = &data.test.samples[0];
    let logits = |params| {
        let mut g = Graph::eval(params);
        let (l, _) = ft
            .model
            .forward_logits(&mut g, &[(&s.video, &s.segments)], &[s.target.as_slice()])
            .unwrap();
        g.value(l).clone()
    };
    let a = logits(&ft.best);
    let b = logits(&loaded.params);
    let bits = |t: &signtok_core::nncore::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    let ha = translate_dataset(&ft.model, &ft.best, &data.test, 2).unwrap();
    let hb = translate_dataset(&ft.model, &loaded.params, &data.test, 2).unwrap();
    assert_eq!(ha, hb);
}

#[test]
fn exported_similarity_has_one_row_per_token() {
    let mut cfg = tiny_config();
    cfg.pretrain.optim.epochs = 1;
    let data = tiny_data();
    let out = pretrain(&cfg, &data.train, &data.vocab, data.c_in, None, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = export_similarity(&out.model, &out.checkpoint.params, &data.test, dir.path()).unwrap();
    assert_eq!(files.len(), data.test.len() + 2);
    let s = &data.test.samples[0];
    let text = std::fs::read_to_string(&files[0]).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&header[..3], &["token", "start", "end"]);
    assert_eq!(header.len(), 3 + s.gloss_words.len());
    assert_eq!(lines.count(), s.segments.len());
}

#[test]
fn singleton_grid_matches_a_direct_run_and_rows_follow_axis_order() {
    let mut cfg = tiny_config();
    cfg.pretrain.optim.epochs = 1;
    cfg.finetune.optim.epochs = 1;
    cfg.finetune.beam_width = 1;
    let data = tiny_data();
    let direct = run_experiment(&cfg, &data).unwrap();
    let rows = run_ablation_grid(&cfg, &AblationAxis::Policy(vec![TransferPolicy::Vle]), &data).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].report, direct.report);
    assert_eq!(rows[0].config_hash, cfg.hash());

    let fwd = run_ablation_grid(&cfg, &AblationAxis::Beta(vec![0.0, 1.0]), &data).unwrap();
    let rev = run_ablation_grid(&cfg, &AblationAxis::Beta(vec![1.0, 0.0]), &data).unwrap();
    assert_eq!(fwd[0], rev[1]);
    assert_eq!(fwd[1], rev[0]);
    let csv = ablation_csv(&fwd);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(ABLATION_CSV_HEADER));
    assert!(lines.next().unwrap().contains(",beta=0,"));
}

#[test]
fn training_improves_validation_bleu() {
    let spec = SyntheticSpec {
        seed: 3,
        ..SyntheticSpec::default()
    };
    let data = ExperimentData::synthetic(&spec, [400, 40, 1], &SegmenterChoice::Oracle, 1).unwrap();
    let mut cfg = RunConfig::default();
    cfg.arch = ArchConfig::desk();
    cfg.finetune.policy = TransferPolicy::None;
    cfg.finetune.optim.epochs = 20;
    cfg.finetune.optim.lr = 0.2;
    cfg.finetune.validate_every = 20;
    let ft = finetune(&cfg, &data.train, &data.val, &data.vocab, data.c_in, None, None, |_, _| Ok(())).unwrap();
    let first = ft.logs.first().unwrap().validation.as_ref().unwrap().bleu4;
    let last = ft.logs.last().unwrap().validation.as_ref().unwrap().bleu4;
    assert!(last > first, "validation BLEU-4 {first} -> {last}");
}
