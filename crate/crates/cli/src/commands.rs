use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};
use signtok_core::corpus::io::{
    load_frame_sequences, read_corpus_dir, read_ground_truth, read_transcripts, write_corpus_dir, CorpusDir,
};
use signtok_core::corpus::synth::{generate_synthetic, SyntheticSpec};
use signtok_core::corpus::{build_vocabulary, Vocabulary};
use signtok_core::losses::{loss_grad_check, LossCheck, LossKind};
use signtok_core::memory::measure_attention_peak;
use signtok_core::metrics::{attention_memory_profile, quadratic_fit, tokenize, EvalReport, MemoryProfile};
use signtok_core::nncore::{Checkpoint, ParameterSet};
use signtok_core::pipeline::{
    ablation_csv, best_checkpoint, build_translator, checkpoint_context, export_similarity, finetune, pretrain,
    run_ablation_grid, AblationAxis, ArchConfig, Dataset, EpochLog, ExperimentData, FinetuneResume, LossVariant,
    PretrainModel, RunConfig, SegmenterChoice,
};
use signtok_core::segmenter::{boundary_f1, reduction_report, segment_oracle};
use signtok_core::translate::{decode, TransferPolicy};

use crate::args::*;
use crate::failure::{CliResult, Failure};
use crate::rundir::{append_jsonl, write_snapshot, RunDir};

pub fn dispatch(cmd: Command) -> CliResult {
    let snapshot = serde_json::to_value(&cmd)?;
    match cmd {
        Command::GenerateSynth(a) => generate(&a, snapshot),
        Command::Segment(a) => segment(&a, snapshot),
        Command::Pretrain(a) => pretrain_cmd(&a, snapshot),
        Command::Train(a) => train(&a, snapshot),
        Command::Translate(a) => translate(&a, snapshot),
        Command::Evaluate(a) => evaluate(&a, snapshot),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::BenchMemory(a) => bench_memory(&a, snapshot),
        Command::ExportSimilarity(a) => export(&a, snapshot),
        Command::Ablate(a) => ablate(&a, snapshot),
    }
}

#[derive(Serialize)]
struct Snapshot<'a, C: Serialize> {
    command: &'a Value,
    effective: &'a C,
}

/// Objects merge key by key; anything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn merged<T: Serialize + serde::de::DeserializeOwned>(base: &T, file: Option<&Path>) -> CliResult<T> {
    let Some(path) = file else {
        return Ok(serde_json::from_value(serde_json::to_value(base)?)?);
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let patch: Value =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let mut v = serde_json::to_value(base)?;
    merge(&mut v, patch);
    serde_json::from_value(v).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn apply_base(cfg: &mut RunConfig, b: &BaseConfig) {
    match b.arch {
        Some(ArchPreset::Desk) => cfg.arch = ArchConfig::desk(),
        Some(ArchPreset::Full) => cfg.arch = ArchConfig::default(),
        None => {}
    }
    if let Some(s) = b.seed {
        cfg.seed = s;
    }
    if let Some(n) = b.feature_noise {
        cfg.feature_noise = n;
    }
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint<f32>> {
    Checkpoint::load(path).map_err(Failure::from)
}

fn input_width(videos: &[signtok_core::corpus::FrameSequence], dir: &Path) -> CliResult<usize> {
    videos
        .first()
        .map(|v| v.feature_dim())
        .ok_or_else(|| Failure::Data(format!("{} holds no videos", dir.display())))
}

fn dataset(corpus: CorpusDir, vocab: &Vocabulary, cfg: &RunConfig) -> CliResult<Dataset> {
    Ok(Dataset::build(
        corpus.videos,
        &corpus.sentences,
        corpus.truth.as_deref(),
        vocab,
        &cfg.segmenter,
    )?)
}

fn log_sink(path: std::path::PathBuf) -> impl Fn(&EpochLog) -> signtok_core::Result<()> {
    move |log| {
        append_jsonl(&path, log).map_err(|f| signtok_core::Error::Io {
            path: path.clone(),
            source: std::io::Error::other(format!("{f:?}")),
        })
    }
}

fn print_log(log: &EpochLog) {
    let losses: Vec<String> = log.losses.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    let val = log
        .validation
        .as_ref()
        .map(|r| format!(" val_bleu4={:.4}", r.bleu4))
        .unwrap_or_default();
    println!("{} epoch {} lr={:.5} {}{}", log.stage, log.epoch, log.lr, losses.join(" "), val);
}

fn generate(a: &GenerateArgs, snapshot: Value) -> CliResult {
    let mut spec: SyntheticSpec = merged(&SyntheticSpec::default(), a.spec.as_deref())?;
    spec.seed = a.seed;
    if let Some(n) = a.noise {
        spec.noise_sigma = n;
    }
    if let Some(g) = a.signs {
        spec.sign_vocab_size = g;
    }
    spec.validate()?;
    if a.split.as_ref().is_some_and(|s| s.len() != 3) {
        return Err(Failure::Usage("--split takes TRAIN,VAL,TEST".into()));
    }
    let total = match (&a.split, a.videos) {
        (Some(s), Some(v)) if s.iter().sum::<usize>() != v => {
            return Err(Failure::Usage(format!("--split {s:?} does not sum to --videos {v}")));
        }
        (Some(s), _) => s.iter().sum(),
        (None, Some(v)) => v,
        (None, None) => return Err(Failure::Usage("give --videos or --split".into())),
    };
    write_snapshot(&a.out, &Snapshot { command: &snapshot, effective: &spec })?;
    let corpus = generate_synthetic(&spec, total)?;
    match &a.split {
        None => write_corpus_dir(&a.out, &corpus.videos, &corpus.sentences, Some(&corpus.truth))?,
        Some(sizes) => {
            let mut lo = 0;
            for (name, n) in ["train", "val", "test"].into_iter().zip(sizes) {
                let r = lo..lo + n;
                write_corpus_dir(
                    &a.out.join(name),
                    &corpus.videos[r.clone()],
                    &corpus.sentences[r.clone()],
                    Some(&corpus.truth[r]),
                )?;
                lo += n;
            }
        }
    }
    println!("wrote {total} videos to {}", a.out.display());
    Ok(())
}

fn segment(a: &SegmentArgs, snapshot: Value) -> CliResult {
    let choice = match a.method {
        Method::MotionEnergy => SegmenterChoice::MotionEnergy {
            smooth_window: a.smooth_window,
            min_len: a.min_len,
        },
        Method::Uniform => SegmenterChoice::Uniform { factor: a.factor },
        Method::Oracle => SegmenterChoice::Oracle,
    };
    let run = RunDir::create(&a.out, &Snapshot { command: &snapshot, effective: &choice })?;
    let videos = load_frame_sequences(&a.corpus.join("manifest.jsonl"))?;
    let gt = a.corpus.join("ground_truth.jsonl");
    let truth = if gt.exists() { Some(read_ground_truth(&gt)?) } else { None };
    let truth_of = |id: &str| truth.as_ref().and_then(|t| t.iter().find(|g| g.video_id == id));
    let mut sets = Vec::with_capacity(videos.len());
    let mut f1 = Vec::new();
    for v in &videos {
        let t = truth_of(&v.video_id);
        let s = choice.segment(v, t)?;
        if let Some(t) = t {
            f1.push(boundary_f1(&s, &segment_oracle(t)?, a.tol).f1);
        }
        sets.push(s);
    }
    append_all(&run.report("segments.jsonl"), &sets)?;
    let reduction = reduction_report(&sets)?;
    let mean_f1 = (!f1.is_empty()).then(|| f1.iter().sum::<f64>() / f1.len() as f64);
    let report = json!({
        "videos": sets.len(),
        "reduction": reduction,
        "boundary_f1": mean_f1,
        "tol": a.tol,
    });
    run.write_json("segmentation.json", &report)?;
    println!("{report}");
    Ok(())
}

fn append_all<T: Serialize>(path: &Path, records: &[T]) -> CliResult {
    let _ = fs::remove_file(path);
    for r in records {
        append_jsonl(path, r)?;
    }
    Ok(())
}

fn pretrain_cmd(a: &PretrainArgs, snapshot: Value) -> CliResult {
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let (base, ck_vocab) = match &resume {
        Some(ck) => {
            let (cfg, vocab, _) = checkpoint_context(ck)?;
            (cfg, Some(vocab))
        }
        None => (RunConfig::default(), None),
    };
    let mut cfg = merged(&base, a.common.base.config.as_deref())?;
    apply_base(&mut cfg, &a.common.base);
    let p = &mut cfg.pretrain;
    if let Some(e) = a.common.epochs {
        p.optim.epochs = e;
    }
    if let Some(lr) = a.common.lr {
        p.optim.lr = lr;
    }
    if let Some(b) = a.common.batch_size {
        p.batch_size = b;
    }
    if let Some(l) = &a.loss {
        p.loss_mode = l.parse()?;
    }
    if let Some(d) = a.dual {
        p.dual = d;
    }
    if let Some(x) = a.alpha {
        p.alpha = x;
    }
    if let Some(x) = a.beta {
        p.beta = x;
    }
    cfg.validate()?;

    let run = RunDir::create(&a.out, &Snapshot { command: &snapshot, effective: &cfg })?;
    let corpus = read_corpus_dir(&a.corpus)?;
    let c_in = input_width(&corpus.videos, &a.corpus)?;
    let vocab = match ck_vocab {
        Some(v) => v,
        None => build_vocabulary(&corpus.sentences, cfg.min_count)?,
    };
    let has_truth = corpus.truth.is_some();
    let data = dataset(corpus, &vocab, &cfg)?;
    let sink = log_sink(run.log("pretrain.jsonl"));
    let last = run.checkpoint("pretrain_last.ckpt");
    let out = pretrain(&cfg, &data, &vocab, c_in, resume, |log, ck| {
        print_log(log);
        sink(log)?;
        ck.save(&last)
    })?;
    out.checkpoint.save(&last)?;
    let align = if has_truth {
        Some(out.model.alignment_accuracy(&out.checkpoint.params, &data)?)
    } else {
        None
    };
    let report = json!({
        "config_hash": cfg.hash(),
        "epochs": cfg.pretrain.optim.epochs,
        "final_losses": out.logs.last().map(|l| &l.losses),
        "train_alignment_accuracy": align,
        "checkpoint": last,
    });
    run.write_json("pretrain.json", &report)?;
    println!("{report}");
    Ok(())
}

fn train(a: &TrainArgs, snapshot: Value) -> CliResult {
    let last_path = a.out.join("checkpoints").join("finetune_last.ckpt");
    let best_path = a.out.join("checkpoints").join("finetune_best.ckpt");
    let resume = if a.resume {
        let last = load_checkpoint(&last_path)?;
        let best = if best_path.exists() { Some(load_checkpoint(&best_path)?) } else { None };
        Some(FinetuneResume { last, best })
    } else {
        None
    };
    let stage1 = a.stage1.as_deref().map(load_checkpoint).transpose()?;
    let context = match (&resume, &stage1) {
        (Some(r), _) => Some(checkpoint_context(&r.last)?),
        (None, Some(s)) => Some(checkpoint_context(s)?),
        (None, None) => None,
    };
    let base = context.as_ref().map(|c| c.0.clone()).unwrap_or_default();
    let mut cfg = merged(&base, a.common.base.config.as_deref())?;
    apply_base(&mut cfg, &a.common.base);
    let f = &mut cfg.finetune;
    if let Some(e) = a.common.epochs {
        f.optim.epochs = e;
    }
    if let Some(lr) = a.common.lr {
        f.optim.lr = lr;
    }
    if let Some(b) = a.common.batch_size {
        f.batch_size = b;
    }
    if let Some(p) = &a.policy {
        f.policy = p.parse()?;
    }
    if let Some(x) = a.label_smoothing {
        f.label_smoothing = x;
    }
    if let Some(x) = a.validate_every {
        f.validate_every = x;
    }
    if let Some(x) = a.beam {
        f.beam_width = x;
    }
    cfg.validate()?;
    if cfg.finetune.policy != TransferPolicy::None && stage1.is_none() && resume.is_none() {
        return Err(Failure::Usage(format!(
            "policy {:?} needs --stage1",
            cfg.finetune.policy
        )));
    }

    let run = RunDir::create(&a.out, &Snapshot { command: &snapshot, effective: &cfg })?;
    let corpus = read_corpus_dir(&a.corpus)?;
    let c_in = input_width(&corpus.videos, &a.corpus)?;
    let vocab = match &context {
        Some((_, v, ctx_c_in)) => {
            if *ctx_c_in != c_in {
                return Err(Failure::Data(format!(
                    "corpus frames are {c_in}-dimensional, checkpoint expects {ctx_c_in}"
                )));
            }
            v.clone()
        }
        None => build_vocabulary(&corpus.sentences, cfg.min_count)?,
    };
    let train_set = dataset(corpus, &vocab, &cfg)?;
    let val_set = match &a.val {
        Some(dir) => dataset(read_corpus_dir(dir)?, &vocab, &cfg)?,
        None => Dataset::default(),
    };
    let sink = log_sink(run.log("finetune.jsonl"));
    let mut best_bleu = resume
        .as_ref()
        .and_then(|r| r.best.as_ref())
        .and_then(|b| b.meta["bleu4"].as_f64());
    let out = finetune(
        &cfg,
        &train_set,
        &val_set,
        &vocab,
        c_in,
        stage1.as_ref().map(|c| &c.params),
        resume,
        |log, ck| {
            print_log(log);
            sink(log)?;
            ck.save(&last_path)?;
            if let Some(r) = &log.validation {
                if best_bleu.is_none_or(|b| r.bleu4 > b) {
                    best_bleu = Some(r.bleu4);
                    let mut best = ck.clone();
                    best.meta["bleu4"] = json!(r.bleu4);
                    best.save(&best_path)?;
                }
            }
            Ok(())
        },
    )?;
    out.last.save(&last_path)?;
    best_checkpoint(&cfg, &out, &vocab, c_in).save(&best_path)?;
    let report = json!({
        "config_hash": cfg.hash(),
        "best_epoch": out.best_epoch,
        "best_val_bleu4": out.best_bleu4,
        "checkpoint": best_path,
    });
    run.write_json("finetune.json", &report)?;
    println!("{report}");
    Ok(())
}

fn translate(a: &TranslateArgs, snapshot: Value) -> CliResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (mut cfg, vocab, c_in) = checkpoint_context(&ck)?;
    if let Some(b) = a.beam {
        cfg.finetune.beam_width = b;
    }
    cfg.validate()?;
    let run = RunDir::create(&a.out, &Snapshot { command: &snapshot, effective: &cfg })?;
    let (fresh, model) = build_translator(&cfg, c_in, vocab.len())?;
    same_layout(&fresh, &ck.params)?;
    let videos = load_frame_sequences(&a.corpus.join("manifest.jsonl"))?;
    let gt = a.corpus.join("ground_truth.jsonl");
    let truth = if gt.exists() { Some(read_ground_truth(&gt)?) } else { None };
    let mut hyps = Vec::with_capacity(videos.len());
    let mut records = Vec::with_capacity(videos.len());
    for v in &videos {
        if v.feature_dim() != c_in {
            return Err(Failure::Data(format!(
                "video {}: {} features, checkpoint expects {c_in}",
                v.video_id,
                v.feature_dim()
            )));
        }
        let t = truth.as_ref().and_then(|t| t.iter().find(|g| g.video_id == v.video_id));
        let segs = cfg.segmenter.segment(v, t)?;
        let h = decode(&model, &ck.params, v, &segs, cfg.finetune.beam_width)?;
        let text = vocab.decode(h.words()).join(" ");
        records.push(json!({
            "video_id": v.video_id,
            "hypothesis": text,
            "log_prob": h.log_prob,
            "score": h.score,
        }));
        hyps.push(text);
    }
    append_all(&run.report("translations.jsonl"), &records)?;
    run.write_report("hypotheses.txt", &lines(&hyps))?;
    let tp = a.corpus.join("transcripts.jsonl");
    if tp.exists() {
        let sentences = read_transcripts(&tp)?;
        let refs = videos
            .iter()
            .map(|v| {
                sentences
                    .iter()
                    .find(|s| s.video_id == v.video_id)
                    .map(|s| s.joined())
                    .ok_or_else(|| Failure::Data(format!("video {}: no transcript", v.video_id)))
            })
            .collect::<CliResult<Vec<_>>>()?;
        run.write_report("references.txt", &lines(&refs))?;
    }
    println!("decoded {} videos with beam {}", hyps.len(), cfg.finetune.beam_width);
    Ok(())
}

fn same_layout(expected: &ParameterSet<f32>, got: &ParameterSet<f32>) -> CliResult {
    let names = |p: &ParameterSet<f32>| -> Vec<(String, (usize, usize))> {
        p.iter().map(|(_, x)| (x.name.clone(), x.value.shape())).collect()
    };
    if names(expected) != names(got) {
        return Err(Failure::Data(
            "checkpoint parameters do not match the architecture in its config".into(),
        ));
    }
    Ok(())
}

fn lines(items: &[String]) -> String {
    let mut s = items.join("\n");
    s.push('\n');
    s
}

fn read_lines(path: &Path) -> CliResult<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(tokenize).collect())
}

fn evaluate(a: &EvaluateArgs, snapshot: Value) -> CliResult {
    let hyps = read_lines(&a.hyp)?;
    let refs = read_lines(&a.reference)?;
    if hyps.len() != refs.len() {
        return Err(Failure::Data(format!(
            "{} hypothesis lines vs {} reference lines",
            hyps.len(),
            refs.len()
        )));
    }
    let report = EvalReport::score(&hyps, &refs)?;
    if let Some(out) = &a.out {
        let run = RunDir::create(out, &Snapshot { command: &snapshot, effective: &snapshot })?;
        run.write_json("eval.json", &report)?;
        run.write_report("eval.csv", &format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()))?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> CliResult {
    let kind: LossKind = a.loss.parse()?;
    let rep = loss_grad_check(
        kind,
        &LossCheck {
            batch: a.batch,
            max_len: a.max_len,
            seed: a.seed,
            ..LossCheck::default()
        },
    )?;
    let pass = rep.max_rel_error <= a.tol;
    println!(
        "{}",
        json!({
            "loss": kind,
            "max_rel_error": rep.max_rel_error,
            "coords_checked": rep.coords_checked,
            "worst": rep.worst,
            "tol": a.tol,
            "pass": pass,
        })
    );
    if pass {
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "max relative error {:.3e} exceeds {:.1e}",
            rep.max_rel_error, a.tol
        )))
    }
}

fn bench_memory(a: &BenchMemoryArgs, snapshot: Value) -> CliResult {
    if a.lengths.is_empty() || a.lengths.contains(&0) {
        return Err(Failure::Usage("--lengths must be positive".into()));
    }
    let run = RunDir::create(&a.out, &Snapshot { command: &snapshot, effective: &snapshot })?;
    let mut rows: Vec<MemoryProfile> = Vec::with_capacity(a.lengths.len());
    for &len in &a.lengths {
        let mut p = attention_memory_profile(len, a.layers, a.heads, a.batch, a.dim);
        if !a.no_measure {
            p.measured_peak_bytes = measure_attention_peak(len, a.layers, a.heads, a.batch, a.dim)?;
        }
        rows.push(p);
    }
    let mut csv = format!("{}\n", MemoryProfile::CSV_HEADER);
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    run.write_report("memory.csv", &csv)?;
    print!("{csv}");
    let measured: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.measured_peak_bytes.map(|b| (r.seq_len as f64, b as f64)))
        .collect();
    if measured.len() >= 3 {
        let (xs, ys): (Vec<f64>, Vec<f64>) = measured.into_iter().unzip();
        let (c, r2) = quadratic_fit(&xs, &ys)?;
        let fit = json!({ "coefficients": c, "r2": r2 });
        run.write_json("memory_fit.json", &fit)?;
        println!("{fit}");
    }
    Ok(())
}

fn export(a: &ExportArgs, snapshot: Value) -> CliResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (cfg, vocab, c_in) = checkpoint_context(&ck)?;
    let run = RunDir::create(&a.out, &Snapshot { command: &snapshot, effective: &cfg })?;
    let (fresh, model) = PretrainModel::build::<f32>(&cfg.arch, c_in, vocab.len(), cfg.seed)?;
    same_layout(&fresh, &ck.params)?;
    let corpus = read_corpus_dir(&a.corpus)?;
    let has_truth = corpus.truth.is_some();
    let data = dataset(corpus, &vocab, &cfg)?;
    let files = export_similarity(&model, &ck.params, &data, &run.report("similarity"))?;
    let align = if has_truth {
        Some(model.alignment_accuracy(&ck.params, &data)?)
    } else {
        None
    };
    let report = json!({ "files": files.len(), "alignment_accuracy": align });
    run.write_json("alignment.json", &report)?;
    println!("{report}");
    Ok(())
}

fn parse_axis(s: &str) -> CliResult<AblationAxis> {
    let (name, values) = s
        .split_once('=')
        .ok_or_else(|| Failure::Usage(format!("axis {s:?} is not name=v1,v2,...")))?;
    let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Failure::Usage(format!("axis {name} has no values")));
    }
    let bad = |v: &str| Failure::Usage(format!("bad {name} value {v:?}"));
    Ok(match name {
        "beta" => AblationAxis::Beta(
            values
                .iter()
                .map(|v| v.parse::<f64>().map_err(|_| bad(v)))
                .collect::<CliResult<_>>()?,
        ),
        "loss" => AblationAxis::Loss(
            values
                .iter()
                .map(|v| {
                    let (mode, dual) = match v.split_once('+') {
                        Some((m, "dual")) => (m, true),
                        Some(_) => return Err(bad(v)),
                        None => (*v, false),
                    };
                    Ok(LossVariant {
                        mode: mode.parse().map_err(|_| bad(v))?,
                        dual,
                    })
                })
                .collect::<CliResult<_>>()?,
        ),
        "policy" => AblationAxis::Policy(
            values
                .iter()
                .map(|v| v.parse::<TransferPolicy>().map_err(|_| bad(v)))
                .collect::<CliResult<_>>()?,
        ),
        _ => return Err(Failure::Usage(format!("unknown axis {name:?}; use beta, loss or policy"))),
    })
}

fn ablate(a: &AblateArgs, snapshot: Value) -> CliResult {
    let axis = parse_axis(&a.axis)?;
    let mut cfg = merged(&RunConfig::default(), a.base.config.as_deref())?;
    apply_base(&mut cfg, &a.base);
    if let Some(e) = a.pretrain_epochs {
        cfg.pretrain.optim.epochs = e;
    }
    if let Some(e) = a.finetune_epochs {
        cfg.finetune.optim.epochs = e;
    }
    if let Some(lr) = a.finetune_lr {
        cfg.finetune.optim.lr = lr;
    }
    cfg.validate()?;
    let run = RunDir::create(&a.out, &Snapshot { command: &snapshot, effective: &(&cfg, &axis) })?;
    let train = read_corpus_dir(&a.data.join("train"))?;
    let c_in = input_width(&train.videos, &a.data.join("train"))?;
    let vocab = build_vocabulary(&train.sentences, cfg.min_count)?;
    let data = ExperimentData {
        train: dataset(train, &vocab, &cfg)?,
        val: dataset(read_corpus_dir(&a.data.join("val"))?, &vocab, &cfg)?,
        test: dataset(read_corpus_dir(&a.data.join("test"))?, &vocab, &cfg)?,
        vocab,
        c_in,
    };
    let rows = run_ablation_grid(&cfg, &axis, &data)?;
    let csv = ablation_csv(&rows);
    run.write_report("ablation.csv", &csv)?;
    print!("{csv}");
    Ok(())
}
