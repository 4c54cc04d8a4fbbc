use std::path::Path;

use sceneqa::attention::{attention_maps, write_attention};
use sceneqa::datakit::{
    generate_dataset, ingest_scanqa, manifest_path, token_stats, vocab_path, DatasetManifest, LoadedSplit, SceneConfig,
    SplitPlan,
};
use sceneqa::eval::{predict, read_predictions, write_predictions, EvalReport};
use sceneqa::lm::Decoding;
use sceneqa::model::{prepare_scene, Model, ModelConfig};
use sceneqa::pointcloud::io::read_cloud;
use sceneqa::sweep::{query_sweep, validate_sweep, SweepPlan};
use sceneqa::text::Vocabulary;
use sceneqa::training::{
    detection_hits, encode_instruction, evaluate_loss, load_checkpoint, pretrain_detector, save_checkpoint, train,
    CheckpointMeta, DetectionScene, DetectorPlan, TrainData, TrainOptions, TrainPlan,
};
use sceneqa::{Error, Result};

use super::*;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::IngestScanqa(a) => ingest(a),
        Command::TokenStats(a) => stats(a),
        Command::InitConfig(a) => init_config(a),
        Command::PretrainDetector(a) => detector(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::ExportAttention(a) => export(a),
        Command::QuerySweep(a) => sweep(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found")))
    }
}

fn load_vocab(dataset: &Path) -> Result<Vocabulary> {
    Vocabulary::load(&vocab_path(dataset))
}

/// `--vocab`, else `vocab.txt` next to the checkpoint, else the dataset's.
fn resolve_vocab(explicit: Option<&Path>, checkpoint: Option<&Path>, dataset: Option<&Path>) -> Result<Vocabulary> {
    if let Some(p) = explicit {
        return Vocabulary::load(p);
    }
    if let Some(dir) = checkpoint.and_then(Path::parent) {
        let p = dir.join("vocab.txt");
        if p.is_file() {
            return Vocabulary::load(&p);
        }
    }
    match dataset {
        Some(d) => load_vocab(d),
        None => Err(Error::arg("no vocabulary found: pass --vocab or --dataset")),
    }
}

fn model_config(model_config: Option<&Path>, preset: Preset, nq: Option<usize>, vocab_size: usize) -> Result<ModelConfig> {
    let mut cfg = match model_config {
        Some(p) => read_json::<ModelConfig>(p)?,
        None => match preset {
            Preset::Desk => ModelConfig::desk(vocab_size),
            Preset::Tiny => ModelConfig::tiny(vocab_size),
        },
    };
    if let Some(n) = nq {
        cfg = cfg.with_queries(n);
    }
    if cfg.lm.vocab_size != vocab_size {
        return Err(Error::config(format!(
            "model vocabulary size {} does not match the dataset vocabulary ({vocab_size})",
            cfg.lm.vocab_size
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn incompatible(ck_path: &Path, missing: &[String], unexpected: &[String]) -> Error {
    Error::config(format!(
        "checkpoint {} does not fit the model\n  expected but missing: [{}]\n  found but unexpected: [{}]",
        ck_path.display(),
        missing.join(", "),
        unexpected.join(", ")
    ))
}

/// Model from a checkpoint; with an explicit configuration the checkpoint must
/// match it tensor for tensor.
fn load_model(ck_path: &Path, explicit_cfg: Option<ModelConfig>, seed: u64) -> Result<Model> {
    let ck = load_checkpoint(ck_path)?;
    let mut model = match explicit_cfg {
        Some(cfg) => Model::new(cfg, seed)?,
        None => Model::new(ck.meta.model.clone(), seed)?,
    };
    let (missing, unexpected) = ck.tensor_name_diff(&model.store);
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(incompatible(ck_path, &missing, &unexpected));
    }
    ck.load_into(&mut model.store)?;
    Ok(model)
}

fn decoding(beam: Option<usize>) -> Decoding {
    match beam {
        Some(w) if w > 1 => Decoding::Beam(w),
        _ => Decoding::Greedy,
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => SceneConfig::from_json(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => SceneConfig::default(),
    };
    let plan = SplitPlan {
        train: a.train_frac,
        val: a.val_frac,
    };
    if !(0.0..=1.0).contains(&plan.train) || !(0.0..=1.0).contains(&plan.val) || plan.train + plan.val > 1.0 {
        return Err(Error::arg("split fractions must lie in [0, 1] and sum to at most 1"));
    }
    if a.scenes == 0 {
        return Err(Error::arg("--scenes must be positive"));
    }
    create_dir(&a.out)?;
    let manifests = generate_dataset(&a.out, a.seed, a.scenes, &cfg, plan)?;
    for m in &manifests {
        println!("{}: {} scenes, {} items", m.header.split, m.scenes.len(), m.num_items());
        for w in &m.header.warnings {
            eprintln!("warning: {w}");
        }
    }
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    create_dir(&a.out)?;
    let manifest = ingest_scanqa(&a.questions, a.annotations.as_deref(), &a.clouds, &a.out, &a.split)?;
    for w in &manifest.header.warnings {
        eprintln!("warning: {w}");
    }
    manifest.save(&manifest_path(&a.out, &a.split))?;
    // The vocabulary covers every split present under the root.
    let mut texts: Vec<String> = Vec::new();
    for split in ["train", "val", "test"].iter().copied().chain(std::iter::once(a.split.as_str())) {
        let p = manifest_path(&a.out, split);
        if p.is_file() {
            texts.extend(DatasetManifest::load(&p)?.texts().map(str::to_string));
        }
    }
    Vocabulary::build(&texts).save(&vocab_path(&a.out))?;
    println!("{}: {} scenes, {} items, {} skipped", a.split, manifest.scenes.len(), manifest.num_items(), manifest.header.skipped.len());
    Ok(())
}

fn stats(a: TokenStatsArgs) -> Result<()> {
    require_dir(&a.data.dataset)?;
    let m = DatasetManifest::load(&manifest_path(&a.data.dataset, &a.split))?;
    println!("{}", serde_json::to_string_pretty(&token_stats(&m))?);
    Ok(())
}

fn init_config(a: InitConfigArgs) -> Result<()> {
    let vocab_size = match (a.vocab_size, &a.dataset) {
        (Some(v), _) => v,
        (None, Some(d)) => load_vocab(d)?.len(),
        (None, None) => return Err(Error::arg("pass --vocab-size or --dataset")),
    };
    let cfg = model_config(a.model.model_config.as_deref(), a.model.preset, a.model.nq, vocab_size)?;
    write_text(&a.out, &serde_json::to_string_pretty(&cfg)?)
}

fn detection_scenes(split: &LoadedSplit, sample_points: usize) -> Result<Vec<DetectionScene>> {
    split
        .manifest
        .scenes
        .iter()
        .zip(&split.clouds)
        .map(|(s, c)| DetectionScene::new(c, &s.boxes, sample_points))
        .collect()
}

fn detector(a: DetectorArgs) -> Result<()> {
    require_dir(&a.data.dataset)?;
    let vocab = load_vocab(&a.data.dataset)?;
    let explicit = match (&a.checkpoint, &a.model.model_config) {
        (Some(_), None) => None,
        _ => Some(model_config(a.model.model_config.as_deref(), a.model.preset, a.model.nq, vocab.len())?),
    };
    let mut plan = DetectorPlan {
        seed: a.seed,
        ..DetectorPlan::default()
    };
    if let Some(v) = a.epochs {
        plan.epochs = v;
    }
    if let Some(v) = a.batch_size {
        plan.batch_size = v;
    }
    if let Some(v) = a.lr_max {
        plan.lr_max = v;
    }
    if let Some(v) = a.lr_min {
        plan.lr_min = v;
    }
    let mut model = match &a.checkpoint {
        Some(p) => load_model(p, explicit, a.seed)?,
        None => Model::new(explicit.expect("config resolved without a checkpoint"), a.seed)?,
    };
    let train_split = LoadedSplit::load(&a.data.dataset, "train")?;
    let scenes = detection_scenes(&train_split, model.cfg.sample_points)?;
    create_dir(&a.out)?;
    let log = a.out.join("detector_metrics.jsonl");
    let _ = std::fs::remove_file(&log);
    let records = pretrain_detector(&mut model, &plan, &scenes, Some(&log))?;
    if let Some(r) = records.last() {
        println!("epoch {} loss {:.4} matched center error {:.4}", r.epoch, r.loss, r.matched_center_error);
    }
    if manifest_path(&a.data.dataset, "val").is_file() {
        let val = LoadedSplit::load(&a.data.dataset, "val")?;
        let (hits, total) = detection_hits(&model, &detection_scenes(&val, model.cfg.sample_points)?)?;
        if total > 0 {
            println!("val: {hits}/{total} matched centers inside their box");
        }
    }
    let meta = CheckpointMeta {
        model: model.cfg.clone(),
        plan_hash: None,
        phase: None,
        step: 0,
        epoch: plan.epochs,
    };
    let ck = a.out.join("detector.ckpt");
    save_checkpoint(&ck, &model, None, &meta)?;
    vocab.save(&a.out.join("vocab.txt"))?;
    println!("wrote {}", ck.display());
    Ok(())
}

fn train_plan(a: &TrainArgs) -> Result<TrainPlan> {
    let mut plan = match &a.plan {
        Some(p) => read_json::<TrainPlan>(p)?,
        None => TrainPlan::for_phase(a.phase, a.seed.unwrap_or(0)),
    };
    plan.phase = a.phase;
    if let Some(v) = a.seed {
        plan.seed = v;
    }
    if let Some(v) = a.epochs {
        plan.epochs = v;
    }
    if let Some(v) = a.batch_size {
        plan.batch_size = v;
    }
    if let Some(v) = a.lr_max {
        plan.lr_max = v;
    }
    if let Some(v) = a.lr_min {
        plan.lr_min = v;
    }
    if a.max_steps.is_some() {
        plan.max_steps = a.max_steps;
    }
    if a.no_fusion {
        plan.query_fusion = false;
    }
    if a.freeze_compressor {
        plan.compressor_trainable = false;
    }
    if a.freeze_lm {
        plan.lm_frozen = true;
    }
    if a.freeze_encoder {
        plan.encoder_frozen = true;
    }
    if a.no_clip {
        plan.grad_clip = None;
    }
    plan.validate()?;
    Ok(plan)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    require_dir(&a.data.dataset)?;
    let plan = train_plan(&a)?;
    let vocab = load_vocab(&a.data.dataset)?;
    let explicit = if a.model.model_config.is_some() || (a.checkpoint.is_none() && a.resume.is_none()) {
        Some(model_config(a.model.model_config.as_deref(), a.model.preset, a.model.nq, vocab.len())?)
    } else {
        None
    };
    if a.model.nq.is_some() && explicit.is_none() {
        return Err(Error::arg("--nq applies to fresh models; pass --model-config or drop --checkpoint"));
    }
    let mut opts = TrainOptions {
        checkpoint_dir: Some(a.out.clone()),
        log_path: Some(a.out.join("metrics.jsonl")),
        resume: None,
    };
    let mut model = match (&a.checkpoint, &a.resume) {
        (Some(p), _) => load_model(p, explicit, plan.seed)?,
        (None, Some(p)) => {
            let model = load_model(p, explicit, plan.seed)?;
            opts.resume = Some(load_checkpoint(p)?);
            model
        }
        (None, None) => Model::new(explicit.expect("config resolved for a fresh model"), plan.seed)?,
    };
    if model.cfg.lm.vocab_size != vocab.len() {
        return Err(Error::config(format!(
            "model vocabulary size {} does not match the dataset vocabulary ({})",
            model.cfg.lm.vocab_size,
            vocab.len()
        )));
    }
    let split = LoadedSplit::load(&a.data.dataset, "train")?;
    let data = TrainData::for_phase(&split, &vocab, &model.cfg, plan.phase)?;
    create_dir(&a.out)?;
    if opts.resume.is_none() {
        let _ = std::fs::remove_file(opts.log_path.as_ref().expect("set above"));
    }
    write_text(&a.out.join("plan.json"), &serde_json::to_string_pretty(&plan)?)?;
    vocab.save(&a.out.join("vocab.txt"))?;
    let outcome = train(&mut model, &plan, &data, &opts)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    write_text(&a.out.join("model.json"), &serde_json::to_string_pretty(&model.cfg)?)?;
    let epoch_steps = plan.steps_per_epoch(data.samples.len());
    println!(
        "{}: {} samples, {} steps, last-epoch loss {:.4}",
        plan.phase.as_str(),
        data.samples.len(),
        outcome.steps,
        outcome.recent_loss(epoch_steps)
    );
    if manifest_path(&a.data.dataset, "val").is_file() {
        let val = LoadedSplit::load(&a.data.dataset, "val")?;
        let vdata = TrainData::for_phase(&val, &vocab, &model.cfg, plan.phase)?;
        if !vdata.samples.is_empty() {
            println!("val loss {:.4}", evaluate_loss(&model, &vdata)?);
        }
    }
    if let Some(p) = &outcome.last_checkpoint {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let preds = match (&a.predictions, &a.checkpoint) {
        (Some(p), _) => read_predictions(p)?,
        (None, Some(ck)) => {
            let dataset = a
                .dataset
                .as_deref()
                .ok_or_else(|| Error::arg("--dataset is required when generating predictions"))?;
            require_dir(dataset)?;
            let vocab = resolve_vocab(a.vocab.as_deref(), Some(ck), Some(dataset))?;
            let model = load_model(ck, None, 0)?;
            let split = LoadedSplit::load(dataset, &a.split)?;
            let qa_only = a.qa_only;
            predict(&model, &split, &vocab, decoding(a.beam), |q| {
                !qa_only || q.task == sceneqa::datakit::TaskTag::Qa
            })?
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let report = EvalReport::compute(&preds);
    println!("{}", report.table(&a.split));
    if report.overall.empty_corpus {
        eprintln!("warning: all predictions are empty; BLEU is reported as 0");
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        if a.predictions.is_none() {
            write_predictions(&out.join("predictions.jsonl"), &preds)?;
        }
        write_text(&out.join("report.jsonl"), &report.to_jsonl(&a.split)?)?;
    }
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let vocab = resolve_vocab(a.vocab.as_deref(), Some(&a.checkpoint), a.dataset.as_deref())?;
    let model = load_model(&a.checkpoint, None, 0)?;
    let cloud = read_cloud(&a.cloud)?;
    let features = model.spatial_features(&prepare_scene(&cloud, model.cfg.sample_points)?)?;
    let ids = model.generate(&features, &encode_instruction(&vocab, &model.cfg, &a.question), decoding(a.beam))?;
    println!("{}", vocab.decode(&ids));
    Ok(())
}

fn export(a: ExportArgs) -> Result<()> {
    let vocab = resolve_vocab(a.vocab.as_deref(), Some(&a.checkpoint), a.dataset.as_deref())?;
    let model = load_model(&a.checkpoint, None, 0)?;
    if a.k == 0 || a.k > model.cfg.compressor.n_q {
        return Err(Error::arg(format!(
            "--k {} must be between 1 and the compressor query count {}",
            a.k, model.cfg.compressor.n_q
        )));
    }
    let cloud = read_cloud(&a.cloud)?;
    let maps = attention_maps(&model, &cloud, &encode_instruction(&vocab, &model.cfg, &a.question), a.k)?;
    let paths = write_attention(&a.out, &cloud, &maps)?;
    let mut index = String::new();
    for (rank, (m, p)) in maps.queries.iter().zip(&paths).enumerate() {
        let rec = serde_json::json!({
            "rank": rank,
            "compressor_query": m.compressor_query,
            "decoder_query": m.decoder_query,
            "p_obj": m.p_obj,
            "file": p.file_name().map(|f| f.to_string_lossy().into_owned()),
        });
        index.push_str(&rec.to_string());
        index.push('\n');
    }
    write_text(&a.out.join("queries.jsonl"), &index)?;
    for p in &paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    require_dir(&a.data.dataset)?;
    let vocab = load_vocab(&a.data.dataset)?;
    let base = model_config(a.model_config.as_deref(), a.preset, None, vocab.len())?;
    validate_sweep(&base, &a.nq)?;
    let mut train_plan = TrainPlan::for_phase(a.phase, a.seed);
    train_plan.epochs = a.epochs;
    train_plan.max_steps = a.max_steps;
    let plan = SweepPlan {
        n_qs: a.nq.clone(),
        train: train_plan,
        decoding: Decoding::Greedy,
        repeats: a.repeats,
        init_seed: a.seed,
    };
    let train_split = LoadedSplit::load(&a.data.dataset, "train")?;
    let eval_split = LoadedSplit::load(&a.data.dataset, &a.split)?;
    let report = query_sweep(&base, &plan, &train_split, &eval_split, &vocab)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("sweep.jsonl"), &report.to_jsonl()?)?;
    println!("{}", report.table());
    let env = &report.environment;
    println!("measured on {} {} with {} cpu(s), {} precision", env.os, env.arch, env.cpus, env.precision);
    Ok(())
}
