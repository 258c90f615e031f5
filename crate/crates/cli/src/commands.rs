//! Pipeline commands. Each reads a [`RunConfig`], writes its artifacts and
//! a JSON record carrying the config digest and seed, and returns a JSON
//! summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use tempoflow_core::audio::{read_wav, write_wav};
use tempoflow_core::autodiff::Params;
use tempoflow_core::codec::Codec;
use tempoflow_core::conditioning::{
    blurred_first_stream, drum_bandpass, inpaint_condition, ConditionInputs, BLUR_WINDOW_AUDIO, BLUR_WINDOW_DRUMS,
};
use tempoflow_core::config::RunConfig;
use tempoflow_core::features::detect_onsets;
use tempoflow_core::metrics::{
    chord_iou, chroma_cosine, clip_embedding, estimate_chords, estimate_melody, frechet_distance, melody_accuracy,
    onset_f1, GaussianStats, ONSET_TOLERANCE,
};
use tempoflow_core::model::{init_params, ModelConfig};
use tempoflow_core::ode::{generate as generate_latent, Generation};
use tempoflow_core::synth::{
    build_corpus, hex_digest, read_annotations, read_manifest, AnnotationFile, ChordLabel, Manifest, ManifestRecord,
    MANIFEST_FILE,
};
use tempoflow_core::train::{prepare_examples, train_loop, TrainOutput};
use tempoflow_core::Error;

use crate::error::{CliError, CliResult};

pub const RUN_RECORD: &str = "run.json";
pub const FINAL_CHECKPOINT: &str = "final.bin";
pub const GENERATION_METADATA: &str = "metadata.json";
pub const COMPARISON: &str = "comparison.json";

#[derive(Debug, Clone, Copy, Default)]
pub struct Flags {
    pub force: bool,
    pub self_eval: bool,
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.into(), source: e })?;
    }
    let body = serde_json::to_vec_pretty(value)?;
    std::fs::write(path, body).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let body = std::fs::read(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(serde_json::from_slice(&body)?)
}

fn file_digest(path: &Path) -> CliResult<String> {
    let body = std::fs::read(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(hex_digest(&body))
}

/// Sidecar record for a single-file artifact: `codec.bin` -> `codec.bin.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Refuse to overwrite an artifact produced by an identical config unless
/// forced.
pub fn guard(record: &Path, cfg: &RunConfig, force: bool) -> CliResult<()> {
    if !record.exists() {
        return Ok(());
    }
    let previous: Value = read_json(record)?;
    let digest = cfg.digest();
    if previous.get("config_digest").and_then(Value::as_str) == Some(digest.as_str()) {
        if force {
            eprintln!("warning: overwriting {} (same config digest, --force)", record.display());
        } else {
            eprintln!("warning: {} was produced by this exact config", record.display());
            return Err(CliError::Rerun {
                record: record.to_path_buf(),
                digest,
            });
        }
    }
    Ok(())
}

fn require(path: &Path, what: &str, command: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite(format!("{what} {} (run `tempoflow {command}`)", path.display())).into())
    }
}

fn header(command: &str, cfg: &RunConfig) -> CliResult<Value> {
    Ok(json!({ "command": command, "config_digest": cfg.digest(), "seed": cfg.seed()? }))
}

pub fn synth(cfg: &RunConfig, flags: Flags) -> CliResult<Value> {
    let dir = cfg.path("corpus.dir");
    let record = dir.join(RUN_RECORD);
    guard(&record, cfg, flags.force)?;
    let clips: usize = cfg.get("corpus.clips")?;
    let corpus_seed: u64 = cfg.get("corpus.seed")?;
    let manifest = build_corpus(clips, corpus_seed, &dir)?;
    let mut out = header("synth", cfg)?;
    out["corpus_seed"] = json!(corpus_seed);
    out["clips"] = json!(manifest.records.len());
    out["manifest"] = json!(dir.join(MANIFEST_FILE));
    out["manifest_digest"] = json!(manifest.digest);
    write_json(&record, &out)?;
    Ok(out)
}

/// Manifest plus the training/held-out split.
pub struct Corpus {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub train: Vec<ManifestRecord>,
    pub holdout: Vec<ManifestRecord>,
}

pub fn load_corpus(cfg: &RunConfig) -> CliResult<Corpus> {
    let dir = cfg.path("corpus.dir");
    require(&dir.join(MANIFEST_FILE), "corpus manifest", "synth")?;
    let manifest = read_manifest(&dir)?;
    let holdout: usize = cfg.get("corpus.holdout")?;
    if holdout >= manifest.records.len() {
        return Err(Error::invalid(format!(
            "corpus.holdout = {holdout} leaves no training clips out of {}",
            manifest.records.len()
        ))
        .into());
    }
    let split = manifest.records.len() - holdout;
    Ok(Corpus {
        train: manifest.records[..split].to_vec(),
        holdout: manifest.records[split..].to_vec(),
        dir,
        manifest,
    })
}

pub fn fit_codec(cfg: &RunConfig, flags: Flags) -> CliResult<Value> {
    let path = cfg.path("codec.path");
    let record = sidecar(&path);
    guard(&record, cfg, flags.force)?;
    let corpus = load_corpus(cfg)?;
    let n: usize = cfg.get("codec.fit_clips")?;
    let clips = corpus
        .train
        .iter()
        .take(n)
        .map(|r| read_wav(&corpus.dir.join(&r.mix_path)))
        .collect::<Result<Vec<_>, _>>()?;
    let codec = Codec::fit(&clips, &cfg.codec_config()?)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.into(), source: e })?;
    }
    codec.save(&path)?;
    let mut out = header("fit-codec", cfg)?;
    out["codec"] = json!(path);
    out["codec_digest"] = json!(file_digest(&path)?);
    out["corpus_digest"] = json!(corpus.manifest.digest);
    out["fit_clips"] = json!(clips.len());
    write_json(&record, &out)?;
    Ok(out)
}

fn load_codec(cfg: &RunConfig) -> CliResult<Codec> {
    let path = cfg.path("codec.path");
    require(&path, "codec file", "fit-codec")?;
    Ok(Codec::load(&path)?)
}

/// Train with the config's settings into `train.out`, without the rerun
/// guard. Returns the training record.
pub fn train_model(cfg: &RunConfig) -> CliResult<Value> {
    let corpus = load_corpus(cfg)?;
    let codec = load_codec(cfg)?;
    let model = cfg.model_config()?;
    if model.n_enc != codec.n_enc {
        return Err(Error::invalid(format!("codec.n_enc {} but codec file has {}", model.n_enc, codec.n_enc)).into());
    }
    let tc = cfg.train_config()?;
    let seed = cfg.seed()?;
    let examples = prepare_examples(&corpus.dir, &corpus.train, &codec, cfg.audio_source()?)?;
    let out_dir = cfg.path("train.out");
    let output = TrainOutput { dir: out_dir.clone() };
    let init = init_params::<f32>(&model, seed)?;
    let outcome = train_loop(&examples, &model, init, &tc, seed, Some(&output), |row| {
        eprintln!("step {:>6}  loss {:.5}  lr {:.2e}  |g| {:.4}", row.step, row.loss, row.lr, row.grad_norm)
    })?;
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    outcome.params.save(&final_path)?;
    let final_loss = outcome.log.iter().rev().map(|r| r.loss).find(|l| l.is_finite());
    let mut out = header("train", cfg)?;
    out["corpus_digest"] = json!(corpus.manifest.digest);
    out["codec_digest"] = json!(file_digest(&cfg.path("codec.path"))?);
    out["model"] = serde_json::to_value(model)?;
    out["train"] = serde_json::to_value(&tc)?;
    out["examples"] = json!(examples.len());
    out["skipped"] = json!(outcome.skipped);
    out["final_logged_loss"] = json!(final_loss);
    out["checkpoint"] = json!(final_path);
    out["checkpoints"] = json!(outcome.checkpoints);
    out["log"] = json!(output.log_path());
    write_json(&out_dir.join(RUN_RECORD), &out)?;
    Ok(out)
}

pub fn train(cfg: &RunConfig, flags: Flags) -> CliResult<Value> {
    guard(&cfg.path("train.out").join(RUN_RECORD), cfg, flags.force)?;
    train_model(cfg)
}

/// Parameters and the model configuration recorded next to them.
pub fn load_model(checkpoint: &Path) -> CliResult<(Params<f32>, ModelConfig)> {
    require(checkpoint, "checkpoint", "train")?;
    let record = checkpoint.parent().unwrap_or(Path::new(".")).join(RUN_RECORD);
    require(&record, "training record", "train")?;
    let rec: Value = read_json(&record)?;
    let model: ModelConfig = serde_json::from_value(rec.get("model").cloned().unwrap_or(Value::Null))?;
    Ok((Params::load(checkpoint)?, model))
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.opt_path("generate.checkpoint")
        .unwrap_or_else(|| cfg.path("train.out").join(FINAL_CHECKPOINT))
}

/// Per-frame values from either an annotation file or a bare JSON array.
fn frame_values<T: DeserializeOwned>(path: &Path, from_annotations: impl Fn(&AnnotationFile) -> Vec<T>) -> CliResult<Vec<T>> {
    let v: Value = read_json(path)?;
    if v.get("annotations").is_some() {
        Ok(from_annotations(&read_annotations(path)?))
    } else {
        Ok(serde_json::from_value(v)?)
    }
}

/// Controls named in the config, on a grid of `generate.frames` frames.
pub fn condition_inputs(cfg: &RunConfig, codec: &Codec, seed: u64) -> CliResult<(ConditionInputs, Value)> {
    let frames: usize = cfg.get("generate.frames")?;
    let mut cs = ConditionInputs::empty(frames);
    let mut provenance = serde_json::Map::new();
    cs.style = cfg.style()?;
    provenance.insert("style".into(), json!(cs.style));
    if let Some(p) = cfg.opt_path("generate.chords") {
        cs.chords = Some(frame_values::<ChordLabel>(&p, |a| a.annotations.chords.clone())?);
        provenance.insert("chords".into(), json!(p));
    }
    if let Some(p) = cfg.opt_path("generate.melody") {
        cs.melody = Some(frame_values::<Option<usize>>(&p, |a| a.annotations.melody_bins())?);
        provenance.insert("melody".into(), json!(p));
    }
    if let Some(p) = cfg.opt_path("generate.audio") {
        cs.audio = Some(blurred_first_stream(codec, &read_wav(&p)?, BLUR_WINDOW_AUDIO)?);
        provenance.insert("audio".into(), json!(p));
    }
    if let Some(p) = cfg.opt_path("generate.drums") {
        let x = drum_bandpass().filtfilt(&read_wav(&p)?);
        cs.drums = Some(blurred_first_stream(codec, &x, BLUR_WINDOW_DRUMS)?);
        provenance.insert("drums".into(), json!(p));
    }
    if let Some(p) = cfg.opt_path("generate.iop") {
        let z = codec.encode(&read_wav(&p)?)?;
        let fraction: f64 = cfg.get("generate.iop_fraction")?;
        let mode = cfg.paint_mode()?;
        let (masked, range) = inpaint_condition(&z, mode, fraction, &mut ChaCha8Rng::seed_from_u64(seed))?;
        cs.iop = Some(masked);
        provenance.insert(
            "iop".into(),
            json!({ "source": p, "mode": mode, "fraction": fraction, "masked_frames": [range.start, range.end] }),
        );
    }
    cs.validate(codec.n_enc)?;
    Ok((cs, Value::Object(provenance)))
}

fn self_eval(cs: &ConditionInputs, g: &Generation, threshold: f64) -> CliResult<Value> {
    let mut v = serde_json::Map::new();
    if let Some(ch) = &cs.chords {
        let est = estimate_chords(&g.waveform, cs.frames)?;
        v.insert("chord_iou".into(), json!(chord_iou(ch, &est)?));
    }
    if let Some(m) = &cs.melody {
        match melody_accuracy(m, &g.waveform, threshold) {
            Ok(a) => v.insert("melody_accuracy".into(), json!(a)),
            Err(Error::UndefinedMetric(why)) => v.insert("melody_accuracy".into(), json!({ "undefined": why })),
            Err(e) => return Err(e.into()),
        };
    }
    Ok(Value::Object(v))
}

pub fn generate(cfg: &RunConfig, flags: Flags) -> CliResult<Value> {
    let out_dir = cfg.path("generate.out");
    guard(&out_dir.join(GENERATION_METADATA), cfg, flags.force)?;
    let codec = load_codec(cfg)?;
    let checkpoint = checkpoint_path(cfg);
    let (params, model) = load_model(&checkpoint)?;
    let seed = cfg.seed()?;
    let (cs, provenance) = condition_inputs(cfg, &codec, seed)?;
    let w = cfg.guidance()?;
    let solver = cfg.solver_config()?;
    let samples: usize = cfg.get("generate.samples")?;
    let threshold = cfg.melody_threshold()?;
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::Io { path: out_dir.clone(), source: e })?;
    let mut records = Vec::with_capacity(samples);
    for k in 0..samples {
        let s = seed + k as u64;
        let g = generate_latent(&params, &model, &cs, s, &w, &solver, Some(&codec))?;
        let file = out_dir.join(format!("sample_{k:03}.wav"));
        write_wav(&file, &g.waveform)?;
        let mut rec = json!({
            "file": file,
            "seed": s,
            "solver_stats": g.stats,
            "model_evaluations": g.model_evaluations,
        });
        if flags.self_eval {
            rec["self_eval"] = self_eval(&cs, &g, threshold)?;
        }
        records.push(rec);
    }
    let mut out = header("generate", cfg)?;
    out["alpha"] = json!([w.text, w.local, w.both]);
    out["solver"] = serde_json::to_value(solver)?;
    out["checkpoint"] = json!(checkpoint);
    out["frames"] = json!(cs.frames);
    out["conditions"] = provenance;
    out["samples"] = json!(records);
    write_json(&out_dir.join(GENERATION_METADATA), &out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub id: String,
    pub chroma_cosine: Option<f64>,
    pub chord_iou: f64,
    pub melody_accuracy: Option<f64>,
    pub onset_f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    /// Mean and population standard deviation over the defined values.
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt(), count: v.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: Vec<ClipMetrics>,
    pub aggregates: BTreeMap<String, Option<Aggregate>>,
    pub frechet_distance: Option<f64>,
    pub frechet_note: Option<String>,
    pub reference_clips: usize,
    pub generated_clips: usize,
}

fn defined(r: tempoflow_core::Result<f64>) -> CliResult<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn wav_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    files.sort();
    Ok(files)
}

/// Compare generated clips against reference mixes. Files named
/// `<clip id>.wav` are paired with their reference; the Fréchet distance
/// compares the paired references (or `fallback` when nothing pairs) with
/// every generated file.
pub fn evaluate_dir(
    corpus_dir: &Path,
    records: &[ManifestRecord],
    fallback: &[ManifestRecord],
    generated: &Path,
    melody_threshold: f64,
) -> CliResult<EvalReport> {
    let files = wav_files(generated)?;
    if files.is_empty() {
        return Err(Error::MissingPrerequisite(format!("no WAV files in {}", generated.display())).into());
    }
    let mut clips = Vec::new();
    let mut paired = Vec::new();
    for r in records {
        let gen_path = generated.join(format!("{}.wav", r.id));
        if !gen_path.exists() {
            continue;
        }
        let reference = read_wav(&corpus_dir.join(&r.mix_path))?;
        let gen = read_wav(&gen_path)?;
        let frames = read_annotations(&corpus_dir.join(&r.annotation_path))?.annotations.num_frames;
        let ref_chords = estimate_chords(&reference, frames)?;
        let ref_melody = estimate_melody(&reference, frames, melody_threshold)?;
        clips.push(ClipMetrics {
            id: r.id.clone(),
            chroma_cosine: defined(chroma_cosine(&reference, &gen))?,
            chord_iou: chord_iou(&ref_chords, &estimate_chords(&gen, frames)?)?,
            melody_accuracy: defined(melody_accuracy(&ref_melody, &gen, melody_threshold))?,
            onset_f1: onset_f1(&detect_onsets(&reference), &detect_onsets(&gen), ONSET_TOLERANCE).f1,
        });
        paired.push(reference);
    }
    let reference_set: Vec<Vec<f32>> = if paired.is_empty() {
        fallback
            .iter()
            .map(|r| read_wav(&corpus_dir.join(&r.mix_path)))
            .collect::<Result<_, _>>()?
    } else {
        paired
    };
    let gen_set = files.iter().map(|p| read_wav(p)).collect::<Result<Vec<_>, _>>()?;
    let (frechet, note) = if reference_set.len() < 2 || gen_set.len() < 2 {
        (None, Some("Fréchet distance needs at least two clips per set".to_string()))
    } else {
        let emb = |set: &[Vec<f32>]| set.iter().map(|x| clip_embedding(x)).collect::<Vec<_>>();
        let a = GaussianStats::from_samples(&emb(&reference_set))?;
        let b = GaussianStats::from_samples(&emb(&gen_set))?;
        (Some(frechet_distance(&a, &b)?), None)
    };
    let mut aggregates = BTreeMap::new();
    aggregates.insert("chroma_cosine".into(), Aggregate::of(clips.iter().map(|c| c.chroma_cosine)));
    aggregates.insert("chord_iou".into(), Aggregate::of(clips.iter().map(|c| Some(c.chord_iou))));
    aggregates.insert("melody_accuracy".into(), Aggregate::of(clips.iter().map(|c| c.melody_accuracy)));
    aggregates.insert("onset_f1".into(), Aggregate::of(clips.iter().map(|c| Some(c.onset_f1))));
    Ok(EvalReport {
        clips,
        aggregates,
        frechet_distance: frechet,
        frechet_note: note,
        reference_clips: reference_set.len(),
        generated_clips: gen_set.len(),
    })
}

pub fn evaluate(cfg: &RunConfig, flags: Flags) -> CliResult<Value> {
    let out_path = cfg.path("evaluate.out");
    guard(&out_path, cfg, flags.force)?;
    let corpus = load_corpus(cfg)?;
    let generated = cfg.path("evaluate.generated");
    require(&generated, "generated clip directory", "generate")?;
    let fallback = if corpus.holdout.is_empty() { &corpus.train } else { &corpus.holdout };
    let report = evaluate_dir(&corpus.dir, &corpus.manifest.records, fallback, &generated, cfg.melody_threshold()?)?;
    let mut out = header("evaluate", cfg)?;
    out["corpus_digest"] = json!(corpus.manifest.digest);
    out["generated"] = json!(generated);
    out["report"] = serde_json::to_value(&report)?;
    write_json(&out_path, &out)?;
    Ok(out)
}

/// Axis varied by `ablate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    LossWeighting,
    Conditioning,
}

impl AblationMode {
    /// Config key and the value of each arm.
    pub fn arms(self) -> (&'static str, [&'static str; 2]) {
        match self {
            AblationMode::LossWeighting => ("train.loss_weighting", ["uniform", "one_plus_t"]),
            AblationMode::Conditioning => ("model.conditioning", ["concat", "cross_attention"]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub config_digest: String,
    pub corpus_digest: String,
    pub checkpoint: PathBuf,
    pub checkpoint_digest: String,
    pub final_logged_loss: Option<f64>,
    /// Generated chords against the annotated progression.
    pub annotated_chord_iou: Option<Aggregate>,
    pub report: EvalReport,
}

/// Arms are only comparable when trained on the same corpus.
pub fn check_paired(arms: &[ArmSummary]) -> CliResult<()> {
    if let Some(first) = arms.first() {
        if let Some(other) = arms.iter().find(|a| a.corpus_digest != first.corpus_digest) {
            return Err(Error::invalid(format!(
                "corpus digests differ between arms {} ({}) and {} ({})",
                first.arm, first.corpus_digest, other.arm, other.corpus_digest
            ))
            .into());
        }
    }
    Ok(())
}

fn run_arm(cfg: &RunConfig, arm: &str, dir: &Path) -> CliResult<ArmSummary> {
    let mut arm_cfg = cfg.clone();
    arm_cfg.set("train.out", &dir.join("train").to_string_lossy())?;
    let record = train_model(&arm_cfg)?;
    let checkpoint = dir.join("train").join(FINAL_CHECKPOINT);
    let (params, model) = load_model(&checkpoint)?;
    let codec = load_codec(cfg)?;
    let corpus = load_corpus(cfg)?;
    let n: usize = cfg.get("ablate.eval_clips")?;
    if corpus.holdout.len() < n {
        return Err(Error::invalid(format!(
            "ablate.eval_clips = {n} exceeds the {} held-out clips",
            corpus.holdout.len()
        ))
        .into());
    }
    let gen_dir = dir.join("generated");
    std::fs::create_dir_all(&gen_dir).map_err(|e| Error::Io { path: gen_dir.clone(), source: e })?;
    let (w, solver, seed) = (cfg.guidance()?, cfg.solver_config()?, cfg.seed()?);
    let mut ious = Vec::with_capacity(n);
    for (i, r) in corpus.holdout.iter().take(n).enumerate() {
        let ann = read_annotations(&corpus.dir.join(&r.annotation_path))?.annotations;
        let cs = ConditionInputs {
            chords: Some(ann.chords.clone()),
            style: Some(ann.style_tag),
            ..ConditionInputs::empty(ann.num_frames)
        };
        let g = generate_latent(&params, &model, &cs, seed + i as u64, &w, &solver, Some(&codec))?;
        write_wav(&gen_dir.join(format!("{}.wav", r.id)), &g.waveform)?;
        ious.push(Some(chord_iou(&ann.chords, &estimate_chords(&g.waveform, ann.num_frames)?)?));
    }
    let report = evaluate_dir(&corpus.dir, &corpus.holdout, &corpus.holdout, &gen_dir, cfg.melody_threshold()?)?;
    let summary = ArmSummary {
        arm: arm.to_string(),
        config_digest: arm_cfg.digest(),
        corpus_digest: record["corpus_digest"].as_str().unwrap_or_default().to_string(),
        checkpoint_digest: file_digest(&checkpoint)?,
        checkpoint,
        final_logged_loss: record["final_logged_loss"].as_f64(),
        annotated_chord_iou: Aggregate::of(ious),
        report,
    };
    write_json(&dir.join("report.json"), &summary)?;
    Ok(summary)
}

/// Train two arms that differ only along `mode`, generate held-out clips
/// with each and write a side-by-side comparison.
pub fn ablate(cfg: &RunConfig, mode: AblationMode, flags: Flags) -> CliResult<Value> {
    let out_dir = cfg.path("ablate.out");
    let comparison = out_dir.join(COMPARISON);
    guard(&comparison, cfg, flags.force)?;
    let (key, values) = mode.arms();
    let mut arms = Vec::with_capacity(2);
    for v in values {
        let mut arm_cfg = cfg.clone();
        arm_cfg.set(key, v)?;
        eprintln!("ablate: training arm {key} = {v}");
        arms.push(run_arm(&arm_cfg, v, &out_dir.join(v))?);
    }
    check_paired(&arms)?;
    let table: Vec<Value> = arms
        .iter()
        .map(|a| {
            let mean = |k: &str| a.report.aggregates.get(k).cloned().flatten().map(|x| x.mean);
            json!({
                "arm": a.arm,
                "frechet_distance": a.report.frechet_distance,
                "annotated_chord_iou": a.annotated_chord_iou.map(|x| x.mean),
                "chroma_cosine": mean("chroma_cosine"),
                "melody_accuracy": mean("melody_accuracy"),
                "onset_f1": mean("onset_f1"),
                "final_logged_loss": a.final_logged_loss,
            })
        })
        .collect();
    let mut out = header("ablate", cfg)?;
    out["mode"] = json!(mode);
    out["axis"] = json!(key);
    out["corpus_digest"] = json!(arms[0].corpus_digest);
    out["table"] = json!(table);
    out["arms"] = serde_json::to_value(&arms)?;
    write_json(&comparison, &out)?;
    Ok(out)
}
