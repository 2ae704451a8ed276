//! Experiment configuration and end-to-end orchestration.
//!
//! Every artifact lives under `<out_dir>/seed<N>/` and carries the config
//! hash and seed it was produced under. A step whose artifact already exists
//! loads it instead of retraining, so an interrupted run resumes where it
//! stopped and a finished run is replayed without any training.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::corpus::{build_dataset, read_split, write_split, CorpusConfig, Dataset, MixtureRecord, SplitFile, TestCondition, Tokens};
use crate::decode::{average_latency_ms, recognize};
use crate::diffcore::Checkpoint;
use crate::distill::{prepare, train_student_from, train_teacher, train_teacher_from, KdConfig, Prepared, TrainConfig, TrainReport};
use crate::error::{parse_field, Error, Result};
use crate::eval::{compare_systems, format_table, score_split, Comparison, ScoreReport, Transcript};
use crate::par::Exec;
use crate::speaker::{SpeakerConfig, TargetSpeakerModel, TS_KIND};
use crate::transducer::{extract_features, StreamingConfig, TransducerConfig, TransducerModel, TRANSDUCER_KIND};
use crate::tse::{cascade_decode, extractor_meta, mean_si_snr, prepare_tse, train_extractor, ExtractorConfig, ExtractorModel, Extraction};

pub const HASH_KEY: &str = "run.config_hash";
pub const SEED_KEY: &str = "run.seed";
const DEV_TER_KEY: &str = "run.dev_ter";
const SI_SNR_KEY: &str = "run.si_snr_improvement";

/// Which teacher supervises the streaming students.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamingTeacher {
    /// The chunk-masked teacher fine-tuned from the offline one.
    Streaming,
    Offline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    /// Offline model; the streaming variants add `streaming`.
    pub model: TransducerConfig,
    pub streaming: StreamingConfig,
    pub streaming_teacher: StreamingTeacher,
    pub speaker: SpeakerConfig,
    pub tse: ExtractorConfig,
    pub teacher: TrainConfig,
    pub teacher_stream: TrainConfig,
    pub student: TrainConfig,
    pub student_stream: TrainConfig,
    pub extractor: TrainConfig,
    /// KD weights swept in addition to the `lambda = 0` baseline.
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub beam: usize,
    pub out_dir: PathBuf,
    /// Batch-level parallelism; results do not depend on it.
    pub parallel: bool,
}

fn train_defaults(epochs: usize, lr: f64, decay: bool) -> TrainConfig {
    TrainConfig {
        epochs,
        lr,
        momentum: 0.9,
        clip: 5.0,
        batch_size: 16,
        decay,
        seed: 0,
        exec: Exec::Parallel,
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusConfig {
                train_utts: 2000,
                ..CorpusConfig::default()
            },
            model: TransducerConfig::default(),
            streaming: StreamingConfig { chunk: 2, history: 2 },
            streaming_teacher: StreamingTeacher::Streaming,
            speaker: SpeakerConfig::default(),
            tse: ExtractorConfig::default(),
            teacher: train_defaults(15, 0.02, true),
            teacher_stream: train_defaults(5, 0.02, true),
            student: train_defaults(15, 0.02, true),
            student_stream: train_defaults(10, 0.02, true),
            extractor: train_defaults(10, 0.02, false),
            lambdas: vec![1.0, 0.5, 0.1, 0.01, 0.001],
            seeds: vec![0, 1, 2, 3, 4],
            beam: 8,
            out_dir: PathBuf::from("runs/default"),
            parallel: true,
        }
    }
}

const TRAIN_SECTIONS: [&str; 5] = ["teacher", "teacher_stream", "student", "student_stream", "tse"];

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    fn train_section(&self, name: &str) -> &TrainConfig {
        match name {
            "teacher" => &self.teacher,
            "teacher_stream" => &self.teacher_stream,
            "student" => &self.student,
            "student_stream" => &self.student_stream,
            _ => &self.extractor,
        }
    }

    fn train_section_mut(&mut self, name: &str) -> Option<&mut TrainConfig> {
        Some(match name {
            "teacher" => &mut self.teacher,
            "teacher_stream" => &mut self.teacher_stream,
            "student" => &mut self.student,
            "student_stream" => &mut self.student_stream,
            "tse" => &mut self.extractor,
            _ => return None,
        })
    }

    /// Every entry that influences results, in canonical order.
    pub fn result_entries(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |prefix: &str, entries: Vec<(String, String)>| {
            out.extend(entries.into_iter().map(|(k, v)| (format!("{prefix}.{k}"), v)));
        };
        push("corpus", self.corpus.entries());
        push("model", self.model.entries());
        push("speaker", self.speaker.entries());
        push("tse", self.tse.entries());
        push(
            "streaming",
            vec![
                ("chunk".into(), self.streaming.chunk.to_string()),
                ("history".into(), self.streaming.history.to_string()),
                (
                    "teacher".into(),
                    match self.streaming_teacher {
                        StreamingTeacher::Streaming => "streaming".into(),
                        StreamingTeacher::Offline => "offline".into(),
                    },
                ),
            ],
        );
        for name in TRAIN_SECTIONS {
            let t = self.train_section(name);
            push(
                &format!("train.{name}"),
                vec![
                    ("epochs".into(), t.epochs.to_string()),
                    ("lr".into(), t.lr.to_string()),
                    ("momentum".into(), t.momentum.to_string()),
                    ("clip".into(), t.clip.to_string()),
                    ("batch_size".into(), t.batch_size.to_string()),
                    ("decay".into(), t.decay.to_string()),
                ],
            );
        }
        out.push(("lambdas".into(), join(&self.lambdas)));
        out.push(("seeds".into(), join(&self.seeds)));
        out.push(("beam".into(), self.beam.to_string()));
        out
    }

    /// Config file text that reproduces this configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.result_entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "parallel = {}", self.parallel);
        s
    }

    /// SHA-256 over the result-affecting entries (not `out_dir` or
    /// `parallel`), hex-truncated to 16 characters.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.result_entries() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())[..16].to_string()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::Config(format!("unknown config key `{key}`"));
        let value = value.trim();
        let known = if let Some(k) = key.strip_prefix("corpus.") {
            self.corpus.set(k, value)?
        } else if let Some(k) = key.strip_prefix("model.") {
            self.model.set(k, value)?
        } else if let Some(k) = key.strip_prefix("speaker.") {
            self.speaker.set(k, value)?
        } else if let Some(k) = key.strip_prefix("tse.") {
            self.tse.set(k, value)?
        } else if let Some(k) = key.strip_prefix("streaming.") {
            match k {
                "chunk" => self.streaming.chunk = parse_field(key, value)?,
                "history" => self.streaming.history = parse_field(key, value)?,
                "teacher" => {
                    self.streaming_teacher = match value {
                        "streaming" => StreamingTeacher::Streaming,
                        "offline" => StreamingTeacher::Offline,
                        _ => return Err(Error::Config(format!("streaming.teacher must be `streaming` or `offline`, got `{value}`"))),
                    }
                }
                _ => return Err(unknown()),
            }
            true
        } else if let Some(rest) = key.strip_prefix("train.") {
            let (section, field) = rest.split_once('.').ok_or_else(unknown)?;
            let t = self.train_section_mut(section).ok_or_else(unknown)?;
            match field {
                "epochs" => t.epochs = parse_field(key, value)?,
                "lr" => t.lr = parse_field(key, value)?,
                "momentum" => t.momentum = parse_field(key, value)?,
                "clip" => t.clip = parse_field(key, value)?,
                "batch_size" => t.batch_size = parse_field(key, value)?,
                "decay" => t.decay = parse_field(key, value)?,
                _ => return Err(unknown()),
            }
            true
        } else {
            match key {
                "lambdas" => self.lambdas = value.split(',').map(|v| parse_field(key, v)).collect::<Result<_>>()?,
                "seeds" => self.seeds = value.split(',').map(|v| parse_field(key, v)).collect::<Result<_>>()?,
                "beam" => self.beam = parse_field(key, value)?,
                "out_dir" => self.out_dir = PathBuf::from(value),
                "parallel" => self.parallel = parse_field(key, value)?,
                _ => return Err(unknown()),
            }
            true
        };
        if known {
            Ok(())
        } else {
            Err(unknown())
        }
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then `k=v` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            c.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not `key=value`")))?;
            c.set(k.trim(), v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.streaming_model().validate()?;
        self.speaker.validate()?;
        self.tse.validate()?;
        if self.model.streaming.is_some() {
            return Err(Error::Config("model.streaming must be `none`; set streaming.chunk/history instead".into()));
        }
        if self.model.vocab_size != self.corpus.vocab_size {
            return Err(Error::Config("model.vocab_size must equal corpus.vocab_size".into()));
        }
        if self.lambdas.is_empty() {
            return Err(Error::Config("lambdas must be non-empty".into()));
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::Config("lambdas must be finite and positive (0 is always run as the baseline)".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.is_empty() || seeds.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be non-empty and distinct".into()));
        }
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        for name in TRAIN_SECTIONS {
            let t = self.train_section(name);
            if t.batch_size == 0 || !(t.lr > 0.0) {
                return Err(Error::Config(format!("train.{name} needs a positive batch_size and lr")));
            }
        }
        Ok(())
    }

    pub fn exec(&self) -> Exec {
        if self.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    pub fn streaming_model(&self) -> TransducerConfig {
        TransducerConfig {
            streaming: Some(self.streaming),
            ..self.model.clone()
        }
    }

    /// Training settings of one section for one seed.
    pub fn train_for(&self, section: &str, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            exec: self.exec(),
            ..self.train_section(section).clone()
        }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("seed{seed}"))
    }

    /// Average algorithmic latency of the streaming models.
    pub fn streaming_latency_ms(&self) -> f64 {
        average_latency_ms(
            self.streaming.chunk,
            self.model.subsampling,
            self.model.features.hop,
            self.corpus.sample_rate,
            0.0,
        )
    }
}

/// Where a stamped artifact lives and what it must be stamped with.
#[derive(Debug, Clone)]
pub struct Stamp {
    pub hash: String,
    pub seed: u64,
}

impl Stamp {
    pub fn apply(&self, mut ckpt: Checkpoint) -> Checkpoint {
        ckpt.meta.insert(HASH_KEY.into(), self.hash.clone());
        ckpt.meta.insert(SEED_KEY.into(), self.seed.to_string());
        ckpt
    }

    fn check(&self, path: &Path, hash: Option<&str>, seed: Option<&str>) -> Result<()> {
        let found = hash.unwrap_or("<none>");
        if found != self.hash {
            return Err(Error::ConfigMismatch {
                path: path.display().to_string(),
                found: found.to_string(),
                expected: self.hash.clone(),
            });
        }
        if seed != Some(self.seed.to_string().as_str()) {
            return Err(Error::ConfigMismatch {
                path: path.display().to_string(),
                found: format!("seed {}", seed.unwrap_or("<none>")),
                expected: format!("seed {}", self.seed),
            });
        }
        Ok(())
    }

    /// Loads a checkpoint and refuses it unless hash and seed match.
    pub fn load(&self, path: &Path) -> Result<Checkpoint> {
        let c = Checkpoint::load(path)?;
        self.check(path, c.meta.get(HASH_KEY).map(String::as_str), c.meta.get(SEED_KEY).map(String::as_str))?;
        Ok(c)
    }

    fn echo(&self, config: &ExperimentConfig) -> String {
        let mut s = String::new();
        for (k, v) in config.corpus.entries() {
            let _ = writeln!(s, "corpus.{k} = {v}");
        }
        let _ = writeln!(s, "{HASH_KEY} = {}", self.hash);
        s
    }

    pub fn read_split(&self, path: &Path) -> Result<SplitFile> {
        let f = read_split(path)?;
        let hash = f
            .config_echo
            .lines()
            .find_map(|l| l.strip_prefix(HASH_KEY).and_then(|r| r.trim().strip_prefix('=')).map(str::trim));
        let seed = f.seed.to_string();
        self.check(path, hash, Some(&seed))?;
        Ok(f)
    }

    fn header(&self) -> String {
        format!("# {HASH_KEY} = {}\n# {SEED_KEY} = {}\n", self.hash, self.seed)
    }

    fn check_header(&self, path: &Path, text: &str) -> Result<()> {
        let get = |key: &str| {
            text.lines()
                .filter_map(|l| l.strip_prefix("# "))
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.trim().strip_prefix('=')).map(str::trim))
        };
        self.check(path, get(HASH_KEY), get(SEED_KEY))
    }
}

fn missing(step: &str, path: &Path) -> Error {
    Error::MissingArtifact {
        step: step.into(),
        artifact: path.display().to_string(),
    }
}

/// Loads a stamped checkpoint that a later step depends on.
pub fn require(stamp: &Stamp, step: &str, path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(missing(step, path));
    }
    stamp.load(path)
}

/// Per-split file names inside `<seed dir>/corpus`.
pub fn split_paths(dir: &Path, corpus: &CorpusConfig) -> Vec<(String, PathBuf)> {
    let mut v = vec![
        ("train".to_string(), dir.join("train.bin")),
        ("dev".to_string(), dir.join("dev.bin")),
    ];
    for snr in &corpus.test_snrs {
        v.push((format!("test_snr{snr}"), dir.join(format!("test_snr{snr}.bin"))));
    }
    v
}

/// Builds the corpus for `stamp.seed` and writes it under `dir`, or reads
/// it back when every split file is present.
pub fn stage_corpus(config: &ExperimentConfig, stamp: &Stamp, dir: &Path) -> Result<Dataset> {
    let paths = split_paths(dir, &config.corpus);
    if paths.iter().all(|(_, p)| p.exists()) {
        let mut splits = Vec::with_capacity(paths.len());
        for (_, p) in &paths {
            splits.push(stamp.read_split(p)?.records);
        }
        let mut it = splits.into_iter();
        let train = it.next().unwrap_or_default();
        let dev = it.next().unwrap_or_default();
        let test = config
            .corpus
            .test_snrs
            .iter()
            .zip(it)
            .map(|(&snr_db, records)| TestCondition { snr_db, records })
            .collect();
        return Ok(Dataset { train, dev, test });
    }
    let t0 = Instant::now();
    let ds = build_dataset(&config.corpus, stamp.seed, config.exec())?;
    fs::create_dir_all(dir)?;
    let mut sets: Vec<&[MixtureRecord]> = vec![&ds.train, &ds.dev];
    sets.extend(ds.test.iter().map(|c| c.records.as_slice()));
    for ((name, path), records) in paths.iter().zip(sets) {
        write_split(
            path,
            &SplitFile {
                split: name.clone(),
                config_echo: stamp.echo(config),
                seed: stamp.seed,
                vocab_size: config.corpus.vocab_size as u32,
                sample_rate: config.corpus.sample_rate,
                records: records.to_vec(),
            },
        )?;
    }
    log::info!("seed {}: corpus built in {:.1?}", stamp.seed, t0.elapsed());
    Ok(ds)
}

/// One entry of the streaming-initialization manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    /// `true` when copied from the offline checkpoint.
    pub copied: bool,
}

/// Builds a streaming model of the same kind as `offline`, copies every
/// parameter whose name and shape it shares and returns the new checkpoint
/// with a per-parameter manifest. Parameters of the offline checkpoint the
/// streaming model lacks, or whose shapes differ, are rejected by name.
pub fn init_streaming_from_offline(
    offline: &Checkpoint,
    streaming: StreamingConfig,
    seed: u64,
) -> Result<(Checkpoint, Vec<ManifestEntry>)> {
    let mut config = TransducerConfig::from_meta(&offline.meta)?;
    config.streaming = Some(streaming);
    config.validate()?;
    let (mut ckpt, names) = match offline.meta.get("kind").map(String::as_str) {
        Some(TRANSDUCER_KIND) => {
            let m = TransducerModel::new(&config, seed)?;
            let names: Vec<String> = m.params.names().map(String::from).collect();
            (m.to_checkpoint(), names)
        }
        Some(TS_KIND) => {
            let spk = TargetSpeakerModel::from_checkpoint(offline)?.speaker_config;
            let m = TargetSpeakerModel::new(&config, &spk, seed)?;
            let names: Vec<String> = m.params.names().map(String::from).collect();
            (m.to_checkpoint(), names)
        }
        other => return Err(Error::Config(format!("cannot initialize a streaming model from checkpoint kind {other:?}"))),
    };
    for (name, src) in &offline.arrays {
        match ckpt.arrays.get_mut(name) {
            None => {
                return Err(Error::Incompatible {
                    name: name.clone(),
                    detail: "absent from the streaming model".into(),
                })
            }
            Some(dst) if dst.shape() != src.shape() => {
                return Err(Error::Incompatible {
                    name: name.clone(),
                    detail: format!("shape {:?} vs {:?}", src.shape(), dst.shape()),
                })
            }
            Some(dst) => *dst = src.clone(),
        }
    }
    let manifest = names
        .into_iter()
        .map(|name| ManifestEntry {
            copied: offline.arrays.contains_key(&name),
            name,
        })
        .collect();
    Ok((ckpt, manifest))
}

pub fn manifest_text(manifest: &[ManifestEntry]) -> String {
    manifest
        .iter()
        .map(|e| format!("{}\t{}\n", e.name, if e.copied { "copied" } else { "fresh" }))
        .collect()
}

fn write_log(path: &Path, report: &TrainReport) -> Result<()> {
    let mut s = String::from("epoch, split, rnnt_loss, kd_loss, total, ter\n");
    for l in &report.log {
        let _ = writeln!(s, "{l}");
    }
    fs::write(path, s)?;
    Ok(())
}

fn save_with_meta(stamp: &Stamp, ckpt: Checkpoint, extra: &[(&str, String)], path: &Path) -> Result<Checkpoint> {
    let mut c = stamp.apply(ckpt);
    for (k, v) in extra {
        c.meta.insert((*k).into(), v.clone());
    }
    c.save(path)?;
    Ok(c)
}

/// Training inputs of one seed with features extracted once.
pub struct SeedData {
    pub dataset: Dataset,
    pub train: Vec<Prepared>,
    pub dev: Vec<Prepared>,
}

impl SeedData {
    pub fn new(config: &ExperimentConfig, dataset: Dataset) -> Result<Self> {
        let fc = &config.model.features;
        let train = prepare(&dataset.train, fc, config.exec())?;
        let dev = prepare(&dataset.dev, fc, config.exec())?;
        Ok(SeedData { dataset, train, dev })
    }
}

/// Trains (or loads) the offline teacher.
pub fn stage_teacher(config: &ExperimentConfig, stamp: &Stamp, data: &SeedData, path: &Path) -> Result<TransducerModel> {
    if path.exists() {
        return TransducerModel::from_checkpoint(&stamp.load(path)?);
    }
    let t0 = Instant::now();
    let (model, report) = train_teacher(&data.train, &data.dev, &config.model, &config.train_for("teacher", stamp.seed))?;
    write_log(&path.with_extension("log"), &report)?;
    let ter = report.dev_ter().unwrap_or(f64::NAN);
    save_with_meta(stamp, model.to_checkpoint(), &[(DEV_TER_KEY, ter.to_string())], path)?;
    log::info!("seed {}: offline teacher dev TER {ter:.2} in {:.1?}", stamp.seed, t0.elapsed());
    Ok(model)
}

/// Streaming teacher fine-tuned from the offline teacher checkpoint.
pub fn stage_teacher_streaming(
    config: &ExperimentConfig,
    stamp: &Stamp,
    data: &SeedData,
    offline: &Path,
    path: &Path,
) -> Result<TransducerModel> {
    if path.exists() {
        return TransducerModel::from_checkpoint(&stamp.load(path)?);
    }
    let src = require(stamp, "train-teacher --streaming", offline)?;
    let t0 = Instant::now();
    let (init, manifest) = init_streaming_from_offline(&src, config.streaming, stamp.seed)?;
    fs::write(path.with_extension("manifest"), manifest_text(&manifest))?;
    let mut model = TransducerModel::from_checkpoint(&init)?;
    let report = train_teacher_from(&mut model, &data.train, &data.dev, &config.train_for("teacher_stream", stamp.seed))?;
    write_log(&path.with_extension("log"), &report)?;
    let ter = report.dev_ter().unwrap_or(f64::NAN);
    save_with_meta(stamp, model.to_checkpoint(), &[(DEV_TER_KEY, ter.to_string())], path)?;
    log::info!("seed {}: streaming teacher dev TER {ter:.2} in {:.1?}", stamp.seed, t0.elapsed());
    Ok(model)
}

/// Extractor plus its dev SI-SNR improvement in dB.
pub fn stage_extractor(
    config: &ExperimentConfig,
    stamp: &Stamp,
    dataset: &Dataset,
    causal: bool,
    path: &Path,
) -> Result<(ExtractorModel, f64)> {
    if path.exists() {
        let c = stamp.load(path)?;
        let gain = c.meta.get(SI_SNR_KEY).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN);
        return Ok((ExtractorModel::from_checkpoint(&c)?, gain));
    }
    let t0 = Instant::now();
    let cfg = ExtractorConfig {
        causal,
        ..config.tse.clone()
    };
    let exec = config.exec();
    let train = prepare_tse(&dataset.train, &cfg.features, exec)?;
    let dev = prepare_tse(&dataset.dev, &cfg.features, exec)?;
    let (model, report) = train_extractor(&train, &dev, &cfg, &config.train_for("tse", stamp.seed))?;
    write_log(&path.with_extension("log"), &report)?;
    let (est, mix) = mean_si_snr(&model, &dev, exec)?;
    let gain = est - mix;
    let mut extra = vec![(SI_SNR_KEY, gain.to_string())];
    for (k, v) in extractor_meta(&cfg, config.corpus.sample_rate) {
        extra.push(if k == "causal" { ("run.causal", v) } else { ("run.latency_ms", v) });
    }
    save_with_meta(stamp, model.to_checkpoint(), &extra, path)?;
    log::info!(
        "seed {}: {} extractor SI-SNR improvement {gain:.2} dB in {:.1?}",
        stamp.seed,
        if causal { "causal" } else { "offline" },
        t0.elapsed()
    );
    Ok((model, gain))
}

/// A trained student and its final dev TER.
pub struct Student {
    pub model: TargetSpeakerModel,
    pub dev_ter: f64,
}

/// Student for one `lambda`. Offline students start from random weights;
/// streaming students start from the offline student with the same
/// `lambda` (`init`).
#[allow(clippy::too_many_arguments)]
pub fn stage_student(
    config: &ExperimentConfig,
    stamp: &Stamp,
    data: &SeedData,
    teacher: &TransducerModel,
    lambda: f64,
    init: Option<&Path>,
    path: &Path,
) -> Result<Student> {
    if path.exists() {
        let c = stamp.load(path)?;
        let dev_ter = c.meta.get(DEV_TER_KEY).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN);
        return Ok(Student {
            model: TargetSpeakerModel::from_checkpoint(&c)?,
            dev_ter,
        });
    }
    let t0 = Instant::now();
    let (mut model, section) = match init {
        None => (
            TargetSpeakerModel::new(
                &config.model,
                &config.speaker,
                crate::corpus::stream_seed(stamp.seed, 0x57D, 0),
            )?,
            "student",
        ),
        Some(p) => {
            let src = require(stamp, "train-student --streaming", p)?;
            let (init, manifest) = init_streaming_from_offline(&src, config.streaming, stamp.seed)?;
            fs::write(path.with_extension("manifest"), manifest_text(&manifest))?;
            (TargetSpeakerModel::from_checkpoint(&init)?, "student_stream")
        }
    };
    let kd = KdConfig {
        lambda,
        train: config.train_for(section, stamp.seed),
    };
    let report = train_student_from(&mut model, &data.train, &data.dev, teacher, &kd)?;
    write_log(&path.with_extension("log"), &report)?;
    let dev_ter = report.dev_ter().unwrap_or(f64::NAN);
    save_with_meta(
        stamp,
        model.to_checkpoint(),
        &[(DEV_TER_KEY, dev_ter.to_string()), ("run.lambda", lambda.to_string())],
        path,
    )?;
    log::info!(
        "seed {}: {section} lambda={lambda} dev TER {dev_ter:.2} in {:.1?}",
        stamp.seed,
        t0.elapsed()
    );
    Ok(Student { model, dev_ter })
}

/// Something that turns a test record into tokens.
pub enum System<'a> {
    Cascade {
        extractor: Extraction<'a>,
        asr: &'a TransducerModel,
    },
    Integrated(&'a TargetSpeakerModel),
}

impl System<'_> {
    pub fn decode(&self, record: &MixtureRecord, beam: usize) -> Result<Tokens> {
        match self {
            System::Cascade { extractor, asr } => cascade_decode(record, *extractor, asr, beam),
            System::Integrated(m) => {
                let fc = &m.config().features;
                let mix = extract_features(&record.mixture, fc)?;
                let emb = m.embed(&extract_features(&record.enrollment, fc)?)?;
                recognize(*m, &mix, Some(&emb.values), beam)
            }
        }
    }
}

pub fn format_tokens(tokens: &[usize]) -> String {
    tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// `utt_id <tab> tokens` lines.
pub fn hypothesis_lines(ids: &[u32], hyps: &[Tokens]) -> String {
    ids.iter()
        .zip(hyps)
        .map(|(id, h)| format!("{id}\t{}\n", format_tokens(h)))
        .collect()
}

pub fn parse_hypothesis_lines(text: &str) -> Result<Vec<(u32, Tokens)>> {
    let mut out = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let (id, toks) = line.split_once('\t').unwrap_or((line, ""));
        let id = parse_field("utt_id", id)?;
        let toks = toks
            .split_whitespace()
            .map(|t| parse_field("token", t))
            .collect::<Result<Vec<usize>>>()?;
        out.push((id, toks));
    }
    Ok(out)
}

/// Decodes every test condition (or loads cached hypotheses) and scores it.
pub fn stage_decode(
    config: &ExperimentConfig,
    stamp: &Stamp,
    dataset: &Dataset,
    name: &str,
    system: &System<'_>,
    dir: &Path,
) -> Result<ScoreReport> {
    let sys_dir = dir.join(name);
    fs::create_dir_all(&sys_dir)?;
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for cond in &dataset.test {
        let path = sys_dir.join(format!("snr{}.txt", cond.snr_db));
        let decoded: Vec<(u32, Tokens)> = if path.exists() {
            let text = fs::read_to_string(&path)?;
            stamp.check_header(&path, &text)?;
            parse_hypothesis_lines(&text)?
        } else {
            let toks: Vec<Tokens> = config
                .exec()
                .map(&cond.records, |r| system.decode(r, config.beam))
                .into_iter()
                .collect::<Result<_>>()?;
            let ids: Vec<u32> = cond.records.iter().map(|r| r.id).collect();
            fs::write(&path, stamp.header() + &hypothesis_lines(&ids, &toks))?;
            ids.into_iter().zip(toks).collect()
        };
        for (id, tokens) in decoded {
            hyps.push(Transcript {
                id,
                condition: cond.snr_db,
                tokens,
            });
        }
        for r in &cond.records {
            refs.push(Transcript {
                id: r.id,
                condition: cond.snr_db,
                tokens: r.transcript.clone(),
            });
        }
    }
    score_split(name, stamp.seed, &hyps, &refs)
}

fn lambda_tag(lambda: f64) -> String {
    format!("l{lambda}")
}

/// Everything one seed contributes to the final report.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub teacher_dev_ter: f64,
    pub si_snr_offline: f64,
    pub si_snr_causal: f64,
    /// `(lambda, dev TER)` for `lambda = 0` and each grid value.
    pub dev_offline: Vec<(f64, f64)>,
    pub dev_streaming: Vec<(f64, f64)>,
    /// Test reports keyed by system name.
    pub reports: BTreeMap<String, ScoreReport>,
}

/// Names of the rows of the final tables, in display order.
pub fn system_names(config: &ExperimentConfig, streaming: bool) -> Vec<(String, Option<f64>)> {
    let (b, p) = if streaming { ("BS", "PS") } else { ("BO", "PO") };
    let mut v = vec![(format!("{b}1 cascade"), None), (format!("{b}2 lambda=0"), Some(0.0))];
    for (i, l) in config.lambdas.iter().enumerate() {
        v.push((format!("{p}{} lambda={l}", i + 1), Some(*l)));
    }
    v
}

/// `(step, path)` of every checkpoint a finished run holds for `seed`.
pub fn expected_artifacts(config: &ExperimentConfig, seed: u64) -> Vec<(String, PathBuf)> {
    let dir = config.seed_dir(seed);
    let mut v: Vec<(String, PathBuf)> = split_paths(&dir.join("corpus"), &config.corpus)
        .into_iter()
        .map(|(_, p)| ("corpus".to_string(), p))
        .collect();
    for (step, name) in [
        ("train-teacher", "teacher_offline"),
        ("train-teacher --streaming", "teacher_streaming"),
        ("train-tse", "tse_offline"),
        ("train-tse --causal", "tse_causal"),
    ] {
        v.push((step.into(), dir.join(format!("{name}.ckpt"))));
    }
    for l in std::iter::once(0.0).chain(config.lambdas.iter().copied()) {
        for (step, mode) in [("train-student", "offline"), ("train-student --streaming", "streaming")] {
            v.push((step.into(), dir.join(format!("student_{mode}_{}.ckpt", lambda_tag(l)))));
        }
    }
    v
}

/// Runs (or resumes) every step for one seed.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    let stamp = Stamp {
        hash: config.hash(),
        seed,
    };
    let dir = config.seed_dir(seed);
    fs::create_dir_all(&dir)?;
    let dataset = stage_corpus(config, &stamp, &dir.join("corpus"))?;
    let data = SeedData::new(config, dataset)?;
    let ckpt = |n: &str| dir.join(format!("{n}.ckpt"));

    let mut teacher = stage_teacher(config, &stamp, &data, &ckpt("teacher_offline"))?;
    teacher.params.freeze_all();
    let teacher_dev_ter = require(&stamp, "pipeline", &ckpt("teacher_offline"))?
        .meta
        .get(DEV_TER_KEY)
        .and_then(|v| v.parse().ok())
        .unwrap_or(f64::NAN);
    let mut teacher_stream = stage_teacher_streaming(config, &stamp, &data, &ckpt("teacher_offline"), &ckpt("teacher_streaming"))?;
    teacher_stream.params.freeze_all();

    let (tse_off, si_off) = stage_extractor(config, &stamp, &data.dataset, false, &ckpt("tse_offline"))?;
    let (tse_causal, si_causal) = stage_extractor(config, &stamp, &data.dataset, true, &ckpt("tse_causal"))?;

    let stream_teacher = match config.streaming_teacher {
        StreamingTeacher::Streaming => &teacher_stream,
        StreamingTeacher::Offline => &teacher,
    };
    let mut lambdas = vec![0.0];
    lambdas.extend(&config.lambdas);
    let mut offline = Vec::new();
    let mut streaming = Vec::new();
    for &l in &lambdas {
        let off_path = ckpt(&format!("student_offline_{}", lambda_tag(l)));
        offline.push(stage_student(config, &stamp, &data, &teacher, l, None, &off_path)?);
        let str_path = ckpt(&format!("student_streaming_{}", lambda_tag(l)));
        streaming.push(stage_student(config, &stamp, &data, stream_teacher, l, Some(&off_path), &str_path)?);
    }

    let t0 = Instant::now();
    let hyp_dir = dir.join("hyps");
    let mut reports = BTreeMap::new();
    for (is_streaming, students) in [(false, &offline), (true, &streaming)] {
        let names = system_names(config, is_streaming);
        let cascade = if is_streaming {
            System::Cascade {
                extractor: Extraction::Model(&tse_causal),
                asr: &teacher_stream,
            }
        } else {
            System::Cascade {
                extractor: Extraction::Model(&tse_off),
                asr: &teacher,
            }
        };
        let mut systems = vec![cascade];
        systems.extend(students.iter().map(|s| System::Integrated(&s.model)));
        for ((name, _), system) in names.iter().zip(&systems) {
            let r = stage_decode(config, &stamp, &data.dataset, name, system, &hyp_dir)?;
            reports.insert(name.clone(), r);
        }
    }
    log::info!("seed {seed}: test decoding done in {:.1?}", t0.elapsed());

    Ok(SeedResult {
        seed,
        teacher_dev_ter,
        si_snr_offline: si_off,
        si_snr_causal: si_causal,
        dev_offline: lambdas.iter().copied().zip(offline.iter().map(|s| s.dev_ter)).collect(),
        dev_streaming: lambdas.iter().copied().zip(streaming.iter().map(|s| s.dev_ter)).collect(),
        reports,
    })
}

/// Mode-level outcome: baseline against the dev-selected KD system.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSummary {
    pub best_lambda: f64,
    pub best_system: String,
    pub baseline_system: String,
    /// Baseline as `a`, best KD student as `b`.
    pub kd: Comparison,
    /// Streaming only: cascade as `a`, integrated baseline as `b`.
    pub cascade: Comparison,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub config_hash: String,
    pub seeds: Vec<SeedResult>,
    pub offline: ModeSummary,
    pub streaming: ModeSummary,
    /// Seeds where the streaming relative reduction is at least the offline
    /// one.
    pub streaming_gain_seeds: usize,
    pub streaming_latency_ms: f64,
    pub table: String,
}

fn reports_of(seeds: &[SeedResult], name: &str) -> Vec<ScoreReport> {
    seeds.iter().filter_map(|s| s.reports.get(name).cloned()).collect()
}

fn summarize_mode(config: &ExperimentConfig, seeds: &[SeedResult], streaming: bool) -> Result<ModeSummary> {
    let names = system_names(config, streaming);
    let n = seeds.len() as f64;
    let mut best: Option<(f64, usize)> = None;
    for (i, l) in config.lambdas.iter().enumerate() {
        let mean = seeds
            .iter()
            .map(|s| {
                let dev = if streaming { &s.dev_streaming } else { &s.dev_offline };
                dev.iter().find(|(x, _)| x == l).map_or(f64::NAN, |(_, t)| *t)
            })
            .sum::<f64>()
            / n;
        if best.is_none_or(|(b, _)| mean < b) {
            best = Some((mean, i));
        }
    }
    let idx = best.map_or(0, |(_, i)| i);
    let best_system = names[idx + 2].0.clone();
    let baseline_system = names[1].0.clone();
    let kd = compare_systems(&reports_of(seeds, &baseline_system), &reports_of(seeds, &best_system))?;
    let cascade = compare_systems(&reports_of(seeds, &names[0].0), &reports_of(seeds, &baseline_system))?;
    Ok(ModeSummary {
        best_lambda: config.lambdas[idx],
        best_system,
        baseline_system,
        kd,
        cascade,
    })
}

fn render(config: &ExperimentConfig, seeds: &[SeedResult], off: &ModeSummary, st: &ModeSummary, gain_seeds: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config hash {}; seeds {}; beam {}\n", config.hash(), join(&config.seeds), config.beam);
    for (streaming, title) in [(false, "Offline test TER (%)"), (true, "Streaming test TER (%)")] {
        let rows: Vec<(String, Vec<ScoreReport>)> = system_names(config, streaming)
            .into_iter()
            .map(|(n, _)| {
                let r = reports_of(seeds, &n);
                (n, r)
            })
            .collect();
        let _ = writeln!(s, "{}", format_table(title, &rows));
    }
    for (label, m) in [("offline", off), ("streaming", st)] {
        let _ = writeln!(
            s,
            "{label}: best lambda {} by dev TER; {} {:.3} -> {} {:.3} ({:.2}% relative, better on {}/{} seeds)",
            m.best_lambda,
            m.baseline_system,
            m.kd.mean_a,
            m.best_system,
            m.kd.mean_b,
            m.kd.relative_reduction,
            m.kd.wins_b,
            seeds.len()
        );
    }
    let _ = writeln!(
        s,
        "streaming relative reduction >= offline on {gain_seeds}/{} seeds",
        seeds.len()
    );
    let _ = writeln!(
        s,
        "streaming cascade {:.3} vs integrated {:.3}; integrated better on {}/{} seeds",
        st.cascade.mean_a,
        st.cascade.mean_b,
        st.cascade.wins_b,
        seeds.len()
    );
    let _ = writeln!(s, "streaming average latency {:.1} ms", config.streaming_latency_ms());
    let _ = writeln!(s, "\nseed, teacher_dev_ter, si_snr_offline_db, si_snr_causal_db");
    for r in seeds {
        let _ = writeln!(s, "{}, {:.3}, {:.3}, {:.3}", r.seed, r.teacher_dev_ter, r.si_snr_offline, r.si_snr_causal);
    }
    s
}

/// Runs every seed, then writes `results.txt`, `results.csv` and the
/// resolved `config.txt` under `out_dir`.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineSummary> {
    config.validate()?;
    fs::create_dir_all(&config.out_dir)?;
    let hash = config.hash();
    let cfg_path = config.out_dir.join("config.txt");
    if cfg_path.exists() {
        let text = fs::read_to_string(&cfg_path)?;
        let mut previous = ExperimentConfig::default();
        previous.apply_text(&text)?;
        if previous.hash() != hash {
            return Err(Error::ConfigMismatch {
                path: cfg_path.display().to_string(),
                found: previous.hash(),
                expected: hash,
            });
        }
    } else {
        fs::write(&cfg_path, config.to_text())?;
    }
    let t0 = Instant::now();
    let mut seeds = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        seeds.push(run_seed(config, seed)?);
        log::info!("seed {seed} finished after {:.1?}", t0.elapsed());
    }
    let offline = summarize_mode(config, &seeds, false)?;
    let streaming = summarize_mode(config, &seeds, true)?;
    let off_rr: BTreeMap<u64, f64> = offline.kd.per_seed.iter().copied().collect();
    let streaming_gain_seeds = streaming
        .kd
        .per_seed
        .iter()
        .filter(|(s, r)| off_rr.get(s).is_some_and(|o| r >= o))
        .count();
    let table = render(config, &seeds, &offline, &streaming, streaming_gain_seeds);
    fs::write(config.out_dir.join("results.txt"), &table)?;
    let mut csv = String::from("system,seed,condition,utterances,ref_tokens,edits,ter\n");
    for s in &seeds {
        for r in s.reports.values() {
            csv.push_str(&r.to_csv());
        }
    }
    fs::write(config.out_dir.join("results.csv"), csv)?;
    Ok(PipelineSummary {
        config_hash: hash,
        streaming_latency_ms: config.streaming_latency_ms(),
        seeds,
        offline,
        streaming,
        streaming_gain_seeds,
        table,
    })
}

/// Process exit code for a pipeline error: 2 for configuration problems,
/// 3 for numeric failures, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::ConfigMismatch { .. } => 2,
        Error::NonFinite(_) => 3,
        _ => 1,
    }
}
