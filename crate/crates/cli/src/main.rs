//! `tskd`: corpus generation, training, decoding, scoring and the full
//! experiment pipeline.
//!
//! Every subcommand reads the same experiment configuration (`--config`
//! file plus `--set key=value` overrides) and refuses artifacts stamped with
//! a different config hash. `XD_THREADS` caps the worker pool.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tskd_core::corpus::{read_split, MixtureRecord};
use tskd_core::decode::{stream_push, StreamSession};
use tskd_core::diffcore::Checkpoint;
use tskd_core::eval::{score_split, Transcript};
use tskd_core::pipeline::{
    exit_code, expected_artifacts, hypothesis_lines, parse_hypothesis_lines, require, run_pipeline, stage_corpus,
    stage_extractor, stage_student, stage_teacher, stage_teacher_streaming, ExperimentConfig, SeedData, Stamp, System,
};
use tskd_core::speaker::{TargetSpeakerModel, TS_KIND};
use tskd_core::transducer::{extract_features, StreamingConfig, TransducerModel};
use tskd_core::tse::{ExtractorModel, Extraction};
use tskd_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tskd", version, about = "Target-speaker transducer training with lattice distillation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` experiment config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config entry; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and write the corpus splits of one seed.
    Corpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the offline teacher, or the streaming one from the offline
    /// checkpoint.
    TrainTeacher {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        streaming: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the target speech extractor.
    TrainTse {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        causal: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train one target-speaker student.
    TrainStudent {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        lambda: f64,
        /// Frozen teacher checkpoint; defaults to the seed's teacher.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        streaming: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Decode a split; prints `utt_id <tab> tokens` per utterance.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 8)]
        beam: usize,
        #[arg(long)]
        streaming: bool,
        #[arg(long)]
        chunk: Option<usize>,
        #[arg(long)]
        history: Option<usize>,
        /// Front end for single-talker models: an extractor checkpoint,
        /// `oracle`, `identity` or `single` (target plus noise).
        #[arg(long, default_value = "identity")]
        extractor: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score hypothesis lines against a split.
    Score {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value = "system")]
        system: String,
    },
    /// Rebuild the final table from a finished run without training.
    Report,
    /// Run every step for every seed, resuming from existing artifacts.
    Pipeline,
}

fn setup_threads() -> Result<()> {
    let Ok(v) = std::env::var("XD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("XD_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))
}

fn stamp(config: &ExperimentConfig, seed: u64) -> Stamp {
    Stamp {
        hash: config.hash(),
        seed,
    }
}

fn ckpt(config: &ExperimentConfig, seed: u64, name: &str) -> PathBuf {
    config.seed_dir(seed).join(format!("{name}.ckpt"))
}

fn with_epochs(mut config: ExperimentConfig, section: &str, epochs: Option<usize>) -> Result<ExperimentConfig> {
    if let Some(e) = epochs {
        config.set(&format!("train.{section}.epochs"), &e.to_string())?;
    }
    Ok(config)
}

fn seed_data(config: &ExperimentConfig, seed: u64) -> Result<SeedData> {
    let ds = stage_corpus(config, &stamp(config, seed), &config.seed_dir(seed).join("corpus"))?;
    SeedData::new(config, ds)
}

fn fresh(path: &Path) -> Result<()> {
    if path.exists() {
        fs::remove_file(path)?;
    }
    Ok(())
}

fn lambda_tag(lambda: f64) -> String {
    format!("l{lambda}")
}

/// Rewrites the streaming entry of a model checkpoint before loading it.
fn with_streaming(mut c: Checkpoint, streaming: Option<StreamingConfig>) -> Checkpoint {
    if let Some(s) = streaming {
        c.meta.insert("model.streaming".into(), format!("{},{}", s.chunk, s.history));
    }
    c
}

fn decode_streaming_greedy(model: &TargetSpeakerModel, record: &MixtureRecord) -> Result<Vec<usize>> {
    let fc = &model.config().features;
    let mix = extract_features(&record.mixture, fc)?;
    let emb = model.embed(&extract_features(&record.enrollment, fc)?)?;
    let mut session = StreamSession::new(model, Some(emb.values))?;
    let step = model.config().streaming.map_or(1, |s| s.chunk) * model.config().subsampling;
    let mut start = 0;
    while start < mix.len() {
        let end = (start + step).min(mix.len());
        stream_push(&mut session, &mix.slice(start, end))?;
        start = end;
    }
    session.finish()?;
    Ok(session.tokens().to_vec())
}

#[allow(clippy::too_many_arguments)]
fn decode(
    config: &ExperimentConfig,
    model: &Path,
    input: &Path,
    beam: usize,
    streaming: bool,
    chunk: Option<usize>,
    history: Option<usize>,
    extractor: &str,
    seed: Option<u64>,
) -> Result<String> {
    let split = read_split(input)?;
    let st = stamp(config, seed.unwrap_or(split.seed));
    st.read_split(input)?;
    let c = st.load(model)?;
    let override_streaming = streaming.then(|| StreamingConfig {
        chunk: chunk.unwrap_or(config.streaming.chunk),
        history: history.unwrap_or(config.streaming.history),
    });
    let c = with_streaming(c, override_streaming);
    let exec = config.exec();
    let records = &split.records;
    let hyps: Vec<Vec<usize>> = if c.meta.get("kind").map(String::as_str) == Some(TS_KIND) {
        let m = TargetSpeakerModel::from_checkpoint(&c)?;
        if m.config().streaming.is_some() && beam == 1 {
            exec.map(records, |r| decode_streaming_greedy(&m, r))
        } else {
            let sys = System::Integrated(&m);
            exec.map(records, |r| sys.decode(r, beam))
        }
        .into_iter()
        .collect::<Result<_>>()?
    } else {
        let asr = TransducerModel::from_checkpoint(&c)?;
        let loaded;
        let front = match extractor {
            "identity" => Some(Extraction::Identity),
            "oracle" => Some(Extraction::Oracle),
            "single" => None,
            path => {
                loaded = ExtractorModel::from_checkpoint(&st.load(Path::new(path))?)?;
                Some(Extraction::Model(&loaded))
            }
        };
        exec.map(records, |r| match front {
            Some(e) => System::Cascade { extractor: e, asr: &asr }.decode(r, beam),
            None => {
                let f = extract_features(&r.target_plus_noise, &asr.config().features)?;
                tskd_core::decode::recognize(&asr, &f, None, beam)
            }
        })
        .into_iter()
        .collect::<Result<_>>()?
    };
    let ids: Vec<u32> = records.iter().map(|r| r.id).collect();
    Ok(hypothesis_lines(&ids, &hyps))
}

fn score(hyp: &Path, reference: &Path, system: &str) -> Result<String> {
    let split = read_split(reference)?;
    let cond = split.records.first().map_or(0.0, |r| r.snr_db);
    let to_t = |id, tokens| Transcript {
        id,
        condition: cond,
        tokens,
    };
    let hyps: Vec<Transcript> = parse_hypothesis_lines(&fs::read_to_string(hyp)?)?
        .into_iter()
        .map(|(id, t)| to_t(id, t))
        .collect();
    let refs: Vec<Transcript> = split.records.iter().map(|r| to_t(r.id, r.transcript.clone())).collect();
    Ok(score_split(system, split.seed, &hyps, &refs)?.to_csv())
}

fn run(cli: Cli) -> Result<()> {
    setup_threads()?;
    let config = ExperimentConfig::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    match cli.command {
        Command::Corpus { seed } => {
            let dir = config.seed_dir(seed).join("corpus");
            let ds = stage_corpus(&config, &stamp(&config, seed), &dir)?;
            println!(
                "{}: {} train, {} dev, {} test utterances",
                dir.display(),
                ds.train.len(),
                ds.dev.len(),
                ds.test_records().count()
            );
        }
        Command::TrainTeacher { seed, streaming, epochs } => {
            let section = if streaming { "teacher_stream" } else { "teacher" };
            let config = with_epochs(config, section, epochs)?;
            let st = stamp(&config, seed);
            let data = seed_data(&config, seed)?;
            let offline = ckpt(&config, seed, "teacher_offline");
            let out = if streaming {
                let out = ckpt(&config, seed, "teacher_streaming");
                fresh(&out)?;
                stage_teacher_streaming(&config, &st, &data, &offline, &out)?;
                out
            } else {
                fresh(&offline)?;
                stage_teacher(&config, &st, &data, &offline)?;
                offline
            };
            println!("{}", out.display());
        }
        Command::TrainTse { seed, causal, epochs } => {
            let config = with_epochs(config, "tse", epochs)?;
            let st = stamp(&config, seed);
            let ds = stage_corpus(&config, &st, &config.seed_dir(seed).join("corpus"))?;
            let out = ckpt(&config, seed, if causal { "tse_causal" } else { "tse_offline" });
            fresh(&out)?;
            let (_, gain) = stage_extractor(&config, &st, &ds, causal, &out)?;
            println!("{}\tsi_snr_improvement_db={gain:.3}", out.display());
        }
        Command::TrainStudent {
            seed,
            lambda,
            teacher,
            streaming,
            epochs,
        } => {
            if !(lambda.is_finite() && lambda >= 0.0) {
                return Err(Error::Config(format!("--lambda must be >= 0, got {lambda}")));
            }
            let section = if streaming { "student_stream" } else { "student" };
            let config = with_epochs(config, section, epochs)?;
            let st = stamp(&config, seed);
            let default_teacher = ckpt(&config, seed, if streaming { "teacher_streaming" } else { "teacher_offline" });
            let teacher_path = teacher.unwrap_or(default_teacher);
            let mut t = TransducerModel::from_checkpoint(&require(&st, "train-student", &teacher_path)?)?;
            t.params.freeze_all();
            let data = seed_data(&config, seed)?;
            let tag = lambda_tag(lambda);
            let init = ckpt(&config, seed, &format!("student_offline_{tag}"));
            let out = if streaming {
                ckpt(&config, seed, &format!("student_streaming_{tag}"))
            } else {
                init.clone()
            };
            fresh(&out)?;
            let s = stage_student(&config, &st, &data, &t, lambda, streaming.then_some(init.as_path()), &out)?;
            println!("{}\tdev_ter={:.3}", out.display(), s.dev_ter);
        }
        Command::Decode {
            model,
            input,
            beam,
            streaming,
            chunk,
            history,
            extractor,
            seed,
        } => {
            print!(
                "{}",
                decode(&config, &model, &input, beam, streaming, chunk, history, &extractor, seed)?
            );
        }
        Command::Score { hyp, reference, system } => print!("{}", score(&hyp, &reference, &system)?),
        Command::Report => {
            for &seed in &config.seeds {
                for (step, path) in expected_artifacts(&config, seed) {
                    if !path.exists() {
                        return Err(Error::MissingArtifact {
                            step,
                            artifact: path.display().to_string(),
                        });
                    }
                }
            }
            print!("{}", run_pipeline(&config)?.table);
        }
        Command::Pipeline => print!("{}", run_pipeline(&config)?.table),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
