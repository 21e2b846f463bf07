use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::warn;

use super::checkpoint::Checkpoint;
use super::config::{ExperimentConfig, Preset};
use super::eval::{evaluate, hypothesis_words};
use super::pipeline::{
    distill_corpus, load_distilled, run_preliminary_study, student_dir, student_plan, teacher_dir, train_student,
    train_teacher, Dataset, DISTILLED,
};
use super::train::{FINAL_CHECKPOINT, LATEST_CHECKPOINT};
use crate::corpus::{write_corpus, TaskKind};
use crate::curriculum::{pacing_level, Pacing};
use crate::decode::{measure_latency, translate};
use crate::error::{Error, Result};
use crate::model::{TaskK, TokenId};

#[derive(Parser, Debug)]
#[command(name = "tclnat", version, about = "Task-level curriculum training for non-autoregressive transduction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train/dev/test corpora and vocabulary.
    GenData(Common),
    /// Train the k=1 teacher on the raw training corpus.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        /// Continue from the teacher's latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Replace the training targets with the teacher's greedy translations.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Train the student through the AT, SAT and NAT phases.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train on the raw corpus instead of the distilled one.
        #[arg(long)]
        no_distill: bool,
        #[arg(long)]
        resume: bool,
    },
    /// Translate a file of space-separated source sentences.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// BLEU (and optionally latency) of a checkpoint on a corpus split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        latency_sentences: usize,
    },
    /// Per-sentence decoding latency on the test split.
    BenchLatency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        sentences: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Print the curriculum stage table.
    ScheduleDump(Common),
    /// Train one model per k and score it at every test k' >= k.
    PrelimStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,4,16,N")]
        train_ks: Vec<TaskK>,
        #[arg(long, value_delimiter = ',', default_value = "1,4,16,N")]
        test_ks: Vec<TaskK>,
        /// Steps per model; defaults to the schedule's total.
        #[arg(long)]
        steps: Option<u64>,
        /// Train on the distilled corpus.
        #[arg(long)]
        distilled: bool,
    },
}

/// Config file plus per-key overrides.
#[derive(Args, Debug, Clone, Default)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    task: Option<TaskKind>,
    /// Training corpus size.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    len_min: Option<usize>,
    #[arg(long)]
    len_max: Option<usize>,
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    #[arg(long)]
    at_steps: Option<u64>,
    #[arg(long)]
    sat_steps: Option<u64>,
    #[arg(long)]
    nat_steps: Option<u64>,
    #[arg(long)]
    pacing: Option<Pacing>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    teacher_steps: Option<u64>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    log_interval: Option<u64>,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    #[arg(long)]
    decode_k: Option<TaskK>,
    #[arg(long)]
    npd_b: Option<usize>,
    #[arg(long)]
    rescore: bool,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    match s {
        "desk" => Ok(Preset::Desk),
        "small" => Ok(Preset::Small),
        "custom" => Ok(Preset::Custom),
        other => Err(format!("unknown preset {other:?} (desk, small, custom)")),
    }
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                ExperimentConfig::from_toml(&text)?
            }
            None => ExperimentConfig::default(),
        };
        c.apply_env();
        macro_rules! set {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$field = v; })*
            };
        }
        set!(
            seed => seed, out_dir => out_dir, task => task, size => train_size, vocab_size => vocab_size,
            len_min => len_min, len_max => len_max, preset => preset, at_steps => steps_at, sat_steps => steps_sat,
            nat_steps => steps_nat, pacing => pacing, window => window, teacher_steps => teacher_steps,
            max_tokens => max_tokens, log_interval => log_interval, checkpoint_interval => checkpoint_interval,
            decode_k => decode_k, npd_b => npd_b,
        );
        if self.data_dir.is_some() {
            c.data_dir = self.data_dir.clone();
        }
        if self.rescore {
            c.rescore = true;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: kind={} msg={:?}", e.kind(), e.to_string());
            1
        }
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_optional(path: Option<PathBuf>) -> Result<Option<Checkpoint>> {
    path.map(|p| Checkpoint::load(&p)).transpose()
}

/// The explicit teacher, or the pipeline's teacher when rescoring is on.
fn teacher_for(cfg: &ExperimentConfig, explicit: Option<PathBuf>) -> Result<Option<Checkpoint>> {
    match explicit {
        Some(p) => Ok(Some(Checkpoint::load(&p)?)),
        None if cfg.rescore => Ok(Some(Checkpoint::load(&teacher_dir(cfg).join(FINAL_CHECKPOINT))?)),
        None => Ok(None),
    }
}

fn student_checkpoint(cfg: &ExperimentConfig, explicit: Option<PathBuf>) -> Result<Checkpoint> {
    let path = explicit.unwrap_or_else(|| student_dir(cfg).join(FINAL_CHECKPOINT));
    Checkpoint::load(&path)
}

fn resume_from(dir: &Path, resume: bool) -> Result<Option<Checkpoint>> {
    if !resume {
        return Ok(None);
    }
    let path = dir.join(LATEST_CHECKPOINT);
    if path.is_file() {
        Ok(Some(Checkpoint::load(&path)?))
    } else {
        warn!("no checkpoint at {}; starting fresh", path.display());
        Ok(None)
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(common) => {
            if let Some(dir) = &common.data_dir {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let cfg = common.resolve()?;
            let data = Dataset::generate(&cfg)?;
            let dir = cfg.data_dir();
            data.write(&dir)?;
            println!(
                "wrote {} train, {} dev, {} test pairs and {} vocabulary entries to {}",
                data.train.len(),
                data.dev.len(),
                data.test.len(),
                data.vocab.len(),
                dir.display()
            );
        }
        Command::TrainTeacher { common, resume } => {
            let cfg = common.resolve()?;
            let data = Dataset::load_or_generate(&cfg)?;
            let out = train_teacher(&cfg, &data, true, resume_from(&teacher_dir(&cfg), resume)?)?;
            println!(
                "teacher trained for {} steps: {}",
                out.checkpoint.step,
                teacher_dir(&cfg).join(FINAL_CHECKPOINT).display()
            );
        }
        Command::Distill { common, teacher } => {
            let cfg = common.resolve()?;
            let data = Dataset::load(&cfg.data_dir())?;
            let path = teacher.unwrap_or_else(|| teacher_dir(&cfg).join(FINAL_CHECKPOINT));
            let ckpt = Checkpoint::load(&path)?;
            let distilled = distill_corpus(&cfg, &data, &ckpt)?;
            write_corpus(&cfg.data_dir(), DISTILLED, &distilled)?;
            let same = distilled.pairs.iter().zip(&data.train.pairs).filter(|(d, o)| d.tgt == o.tgt).count();
            println!(
                "distilled {} pairs ({} targets unchanged) into {}",
                distilled.len(),
                same,
                cfg.data_dir().join(DISTILLED).display()
            );
        }
        Command::Train {
            common,
            no_distill,
            resume,
        } => {
            let cfg = common.resolve()?;
            let corpus_for_training = if no_distill { None } else { Some(load_distilled(&cfg)?) };
            let data = Dataset::load_or_generate(&cfg)?;
            let train_corpus = corpus_for_training.as_ref().unwrap_or(&data.train);
            let dir = student_dir(&cfg);
            let out = train_student(&cfg, student_plan(&cfg)?, &data, train_corpus, Some(&dir), resume_from(&dir, resume)?)?;
            println!(
                "trained for {} steps{}: {}",
                out.checkpoint.step,
                if out.stopped_early { " (early stop)" } else { "" },
                dir.join(FINAL_CHECKPOINT).display()
            );
        }
        Command::Translate {
            common,
            input,
            output,
            checkpoint,
            teacher,
        } => {
            let cfg = common.resolve()?;
            let data = Dataset::load(&cfg.data_dir())?;
            let ckpt = student_checkpoint(&cfg, checkpoint)?;
            ckpt.check_vocab(&data.vocab.fingerprint())?;
            let teacher = teacher_for(&cfg, teacher)?;
            let text = fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
            let xs: Vec<Vec<TokenId>> = text
                .lines()
                .map(|l| data.vocab.encode(&l.split_whitespace().map(str::to_owned).collect::<Vec<_>>()))
                .collect();
            if let Some(i) = xs.iter().position(Vec::is_empty) {
                return Err(Error::InvalidArgument(format!("empty source sentence at line {}", i + 1)));
            }
            let hyps = translate(&ckpt.params, teacher.as_ref().map(|t| &t.params), &xs, &cfg.decode_config(), 64)?;
            let mut out = String::new();
            for h in &hyps {
                out.push_str(&hypothesis_words(h, &data.vocab).join(" "));
                out.push('\n');
            }
            match output {
                Some(p) => fs::write(&p, out).map_err(|e| Error::io(&p, e))?,
                None => std::io::stdout()
                    .write_all(out.as_bytes())
                    .map_err(|e| Error::io("<stdout>", e))?,
            }
        }
        Command::Evaluate {
            common,
            checkpoint,
            teacher,
            split,
            latency_sentences,
        } => {
            let cfg = common.resolve()?;
            let data = Dataset::load(&cfg.data_dir())?;
            let corpus = match split.as_str() {
                "dev" => &data.dev,
                "test" => &data.test,
                "train" => &data.train,
                other => return Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
            };
            let ckpt = student_checkpoint(&cfg, checkpoint)?;
            let teacher = teacher_for(&cfg, teacher)?;
            let report = evaluate(
                &ckpt,
                teacher.as_ref(),
                &data.encode(corpus),
                &cfg.decode_config(),
                &data.vocab,
                latency_sentences,
            )?;
            print_json(&report)?;
        }
        Command::BenchLatency {
            common,
            checkpoint,
            teacher,
            sentences,
            repeats,
        } => {
            let cfg = common.resolve()?;
            let data = Dataset::load(&cfg.data_dir())?;
            let ckpt = student_checkpoint(&cfg, checkpoint)?;
            ckpt.check_vocab(&data.vocab.fingerprint())?;
            let teacher = load_optional(teacher)?;
            let xs: Vec<Vec<TokenId>> = data.encode(&data.test).into_iter().take(sentences).map(|p| p.0).collect();
            let report = measure_latency(
                &ckpt.params,
                teacher.as_ref().map(|t| &t.params),
                &xs,
                &cfg.decode_config(),
                repeats,
            )?;
            print_json(&report)?;
        }
        Command::ScheduleDump(common) => {
            let cfg = common.resolve()?;
            print!("{}", schedule_dump(&cfg)?);
        }
        Command::PrelimStudy {
            common,
            train_ks,
            test_ks,
            steps,
            distilled,
        } => {
            let cfg = common.resolve()?;
            let data = Dataset::load_or_generate(&cfg)?;
            let distilled_corpus = if distilled { Some(load_distilled(&cfg)?) } else { None };
            let corpus = distilled_corpus.as_ref().unwrap_or(&data.train);
            let steps = steps.unwrap_or(cfg.schedule()?.total_steps());
            let matrix = run_preliminary_study(&cfg, &data, corpus, &train_ks, &test_ks, steps)?;
            print!("{matrix}");
            fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
            let path = cfg.out_dir.join("prelim.json");
            fs::write(&path, serde_json::to_string_pretty(&matrix)?).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

/// SAT-local steps where each single-task SAT stage begins, then the
/// `(global step -> tasks)` table of the configured schedule.
pub fn schedule_dump(cfg: &ExperimentConfig) -> Result<String> {
    let schedule = cfg.schedule()?;
    let mut out = String::new();
    if schedule.steps_sat > 0 {
        let levels = schedule.ladder.len() - 2;
        let mut starts = vec![0u64];
        for i in 1..schedule.steps_sat {
            if pacing_level(schedule.pacing, i, schedule.steps_sat, levels)?
                != pacing_level(schedule.pacing, i - 1, schedule.steps_sat, levels)?
            {
                starts.push(i);
            }
        }
        let joined: Vec<String> = starts.iter().map(u64::to_string).collect();
        out.push_str(&format!(
            "pacing boundaries: {} ({}, SAT-local, one task per stage)\n",
            joined.join("/"),
            schedule.pacing
        ));
    }
    out.push_str(&format!(
        "schedule: at={} sat={} nat={} pacing={} window={}\n",
        schedule.steps_at, schedule.steps_sat, schedule.steps_nat, schedule.pacing, schedule.window
    ));
    out.push_str("step\ttasks\n");
    for (step, tasks) in schedule.stage_starts() {
        let ks: Vec<String> = tasks.iter().map(TaskK::to_string).collect();
        out.push_str(&format!("{step}\t{{{}}}\n", ks.join(",")));
    }
    Ok(out)
}
