use std::fmt;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::eval::corpus_bleu;
use super::train::{train, TaskPlan, TrainOutcome, TrainRun};
use crate::corpus::{
    build_vocab, corpus_exists, distill, encode_corpus, gen_splits, read_corpus, read_vocab, write_corpus, write_vocab,
    Corpus, EncodedPair, Vocab,
};
use crate::curriculum::CurriculumSchedule;
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::TaskK;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const DISTILLED: &str = "train.distilled";
pub const TEACHER_DIR: &str = "teacher";
pub const STUDENT_DIR: &str = "student";

pub struct Dataset {
    pub vocab: Vocab,
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

impl Dataset {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let [train, dev, test] = gen_splits(
            &cfg.synth_spec(),
            [cfg.train_size, cfg.dev_size, cfg.test_size],
            Some(cfg.max_len),
        )?;
        let vocab = build_vocab(&train)?;
        Ok(Dataset { vocab, train, dev, test })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_corpus(dir, "train", &self.train)?;
        write_corpus(dir, "dev", &self.dev)?;
        write_corpus(dir, "test", &self.test)?;
        write_vocab(&dir.join(VOCAB_FILE), &self.vocab)
    }

    pub fn exists(dir: &Path) -> bool {
        ["train", "dev", "test"].iter().all(|n| corpus_exists(dir, n)) && dir.join(VOCAB_FILE).is_file()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Dataset {
            vocab: read_vocab(&dir.join(VOCAB_FILE))?,
            train: read_corpus(dir, "train")?,
            dev: read_corpus(dir, "dev")?,
            test: read_corpus(dir, "test")?,
        })
    }

    /// Reads the corpus directory, generating and writing it first if needed.
    pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<Self> {
        let dir = cfg.data_dir();
        if Self::exists(&dir) {
            return Self::load(&dir);
        }
        let data = Self::generate(cfg)?;
        data.write(&dir)?;
        Ok(data)
    }

    pub fn encode(&self, corpus: &Corpus) -> Vec<EncodedPair> {
        encode_corpus(corpus, &self.vocab)
    }
}

pub fn teacher_plan(cfg: &ExperimentConfig) -> TaskPlan {
    TaskPlan::Fixed {
        k: TaskK::Fixed(1),
        steps: cfg.teacher_steps,
    }
}

pub fn student_plan(cfg: &ExperimentConfig) -> Result<TaskPlan> {
    Ok(TaskPlan::Curriculum(cfg.schedule()?))
}

fn run_dir(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

/// Trains the `k = 1` teacher on the raw training corpus.
pub fn train_teacher(cfg: &ExperimentConfig, data: &Dataset, write: bool, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    let pairs = data.encode(&data.train);
    let dev = data.encode(&data.dev);
    let dir = run_dir(cfg, TEACHER_DIR);
    train(
        &TrainRun {
            config: cfg,
            plan: teacher_plan(cfg),
            pairs: &pairs,
            vocab: &data.vocab,
            run_dir: write.then_some(dir.as_path()),
            dev: Some((&dev, TaskK::Fixed(1))),
        },
        resume,
    )
}

pub fn distill_corpus(cfg: &ExperimentConfig, data: &Dataset, teacher: &Checkpoint) -> Result<Corpus> {
    teacher.check_vocab(&data.vocab.fingerprint())?;
    let dcfg = DecodeConfig::new(TaskK::Fixed(1), 0, false, cfg.max_len);
    distill(&teacher.params, &data.train, &data.vocab, &dcfg, &teacher.digest()?)
}

/// Trains the student under the configured schedule on `train`.
pub fn train_student(
    cfg: &ExperimentConfig,
    plan: TaskPlan,
    data: &Dataset,
    train_corpus: &Corpus,
    dir: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome> {
    let pairs = data.encode(train_corpus);
    let dev = data.encode(&data.dev);
    train(
        &TrainRun {
            config: cfg,
            plan,
            pairs: &pairs,
            vocab: &data.vocab,
            run_dir: dir,
            dev: Some((&dev, cfg.decode_k)),
        },
        resume,
    )
}

/// The distilled corpus, or an error naming the missing step.
pub fn load_distilled(cfg: &ExperimentConfig) -> Result<Corpus> {
    let dir = cfg.data_dir();
    if !corpus_exists(&dir, DISTILLED) {
        return Err(Error::Config(format!(
            "no distilled corpus in {}; run train-teacher and distill first or pass --no-distill",
            dir.display()
        )));
    }
    read_corpus(&dir, DISTILLED)
}

pub fn student_dir(cfg: &ExperimentConfig) -> PathBuf {
    run_dir(cfg, STUDENT_DIR)
}

pub fn teacher_dir(cfg: &ExperimentConfig) -> PathBuf {
    run_dir(cfg, TEACHER_DIR)
}

/// BLEU per (test k', train k), rows by test degree and columns by training
/// degree; a cell is absent when the training degree exceeds the test degree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyMatrix {
    pub train_ks: Vec<TaskK>,
    pub test_ks: Vec<TaskK>,
    pub cells: Vec<Vec<Option<f64>>>,
}

impl StudyMatrix {
    pub fn get(&self, test: TaskK, train: TaskK) -> Option<f64> {
        let r = self.test_ks.iter().position(|&k| k == test)?;
        let c = self.train_ks.iter().position(|&k| k == train)?;
        self.cells[r][c]
    }
}

impl fmt::Display for StudyMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>8}", "test\\train")?;
        for k in &self.train_ks {
            write!(f, " {:>8}", format!("k={k}"))?;
        }
        writeln!(f)?;
        for (r, test) in self.test_ks.iter().enumerate() {
            write!(f, "{:>10}", format!("k'={test}"))?;
            for cell in &self.cells[r] {
                match cell {
                    Some(v) => write!(f, " {v:>8.2}")?,
                    None => write!(f, " {:>8}", "/")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Trains one fresh model per training degree for `steps` steps on `train`
/// and scores it on the test split at every test degree it may be tested at.
pub fn run_preliminary_study(
    cfg: &ExperimentConfig,
    data: &Dataset,
    train_corpus: &Corpus,
    train_ks: &[TaskK],
    test_ks: &[TaskK],
    steps: u64,
) -> Result<StudyMatrix> {
    let test = data.encode(&data.test);
    let mut cells = vec![vec![None; train_ks.len()]; test_ks.len()];
    for (c, &k) in train_ks.iter().enumerate() {
        let out = train_student(cfg, TaskPlan::Fixed { k, steps }, data, train_corpus, None, None)?;
        for (r, &tk) in test_ks.iter().enumerate() {
            if k <= tk {
                let dcfg = DecodeConfig::new(tk, 0, false, cfg.max_len);
                let score = corpus_bleu(&out.checkpoint.params, None, &test, &dcfg, &data.vocab)?.bleu;
                info!("prelim train k={k} test k'={tk}: BLEU {score:.2}");
                cells[r][c] = Some(score);
            }
        }
    }
    Ok(StudyMatrix {
        train_ks: train_ks.to_vec(),
        test_ks: test_ks.to_vec(),
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub curriculum_bleu: f64,
    pub direct_transfer_bleu: f64,
}

/// NAT test BLEU of the configured curriculum against Direct Transfer (same
/// total budget, SAT phase omitted), both trained on `train_corpus`.
pub fn compare_with_direct_transfer(cfg: &ExperimentConfig, data: &Dataset, train_corpus: &Corpus) -> Result<ComparisonRow> {
    let schedule: CurriculumSchedule = cfg.schedule()?;
    let test = data.encode(&data.test);
    let dcfg = DecodeConfig::new(TaskK::Full, 0, false, cfg.max_len);
    let score = |plan: TaskPlan| -> Result<f64> {
        let out = train_student(cfg, plan, data, train_corpus, None, None)?;
        Ok(corpus_bleu(&out.checkpoint.params, None, &test, &dcfg, &data.vocab)?.bleu)
    };
    let curriculum_bleu = score(TaskPlan::Curriculum(schedule.clone()))?;
    let direct_transfer_bleu = score(TaskPlan::Curriculum(schedule.direct_transfer()))?;
    Ok(ComparisonRow {
        seed: cfg.seed,
        curriculum_bleu,
        direct_transfer_bleu,
    })
}
