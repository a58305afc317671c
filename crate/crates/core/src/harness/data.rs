//! Synthetic tasks and their deterministic data streams.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::granularity::{ArchConfig, VOCAB};
use crate::matlin::Matrix;
use crate::spectral_geom::{spectral_init, RadiusSpec, INIT_STD};

/// Small public-domain story bundled for the character model.
pub const BUNDLED_CORPUS: &str = include_str!("../../data/corpus.txt");

const MAX_CORPUS_BYTES: u64 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskKind {
    /// Fit a fixed random ReLU teacher network.
    SyntheticRegression {
        teacher_seed: u64,
        #[serde(default)]
        noise: f64,
        #[serde(default = "default_teacher_hidden")]
        teacher_hidden: usize,
    },
    /// Next-byte prediction; `corpus: None` uses the bundled text.
    #[serde(rename = "char_lm")]
    CharLm {
        #[serde(default)]
        corpus: Option<PathBuf>,
    },
}

fn default_teacher_hidden() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyTask {
    pub data: TaskKind,
    pub batch_size: usize,
    pub steps: usize,
    /// Seeds the data order.
    #[serde(default)]
    pub seed: u64,
}

impl Default for ToyTask {
    fn default() -> Self {
        ToyTask {
            data: TaskKind::SyntheticRegression {
                teacher_seed: 1,
                noise: 0.0,
                teacher_hidden: 64,
            },
            batch_size: 64,
            steps: 500,
            seed: 0,
        }
    }
}

/// One minibatch. Regression features are columns: `x` is `d_in x batch`.
#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    Regression { x: Matrix, y: Matrix },
    Tokens { seqs: Vec<Vec<usize>> },
}

#[derive(Clone, Debug)]
struct Teacher {
    w1: Matrix,
    w2: Matrix,
}

impl Teacher {
    fn new(d_in: usize, hidden: usize, d_out: usize, seed: u64) -> Result<Self> {
        let r1 = RadiusSpec::new(1.0, hidden, d_in)?;
        let r2 = RadiusSpec::new(1.0, d_out, hidden)?;
        Ok(Teacher {
            w1: spectral_init(hidden, d_in, &r1, INIT_STD, seed)?,
            w2: spectral_init(d_out, hidden, &r2, INIT_STD, seed.wrapping_add(7919))?,
        })
    }

    fn predict(&self, x: &Matrix) -> Matrix {
        self.w2.matmul(&self.w1.matmul(x).map(|v| v.max(0.0)))
    }
}

enum Source {
    Regression {
        teacher: Teacher,
        d_in: usize,
        noise: f64,
    },
    Text {
        bytes: Vec<usize>,
        seq_len: usize,
    },
}

/// Endless batches; the sequence is a pure function of the task seed.
pub struct DataStream {
    source: Source,
    batch_size: usize,
    rng: ChaCha8Rng,
}

/// Loads a corpus as 7-bit tokens; other bytes map to `?`.
pub fn load_corpus(path: Option<&PathBuf>) -> Result<Vec<usize>> {
    let raw: Vec<u8> = match path {
        None => BUNDLED_CORPUS.as_bytes().to_vec(),
        Some(p) => {
            let len = std::fs::metadata(p)?.len();
            if len > MAX_CORPUS_BYTES {
                return Err(Error::ConfigInvalid(format!(
                    "corpus {} is {len} bytes, limit is {MAX_CORPUS_BYTES}",
                    p.display()
                )));
            }
            std::fs::read(p)?
        }
    };
    Ok(raw
        .into_iter()
        .map(|b| if (b as usize) < VOCAB { b as usize } else { b'?' as usize })
        .collect())
}

impl DataStream {
    pub fn new(task: &ToyTask, arch: &ArchConfig) -> Result<Self> {
        if task.batch_size == 0 {
            return Err(Error::ConfigInvalid("batch_size must be positive".into()));
        }
        let source = match (&task.data, arch) {
            (
                TaskKind::SyntheticRegression { teacher_seed, noise, teacher_hidden },
                ArchConfig::Linear { d_in, d_out } | ArchConfig::Mlp { d_in, d_out, .. },
            ) => {
                if *teacher_hidden == 0 || !(*noise >= 0.0 && noise.is_finite()) {
                    return Err(Error::ConfigInvalid("teacher_hidden must be positive and noise >= 0".into()));
                }
                Source::Regression {
                    teacher: Teacher::new(*d_in, *teacher_hidden, *d_out, *teacher_seed)?,
                    d_in: *d_in,
                    noise: *noise,
                }
            }
            (TaskKind::CharLm { corpus }, ArchConfig::Transformer { seq_len, .. }) => {
                let bytes = load_corpus(corpus.as_ref())?;
                if bytes.len() < seq_len + 2 {
                    return Err(Error::ConfigInvalid(format!(
                        "corpus of {} bytes is shorter than a sequence",
                        bytes.len()
                    )));
                }
                Source::Text { bytes, seq_len: *seq_len }
            }
            (TaskKind::SyntheticRegression { .. }, _) => {
                return Err(Error::ConfigInvalid("synthetic regression needs a linear or mlp model".into()))
            }
            (TaskKind::CharLm { .. }, _) => {
                return Err(Error::ConfigInvalid("char_lm needs a transformer model".into()))
            }
        };
        Ok(DataStream {
            source,
            batch_size: task.batch_size,
            rng: ChaCha8Rng::seed_from_u64(task.seed),
        })
    }

    pub fn next_batch(&mut self) -> Batch {
        let b = self.batch_size;
        match &self.source {
            Source::Regression { teacher, d_in, noise } => {
                let x = Matrix::random_normal(*d_in, b, 1.0, &mut self.rng);
                let mut y = teacher.predict(&x);
                if *noise > 0.0 {
                    for v in y.as_mut_slice() {
                        let z: f64 = self.rng.sample(StandardNormal);
                        *v += noise * z;
                    }
                }
                Batch::Regression { x, y }
            }
            Source::Text { bytes, seq_len } => {
                let span = seq_len + 1;
                let seqs = (0..b)
                    .map(|_| {
                        let start = self.rng.random_range(0..=bytes.len() - span);
                        bytes[start..start + span].to_vec()
                    })
                    .collect();
                Batch::Tokens { seqs }
            }
        }
    }
}
