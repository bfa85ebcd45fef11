//! Synthetic corpora, training, evaluation and the pieces the CLI drives.

pub mod config;
pub mod eval;
pub mod synth;
pub mod train;

pub use config::{KeyValues, TrainingConfig};
pub use eval::{dump_attention, edit_distance, edit_distance_wer, evaluate, Evaluation, Recognizer};
pub use synth::{generate_synthetic_corpus, load_split, write_corpus, SyntheticCorpus, SyntheticTask, Utterance};
pub use train::{average_checkpoints, train, train_from_dir, EpochSummary, Metrics, TrainOutcome};
