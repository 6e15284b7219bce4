//! A desk-scale masked-word transformer for running the full intervention
//! loop without external models.

mod autodiff;
mod grammar;
mod model;

pub use self::autodiff::{Tape, Var};
pub use self::grammar::{FillerSet, GrammarSentence, GrammarTemplate, SyntheticGrammar, TemplateReading};
pub use self::model::{control_accuracy, train_toy, Encoded, LayerSplitModel, ToyModelConfig, ToyTrainConfig, TrainedToy};
