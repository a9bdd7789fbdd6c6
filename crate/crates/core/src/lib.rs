//! Audio-visual generalized zero-shot learning: projection networks for
//! audio, video and class-label text into a shared embedding space, a shared
//! decoder back to text features, the training losses and GZSL evaluation.

pub mod ablation;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod io_util;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod train;

pub use ablation::{ablate, format_table, AblationResult, AblationRow};
pub use data::{ClassInfo, ClassManifest, Dataset, FeatureDims, FeatureRecord, SplitSet, SyntheticConfig};
pub use eval::{EvalReport, ModalityCondition};
pub use losses::{LossConfig, LossReport, LossTerm, Tuple, TuplePair};
pub use model::{ArchitectureSpec, ModelParams};
pub use tensor::{DenseMatrix, LayerParams};
pub use train::{Optimizer, TrainConfig, TrainLog};
