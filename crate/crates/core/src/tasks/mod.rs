//! Concrete bilevel problems and the inverse-curvature diagnostic.

mod data;
mod diagnostic;
mod hyperclean;
mod linreg;
mod quadratic;

pub use data::{
    corrupt_labels, gen_synthetic_classification, load_dataset, roc_auc, save_dataset, ClassificationData, HypercleanDataset,
    SyntheticConfig, TENSOR_MAGIC,
};
pub use diagnostic::{
    cg_dense_inverse, diagnostic_study, neumann_dense_inverse, summarize, DiagnosticConfig, DiagnosticMethod, DiagnosticRecord,
    DiagnosticSummary, MAX_DIAGNOSTIC_DIM,
};
pub use hyperclean::{make_hyperclean_task, HypercleanTask};
pub use linreg::{gen_linreg, LinRegProblem};
pub use quadratic::QuadraticTask;
