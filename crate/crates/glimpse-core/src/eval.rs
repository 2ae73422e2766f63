//! Evaluation metrics (to be filled in).
