//! Episode replay (to be filled in).
