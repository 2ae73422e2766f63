//! Agents (to be filled in).
