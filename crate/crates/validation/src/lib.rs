//! Acceptance suite for the heatstab workspace. The criteria live in
//! `tests/acceptance.rs`; run them with `cargo test -p heatstab-validation`.
