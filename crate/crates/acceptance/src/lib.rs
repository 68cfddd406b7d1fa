//! Test-only package. The criteria live in `tests/acceptance.rs`; run them
//! with `cargo test -p crop-acceptance --test acceptance`.
