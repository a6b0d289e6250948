//! Bench-only crate; see the benches directory.
