//! Shared nothing: this crate exists only to host the criterion bench
//! targets under `benches/`. Run them with `cargo bench -p fedlab-bench`.
