//! Acceptance runs for the adaptive mixed solver. The crate has no API; the
//! checks live in `tests/acceptance.rs` and run last in the workspace so a
//! failing criterion does not hide the other test binaries.
