//! End-to-end acceptance checks over the library and the `mvanon` binary.
//! The checks themselves live in `tests/acceptance.rs`.

use std::path::PathBuf;
use std::sync::OnceLock;

/// Path to a freshly built `mvanon` binary from this workspace.
pub fn mvanon_binary() -> &'static PathBuf {
    static BIN: OnceLock<PathBuf> = OnceLock::new();
    BIN.get_or_init(|| {
        escargot::CargoBuild::new()
            .package("mvanon-cli")
            .bin("mvanon")
            .manifest_path(concat!(env!("CARGO_MANIFEST_DIR"), "/../../Cargo.toml"))
            .run()
            .expect("building the mvanon binary")
            .path()
            .to_path_buf()
    })
}
