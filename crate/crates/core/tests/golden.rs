//! Rendered DPU pseudo-source of every workload against checked-in copies.
//!
//! Set `UPDATE_GOLDEN=1` to rewrite the files under `tests/golden/`.

mod common;

use common::golden;
use pimflow::workloads::WorkloadKind;

#[test]
fn sources_match_golden_files() {
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        for kind in WorkloadKind::ALL {
            let p = golden::path(kind);
            std::fs::create_dir_all(p.parent().unwrap()).unwrap();
            std::fs::write(&p, golden::render(kind)).unwrap();
        }
    }
    golden::check_all().unwrap();
}

#[test]
fn golden_files_end_with_newline_and_are_ascii() {
    for kind in WorkloadKind::ALL {
        let text = std::fs::read_to_string(golden::path(kind)).unwrap();
        assert!(text.ends_with('\n') && text.is_ascii(), "{kind}");
    }
}
