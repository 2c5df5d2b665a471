mod common;

use std::path::Path;

use common::paths::{containment_fuzz, tree};
use mpiwasm::engine::InstanceConfig;
use mpiwasm::sandbox::{Access, PreopenTable, Rights};

#[test]
fn adversarial_paths_never_escape() {
    let r = containment_fuzz(1000, 0x5eed);
    assert!(r.escapes.is_empty(), "{:#?}", r.escapes);
    assert!(r.resolved > 100, "fuzzer only produced {} valid paths", r.resolved);
}

#[test]
fn links_inside_resolve_and_links_outside_do_not() {
    let t = tree();
    let mut table = PreopenTable::new();
    table.map_preopen(&t.root, Rights::ReadOnly).unwrap();
    assert_eq!(
        table.resolve_path("/data/a/link_in", Access::Read).unwrap().host_path,
        t.root.join("a/b/c")
    );
    for p in ["/data/link_out/secret", "/data/a/b/link_up", "/data/a/b/abs", "/data/dangling", "/data/a/secret_link"] {
        assert!(table.resolve_path(p, Access::Read).is_err(), "{p}");
    }
    assert!(table.resolve_path("/data/a/file", Access::Write).is_err());
}

/// Guest that opens the path at 1024 (length in the first stdin word)
/// relative to fd 3 and exits with the WASI errno, or 0 after reading.
const OPEN_WAT: &str = r#"
(import "wasi_snapshot_preview1" "path_open"
  (func $path_open (param i32 i32 i32 i32 i32 i64 i64 i32 i32) (result i32)))
(func (export "_start") (local $len i32) (local $oflags i32) (local $rights i64) (local $rc i32)
  (local.set $len (i32.sub (call $read_stdin (i32.const 1020) (i32.const 1024)) (i32.const 4)))
  ;; first word: 0 read, 1 create for writing
  (if (i32.load (i32.const 1020))
    (then (local.set $oflags (i32.const 1)) (local.set $rights (i64.const 0x40)))
    (else (local.set $rights (i64.const 0x2))))
  (local.set $rc (call $path_open (i32.const 3) (i32.const 1) (i32.const 1024) (local.get $len)
                                  (local.get $oflags) (local.get $rights) (i64.const 0) (i32.const 0) (i32.const 16)))
  (call $exit (local.get $rc)))
"#;

fn guest_open(dir: &Path, rights: Rights, path: &str, write: bool) -> i32 {
    let artifact = common::compile(&common::wrap(OPEN_WAT));
    let mut stdin = (write as i32).to_le_bytes().to_vec();
    stdin.extend_from_slice(path.as_bytes());
    let cfg = InstanceConfig {
        preopens: vec![(dir.to_path_buf(), rights)],
        stdin: Some(stdin),
        ..common::sim_config()
    };
    let out = common::embedder().spawn_sim_group(1, &artifact, &cfg).unwrap();
    out.exit_codes[0]
}

#[test]
fn guest_cannot_leave_its_preopen() {
    let t = tree();
    assert_eq!(guest_open(&t.root, Rights::ReadOnly, "a/file", false), 0);
    for p in ["../outside/secret", "link_out/secret", "a/b/link_up/outside/secret", "/etc/passwd", "a/secret_link"] {
        assert_ne!(guest_open(&t.root, Rights::ReadOnly, p, false), 0, "{p}");
    }
}

#[test]
fn read_only_grant_refuses_creation() {
    let t = tree();
    assert_ne!(guest_open(&t.root, Rights::ReadOnly, "new_file", true), 0);
    assert!(!t.root.join("new_file").exists());
    assert_eq!(guest_open(&t.root, Rights::ReadWrite, "new_file", true), 0);
    assert!(t.root.join("new_file").exists());
}

#[test]
fn no_grant_means_no_filesystem() {
    let t = tree();
    let artifact = common::compile(&common::wrap(OPEN_WAT));
    let mut stdin = 0i32.to_le_bytes().to_vec();
    stdin.extend_from_slice(b"a/file");
    let cfg = InstanceConfig {
        stdin: Some(stdin),
        ..common::sim_config()
    };
    let code = common::embedder().spawn_sim_group(1, &artifact, &cfg).unwrap().exit_codes[0];
    // EBADF: there is no fd 3
    assert_eq!(code, 8);
    drop(t);
}
