use std::fs;
use std::os::unix::fs::symlink;
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use mpiwasm::sandbox::{Access, PreopenTable, Rights};

pub struct Tree {
    _tmp: tempfile::TempDir,
    pub root: PathBuf,
    pub outside: PathBuf,
}

/// A preopen root with nested dirs and links pointing in, out and nowhere.
pub fn tree() -> Tree {
    let tmp = tempfile::tempdir().unwrap();
    let base = fs::canonicalize(tmp.path()).unwrap();
    let root = base.join("data");
    let outside = base.join("outside");
    fs::create_dir_all(root.join("a/b/c")).unwrap();
    fs::create_dir_all(&outside).unwrap();
    fs::write(outside.join("secret"), "s").unwrap();
    fs::write(root.join("a/file"), "f").unwrap();
    symlink(&outside, root.join("link_out")).unwrap();
    symlink("../../..", root.join("a/b/link_up")).unwrap();
    symlink("b/c", root.join("a/link_in")).unwrap();
    symlink("/etc", root.join("a/b/abs")).unwrap();
    symlink("missing", root.join("dangling")).unwrap();
    symlink(outside.join("secret"), root.join("a/secret_link")).unwrap();
    Tree { _tmp: tmp, root, outside }
}

const PARTS: &[&str] = &[
    "..", ".", "", "a", "b", "c", "file", "link_out", "link_up", "link_in", "abs", "dangling", "secret_link",
    "secret", "outside", "data", "\\..", "..\\..", "%2e%2e", "...", "a/../..", "//", "\u{0}", "b\\c",
];

pub fn adversarial_path(rng: &mut StdRng) -> String {
    let mut p = String::new();
    if rng.gen_bool(0.9) {
        p.push('/');
    }
    if rng.gen_bool(0.85) {
        p.push_str("data");
    }
    for _ in 0..rng.gen_range(0..8) {
        p.push('/');
        p.push_str(PARTS[rng.gen_range(0..PARTS.len())]);
    }
    p
}

/// True when `path`, or the deepest part of it that exists, lies under
/// `root` after resolving every link.
pub fn contained(root: &Path, path: &Path) -> bool {
    let mut probe = path.to_path_buf();
    loop {
        if let Ok(real) = fs::canonicalize(&probe) {
            return real.starts_with(root);
        }
        if fs::symlink_metadata(&probe).is_ok() {
            // a link that does not resolve
            return false;
        }
        if !probe.pop() {
            return false;
        }
    }
}

#[derive(Debug, Default)]
pub struct ContainmentReport {
    pub paths: usize,
    pub resolved: usize,
    pub escapes: Vec<String>,
}

/// Resolves `n` adversarial guest paths against a read-write preopen of
/// [`tree`] and records every resolution that lands outside it.
pub fn containment_fuzz(n: usize, seed: u64) -> ContainmentReport {
    let t = tree();
    let mut table = PreopenTable::new();
    table.map_preopen(&t.root, Rights::ReadWrite).unwrap();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut report = ContainmentReport::default();
    for _ in 0..n {
        let p = adversarial_path(&mut rng);
        report.paths += 1;
        if let Ok(r) = table.resolve_path(&p, Access::Read) {
            report.resolved += 1;
            if !contained(&t.root, &r.host_path) || r.host_path.starts_with(&t.outside) {
                report.escapes.push(format!("{p} -> {}", r.host_path.display()));
            }
        }
    }
    report
}
