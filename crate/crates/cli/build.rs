//! Embeds a content hash of the library and CLI sources as
//! `POLYSEQ_CODE_HASH`, recorded in every run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

fn collect(dir: &Path, out: &mut Vec<PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else { return };
    for e in entries.flatten() {
        let p = e.path();
        if p.is_dir() {
            collect(&p, out);
        } else if p.extension().is_some_and(|x| x == "rs" || x == "toml") {
            out.push(p);
        }
    }
}

fn main() {
    let root = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").expect("set by cargo"));
    let core = root.join("../core");
    let mut files = Vec::new();
    for dir in [core.join("src"), root.join("src")] {
        println!("cargo:rerun-if-changed={}", dir.display());
        collect(&dir, &mut files);
    }
    for f in [core.join("Cargo.toml"), root.join("Cargo.toml")] {
        println!("cargo:rerun-if-changed={}", f.display());
        files.push(f);
    }
    files.sort();
    let mut h = Sha256::new();
    for f in &files {
        let rel = f.strip_prefix(&root).unwrap_or(f);
        let body = fs::read(f).expect("source file readable");
        h.update(format!("{} {}\0", rel.display(), body.len()).as_bytes());
        h.update(&body);
    }
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    println!("cargo:rustc-env=POLYSEQ_CODE_HASH={hex}");
}
