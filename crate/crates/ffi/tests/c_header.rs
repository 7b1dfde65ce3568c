use std::path::{Path, PathBuf};
use std::process::Command;

const SMOKE: &str = r#"
#include <stdio.h>
#include <string.h>
#include "gridline.h"

int main(void) {
    double costs[4] = {1.0, 0.0, 0.0, 1.0};
    ptrdiff_t map[2];
    double total = -1.0;
    if (gl_hungarian(costs, 2, 2, map, &total) != GL_STATUS_OK) return 1;
    if (map[0] != 1 || map[1] != 0 || total != 0.0) return 2;

    GlAnchorSet *set = NULL;
    if (gl_anchors_uniform(GL_SPACE_MR, 3, &set) != GL_STATUS_OK) return 3;
    if (gl_anchors_len(set) != 3) return 4;
    char *json = NULL;
    if (gl_anchors_to_json(set, &json) != GL_STATUS_OK) return 5;
    gl_string_free(json);
    gl_anchors_free(set);

    if (gl_hungarian(NULL, 1, 1, map, NULL) != GL_STATUS_NULL_POINTER) return 6;
    if (strstr(gl_last_error(), "costs") == NULL) return 7;
    printf("%s\n", gl_version());
    return 0;
}
"#;

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn compiler() -> Option<String> {
    ["cc", "clang", "gcc"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .map(str::to_owned)
}

/// Directory holding this test binary's sibling library artifacts.
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn header_declares_every_exported_function() {
    let header = std::fs::read_to_string(crate_dir().join("include/gridline.h")).unwrap();
    let source = std::fs::read_to_string(crate_dir().join("src/lib.rs")).unwrap();
    let exported: Vec<&str> = source
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exported.len() > 10);
    for name in exported {
        assert!(header.contains(&format!("{name}(")), "{name} missing from the header");
    }
}

#[test]
fn c_program_links_against_the_static_library() {
    let Some(cc) = compiler() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let lib = artifact_dir().join("libgridline_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let exe = dir.path().join("smoke");
    std::fs::write(&src, SMOKE).unwrap();
    let build = Command::new(&cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(build.status.success(), "{}", String::from_utf8_lossy(&build.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
