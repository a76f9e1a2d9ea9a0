use std::path::Path;
use std::process::Command;

const SMOKE: &str = r#"
#include "ndde.h"
#include <stdio.h>

int main(void) {
    NddeField *f = NULL;
    NddeTrajectory *t = NULL;
    double x0 = -1.0, x = 0.0;
    if (ndde_field_scalar_delay(1, -2.0, &f) != NDDE_STATUS_OK) return 1;
    if (ndde_integrate(f, &x0, 1, 1.0, 1, 100, &t) != NDDE_STATUS_OK) return 2;
    if (ndde_trajectory_checkpoint(t, 1, &x, 1) != NDDE_STATUS_OK) return 3;
    ndde_trajectory_free(t);
    ndde_field_free(f);
    if (ndde_field_scalar_delay(1, -2.0, NULL) != NDDE_STATUS_NULL_POINTER) return 4;
    char msg[64];
    ndde_last_error_message(msg, sizeof msg);
    printf("%.12f %s\n", x, msg);
    return 0;
}
"#;

#[test]
fn header_compiles_and_links_as_c() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let include = manifest.join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, SMOKE).unwrap();

    // The static library sits next to the deps directory holding this test.
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = lib_dir.join("libndde_ffi.a");
    assert!(lib.exists(), "missing {}", lib.display());

    let bin = dir.path().join("smoke");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .expect("C compiler available");
    assert!(status.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("1.000000000000 "), "{text}");
    assert!(text.contains("null"), "{text}");
}
