//! Compiles and runs a small C program against the generated header and the
//! static library.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include "qsdnet.h"

int main(void) {
    QsdComplex uf[4], ub[4];
    if (qsd_receiver_gu(uf, ub) != QSD_STATUS_OK) return 1;
    QsdNetwork *net = NULL;
    if (qsd_network_new(uf, ub, 0.3, -1.0, false, 12, &net) != QSD_STATUS_OK) return 2;
    double r = sqrt(0.5);
    QsdComplex states[8] = {{r, 0}, {r, 0}, {r, 0}, {-r, 0}, {r, 0}, {0, r}, {r, 0}, {0, -r}};
    double priors[4] = {0.25, 0.25, 0.25, 0.25};
    double err = 0;
    if (qsd_single_copy_error(net, states, priors, 4, &err) != QSD_STATUS_OK) return 3;
    qsd_network_free(net);
    if (fabs(err - 0.5) > 1e-9) return 4;
    if (qsd_network_new(uf, ub, 2.0, -1.0, false, 12, &net) != QSD_STATUS_INVALID_ARGUMENT) return 5;
    char msg[128];
    if (qsd_last_error_message(msg, sizeof msg) == 0) return 6;
    printf("%s %.9f\n", qsd_version(), err);
    return 0;
}
"#;

#[test]
fn c_program_links_against_the_static_library() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = manifest.join("include/qsdnet.h");
    assert!(header.exists());
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["qsd_network_new", "qsd_multi_copy_error", "QsdNetwork", "QSD_STATUS_CAPACITY"] {
        assert!(text.contains(name), "{name} missing from header");
    }

    // test binaries live in <target>/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libqsdnet_ffi.a");
    if !lib.exists() {
        eprintln!("skipping: {} not built", lib.display());
        return;
    }
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let bin = dir.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status.code());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.trim(), format!("{} 0.500000000", qsdnet::VERSION));
}
