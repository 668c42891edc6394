//! Runs the shell blocks of `docs/tutorial.md` in order, after writing out
//! its named TOML blocks.

use std::fs;
use std::path::Path;
use std::process::Command;

#[test]
fn tutorial_commands_run() {
    let doc = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/tutorial.md")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut lines = doc.lines();
    let mut commands = 0;
    while let Some(line) = lines.next() {
        let Some(info) = line.strip_prefix("```") else { continue };
        let body: Vec<&str> = lines.by_ref().take_while(|l| *l != "```").collect();
        match info.split_whitespace().collect::<Vec<_>>()[..] {
            ["toml", name] => fs::write(dir.path().join(name), body.join("\n")).unwrap(),
            ["sh"] => {
                for cmd in body {
                    let args: Vec<&str> = cmd.split_whitespace().collect();
                    assert_eq!(args[0], "aerotrl", "unexpected shell line `{cmd}`");
                    let out = Command::new(env!("CARGO_BIN_EXE_aerotrl"))
                        .current_dir(dir.path())
                        .args(&args[1..])
                        .output()
                        .unwrap();
                    assert!(out.status.success(), "`{cmd}` failed: {}", String::from_utf8_lossy(&out.stderr));
                    commands += 1;
                }
            }
            _ => {}
        }
    }
    assert_eq!(commands, 14);
    let d = dir.path();
    for file in ["routes.csv", "scores.csv", "predictions.csv", "runs/fr/report.json", "runs/fr/plots/head_loss.svg", "plots/trajectory_east-0001.svg"] {
        assert!(d.join(file).exists(), "{file} missing");
    }
    let routes = fs::read_to_string(d.join("routes.csv")).unwrap();
    assert!(routes.lines().next().unwrap().ends_with("anomaly_tag") && routes.contains(",VD"));
}
