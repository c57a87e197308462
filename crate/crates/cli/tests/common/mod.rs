//! Helpers shared by the CLI integration tests.
#![allow(dead_code)] // each test binary uses a subset

use std::io::Write as _;
use std::path::Path;
use std::process::{Command, Output};

use joao_core::graph::Graph;

/// Write a graph list as TUDataset flat files (edges in both directions).
pub fn write_tud_fixture(dir: &Path, name: &str, graphs: &[Graph]) {
    let mut a = String::new();
    let mut gi = String::new();
    let mut gl = String::new();
    let mut offset = 1usize; // file node ids are global and 1-indexed
    for (gid, g) in graphs.iter().enumerate() {
        for _ in 0..g.num_nodes() {
            gi.push_str(&format!("{}\n", gid + 1));
        }
        for &(u, v) in g.edges() {
            a.push_str(&format!("{}, {}\n", u as usize + offset, v as usize + offset));
            a.push_str(&format!("{}, {}\n", v as usize + offset, u as usize + offset));
        }
        gl.push_str(&format!("{}\n", g.label().unwrap_or(0)));
        offset += g.num_nodes();
    }
    for (suffix, content) in [("A", a), ("graph_indicator", gi), ("graph_labels", gl)] {
        let mut f = std::fs::File::create(dir.join(format!("{name}_{suffix}.txt"))).unwrap();
        f.write_all(content.as_bytes()).unwrap();
    }
}

/// Run the `joao` binary with the given arguments and environment.
pub fn joao(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_joao"));
    cmd.args(args).env_remove("JOAO_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

pub fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

pub fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

pub fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("no signal")
}
