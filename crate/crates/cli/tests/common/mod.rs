#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adgcrnn::config::RunConfig;

/// Small enough that a two-epoch run takes well under a second.
pub const SMALL_CONFIG: &str = r#"
seed = 3

[resolution]
steps_per_day = 12
history = 3
horizon = 3

[synth]
n_nodes = 4
n_steps = 240

[model]
c_out = 3
hidden = 4
head_dim = 2
heads = 2
diffusion_steps = 2
variant = "full"

[train]
epochs = 2
batch_size = 8
learning_rate = 0.005
tau = 20.0
patience = 0
"#;

pub fn small_config() -> RunConfig {
    RunConfig::parse(SMALL_CONFIG, Path::new("small.toml")).unwrap()
}

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn adgcrnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adgcrnn"))
        .args(args)
        .env_remove("ADGCRNN_OUT_DIR")
        .env_remove("ADGCRNN_THREADS")
        .output()
        .unwrap()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}
