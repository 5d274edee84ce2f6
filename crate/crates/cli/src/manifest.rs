//! `manifest.txt`: what a run was, when it ran and what it wrote.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};

pub const FILE_NAME: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Running,
    Completed,
    Failed,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Running => "running",
            Self::Completed => "completed",
            Self::Failed => "failed",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "running" => Some(Self::Running),
            "completed" => Some(Self::Completed),
            "failed" => Some(Self::Failed),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub status: Status,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub error: Option<String>,
    /// `(label, path)` pairs; paths are relative to the manifest's directory.
    pub artifacts: Vec<(String, PathBuf)>,
    /// Canonical config snapshot.
    pub config: String,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl Manifest {
    pub fn start(command: &str, run_id: String, config_hash: String, seed: u64, config: String) -> Self {
        Self {
            command: command.to_owned(),
            run_id,
            config_hash,
            seed,
            status: Status::Running,
            started_unix: unix_now(),
            finished_unix: None,
            error: None,
            artifacts: Vec::new(),
            config,
        }
    }

    pub fn finish(&mut self, result: &Result<()>) {
        self.finished_unix = Some(unix_now());
        match result {
            Ok(()) => self.status = Status::Completed,
            Err(e) => {
                self.status = Status::Failed;
                self.error = Some(format!("{e:#}").replace('\n', " "));
            }
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "command = {}\nrun_id = {}\nconfig_hash = {}\nseed = {}\nstatus = {}\nstarted_unix = {}\n",
            self.command,
            self.run_id,
            self.config_hash,
            self.seed,
            self.status.as_str(),
            self.started_unix
        );
        if let Some(t) = self.finished_unix {
            out += &format!("finished_unix = {t}\n");
        }
        if let Some(e) = &self.error {
            out += &format!("error = {e}\n");
        }
        for (label, path) in &self.artifacts {
            out += &format!("artifact.{label} = {}\n", path.display());
        }
        out += "[config]\n";
        out += &self.config;
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(FILE_NAME);
        std::fs::write(&path, self.render()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(FILE_NAME);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (head, config) = match text.split_once("[config]\n") {
            Some((h, c)) => (h, c.to_owned()),
            None => (text, String::new()),
        };
        let mut m = Self::start("", String::new(), String::new(), 0, config);
        let mut status = None;
        for line in head.lines().filter(|l| !l.trim().is_empty()) {
            let Some((k, v)) = line.split_once(" = ") else { bail!("malformed line `{line}`") };
            match k {
                "command" => m.command = v.to_owned(),
                "run_id" => m.run_id = v.to_owned(),
                "config_hash" => m.config_hash = v.to_owned(),
                "seed" => m.seed = v.parse()?,
                "status" => status = Status::parse(v),
                "started_unix" => m.started_unix = v.parse()?,
                "finished_unix" => m.finished_unix = Some(v.parse()?),
                "error" => m.error = Some(v.to_owned()),
                _ => match k.strip_prefix("artifact.") {
                    Some(label) => m.artifacts.push((label.to_owned(), PathBuf::from(v))),
                    None => bail!("unknown manifest key `{k}`"),
                },
            }
        }
        m.status = status.context("manifest has no valid status")?;
        Ok(m)
    }

    /// True when the run finished and every listed artifact is on disk.
    pub fn is_complete(&self, dir: &Path) -> bool {
        self.status == Status::Completed && self.artifacts.iter().all(|(_, p)| dir.join(p).exists())
    }
}
