//! Plain-text parameter checkpoints.
//!
//! ```text
//! lira-checkpoint 1
//! config <k>
//! <k lines of TOML>
//! param <name> <rank> <dim_1> .. <dim_rank>
//! <values separated by spaces>
//! ...
//! end
//! ```
//!
//! Values are written with the shortest representation that parses back to
//! the same `f64`, so save/load is exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::tensor::Array;
use crate::{LiraError, Result};

const MAGIC: &str = "lira-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub params: Vec<(String, Array)>,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let lines: Vec<&str> = self.config.lines().collect();
        let _ = writeln!(out, "{MAGIC}\nconfig {}", lines.len());
        for l in lines {
            let _ = writeln!(out, "{l}");
        }
        for (name, a) in &self.params {
            let dims: Vec<String> = a.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "param {name} {} {}", a.shape().len(), dims.join(" "));
            let vals: Vec<String> = a.data().iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| LiraError::Checkpoint(m);
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("missing header".into()));
        }
        let k: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("config "))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad("missing config block".into()))?;
        let mut config = String::new();
        for _ in 0..k {
            config.push_str(lines.next().ok_or_else(|| bad("truncated config".into()))?);
            config.push('\n');
        }
        let mut params = Vec::new();
        loop {
            let head = lines.next().ok_or_else(|| bad("missing end marker".into()))?;
            if head == "end" {
                break;
            }
            let fields: Vec<&str> = head.split_whitespace().collect();
            if fields.len() < 3 || fields[0] != "param" {
                return Err(bad(format!("bad param header: {head}")));
            }
            let rank: usize = fields[2].parse().map_err(|_| bad(format!("bad rank: {head}")))?;
            if fields.len() != 3 + rank {
                return Err(bad(format!("bad shape: {head}")));
            }
            let shape = fields[3..]
                .iter()
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("bad shape: {head}")))?;
            let body = lines.next().ok_or_else(|| bad(format!("missing values for {}", fields[1])))?;
            let data = body
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("bad value in {}", fields[1])))?;
            let a = Array::new(shape, data).map_err(|e| bad(format!("{}: {e}", fields[1])))?;
            params.push((fields[1].to_string(), a));
        }
        Ok(Self { config, params })
    }

    /// Writes through a temporary file so an interrupted save never clobbers
    /// the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_text())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LiraError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }
}
