// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ranked-score files: one `component<TAB>score<TAB>n_examples` line per
//! selected component, best first, after `#` comment lines.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ComponentId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedEntry {
    pub component: ComponentId,
    pub score: f64,
    pub n_examples: usize,
}

pub fn to_text(method: &str, entries: &[RankedEntry]) -> String {
    let mut out = format!("# method: {method}\n# component\tscore\tn_examples\n");
    for e in entries {
        // `{:?}` on f64 prints the shortest representation that round-trips.
        out.push_str(&format!("{}\t{:?}\t{}\n", e.component, e.score, e.n_examples));
    }
    out
}

pub fn write_ranked(path: impl AsRef<Path>, method: &str, entries: &[RankedEntry]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_text(method, entries)).map_err(|e| Error::io(path, e))
}

pub fn parse_ranked(text: &str, path: &Path) -> Result<Vec<RankedEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [c, s, n] = fields.as_slice() else {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        };
        out.push(RankedEntry {
            component: c.parse().map_err(|e: Error| err(e.to_string()))?,
            score: s.parse().map_err(|_| err(format!("bad score {s:?}")))?,
            n_examples: n.parse().map_err(|_| err(format!("bad count {n:?}")))?,
        });
    }
    Ok(out)
}

pub fn read_ranked(path: impl AsRef<Path>) -> Result<Vec<RankedEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ranked(&text, path)
}
