//! Plain-text split manifest.
//!
//! ```text
//! manifest := header line*
//! header   := "mvse-manifest 1" NL
//! line     := comment | blank | split | entry
//! comment  := "#" any* NL
//! split    := "[" name "]" NL
//! entry    := video_id ":" (" " sentence_id)* NL
//! ```
//!
//! Every entry belongs to the most recent split. Sentence ids index the
//! container's sentence section.

use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::Dataset;

pub const HEADER: &str = "mvse-manifest 1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitEntry {
    pub video_id: String,
    pub sentence_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub name: String,
    pub entries: Vec<SplitEntry>,
}

impl Split {
    pub fn num_queries(&self) -> usize {
        self.entries.iter().map(|e| e.sentence_ids.len()).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub splits: Vec<Split>,
}

impl Manifest {
    pub fn split(&self, name: &str) -> Result<&Split> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("manifest has no split `{name}`")))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER}\n");
        for split in &self.splits {
            let _ = writeln!(out, "[{}]", split.name);
            for e in &split.entries {
                out.push_str(&e.video_id);
                out.push(':');
                for id in &e.sentence_ids {
                    let _ = write!(out, " {id}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, msg: &str| Error::Manifest {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        match lines.next() {
            Some((_, h)) if h == HEADER => {}
            _ => return Err(err(1, "missing `mvse-manifest 1` header")),
        }
        let mut splits: Vec<Split> = Vec::new();
        for (no, line) in lines {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if name.is_empty() {
                    return Err(err(no, "empty split name"));
                }
                if splits.iter().any(|s| s.name == name) {
                    return Err(err(no, "duplicate split"));
                }
                splits.push(Split {
                    name: name.to_string(),
                    entries: Vec::new(),
                });
                continue;
            }
            let (video, ids) = line.split_once(':').ok_or_else(|| err(no, "expected `video_id: ids`"))?;
            let split = splits.last_mut().ok_or_else(|| err(no, "entry before any split"))?;
            let video = video.trim();
            if video.is_empty() {
                return Err(err(no, "empty video id"));
            }
            let sentence_ids = ids
                .split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|_| err(no, "bad sentence id")))
                .collect::<Result<Vec<_>>>()?;
            split.entries.push(SplitEntry {
                video_id: video.to_string(),
                sentence_ids,
            });
        }
        Ok(Self { splits })
    }

    /// Checks that every referenced id exists and each sentence describes
    /// the video it is listed under.
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        for split in &self.splits {
            for e in &split.entries {
                let v = ds.video_index(&e.video_id).ok_or_else(|| {
                    Error::Malformed(format!("split `{}`: unknown video `{}`", split.name, e.video_id))
                })?;
                for &s in &e.sentence_ids {
                    match ds.sentences.get(s) {
                        Some(sent) if sent.video == v => {}
                        Some(_) => {
                            return Err(Error::Malformed(format!(
                                "sentence {s} does not describe `{}`",
                                e.video_id
                            )))
                        }
                        None => return Err(Error::Malformed(format!("unknown sentence {s}"))),
                    }
                }
            }
        }
        Ok(())
    }
}
