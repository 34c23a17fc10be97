//! Raw ranking instances and the two corpus formats that produce them.
//!
//! The canonical interchange format is one JSON object per line with fields
//! `context[]`, `knowledge[]`, `candidates[]` and `label`. The dialogue-text
//! format consists of numbered lines, `N your persona: <text>` for knowledge
//! entries and `N <utterance>\t<response>\t\t<c_1|...|c_20>` for turns, with
//! N restarting at each episode.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// Each example ranks one positive response against 19 sampled negatives.
pub const CANDIDATES_PER_EXAMPLE: usize = 20;

/// One ranking instance: a dialogue turn with its accumulated context,
/// knowledge entries and 20 candidate responses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEpisode {
    pub context: Vec<String>,
    pub knowledge: Vec<String>,
    pub candidates: Vec<String>,
    pub label: usize,
}

impl RawEpisode {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() != CANDIDATES_PER_EXAMPLE {
            return Err(Error::data(format!(
                "expected {CANDIDATES_PER_EXAMPLE} candidates, got {}",
                self.candidates.len()
            )));
        }
        if self.label >= self.candidates.len() {
            return Err(Error::data(format!(
                "label {} out of range for {} candidates",
                self.label,
                self.candidates.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    PersonaChatText,
    CanonicalJsonl,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "persona-chat-text" => Ok(CorpusFormat::PersonaChatText),
            "canonical-jsonl" => Ok(CorpusFormat::CanonicalJsonl),
            other => Err(Error::Config(format!("unknown corpus format '{other}'"))),
        }
    }
}

pub fn parse_episodes(reader: impl BufRead, format: CorpusFormat) -> Result<Vec<RawEpisode>> {
    match format {
        CorpusFormat::PersonaChatText => parse_persona_chat(reader),
        CorpusFormat::CanonicalJsonl => parse_jsonl(reader),
    }
}

fn parse_jsonl(reader: impl BufRead) -> Result<Vec<RawEpisode>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: RawEpisode = serde_json::from_str(&line)
            .map_err(|e| Error::data_at(lineno, format!("invalid json: {e}")))?;
        ep.validate().map_err(|e| match e {
            Error::Data { message, .. } => Error::data_at(lineno, message),
            other => other,
        })?;
        out.push(ep);
    }
    Ok(out)
}

fn parse_persona_chat(reader: impl BufRead) -> Result<Vec<RawEpisode>> {
    const PERSONA_PREFIX: &str = "your persona: ";
    let mut out = Vec::new();
    let mut persona: Vec<String> = Vec::new();
    let mut history: Vec<String> = Vec::new();
    let mut prev_n: Option<u64> = None;

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (num, rest) = line
            .split_once(' ')
            .ok_or_else(|| Error::data_at(lineno, "missing line number prefix"))?;
        let n: u64 = num
            .parse()
            .map_err(|_| Error::data_at(lineno, format!("invalid line number '{num}'")))?;
        if prev_n.map_or(true, |p| n <= p) {
            // numbering restarted: a new dialogue begins
            persona.clear();
            history.clear();
        }
        prev_n = Some(n);

        if let Some(entry) = rest.strip_prefix(PERSONA_PREFIX) {
            persona.push(entry.to_string());
            continue;
        }
        let fields: Vec<&str> = rest.split('\t').collect();
        if fields.len() < 4 {
            return Err(Error::data_at(
                lineno,
                format!("expected 4 tab-separated fields in a turn line, got {}", fields.len()),
            ));
        }
        let utterance = fields[0].to_string();
        let response = fields[1].to_string();
        let candidates: Vec<String> = fields[3].split('|').map(str::to_string).collect();
        if candidates.len() != CANDIDATES_PER_EXAMPLE {
            return Err(Error::data_at(
                lineno,
                format!(
                    "expected {CANDIDATES_PER_EXAMPLE} candidates, got {}",
                    candidates.len()
                ),
            ));
        }
        let label = candidates
            .iter()
            .position(|c| *c == response)
            .ok_or_else(|| Error::data_at(lineno, "true response not among candidates"))?;

        let mut context = history.clone();
        context.push(utterance.clone());
        out.push(RawEpisode {
            context,
            knowledge: persona.clone(),
            candidates,
            label,
        });
        history.push(utterance);
        history.push(response);
    }
    Ok(out)
}

/// Serialize episodes in the canonical interchange format, one object per line.
pub fn write_jsonl(episodes: &[RawEpisode], mut writer: impl Write) -> Result<()> {
    for ep in episodes {
        let line = serde_json::to_string(ep)
            .map_err(|e| Error::data(format!("serialize episode: {e}")))?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}
