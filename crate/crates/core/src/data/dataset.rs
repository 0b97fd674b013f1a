use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tree::{convert_slu, parse_logical_form, Tree};
use crate::config::KvFile;
use crate::error::{Error, Result};

/// One utterance with its gold logical form.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<String>,
    pub gold: Tree,
    pub task_id: String,
    pub raw: String,
}

impl Example {
    pub fn new(
        tokens: Vec<String>,
        gold: Tree,
        task_id: impl Into<String>,
        raw: impl Into<String>,
    ) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("example utterance"));
        }
        Ok(Example {
            tokens,
            gold,
            task_id: task_id.into(),
            raw: raw.into(),
        })
    }

    /// Whether every gold leaf is generatable from `terminals` or present in
    /// the utterance.
    pub fn is_copyable(&self, terminals: &super::Vocab) -> bool {
        self.gold
            .leaves()
            .iter()
            .all(|l| terminals.contains(l) || self.tokens.iter().any(|t| t == l))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Format {
    /// `utterance<TAB>logical_form`
    OvernightTsv,
    /// `IntentName<TAB>word1[|Slot] word2[|Slot] ...`
    SluTsv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overnight-tsv" | "overnight" | "lf-tsv" => Ok(Format::OvernightTsv),
            "slu-tsv" | "slu" => Ok(Format::SluTsv),
            other => Err(Error::Unknown {
                kind: "dataset format",
                name: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::OvernightTsv => "overnight-tsv",
            Format::SluTsv => "slu-tsv",
        })
    }
}

fn tokenize(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

pub fn parse_overnight_line(line: &str, task_id: &str) -> Result<Example> {
    let (utt, lf) = line
        .split_once('\t')
        .ok_or_else(|| Error::Invalid("expected `utterance<TAB>logical_form`".into()))?;
    let tokens = tokenize(utt);
    if tokens.is_empty() {
        return Err(Error::Invalid("empty utterance".into()));
    }
    let gold = parse_logical_form(lf)?;
    Example::new(tokens, gold, task_id, line)
}

/// Intent names conventionally carry an `Intent` suffix in tagged data; the
/// tree root drops it (`FindCinemaIntent` -> `FindCinema`).
pub fn intent_root(name: &str) -> &str {
    match name.strip_suffix("Intent") {
        Some(stem) if !stem.is_empty() => stem,
        _ => name,
    }
}

/// `word|Slot` items; bare words and the outside tag `O` carry no slot.
pub fn parse_slu_tagged(text: &str) -> Result<Vec<(String, Option<String>)>> {
    text.split_whitespace()
        .map(|item| match item.rsplit_once('|') {
            Some((w, "O")) if !w.is_empty() => Ok((w.to_string(), None)),
            Some((w, s)) if !w.is_empty() && !s.is_empty() => {
                Ok((w.to_string(), Some(s.to_string())))
            }
            Some(_) => Err(Error::Invalid(format!("malformed tagged word `{item}`"))),
            None => Ok((item.to_string(), None)),
        })
        .collect()
}

pub fn parse_slu_line(line: &str, task_id: &str) -> Result<Example> {
    let (intent, rest) = line
        .split_once('\t')
        .ok_or_else(|| Error::Invalid("expected `IntentName<TAB>tagged words`".into()))?;
    let intent = intent.trim();
    if intent.is_empty() {
        return Err(Error::Invalid("empty intent".into()));
    }
    let tagged = parse_slu_tagged(rest)?;
    if tagged.is_empty() {
        return Err(Error::Invalid("empty utterance".into()));
    }
    let gold = convert_slu(intent_root(intent), &tagged)?;
    let tokens = tagged.into_iter().map(|(w, _)| w).collect();
    Example::new(tokens, gold, task_id, line)
}

/// Parses dataset text. `origin` is used in error messages.
pub fn parse_dataset(
    text: &str,
    format: Format,
    task_id: &str,
    origin: &str,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let line = line.trim_end_matches('\r');
        let parsed = match format {
            Format::OvernightTsv => parse_overnight_line(line, task_id),
            Format::SluTsv => parse_slu_line(line, task_id),
        };
        out.push(parsed.map_err(|e| Error::Dataset {
            path: origin.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    if out.is_empty() {
        return Err(Error::Dataset {
            path: origin.to_string(),
            line: 0,
            message: "no examples".into(),
        });
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, format: Format, task_id: &str) -> Result<Vec<Example>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, format, task_id, &path.display().to_string())
}

pub fn write_overnight(examples: &[Example]) -> String {
    let mut s = String::new();
    for e in examples {
        s.push_str(&e.tokens.join(" "));
        s.push('\t');
        s.push_str(&e.gold.linearize());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic 80/10/10 split keyed on each example's index.
pub fn split_by_hash(examples: Vec<Example>, seed: u64) -> Split {
    let mut split = Split::default();
    for (i, e) in examples.into_iter().enumerate() {
        match splitmix64(seed ^ splitmix64(i as u64)) % 10 {
            0..=7 => split.train.push(e),
            8 => split.dev.push(e),
            _ => split.test.push(e),
        }
    }
    split
}

/// Where one task's data lives.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSource {
    pub id: String,
    pub format: Format,
    pub train: PathBuf,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

impl TaskSource {
    /// Loads the task, honouring shipped dev/test files and otherwise
    /// splitting the single file 80/10/10.
    pub fn load(&self, seed: u64) -> Result<Split> {
        let train = load_dataset(&self.train, self.format, &self.id)?;
        match (&self.dev, &self.test) {
            (None, None) => Ok(split_by_hash(train, seed)),
            (dev, test) => {
                let load_opt = |p: &Option<PathBuf>| -> Result<Vec<Example>> {
                    match p {
                        Some(p) => load_dataset(p, self.format, &self.id),
                        None => Ok(Vec::new()),
                    }
                };
                Ok(Split {
                    train,
                    dev: load_opt(dev)?,
                    test: load_opt(test)?,
                })
            }
        }
    }
}

/// Task registry read from a flat key-value file:
///
/// ```text
/// calendar.path = data/calendar.tsv
/// calendar.format = overnight-tsv
/// calendar.dev = data/calendar.dev.tsv
/// ```
///
/// Relative paths are resolved against the file's directory.
pub fn load_task_registry(kv: &KvFile) -> Result<Vec<TaskSource>> {
    let base = kv.base_dir();
    let mut ids: Vec<String> = Vec::new();
    for (k, _) in kv.entries() {
        if let Some((task, field)) = k.rsplit_once('.') {
            let task = task.strip_prefix("task.").unwrap_or(task);
            if matches!(field, "path" | "train") && !ids.iter().any(|i| i == task) {
                ids.push(task.to_string());
            }
        }
    }
    ids.into_iter()
        .map(|id| {
            let key = |f: &str| {
                let plain = format!("{id}.{f}");
                if kv.get(&plain).is_some() {
                    plain
                } else {
                    format!("task.{id}.{f}")
                }
            };
            let resolve = |p: &str| {
                let p = PathBuf::from(p);
                if p.is_relative() {
                    base.join(p)
                } else {
                    p
                }
            };
            let train = kv
                .get(&key("path"))
                .or_else(|| kv.get(&key("train")))
                .map(resolve)
                .ok_or_else(|| Error::Config(format!("task `{id}` has no path")))?;
            let format = match kv.get(&key("format")) {
                Some(f) => f.parse()?,
                None => Format::OvernightTsv,
            };
            Ok(TaskSource {
                train,
                dev: kv.get(&key("dev")).map(resolve),
                test: kv.get(&key("test")).map(resolve),
                format,
                id,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overnight_line() {
        let e = parse_overnight_line(
            "which cinemas screen Star Wars tonight\t(FindCinema (Title Star) (Title Wars) (Time tonight))",
            "cinema",
        )
        .unwrap();
        assert_eq!(e.tokens.len(), 6);
        assert_eq!(e.gold.children().len(), 3);
    }

    #[test]
    fn slu_line_converts_to_slot_tree() {
        let e = parse_slu_line(
            "FindCinemaIntent\twhich cinemas screen Star|Title Wars|Title tonight|Time",
            "cinema",
        )
        .unwrap();
        assert_eq!(
            e.gold.linearize(),
            "(FindCinema (Title Star) (Title Wars) (Time tonight))"
        );
        assert_eq!(e.tokens.join(" "), "which cinemas screen Star Wars tonight");
    }

    #[test]
    fn outside_tag_is_untagged() {
        let t = parse_slu_tagged("find|O Star|Title").unwrap();
        assert_eq!(t[0], ("find".to_string(), None));
        assert_eq!(t[1].1.as_deref(), Some("Title"));
    }

    #[test]
    fn malformed_line_names_line_number() {
        let text = "# header\nok then\t(f x)\nbroken\t(f (g x)\n";
        match parse_dataset(text, Format::OvernightTsv, "t", "mem") {
            Err(Error::Dataset { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(parse_dataset("# only a comment\n\n", Format::OvernightTsv, "t", "mem").is_err());
    }

    #[test]
    fn hash_split_is_deterministic_and_covers_all() {
        let exs: Vec<Example> = (0..200)
            .map(|i| parse_overnight_line(&format!("w{i}\t(f x)"), "t").unwrap())
            .collect();
        let a = split_by_hash(exs.clone(), 3);
        let b = split_by_hash(exs, 3);
        assert_eq!(a, b);
        assert_eq!(a.train.len() + a.dev.len() + a.test.len(), 200);
        assert!(a.train.len() > 140 && !a.dev.is_empty() && !a.test.is_empty());
    }

    #[test]
    fn intent_suffix_stripped_only_when_stem_remains() {
        assert_eq!(intent_root("FindCinemaIntent"), "FindCinema");
        assert_eq!(intent_root("Intent"), "Intent");
        assert_eq!(intent_root("Book"), "Book");
    }
}
