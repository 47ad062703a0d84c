use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{validate_starts, Segmentation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown split {s:?}")))
    }
}

/// One annotated action instance, one JSON object per line on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub id: String,
    pub video_id: String,
    pub label: String,
    pub length: usize,
    /// Internal sub-action start frames.
    pub boundaries: Vec<usize>,
    pub split: Split,
}

impl AnnotationRecord {
    pub fn segmentation(&self) -> Segmentation {
        Segmentation {
            id: self.id.clone(),
            label: self.label.clone(),
            length: self.length,
            starts: self.boundaries.clone(),
        }
    }
}

/// Parses JSON-lines annotations. Blank lines are skipped. Unsorted
/// boundaries are sorted with a warning; duplicates, out-of-range frames,
/// repeated ids and videos spread over several splits are rejected.
pub fn parse_annotations(text: &str, path: &Path) -> Result<Vec<AnnotationRecord>> {
    let mut out: Vec<AnnotationRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.boundaries.windows(2).any(|w| w[0] > w[1]) {
            warn!("{}:{}: boundaries of {} were not sorted", path.display(), i + 1, rec.id);
            rec.boundaries.sort_unstable();
        }
        if rec.length == 0 {
            return Err(Error::Validation(format!("line {}: instance {} has length 0", i + 1, rec.id)));
        }
        validate_starts(&rec.boundaries, rec.length)
            .map_err(|e| Error::Validation(format!("line {}: instance {}: {e}", i + 1, rec.id)))?;
        out.push(rec);
    }
    check_consistency(&out)?;
    Ok(out)
}

fn check_consistency(records: &[AnnotationRecord]) -> Result<()> {
    let mut ids = HashSet::new();
    let mut video_split: HashMap<&str, Split> = HashMap::new();
    for r in records {
        if !ids.insert(r.id.as_str()) {
            return Err(Error::Validation(format!("duplicate instance id {}", r.id)));
        }
        let s = *video_split.entry(&r.video_id).or_insert(r.split);
        if s != r.split {
            return Err(Error::Validation(format!(
                "video {} appears in both {s} and {}",
                r.video_id, r.split
            )));
        }
    }
    Ok(())
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path)
}

pub fn write_annotations<W: Write>(mut w: W, records: &[AnnotationRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io("<annotations>", e))?;
    }
    Ok(())
}

pub fn save_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_annotations(&mut buf, records)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("ann.jsonl")
    }

    #[test]
    fn empty_text() {
        assert!(parse_annotations("", p()).unwrap().is_empty());
        assert!(parse_annotations("\n\n", p()).unwrap().is_empty());
    }

    #[test]
    fn unsorted_boundaries_are_sorted() {
        let line = r#"{"id":"a","video_id":"v","label":"x","length":40,"boundaries":[30,10],"split":"train"}"#;
        let r = parse_annotations(line, p()).unwrap();
        assert_eq!(r[0].boundaries, vec![10, 30]);
    }

    #[test]
    fn rejects_bad_records() {
        let bad = [
            r#"{"id":"a","video_id":"v","label":"x","length":40,"boundaries":[10,10],"split":"train"}"#,
            r#"{"id":"a","video_id":"v","label":"x","length":40,"boundaries":[40],"split":"train"}"#,
            r#"{"id":"a","video_id":"v","label":"x","length":40,"boundaries":[0],"split":"train"}"#,
        ];
        for line in bad {
            assert!(matches!(parse_annotations(line, p()), Err(Error::Validation(_))), "{line}");
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = concat!(
            r#"{"id":"a","video_id":"v","label":"x","length":40,"boundaries":[],"split":"train"}"#,
            "\n{not json}\n"
        );
        match parse_annotations(text, p()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn video_split_consistency() {
        let text = concat!(
            r#"{"id":"a","video_id":"v","label":"x","length":40,"boundaries":[],"split":"train"}"#,
            "\n",
            r#"{"id":"b","video_id":"v","label":"x","length":40,"boundaries":[],"split":"test"}"#,
        );
        assert!(matches!(parse_annotations(text, p()), Err(Error::Validation(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let line = r#"{"id":"a","video_id":"v","label":"x","length":40,"boundaries":[],"split":"train"}"#;
        let text = format!("{line}\n{line}\n");
        assert!(matches!(parse_annotations(&text, p()), Err(Error::Validation(_))));
    }

    #[test]
    fn round_trip_random_records() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let records: Vec<AnnotationRecord> = (0..100)
            .map(|i| {
                let length = rng.gen_range(2..500);
                let mut b: Vec<usize> = (0..rng.gen_range(0..8)).map(|_| rng.gen_range(1..length)).collect();
                b.sort_unstable();
                b.dedup();
                AnnotationRecord {
                    id: format!("inst{i}"),
                    video_id: format!("vid{i}"),
                    label: ["vault", "high jump", "ü"][i % 3].to_string(),
                    length,
                    boundaries: b,
                    split: Split::ALL[rng.gen_range(0..3)],
                }
            })
            .collect();
        let mut buf = Vec::new();
        write_annotations(&mut buf, &records).unwrap();
        let back = parse_annotations(std::str::from_utf8(&buf).unwrap(), p()).unwrap();
        assert_eq!(back, records);
    }
}
