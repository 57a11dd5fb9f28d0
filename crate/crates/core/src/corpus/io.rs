use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Interaction, InteractionCorpus, UserSequence, Vocab};
use crate::error::{Error, Result};
use crate::fsio;

/// Parsed records plus the number of lines that could not be parsed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadedInteractions {
    pub records: Vec<Interaction>,
    pub malformed: usize,
}

fn parse_line(line: &str) -> Option<Interaction> {
    let mut fields = line.split('\t');
    let user = fields.next()?.trim();
    let item = fields.next()?.trim();
    let timestamp = fields.next()?.trim().parse::<i64>().ok()?;
    if fields.next().is_some() || user.is_empty() || item.is_empty() {
        return None;
    }
    Some(Interaction {
        user: user.to_string(),
        item: item.to_string(),
        timestamp,
    })
}

/// Reads `user<TAB>item<TAB>timestamp` lines. Blank lines and `#` comments are
/// ignored; more than 1% malformed lines is a format error.
pub fn load_interactions(path: &Path) -> Result<LoadedInteractions> {
    let text = fsio::read_to_string(path)?;
    let mut out = LoadedInteractions::default();
    let mut considered = 0usize;
    for line in text.lines() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        considered += 1;
        match parse_line(line) {
            Some(r) => out.records.push(r),
            None => out.malformed += 1,
        }
    }
    if considered == 0 {
        log::warn!("{} contains no interactions", path.display());
    }
    if out.malformed > 0 {
        log::warn!("{}: {} malformed lines", path.display(), out.malformed);
    }
    if out.malformed * 100 > considered {
        return Err(Error::Format(format!(
            "{}: {} of {considered} lines malformed",
            path.display(),
            out.malformed
        )));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format: String,
    version: u32,
    items: Vec<String>,
    users: Vec<UserSequence>,
}

const SNAPSHOT_FORMAT: &str = "seqguard-corpus";

/// JSON snapshot of the vocabulary and per-user sequences.
pub fn write_snapshot(corpus: &InteractionCorpus, path: &Path) -> Result<()> {
    let snap = Snapshot {
        format: SNAPSHOT_FORMAT.into(),
        version: 1,
        items: corpus.items().ids().to_vec(),
        users: corpus.users().to_vec(),
    };
    fsio::write_json(path, &snap)
}

pub fn read_snapshot(path: &Path) -> Result<InteractionCorpus> {
    let snap: Snapshot = fsio::read_json(path)?;
    if snap.format != SNAPSHOT_FORMAT || snap.version != 1 {
        return Err(Error::Format(format!(
            "{}: not a version-1 corpus snapshot",
            path.display()
        )));
    }
    InteractionCorpus::from_sequences(Vocab::from_ids(snap.items)?, snap.users)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_corpus;
    use std::io::Write;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn three_line_fixture() {
        let f = write("# header\nu1\ti1\t3\nu1\ti2\t1\n\nu2\ti1\t2\n");
        let got = load_interactions(f.path()).unwrap();
        assert_eq!(got.malformed, 0);
        let items: Vec<&str> = got.records.iter().map(|r| r.item.as_str()).collect();
        assert_eq!(items, ["i1", "i2", "i1"]);
        assert_eq!(got.records[0].timestamp, 3);
    }

    #[test]
    fn empty_file_is_empty_list() {
        let f = write("");
        assert!(load_interactions(f.path()).unwrap().records.is_empty());
    }

    #[test]
    fn too_many_malformed_lines() {
        let f = write("u\ti\t1\nbroken line\nu\ti\tnot-a-number\n");
        assert!(matches!(load_interactions(f.path()), Err(Error::Format(_))));
        let mut ok = String::new();
        for t in 0..200 {
            ok.push_str(&format!("u\ti\t{t}\n"));
        }
        ok.push_str("garbage\n");
        assert_eq!(load_interactions(write(&ok).path()).unwrap().malformed, 1);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_interactions(Path::new("/nonexistent/x.tsv")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn snapshot_round_trip() {
        let raw: Vec<Interaction> = (0..20)
            .map(|t| Interaction {
                user: format!("u{}", t % 3),
                item: format!("i{}", t % 4),
                timestamp: t,
            })
            .collect();
        let c = build_corpus(&raw, 1, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("corpus.json");
        write_snapshot(&c, &p).unwrap();
        assert_eq!(read_snapshot(&p).unwrap(), c);
    }
}
