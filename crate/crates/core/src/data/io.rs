//! Readers and writers for the on-disk formats.
//!
//! Embeddings: binary container (magic `EMB1`, little-endian, `u32` dim,
//! `u64` count, then per record three u16-length-prefixed UTF-8 strings and
//! `dim` f32 components) or TSV (`utt \t speaker \t dataset \t v1,v2,...`,
//! values to 9 significant digits). Trials: `enroll test [label]`. Scores:
//! `enroll test score`. Text formats use ASCII whitespace and `.` decimals
//! regardless of locale.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{Embedding, EmbeddingSet, ScoreSet, Trial, TrialLabel, TrialList};
use crate::error::{Error, Result};

const EMB_MAGIC: &[u8; 4] = b"EMB1";

/// On-disk embedding representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbFormat {
    Binary,
    Tsv,
}

impl EmbFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "binary" | "bin" => Ok(EmbFormat::Binary),
            "tsv" | "text" => Ok(EmbFormat::Tsv),
            other => Err(Error::InvalidArgument(format!(
                "unknown embedding format '{other}' (expected 'binary' or 'tsv')"
            ))),
        }
    }
}

pub fn read_embeddings(path: impl AsRef<Path>, format: EmbFormat) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    match format {
        EmbFormat::Binary => read_embeddings_binary(path),
        EmbFormat::Tsv => read_embeddings_tsv(path),
    }
}

pub fn write_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>, format: EmbFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        EmbFormat::Binary => write_embeddings_binary(set, path),
        EmbFormat::Tsv => write_embeddings_tsv(set, path),
    }
}

fn loc(path: &Path, what: impl std::fmt::Display) -> String {
    format!("{}: {}", path.display(), what)
}

fn read_exact_or(reader: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    reader
        .read_exact(buf)
        .map_err(|_| Error::parse(loc(path, what), "unexpected end of file"))
}

fn read_u16(reader: &mut impl Read, path: &Path, what: &str) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact_or(reader, &mut b, path, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_string(reader: &mut impl Read, path: &Path, what: &str) -> Result<String> {
    let len = read_u16(reader, path, what)? as usize;
    let mut b = vec![0u8; len];
    read_exact_or(reader, &mut b, path, what)?;
    String::from_utf8(b).map_err(|_| Error::parse(loc(path, what), "invalid UTF-8 in id"))
}

fn read_embeddings_binary(path: &Path) -> Result<EmbeddingSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_or(&mut reader, &mut magic, path, "header")?;
    if &magic != EMB_MAGIC {
        return Err(Error::parse(
            loc(path, "header"),
            format!("malformed header: bad magic {magic:?}"),
        ));
    }
    let mut b4 = [0u8; 4];
    read_exact_or(&mut reader, &mut b4, path, "header")?;
    let dim = u32::from_le_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    read_exact_or(&mut reader, &mut b8, path, "header")?;
    let count = u64::from_le_bytes(b8) as usize;
    if dim == 0 {
        return Err(Error::parse(loc(path, "header"), "dim must be >= 1"));
    }

    let mut set = EmbeddingSet::new(dim)?;
    let mut comp = vec![0u8; dim * 4];
    for rec_idx in 1..=count {
        let what = format!("record {rec_idx}");
        let utt_id = read_string(&mut reader, path, &what)?;
        let speaker_id = read_string(&mut reader, path, &what)?;
        let dataset_id = read_string(&mut reader, path, &what)?;
        read_exact_or(&mut reader, &mut comp, path, &what)?;
        let mut vector = Vec::with_capacity(dim);
        for c in comp.chunks_exact(4) {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !v.is_finite() {
                return Err(Error::parse(
                    loc(path, &what),
                    format!("non-finite value in '{utt_id}'"),
                ));
            }
            vector.push(v as f64);
        }
        set.push(Embedding::new(utt_id, speaker_id, dataset_id, vector))
            .map_err(|e| Error::parse(loc(path, &what), e.to_string()))?;
    }
    let mut tail = [0u8; 1];
    if reader.read(&mut tail).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::parse(
            loc(path, "trailer"),
            "trailing bytes after last record",
        ));
    }
    Ok(set)
}

fn write_embeddings_binary(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    w.write_all(EMB_MAGIC).map_err(io_err)?;
    w.write_all(&(set.dim() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(set.len() as u64).to_le_bytes()).map_err(io_err)?;
    for rec in set.iter() {
        for s in [&rec.utt_id, &rec.speaker_id, &rec.dataset_id] {
            let bytes = s.as_bytes();
            if bytes.len() > u16::MAX as usize {
                return Err(Error::InvalidArgument(format!(
                    "id '{}...' exceeds {} bytes",
                    &s[..32.min(s.len())],
                    u16::MAX
                )));
            }
            w.write_all(&(bytes.len() as u16).to_le_bytes()).map_err(io_err)?;
            w.write_all(bytes).map_err(io_err)?;
        }
        for &v in &rec.vector {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

fn read_embeddings_tsv(path: &Path) -> Result<EmbeddingSet> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut set: Option<EmbeddingSet> = None;
    let mut rec_idx = 0usize;
    for (line_no, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        rec_idx += 1;
        let what = format!("record {rec_idx} (line {})", line_no + 1);
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                loc(path, &what),
                format!("expected 4 tab-separated fields, got {}", fields.len()),
            ));
        }
        let mut vector = Vec::new();
        for tok in fields[3].split(',') {
            let v: f64 = tok.trim().parse().map_err(|_| {
                Error::parse(loc(path, &what), format!("bad float '{}'", tok.trim()))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(loc(path, &what), "non-finite value"));
            }
            vector.push(v);
        }
        let rec = Embedding::new(fields[0], fields[1], fields[2], vector);
        match &mut set {
            None => {
                let mut s = EmbeddingSet::new(rec.dim())
                    .map_err(|e| Error::parse(loc(path, &what), e.to_string()))?;
                s.push(rec)
                    .map_err(|e| Error::parse(loc(path, &what), e.to_string()))?;
                set = Some(s);
            }
            Some(s) => {
                if rec.dim() != s.dim() {
                    return Err(Error::parse(
                        loc(path, &what),
                        format!("dimension mismatch at record {rec_idx}"),
                    ));
                }
                s.push(rec)
                    .map_err(|e| Error::parse(loc(path, &what), e.to_string()))?;
            }
        }
    }
    set.map_or_else(
        || Err(Error::parse(loc(path, "file"), "no records")),
        Ok,
    )
}

fn write_embeddings_tsv(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    for rec in set.iter() {
        write!(w, "{}\t{}\t{}\t", rec.utt_id, rec.speaker_id, rec.dataset_id).map_err(io_err)?;
        for (i, &v) in rec.vector.iter().enumerate() {
            if i > 0 {
                write!(w, ",").map_err(io_err)?;
            }
            // 9 significant digits
            write!(w, "{v:.8e}").map_err(io_err)?;
        }
        writeln!(w).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<TrialList> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut list = TrialList::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let what = format!("line {}", line_no + 1);
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        let label = match fields.len() {
            2 => TrialLabel::Unknown,
            3 => TrialLabel::parse(fields[2])
                .map_err(|e| Error::parse(loc(path, &what), e.to_string()))?,
            n => {
                return Err(Error::parse(
                    loc(path, &what),
                    format!("expected 2 or 3 fields, got {n}"),
                ))
            }
        };
        list.push(Trial {
            enroll_id: fields[0].to_string(),
            test_id: fields[1].to_string(),
            label,
        })
        .map_err(|e| Error::parse(loc(path, &what), e.to_string()))?;
    }
    Ok(list)
}

pub fn write_trials(list: &TrialList, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in list.iter() {
        writeln!(w, "{} {} {}", t.enroll_id, t.test_id, t.label.as_str())
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<ScoreSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut trials = TrialList::new();
    let mut scores = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let what = format!("line {}", line_no + 1);
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                loc(path, &what),
                format!("expected 3 fields, got {}", fields.len()),
            ));
        }
        let score: f64 = fields[2]
            .parse()
            .map_err(|_| Error::parse(loc(path, &what), format!("bad score '{}'", fields[2])))?;
        trials
            .push(Trial {
                enroll_id: fields[0].to_string(),
                test_id: fields[1].to_string(),
                label: TrialLabel::Unknown,
            })
            .map_err(|e| Error::parse(loc(path, &what), e.to_string()))?;
        scores.push(score);
    }
    ScoreSet::new(trials, scores)
}

/// Scores are written with shortest round-trip formatting, so
/// `read_scores(write_scores(s))` reproduces the values exactly.
pub fn write_scores(set: &ScoreSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (t, s) in set.iter() {
        writeln!(w, "{} {} {}", t.enroll_id, t.test_id, s).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_set() -> EmbeddingSet {
        EmbeddingSet::from_records(
            3,
            vec![
                Embedding::new("u1", "s1", "train", vec![1.0, 2.0, 3.0]),
                Embedding::new("u2", "s2", "train", vec![-0.5, 0.25, 4.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("set.tsv");
        let set = tiny_set();
        write_embeddings(&set, &p, EmbFormat::Tsv).unwrap();
        let back = read_embeddings(&p, EmbFormat::Tsv).unwrap();
        assert_eq!(back.dim(), 3);
        assert_eq!(back.len(), 2);
        for (a, b) in set.iter().zip(back.iter()) {
            assert_eq!(a.utt_id, b.utt_id);
            for (x, y) in a.vector.iter().zip(b.vector.iter()) {
                assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn tsv_dimension_mismatch_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tsv");
        std::fs::write(&p, "u1\ts1\td\t1.0,2.0,3.0\nu2\ts1\td\t1.0,2.0,3.0,4.0\n").unwrap();
        let err = read_embeddings(&p, EmbFormat::Tsv).unwrap_err();
        assert!(
            err.to_string().contains("dimension mismatch at record 2"),
            "got: {err}"
        );
    }

    #[test]
    fn binary_empty_set_is_16_byte_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.emb");
        let set = EmbeddingSet::new(5).unwrap();
        write_embeddings(&set, &p, EmbFormat::Binary).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[0..4], b"EMB1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 5);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 0);
        let back = read_embeddings(&p, EmbFormat::Binary).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.dim(), 5);
    }

    #[test]
    fn binary_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.emb");
        std::fs::write(&p, b"NOPE\x01\x00\x00\x00").unwrap();
        let err = read_embeddings(&p, EmbFormat::Binary).unwrap_err();
        assert!(err.to_string().contains("malformed header") || err.to_string().contains("magic"));

        let set = tiny_set();
        let good = dir.path().join("good.emb");
        write_embeddings(&set, &good, EmbFormat::Binary).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, &bytes).unwrap();
        let err = read_embeddings(&p, EmbFormat::Binary).unwrap_err();
        assert!(err.to_string().contains("record 2"), "got: {err}");
    }

    #[test]
    fn trials_labels_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trials.txt");
        std::fs::write(&p, "e1 t1 target\ne1 t2\ne2\tt1\tnontarget\n").unwrap();
        let list = read_trials(&p).unwrap();
        assert_eq!(list.len(), 3);
        assert_eq!(list.trials()[0].label, TrialLabel::Target);
        assert_eq!(list.trials()[1].label, TrialLabel::Unknown);
        assert_eq!(list.trials()[2].label, TrialLabel::Nontarget);

        std::fs::write(&p, "e1 t1 target\ne1 t1 nontarget\n").unwrap();
        let err = read_trials(&p).unwrap_err();
        assert!(err.to_string().contains("duplicate trial pair"));
    }

    #[test]
    fn scores_round_trip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.txt");
        let trials = TrialList::from_trials(vec![
            Trial {
                enroll_id: "e1".into(),
                test_id: "t1".into(),
                label: TrialLabel::Unknown,
            },
            Trial {
                enroll_id: "e2".into(),
                test_id: "t2".into(),
                label: TrialLabel::Unknown,
            },
        ])
        .unwrap();
        let set = ScoreSet::new(trials, vec![0.12345678901234567, -3.5e-12]).unwrap();
        write_scores(&set, &p).unwrap();
        let back = read_scores(&p).unwrap();
        assert_eq!(back.scores(), set.scores());
    }

    #[test]
    fn score_count_mismatch_is_an_error() {
        let trials = TrialList::from_trials(vec![Trial {
            enroll_id: "e".into(),
            test_id: "t".into(),
            label: TrialLabel::Unknown,
        }])
        .unwrap();
        assert!(ScoreSet::new(trials, vec![1.0, 2.0]).is_err());
    }

    proptest! {
        // Binary round-trip is bit exact for f32-representable components.
        #[test]
        fn binary_round_trip_bit_exact(
            seed in 0u64..1000,
            n in 1usize..40,
            dim in 1usize..20,
        ) {
            use rand::prelude::*;
            use rand_chacha::ChaCha12Rng;
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut set = EmbeddingSet::new(dim).unwrap();
            for i in 0..n {
                let v: Vec<f64> = (0..dim)
                    .map(|_| rng.random_range(-100.0f32..100.0f32) as f64)
                    .collect();
                set.push(Embedding::new(
                    format!("u{i}"),
                    format!("s{}", i % 5),
                    "d",
                    v,
                ))
                .unwrap();
            }
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("rt.emb");
            write_embeddings(&set, &p, EmbFormat::Binary).unwrap();
            let back = read_embeddings(&p, EmbFormat::Binary).unwrap();
            prop_assert_eq!(&set, &back);
        }
    }
}
